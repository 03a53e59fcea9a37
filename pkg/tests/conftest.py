"""Shared fixtures and an independent forward-pass oracle for gradient checks."""
import numpy as np
import pytest

from leopard.clustering import target_distribution
from leopard.learner import LearnerConfig
from leopard.network import LeopardModel, ModelConfig
from leopard.numerics import finite_diff_gradient, relative_error
from leopard.stream import Domain


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def small_model(seed=0, depth=2, width=4, n_clusters=3, source_dim=3, target_dim=5, n_classes=3,
                alpha1=0.1):
    """Random model with widths <= 8 and a few random clusters per layer."""
    cfg = ModelConfig(source_dim, target_dim, n_classes, adapter_dim=5, extractor_widths=(6, 5),
                      initial_width=width, dc_hidden=4, alpha1=alpha1, seed=seed)
    model = LeopardModel(cfg)
    rng = np.random.default_rng(seed + 100)
    for _ in range(depth - 1):
        model.add_layer()
    for L in model.layers:
        # biases away from zero keep relu kinks out of the finite-difference probes
        L.b[:] = rng.uniform(0.05, 0.3, L.width)
        L.c[:] = rng.uniform(0.05, 0.3, L.input_dim)
        for _ in range(n_clusters):
            L.clusters.add(rng.uniform(0.0, 1.0, L.width))
    for key, v in model.ext.items():
        if key.endswith(".b"):
            v[:] = rng.uniform(0.05, 0.3, v.shape)
    model.dc["dc.b1"][:] = rng.uniform(0.05, 0.3, model.dc["dc.b1"].shape)
    return model


def oracle_extract(p, x, domain):
    d = Domain(domain).value
    z = x @ p[f"adapter.{d}.W"].T + p[f"adapter.{d}.b"]
    i = 0
    while f"ext.{i}.W" in p:
        z = relu(z @ p[f"ext.{i}.W"].T + p[f"ext.{i}.b"])
        i += 1
    return z


def oracle_reconstruct(p, x, domain, depth):
    d = Domain(domain).value
    h = oracle_extract(p, x, domain)
    for l in range(depth):
        h = relu(h @ p[f"sae.{l}.W"].T + p[f"sae.{l}.b"])
    for l in range(depth - 1, -1, -1):
        h = relu(h @ p[f"sae.{l}.W"] + p[f"sae.{l}.c"])
    i = 0
    while f"ext.{i}.W" in p:
        i += 1
    for j in range(i - 1, -1, -1):
        pre = h @ p[f"ext.{j}.W"] + p[f"ext.{j}.c"]
        h = relu(pre) if j > 0 else pre
    return sigmoid(h @ p[f"adapter.{d}.W"] + p[f"adapter.{d}.c"])


def oracle_phi(h, C, lam=1.0):
    sq = ((h[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    q = (1.0 + sq / lam) ** (-(lam + 1.0) / 2.0)
    return q / q.sum(axis=1, keepdims=True)


def frozen_layer_inputs(p, xs, xt, depth):
    """Pooled extractor output and the encodings feeding each deeper layer."""
    H = [np.vstack([oracle_extract(p, xs, Domain.SOURCE), oracle_extract(p, xt, Domain.TARGET)])]
    for l in range(depth - 1):
        H.append(relu(H[-1] @ p[f"sae.{l}.W"].T + p[f"sae.{l}.b"]))
    return H


def frozen_targets(p, H):
    return [target_distribution(oracle_phi(relu(H[l] @ p[f"sae.{l}.W"].T + p[f"sae.{l}.b"]), p[f"sae.{l}.C"]))
            for l in range(len(H))]


def oracle_cluster_loss(p, xs, xt, depth, H, Phi, alpha2):
    """End-to-end term through everything plus layer terms on frozen inputs and targets."""
    n = len(xs) + len(xt)
    loss = sum(float(np.sum(np.mean((oracle_reconstruct(p, x, d, depth) - x) ** 2, axis=1)))
               for x, d in ((xs, Domain.SOURCE), (xt, Domain.TARGET))) / n
    for l in range(depth):
        h = relu(H[l] @ p[f"sae.{l}.W"].T + p[f"sae.{l}.b"])
        h_hat = relu(h @ p[f"sae.{l}.W"] + p[f"sae.{l}.c"])
        loss += float(np.mean((h_hat - H[l]) ** 2))
        phi = oracle_phi(h, p[f"sae.{l}.C"])
        loss += alpha2 * float(np.sum(phi * np.log(phi / Phi[l]))) / n
    return loss


def oracle_cd_loss(p, xs, xt):
    def logit(x, d):
        z = oracle_extract(p, x, d)
        return (relu(z @ p["dc.W1"].T + p["dc.b1"]) @ p["dc.W2"].T + p["dc.b2"])[:, 0]
    return float(np.mean(np.logaddexp(0, -logit(xs, Domain.SOURCE))) +
                 np.mean(np.logaddexp(0, logit(xt, Domain.TARGET))))


def check_gradients(params, grads, loss, step=1e-5):
    """Largest relative error between ``grads`` and central differences of ``loss(params)``."""
    worst = 0.0
    for key, g in grads.items():
        def f(w, key=key):
            saved = params[key].copy()
            params[key][...] = w
            val = loss(params)
            params[key][...] = saved
            return val
        worst = max(worst, relative_error(g, finite_diff_gradient(f, params[key].copy(), step=step)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_learner_config():
    return LearnerConfig(init_epochs=5, epochs=1, adapter_dim=6, extractor_widths=(8, 6), initial_width=4,
                         dc_hidden=4, minibatch_size=32)


# -- acceptance reporting -----------------------------------------------------

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    measured = dict(item.user_properties).get("measured", "")
    _VERDICTS[mark.args[0]] = (mark.args[1], rep.passed, measured)
    line = f"criterion {mark.args[0]} {'PASS' if rep.passed else 'FAIL'}: {mark.args[1]}"
    print(f"\n{line}" + (f" [{measured}]" if measured else ""))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        title, ok, measured = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}"
                                    + (f" [{measured}]" if measured else ""))
