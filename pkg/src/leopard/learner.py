"""Training loop: warm-up, cluster initialisation, joint clustering / cross-domain
optimisation per batch pair, structural hooks and prequential scoring.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import (kl_loss, maybe_grow_cluster, predict, similarity, target_distribution,
                         update_allegiance)
from .network import Group, LeopardModel, ModelConfig, _acc, backprop_chain, reverse_gradient, run_chain
from .numerics import NumericError, sigmoid
from .stream import Domain, StreamBatch
from .structure import (DriftDetector, DriftState, EventLog, detect_drift, observe_layer, on_drift,
                        prune_candidate, should_grow_node, should_prune_node)

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """A training path was handed labels it must not see."""


_SEVERITY = [DriftState.STABLE, DriftState.WARNING, DriftState.DRIFT]


@dataclass
class LearnerConfig:
    alpha1: float = 0.1
    alpha2: float = 1.0
    lam: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.95
    init_epochs: int = 50
    epochs: int = 1
    dc_epochs: int = 1
    minibatch_size: int = 32
    adapter_dim: int = 8
    extractor_widths: Tuple[int, ...] = (32, 16)
    initial_width: int = 8
    dc_hidden: int = 16
    alpha_x: float = 0.001
    alpha_d: float = 0.001
    alpha_w: float = 0.005
    spc_burn_in: int = 10
    shared_input_features: int = 0
    adapter_rest_scale: float = 1.0

    def __post_init__(self):
        self.extractor_widths = tuple(self.extractor_widths)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("alpha1", "alpha2", "lam", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lam <= 0 or self.learning_rate <= 0:
            raise ValueError("lam and learning_rate must be positive")

    def model_config(self, source_dim: int, target_dim: int, n_classes: int, seed: int) -> ModelConfig:
        return ModelConfig(source_dim=source_dim, target_dim=target_dim, n_classes=n_classes,
                           adapter_dim=self.adapter_dim, extractor_widths=self.extractor_widths,
                           initial_width=self.initial_width, dc_hidden=self.dc_hidden,
                           lam=self.lam, alpha1=self.alpha1, alpha2=self.alpha2,
                           learning_rate=self.learning_rate, momentum=self.momentum, seed=seed)


@dataclass(frozen=True)
class Ablation:
    structure_learning: bool = True
    kl_loss: bool = True
    cd_loss: bool = True

    PRESETS = {"A": (False, False, False), "B": (False, True, True),
               "C": (True, False, False), "full": (True, True, True)}

    @classmethod
    def preset(cls, name: str) -> "Ablation":
        try:
            return cls(*cls.PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(cls.PRESETS)}") from None


@dataclass
class LossReport:
    """Loss breakdown of one batch.

    ``cluster = recon_end_to_end + sum(recon_layers) + alpha2 * sum(kl_layers)``
    and ``total = cluster - alpha1 * cd``.
    """

    recon_end_to_end: float = 0.0
    recon_layers: List[float] = field(default_factory=list)
    kl_layers: List[float] = field(default_factory=list)
    cluster: float = 0.0
    cd: float = 0.0
    total: float = 0.0
    alpha1: float = 0.1
    alpha2: float = 1.0

    def finalize(self) -> "LossReport":
        self.cluster = self.recon_end_to_end + sum(
            r + self.alpha2 * k for r, k in zip(self.recon_layers, self.kl_layers))
        self.total = self.cluster - self.alpha1 * self.cd
        return self

    def identity_gap(self) -> float:
        cluster = self.recon_end_to_end + sum(
            r + self.alpha2 * k for r, k in zip(self.recon_layers, self.kl_layers))
        return max(abs(cluster - self.cluster), abs(cluster - self.alpha1 * self.cd - self.total))

    def to_dict(self) -> dict:
        return {"recon_end_to_end": self.recon_end_to_end, "recon_layers": list(self.recon_layers),
                "kl_layers": list(self.kl_layers), "cluster": self.cluster, "cd": self.cd,
                "total": self.total}


def _empty(dim):
    return np.zeros((0, dim))


def compute_cluster_loss(model: LeopardModel, xs, xt, alpha2: float = 1.0,
                         targets: Optional[Sequence[Optional[np.ndarray]]] = None,
                         kl: bool = True) -> Tuple[LossReport, Dict[str, np.ndarray]]:
    """Clustering loss of a pooled source+target batch and its gradients.

    The end-to-end reconstruction term back-propagates through the whole
    network. Each layer's reconstruction + KL term only reaches that layer's
    weights, biases and centroids (its input is treated as a constant).
    ``targets[l]`` overrides the auxiliary distribution of layer ``l``; by
    default it is derived from the current soft assignments.
    """
    xs = _empty(model.dims[Domain.SOURCE]) if xs is None else np.atleast_2d(xs)
    xt = _empty(model.dims[Domain.TARGET]) if xt is None else np.atleast_2d(xt)
    n_total = len(xs) + len(xt)
    if n_total == 0:
        raise ValueError("empty batch")
    params = model.parameters()
    grads: Dict[str, np.ndarray] = {}
    report = LossReport(alpha1=model.config.alpha1, alpha2=alpha2)
    n_ext = len(model.extractor_steps(Domain.SOURCE))

    pooled = []
    sse = 0.0
    for x, dom in ((xs, Domain.SOURCE), (xt, Domain.TARGET)):
        if len(x) == 0:
            continue
        out, tape = run_chain(params, model.end_to_end_steps(dom), x)
        err = out - x
        sse += float(np.sum(err ** 2)) / x.shape[1]
        backprop_chain(params, tape, 2.0 * err / (x.shape[1] * n_total), grads)
        pooled.append(tape[n_ext - 1].out)
    report.recon_end_to_end = sse / n_total

    H = np.vstack(pooled)
    for l, layer in enumerate(model.layers):
        out, tape = run_chain(params, model.layer_steps(l), H)
        h = tape[0].out
        err = out - H
        report.recon_layers.append(float(np.mean(err ** 2)))
        extra = {}
        kl_value = 0.0
        if kl and alpha2 > 0 and len(layer.clusters):
            Phi = None if targets is None else targets[l]
            if Phi is None:
                Phi = target_distribution(similarity(h, layer.clusters, model.lam).phi)
            res = kl_loss(None, Phi, h=h, clusters=layer.clusters, lam=model.lam)
            kl_value = res.loss / n_total
            extra[0] = alpha2 * res.grad_h / n_total
            _acc(grads, f"sae.{l}.C", alpha2 * res.grad_centroids / n_total)
        report.kl_layers.append(kl_value)
        backprop_chain(params, tape, 2.0 * err / err.size, grads, extra)
        H = h
    report.finalize()
    if not np.isfinite(report.cluster):
        raise NumericError("clustering loss is not finite")
    return report, grads


@dataclass
class CdLossResult:
    loss: float
    dc_grads: Dict[str, np.ndarray]
    extractor_grads: Dict[str, np.ndarray]
    alpha1: float

    @property
    def reversed_extractor_grads(self) -> Dict[str, np.ndarray]:
        return reverse_gradient(self.extractor_grads, self.alpha1)


def compute_cd_loss(model: LeopardModel, xs, xt) -> CdLossResult:
    """Domain-classification loss: mean BCE on source (label 1) plus mean BCE on target (label 0).

    Gradients are raw (no reversal, no ``alpha1``); :meth:`LeopardModel.apply_updates`
    applies the reversal for the extractor.
    """
    xs, xt = np.atleast_2d(xs), np.atleast_2d(xt)
    if len(xs) == 0 or len(xt) == 0:
        raise ValueError("both streams must contribute samples to the domain loss")
    dc_grads: Dict[str, np.ndarray] = {}
    ext_grads: Dict[str, np.ndarray] = {}
    loss = 0.0
    for x, dom, origin in ((xs, Domain.SOURCE, 1.0), (xt, Domain.TARGET, 0.0)):
        Z, tape_e = run_chain(model.ext, model.extractor_steps(dom), x)
        logit, tape_d = run_chain(model.dc, model.DC_STEPS, Z)
        a = logit[:, 0]
        n = len(x)
        if origin == 1.0:
            loss += float(np.mean(np.logaddexp(0.0, -a)))
        else:
            loss += float(np.mean(np.logaddexp(0.0, a)))
        dlogit = ((sigmoid(a) - origin) / n)[:, None]
        dZ = backprop_chain(model.dc, tape_d, dlogit, dc_grads)
        backprop_chain(model.ext, tape_e, dZ, ext_grads)
    if not np.isfinite(loss):
        raise NumericError("cross-domain loss is not finite")
    return CdLossResult(loss, dc_grads, ext_grads, model.config.alpha1)


def _split(idx: np.ndarray, n_parts: int) -> List[np.ndarray]:
    return np.array_split(idx, n_parts)


def _n_minibatches(n: int, size: int) -> int:
    return max(1, int(np.ceil(n / max(size, 1))))


def warm_up(model: LeopardModel, prerecorded: StreamBatch, epochs: int,
            minibatch_size: int = 32, rng_seed: int = 0) -> List[float]:
    """Reconstruction-only pretraining on the prerecorded source batch.

    :return: end-to-end reconstruction MSE on the whole batch before training and after each epoch
    """
    X = prerecorded.features
    if len(X) == 0:
        raise ValueError("prerecorded batch is empty")
    rng = np.random.default_rng(rng_seed)
    history = [float(np.mean((model.reconstruct(X, Domain.SOURCE) - X) ** 2))]
    for _ in range(epochs):
        for mb in _split(rng.permutation(len(X)), _n_minibatches(len(X), minibatch_size)):
            _, grads = compute_cluster_loss(model, X[mb], None, kl=False)
            model.apply_updates(Group.EXTRACTOR, grads)
            model.apply_updates(Group.CLASSIFIER, grads)
        history.append(float(np.mean((model.reconstruct(X, Domain.SOURCE) - X) ** 2)))
    return history


def _labelled(prerecorded: StreamBatch):
    mask = prerecorded.labelled_mask
    return prerecorded.features[mask], prerecorded.labels[mask]


def init_clusters(model: LeopardModel, prerecorded: StreamBatch,
                  layers: Optional[Sequence[int]] = None) -> None:
    """Seed clusters from the labelled prerecorded samples and compute allegiance.

    Refuses to touch a layer that already has clusters; clear them first with
    :func:`reset_clusters`.
    """
    layers = list(range(model.depth)) if layers is None else list(layers)
    busy = [l for l in layers if len(model.layers[l].clusters)]
    if busy:
        raise RuntimeError(f"layers {busy} already hold clusters; reset them first")
    X, y = _labelled(prerecorded)
    if len(X) == 0:
        raise RuntimeError("no labelled prerecorded samples")
    latents = model.encode(model.extract(X, Domain.SOURCE))
    for l in layers:
        cs = model.layers[l].clusters
        for h in latents[l]:
            maybe_grow_cluster(cs, h)
        update_allegiance(cs, latents[l], y, model.lam)


def reset_clusters(model: LeopardModel, layers: Optional[Sequence[int]] = None) -> None:
    from .clustering import ClusterSet
    for l in (range(model.depth) if layers is None else layers):
        L = model.layers[l]
        L.clusters = ClusterSet(L.width, model.n_classes)
        model.optimizers[Group.CLASSIFIER].forget(f"sae.{l}.C")


def refresh_allegiance(model: LeopardModel, prerecorded: StreamBatch) -> None:
    X, y = _labelled(prerecorded)
    latents = model.encode(model.extract(X, Domain.SOURCE))
    for h, layer in zip(latents, model.layers):
        if len(layer.clusters):
            update_allegiance(layer.clusters, h, y, model.lam)


def evaluate_batch(model: LeopardModel, batch: StreamBatch) -> float:
    """Accuracy of the current model on a batch's hidden labels (no state change)."""
    if batch.eval_labels is None:
        raise ValueError(f"batch {batch.batch_index} of the {batch.domain.value} stream has no evaluation labels")
    truth = batch.eval_labels.reveal("evaluate")
    if len(truth) == 0:
        return float("nan")
    pred = predict(model, batch.features, batch.domain).labels
    return float(np.mean(pred == truth))


class Learner:
    """Runs the per-batch procedure on one model.

    Per batch pair: drift check per stream (may add a layer), SPC node
    growing/pruning on the pooled batch, ``epochs`` passes of the clustering
    loss, ``dc_epochs`` passes of the cross-domain loss, cluster growth and
    finally an allegiance refresh from the prerecorded labels.

    ``recon_only`` keeps just the reconstruction passes (no clusters, no
    domain loss, no structure); the AE+KMeans baseline trains this way.
    """

    def __init__(self, model: LeopardModel, prerecorded: StreamBatch, config: LearnerConfig,
                 ablation: Ablation = Ablation(), rng_seed: int = 0, recon_only: bool = False):
        self.model = model
        self.recon_only = recon_only
        self.prerecorded = prerecorded
        self.config = config
        self.ablation = ablation
        self.rng = np.random.default_rng(rng_seed)
        c = config
        # the detector only reacts to a rising mean, so each stream is watched
        # twice: once on the statistic and once on its negation
        self.detectors = {(d, sign): DriftDetector(c.alpha_x, c.alpha_d, c.alpha_w)
                          for d in Domain for sign in (1.0, -1.0)}
        self.events = EventLog()
        self._previous_inputs: Dict[Domain, np.ndarray] = {}
        self.numeric_failures = 0
        self.reused_batches = 0
        self.initialized = False

    @property
    def alpha2(self) -> float:
        return self.config.alpha2 if self.ablation.kl_loss else 0.0

    def warm_up(self, epochs: Optional[int] = None) -> List[float]:
        """Reconstruction warm-up, then target-adapter seeding on shared inputs."""
        epochs = self.config.init_epochs if epochs is None else epochs
        history = warm_up(self.model, self.prerecorded, epochs, self.config.minibatch_size,
                          int(self.rng.integers(2 ** 31)))
        self.model.share_adapter_columns(self.config.shared_input_features, self.config.adapter_rest_scale)
        return history

    def init_clusters(self) -> None:
        if self.initialized:
            raise RuntimeError("clusters already initialised")
        init_clusters(self.model, self.prerecorded)
        self.initialized = True

    def initialize_layer(self, l: int) -> None:
        """Recon-only warm-up of a freshly added layer, then its cluster seeding."""
        model = self.model
        X = self.prerecorded.features
        H = model.extract(X, Domain.SOURCE)
        for h in model.encode(H, l):
            H = h
        keys = {f"sae.{l}.W", f"sae.{l}.b", f"sae.{l}.c"}
        params = model.parameters()
        for _ in range(self.config.init_epochs):
            for mb in _split(self.rng.permutation(len(H)), _n_minibatches(len(H), self.config.minibatch_size)):
                out, tape = run_chain(params, model.layer_steps(l), H[mb])
                err = out - H[mb]
                grads: Dict[str, np.ndarray] = {}
                backprop_chain(params, tape, 2.0 * err / err.size, grads)
                model.apply_updates(Group.CLASSIFIER, {k: v for k, v in grads.items() if k in keys})
                params = model.parameters()
        init_clusters(model, self.prerecorded, [l])

    # -- per-batch procedure ------------------------------------------------

    def train_on_batch_pair(self, source: StreamBatch, target: StreamBatch,
                            source_reused: bool = False, target_reused: bool = False
                            ) -> Tuple[Optional[LossReport], List[dict]]:
        for b in (source, target):
            if b.labels is not None and np.any(b.labels != -1):
                raise ProtocolError(f"{b.domain.value} batch {b.batch_index} carries visible labels")
        model = self.model
        k = max(source.batch_index, target.batch_index)
        start = len(self.events.records)
        if source_reused or target_reused:
            self.reused_batches += 1
            log.info("batch %d: reusing the last %s batch for the domain loss only", k,
                     "source" if source_reused else "target")

        structure = self.ablation.structure_learning and not self.recon_only
        if structure:
            self._check_drift(source, target, k, source_reused, target_reused)

        xs = None if source_reused else source.features
        xt = None if target_reused else target.features
        try:
            if self.recon_only:
                for _ in range(self.config.epochs):
                    self._cluster_epoch(xs, xt)
                report, _ = compute_cluster_loss(model, xs, xt, 0.0, kl=False)
                return report, []
            if structure:
                self._evolve_nodes(xs, xt, k)
            for _ in range(self.config.epochs):
                self._cluster_epoch(xs, xt)
            if self.ablation.cd_loss:
                for _ in range(self.config.dc_epochs):
                    self._cd_epoch(source.features, target.features)
            self._grow_clusters(xs, xt)
            refresh_allegiance(model, self.prerecorded)
            report, _ = compute_cluster_loss(model, xs, xt, self.alpha2, kl=self.ablation.kl_loss)
            report.cd = compute_cd_loss(model, source.features, target.features).loss
            report.finalize()
        except NumericError as exc:
            self.numeric_failures += 1
            log.warning("batch %d skipped: %s", k, exc)
            return None, self.events.since(start)
        return report, self.events.since(start)

    def _check_drift(self, source, target, k, source_reused, target_reused) -> None:
        # both halves of the window are pushed through the current extractor so
        # that weight updates between batches do not register as drift
        drifted = False
        for batch, reused in ((source, source_reused), (target, target_reused)):
            if reused:
                continue
            prev = self._previous_inputs.get(batch.domain)
            self._previous_inputs[batch.domain] = batch.features
            stat = self.model.extract(batch.features, batch.domain).mean(axis=1)
            prev_stat = None if prev is None else self.model.extract(prev, batch.domain).mean(axis=1)
            states = []
            for sign in (1.0, -1.0):
                det = self.detectors[(batch.domain, sign)]
                if prev_stat is None:
                    states.append(det.update(sign * stat))
                else:
                    states.append(detect_drift(det, sign * prev_stat, sign * stat))
            state = max(states, key=_SEVERITY.index)
            if state is DriftState.WARNING:
                self.events.add(k, batch.domain.value, "warning")
            elif state is DriftState.DRIFT:
                self.events.add(k, batch.domain.value, "drift")
                drifted = True
        if drifted:
            l = on_drift(self.model, self.model.next_seed(), self.initialize_layer,
                         self.detectors.values())
            self.events.add(k, "both", "add_layer", l, {"width": self.model.layers[l].width})

    def _pooled_features(self, xs, xt) -> np.ndarray:
        parts = []
        if xs is not None:
            parts.append(self.model.extract(xs, Domain.SOURCE))
        if xt is not None:
            parts.append(self.model.extract(xt, Domain.TARGET))
        return np.vstack(parts)

    def _evolve_nodes(self, xs, xt, k) -> None:
        model = self.model
        burn = self.config.spc_burn_in
        H = self._pooled_features(xs, xt)
        for l in range(model.depth):
            layer = model.layers[l]
            h = layer.encode(H)
            observe_layer(layer.spc, H, layer.decode(h), burn)
            layer.observe_contribution(h)
            grew = should_grow_node(layer.spc, burn_in=burn)
            if grew:
                model.grow_node(l, batch_inputs=H)
                self.events.add(k, "both", "grow_node", l, {"width": model.layers[l].width})
            elif should_prune_node(layer.spc, burn_in=burn):
                idx = prune_candidate(layer)
                if idx is not None and model.prune_node(l, idx):
                    self.events.add(k, "both", "prune_node", l,
                                    {"width": model.layers[l].width, "node": idx})
            H = model.layers[l].encode(H)

    def _cluster_epoch(self, xs, xt) -> None:
        model = self.model
        ns = 0 if xs is None else len(xs)
        nt = 0 if xt is None else len(xt)
        latents = model.encode(self._pooled_features(xs, xt))
        targets = None
        if self.ablation.kl_loss and not self.recon_only:
            targets = [target_distribution(similarity(h, L.clusters, model.lam).phi) if len(L.clusters) else None
                       for h, L in zip(latents, model.layers)]
        n_mb = _n_minibatches(ns + nt, self.config.minibatch_size)
        s_parts = _split(self.rng.permutation(ns), n_mb)
        t_parts = _split(self.rng.permutation(nt), n_mb)
        for s_idx, t_idx in zip(s_parts, t_parts):
            if len(s_idx) + len(t_idx) == 0:
                continue
            mb_targets = None
            if targets is not None:
                rows = np.concatenate([s_idx, t_idx + ns])
                mb_targets = [None if T is None else T[rows] for T in targets]
            _, grads = compute_cluster_loss(model, None if xs is None else xs[s_idx],
                                            None if xt is None else xt[t_idx],
                                            self.alpha2, mb_targets,
                                            kl=self.ablation.kl_loss and not self.recon_only)
            model.apply_updates(Group.EXTRACTOR, cluster_grads=grads)
            model.apply_updates(Group.CLASSIFIER, cluster_grads=grads)

    def _cd_epoch(self, xs, xt) -> None:
        model = self.model
        n_mb = _n_minibatches(len(xs) + len(xt), self.config.minibatch_size)
        for s_idx, t_idx in zip(_split(self.rng.permutation(len(xs)), n_mb),
                                _split(self.rng.permutation(len(xt)), n_mb)):
            if len(s_idx) == 0 or len(t_idx) == 0:
                continue
            res = compute_cd_loss(model, xs[s_idx], xt[t_idx])
            model.apply_updates(Group.DOMAIN_CLASSIFIER, cd_grads=res.dc_grads)
            model.apply_updates(Group.EXTRACTOR, cd_grads=res.extractor_grads)

    def _grow_clusters(self, xs, xt) -> int:
        model = self.model
        latents = model.encode(self._pooled_features(xs, xt))
        grown = 0
        order = self.rng.permutation(len(latents[0]))
        for h, layer in zip(latents, model.layers):
            for i in order:
                grown += maybe_grow_cluster(layer.clusters, h[i])
        return grown
