"""Feature extractor, tied-weight stacked autoencoder and domain classifier.

Backward passes are hand-written: every sub-network is a chain of dense
steps ``y = act(x W^T + b)`` (encoder use) or ``y = act(x W + c)`` (tied
decoder use), recorded on a tape and replayed in reverse. Gradients are
accumulated per parameter key, so a tied matrix collects both its encoder
and its decoder contributions.

Parameter keys::

    adapter.<source|target>.{W,b,c}   stream-specific input adapter
    ext.<i>.{W,b,c}                   shared extractor trunk
    sae.<l>.{W,b,c,C}                 autoencoder layer l (C = centroids)
    dc.{W1,b1,W2,b2}                  domain classifier
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .clustering import ClusterSet
from .numerics import NumericError, OptimizerState, relu, sigmoid, sgd_momentum_step, xavier_init
from .stream import Domain
from .structure import SpcStats

log = logging.getLogger(__name__)

MIN_WIDTH = 2


class Group(str, enum.Enum):
    EXTRACTOR = "extractor"
    CLASSIFIER = "classifier"
    DOMAIN_CLASSIFIER = "domain_classifier"


_ACT = {"relu": relu, "sigmoid": sigmoid, "linear": lambda x: x}


class Step(NamedTuple):
    w: str
    b: str
    transpose: bool
    act: str


class _Record(NamedTuple):
    step: Step
    inp: np.ndarray
    out: np.ndarray


def run_chain(params: Dict[str, np.ndarray], steps: Sequence[Step], x: np.ndarray):
    """Forward pass through ``steps``; returns the output and the tape."""
    tape = []
    for st in steps:
        W = params[st.w]
        pre = (x @ W if st.transpose else x @ W.T) + params[st.b]
        out = _ACT[st.act](pre)
        tape.append(_Record(st, x, out))
        x = out
    return x, tape


def backprop_chain(params, tape, grad_out, grads: Dict[str, np.ndarray],
                   extra: Optional[Dict[int, np.ndarray]] = None) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; returns d(loss)/d(chain input).

    ``extra[i]`` is added to the gradient arriving at the output of step ``i``.
    """
    g = grad_out
    for i in range(len(tape) - 1, -1, -1):
        st, inp, out = tape[i]
        if extra and i in extra:
            g = g + extra[i]
        if st.act == "relu":
            g = g * (out > 0)
        elif st.act == "sigmoid":
            g = g * out * (1.0 - out)
        W = params[st.w]
        if st.transpose:
            dW = inp.T @ g
            dx = g @ W.T
        else:
            dW = g.T @ inp
            dx = g @ W
        _acc(grads, st.w, dW)
        _acc(grads, st.b, g.sum(axis=0))
        g = dx
    return g


def _acc(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def reverse_gradient(grad, alpha1: float):
    """Backward rule of the gradient-reversal layer: ``-alpha1 * grad``."""
    if isinstance(grad, dict):
        return {k: -alpha1 * np.asarray(v) for k, v in grad.items()}
    return -alpha1 * np.asarray(grad, dtype=float)


def gradient_reversal_forward(x):
    return x


class LayerState:
    """One tied-weight autoencoder layer with its clusters and SPC statistics."""

    def __init__(self, W: np.ndarray, n_classes: int, b=None, c=None):
        self.W = np.asarray(W, dtype=float)
        R, u = self.W.shape
        self.b = np.zeros(R) if b is None else np.asarray(b, dtype=float)
        self.c = np.zeros(u) if c is None else np.asarray(c, dtype=float)
        self.clusters = ClusterSet(R, n_classes)
        self.spc = SpcStats()
        self.contribution = np.zeros(R)
        self.contribution_n = 0

    @property
    def width(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def W_dec(self) -> np.ndarray:
        return self.W.T

    def encode(self, h_prev):
        return relu(h_prev @ self.W.T + self.b)

    def decode(self, h, activation: str = "relu"):
        return _ACT[activation](h @ self.W + self.c)

    def observe_contribution(self, h) -> None:
        h = np.atleast_2d(h)
        n = h.shape[0]
        total = self.contribution_n + n
        self.contribution = (self.contribution * self.contribution_n + np.abs(h).sum(axis=0)) / total
        self.contribution_n = total


@dataclass
class ModelConfig:
    source_dim: int
    target_dim: int
    n_classes: int
    adapter_dim: int = 8
    extractor_widths: Tuple[int, ...] = (32, 16)
    initial_width: int = 8
    dc_hidden: int = 16
    lam: float = 1.0
    alpha1: float = 0.1
    alpha2: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.95
    seed: int = 0


class LeopardModel:
    """Extractor + evolving tied-weight autoencoder stack + domain classifier."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        self.n_classes = c.n_classes
        self.lam = c.lam
        self._seed = c.seed * 1000 + 17
        self.dims = {Domain.SOURCE: c.source_dim, Domain.TARGET: c.target_dim}
        self.ext: Dict[str, np.ndarray] = {}
        for dom, d in self.dims.items():
            self.ext[f"adapter.{dom.value}.W"] = xavier_init(d, c.adapter_dim, self.next_seed())
            self.ext[f"adapter.{dom.value}.b"] = np.zeros(c.adapter_dim)
            self.ext[f"adapter.{dom.value}.c"] = np.zeros(d)
        fan_in = c.adapter_dim
        for i, width in enumerate(c.extractor_widths):
            self.ext[f"ext.{i}.W"] = xavier_init(fan_in, width, self.next_seed())
            self.ext[f"ext.{i}.b"] = np.zeros(width)
            self.ext[f"ext.{i}.c"] = np.zeros(fan_in)
            fan_in = width
        self.feature_dim = fan_in
        self.layers: List[LayerState] = [
            LayerState(xavier_init(fan_in, c.initial_width, self.next_seed()), c.n_classes)]
        self.dc = {"dc.W1": xavier_init(fan_in, c.dc_hidden, self.next_seed()),
                   "dc.b1": np.zeros(c.dc_hidden),
                   "dc.W2": xavier_init(c.dc_hidden, 1, self.next_seed()),
                   "dc.b2": np.zeros(1)}
        self.optimizers = {g: OptimizerState(c.learning_rate, c.momentum) for g in Group}

    def next_seed(self) -> int:
        self._seed += 1
        return self._seed

    # -- parameters -------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self, group: Optional[Group] = None) -> Dict[str, np.ndarray]:
        """Live references to the parameter arrays, keyed as in the module docstring."""
        out: Dict[str, np.ndarray] = {}
        if group in (None, Group.EXTRACTOR):
            out.update(self.ext)
        if group in (None, Group.CLASSIFIER):
            for l, layer in enumerate(self.layers):
                out[f"sae.{l}.W"] = layer.W
                out[f"sae.{l}.b"] = layer.b
                out[f"sae.{l}.c"] = layer.c
                out[f"sae.{l}.C"] = layer.clusters.centroids
        if group in (None, Group.DOMAIN_CLASSIFIER):
            out.update(self.dc)
        return out

    @staticmethod
    def group_of(key: str) -> Group:
        if key.startswith(("adapter.", "ext.")):
            return Group.EXTRACTOR
        if key.startswith("sae."):
            return Group.CLASSIFIER
        if key.startswith("dc."):
            return Group.DOMAIN_CLASSIFIER
        raise KeyError(key)

    # -- chains -----------------------------------------------------------

    def extractor_steps(self, domain: Domain) -> List[Step]:
        d = Domain(domain).value
        steps = [Step(f"adapter.{d}.W", f"adapter.{d}.b", False, "linear")]
        steps += [Step(f"ext.{i}.W", f"ext.{i}.b", False, "relu")
                  for i in range(len(self.config.extractor_widths))]
        return steps

    def extractor_decoder_steps(self, domain: Domain) -> List[Step]:
        d = Domain(domain).value
        n = len(self.config.extractor_widths)
        steps = [Step(f"ext.{i}.W", f"ext.{i}.c", True, "relu" if i > 0 else "linear")
                 for i in range(n - 1, -1, -1)]
        steps.append(Step(f"adapter.{d}.W", f"adapter.{d}.c", True, "sigmoid"))
        return steps

    def encoder_steps(self, depth: Optional[int] = None) -> List[Step]:
        depth = self.depth if depth is None else depth
        return [Step(f"sae.{l}.W", f"sae.{l}.b", False, "relu") for l in range(depth)]

    def decoder_steps(self, depth: Optional[int] = None) -> List[Step]:
        depth = self.depth if depth is None else depth
        return [Step(f"sae.{l}.W", f"sae.{l}.c", True, "relu") for l in range(depth - 1, -1, -1)]

    def end_to_end_steps(self, domain: Domain) -> List[Step]:
        return (self.extractor_steps(domain) + self.encoder_steps() + self.decoder_steps()
                + self.extractor_decoder_steps(domain))

    def layer_steps(self, l: int) -> List[Step]:
        return [Step(f"sae.{l}.W", f"sae.{l}.b", False, "relu"),
                Step(f"sae.{l}.W", f"sae.{l}.c", True, "relu")]

    DC_STEPS = [Step("dc.W1", "dc.b1", False, "relu"), Step("dc.W2", "dc.b2", False, "linear")]

    # -- forward passes -----------------------------------------------------

    def _check_input(self, x, domain):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dims[Domain(domain)]:
            raise ValueError(f"{Domain(domain).value} input has dimension {x.shape[1]}, "
                             f"expected {self.dims[Domain(domain)]}")
        return x

    def extract(self, x, domain) -> np.ndarray:
        """Natural features ``Z`` of raw inputs from one stream."""
        x = self._check_input(x, domain)
        z, _ = run_chain(self.ext, self.extractor_steps(domain), x)
        return z

    def encode(self, Z, depth: Optional[int] = None) -> List[np.ndarray]:
        """Latents ``h^1 .. h^depth`` (``h^0 = Z``)."""
        depth = self.depth if depth is None else depth
        if depth > self.depth:
            raise ValueError(f"depth {depth} exceeds network depth {self.depth}")
        h = np.asarray(Z, dtype=float)
        if h.shape[-1] != self.layers[0].input_dim:
            raise ValueError(f"feature dimension {h.shape[-1]} != {self.layers[0].input_dim}")
        out = []
        for layer in self.layers[:depth]:
            h = layer.encode(h)
            out.append(h)
        return out

    def decode(self, h, layer: int, activation: str = "relu") -> np.ndarray:
        """Reconstruct ``h^{layer-1}`` from ``h^{layer}`` (1-based layer index)."""
        st = self.layers[layer - 1]
        h = np.asarray(h, dtype=float)
        if h.shape[-1] != st.width:
            raise ValueError(f"latent dimension {h.shape[-1]} != layer width {st.width}")
        return st.decode(h, activation)

    def reconstruct(self, x, domain) -> np.ndarray:
        x = self._check_input(x, domain)
        out, _ = run_chain(self.parameters(), self.end_to_end_steps(domain), x)
        return out

    def domain_logit(self, Z) -> np.ndarray:
        out, _ = run_chain(self.dc, self.DC_STEPS, np.atleast_2d(Z))
        return out[:, 0]

    def domain_forward(self, Z) -> np.ndarray:
        """Probability that each feature vector came from the source stream."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.feature_dim:
            raise ValueError(f"feature dimension {Z.shape[1]} != {self.feature_dim}")
        return sigmoid(self.domain_logit(Z))

    # -- updates ----------------------------------------------------------

    def apply_updates(self, group: Group, cluster_grads: Optional[Dict[str, np.ndarray]] = None,
                      cd_grads: Optional[Dict[str, np.ndarray]] = None) -> None:
        """Gradient step for one parameter group.

        extractor: ``g = dL_cluster - alpha1 dL_cd`` (reversal); classifier:
        ``g = dL_cluster``; domain classifier: ``g = alpha1 dL_cd``. All
        gradients are checked before any parameter moves, so a non-finite
        value leaves the model untouched.
        """
        group = Group(group)
        a1 = self.config.alpha1
        params = self.parameters(group)
        combined: Dict[str, np.ndarray] = {}
        for key, g in (cluster_grads or {}).items():
            if key in params and group is not Group.DOMAIN_CLASSIFIER:
                combined[key] = np.asarray(g, dtype=float)
        for key, g in (cd_grads or {}).items():
            if key not in params:
                continue
            if group is Group.EXTRACTOR:
                _acc(combined, key, reverse_gradient(g, a1))
            elif group is Group.DOMAIN_CLASSIFIER:
                _acc(combined, key, a1 * np.asarray(g, dtype=float))
        for key, g in combined.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {key}")
        opt = self.optimizers[group]
        for key, g in combined.items():
            if key.endswith(".C"):
                opt.resize_rows(key, params[key].shape[0])
            sgd_momentum_step(params[key], g, opt, key)

    def share_adapter_columns(self, n_shared: int, rest_scale: float = 1.0) -> None:
        """Start the target adapter from the source adapter on the leading shared inputs.

        Columns ``:n_shared`` (inputs both streams measure in common) and the
        encoder bias are copied from the source adapter; the remaining target
        columns are multiplied by ``rest_scale``. Optimizer velocities of the
        target adapter are cleared.
        """
        k = min(int(n_shared), *self.dims.values())
        if k <= 0:
            return
        s, t = Domain.SOURCE.value, Domain.TARGET.value
        W_t = self.ext[f"adapter.{t}.W"]
        W_t[:, :k] = self.ext[f"adapter.{s}.W"][:, :k]
        W_t[:, k:] *= rest_scale
        self.ext[f"adapter.{t}.b"][:] = self.ext[f"adapter.{s}.b"]
        self.ext[f"adapter.{t}.c"][:k] = self.ext[f"adapter.{s}.c"][:k]
        for suffix in "Wbc":
            self.optimizers[Group.EXTRACTOR].forget(f"adapter.{t}.{suffix}")

    # -- structure --------------------------------------------------------

    def _forget(self, l: int) -> None:
        opt = self.optimizers[Group.CLASSIFIER]
        for l2 in (l, l + 1):
            for suffix in "WbcC":
                opt.forget(f"sae.{l2}.{suffix}")

    def grow_node(self, l: int, rng_seed: Optional[int] = None, batch_inputs=None) -> None:
        """Add one Xavier-initialised node to layer ``l`` (0-based).

        Centroids of the layer gain a coordinate equal to the new node's mean
        activation over ``batch_inputs`` (zero without a batch).
        """
        seed = self.next_seed() if rng_seed is None else rng_seed
        layer = self.layers[l]
        R, u = layer.W.shape
        new_row = xavier_init(u, R + 1, seed)[:1]
        layer.W = np.vstack([layer.W, new_row])
        layer.b = np.append(layer.b, 0.0)
        if batch_inputs is not None and len(batch_inputs):
            act = relu(np.atleast_2d(batch_inputs) @ new_row.T)[:, 0]
            mean_act = float(act.mean())
            contribution = float(np.abs(act).mean())
        else:
            mean_act = 0.0
            contribution = float(layer.contribution.mean()) if R else 0.0
        layer.contribution = np.append(layer.contribution, contribution)
        layer.clusters.add_coordinate(mean_act)
        layer.spc.reset_bias_minima()
        layer.spc.reset_var_minima()
        if l + 1 < self.depth:
            nxt = self.layers[l + 1]
            col = xavier_init(R + 1, nxt.width, seed + 7919)[:, :1]
            nxt.W = np.hstack([nxt.W, col])
            nxt.c = np.append(nxt.c, 0.0)
            nxt.spc.insert_coordinate(R, mean_act)
        self._forget(l)

    def prune_node(self, l: int, index: int) -> bool:
        """Remove node ``index`` of layer ``l``; a no-op at the two-node floor."""
        layer = self.layers[l]
        if layer.width <= MIN_WIDTH:
            log.info("prune suppressed: layer %d is at the minimum width %d", l, MIN_WIDTH)
            return False
        layer.W = np.delete(layer.W, index, axis=0)
        layer.b = np.delete(layer.b, index)
        layer.contribution = np.delete(layer.contribution, index)
        layer.clusters.remove_coordinate(index)
        layer.spc.reset_var_minima()
        layer.spc.reset_bias_minima()
        if l + 1 < self.depth:
            nxt = self.layers[l + 1]
            nxt.W = np.delete(nxt.W, index, axis=1)
            nxt.c = np.delete(nxt.c, index)
            nxt.spc.remove_coordinate(index)
        self._forget(l)
        return True

    def add_layer(self, rng_seed: Optional[int] = None) -> int:
        """Append a layer half as wide as the current top layer; returns its index."""
        seed = self.next_seed() if rng_seed is None else rng_seed
        prev = self.layers[-1].width
        width = max(MIN_WIDTH, prev // 2)
        self.layers.append(LayerState(xavier_init(prev, width, seed), self.n_classes))
        return self.depth - 1

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["extractor_widths"] = list(cfg["extractor_widths"])
        return {
            "format": "leopard-model/1",
            "config": cfg,
            "seed_state": self._seed,
            "ext": {k: v.tolist() for k, v in self.ext.items()},
            "dc": {k: v.tolist() for k, v in self.dc.items()},
            "layers": [{"W": L.W.tolist(), "b": L.b.tolist(), "c": L.c.tolist(),
                        "clusters": L.clusters.to_dict(), "spc": L.spc.to_dict(),
                        "contribution": L.contribution.tolist(),
                        "contribution_n": L.contribution_n} for L in self.layers],
            "optimizers": {g.value: {"learning_rate": o.learning_rate, "momentum": o.momentum,
                                     "velocity": {k: v.tolist() for k, v in o.velocity.items()}}
                           for g, o in self.optimizers.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LeopardModel":
        cfg = dict(d["config"])
        cfg["extractor_widths"] = tuple(cfg["extractor_widths"])
        model = cls(ModelConfig(**cfg))
        model._seed = d["seed_state"]
        model.ext = {k: np.array(v, dtype=float) for k, v in d["ext"].items()}
        model.dc = {k: np.array(v, dtype=float) for k, v in d["dc"].items()}
        model.layers = []
        for ld in d["layers"]:
            W = np.array(ld["W"], dtype=float)
            L = LayerState(W, model.n_classes, ld["b"], ld["c"])
            L.clusters = ClusterSet.from_dict(ld["clusters"])
            L.spc = SpcStats.from_dict(ld["spc"])
            L.contribution = np.array(ld["contribution"], dtype=float)
            L.contribution_n = ld["contribution_n"]
            model.layers.append(L)
        for g, od in d["optimizers"].items():
            o = OptimizerState(od["learning_rate"], od["momentum"])
            o.velocity = {k: np.array(v, dtype=float) for k, v in od["velocity"].items()}
            model.optimizers[Group(g)] = o
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LeopardModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def fingerprint(self) -> str:
        """SHA-256 of the serialised state; equal fingerprints mean equal models."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def summary(self) -> dict:
        return {"n_layers": self.depth,
                "widths": [L.width for L in self.layers],
                "total_nodes": int(sum(L.width for L in self.layers)),
                "total_clusters": int(sum(len(L.clusters) for L in self.layers))}


def tied_weights_hold(model: LeopardModel) -> bool:
    """True when every decoder matrix is exactly the transpose of its encoder matrix."""
    return all(np.array_equal(L.W_dec, L.W.T) and np.shares_memory(L.W_dec, L.W) for L in model.layers)
