"""Structural decisions: SPC node growing/pruning and Hoeffding-bound drift detection."""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)


class _Welford:
    __slots__ = ("n", "mean", "m2")

    def __init__(self, n=0, mean=0.0, m2=0.0):
        self.n, self.mean, self.m2 = n, mean, m2

    def update(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        return float(np.sqrt(max(self.m2, 0.0) / self.n)) if self.n else 0.0


@dataclass
class SpcStats:
    """Running bias/variance statistics of one layer's reconstruction.

    ``ema_mean``/``ema_sq`` are exponential moving estimates of ``E[h_hat]`` and
    ``E[h_hat^2]``; the ``min_*`` fields hold the running values recorded at
    the step where ``mean + std`` was lowest.
    """

    decay: float = 0.95
    ema_mean: Optional[np.ndarray] = None
    ema_sq: Optional[np.ndarray] = None
    bias: _Welford = field(default_factory=_Welford)
    var: _Welford = field(default_factory=_Welford)
    min_bias_mean: Optional[float] = None
    min_bias_std: Optional[float] = None
    min_var_mean: Optional[float] = None
    min_var_std: Optional[float] = None
    last_bias: float = 0.0
    last_var: float = 0.0

    @property
    def n_samples(self) -> int:
        return self.bias.n

    @property
    def bias_mean(self) -> float:
        return self.bias.mean

    @property
    def bias_std(self) -> float:
        return self.bias.std

    @property
    def var_mean(self) -> float:
        return self.var.mean

    @property
    def var_std(self) -> float:
        return self.var.std

    def reset_bias_minima(self) -> None:
        self.min_bias_mean, self.min_bias_std = self.bias.mean, self.bias.std

    def reset_var_minima(self) -> None:
        self.min_var_mean, self.min_var_std = self.var.mean, self.var.std

    def insert_coordinate(self, index: int, value: float = 0.0) -> None:
        """Track one more reconstructed coordinate (the layer below grew)."""
        if self.ema_mean is not None:
            self.ema_mean = np.insert(self.ema_mean, index, value)
            self.ema_sq = np.insert(self.ema_sq, index, value ** 2)

    def remove_coordinate(self, index: int) -> None:
        if self.ema_mean is not None:
            self.ema_mean = np.delete(self.ema_mean, index)
            self.ema_sq = np.delete(self.ema_sq, index)

    def to_dict(self) -> dict:
        arr = lambda a: None if a is None else a.tolist()  # noqa: E731
        return {"decay": self.decay, "ema_mean": arr(self.ema_mean), "ema_sq": arr(self.ema_sq),
                "bias": [self.bias.n, self.bias.mean, self.bias.m2],
                "var": [self.var.n, self.var.mean, self.var.m2],
                "min_bias": [self.min_bias_mean, self.min_bias_std],
                "min_var": [self.min_var_mean, self.min_var_std],
                "last": [self.last_bias, self.last_var]}

    @classmethod
    def from_dict(cls, d: dict) -> "SpcStats":
        arr = lambda a: None if a is None else np.array(a, dtype=float)  # noqa: E731
        s = cls(decay=d["decay"], ema_mean=arr(d["ema_mean"]), ema_sq=arr(d["ema_sq"]),
                bias=_Welford(*d["bias"]), var=_Welford(*d["var"]))
        s.min_bias_mean, s.min_bias_std = d["min_bias"]
        s.min_var_mean, s.min_var_std = d["min_var"]
        s.last_bias, s.last_var = d["last"]
        return s


BURN_IN = 10


def observe_layer(spc: SpcStats, h_prev, h_hat, burn_in: int = BURN_IN) -> SpcStats:
    """Feed one or more (input, reconstruction) pairs of a layer into its SPC stats.

    Per sample: ``Bias = mean((E[h_hat] - h)^2)`` and ``Var = mean(E[h_hat^2] - E[h_hat]^2)``,
    taken after the moving estimates absorb the sample. Minima are tracked only
    once ``burn_in`` samples have been seen, so a one-sample std of 0 never
    becomes the reference.
    """
    H = np.atleast_2d(np.asarray(h_prev, dtype=float))
    Hh = np.atleast_2d(np.asarray(h_hat, dtype=float))
    if H.shape != Hh.shape:
        raise ValueError(f"shape mismatch {H.shape} vs {Hh.shape}")
    d = spc.decay
    biases, variances = [], []
    for h, hh in zip(H, Hh):
        if spc.ema_mean is None or spc.ema_mean.shape != hh.shape:
            spc.ema_mean = hh.copy()
            spc.ema_sq = hh ** 2
        else:
            spc.ema_mean = d * spc.ema_mean + (1 - d) * hh
            spc.ema_sq = d * spc.ema_sq + (1 - d) * hh ** 2
        b = float(np.mean((spc.ema_mean - h) ** 2))
        v = float(np.mean(np.maximum(spc.ema_sq - spc.ema_mean ** 2, 0.0)))
        spc.bias.update(b)
        spc.var.update(v)
        if spc.bias.n >= burn_in:
            if spc.min_bias_mean is None or spc.bias.mean + spc.bias.std < spc.min_bias_mean + spc.min_bias_std:
                spc.reset_bias_minima()
            if spc.min_var_mean is None or spc.var.mean + spc.var.std < spc.min_var_mean + spc.min_var_std:
                spc.reset_var_minima()
        biases.append(b)
        variances.append(v)
    if biases:
        spc.last_bias = float(np.mean(biases))
        spc.last_var = float(np.mean(variances))
    return spc


def k2(bias: float) -> float:
    return 1.3 * np.exp(-bias ** 2) + 0.7


def k3(var: float) -> float:
    return 1.3 * np.exp(-var ** 2) + 0.7


def grow_condition(mean, std, min_mean, min_std, bias) -> bool:
    return mean + std >= min_mean + k2(bias) * min_std


def prune_condition(mean, std, min_mean, min_std, var) -> bool:
    return mean + std >= min_mean + 2.0 * k3(var) * min_std


def should_grow_node(spc: SpcStats, bias: Optional[float] = None, burn_in: int = BURN_IN) -> bool:
    """High-bias test; resets the bias minima when it fires."""
    if spc.n_samples < burn_in or spc.min_bias_mean is None:
        return False
    bias = spc.last_bias if bias is None else bias
    if grow_condition(spc.bias_mean, spc.bias_std, spc.min_bias_mean, spc.min_bias_std, bias):
        spc.reset_bias_minima()
        return True
    return False


def should_prune_node(spc: SpcStats, var: Optional[float] = None, burn_in: int = BURN_IN,
                      grew: bool = False) -> bool:
    """High-variance test; suppressed when the layer grew in the same batch."""
    if grew or spc.n_samples < burn_in or spc.min_var_mean is None:
        return False
    var = spc.last_var if var is None else var
    if prune_condition(spc.var_mean, spc.var_std, spc.min_var_mean, spc.min_var_std, var):
        spc.reset_var_minima()
        return True
    return False


def prune_candidate(layer) -> Optional[int]:
    """Index of the least contributing node, or ``None`` when the layer is at its floor."""
    contribution = np.asarray(layer.contribution if hasattr(layer, "contribution") else layer)
    if contribution.size <= 2:
        return None
    return int(np.argmin(contribution))


def hoeffding_epsilon(size: int, alpha: float) -> float:
    """``sqrt(ln(1/alpha) / (2 size))``."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(np.sqrt(np.log(1.0 / alpha) / (2.0 * size)))


def drift_bound(value_range: float, size: int, cut: int, alpha: float) -> float:
    """``(b - a) sqrt((size - cut) / (2 cut size) ln(1/alpha))``."""
    return float(value_range * np.sqrt((size - cut) / (2.0 * cut * size) * np.log(1.0 / alpha)))


class DriftState(str, enum.Enum):
    STABLE = "stable"
    WARNING = "warning"
    DRIFT = "drift"


@dataclass
class DriftCheck:
    state: DriftState
    cut: Optional[int] = None
    gap: float = 0.0
    eps_drift: float = 0.0
    eps_warning: float = 0.0


CUT_FRACTIONS = (0.25, 0.5, 0.75)


def check_window(window, alpha_x: float = 0.001, alpha_d: float = 0.001, alpha_w: float = 0.005,
                 cut_fractions: Sequence[float] = CUT_FRACTIONS) -> DriftCheck:
    """Evaluate one pooled window (previous batch followed by current batch).

    The first candidate cut whose prefix mean plus bound stays below the
    window mean plus bound becomes the cutting point; the suffix after it is
    then compared against the prefix. Only a rising mean yields a cut; feed
    the negated statistic to watch for a falling one.
    """
    P = np.asarray(window, dtype=float).reshape(-1)
    size = P.size
    if size < 8:
        return DriftCheck(DriftState.STABLE)
    p_mean = P.mean()
    eps_p = hoeffding_epsilon(size, alpha_x)
    cut = None
    for frac in cut_fractions:
        c = int(frac * size)
        if c < 1 or c >= size:
            continue
        if p_mean + eps_p >= P[:c].mean() + hoeffding_epsilon(c, alpha_x):
            cut = c
            break
    if cut is None:
        return DriftCheck(DriftState.STABLE)
    value_range = float(P.max() - P.min())
    gap = float(abs(P[cut:].mean() - P[:cut].mean()))
    eps_d = drift_bound(value_range, size, cut, alpha_d)
    eps_w = drift_bound(value_range, size, cut, alpha_w)
    if value_range == 0.0 or gap == 0.0:
        state = DriftState.STABLE
    elif gap >= eps_d:
        state = DriftState.DRIFT
    elif gap >= eps_w:
        state = DriftState.WARNING
    else:
        state = DriftState.STABLE
    return DriftCheck(state, cut, gap, eps_d, eps_w)


@dataclass
class DriftDetector:
    """Hoeffding-bound detector over the last two batches of one stream.

    A warning that is followed by another warning or a drift on the next
    batch is escalated to a drift; an unconfirmed warning expires.
    """

    alpha_x: float = 0.001
    alpha_d: float = 0.001
    alpha_w: float = 0.005
    cut_fractions: Tuple[float, ...] = CUT_FRACTIONS
    previous: Optional[np.ndarray] = None
    state: DriftState = DriftState.STABLE
    last_check: Optional[DriftCheck] = None

    def __post_init__(self):
        if not self.alpha_w > self.alpha_d:
            raise ValueError("alpha_w must exceed alpha_d so the warning bound sits below the drift bound")

    def update(self, batch_statistic) -> DriftState:
        current = np.asarray(batch_statistic, dtype=float).reshape(-1)
        if self.previous is None:
            self.previous = current
            self.state = DriftState.STABLE
            return self.state
        check = check_window(np.concatenate([self.previous, current]), self.alpha_x,
                             self.alpha_d, self.alpha_w, self.cut_fractions)
        self.last_check = check
        self.previous = current
        if check.state is DriftState.DRIFT:
            self.state = DriftState.DRIFT
        elif check.state is DriftState.WARNING:
            self.state = DriftState.DRIFT if self.state is DriftState.WARNING else DriftState.WARNING
        else:
            self.state = DriftState.STABLE
        return self.state

    def reset_state(self) -> None:
        self.state = DriftState.STABLE

    def to_dict(self) -> dict:
        return {"alpha_x": self.alpha_x, "alpha_d": self.alpha_d, "alpha_w": self.alpha_w,
                "cut_fractions": list(self.cut_fractions),
                "previous": None if self.previous is None else self.previous.tolist(),
                "state": self.state.value}


def detect_drift(detector: DriftDetector, previous_batch, current_batch) -> DriftState:
    """Run ``detector`` on an explicit pair of consecutive batch statistics."""
    detector.previous = np.asarray(previous_batch, dtype=float).reshape(-1)
    return detector.update(current_batch)


def on_drift(model, rng_seed: int, initialize: Optional[Callable[[int], None]] = None,
             detectors: Iterable[DriftDetector] = ()) -> int:
    """Deepen the network by one layer, initialise it and calm the detectors."""
    index = model.add_layer(rng_seed)
    if initialize is not None:
        initialize(index)
    for d in detectors:
        d.reset_state()
    return index


EVENT_TYPES = ("grow_node", "prune_node", "add_layer", "drift", "warning")


@dataclass
class EventLog:
    records: List[dict] = field(default_factory=list)

    def add(self, batch: int, stream: str, event: str, layer: Optional[int] = None,
            detail=None) -> dict:
        if event not in EVENT_TYPES:
            raise ValueError(f"unknown event {event!r}")
        rec = {"batch": batch, "stream": stream, "event": event, "layer": layer, "detail": detail}
        self.records.append(rec)
        log.debug("structural event %s", rec)
        return rec

    def since(self, start: int) -> List[dict]:
        return self.records[start:]

    def write_jsonl(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")
