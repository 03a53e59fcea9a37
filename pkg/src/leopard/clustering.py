"""Per-layer soft clustering: student-t similarity, target distribution, KL loss,
cluster allegiance, layer-summed prediction and distance-triggered cluster growth.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPS = 1e-12


@dataclass
class Cluster:
    """Read-only snapshot of one cluster."""

    centroid: np.ndarray
    cardinality: int
    dist_mean: float
    dist_std: float
    allegiance: np.ndarray


class ClusterSet:
    """All clusters of one latent space, stored column-wise for vectorised scoring.

    Distance statistics are kept with Welford's algorithm; ``dist_n`` counts
    how many distances a cluster has absorbed (a fresh cluster has none).
    ``pool_*`` pools the winner distance of every sample the layer has seen.
    """

    MIN_ABSORBED = 2

    def __init__(self, dim: int, n_classes: int):
        self.dim = dim
        self.n_classes = n_classes
        self.centroids = np.zeros((0, dim))
        self.counts = np.zeros(0, dtype=int)
        self.dist_n = np.zeros(0, dtype=int)
        self.dist_mean = np.zeros(0)
        self.dist_m2 = np.zeros(0)
        self.allegiance = np.zeros((0, n_classes))
        self.pool_n, self.pool_mean, self.pool_m2 = 0, 0.0, 0.0

    def __len__(self):
        return self.centroids.shape[0]

    @property
    def dist_std(self) -> np.ndarray:
        n = np.maximum(self.dist_n, 1)
        return np.sqrt(np.maximum(self.dist_m2, 0.0) / n)

    def add(self, centroid, cardinality: int = 1, dist_mean: float = 0.0,
            dist_std: float = 0.0, dist_n: int = 0) -> int:
        centroid = np.asarray(centroid, dtype=float).reshape(1, self.dim)
        self.centroids = np.vstack([self.centroids, centroid])
        self.counts = np.append(self.counts, cardinality)
        self.dist_n = np.append(self.dist_n, dist_n)
        self.dist_mean = np.append(self.dist_mean, dist_mean)
        self.dist_m2 = np.append(self.dist_m2, dist_std ** 2 * max(dist_n, 1))
        uniform = np.full((1, self.n_classes), 1.0 / self.n_classes)
        self.allegiance = np.vstack([self.allegiance, uniform])
        return len(self) - 1

    def cluster(self, j: int) -> Cluster:
        return Cluster(self.centroids[j].copy(), int(self.counts[j]), float(self.dist_mean[j]),
                       float(self.dist_std[j]), self.allegiance[j].copy())

    def absorb(self, j: int, distance: float) -> None:
        self.counts[j] += 1
        self.dist_n[j] += 1
        delta = distance - self.dist_mean[j]
        self.dist_mean[j] += delta / self.dist_n[j]
        self.dist_m2[j] += delta * (distance - self.dist_mean[j])

    def pool(self, distance: float) -> None:
        self.pool_n += 1
        delta = distance - self.pool_mean
        self.pool_mean += delta / self.pool_n
        self.pool_m2 += delta * (distance - self.pool_mean)

    @property
    def pool_std(self) -> float:
        return float(np.sqrt(max(self.pool_m2, 0.0) / self.pool_n)) if self.pool_n else 0.0

    def spread(self, j: int):
        """``(mean, std)`` of distances against which cluster ``j`` judges a newcomer.

        A cluster that has absorbed fewer than ``MIN_ABSORBED`` samples has no
        spread of its own and borrows the layer's pooled statistics.
        """
        if self.dist_n[j] >= self.MIN_ABSORBED:
            return float(self.dist_mean[j]), float(self.dist_std[j])
        return self.pool_mean, self.pool_std

    def add_coordinate(self, values) -> None:
        values = np.broadcast_to(np.asarray(values, dtype=float), (len(self),))
        self.centroids = np.hstack([self.centroids, values.reshape(-1, 1)])
        self.dim += 1

    def remove_coordinate(self, index: int) -> None:
        self.centroids = np.delete(self.centroids, index, axis=1)
        self.dim -= 1

    def to_dict(self) -> dict:
        return {"dim": self.dim, "n_classes": self.n_classes,
                "centroids": self.centroids.tolist(), "counts": self.counts.tolist(),
                "dist_n": self.dist_n.tolist(), "dist_mean": self.dist_mean.tolist(),
                "dist_m2": self.dist_m2.tolist(), "allegiance": self.allegiance.tolist(),
                "pool": [self.pool_n, self.pool_mean, self.pool_m2]}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSet":
        cs = cls(d["dim"], d["n_classes"])
        cs.centroids = np.array(d["centroids"], dtype=float).reshape(-1, d["dim"])
        cs.counts = np.array(d["counts"], dtype=int)
        cs.dist_n = np.array(d["dist_n"], dtype=int)
        cs.dist_mean = np.array(d["dist_mean"], dtype=float)
        cs.dist_m2 = np.array(d["dist_m2"], dtype=float)
        cs.allegiance = np.array(d["allegiance"], dtype=float).reshape(-1, d["n_classes"])
        cs.pool_n, cs.pool_mean, cs.pool_m2 = d.get("pool", (0, 0.0, 0.0))
        return cs


@dataclass
class SoftAssignment:
    phi: np.ndarray
    winners: np.ndarray


def _centroids(clusters) -> np.ndarray:
    if isinstance(clusters, ClusterSet):
        return clusters.centroids
    return np.atleast_2d(np.asarray(clusters, dtype=float))


def squared_distances(h: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # expanded form: one matmul instead of an (n, k, d) difference tensor
    sq = (h * h).sum(axis=1)[:, None] + (centroids * centroids).sum(axis=1)[None, :] - 2.0 * h @ centroids.T
    return np.maximum(sq, 0.0)


def _log_kernel(sq_dist, lam):
    return -(lam + 1.0) / 2.0 * np.log1p(sq_dist / lam)


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def similarity(h, clusters, lam: float = 1.0) -> SoftAssignment:
    """Student-t soft assignment of one or many latents to the clusters.

    ``phi_j ~ (1 + ||h - C_j||^2 / lam) ** (-(lam + 1) / 2)``, normalised over
    clusters. The winner is the arg-max (lowest index on ties).
    """
    centroids = _centroids(clusters)
    if centroids.shape[0] == 0:
        raise RuntimeError("cannot score against an empty cluster set")
    if lam <= 0:
        raise ValueError("lam must be > 0")
    single = np.ndim(h) == 1
    H = np.atleast_2d(np.asarray(h, dtype=float))
    phi = _softmax_rows(_log_kernel(squared_distances(H, centroids), lam))
    winners = np.argmax(phi, axis=1)
    if single:
        return SoftAssignment(phi[0], winners[0])
    return SoftAssignment(phi, winners)


def target_distribution(phi: np.ndarray) -> np.ndarray:
    """Sharpened auxiliary targets: square each entry, divide by cluster frequency, renormalise."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    freq = np.maximum(phi.sum(axis=0), EPS)
    w = phi ** 2 / freq
    return w / np.maximum(w.sum(axis=1, keepdims=True), EPS)


@dataclass
class KLResult:
    loss: float
    grad_h: Optional[np.ndarray] = None
    grad_centroids: Optional[np.ndarray] = None


def kl_loss(phi, Phi, h=None, clusters=None, lam: float = 1.0) -> KLResult:
    """``sum_i sum_j phi_ij log(phi_ij / Phi_ij)`` with ``Phi`` held constant.

    When the latents ``h`` and the clusters are supplied, ``phi`` is recomputed
    from them and the gradients with respect to ``h`` and every centroid are
    returned as well.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    if h is None:
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if phi.shape != Phi.shape:
            raise ValueError(f"shape mismatch {phi.shape} vs {Phi.shape}")
        return KLResult(float(np.sum(phi * (np.log(np.maximum(phi, EPS)) - np.log(np.maximum(Phi, EPS))))))

    H = np.atleast_2d(np.asarray(h, dtype=float))
    C = _centroids(clusters)
    sq = squared_distances(H, C)
    s = _log_kernel(sq, lam)
    s -= s.max(axis=1, keepdims=True)
    log_phi = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    phi = np.exp(log_phi)
    if phi.shape != Phi.shape:
        raise ValueError(f"shape mismatch {phi.shape} vs {Phi.shape}")
    log_ratio = np.maximum(log_phi, np.log(EPS)) - np.log(np.maximum(Phi, EPS))
    loss = float(np.sum(phi * log_ratio))
    g = log_ratio + 1.0
    ds = phi * (g - np.sum(phi * g, axis=1, keepdims=True))
    dd = ds * (-(lam + 1.0) / (2.0 * (lam + sq)))
    grad_h = 2.0 * (H * dd.sum(axis=1, keepdims=True) - dd @ C)
    grad_c = -2.0 * (dd.T @ H - dd.sum(axis=0)[:, None] * C)
    return KLResult(loss, grad_h, grad_c)


def update_allegiance(clusters: ClusterSet, latents, labels, lam: float = 1.0) -> np.ndarray:
    """Recompute every cluster's class allegiance from labelled latents.

    ``Ale[j, o]`` is the share of the soft mass cluster ``j`` receives from class ``o``.
    """
    H = np.atleast_2d(np.asarray(latents, dtype=float))
    y = np.asarray(labels, dtype=int)
    if len(y) == 0:
        raise RuntimeError("no labelled prerecorded samples: allegiance is undefined")
    if len(clusters) == 0:
        raise RuntimeError("no clusters to assign allegiance to")
    phi = similarity(H, clusters, lam).phi
    onehot = np.zeros((len(y), clusters.n_classes))
    onehot[np.arange(len(y)), y] = 1.0
    mass = phi.T @ onehot
    clusters.allegiance = mass / np.maximum(mass.sum(axis=1, keepdims=True), EPS)
    return clusters.allegiance


def dynamic_k1(distance: float) -> float:
    return 2.0 * np.exp(-distance) + 2.0


def maybe_grow_cluster(clusters: ClusterSet, h) -> bool:
    """Either spawn a cluster at ``h`` or let the nearest cluster absorb it.

    A cluster is spawned when the distance ``d`` to the nearest centroid
    exceeds ``mean + k1 * std`` of that cluster's absorbed distances, with
    ``k1 = 2 exp(-d) + 2``. Young clusters use the layer-wide statistics
    instead (see :meth:`ClusterSet.spread`).
    """
    h = np.asarray(h, dtype=float).reshape(-1)
    if len(clusters) == 0:
        clusters.add(h)
        return True
    dist = np.sqrt(squared_distances(h[None, :], clusters.centroids)[0])
    win = int(np.argmin(dist))
    d = float(dist[win])
    mean, std = clusters.spread(win)
    clusters.pool(d)
    if d > mean + dynamic_k1(d) * std:
        clusters.add(h)
        return True
    clusters.absorb(win, d)
    return False


@dataclass
class PredictionTrace:
    """``local_scores[l]`` is the ``(n, m)`` score block of layer ``l``."""

    local_scores: List[np.ndarray]
    winners: List[Optional[np.ndarray]]
    global_scores: np.ndarray
    labels: np.ndarray


def predict_from_latents(latents: Sequence[np.ndarray], cluster_sets: Sequence[ClusterSet],
                         n_classes: int, lam: float = 1.0) -> PredictionTrace:
    n = np.atleast_2d(latents[0]).shape[0] if latents else 0
    total = np.zeros((n, n_classes))
    local, winners = [], []
    for depth, (h, cs) in enumerate(zip(latents, cluster_sets), start=1):
        if len(cs) == 0:
            log.info("layer %d has no clusters; skipped in prediction", depth)
            local.append(np.zeros((n, n_classes)))
            winners.append(None)
            continue
        win = similarity(np.atleast_2d(h), cs, lam).winners
        score = cs.allegiance[win]
        local.append(score)
        winners.append(win)
        total += score
    return PredictionTrace(local, winners, total, np.argmax(total, axis=1))


def predict(model, x, domain) -> PredictionTrace:
    """Classify raw inputs of one stream by summing winning-cluster allegiances over layers."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    latents = model.encode(model.extract(X, domain))
    return predict_from_latents(latents, [layer.clusters for layer in model.layers],
                                model.n_classes, model.lam)


def export_assignments(model, x, domain, path, sample_ids=None) -> None:
    """Write ``sample_id, layer, winning_cluster, phi_win, predicted_class`` rows."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    latents = model.encode(model.extract(X, domain))
    trace = predict_from_latents(latents, [l.clusters for l in model.layers],
                                 model.n_classes, model.lam)
    ids = range(len(X)) if sample_ids is None else sample_ids
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "layer", "winning_cluster", "phi_win", "predicted_class"])
        for depth, (h, layer) in enumerate(zip(latents, model.layers), start=1):
            if len(layer.clusters) == 0:
                continue
            sa = similarity(np.atleast_2d(h), layer.clusters, model.lam)
            for i, sid in enumerate(ids):
                j = int(sa.winners[i])
                w.writerow([sid, depth, j, repr(float(sa.phi[i, j])), int(trace.labels[i])])
