"""Two-stream data model, synthetic cross-domain streams, CSV ingestion and label masking."""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

UNLABELLED = -1


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class ParseError(ValueError):
    """A CSV cell could not be parsed as a number."""


class HiddenLabels:
    """Evaluation-only labels.

    The values are only reachable through :meth:`reveal`, and every call is
    recorded in ``audit`` so a run can be checked for label leakage.
    """

    def __init__(self, values):
        self._values = np.asarray(values, dtype=int).copy()
        self._values.setflags(write=False)
        self.audit: List[str] = []

    def __len__(self):
        return len(self._values)

    def reveal(self, purpose: str) -> np.ndarray:
        self.audit.append(purpose)
        return self._values

    def __repr__(self):
        return f"HiddenLabels(n={len(self)})"


@dataclass(frozen=True)
class StreamBatch:
    """One batch of one stream.

    ``labels`` are the labels the learner may read (``-1`` marks an
    unlabelled sample); after :func:`mask_labels` they only survive on the
    prerecorded batch. ``eval_labels`` hold the ground truth for scoring.
    """

    features: np.ndarray
    domain: Domain
    batch_index: int
    labels: Optional[np.ndarray] = None
    eval_labels: Optional[HiddenLabels] = None

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=float))
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=int)
            if len(labels) != len(feats):
                raise ValueError("labels and features differ in length")
            object.__setattr__(self, "labels", labels)
        if self.eval_labels is not None and len(self.eval_labels) != len(feats):
            raise ValueError("evaluation labels and features differ in length")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labelled_mask(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(len(self), dtype=bool)
        return self.labels != UNLABELLED


@dataclass
class StreamConfig:
    n_source_batches: int = 40
    n_target_batches: int = 40
    source_batch_size: int = 100
    target_batch_size: int = 120
    n_classes: int = 3
    label_proportion: float = 0.10
    source_dim: int = 4
    target_dim: int = 6
    source_drift_batch: int = 20
    target_drift_batch: int = 21
    rng_seed: int = 0
    latent_dim: int = 2
    class_spread: float = 0.25
    noise: float = 0.05
    shared_features: int = 3
    target_shift: float = 0.3
    source_csv: Optional[str] = None
    target_csv: Optional[str] = None
    label_column: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.label_proportion <= 1.0:
            raise ValueError("label_proportion must lie in (0, 1]")
        if self.source_drift_batch == self.target_drift_batch:
            raise ValueError("source and target drift batches must differ (asynchronous drift)")
        for name in ("n_source_batches", "n_target_batches", "source_batch_size", "target_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def prerecorded_size(self) -> int:
        # round half up, not banker's rounding
        return int(np.floor(self.label_proportion * self.source_batch_size + 0.5))


@dataclass
class DriftSpec:
    drift_vector: np.ndarray
    start_batch: int
    zero_norm_samples: int = 0

    @classmethod
    def sample(cls, dim: int, start_batch: int, rng_seed: int) -> "DriftSpec":
        rng = np.random.default_rng(rng_seed)
        return cls(drift_vector=rng.uniform(0.0, 1.0, size=dim), start_batch=start_batch)


def apply_scaling_hyperplane(batch: StreamBatch, spec: DriftSpec) -> StreamBatch:
    """Rescale every sample to ``d_z * x / ||x||`` (per-sample Euclidean norm).

    Zero-norm samples are left untouched and counted in ``spec.zero_norm_samples``.
    """
    d_z = np.asarray(spec.drift_vector, dtype=float)
    if d_z.shape != (batch.dim,):
        raise ValueError(f"drift vector has dimension {d_z.shape}, batch has {batch.dim}")
    x = batch.features
    norms = np.linalg.norm(x, axis=1)
    degenerate = norms == 0.0
    out = x.copy()
    ok = ~degenerate
    out[ok] = d_z * x[ok] / norms[ok, None]
    n_bad = int(degenerate.sum())
    if n_bad:
        spec.zero_norm_samples += n_bad
        log.warning("scaling hyperplane: %d zero-norm sample(s) left unchanged in batch %d",
                    n_bad, batch.batch_index)
    return replace(batch, features=out)


def _class_means(n_classes: int, latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    # distinct radii keep the class layout free of rotational symmetry, so the
    # class correspondence between two views is identifiable from geometry alone
    angles = 2 * np.pi * np.arange(n_classes) / n_classes + rng.uniform(-0.3, 0.3, n_classes)
    radii = rng.permutation(np.linspace(0.6, 1.4, n_classes))
    means = np.zeros((n_classes, latent_dim))
    means[:, 0] = radii * np.cos(angles)
    means[:, 1] = radii * np.sin(angles)
    if latent_dim > 2:
        means[:, 2:] = rng.normal(0, 0.3, size=(n_classes, latent_dim - 2))
    return means


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    return y


def generate_synthetic_streams(config: StreamConfig
                               ) -> Tuple[StreamBatch, List[StreamBatch], List[StreamBatch]]:
    """Build a labelled prerecorded batch plus drifting source and target streams.

    Both views are linear images of one class-structured latent space, so the
    labelling function is shared while the feature spaces differ. The first
    ``shared_features`` target features read the same latent directions as the
    matching source features (sensors common to both machines), the rest of
    the target map is drawn independently, and the target latent is offset by
    ``target_shift`` (covariate shift). Each view is min-max scaled to [0, 1]
    with bounds fixed from its pre-drift data, then the scaling-hyperplane
    drift is applied from the configured batch onward.
    """
    c = config
    if c.n_classes < 2:
        raise ValueError("need at least two classes")
    if c.source_dim == c.target_dim:
        raise ValueError("source and target feature spaces must differ in dimension")
    rng = np.random.default_rng(c.rng_seed)
    means = _class_means(c.n_classes, c.latent_dim, rng)
    map_s = rng.normal(0.0, 1.0, size=(c.source_dim, c.latent_dim))
    map_t = rng.normal(0.0, 1.0, size=(c.target_dim, c.latent_dim))
    k = min(c.shared_features, c.source_dim, c.target_dim)
    map_t[:k] = map_s[:k] + rng.normal(0.0, 0.1, size=(k, c.latent_dim))
    shift = rng.normal(0.0, 1.0, size=c.latent_dim)
    shift *= c.target_shift / max(np.linalg.norm(shift), 1e-12)

    def draw(n, mapping, offset):
        y = _balanced_labels(n, c.n_classes, rng)
        z = means[y] + c.class_spread * rng.normal(size=(n, c.latent_dim)) + offset
        x = z @ mapping.T + c.noise * rng.normal(size=(n, mapping.shape[0]))
        return x, y

    pre_x, pre_y = draw(c.source_batch_size, map_s, 0.0)
    src = [draw(c.source_batch_size, map_s, 0.0) for _ in range(c.n_source_batches)]
    tgt = [draw(c.target_batch_size, map_t, shift) for _ in range(c.n_target_batches)]

    def scaler(arrays):
        stacked = np.vstack(arrays)
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return lambda x: np.clip((x - lo) / span, 0.0, 1.0)

    scale_s = scaler([pre_x] + [x for x, _ in src])
    scale_t = scaler([x for x, _ in tgt])

    drift_s = DriftSpec.sample(c.source_dim, c.source_drift_batch, c.rng_seed + 1)
    drift_t = DriftSpec.sample(c.target_dim, c.target_drift_batch, c.rng_seed + 2)

    prerecorded = StreamBatch(scale_s(pre_x), Domain.SOURCE, 0, labels=pre_y)
    source = _assemble(src, scale_s, Domain.SOURCE, drift_s)
    target = _assemble(tgt, scale_t, Domain.TARGET, drift_t)
    return prerecorded, source, target


def _assemble(raw, scale, domain, drift: Optional[DriftSpec]) -> List[StreamBatch]:
    out = []
    for k, (x, y) in enumerate(raw, start=1):
        b = StreamBatch(scale(x), domain, k, labels=y)
        if drift is not None and k >= drift.start_batch:
            b = apply_scaling_hyperplane(b, drift)
        out.append(b)
    return out


def streams_from_arrays(src_x, src_y, tgt_x, tgt_y, config: StreamConfig
                        ) -> Tuple[StreamBatch, List[StreamBatch], List[StreamBatch]]:
    """Cut two feature tables into a prerecorded batch and two batch streams.

    The first ``source_batch_size`` source rows form the prerecorded batch.
    Drift injection is applied on top of whatever drift the data already has.
    """
    c = config
    src_x, tgt_x = np.asarray(src_x, float), np.asarray(tgt_x, float)
    src_y, tgt_y = np.asarray(src_y, int), np.asarray(tgt_y, int)
    n_s = c.source_batch_size
    pre = StreamBatch(src_x[:n_s], Domain.SOURCE, 0, labels=src_y[:n_s])

    def cut(x, y, size, n_batches):
        chunks = []
        for k in range(n_batches):
            lo = k * size
            if lo >= len(x):
                break
            chunks.append((x[lo:lo + size], y[lo:lo + size]))
        return chunks

    src = cut(src_x[n_s:], src_y[n_s:], n_s, c.n_source_batches)
    tgt = cut(tgt_x, tgt_y, c.target_batch_size, c.n_target_batches)
    drift_s = DriftSpec.sample(src_x.shape[1], c.source_drift_batch, c.rng_seed + 1)
    drift_t = DriftSpec.sample(tgt_x.shape[1], c.target_drift_batch, c.rng_seed + 2)
    ident = lambda x: x  # noqa: E731
    return (pre, _assemble(src, ident, Domain.SOURCE, drift_s),
            _assemble(tgt, ident, Domain.TARGET, drift_t))


METADATA_COLUMNS = ("batch_index", "domain")


def load_csv_dataset(path, label_column: Optional[str] = None,
                     ignore_columns: Sequence[str] = METADATA_COLUMNS):
    """Read a numeric feature table.

    Every column except ``label_column`` and ``ignore_columns`` (the
    bookkeeping columns of :func:`write_stream_csv`) is a feature and is
    min-max scaled to [0, 1]; constant columns become zeros. Labels are mapped to contiguous
    indices in sorted order of their distinct values.

    :return: ``(features, labels, n_classes)``; labels is ``None`` without a label column
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: missing header row") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    if label_column is not None and label_column not in header:
        raise ValueError(f"label column {label_column!r} not in header {header}")
    feat_cols = [i for i, h in enumerate(header) if h != label_column and h not in ignore_columns]
    feats = np.zeros((len(rows), len(feat_cols)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")
        for j, col in enumerate(feat_cols):
            try:
                feats[r, j] = float(row[col])
            except ValueError:
                raise ParseError(f"{path}: row {r + 2}, column {header[col]!r}: "
                                 f"non-numeric value {row[col]!r}") from None
    if len(rows):
        lo, hi = feats.min(axis=0), feats.max(axis=0)
        span = hi - lo
        const = span == 0
        feats = (feats - lo) / np.where(const, 1.0, span)
        feats[:, const] = 0.0
    if label_column is None:
        return feats, None, 0
    raw = [row[header.index(label_column)].strip() for row in rows]
    try:
        keys = sorted(set(raw), key=float)
    except ValueError:
        keys = sorted(set(raw))
    index = {k: i for i, k in enumerate(keys)}
    labels = np.array([index[v] for v in raw], dtype=int)
    return feats, labels, len(keys)


def write_stream_csv(batches: Sequence[StreamBatch], path) -> None:
    """Serialise one stream (features, label, batch_index, domain) to CSV."""
    batches = list(batches)
    dim = batches[0].dim if batches else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dim)] + ["label", "batch_index", "domain"])
        for b in batches:
            if b.labels is not None:
                labels = b.labels
            elif b.eval_labels is not None:
                labels = b.eval_labels.reveal("export")
            else:
                labels = np.full(len(b), UNLABELLED)
            for x, y in zip(b.features, labels):
                w.writerow([repr(float(v)) for v in x] + [int(y), b.batch_index, b.domain.value])


def allocate_proportional(counts: Sequence[int], total: int) -> np.ndarray:
    """Split ``total`` across classes proportionally to ``counts``.

    Leftover units go to the largest fractional parts, ties to the lower class index.
    """
    counts = np.asarray(counts, dtype=int)
    n = counts.sum()
    quota = total * counts / n
    alloc = np.floor(quota).astype(int)
    frac = quota - alloc
    left = total - alloc.sum()
    order = sorted(range(len(counts)), key=lambda i: (-frac[i], i))
    for i in order[:left]:
        alloc[i] += 1
    return np.minimum(alloc, counts)


def mask_labels(prerecorded: StreamBatch, source_batches: Sequence[StreamBatch],
                target_batches: Sequence[StreamBatch], config: StreamConfig):
    """Apply the label-scarcity protocol.

    Keeps ``config.prerecorded_size`` labels on the prerecorded batch (per-class
    proportional, chosen with the config seed); every stream batch loses its
    visible labels, which move into a :class:`HiddenLabels` side channel.
    """
    if prerecorded.labels is None:
        raise ValueError("prerecorded batch carries no labels")
    y = prerecorded.labels
    m = config.n_classes
    counts = np.bincount(y[y >= 0], minlength=m)
    if np.any(counts == 0):
        missing = [int(i) for i in np.flatnonzero(counts == 0)]
        raise ValueError(f"classes {missing} have no prerecorded samples")
    keep_per_class = allocate_proportional(counts, config.prerecorded_size)
    rng = np.random.default_rng(config.rng_seed + 7)
    visible = np.full(len(y), UNLABELLED)
    for cls, k in enumerate(keep_per_class):
        idx = np.flatnonzero(y == cls)
        chosen = rng.permutation(idx)[:k]
        visible[chosen] = cls
    pre = replace(prerecorded, labels=visible, eval_labels=HiddenLabels(y))

    def hide(b: StreamBatch) -> StreamBatch:
        truth = b.labels if b.labels is not None else None
        hidden = HiddenLabels(truth) if truth is not None else b.eval_labels
        return replace(b, labels=None, eval_labels=hidden)

    return pre, [hide(b) for b in source_batches], [hide(b) for b in target_batches]
