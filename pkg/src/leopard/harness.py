"""Experiment runner: configuration, multi-seed prequential runs, the AE+KMeans
baseline, H-divergence diagnostics and label-proportion sweeps.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .clustering import ClusterSet, predict_from_latents, update_allegiance
from .learner import Ablation, Learner, LearnerConfig, LossReport, evaluate_batch
from .network import LeopardModel
from .stream import (Domain, StreamBatch, StreamConfig, generate_synthetic_streams,
                     load_csv_dataset, mask_labels, streams_from_arrays)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    n_runs: int = 5
    seeds: Optional[List[int]] = None
    ablation: Ablation = field(default_factory=Ablation)
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.seeds is None:
            self.seeds = list(range(self.n_runs))
        self.seeds = [int(s) for s in self.seeds]
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if len(self.seeds) != self.n_runs:
            raise ConfigError(f"{len(self.seeds)} seeds given for n_runs={self.n_runs}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw = dict(d)
        kw["stream"] = _strict(StreamConfig, d.get("stream", {}), "stream")
        kw["learner"] = _strict(LearnerConfig, d.get("learner", {}), "learner")
        abl = d.get("ablation", {})
        if isinstance(abl, str):
            try:
                kw["ablation"] = Ablation.preset(abl)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        else:
            kw["ablation"] = _strict(Ablation, abl, "ablation")
        if "seeds" in d and "n_runs" not in d and d["seeds"] is not None:
            kw["n_runs"] = len(d["seeds"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {"stream": dataclasses.asdict(self.stream),
                "learner": {**dataclasses.asdict(self.learner),
                            "extractor_widths": list(self.learner.extractor_widths)},
                "n_runs": self.n_runs, "seeds": list(self.seeds),
                "ablation": dataclasses.asdict(self.ablation), "output_dir": self.output_dir}

    def with_updates(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class MetricsRecord:
    seed: int
    batch_index: int
    stream: str
    accuracy: Optional[float]
    n_layers: int
    total_nodes: int
    total_clusters: int
    losses: Optional[dict]
    events: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    seed: int
    records: List[MetricsRecord]
    protocol: List[tuple]
    events: List[dict]
    stream_digest: str
    model: LeopardModel
    numeric_failures: int = 0
    reused_batches: int = 0
    label_reads: List[tuple] = field(default_factory=list)

    def mean_accuracy(self, stream: str = "target") -> float:
        acc = [r.accuracy for r in self.records if r.stream == stream and r.accuracy is not None]
        return float(np.mean(acc)) if acc else float("nan")


def stream_digest(prerecorded: StreamBatch, source: Sequence[StreamBatch],
                  target: Sequence[StreamBatch]) -> str:
    """sha256 over every feature matrix, in stream order."""
    h = hashlib.sha256()
    for b in [prerecorded, *source, *target]:
        h.update(f"{b.domain.value}:{b.batch_index}:".encode())
        h.update(np.ascontiguousarray(b.features).tobytes())
    return h.hexdigest()


def build_streams(config: StreamConfig, seed: int):
    """Masked prerecorded batch and source/target streams for one seed."""
    cfg = dataclasses.replace(config, rng_seed=seed)
    if cfg.source_csv or cfg.target_csv:
        if not (cfg.source_csv and cfg.target_csv):
            raise ConfigError("both source_csv and target_csv are required")
        xs, ys, ms = load_csv_dataset(cfg.source_csv, cfg.label_column)
        xt, yt, mt = load_csv_dataset(cfg.target_csv, cfg.label_column)
        if ys is None or yt is None:
            raise ConfigError("label_column is required for CSV streams")
        if max(ms, mt) != cfg.n_classes:
            raise ConfigError(f"CSV data has {max(ms, mt)} classes, config says {cfg.n_classes}")
        pre, src, tgt = streams_from_arrays(xs, ys, xt, yt, cfg)
    else:
        pre, src, tgt = generate_synthetic_streams(cfg)
    return mask_labels(pre, src, tgt, cfg)


def majority_rate(config: StreamConfig, seeds: Sequence[int]) -> float:
    """Mean (over seeds) share of the most frequent class in the target stream."""
    rates = []
    for seed in seeds:
        cfg = dataclasses.replace(config, rng_seed=seed)
        if cfg.source_csv:
            _, _, tgt = build_streams(cfg, seed)
            y = np.concatenate([b.eval_labels.reveal("majority") for b in tgt])
        else:
            _, _, tgt = generate_synthetic_streams(cfg)
            y = np.concatenate([b.labels for b in tgt])
        rates.append(np.bincount(y).max() / len(y))
    return float(np.mean(rates))


def _new_model(config: ExperimentConfig, prerecorded, source, target, seed) -> LeopardModel:
    mc = config.learner.model_config(source[0].dim, target[0].dim, config.stream.n_classes, seed)
    return LeopardModel(mc)


def _structure_counts(model: LeopardModel, clusters: bool = True):
    nodes = sum(layer.width for layer in model.layers)
    n_clusters = sum(len(layer.clusters) for layer in model.layers) if clusters else 0
    return model.depth, nodes, n_clusters


class _KMeansScorer:
    """Prediction for the AE+KMeans baseline.

    After each training step k-means is fitted on the bottleneck latents of
    the batch pair just trained on (the prerecorded batch before the first
    step); its clusters take class allegiance from the labelled prerecorded
    samples. The next batches are labelled by their nearest cluster's
    strongest class, so a scored batch is never part of the fit.
    """

    def __init__(self, model: LeopardModel, prerecorded: StreamBatch, n_clusters: int, seed: int):
        self.model = model
        self.prerecorded = prerecorded
        self.k = n_clusters
        self.seed = seed
        self.clusters: Optional[ClusterSet] = None

    def fit(self, batches: Sequence[StreamBatch]) -> ClusterSet:
        from sklearn.cluster import KMeans
        from sklearn.exceptions import ConvergenceWarning

        model = self.model
        h = np.vstack([model.encode(model.extract(b.features, b.domain))[-1] for b in batches])
        k = min(self.k, len(h))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            km = KMeans(n_clusters=k, n_init=10, init="k-means++", random_state=self.seed).fit(h)
        cs = ClusterSet(h.shape[1], model.n_classes)
        for c in km.cluster_centers_:
            cs.add(c)
        mask = self.prerecorded.labelled_mask
        h_pre = model.encode(model.extract(self.prerecorded.features[mask], Domain.SOURCE))[-1]
        update_allegiance(cs, h_pre, self.prerecorded.labels[mask], model.lam)
        self.clusters = cs
        return cs

    def predict(self, batch: StreamBatch) -> np.ndarray:
        if self.clusters is None:
            raise RuntimeError("k-means has not been fitted")
        h = self.model.encode(self.model.extract(batch.features, batch.domain))[-1]
        return predict_from_latents([h], [self.clusters], self.model.n_classes, self.model.lam).labels

    def evaluate(self, batch: StreamBatch) -> float:
        truth = batch.eval_labels.reveal("evaluate")
        return float(np.mean(self.predict(batch) == truth))


def run_single(config: ExperimentConfig, seed: int, method: str = "leopard") -> RunResult:
    """One prequential run: per batch index, score target then source, then train."""
    if method not in ("leopard", "baseline"):
        raise ValueError(f"unknown method {method!r}")
    pre, src, tgt = build_streams(config.stream, seed)
    digest = stream_digest(pre, src, tgt)
    model = _new_model(config, pre, src, tgt, seed)
    baseline = method == "baseline"
    ablation = Ablation(False, False, False) if baseline else config.ablation
    learner = Learner(model, pre, config.learner, ablation, rng_seed=seed, recon_only=baseline)
    learner.warm_up()
    if baseline:
        scorer = _KMeansScorer(model, pre, max(config.stream.n_classes, 10), seed)
        scorer.fit([pre])
        evaluate = scorer.evaluate
    else:
        learner.init_clusters()
        evaluate = lambda b: evaluate_batch(model, b)  # noqa: E731

    records: List[MetricsRecord] = []
    protocol: List[tuple] = []
    n_batches = max(len(src), len(tgt))
    for k in range(1, n_batches + 1):
        s_reused, t_reused = k > len(src), k > len(tgt)
        s, t = src[min(k, len(src)) - 1], tgt[min(k, len(tgt)) - 1]
        acc = {}
        for b, reused in ((t, t_reused), (s, s_reused)):
            if not reused:
                acc[b.domain.value] = evaluate(b)
                protocol.append(("evaluate", b.domain.value, b.batch_index))
        report, events = learner.train_on_batch_pair(s, t, s_reused, t_reused)
        if baseline:
            scorer.fit([b for b, reused in ((s, s_reused), (t, t_reused)) if not reused])
        for b, reused in ((s, s_reused), (t, t_reused)):
            if not reused:
                protocol.append(("train", b.domain.value, b.batch_index))
        depth, nodes, n_clusters = _structure_counts(model, clusters=not baseline)
        for b, reused in ((t, t_reused), (s, s_reused)):
            if reused:
                continue
            name = b.domain.value
            mine = [e for e in events if e["stream"] == name or (e["stream"] == "both" and name == "target")]
            records.append(MetricsRecord(seed, k, name, acc[name], depth, nodes, n_clusters,
                                         None if report is None else report.to_dict(), mine))
    # every read of a stream's hidden labels, for leakage audits
    reads = [(b.domain.value, b.batch_index, tuple(b.eval_labels.audit)) for b in [*src, *tgt]]
    return RunResult(seed, records, protocol, list(learner.events.records), digest, model,
                     learner.numeric_failures, learner.reused_batches, reads)


def _prepare_output(out_dir) -> Optional[Path]:
    if out_dir is None:
        return None
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from exc
    return path


def summarize(runs: Sequence[RunResult], method: str) -> dict:
    per_run = [{"seed": r.seed,
                "target_accuracy": r.mean_accuracy("target"),
                "source_accuracy": r.mean_accuracy("source"),
                "n_layers": r.model.depth,
                "total_nodes": sum(l.width for l in r.model.layers),
                "numeric_failures": r.numeric_failures,
                "reused_batches": r.reused_batches,
                "stream_digest": r.stream_digest} for r in runs]
    target = np.array([p["target_accuracy"] for p in per_run])
    source = np.array([p["source_accuracy"] for p in per_run])
    return {"method": method,
            "mean_accuracy": float(target.mean()),
            "std_accuracy": float(target.std(ddof=1)) if len(target) > 1 else 0.0,
            "source_mean_accuracy": float(source.mean()),
            "per_run": per_run,
            "traces": {str(r.seed): [rec.accuracy for rec in r.records if rec.stream == "target"]
                       for r in runs}}


def _persist(out: Optional[Path], runs: Sequence[RunResult], summary: dict, config: ExperimentConfig):
    if out is None:
        return
    with (out / "metrics.jsonl").open("w", encoding="utf-8") as fh:
        for r in runs:
            for rec in r.records:
                fh.write(json.dumps(rec.to_dict()) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")


def _run_all(config: ExperimentConfig, method: str, keep_runs: bool):
    out = _prepare_output(config.output_dir)
    runs = []
    for seed in config.seeds:
        log.info("%s run, seed %d", method, seed)
        runs.append(run_single(config, seed, method))
    summary = summarize(runs, "ae_kmeans" if method == "baseline" else method)
    _persist(out, runs, summary, config)
    if keep_runs:
        summary["runs"] = runs
    return summary


def run_experiment(config: ExperimentConfig, keep_runs: bool = False) -> dict:
    """Multi-seed LEOPARD runs.

    :return: ``mean_accuracy`` / ``std_accuracy`` of the per-run average target
        accuracy, per-run details and per-batch target traces; with
        ``keep_runs`` also the :class:`RunResult` objects under ``"runs"``
        (never persisted)
    """
    return _run_all(config, "leopard", keep_runs)


def run_baseline_ae_kmeans(config: ExperimentConfig, keep_runs: bool = False) -> dict:
    """Same streams and protocol, reconstruction-only training, k-means prediction."""
    return _run_all(config, "baseline", keep_runs)


def empirical_h_divergence(pred_source, pred_target) -> float:
    """``2 (1 - min(err, 2 - err))`` where ``err`` sums the per-domain error rates.

    Predictions are 1 for "source" and 0 for "target". Taking the minimum with
    the flipped classifier keeps the value in [0, 2].
    """
    ps = np.asarray(pred_source).astype(int)
    pt = np.asarray(pred_target).astype(int)
    if len(ps) == 0 or len(pt) == 0:
        raise ValueError("both domains need predictions")
    err = float(np.mean(ps != 1) + np.mean(pt != 0))
    return 2.0 * (1.0 - min(err, 2.0 - err))


def proxy_h_divergence(source_latents, target_latents, rng_seed: int = 0, hidden: int = 16) -> float:
    """Empirical H-divergence measured by a fresh one-hidden-layer probe.

    Each domain is split 50/50; the probe trains on the first halves and is
    scored on the held-out halves.
    """
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.neural_network import MLPClassifier

    S = np.atleast_2d(np.asarray(source_latents, dtype=float))
    T = np.atleast_2d(np.asarray(target_latents, dtype=float))
    if len(S) < 10 or len(T) < 10:
        raise ValueError("need at least 10 latents per stream")
    if S.shape[1] != T.shape[1]:
        raise ValueError("source and target latents differ in dimension")
    rng = np.random.default_rng(rng_seed)
    s_idx, t_idx = rng.permutation(len(S)), rng.permutation(len(T))
    s_tr, s_te = np.array_split(s_idx, 2)
    t_tr, t_te = np.array_split(t_idx, 2)
    X = np.vstack([S[s_tr], T[t_tr]])
    y = np.r_[np.ones(len(s_tr), int), np.zeros(len(t_tr), int)]
    probe = MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=500, random_state=rng_seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        probe.fit(X, y)
    return empirical_h_divergence(probe.predict(S[s_te]), probe.predict(T[t_te]))


def diagnose(config: ExperimentConfig, seed: Optional[int] = None) -> dict:
    """H-divergence of extracted features before adaptation (after warm-up) and after a full run."""
    seed = config.seeds[0] if seed is None else seed
    pre, src, tgt = build_streams(config.stream, seed)
    model = _new_model(config, pre, src, tgt, seed)
    learner = Learner(model, pre, config.learner, config.ablation, rng_seed=seed)
    learner.warm_up()
    Xs = np.vstack([b.features for b in src])
    Xt = np.vstack([b.features for b in tgt])

    def measure():
        return {"features": proxy_h_divergence(model.extract(Xs, Domain.SOURCE),
                                               model.extract(Xt, Domain.TARGET), seed),
                "bottleneck": proxy_h_divergence(model.encode(model.extract(Xs, Domain.SOURCE))[-1],
                                                 model.encode(model.extract(Xt, Domain.TARGET))[-1], seed)}

    before = measure()
    learner.init_clusters()
    for k in range(1, max(len(src), len(tgt)) + 1):
        s_reused, t_reused = k > len(src), k > len(tgt)
        learner.train_on_batch_pair(src[min(k, len(src)) - 1], tgt[min(k, len(tgt)) - 1], s_reused, t_reused)
    return {"seed": seed, "before": before, "after": measure()}


def label_proportion_sweep(config: ExperimentConfig, proportions: Sequence[float]) -> List[dict]:
    """Re-run :func:`run_experiment` per label proportion; one row per proportion."""
    rows = []
    for p in proportions:
        if not 0.0 < p <= 1.0:
            raise ConfigError(f"label proportion {p} outside (0, 1]")
        out = None if config.output_dir is None else str(Path(config.output_dir) / f"p_{p:g}")
        cfg = config.with_updates(stream=dataclasses.replace(config.stream, label_proportion=p),
                                  output_dir=out)
        s = run_experiment(cfg)
        rows.append({"label_proportion": p, "mean_accuracy": s["mean_accuracy"],
                     "std_accuracy": s["std_accuracy"],
                     "per_run": [r["target_accuracy"] for r in s["per_run"]]})
    if config.output_dir is not None:
        _prepare_output(config.output_dir)
        (Path(config.output_dir) / "sweep.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return rows
