import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leopard.cli import main
from leopard.harness import (ConfigError, ExperimentConfig, empirical_h_divergence, label_proportion_sweep,
                             proxy_h_divergence, run_baseline_ae_kmeans, run_experiment, run_single)
from leopard.learner import Ablation

TINY = {
    "stream": {"n_source_batches": 4, "n_target_batches": 5, "source_batch_size": 30, "target_batch_size": 36,
               "source_drift_batch": 2, "target_drift_batch": 3, "source_dim": 3, "target_dim": 4},
    "learner": {"init_epochs": 3, "epochs": 1, "adapter_dim": 5, "extractor_widths": [6, 5],
                "initial_width": 4, "dc_hidden": 4, "shared_input_features": 2},
    "n_runs": 2,
}


def tiny_config(**changes) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**TINY, **changes})


def test_config_defaults_and_seeds():
    cfg = ExperimentConfig()
    assert cfg.seeds == [0, 1, 2, 3, 4]
    assert ExperimentConfig.from_dict({"seeds": [7, 9]}).n_runs == 2


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"stream": {"n_classes": 3, "colour": "red"}},
    {"learner": {"epochs": 0}},
    {"n_runs": 2, "seeds": [1]},
    {"ablation": "Z"},
    {"ablation": {"kl_loss": False, "extra": True}},
    {"stream": {"source_drift_batch": 5, "target_drift_batch": 5}},
])
def test_config_is_strict(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_from_json_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(bad)


def test_config_roundtrip_and_presets():
    cfg = tiny_config(ablation="A")
    assert cfg.ablation == Ablation(False, False, False)
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


def test_single_seed_is_deterministic():
    cfg = tiny_config(n_runs=1, seeds=[3])
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a == b


def test_summary_is_recomputable_from_metrics(tmp_path):
    cfg = tiny_config(output_dir=str(tmp_path))
    summary = run_experiment(cfg)
    per_run = [r["target_accuracy"] for r in summary["per_run"]]
    assert summary["mean_accuracy"] == pytest.approx(np.mean(per_run), abs=1e-12)
    assert summary["std_accuracy"] == pytest.approx(np.std(per_run, ddof=1), abs=1e-12)
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    for seed, expected in zip(cfg.seeds, per_run):
        acc = [r["accuracy"] for r in records if r["seed"] == seed and r["stream"] == "target"]
        assert np.mean(acc) == pytest.approx(expected, abs=1e-12)
    assert json.loads((tmp_path / "summary.json").read_text())["mean_accuracy"] == summary["mean_accuracy"]
    # one record per (run, batch, stream)
    keys = [(r["seed"], r["batch_index"], r["stream"]) for r in records]
    assert len(keys) == len(set(keys)) == 2 * (4 + 5)
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in records)


def test_baseline_shares_streams_and_schema():
    cfg = tiny_config(n_runs=1, seeds=[1])
    ours = run_single(cfg, 1, "leopard")
    base = run_single(cfg, 1, "baseline")
    assert ours.stream_digest == base.stream_digest
    assert ours.records[0].to_dict().keys() == base.records[0].to_dict().keys()
    assert {r.n_layers for r in base.records} == {1}
    assert {r.total_clusters for r in base.records} == {0}
    assert base.events == []
    summary = run_baseline_ae_kmeans(cfg)
    assert summary["method"] == "ae_kmeans"
    assert summary["mean_accuracy"] == pytest.approx(base.mean_accuracy("target"))


def test_run_single_rejects_unknown_method():
    with pytest.raises(ValueError):
        run_single(tiny_config(), 0, "dann")


def test_unwritable_output_fails_before_running(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        run_experiment(tiny_config(output_dir=str(blocker / "sub")))


def test_label_proportion_sweep_shape():
    rows = label_proportion_sweep(tiny_config(n_runs=1, seeds=[0]), [0.05, 0.10, 0.30])
    assert [r["label_proportion"] for r in rows] == [0.05, 0.10, 0.30]
    with pytest.raises(ConfigError):
        label_proportion_sweep(tiny_config(n_runs=1, seeds=[0]), [0.0])


def test_empirical_h_divergence_hand_values():
    assert empirical_h_divergence(np.ones(5), np.ones(5)) == 0.0
    assert empirical_h_divergence(np.ones(5), np.zeros(5)) == 2.0
    assert empirical_h_divergence(np.zeros(5), np.ones(5)) == 2.0


@given(st.lists(st.booleans(), min_size=1, max_size=20), st.lists(st.booleans(), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_empirical_h_divergence_bounded(ps, pt):
    assert 0.0 <= empirical_h_divergence(ps, pt) <= 2.0


def test_proxy_h_divergence_identical_and_disjoint():
    rng = np.random.default_rng(0)
    same = proxy_h_divergence(rng.normal(size=(200, 3)), rng.normal(size=(200, 3)))
    assert 0.0 <= same <= 0.3
    apart = proxy_h_divergence(rng.normal(size=(200, 3)), rng.normal(10.0, 1.0, size=(200, 3)))
    assert apart > 1.9


def test_proxy_h_divergence_needs_samples():
    with pytest.raises(ValueError):
        proxy_h_divergence(np.zeros((5, 2)), np.zeros((20, 2)))


def _write_config(tmp_path, **changes):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**TINY, "n_runs": 1, "seeds": [0], **changes}))
    return path


def test_cli_run_writes_metrics(tmp_path, capsys):
    out = tmp_path / "results"
    assert main(["run", "--config", str(_write_config(tmp_path)), "--out", str(out)]) == 0
    assert (out / "metrics.jsonl").exists() and (out / "summary.json").exists()
    assert "mean_accuracy" in json.loads(capsys.readouterr().out)


def test_cli_ablation_and_seed_flags(tmp_path):
    out = tmp_path / "r"
    code = main(["run", "--config", str(_write_config(tmp_path)), "--ablation", "A", "--seed", "4",
                 "--out", str(out)])
    assert code == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["ablation"] == {"structure_learning": False, "kl_loss": False, "cd_loss": False}
    assert cfg["seeds"] == [4]


def test_cli_missing_config_writes_nothing(tmp_path):
    out = tmp_path / "results"
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(out)]) == 2
    assert main(["run", "--out", str(out)]) == 2
    assert not out.exists()


def test_cli_usage_errors():
    assert main(["run", "--frobnicate"]) == 2
    assert main(["explode"]) == 2


def test_cli_runtime_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--config", str(_write_config(tmp_path)), "--out", str(blocker / "x")]) == 3


def test_cli_generate_and_diagnose(tmp_path):
    cfg = str(_write_config(tmp_path))
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
    assert sorted(p.name for p in (tmp_path / "g").iterdir()) == [
        "seed0_prerecorded.csv", "seed0_source.csv", "seed0_target.csv"]
    assert main(["diagnose", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    result = json.loads((tmp_path / "d" / "diagnose.json").read_text())
    for stage in ("before", "after"):
        assert all(0.0 <= v <= 2.0 for v in result[stage].values())
