"""Small end-to-end run: one seed of the synthetic benchmark, LEOPARD against AE+KMeans.

Usage: python3 demos/quickstart.py [seed]
"""
import sys
from pathlib import Path

import numpy as np

from leopard.harness import ExperimentConfig, run_single

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.json"


def main(seed: int = 0) -> None:
    cfg = ExperimentConfig.from_json(CONFIG)
    ours = run_single(cfg, seed, "leopard")
    base = run_single(cfg, seed, "baseline")
    print(f"seed {seed}: target accuracy LEOPARD {ours.mean_accuracy():.3f}, AE+KMeans {base.mean_accuracy():.3f}")

    # per-batch trace around the injected drift
    drift = cfg.stream.target_drift_batch
    acc = {r.batch_index: r.accuracy for r in ours.records if r.stream == "target"}
    window = [acc[b] for b in range(drift - 3, drift + 4) if b in acc]
    print(f"target accuracy, batches {drift - 3}..{drift + 3}: {np.round(window, 2).tolist()}")

    for e in ours.events:
        if e["event"] in ("drift", "add_layer"):
            print(f"batch {e['batch']:>2} {e['stream']:>6}: {e['event']}")
    print(f"final depth {ours.model.depth}, widths {[L.width for L in ours.model.layers]}, "
          f"clusters {[len(L.clusters) for L in ours.model.layers]}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
