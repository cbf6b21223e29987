"""Side-by-side CDF of adversarial probabilities, ours vs CW, on the Gold set.

Writes <out_dir>/results/gold_cdf_<victim>.csv with one row per probability grid
point; run after the Gold campaigns of run_experiments.py.
"""
import json
import sys
from pathlib import Path

import numpy as np

from avlt.cli import atomic_write, csv_text, load_config

GRID = np.linspace(0.0, 1.0, 101)


def fraction_below(values, grid):
    v = np.sort(np.asarray(values))
    return np.searchsorted(v, grid, side="right") / len(v)


def main():
    cfg, _ = load_config(sys.argv[1] if len(sys.argv) > 1 else None)
    res = Path(cfg.out_dir) / "results"
    for victim in ("monolithic", "attentive"):
        cols = {}
        for attack in ("ours", "cw"):
            path = res / f"{attack}-gold-{victim}" / "per_triple.json"
            if not path.exists():
                sys.exit(f"missing {path}")
            probs = [r["adversarial_probability"] for r in json.loads(path.read_text())]
            cols[attack] = fraction_below(probs, GRID)
            print(f"{victim:11s} {attack:4s} mean p {np.mean(probs):.3f} median p {np.median(probs):.3f}")
        rows = [(f"{g:.2f}", f"{a:.4f}", f"{b:.4f}") for g, a, b in zip(GRID, cols["ours"], cols["cw"])]
        atomic_write(res / f"gold_cdf_{victim}.csv", csv_text(["probability", "ours", "cw"], rows))


if __name__ == "__main__":
    main()
