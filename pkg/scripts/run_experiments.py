"""Run the whole experiment pipeline for one config.

    python3 scripts/run_experiments.py configs/default.json [--skip-train]
"""
import argparse
import sys
import time

from avlt.cli import load_config, run_command

STAGES = [
    ("gen-data",),
    ("train-vqa",),
    ("train-cap",),
    ("attack-vqa", "--attack", "ours", "--targets", "popular"),
    ("attack-vqa", "--attack", "ours", "--targets", "rare"),
    ("attack-vqa", "--attack", "ours", "--targets", "gold"),
    ("attack-vqa", "--attack", "cw", "--targets", "gold"),
    ("attack-vqa", "--attack", "ours", "--targets", "nonsense"),
    ("attack-vqa", "--attack", "cw", "--targets", "nonsense"),
    ("attack-cap",),
    ("eval",),
    ("prior",),
    ("transfer", "--targets", "gold"),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--skip-train", action="store_true", help="reuse checkpoints already in out_dir")
    args = ap.parse_args()
    cfg, _ = load_config(args.config)
    print(f"output directory: {cfg.out_dir}")
    for stage in STAGES:
        if args.skip_train and stage[0] in ("gen-data", "train-vqa", "train-cap"):
            continue
        t0 = time.perf_counter()
        print(f"== {' '.join(stage)}", flush=True)
        code = run_command([stage[0], "--config", args.config, *stage[1:]])
        if code:
            sys.exit(code)
        print(f"   {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
