"""Per-source-image spread of the attack: 5 popular and 5 rare QA pairs over many images.

    python3 scripts/scale_image.py configs/default.json [n_images]
"""
import sys
import warnings
from collections import defaultdict

import numpy as np

from avlt.attacks import Theorem2Warning
from avlt.campaign import run_campaign
from avlt.cli import Context, load_config
from avlt.targets.targetsets import build_target_set


def main():
    cfg, digest = load_config(sys.argv[1] if len(sys.argv) > 1 else None)
    n_images = int(sys.argv[2]) if len(sys.argv) > 2 else 20
    ctx = Context(cfg, digest)
    ts = build_target_set("ScaleImage", ctx.corpus(), seed=cfg.seed, n_images=n_images)
    warnings.simplefilter("ignore", Theorem2Warning)
    for victim in ("monolithic", "attentive"):
        entries = run_campaign(ctx.load_victim(victim), ts, "ours", cfg.attack, seed=cfg.seed, workers=cfg.workers)
        per_image = defaultdict(list)
        for e in entries:
            per_image[e.triple.image_id].append(e.result.success)
        rates = np.array([np.mean(v) for v in per_image.values()])
        print(f"{victim}: {len(entries)} attacks over {len(rates)} images, per-image success "
              f"mean {rates.mean():.3f} min {rates.min():.3f} max {rates.max():.3f}")


if __name__ == "__main__":
    main()
