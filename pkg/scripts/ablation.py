"""Train with and without LCEB / FEB under one seed and print the deltas.

Desk-scale default: tiny config, 8 bundled images, a short schedule.

    python3 scripts/ablation.py --flag use_lceb --flag use_feb --kind identity --steps 500
"""

import argparse
import logging

from swinmark.core import ExperimentConfig, load_config, tiny_config
from swinmark.data import load_image_dir, sample_images
from swinmark.training import ablate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="flat config file (default: tiny config)")
    ap.add_argument("--flag", action="append", choices=["use_lceb", "use_feb"])
    ap.add_argument("--kind", default="identity")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--data")
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg: ExperimentConfig = load_config(args.config) if args.config else tiny_config()
    cfg = cfg.replace(steps=args.steps)
    if args.data:
        images = load_image_dir(args.data, cfg.height, cfg.width, args.images)
    else:
        images = sample_images(args.images, cfg.height, cfg.width)
    for flag in args.flag or ["use_lceb", "use_feb"]:
        report = ablate(cfg, images, flag, args.kind, steps=args.steps, out_dir=args.out, seed=cfg.seed)
        print(report.to_text(), end="\n\n")


if __name__ == "__main__":
    main()
