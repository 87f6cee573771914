"""Evaluate a checkpoint over the published attack grids and print the tables.

    python3 scripts/sweep.py runs/rotation/final.pt --data /path/to/test --kind rotation --csv out.csv
"""

import argparse

from swinmark import noise
from swinmark.core import load_grid
from swinmark.data import load_image_dir, sample_images
from swinmark.networks import load_checkpoint
from swinmark.training import evaluate_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--data", help="image directory (default: bundled sample images)")
    ap.add_argument("--limit", type=int, help="use at most this many images")
    ap.add_argument("--kind", action="append", help="repeatable; default: every kind")
    ap.add_argument("--grid", help="config file with grid_<kind> lists")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv")
    args = ap.parse_args()

    cfg, encoder, decoder, _ = load_checkpoint(args.checkpoint)
    if args.data:
        images = load_image_dir(args.data, cfg.height, cfg.width, args.limit)
    else:
        images = sample_images(args.limit or 16, cfg.height, cfg.width)
    custom = load_grid(args.grid) if args.grid else {}
    kinds = args.kind or list(noise.TEST_GRIDS)
    grid = {k: custom.get(k, noise.TEST_GRIDS[k]) for k in kinds}
    report = evaluate_sweep(encoder, decoder, cfg, images, grid, args.seed,
                            metadata={"checkpoint": args.checkpoint})
    if args.csv:
        report.to_csv(args.csv)
    print(report.to_text())


if __name__ == "__main__":
    main()
