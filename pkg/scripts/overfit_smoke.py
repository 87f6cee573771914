"""Train the tiny model on 8 bundled images with identity noise and report PSNR / ACC.

    python3 scripts/overfit_smoke.py --out runs/smoke
"""

import argparse
import logging
import time
from pathlib import Path

from swinmark import noise
from swinmark.core import tiny_config
from swinmark.data import sample_images
from swinmark.training import Trainer, evaluate_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kind", default="identity")
    ap.add_argument("--out", default="runs/smoke")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = tiny_config(steps=args.steps, seed=args.seed)
    images = sample_images(8, cfg.height, cfg.width)
    start = time.perf_counter()
    trainer = Trainer(cfg, images, args.kind, args.out)
    trainer.fit(log_every=200)
    path = trainer.save(Path(args.out) / "final.pt")
    report = evaluate_sweep(trainer.encoder, trainer.decoder, cfg, images,
                            {args.kind: noise.TEST_GRIDS[args.kind]})
    print(report.to_text("tiny"))
    print(f"checkpoint {path}, {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
