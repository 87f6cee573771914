"""Command line: train, embed, extract, attack, evaluate, ablate, report.

Exit codes: 0 success, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import torch
import yaml

from . import noise
from .core import (ConfigError, ExperimentConfig, load_config, load_grid, make_generator,
                   parse_override, sample_message)
from .data import DataError, load_image_dir, read_image, sample_images, write_image
from .networks import load_checkpoint
from .objectives import quantize_export
from .training import SweepReport, ablate, evaluate_sweep, train

log = logging.getLogger("swinmark")

EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict[str, Any] = dict(parse_override(o) for o in (args.override or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = ExperimentConfig.from_dict(overrides)
    log.info("resolved config:\n%s", yaml.safe_dump(cfg.to_dict(), sort_keys=False).rstrip())
    return cfg


def _models(args: argparse.Namespace):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    cfg = None
    if args.config or args.override:
        cfg = resolve_config(args)
    stored, encoder, decoder, _ = load_checkpoint(args.checkpoint, cfg)
    if cfg is None:
        log.info("resolved config (from checkpoint):\n%s",
                 yaml.safe_dump(stored.to_dict(), sort_keys=False).rstrip())
    encoder.eval()
    decoder.eval()
    return stored, encoder, decoder


def _dataset(path: str | None, n_samples: int | None, cfg: ExperimentConfig) -> torch.Tensor:
    if path:
        return load_image_dir(path, cfg.height, cfg.width)
    if n_samples:
        return sample_images(n_samples, cfg.height, cfg.width)
    raise UsageError("give --data DIR or --sample-images N")


def parse_message(text: str | None, bits: str | None, length: int, seed: int) -> torch.Tensor:
    if text and bits:
        raise UsageError("give either --message or --bits, not both")
    if bits is not None:
        bits = bits.strip()
        if set(bits) - {"0", "1"}:
            raise UsageError("--bits must contain only 0 and 1")
        if len(bits) != length:
            raise UsageError(f"message has {len(bits)} bits, model expects {length}")
        return torch.tensor([[float(b) for b in bits]])
    if text is not None:
        text = text.lower().removeprefix("0x")
        if length % 4:
            raise UsageError(f"hex input needs a bit length divisible by 4 (L={length}); use --bits")
        if len(text) * 4 != length:
            raise UsageError(f"message has {len(text) * 4} bits, model expects {length}")
        try:
            value = int(text, 16)
        except ValueError as exc:
            raise UsageError(f"not a hex string: {text!r}") from exc
        return torch.tensor([[float((value >> (length - 1 - i)) & 1) for i in range(length)]])
    return sample_message(1, length, seed)


def bits_to_str(bits: torch.Tensor) -> str:
    return "".join(str(int(b)) for b in bits.flatten().tolist())


def bits_to_hex(bits: torch.Tensor) -> str | None:
    s = bits_to_str(bits)
    if len(s) % 4:
        return None
    return f"{int(s, 2):0{len(s) // 4}x}"


# ---------------------------------------------------------------- commands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    images = _dataset(args.data, args.sample_images, cfg)
    trainer = train(cfg, images, args.kind, args.out, args.steps, args.log_every, args.checkpoint_every)
    final = Path(args.out) / "final.pt"
    print(json.dumps({"checkpoint": str(final), "steps": trainer.state.step,
                      "last": trainer.history[-1] if trainer.history else None}))
    return 0


@torch.no_grad()
def cmd_embed(args: argparse.Namespace) -> int:
    cfg, encoder, _ = _models(args)
    cover = read_image(args.image, cfg.height, cfg.width)[None]
    seed = args.seed if args.seed is not None else cfg.seed
    message = parse_message(args.message, args.bits, cfg.msg_len, seed)
    watermarked = quantize_export(encoder(cover, message))
    out = write_image(watermarked[0], args.out)
    sidecar = out.with_suffix(out.suffix + ".json")
    record = {"image": str(out), "source": str(args.image), "bits": bits_to_str(message),
              "hex": bits_to_hex(message), "msg_len": cfg.msg_len, "checkpoint": str(args.checkpoint)}
    sidecar.write_text(json.dumps(record, indent=2))
    print(json.dumps(record))
    return 0


@torch.no_grad()
def cmd_extract(args: argparse.Namespace) -> int:
    cfg, _, decoder = _models(args)
    image = read_image(args.image, cfg.height, cfg.width)[None]
    # float64 so confident bits do not print as exactly 0 or 1
    probs = torch.sigmoid(decoder(image)[0].double())
    bits = (probs > 0.5).to(torch.float32)
    record: dict[str, Any] = {"bits": bits_to_str(bits), "hex": bits_to_hex(bits),
                              "confidence": [float(p) for p in probs]}
    if args.truth:
        truth = json.loads(Path(args.truth).read_text())["bits"]
        record["acc"] = sum(a == b for a, b in zip(truth, record["bits"])) / len(truth)
    print(json.dumps(record))
    return 0


@torch.no_grad()
def cmd_attack(args: argparse.Namespace) -> int:
    try:
        spec = noise.parse_spec(args.spec)
    except noise.DistortionError as exc:
        raise UsageError(str(exc)) from exc
    if spec.kind in noise.NEEDS_COVER and not args.cover:
        raise UsageError(f"{spec.kind} needs --cover")
    image = read_image(args.image)[None]
    cover = None
    if args.cover:
        cover = read_image(args.cover)[None]
        if cover.shape != image.shape:
            raise DataError(f"cover is {list(cover.shape[2:])}, image is {list(image.shape[2:])}")
    attacked = noise.apply(spec, image, cover, make_generator(args.seed or 0))
    write_image(attacked[0], args.out)
    print(json.dumps({"spec": f"{spec.kind}:{spec.label()}", "out": str(args.out)}))
    return 0


def _grid(args: argparse.Namespace) -> dict[str, list[Any]]:
    grid = load_grid(args.config) if args.config else {}
    kinds = args.kind or (list(grid) if grid else list(noise.TEST_GRIDS))
    for kind in kinds:
        if kind not in noise.KINDS:
            raise UsageError(f"unknown distortion kind {kind!r}")
    return {k: grid.get(k, noise.TEST_GRIDS[k]) for k in kinds}


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg, encoder, decoder = _models(args)
    images = _dataset(args.data, args.sample_images, cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    report = evaluate_sweep(encoder, decoder, cfg, images, _grid(args), seed,
                            metadata={"checkpoint": Path(args.checkpoint).stem,
                                      "dataset_path": args.data or f"sample:{args.sample_images}"})
    if args.out:
        report.to_csv(args.out)
    print(report.to_text())
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    images = _dataset(args.data, args.sample_images, cfg)
    kind = (args.kind or [cfg.distortion])[0]
    reports = [ablate(cfg, images, flag, kind, steps=args.steps, out_dir=args.out,
                      seed=cfg.seed) for flag in args.flag]
    print("\n\n".join(r.to_text() for r in reports))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.csv)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        report = SweepReport.from_csv(path)
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed sweep CSV {path}: {exc}") from exc
    sys.stdout.write(report.to_text(args.model))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swinmark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat key: value config file")
        p.add_argument("--override", action="append", metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    def data(p):
        p.add_argument("--data", help="directory of images (center-cropped and resized)")
        p.add_argument("--sample-images", type=int, metavar="N",
                       help="use N natural images bundled with scikit-image instead of --data")

    p = sub.add_parser("train", help="train one specialist model")
    common(p)
    data(p)
    p.add_argument("--kind", help="distortion kind (default: config 'distortion')")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="watermark one image")
    common(p, checkpoint=True)
    p.add_argument("--image", required=True)
    p.add_argument("--message", help=f"hex string of L/4 characters")
    p.add_argument("--bits", help="string of L zeros and ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover the message from an image")
    common(p, checkpoint=True)
    p.add_argument("--image", required=True)
    p.add_argument("--truth", help="sidecar JSON from embed; adds bit accuracy")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", help="apply one distortion to an image file")
    p.add_argument("--spec", required=True, help="kind[:strength], e.g. rotation:15")
    p.add_argument("--image", required=True)
    p.add_argument("--cover", help="cover image (cropout/dropout)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="sweep attack strengths, write CSV + tables")
    common(p, checkpoint=True)
    data(p)
    p.add_argument("--kind", action="append", help="restrict to these kinds (repeatable)")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train with/without LCEB or FEB and compare")
    common(p)
    data(p)
    p.add_argument("--flag", action="append", choices=["use_lceb", "use_feb"], required=True)
    p.add_argument("--kind", action="append")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render a sweep CSV as aligned text tables")
    p.add_argument("csv")
    p.add_argument("--model", help="row label (default: checkpoint id from the CSV header)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate")
                        else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, noise.DistortionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
