"""End-to-end training loop, sweep evaluation and ablation runs."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import torch

from . import noise
from .core import ConfigError, ExperimentConfig, cosine_lr, make_generator, sample_message
from .networks import Decoder, Encoder, build_models, count_parameters, load_checkpoint, save_checkpoint
from .objectives import LossBreakdown, bit_accuracy, export_psnr, psnr, total_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int
    encoder: Encoder
    decoder: Decoder
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    lr: float
    best: dict[str, float] = field(default_factory=dict)


class Trainer:
    """Encoder -> noise -> decoder training against a single distortion kind."""

    def __init__(self, cfg: ExperimentConfig, images: torch.Tensor, kind: str | None = None,
                 out_dir: str | Path | None = None):
        self.cfg = cfg
        self.kind = kind or cfg.distortion
        if self.kind not in noise.KINDS:
            raise ConfigError(f"unknown distortion kind {self.kind!r}")
        if images.shape[1:] != (3, cfg.height, cfg.width):
            raise ConfigError(f"dataset images are {list(images.shape[1:])}, "
                              f"config wants [3, {cfg.height}, {cfg.width}]")
        self.images = images
        self.out_dir = Path(out_dir) if out_dir is not None else None
        gen = make_generator(cfg.seed)
        encoder, decoder = build_models(cfg, gen)
        params = list(encoder.parameters()) + list(decoder.parameters())
        opt = torch.optim.AdamW(params, lr=cfg.lr_start, betas=cfg.betas,
                                weight_decay=cfg.weight_decay)
        self.state = TrainState(0, encoder, decoder, opt, gen, cfg.lr_start)
        self.history: list[dict[str, float]] = []

    @property
    def encoder(self) -> Encoder:
        return self.state.encoder

    @property
    def decoder(self) -> Decoder:
        return self.state.decoder

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.cfg.steps, self.cfg.lr_start, self.cfg.lr_end)

    def sample_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        gen, n, b = self.state.generator, len(self.images), self.cfg.batch_size
        if b <= n:
            idx = torch.randperm(n, generator=gen)[:b]
        else:
            idx = torch.randint(0, n, (b,), generator=gen)
        return self.images[idx], sample_message(b, self.cfg.msg_len, gen)

    def forward(self, cover: torch.Tensor, message: torch.Tensor,
                spec: noise.DistortionSpec) -> tuple[LossBreakdown, torch.Tensor]:
        cfg = self.cfg
        watermarked = self.encoder(cover, message)
        noised = noise.apply(spec, watermarked, cover, self.state.generator)
        logits = self.decoder(noised)
        losses = total_loss(cover, watermarked, message, torch.sigmoid(logits),
                            (cfg.lambda_image, cfg.lambda_message, cfg.lambda_constraint))
        return losses, logits

    def train_step(self) -> LossBreakdown:
        st = self.state
        st.encoder.train()
        st.decoder.train()
        cover, message = self.sample_batch()
        spec = noise.sample_train_spec(self.kind, st.generator)
        losses, logits = self.forward(cover, message, spec)
        if not torch.isfinite(losses.total):
            self._dump(cover, message, spec, losses)
        st.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        params = [p for g in st.optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)
        st.lr = self.lr_at(st.step)
        for group in st.optimizer.param_groups:
            group["lr"] = st.lr
        st.optimizer.step()
        st.step += 1
        record = losses.as_floats()
        record.update(step=st.step, lr=st.lr, acc=bit_accuracy(message, logits.detach()))
        self.history.append(record)
        return losses

    def _dump(self, cover, message, spec, losses) -> None:
        where = "not saved"
        if self.out_dir is not None:
            path = self.out_dir / f"nonfinite_step{self.state.step}.pt"
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"cover": cover, "message": message, "spec": (spec.kind, spec.strength),
                        "losses": losses.as_floats(), "step": self.state.step}, path)
            where = str(path)
        raise NonFiniteLossError(
            f"non-finite loss at step {self.state.step}: {losses.as_floats()} "
            f"(distortion {spec.kind}:{spec.label()}; batch dump {where})")

    def fit(self, steps: int | None = None, log_every: int = 100,
            checkpoint_every: int | None = None,
            callback: Callable[[int, dict[str, float]], None] | None = None) -> list[dict[str, float]]:
        """Run until ``steps`` total steps (default: the config's schedule length)."""
        total = self.cfg.steps if steps is None else steps
        while self.state.step < total:
            self.train_step()
            rec = self.history[-1]
            if log_every and (rec["step"] % log_every == 0 or rec["step"] == total):
                log.info("step %d lr %.2e total %.5f l_e %.5f l_d %.5f l_c %.5f acc %.4f",
                         rec["step"], rec["lr"], rec["total"], rec["l_e"], rec["l_d"], rec["l_c"], rec["acc"])
            if checkpoint_every and self.out_dir is not None and rec["step"] % checkpoint_every == 0:
                self.save(self.out_dir / f"step{rec['step']:06d}.pt")
            if callback is not None:
                callback(rec["step"], rec)
        return self.history

    def save(self, path: str | Path) -> Path:
        st = self.state
        extra = {"step": st.step, "optimizer": st.optimizer.state_dict(),
                 "generator": st.generator.get_state(), "lr": st.lr, "best": st.best,
                 "kind": self.kind, "history": self.history}
        return save_checkpoint(path, self.cfg, st.encoder, st.decoder, extra)

    @classmethod
    def resume(cls, path: str | Path, images: torch.Tensor, out_dir: str | Path | None = None) -> "Trainer":
        cfg, encoder, decoder, extra = load_checkpoint(path)
        trainer = cls(cfg, images, extra.get("kind"), out_dir)
        st = trainer.state
        st.encoder.load_state_dict(encoder.state_dict())
        st.decoder.load_state_dict(decoder.state_dict())
        st.optimizer.load_state_dict(extra["optimizer"])
        st.generator.set_state(extra["generator"])
        st.step, st.lr, st.best = extra["step"], extra["lr"], dict(extra.get("best", {}))
        trainer.history = list(extra.get("history", []))
        return trainer


def train(cfg: ExperimentConfig, images: torch.Tensor, kind: str | None = None,
          out_dir: str | Path | None = None, steps: int | None = None,
          log_every: int = 100, checkpoint_every: int | None = None) -> Trainer:
    """Train one specialist model; writes ``final.pt`` into ``out_dir`` when given."""
    trainer = Trainer(cfg, images, kind, out_dir)
    trainer.fit(steps, log_every, checkpoint_every)
    if trainer.out_dir is not None:
        trainer.save(trainer.out_dir / "final.pt")
    return trainer


# ---------------------------------------------------------------- evaluation

SYMBOLS = {"gaussian_noise": "σ", "salt_pepper": "σ", "gaussian_blur": "σ", "median_blur": "w",
           "jpeg": "QF", "cropout": "r", "dropout": "r", "rotation": "θ", "scaling": "r",
           "affine": "s", "identity": ""}

TITLES = {"identity": "Identity", "gaussian_noise": "Gaussian Noise",
          "salt_pepper": "Salt & Pepper Noise", "gaussian_blur": "Gaussian Blur",
          "median_blur": "Median Blur", "jpeg": "JPEG", "cropout": "Cropout", "dropout": "Dropout",
          "rotation": "Rotation", "scaling": "Scaling", "affine": "Affine Attack"}


@dataclass
class SweepCell:
    kind: str
    strength: Any
    psnr_db: float
    acc_pct: float
    psnr_internal_db: float = float("nan")


@dataclass
class SweepReport:
    cells: list[SweepCell]
    metadata: dict[str, Any] = field(default_factory=dict)

    CSV_FIELDS = ("kind", "strength", "psnr_db", "acc_pct", "psnr_internal_db")

    def kinds(self) -> list[str]:
        seen: list[str] = []
        for c in self.cells:
            if c.kind not in seen:
                seen.append(c.kind)
        return seen

    def for_kind(self, kind: str) -> list[SweepCell]:
        cells = [c for c in self.cells if c.kind == kind]
        if all(isinstance(c.strength, (int, float)) for c in cells):
            cells.sort(key=lambda c: float(c.strength))
        return cells

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        for k, v in self.metadata.items():
            buf.write(f"# {k}: {v}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for c in self.cells:
            writer.writerow([c.kind, noise.format_strength(c.strength), f"{c.psnr_db:.4f}",
                             f"{c.acc_pct:.4f}", f"{c.psnr_internal_db:.4f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "SweepReport":
        text = Path(source).read_text()
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
        cells = []
        for row in csv.DictReader(body):
            kind = row["kind"]
            cells.append(SweepCell(kind, noise.parse_strength(kind, row["strength"]),
                                   float(row["psnr_db"]), float(row["acc_pct"]),
                                   float(row.get("psnr_internal_db") or "nan")))
        return cls(cells, meta)

    def to_text(self, model_name: str | None = None) -> str:
        name = model_name or str(self.metadata.get("checkpoint", "model"))
        out = []
        for k, v in self.metadata.items():
            out.append(f"# {k}: {v}")
        for kind in self.kinds():
            out.append(render_table(kind, self.for_kind(kind), name))
        return "\n\n".join(out) + ("\n" if out else "")


def _column_label(kind: str, strength: Any, first: bool) -> str:
    if kind == "identity":
        return "none"
    if kind == "median_blur":
        body = f"{int(strength)}×{int(strength)}"
    elif kind == "affine":
        body = "(" + ", ".join(noise.format_strength(v) for v in strength) + ")"
    else:
        body = noise.format_strength(strength)
        if kind == "rotation":
            body += "°"
    return f"{SYMBOLS[kind]}={body}" if first else body


def render_table(kind: str, cells: Sequence[SweepCell], model_name: str = "model") -> str:
    """One published-layout table: model, PSNR(dB) (embedding, pre-attack), ACC(%) per strength."""
    labels = [_column_label(kind, c.strength, i == 0) for i, c in enumerate(cells)]
    psnr_val = sum(c.psnr_db for c in cells) / len(cells)
    header = ["Model", "PSNR(dB)"] + labels
    row = [model_name, f"{psnr_val:.2f}"] + [f"{c.acc_pct:.2f}" for c in cells]
    widths = [max(len(h), len(r)) for h, r in zip(header, row)]
    line = lambda cols: " | ".join(c.rjust(w) for c, w in zip(cols, widths))  # noqa: E731
    title = f"PSNR and ACC with {TITLES[kind]}  (ACC(%) per strength)"
    rule = "-" * len(line(header))
    return "\n".join([title, rule, line(header), rule, line(row), rule])


@torch.no_grad()
def evaluate_sweep(encoder: Encoder, decoder: Decoder, cfg: ExperimentConfig, images: torch.Tensor,
                   grid: dict[str, Sequence[Any]] | Iterable[noise.DistortionSpec],
                   seed: int = 0, batch_size: int | None = None,
                   metadata: dict[str, Any] | None = None) -> SweepReport:
    """Embed fresh messages, attack, decode; one cell per (kind, strength).

    Every cell restarts the generator from ``seed``, so messages and PSNR are
    identical across cells and each cell is reproducible on its own.
    """
    if isinstance(grid, dict):
        specs = [s for kind, values in grid.items() for s in noise.grid_specs(kind, values)]
    else:
        specs = list(grid)
    bs = batch_size or cfg.batch_size
    was_training = (encoder.training, decoder.training)
    encoder.eval()
    decoder.eval()
    cells = []
    try:
        for spec in specs:
            gen = make_generator(seed)
            p_export, p_internal, correct, total = [], [], 0.0, 0
            for start in range(0, len(images), bs):
                cover = images[start:start + bs]
                message = sample_message(len(cover), cfg.msg_len, gen)
                watermarked = encoder(cover, message)
                for a, b in zip(cover, watermarked):
                    p_export.append(export_psnr(a[None], b[None]))
                    p_internal.append(psnr(a[None], b[None]))
                noised = noise.apply(spec, watermarked, cover, gen)
                logits = decoder(noised)
                correct += bit_accuracy(message, logits) * message.numel()
                total += message.numel()
            cells.append(SweepCell(spec.kind, spec.strength, sum(p_export) / len(p_export),
                                   100.0 * correct / total, sum(p_internal) / len(p_internal)))
    finally:
        encoder.train(was_training[0])
        decoder.train(was_training[1])
    meta = {"config": cfg.digest(), "dataset": cfg.dataset, "images": len(images), "seed": seed,
            "psnr": "RGB, watermarked vs cover before the attack, 8-bit export "
                    "(psnr_internal_db: unquantised)",
            "cropout_ratio": "fraction of area replaced by the cover",
            "unstated_defaults": f"batch {cfg.batch_size}, steps {cfg.steps}, "
                                 f"weight decay {cfg.weight_decay}"}
    meta.update(metadata or {})
    return SweepReport(cells, meta)


def evaluate_checkpoint(path: str | Path, images: torch.Tensor, grid, seed: int = 0,
                        cfg: ExperimentConfig | None = None) -> SweepReport:
    stored, encoder, decoder, _ = load_checkpoint(path, cfg)
    return evaluate_sweep(encoder, decoder, stored, images, grid, seed,
                          metadata={"checkpoint": Path(path).stem})


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    variant: str
    params: int
    psnr_db: float
    acc_pct: float


@dataclass
class AblationReport:
    flag: str
    rows: list[AblationRow]

    @property
    def delta_psnr(self) -> float:
        return self.rows[0].psnr_db - self.rows[1].psnr_db

    @property
    def delta_acc(self) -> float:
        return self.rows[0].acc_pct - self.rows[1].acc_pct

    def to_text(self) -> str:
        lines = [f"Ablation of {self.flag}", "variant | params | PSNR(dB) | ACC(%)"]
        for r in self.rows:
            lines.append(f"{r.variant} | {r.params} | {r.psnr_db:.2f} | {r.acc_pct:.2f}")
        lines.append(f"delta (with - without): PSNR {self.delta_psnr:+.2f} dB, ACC {self.delta_acc:+.2f} %")
        return "\n".join(lines)


def ablate(cfg: ExperimentConfig, images: torch.Tensor, flag: str, kind: str | None = None,
           test_images: torch.Tensor | None = None, grid=None, steps: int | None = None,
           out_dir: str | Path | None = None, seed: int = 0) -> AblationReport:
    """Train with and without one block (``use_lceb`` or ``use_feb``) under identical seed/data."""
    if flag not in ("use_lceb", "use_feb"):
        raise ConfigError(f"cannot ablate {flag!r}; expected use_lceb or use_feb")
    kind = kind or cfg.distortion
    test = images if test_images is None else test_images
    grid = grid or {kind: noise.TEST_GRIDS[kind]}
    rows = []
    for variant, on in (("with", True), ("without", False)):
        vcfg = cfg.replace(**{flag: on})
        sub = None if out_dir is None else Path(out_dir) / f"{flag}_{variant}"
        trainer = train(vcfg, images, kind, sub, steps, log_every=0)
        report = evaluate_sweep(trainer.encoder, trainer.decoder, vcfg, test, grid, seed)
        n = len(report.cells)
        rows.append(AblationRow(f"{flag}={on}",
                                count_parameters(trainer.encoder) + count_parameters(trainer.decoder),
                                sum(c.psnr_db for c in report.cells) / n,
                                sum(c.acc_pct for c in report.cells) / n))
    return AblationReport(flag, rows)
