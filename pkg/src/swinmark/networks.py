"""U-shaped message-conditioned encoder, pyramid decoder, and checkpoint archives."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import FETB, LCESTB, init_conv, init_linear
from .core import ConfigError, ExperimentConfig, ShapeError, patchify, unpatchify


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def nearest_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="nearest")


class MessageDiffusion(nn.Module):
    """Bits -> [B, C1, h, w]: linear to L1, reshape to L2 x L2, nearest resize, 3x3 conv."""

    def __init__(self, msg_len: int, diffusion_len: int, diffusion_side: int, out_channels: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        if diffusion_side**2 != diffusion_len:
            raise ConfigError("diffusion_side**2 must equal diffusion_len")
        self.side = diffusion_side
        self.linear = init_linear(nn.Linear(msg_len, diffusion_len), generator)
        self.conv = init_conv(nn.Conv2d(1, out_channels, 3, padding=1), generator)

    def forward(self, message: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        m = self.linear(message).reshape(-1, 1, self.side, self.side)
        return self.conv(nearest_resize(m, size))


def _stage_block(cfg: ExperimentConfig, dim: int, gen) -> LCESTB:
    return LCESTB(dim, cfg.patch, cfg.heads, cfg.window, cfg.use_lceb,
                  cfg.lce_ratio, cfg.mlp_ratio, gen)


class _TokenStages(nn.Module):
    """Stem conv plus K x [LCESTB -> 4x4 stride-2 conv], shared by encoder and decoder."""

    def __init__(self, cfg: ExperimentConfig, gen):
        super().__init__()
        p2 = cfg.patch**2
        self.cfg = cfg
        self.stem = init_conv(nn.Conv2d(3, cfg.channels, 3, padding=1), gen)
        self.down_blocks = nn.ModuleList(
            _stage_block(cfg, p2 * cfg.stage_channels(s), gen) for s in range(cfg.stages))
        self.downsample = nn.ModuleList(
            init_conv(nn.Conv2d(cfg.stage_channels(s), cfg.stage_channels(s + 1), 4, 2, 1), gen)
            for s in range(cfg.stages))
        self.bottleneck = FETB(p2 * cfg.stage_channels(cfg.stages), cfg.heads, cfg.fetb_depth,
                               cfg.use_feb, cfg.mlp_ratio, gen)

    def run_tokens(self, block, f: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch
        h, w = f.shape[-2:]
        t = patchify(f, p)
        if isinstance(block, LCESTB):
            t = block(t, h // p, w // p)
        else:
            t = block(t)
        return unpatchify(t, p, h, w)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        cfg = self.cfg
        if image.shape[-2:] != (cfg.height, cfg.width) or image.shape[1] != 3:
            raise ShapeError(f"expected [B, 3, {cfg.height}, {cfg.width}], got {list(image.shape)}")
        f = self.stem(image)
        skips = []
        for block, down in zip(self.down_blocks, self.downsample):
            f = self.run_tokens(block, f)
            skips.append(f)
            f = down(f)
        return self.run_tokens(self.bottleneck, f), skips


class Encoder(nn.Module):
    def __init__(self, cfg: ExperimentConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        p2, c1 = cfg.patch**2, cfg.msg_channels
        self.features = _TokenStages(cfg, generator)
        k = cfg.stages
        self.upsample = nn.ModuleList(
            init_conv(nn.ConvTranspose2d(cfg.stage_channels(s + 1), cfg.stage_channels(s), 2, 2), generator)
            for s in range(k))
        self.diffusion = nn.ModuleList(
            MessageDiffusion(cfg.msg_len, cfg.diffusion_len, cfg.diffusion_side, c1, generator)
            for _ in range(k))
        self.up_blocks = nn.ModuleList(
            _stage_block(cfg, p2 * (2 * cfg.stage_channels(s) + c1), generator) for s in range(k))
        # level 0 feeds the output conv directly, so it has no projection
        self.up_proj = nn.ModuleList(
            init_conv(nn.Conv2d(2 * cfg.stage_channels(s) + c1, cfg.stage_channels(s), 1), generator)
            for s in range(1, k))
        out_in = 2 * cfg.channels + c1 if k else cfg.channels
        self.head = init_conv(nn.Conv2d(out_in, 3, 3, padding=1), generator)

    def forward(self, cover: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
        if message.shape[-1] != self.cfg.msg_len:
            raise ShapeError(f"message length {message.shape[-1]} != {self.cfg.msg_len}")
        f, skips = self.features(cover)
        for s in reversed(range(self.cfg.stages)):
            f = self.upsample[s](f)
            m = self.diffusion[s](message, tuple(f.shape[-2:]))
            f = torch.cat([f, skips[s], m], dim=1)
            f = self.features.run_tokens(self.up_blocks[s], f)
            if s > 0:
                f = self.up_proj[s - 1](f)
        return self.head(f)


class Decoder(nn.Module):
    def __init__(self, cfg: ExperimentConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.features = _TokenStages(cfg, generator)
        top = cfg.stage_channels(cfg.stages)
        self.head_conv = init_conv(nn.Conv2d(top, cfg.channels, 3, padding=1), generator)
        flat = cfg.channels * (cfg.height >> cfg.stages) * (cfg.width >> cfg.stages)
        self.head_fc = init_linear(nn.Linear(flat, cfg.msg_len), generator)

    def bottleneck(self, noised: torch.Tensor) -> torch.Tensor:
        return self.features(noised)[0]

    def forward(self, noised: torch.Tensor) -> torch.Tensor:
        f = self.head_conv(self.bottleneck(noised))
        return self.head_fc(f.flatten(1))


def build_models(cfg: ExperimentConfig, generator: torch.Generator | None = None) -> tuple[Encoder, Decoder]:
    return Encoder(cfg, generator), Decoder(cfg, generator)


def message_probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits)


def logits_to_bits(logits: torch.Tensor) -> torch.Tensor:
    return (torch.sigmoid(logits) > 0.5).to(torch.float32)


def save_checkpoint(path: str | Path, cfg: ExperimentConfig, encoder: Encoder, decoder: Decoder,
                    extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": cfg.to_dict(), "encoder": encoder.state_dict(),
                "decoder": decoder.state_dict(), "extra": extra or {}}, path)
    return path


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None):
    """Returns (config, encoder, decoder, extra). Raises ConfigError if ``cfg`` disagrees."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    stored = ExperimentConfig.from_dict(blob["config"])
    if cfg is not None and _arch_view(cfg) != _arch_view(stored):
        diff = {k: (v, _arch_view(stored)[k]) for k, v in _arch_view(cfg).items()
                if _arch_view(stored)[k] != v}
        raise ConfigError(f"checkpoint config mismatch: {diff}")
    encoder, decoder = build_models(stored)
    encoder.load_state_dict(blob["encoder"])
    decoder.load_state_dict(blob["decoder"])
    return stored, encoder, decoder, blob.get("extra", {})


ARCH_KEYS = ("height", "width", "msg_len", "patch", "channels", "stages", "window", "heads",
             "diffusion_len", "diffusion_side", "msg_channels", "lce_ratio", "mlp_ratio",
             "fetb_depth", "use_lceb", "use_feb")


def _arch_view(cfg: ExperimentConfig) -> dict[str, Any]:
    return {k: getattr(cfg, k) for k in ARCH_KEYS}
