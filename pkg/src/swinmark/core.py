"""Configuration, seeded randomness and patch/token reshaping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import yaml


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    height: int = 128
    width: int = 128
    msg_len: int = 64
    patch: int = 2
    channels: int = 16
    stages: int = 3
    window: int = 4
    heads: int = 4
    diffusion_len: int = 256
    diffusion_side: int = 16
    msg_channels: int = 16
    lambda_image: float = 2.0
    lambda_message: float = 10.0
    lambda_constraint: float = 0.1
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    steps: int = 2000
    batch_size: int = 16
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    lce_ratio: int = 4
    mlp_ratio: int = 4
    fetb_depth: int = 2
    use_lceb: bool = True
    use_feb: bool = True
    distortion: str = "identity"
    dataset: str = "DIV2K"
    seed: int = 0

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)  # type: ignore[assignment]
        self.validate()

    @property
    def grid_divisor(self) -> int:
        return self.patch * 2**self.stages

    def stage_channels(self, level: int) -> int:
        return self.channels * 2**level

    def validate(self) -> None:
        for name in ("height", "width", "msg_len", "patch", "channels", "window",
                     "heads", "diffusion_len", "diffusion_side", "msg_channels",
                     "steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.stages < 1:
            raise ConfigError("stages must be at least 1 (messages enter at the up stages)")
        if self.diffusion_side**2 != self.diffusion_len:
            raise ConfigError(
                f"diffusion_side**2 must equal diffusion_len "
                f"({self.diffusion_side}**2 != {self.diffusion_len})")
        for name in ("lambda_image", "lambda_message", "lambda_constraint"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        div = self.grid_divisor
        for side in ("height", "width"):
            value = getattr(self, side)
            if value % div:
                raise ConfigError(f"{side}={value} is not a multiple of patch*2**stages={div}")
            if value // div < self.window:
                raise ConfigError(
                    f"{side}/(patch*2**stages)={value // div} is smaller than window={self.window}")
            # every stage grid must tile into windows
            for level in range(self.stages + 1):
                grid = value // (self.patch * 2**level)
                if level < self.stages and grid % self.window:
                    raise ConfigError(f"stage {level} grid {grid} not divisible by window {self.window}")
        for dim in self.token_dims():
            if dim % self.heads:
                raise ConfigError(f"heads={self.heads} does not divide token width {dim}")
        if self.window > 1 and self.window % 2:
            raise ConfigError("window must be even so the shift window/2 is integral")

    def token_dims(self) -> list[int]:
        p2 = self.patch**2
        dims = [p2 * self.stage_channels(s) for s in range(self.stages + 1)]
        dims += [p2 * (2 * self.stage_channels(s) + self.msg_channels) for s in range(self.stages)]
        return dims

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def default_config(**overrides: Any) -> ExperimentConfig:
    return ExperimentConfig(**overrides)


def tiny_config(**overrides: Any) -> ExperimentConfig:
    """16x16 images, 8 bits, one stage; small enough for finite-difference checks."""
    base = dict(height=16, width=16, patch=2, channels=8, stages=1, window=2, heads=2,
                msg_len=8, diffusion_len=16, diffusion_side=4, msg_channels=4, batch_size=8)
    base.update(overrides)
    return ExperimentConfig(**base)


GRID_PREFIX = "grid_"


def _read_mapping(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key/value document")
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: nested value for key {key!r}; config must be flat")
    return data


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a flat ``key: value`` file. ``grid_<kind>`` keys are evaluation grids, see ``load_grid``."""
    data = {k: v for k, v in _read_mapping(path).items() if not k.startswith(GRID_PREFIX)}
    data.update(overrides or {})
    return ExperimentConfig.from_dict(data)


def load_grid(path: str | Path) -> dict[str, list[Any]]:
    grid = {}
    for key, value in _read_mapping(path).items():
        if key.startswith(GRID_PREFIX):
            if not isinstance(value, list):
                raise ConfigError(f"{key} must be a list of strengths")
            grid[key[len(GRID_PREFIX):]] = value
    return grid


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as YAML scalar (so ``steps=10`` is an int)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def sample_message(batch: int, length: int, seed: int | torch.Generator) -> torch.Tensor:
    """Uniform i.i.d. bits in {0, 1} as float32, shape [batch, length]."""
    if length <= 0:
        raise ValueError("message length must be positive")
    gen = make_generator(seed) if isinstance(seed, int) else seed
    return torch.randint(0, 2, (batch, length), generator=gen).to(torch.float32)


def patchify(feature: torch.Tensor, patch: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, (H/P)(W/P), C*P*P].

    Tokens are raster-ordered over the patch grid; inside a token the layout is
    (channel, row-in-patch, col-in-patch).
    """
    b, c, h, w = feature.shape
    if h % patch or w % patch:
        raise ShapeError(f"feature {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = feature.reshape(b, c, gh, patch, gw, patch).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def unpatchify(tokens: torch.Tensor, patch: int, height: int, width: int) -> torch.Tensor:
    b, n, d = tokens.shape
    if height % patch or width % patch:
        raise ShapeError(f"{height}x{width} not divisible by patch {patch}")
    gh, gw = height // patch, width // patch
    if n != gh * gw:
        raise ShapeError(f"{n} tokens do not tile a {height}x{width} map with patch {patch}")
    if d % (patch * patch):
        raise ShapeError(f"token width {d} not divisible by patch area {patch * patch}")
    c = d // (patch * patch)
    x = tokens.reshape(b, gh, gw, c, patch, patch).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, height, width)


def cosine_lr(step: int, steps: int, start: float, end: float) -> float:
    step = min(max(step, 0), steps)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * step / steps))
