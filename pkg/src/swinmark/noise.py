"""Differentiable image distortions with training ranges and evaluation grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

KINDS = ("identity", "gaussian_noise", "salt_pepper", "gaussian_blur", "median_blur", "jpeg",
         "cropout", "dropout", "rotation", "scaling", "affine")

# kinds whose forward pass is differentiable in the watermarked image
DIFFERENTIABLE = ("identity", "gaussian_noise", "gaussian_blur", "jpeg", "cropout", "dropout",
                  "rotation", "scaling", "affine")
NEEDS_COVER = ("cropout", "dropout")

TEST_GRIDS: dict[str, list[Any]] = {
    "identity": [None],
    "gaussian_noise": [0.01, 0.02, 0.03, 0.04, 0.05],
    "salt_pepper": [0.01, 0.02, 0.03, 0.04, 0.05],
    "gaussian_blur": [0.0001, 0.5, 1, 2],
    "median_blur": [3, 5, 7],
    "jpeg": [40, 50, 60, 70, 80, 90],
    "cropout": [0.1, 0.2, 0.3, 0.4, 0.5],
    "dropout": [0.2, 0.3, 0.4, 0.5, 0.6],
    "rotation": [-30, -15, 0, 15, 30],
    "scaling": [0.5, 0.7, 1, 1.5, 2],
    "affine": [(10, 0.1, 0.7, 30), (0, 0.2, 0.7, 30), (0, 0.1, 0.6, 30), (0, 0.1, 0.7, 20)],
}


class DistortionError(ValueError):
    pass


@dataclass(frozen=True)
class DistortionSpec:
    """One attack and its strength.

    ``strength`` is a float for most kinds, an int window for median blur, an int
    QF for JPEG and a (rotation deg, translate, scale, shear deg) tuple for affine,
    where translate is a fraction of the side, either one number for both axes
    or an (x, y) pair. ``mode`` records whether it was drawn from a training range.
    """

    kind: str
    strength: Any = None
    mode: str = "test"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DistortionError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        _validate(self.kind, self.strength)

    def label(self) -> str:
        return format_strength(self.strength)


def _validate(kind: str, s: Any) -> None:
    if kind == "identity":
        return
    if s is None:
        raise DistortionError(f"{kind} needs a strength")
    if kind == "affine":
        if len(s) != 4:
            raise DistortionError("affine strength is (rotation, translate, scale, shear)")
        rot, t, sc, sh = s
        ts = t if isinstance(t, (tuple, list)) else (t, t)
        if not all(math.isfinite(float(v)) for v in (rot, sh, sc, *ts)):
            raise DistortionError("affine parameters must be finite")
        if float(sc) <= 0:
            raise DistortionError("affine scale must be positive")
        return
    v = float(s)
    if not math.isfinite(v):
        raise DistortionError(f"{kind} strength must be finite")
    if kind in ("salt_pepper", "cropout", "dropout") and not 0.0 <= v <= 1.0:
        raise DistortionError(f"{kind} ratio must lie in [0, 1], got {v}")
    if kind in ("gaussian_noise", "gaussian_blur") and v < 0:
        raise DistortionError(f"{kind} needs a non-negative strength, got {v}")
    if kind == "median_blur" and (int(v) != v or v < 1 or int(v) % 2 == 0):
        raise DistortionError(f"median window must be a positive odd integer, got {s}")
    if kind == "jpeg" and not 1 <= v <= 100:
        raise DistortionError(f"JPEG quality must lie in [1, 100], got {v}")
    if kind == "scaling" and v <= 0:
        raise DistortionError("scale factor must be positive")


def format_strength(s: Any) -> str:
    if s is None:
        return "-"
    if isinstance(s, (tuple, list)):
        return ",".join(format_strength(v) for v in s)
    return f"{s:g}" if isinstance(s, float) else str(s)


def parse_strength(kind: str, text: str) -> Any:
    text = text.strip()
    if kind == "identity" or text in ("", "-"):
        return None
    parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
    nums = [float(p) for p in parts]
    if kind == "affine":
        if len(nums) == 5:  # rot, tx, ty, scale, shear
            return (nums[0], (nums[1], nums[2]), nums[3], nums[4])
        return tuple(nums)
    if len(nums) != 1:
        raise DistortionError(f"{kind} takes a single strength, got {text!r}")
    if kind in ("median_blur", "jpeg"):
        return int(nums[0])
    return nums[0]


def parse_spec(text: str) -> DistortionSpec:
    """``kind[:strength]``, e.g. ``rotation:15`` or ``affine:10,0.1,0.7,30``."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if kind not in KINDS:
        raise DistortionError(f"unknown distortion kind {kind!r}")
    try:
        strength = parse_strength(kind, rest)
    except ValueError as exc:
        raise DistortionError(f"cannot parse strength in {text!r}: {exc}") from exc
    return DistortionSpec(kind, strength)


# ---------------------------------------------------------------- pixel noise


def gaussian_noise(x: torch.Tensor, variance: float, generator: torch.Generator | None = None) -> torch.Tensor:
    if variance < 0:
        raise DistortionError("variance must be non-negative")
    if variance == 0:
        return x
    eps = torch.randn(x.shape, generator=generator).to(x.dtype)
    return x + math.sqrt(variance) * eps


def _pixel_count_mask(shape, ratio: float, generator) -> torch.Tensor:
    """Bool [B, 1, H, W] with exactly round(ratio * H * W) True pixels per image."""
    b, _, h, w = shape
    n = int(round(ratio * h * w))
    mask = torch.zeros(b, h * w, dtype=torch.bool)
    for i in range(b):
        mask[i, torch.randperm(h * w, generator=generator)[:n]] = True
    return mask.reshape(b, 1, h, w)


def salt_pepper(x: torch.Tensor, ratio: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """A ``ratio`` fraction of pixel positions becomes 0 or 1 (all channels), straight-through."""
    if not 0 <= ratio <= 1:
        raise DistortionError("ratio must lie in [0, 1]")
    if ratio == 0:
        return x
    mask = _pixel_count_mask(x.shape, ratio, generator)
    salt = torch.rand(mask.shape, generator=generator) < 0.5
    noisy = torch.where(mask, salt.to(x.dtype), x)
    return x + (noisy - x).detach()


def _gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Normalised Gaussian, kernel side 2*ceil(3 sigma)+1 (at least 3), reflect padding."""
    if sigma < 0:
        raise DistortionError("sigma must be non-negative")
    if sigma == 0:
        return x
    k1 = _gaussian_kernel1d(sigma)
    kernel = (k1[:, None] * k1[None, :]).to(x.dtype)
    r = kernel.shape[0] // 2
    c = x.shape[1]
    xp = F.pad(x, (r, r, r, r), mode="reflect")
    return F.conv2d(xp, kernel.expand(c, 1, -1, -1), groups=c)


def median_blur(x: torch.Tensor, window: int) -> torch.Tensor:
    """Per-channel sliding median with reflect padding; straight-through gradient."""
    if window < 1 or window % 2 == 0:
        raise DistortionError("median window must be a positive odd integer")
    if window == 1:
        return x
    r = window // 2
    b, c, h, w = x.shape
    xp = F.pad(x.detach(), (r, r, r, r), mode="reflect")
    patches = F.unfold(xp, window).reshape(b, c, window * window, h, w)
    med = patches.median(dim=2).values
    return x + (med - x).detach()


# ---------------------------------------------------------------- JPEG

_LUMA_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)

_CHROMA_Q = np.full((8, 8), 99.0)
_CHROMA_Q[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def quality_scale(quality: int) -> float:
    """IJG scaling percentage for a quality factor."""
    q = min(max(int(quality), 1), 100)
    return 5000.0 / q if q < 50 else 200.0 - 2.0 * q


def quant_tables(quality: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Luma/chroma tables as baseline libjpeg builds them (integers clamped to [1, 255])."""
    s = quality_scale(quality)
    tabs = [np.clip(np.floor((t * s + 50.0) / 100.0), 1, 255) for t in (_LUMA_Q, _CHROMA_Q)]
    return tuple(torch.from_numpy(t).to(torch.float32) for t in tabs)  # type: ignore[return-value]


_RGB2YCC = torch.tensor([[0.299, 0.587, 0.114],
                         [-0.168736, -0.331264, 0.5],
                         [0.5, -0.418688, -0.081312]])
_YCC2RGB = torch.tensor([[1.0, 0.0, 1.402],
                         [1.0, -0.344136, -0.714136],
                         [1.0, 1.772, 0.0]])


def _block_dct_matrix(dtype) -> torch.Tensor:
    from .blocks import dct_matrix
    return dct_matrix(8, dtype)


def block_dct(x: torch.Tensor) -> torch.Tensor:
    """[B, C, H, W] -> [B, C, H/8, W/8, 8, 8] orthonormal 2-D DCT per 8x8 block."""
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 8, 8, w // 8, 8).permute(0, 1, 2, 4, 3, 5)
    m = _block_dct_matrix(x.dtype)
    return m @ blocks @ m.T


def block_idct(coeffs: torch.Tensor) -> torch.Tensor:
    b, c, hb, wb = coeffs.shape[:4]
    m = _block_dct_matrix(coeffs.dtype)
    blocks = m.T @ coeffs @ m
    return blocks.permute(0, 1, 2, 4, 3, 5).reshape(b, c, hb * 8, wb * 8)


def ste_round(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def jpeg_sim(x: torch.Tensor, quality: int, rounding=ste_round) -> torch.Tensor:
    """JPEG 4:4:4 round trip: YCbCr, 8x8 DCT, quantise with a rounding surrogate, invert.

    ``rounding`` defaults to straight-through rounding; pass ``lambda t: t`` to
    get the smooth path that the straight-through gradient differentiates.
    """
    if not 1 <= quality <= 100:
        raise DistortionError("JPEG quality must lie in [1, 100]")
    b, c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    y = torch.einsum("ij,bjhw->bihw", _RGB2YCC.to(x.dtype), x * 255.0)
    y = y - torch.tensor([128.0, 0.0, 0.0], dtype=x.dtype)[None, :, None, None]
    lq, cq = quant_tables(quality)
    table = torch.stack([lq, cq, cq]).to(x.dtype)[None, :, None, None]
    coeffs = block_dct(y)
    coeffs = rounding(coeffs / table) * table
    y = block_idct(coeffs) + torch.tensor([128.0, 0.0, 0.0], dtype=x.dtype)[None, :, None, None]
    out = torch.einsum("ij,bjhw->bihw", _YCC2RGB.to(x.dtype), y) / 255.0
    return out[:, :, :h, :w]


# ---------------------------------------------------------------- masking


def cropout(x: torch.Tensor, cover: torch.Tensor, ratio: float,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Keep one random rectangle of area (1 - ratio) H W from ``x``; the rest comes from ``cover``."""
    if not 0 <= ratio <= 1:
        raise DistortionError("ratio must lie in [0, 1]")
    if ratio == 0:
        return x
    b, _, h, w = x.shape
    kh = int(round(h * math.sqrt(1.0 - ratio)))
    # width fitted to the rounded height so the kept area tracks (1 - ratio) H W
    kw = min(w, int(round((1.0 - ratio) * h * w / kh))) if kh else 0
    mask = torch.zeros(b, 1, h, w, dtype=torch.bool)
    for i in range(b):
        top = int(torch.randint(0, h - kh + 1, (1,), generator=generator))
        left = int(torch.randint(0, w - kw + 1, (1,), generator=generator))
        mask[i, :, top:top + kh, left:left + kw] = True
    return torch.where(mask, x, cover)


def dropout(x: torch.Tensor, cover: torch.Tensor, ratio: float,
            generator: torch.Generator | None = None) -> torch.Tensor:
    """Each pixel position independently reverts to ``cover`` with probability ``ratio``."""
    if not 0 <= ratio <= 1:
        raise DistortionError("ratio must lie in [0, 1]")
    if ratio == 0:
        return x
    b, _, h, w = x.shape
    take_cover = torch.rand(b, 1, h, w, generator=generator) < ratio
    return torch.where(take_cover, cover, x)


# ---------------------------------------------------------------- geometry


def warp(x: torch.Tensor, forward: np.ndarray) -> torch.Tensor:
    """Resample ``x`` under a 3x3 forward map given in centred pixel coordinates.

    The output canvas equals the input canvas; samples falling outside are zero.
    ``forward`` is either one matrix or one per batch item.
    """
    b, _, h, w = x.shape
    mats = np.broadcast_to(np.asarray(forward, dtype=np.float64), (b, 3, 3))
    inv = torch.from_numpy(np.linalg.inv(mats)).to(x.dtype)
    ys = torch.arange(h, dtype=x.dtype) + 0.5 - h / 2
    xs = torch.arange(w, dtype=x.dtype) + 0.5 - w / 2
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx, gy, torch.ones_like(gx)], dim=-1).reshape(1, -1, 3)
    src = pts @ inv.transpose(1, 2)
    # to grid_sample's normalised coordinates (align_corners=False)
    nx = src[..., 0] * (2.0 / w)
    ny = src[..., 1] * (2.0 / h)
    grid = torch.stack([nx, ny], dim=-1).reshape(b, h, w, 2)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def rotation_matrix(degrees: float) -> np.ndarray:
    """Counter-clockwise as displayed (the y axis points down)."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def scale_matrix(factor: float) -> np.ndarray:
    return np.diag([factor, factor, 1.0])


def translate_matrix(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def shear_matrix(degrees: float) -> np.ndarray:
    return np.array([[1.0, math.tan(math.radians(degrees)), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def rotate(x: torch.Tensor, degrees: float) -> torch.Tensor:
    if degrees % 360 == 0:
        return x
    return warp(x, rotation_matrix(degrees))


def scale(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Zoom about the centre; factor < 1 leaves a zero border, factor > 1 crops."""
    if factor <= 0:
        raise DistortionError("scale factor must be positive")
    if factor == 1:
        return x
    return warp(x, scale_matrix(factor))


def affine_matrix(params: Sequence[Any], height: int, width: int) -> np.ndarray:
    rot, t, sc, sh = params
    tx, ty = t if isinstance(t, (tuple, list)) else (t, t)
    return (rotation_matrix(rot) @ translate_matrix(tx * width, ty * height)
            @ scale_matrix(sc) @ shear_matrix(sh))


def affine(x: torch.Tensor, params: Sequence[Any]) -> torch.Tensor:
    """One bilinear warp by rotate . translate . scale . shear (translate as a fraction of the side)."""
    m = affine_matrix(params, x.shape[-2], x.shape[-1])
    if np.array_equal(m, np.eye(3)):
        return x
    return warp(x, m)


# ---------------------------------------------------------------- dispatch


def apply(spec: DistortionSpec, watermarked: torch.Tensor, cover: torch.Tensor | None = None,
          generator: torch.Generator | None = None) -> torch.Tensor:
    """Attack ``watermarked``; output has the same [B, 3, H, W] shape."""
    if cover is not None and cover.shape != watermarked.shape:
        raise DistortionError("cover and watermarked images differ in shape")
    kind, s = spec.kind, spec.strength
    if kind in NEEDS_COVER and cover is None:
        raise DistortionError(f"{kind} needs the cover image")
    if kind == "identity":
        return watermarked
    if kind == "gaussian_noise":
        return gaussian_noise(watermarked, float(s), generator)
    if kind == "salt_pepper":
        return salt_pepper(watermarked, float(s), generator)
    if kind == "gaussian_blur":
        return gaussian_blur(watermarked, float(s))
    if kind == "median_blur":
        return median_blur(watermarked, int(s))
    if kind == "jpeg":
        return jpeg_sim(watermarked, int(s))
    if kind == "cropout":
        return cropout(watermarked, cover, float(s), generator)
    if kind == "dropout":
        return dropout(watermarked, cover, float(s), generator)
    if kind == "rotation":
        return rotate(watermarked, float(s))
    if kind == "scaling":
        return scale(watermarked, float(s))
    if kind == "affine":
        return affine(watermarked, s)
    raise DistortionError(f"unknown distortion kind {kind!r}")


def _uniform(lo: float, hi: float, generator: torch.Generator | None) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=generator, dtype=torch.float64))


def sample_train_spec(kind: str, generator: torch.Generator | None = None) -> DistortionSpec:
    """Draw a strength from the training range for ``kind``."""
    if kind == "identity":
        s: Any = None
    elif kind in ("gaussian_noise", "salt_pepper"):
        s = _uniform(0.001, 0.04, generator)
    elif kind == "gaussian_blur":
        s = 2.0
    elif kind == "median_blur":
        s = 7
    elif kind == "jpeg":
        s = 50
    elif kind in ("cropout", "dropout"):
        s = 0.4
    elif kind == "rotation":
        s = _uniform(-30.0, 30.0, generator)
    elif kind == "scaling":
        s = _uniform(0.7, 1.5, generator)
    elif kind == "affine":
        rot = _uniform(-30.0, 30.0, generator)
        t = (_uniform(-0.1, 0.1, generator), _uniform(-0.1, 0.1, generator))
        s = (rot, t, 0.7, _uniform(-30.0, 30.0, generator))
    else:
        raise DistortionError(f"unknown distortion kind {kind!r}")
    return DistortionSpec(kind, s, mode="train")


def grid_specs(kind: str, strengths: Sequence[Any] | None = None) -> list[DistortionSpec]:
    values = TEST_GRIDS[kind] if strengths is None else strengths
    out = []
    for v in values:
        if kind == "affine" and isinstance(v, list):
            v = tuple(v)
        elif kind in ("median_blur", "jpeg") and v is not None:
            v = int(v)
        out.append(DistortionSpec(kind, v))
    return out
