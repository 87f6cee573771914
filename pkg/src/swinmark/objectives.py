"""Training losses and the PSNR / bit-accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import ShapeError

PSNR_CAP = 100.0


@dataclass
class LossBreakdown:
    l_e: torch.Tensor
    l_d: torch.Tensor
    l_c: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_e", "l_d", "l_c", "total")}


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")


def image_loss(cover: torch.Tensor, watermarked: torch.Tensor) -> torch.Tensor:
    _check_same(cover, watermarked)
    return ((cover - watermarked) ** 2).mean()


def message_loss(embedded: torch.Tensor, extracted: torch.Tensor) -> torch.Tensor:
    """MSE between ground-truth bits and the decoder's sigmoid outputs."""
    _check_same(embedded, extracted)
    return ((embedded - extracted) ** 2).mean()


def constraint_loss(watermarked: torch.Tensor) -> torch.Tensor:
    """Half the distance outside [0, 1], summed over pixels and channels, averaged over the batch."""
    over = torch.relu(watermarked - 1.0)
    under = torch.relu(-watermarked)
    return 0.5 * (over + under).sum() / watermarked.shape[0]


def total_loss(cover: torch.Tensor, watermarked: torch.Tensor, embedded: torch.Tensor,
               extracted: torch.Tensor, weights: tuple[float, float, float] = (2.0, 10.0, 0.1)
               ) -> LossBreakdown:
    l_e = image_loss(cover, watermarked)
    l_d = message_loss(embedded, extracted)
    l_c = constraint_loss(watermarked)
    return combine(l_e, l_d, l_c, weights)


def combine(l_e, l_d, l_c, weights: tuple[float, float, float]) -> LossBreakdown:
    w1, w2, w3 = weights
    return LossBreakdown(l_e, l_d, l_c, w1 * l_e + w2 * l_d + w3 * l_c)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """RGB PSNR with peak 1; identical inputs give the 100 dB cap."""
    _check_same(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def quantize_export(image: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] and snap to the 8-bit grid, as written to disk."""
    return torch.round(image.clamp(0.0, 1.0) * 255.0) / 255.0


def export_psnr(cover: torch.Tensor, watermarked: torch.Tensor) -> float:
    return psnr(quantize_export(cover), quantize_export(watermarked))


def bit_accuracy(embedded: torch.Tensor, logits: torch.Tensor) -> float:
    _check_same(embedded, logits)
    bits = (torch.sigmoid(logits) > 0.5).to(embedded.dtype)
    return float((bits == embedded).to(torch.float64).mean())
