"""Image I/O: center-crop + resize into [0, 1] float tensors and 8-bit export."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

# bundled with scikit-image, no download needed
SAMPLE_IMAGES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry",
                 "hubble_deep_field", "retina", "camera", "coins", "moon", "brick",
                 "grass", "gravel", "clock", "horse", "page")


class DataError(ValueError):
    pass


def center_crop_resize(img: Image.Image, height: int, width: int) -> Image.Image:
    img = img.convert("RGB")
    w, h = img.size
    target = width / height
    if w / h > target:
        nw = int(round(h * target))
        left = (w - nw) // 2
        img = img.crop((left, 0, left + nw, h))
    else:
        nh = int(round(w / target))
        top = (h - nh) // 2
        img = img.crop((0, top, w, top + nh))
    return img.resize((width, height), Image.BICUBIC)


def pil_to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def tensor_to_pil(x: torch.Tensor) -> Image.Image:
    """[3, H, W] in [0, 1] -> 8-bit RGB (clamped, rounded)."""
    arr = torch.round(x.detach().clamp(0, 1) * 255.0).to(torch.uint8).permute(1, 2, 0).numpy()
    return Image.fromarray(arr, mode="RGB")


def read_image(path: str | Path, height: int | None = None, width: int | None = None) -> torch.Tensor:
    """[3, H, W] float tensor; resized only when a target size is given."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if height is not None and width is not None:
        img = center_crop_resize(img, height, width)
    return pil_to_tensor(img)


def write_image(x: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensor_to_pil(x).save(path)
    return path


def load_image_dir(path: str | Path, height: int, width: int, limit: int | None = None) -> torch.Tensor:
    """All images under ``path`` (sorted by name) as one [N, 3, H, W] tensor."""
    files = sorted(p for p in Path(path).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise DataError(f"no images found under {path}")
    return torch.stack([read_image(f, height, width) for f in files])


def sample_images(n: int, height: int, width: int) -> torch.Tensor:
    """Natural test images shipped with scikit-image, as [n, 3, H, W]."""
    import skimage.data

    if n > len(SAMPLE_IMAGES):
        raise DataError(f"only {len(SAMPLE_IMAGES)} sample images available")
    out = []
    for name in SAMPLE_IMAGES[:n]:
        arr = getattr(skimage.data, name)()
        if arr.dtype != np.uint8:
            arr = (255 * (arr.astype(np.float64) / arr.max())).astype(np.uint8)
        out.append(pil_to_tensor(center_crop_resize(Image.fromarray(arr), height, width)))
    return torch.stack(out)


def write_sample_dir(path: str | Path, n: int, size: int = 256) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(sample_images(n, size, size)):
        write_image(img, path / f"{i:03d}_{SAMPLE_IMAGES[i]}.png")
    return path
