"""Image I/O and crop datasets."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .core import CorruptDataError, ConfigError, torch_generator

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp", ".ppm"}


class DataError(CorruptDataError):
    pass


def read_rgb(path: str | Path) -> np.ndarray:
    """Read any common image file as an (h, w, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"corrupt or unsupported image {path}: {exc}") from exc


def load_image(path: str | Path) -> torch.Tensor:
    """Load an image as a (1, 3, h, w) float tensor in [0, 1] (8-bit values / 255)."""
    arr = read_rgb(path)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float().unsqueeze(0) / 255.0


def save_image(x: torch.Tensor, path: str | Path) -> None:
    if x.dim() == 4:
        x = x[0]
    arr = (x.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)


def fit_to_size(x: torch.Tensor, size: tuple[int, int]) -> tuple[torch.Tensor, bool]:
    """Centre-crop and/or zero-pad a (b, 3, h, w) batch to ``size``; report whether it changed."""
    h, w = size
    _, _, H, W = x.shape
    changed = (H, W) != (h, w)
    if H > h:
        top = (H - h) // 2
        x = x[:, :, top : top + h]
    if W > w:
        left = (W - w) // 2
        x = x[:, :, :, left : left + w]
    ph, pw = h - x.shape[2], w - x.shape[3]
    if ph > 0 or pw > 0:
        x = torch.nn.functional.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2))
    return x, changed


def list_images(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    if not files:
        raise DataError(f"no images found under {root}")
    return files


class CropDataset:
    """Random fixed-size crops from a directory of images.

    The file list is sorted then shuffled per epoch by the dataset seed; when
    an epoch is exhausted it reshuffles and continues.
    """

    def __init__(self, root: str | Path, size: tuple[int, int], seed: int = 0):
        self.files = list_images(root)
        self.size = tuple(size)
        self.images = [self._prepare(read_rgb(p)) for p in self.files]
        self.generator = torch_generator(seed)
        self._order: list[int] = []
        self.epoch = 0

    def _prepare(self, arr: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(arr.copy()).permute(2, 0, 1)
        h, w = self.size
        if t.shape[1] < h or t.shape[2] < w:
            factor = max(h / t.shape[1], w / t.shape[2])
            new = (int(np.ceil(t.shape[1] * factor)), int(np.ceil(t.shape[2] * factor)))
            t = torch.nn.functional.interpolate(t[None].float(), size=new, mode="bilinear", align_corners=False)[0]
            t = t.round().clamp(0, 255).to(torch.uint8)
        return t

    def __len__(self) -> int:
        return len(self.images)

    def _next_index(self) -> int:
        if not self._order:
            self._order = torch.randperm(len(self.images), generator=self.generator).tolist()
            self.epoch += 1
        return self._order.pop()

    def random_crop(self, img: torch.Tensor, g: torch.Generator) -> torch.Tensor:
        h, w = self.size
        top = int(torch.randint(0, img.shape[1] - h + 1, (1,), generator=g))
        left = int(torch.randint(0, img.shape[2] - w + 1, (1,), generator=g))
        return img[:, top : top + h, left : left + w]

    def sample(self, batch: int) -> torch.Tensor:
        crops = [self.random_crop(self.images[self._next_index()], self.generator) for _ in range(batch)]
        return torch.stack(crops).float() / 255.0

    def fixed_crops(self, count: int, seed: int) -> torch.Tensor:
        """A deterministic set of ``count`` crops cycling over the images."""
        if count < 1:
            raise ConfigError("need at least one crop")
        g = torch_generator(seed)
        crops = [self.random_crop(self.images[i % len(self.images)], g) for i in range(count)]
        return torch.stack(crops).float() / 255.0
