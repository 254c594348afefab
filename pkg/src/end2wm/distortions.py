"""Noise layer: a registry of parameterised image distortions.

Every distortion is a function ``fn(x, generator, cover=None, **params)`` acting
on a (b, 3, h, w) batch in [0, 1]. Distortions flagged ``differentiable`` are
written with torch ops so gradients can flow through them when a strategy asks
for it; :func:`apply_blocked` always cuts the gradient.
"""

from __future__ import annotations

import io
import math
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import PIL
import torch
import torch.nn.functional as F
from PIL import Image

from .core import (
    ConfigError,
    DistortionEntry,
    DistortionFailedError,
    torch_generator,
    validate_image,
)


@dataclass(frozen=True)
class Distortion:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)
    differentiable: bool = True

    def __call__(self, x, seed=0, cover=None):
        return apply(self, x, seed, cover)

    def label(self) -> str:
        if not self.params:
            return self.name
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.name}({inner})"


@dataclass(frozen=True)
class _Spec:
    fn: Callable
    differentiable: bool
    defaults: Mapping[str, Any]
    check: Callable[[dict], None] | None = None


REGISTRY: dict[str, _Spec] = {}


def register(name, differentiable=True, check=None, **defaults):
    def deco(fn):
        REGISTRY[name] = _Spec(fn, differentiable, defaults, check)
        return fn

    return deco


def _in_range(key, lo, hi, lo_open=False):
    def check(p):
        v = p[key]
        bad = v <= lo if lo_open else v < lo
        if bad or v > hi:
            lb = "(" if lo_open else "["
            raise ConfigError(f"{key}={v} outside {lb}{lo}, {hi}]")

    return check


def make_distortion(name: str, **params) -> Distortion:
    spec = REGISTRY.get(name)
    if spec is None:
        raise ConfigError(f"unknown distortion {name!r}; known: {sorted(REGISTRY)}")
    unknown = set(params) - set(spec.defaults)
    if unknown:
        raise ConfigError(f"unknown parameters for {name}: {sorted(unknown)}")
    full = {**spec.defaults, **params}
    if spec.check is not None:
        spec.check(full)
    return Distortion(name, full, spec.differentiable)


def from_entry(entry: DistortionEntry | Mapping[str, Any]) -> Distortion:
    if isinstance(entry, Mapping):
        return make_distortion(entry["name"], **(entry.get("params") or {}))
    return make_distortion(entry.name, **entry.params)


def apply(d: Distortion, x: torch.Tensor, seed: int = 0, cover: torch.Tensor | None = None) -> torch.Tensor:
    """Apply a distortion, keeping whatever gradient path the op has."""
    spec = REGISTRY[d.name]
    g = torch_generator(seed)
    try:
        out = spec.fn(x, g, cover=cover, **d.params)
    except (ConfigError, DistortionFailedError):
        raise
    except Exception as exc:  # codec, subprocess and similar failures
        raise DistortionFailedError(d.name, str(exc)) from exc
    if out.shape != x.shape:
        raise DistortionFailedError(d.name, f"output shape {tuple(out.shape)} != input {tuple(x.shape)}")
    return out.clamp(0.0, 1.0)


def apply_blocked(d: Distortion, x_hat: torch.Tensor, seed: int = 0, cover: torch.Tensor | None = None) -> torch.Tensor:
    """Apply a distortion behind a stop-gradient barrier."""
    x_hat = validate_image(x_hat.detach())
    with torch.no_grad():
        out = apply(d, x_hat, seed, None if cover is None else cover.detach())
    return validate_image(out).detach()


# ---------------------------------------------------------------------------
# Pixel-domain distortions


@register("identity")
def identity(x, g, cover=None):
    return x


@register("gaussian_noise", check=_in_range("std", 0.0, 1.0), std=0.01)
def gaussian_noise(x, g, cover=None, std=0.01):
    noise = torch.randn(x.shape, generator=g, dtype=x.dtype)
    return x + std * noise


def _gaussian_kernel(sigma, dtype):
    radius = int(math.ceil(3 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(t**2) / (2 * sigma**2))
    return k / k.sum(), radius


@register("gaussian_filter", check=_in_range("sigma", 0.0, 10.0, lo_open=True), sigma=2.0)
def gaussian_filter(x, g, cover=None, sigma=2.0):
    k, r = _gaussian_kernel(sigma, x.dtype)
    c = x.shape[1]
    # reflect padding needs r < side; fall back to replicate for tiny images
    mode = "reflect" if r < min(x.shape[-2:]) else "replicate"
    y = F.pad(x, (r, r, 0, 0), mode=mode)
    y = F.conv2d(y, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    y = F.pad(y, (0, 0, r, r), mode=mode)
    return F.conv2d(y, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _rand_uniform(g, n, lo, hi, dtype):
    return lo + (hi - lo) * torch.rand(n, generator=g, dtype=dtype)


@register("color", lo=0.8, hi=1.2)
def color(x, g, cover=None, lo=0.8, hi=1.2):
    """Random brightness, contrast and saturation factors in [lo, hi] per image."""
    b = x.shape[0]
    shape = (b, 1, 1, 1)
    bright = _rand_uniform(g, b, lo, hi, x.dtype).view(shape)
    contrast = _rand_uniform(g, b, lo, hi, x.dtype).view(shape)
    sat = _rand_uniform(g, b, lo, hi, x.dtype).view(shape)
    y = x * bright
    mean = y.mean(dim=(1, 2, 3), keepdim=True)
    y = mean + contrast * (y - mean)
    gray = (0.299 * y[:, 0:1] + 0.587 * y[:, 1:2] + 0.114 * y[:, 2:3])
    return gray + sat * (y - gray)


# ---------------------------------------------------------------------------
# Geometric distortions: affine resampling (bilinear, zero padding)


def _affine(x, theta):
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _signs(g, b, dtype):
    return torch.where(torch.rand(b, generator=g) < 0.5, -1.0, 1.0).to(dtype)


@register("rotate", check=_in_range("deg", -45.0, 45.0), deg=10.0)
def rotate(x, g, cover=None, deg=10.0):
    if deg == 0:
        return x
    b = x.shape[0]
    a = math.radians(deg) * _signs(g, b, x.dtype)
    cos, sin = torch.cos(a), torch.sin(a)
    zero = torch.zeros_like(a)
    theta = torch.stack([torch.stack([cos, -sin, zero], 1), torch.stack([sin, cos, zero], 1)], 1)
    return _affine(x, theta)


@register("translate", check=_in_range("dis", 0.0, 0.5), dis=0.05)
def translate(x, g, cover=None, dis=0.05):
    """Shift by a fraction ``dis`` of the side along both axes, random directions."""
    if dis == 0:
        return x
    b = x.shape[0]
    # affine_grid coordinates span 2 units per side
    tx = 2 * dis * _signs(g, b, x.dtype)
    ty = 2 * dis * _signs(g, b, x.dtype)
    one, zero = torch.ones_like(tx), torch.zeros_like(tx)
    theta = torch.stack([torch.stack([one, zero, -tx], 1), torch.stack([zero, one, -ty], 1)], 1)
    return _affine(x, theta)


@register("scale", check=_in_range("f", 0.0, 2.0, lo_open=True), f=0.65)
def scale(x, g, cover=None, f=0.65):
    """Resize by factor f about the centre; re-registered by zero padding or centre crop."""
    if f == 1.0:
        return x
    b = x.shape[0]
    theta = torch.zeros(b, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = 1.0 / f
    theta[:, 1, 1] = 1.0 / f
    return _affine(x, theta)


@register("shear", check=_in_range("deg", -45.0, 45.0), deg=10.0)
def shear(x, g, cover=None, deg=10.0):
    if deg == 0:
        return x
    b = x.shape[0]
    s = math.tan(math.radians(deg)) * _signs(g, b, x.dtype)
    horizontal = torch.rand(b, generator=g) < 0.5
    theta = torch.zeros(b, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = 1.0
    theta[:, 1, 1] = 1.0
    theta[:, 0, 1] = torch.where(horizontal, s, torch.zeros_like(s))
    theta[:, 1, 0] = torch.where(horizontal, torch.zeros_like(s), s)
    return _affine(x, theta)


# ---------------------------------------------------------------------------
# Masking distortions


def crop_mask(h, w, p, g) -> torch.Tensor:
    """Boolean (h, w) mask keeping exactly ceil(p*h*w) pixels in one compact block.

    The block is a rectangle of full rows plus one partial row, placed at a
    random offset.
    """
    keep = int(math.ceil(p * h * w - 1e-9))
    bw = min(w, max(1, int(math.ceil(math.sqrt(keep * w / h)))))
    full_rows, rest = divmod(keep, bw)
    bh = full_rows + (1 if rest else 0)
    if bh > h:
        bw = w
        full_rows, rest = divmod(keep, bw)
        bh = full_rows + (1 if rest else 0)
    top = int(torch.randint(0, h - bh + 1, (1,), generator=g))
    left = int(torch.randint(0, w - bw + 1, (1,), generator=g))
    mask = torch.zeros(h, w, dtype=torch.bool)
    mask[top : top + full_rows, left : left + bw] = True
    if rest:
        mask[top + full_rows, left : left + rest] = True
    return mask


@register("crop", check=_in_range("p", 0.0, 1.0, lo_open=True), p=0.1)
def crop(x, g, cover=None, p=0.1):
    """Keep a p-fraction block of the watermarked image and zero the rest."""
    b, _, h, w = x.shape
    masks = torch.stack([crop_mask(h, w, p, g) for _ in range(b)])[:, None]
    return x * masks.to(x.dtype)


def _need_cover(name, x, cover):
    if cover is None:
        raise ConfigError(f"{name} needs the cover image batch")
    if cover.shape != x.shape:
        raise ConfigError(f"{name}: cover shape {tuple(cover.shape)} != {tuple(x.shape)}")


@register("dropout", check=_in_range("p", 0.0, 1.0, lo_open=True), p=0.5)
def dropout(x, g, cover=None, p=0.5):
    """Replace exactly round(p*h*w) randomly chosen pixels with cover pixels."""
    _need_cover("dropout", x, cover)
    b, _, h, w = x.shape
    k = int(round(p * h * w))
    masks = torch.zeros(b, h * w, dtype=torch.bool)
    for i in range(b):
        masks[i, torch.randperm(h * w, generator=g)[:k]] = True
    m = masks.view(b, 1, h, w).to(x.dtype)
    return m * cover + (1 - m) * x


def cropout_rect(h, w, p, g) -> tuple[int, int, int, int]:
    """Random axis-aligned rectangle (top, left, height, width) of area ~ p*h*w."""
    ratio = math.sqrt(p)
    rh = min(h, max(1, int(round(ratio * h))))
    rw = min(w, max(1, int(round(p * h * w / rh))))
    top = int(torch.randint(0, h - rh + 1, (1,), generator=g))
    left = int(torch.randint(0, w - rw + 1, (1,), generator=g))
    return top, left, rh, rw


@register("cropout", check=_in_range("p", 0.0, 1.0, lo_open=True), p=0.5)
def cropout(x, g, cover=None, p=0.5):
    """Replace one random rectangle covering ~p of the image with cover pixels."""
    _need_cover("cropout", x, cover)
    b, _, h, w = x.shape
    m = torch.zeros(b, 1, h, w, dtype=x.dtype)
    for i in range(b):
        top, left, rh, rw = cropout_rect(h, w, p, g)
        m[i, :, top : top + rh, left : left + rw] = 1.0
    return m * cover + (1 - m) * x


# ---------------------------------------------------------------------------
# Non-differentiable distortions


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(3, h, w) tensor in [0, 1] -> (h, w, 3) uint8 array."""
    return (x.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def from_uint8(a: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(a, copy=True)).permute(2, 0, 1).to(dtype) / 255.0


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"))


def _check_quality(p):
    q = p["quality"]
    if not isinstance(q, (int, np.integer)) or isinstance(q, bool) or not 1 <= q <= 100:
        raise ConfigError(f"JPEG quality must be an integer in [1, 100], got {q!r}")


@register("jpeg_real", differentiable=False, check=_check_quality, quality=50)
def jpeg_real(x, g, cover=None, quality=50):
    """Round-trip every image through the PIL baseline JPEG codec."""
    out = [from_uint8(jpeg_roundtrip(to_uint8(img), quality), x.dtype) for img in x]
    return torch.stack(out)


def codec_version() -> str:
    return f"PIL {PIL.__version__} (libjpeg via Pillow)"


def _check_command(p):
    if not p.get("command"):
        raise ConfigError("external distortion needs a command template")
    template = p["command"]
    parts = shlex.split(template) if isinstance(template, str) else list(template)
    if not any("{input}" in s for s in parts) or not any("{output}" in s for s in parts):
        raise ConfigError("command template must contain {input} and {output} placeholders")
    if float(p["timeout"]) <= 0:
        raise ConfigError("timeout must be positive")


def _run_command(template, img: np.ndarray, timeout: float, workdir: Path, idx: int) -> np.ndarray:
    src = workdir / f"in_{idx}.png"
    dst = workdir / f"out_{idx}.png"
    Image.fromarray(img, "RGB").save(src)
    parts = shlex.split(template) if isinstance(template, str) else list(template)
    argv = [s.replace("{input}", str(src)).replace("{output}", str(dst)) for s in parts]
    try:
        proc = subprocess.run(argv, capture_output=True, timeout=timeout, text=True)
    except subprocess.TimeoutExpired as exc:
        raise RuntimeError(f"command timed out after {timeout}s: {argv}") from exc
    except OSError as exc:
        raise RuntimeError(f"cannot execute {argv[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise RuntimeError(f"exit code {proc.returncode}; stderr: {proc.stderr.strip()[-500:]}")
    try:
        with Image.open(dst) as im:
            out = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise RuntimeError(f"unreadable output image: {exc}") from exc
    if out.shape != img.shape:
        raise RuntimeError(f"output dimensions {out.shape[:2]} differ from input {img.shape[:2]}")
    return out


@register("external", differentiable=False, check=_check_command, command=None, timeout=60.0, workers=4)
def external(x, g, cover=None, command=None, timeout=60.0, workers=4):
    """Run an external image-to-image program on every batch element.

    ``command`` is an argument template with ``{input}`` and ``{output}``
    placeholders for PNG files.
    """
    imgs = [to_uint8(img) for img in x]
    with tempfile.TemporaryDirectory(prefix="end2wm-ext-") as tmp:
        with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
            futures = [pool.submit(_run_command, command, im, float(timeout), Path(tmp), i) for i, im in enumerate(imgs)]
            outs = [f.result() for f in futures]
    return torch.stack([from_uint8(o, x.dtype) for o in outs])


# ---------------------------------------------------------------------------
# Suites


@dataclass(frozen=True)
class DistortionSuite:
    entries: tuple[tuple[Distortion, float], ...]
    mode: str = "random"

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("distortion suite is empty")
        if any(w <= 0 for _, w in self.entries):
            raise ConfigError("distortion weights must be positive")
        if self.mode not in ("random", "fixed"):
            raise ConfigError(f"unknown suite mode {self.mode!r}")

    @classmethod
    def from_entries(cls, entries: Sequence[DistortionEntry], mode: str = "random") -> "DistortionSuite":
        if not entries:
            raise ConfigError("distortion suite is empty")
        return cls(tuple((from_entry(e), float(e.weight)) for e in entries), mode)

    @property
    def distortions(self) -> list[Distortion]:
        return [d for d, _ in self.entries]

    @property
    def all_differentiable(self) -> bool:
        return all(d.differentiable for d in self.distortions)


def sample_suite(suite: DistortionSuite, seed: int, step: int = 0) -> Distortion:
    """Pick one distortion: weight-proportional ("random") or round-robin by step ("fixed")."""
    if not suite.entries:
        raise ConfigError("distortion suite is empty")
    if suite.mode == "fixed":
        return suite.entries[step % len(suite.entries)][0]
    weights = np.array([w for _, w in suite.entries], dtype=float)
    rng = np.random.default_rng(seed)
    return suite.entries[int(rng.choice(len(weights), p=weights / weights.sum()))][0]
