"""Watermark encoder, decoders (feature extractor + linear head) and projection head."""

from __future__ import annotations

import io
import math
import zipfile
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
from torch import nn
import torch.nn.functional as F

from .core import (
    ConfigError,
    ContractError,
    DegenerateProjectionError,
    ParameterSet,
    RunConfig,
    ShapeError,
    derive_seed,
    validate_image,
)

TEACHER = "teacher"
STUDENT = "student"


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(1, cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.a = ConvBlock(channels, channels)
        self.b = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.leaky_relu(x + self.b(self.a(x)), 0.2)


class Encoder(nn.Module):
    """Residual CNN that tiles a learned message block over the image.

    The message is mapped to a (message_channels, tile, tile) block that is
    repeated across the image, fused with image features, and also fed
    straight to the output layer. The residual is added to the cover and the
    result clamped to [0, 1].

    Input: (N, 3, H, W) images in [0, 1] and (N, n) bits.
    Output: (N, 3, H, W) watermarked images in [0, 1].
    """

    def __init__(self, message_length: int, channels: int = 32, blocks: int = 2, message_channels: int = 16, tile: int = 8):
        super().__init__()
        self.message_length = message_length
        self.message_channels = message_channels
        self.tile = tile
        self.stem = ConvBlock(3, channels)
        self.message_proj = nn.Linear(message_length, message_channels * tile * tile)
        self.fuse = ConvBlock(channels + message_channels + 3, channels)
        self.body = nn.Sequential(*[ResBlock(channels) for _ in range(blocks)])
        self.out = nn.Conv2d(channels + message_channels + 3, 3, 1)
        self.strength = 1.0

    def message_map(self, m: torch.Tensor, h: int, w: int) -> torch.Tensor:
        t = self.tile
        block = self.message_proj(2.0 * m - 1.0).view(m.shape[0], self.message_channels, t, t)
        reps = (math.ceil(h / t), math.ceil(w / t))
        return block.repeat(1, 1, *reps)[:, :, :h, :w]

    def residual(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        msg = self.message_map(m, h, w)
        y = self.body(self.fuse(torch.cat([self.stem(x), msg, x], dim=1)))
        return self.out(torch.cat([y, msg, x], dim=1))

    def forward(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return (x + self.strength * self.residual(x, m)).clamp(0.0, 1.0)


class Decoder(nn.Module):
    """Strided conv feature extractor (xi) followed by a linear message head (gamma)."""

    def __init__(self, message_length: int, latent_dim: int = 128, channels: int = 32, blocks: int = 2):
        super().__init__()
        layers = [ConvBlock(3, channels)]
        for _ in range(blocks):
            layers += [ConvBlock(channels, channels, stride=2), ConvBlock(channels, channels)]
        layers.append(nn.Conv2d(channels, latent_dim, 3, padding=1))
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(latent_dim, message_length)
        self.latent_dim = latent_dim
        self.message_length = message_length
        self.role = TEACHER

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).mean(dim=(2, 3))

    def predict(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"expected features of shape (b, {self.latent_dim}), got {tuple(z.shape)}")
        return torch.sigmoid(self.head(z))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (bit scores in [0, 1], features)."""
        z = self.extract(x)
        return self.predict(z), z


class ProjectionHead(nn.Module):
    def __init__(self, latent_dim: int, proj_dim: int = 256):
        super().__init__()
        self.linear = nn.Linear(latent_dim, proj_dim, bias=False)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z)


# ---------------------------------------------------------------------------
# Functional surface


def encode(encoder: Encoder, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    x = validate_image(x)
    if m.dim() == 1:
        m = m.unsqueeze(0).expand(x.shape[0], -1)
    if m.shape[-1] != encoder.message_length:
        raise ConfigError(f"message length {m.shape[-1]} does not match encoder ({encoder.message_length})")
    return encoder(x, m.to(x.dtype))


def extract_features(decoder: Decoder, x: torch.Tensor) -> torch.Tensor:
    return decoder.extract(validate_image(x))


def predict_message(decoder: Decoder, z: torch.Tensor) -> torch.Tensor:
    return decoder.predict(z)


def project(head: ProjectionHead, z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Map features onto the unit hypersphere through the shared bias-free projection."""
    p = head(z)
    norms = p.norm(dim=-1, keepdim=True)
    if (norms < eps).any():
        raise DegenerateProjectionError("projected feature vector has (near) zero norm")
    return p / norms


@dataclass
class ModelBundle:
    encoder: Encoder
    decoders: tuple[Decoder, Decoder]
    projection: ProjectionHead


def init_models(config: RunConfig, seed: int | None = None) -> ModelBundle:
    """Build the encoder, two independently initialised decoders and the shared projection."""
    seed = config.seed if seed is None else seed

    def seeded(label, factory):
        torch.manual_seed(derive_seed(seed, "init", label))
        return factory()

    n, d = config.message_length, config.latent_dim
    encoder = seeded("encoder", lambda: Encoder(n, config.encoder_channels, config.encoder_blocks))
    encoder.strength = config.strength
    dec_a = seeded("decoder0", lambda: Decoder(n, d, config.decoder_channels, config.decoder_blocks))
    dec_b = seeded("decoder1", lambda: Decoder(n, d, config.decoder_channels, config.decoder_blocks))
    dec_a.role, dec_b.role = TEACHER, STUDENT
    proj = seeded("projection", lambda: ProjectionHead(d, config.proj_dim))
    return ModelBundle(encoder, (dec_a, dec_b), proj)


# ---------------------------------------------------------------------------
# Checkpoints
#
# A checkpoint is one zip archive holding one torch-serialised ParameterSet per
# component plus meta.json (resolved config, step counter, roles, extras).

COMPONENTS = ("encoder", "decoder0", "decoder1", "projection")


def _serialize(pset: ParameterSet) -> bytes:
    buf = io.BytesIO()
    torch.save(dict(pset.items()), buf)
    return buf.getvalue()


def save_checkpoint(
    path: str | Path,
    bundle: ModelBundle,
    config: RunConfig,
    step: int,
    teacher_index: int = 0,
    extra: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    modules = dict(zip(COMPONENTS, (bundle.encoder, *bundle.decoders, bundle.projection)))
    meta = {
        "config": config.to_dict(),
        "step": step,
        "teacher_index": teacher_index,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    # Fixed timestamps keep the archive bytes reproducible.
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, module in modules.items():
            info = zipfile.ZipInfo(f"{name}.pt", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, _serialize(ParameterSet.from_module(module)))
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    bundle: ModelBundle
    config: RunConfig
    step: int
    teacher_index: int
    extra: dict[str, Any]

    @property
    def teacher(self) -> Decoder:
        return self.bundle.decoders[self.teacher_index]

    @property
    def student(self) -> Decoder:
        return self.bundle.decoders[1 - self.teacher_index]

    def extraction_decoder(self, which: str | None = None) -> Decoder:
        which = which or self.extra.get("export_decoder") or self.config.strategy.export_decoder
        if which == "student":
            return self.student
        if which == "teacher":
            return self.teacher
        if which == "average":
            avg = Decoder(
                self.config.message_length,
                self.config.latent_dim,
                self.config.decoder_channels,
                self.config.decoder_blocks,
            )
            blended = ParameterSet.from_module(self.teacher).blend(ParameterSet.from_module(self.student), 0.5)
            blended.load_into(avg)
            return avg.eval()
        raise ConfigError(f"unknown extraction decoder {which!r}")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            blobs = {name: zf.read(f"{name}.pt") for name in COMPONENTS}
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ContractError(f"malformed checkpoint {path}: {exc}") from exc
    config = RunConfig.from_dict(meta["config"])
    bundle = init_models(config)
    modules = dict(zip(COMPONENTS, (bundle.encoder, *bundle.decoders, bundle.projection)))
    for name, module in modules.items():
        tensors = torch.load(io.BytesIO(blobs[name]), weights_only=True)
        ParameterSet(tensors).load_into(module)
        module.eval()
    ti = int(meta["teacher_index"])
    bundle.decoders[ti].role, bundle.decoders[1 - ti].role = TEACHER, STUDENT
    return Checkpoint(bundle, config, int(meta["step"]), ti, meta.get("extra", {}))
