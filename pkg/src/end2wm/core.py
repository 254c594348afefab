"""Domain types, validation, seeding and run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import torch
import yaml


class End2Error(Exception):
    """Base class for all framework errors."""


class ConfigError(End2Error, ValueError):
    pass


class ShapeError(End2Error, ValueError):
    pass


class CorruptDataError(End2Error, ValueError):
    pass


class ContractError(End2Error, ValueError):
    pass


class DegenerateProjectionError(End2Error, ArithmeticError):
    pass


class DistortionFailedError(End2Error, RuntimeError):
    def __init__(self, name: str, message: str):
        super().__init__(f"distortion {name!r} failed: {message}")
        self.name = name


class NumericalAbort(End2Error, FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Messages


@dataclass(frozen=True)
class BitMessage:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise ConfigError("message must contain at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise ConfigError(f"message bits must be 0 or 1, got {self.bits!r}")
        object.__setattr__(self, "bits", bits)

    @property
    def n(self) -> int:
        return len(self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_string(cls, s: str) -> "BitMessage":
        s = s.strip()
        if not s or set(s) - {"0", "1"}:
            raise ConfigError(f"not a bit string: {s!r}")
        return cls(tuple(int(c) for c in s))

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=dtype)


def make_message(seed: int, n: int) -> BitMessage:
    """Sample an n-bit message; a pure function of (seed, n)."""
    if n <= 0:
        raise ConfigError(f"message length must be positive, got {n}")
    rng = np.random.default_rng(seed)
    return BitMessage(tuple(int(b) for b in rng.integers(0, 2, size=n)))


def random_messages(generator: torch.Generator, batch: int, n: int) -> torch.Tensor:
    """Batch of random bit vectors as a float tensor of shape (batch, n)."""
    return torch.randint(0, 2, (batch, n), generator=generator).float()


# ---------------------------------------------------------------------------
# Images


MIN_IMAGE_SIDE = 16


def validate_image(x: torch.Tensor) -> torch.Tensor:
    """Check an image batch and clamp it into [0, 1]."""
    if not isinstance(x, torch.Tensor):
        raise ShapeError(f"expected a tensor, got {type(x).__name__}")
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected image batch of shape (b, 3, h, w), got {tuple(x.shape)}")
    if x.shape[2] < MIN_IMAGE_SIDE or x.shape[3] < MIN_IMAGE_SIDE:
        raise ShapeError(f"image sides must be >= {MIN_IMAGE_SIDE}, got {tuple(x.shape[2:])}")
    if not torch.isfinite(x).all():
        raise CorruptDataError("image batch contains NaN or Inf")
    return x.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Seeding


def derive_seed(master: int, *labels: str | int) -> int:
    """Fan a master seed out to an independent, stable 63-bit sub-seed."""
    key = ":".join([str(master), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & ((1 << 63) - 1)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


# ---------------------------------------------------------------------------
# Parameter sets


class ParameterSet:
    """Named flat collection of parameter arrays for one model component.

    Arithmetic is defined between sets that share a schema (names, shapes and
    dtypes) and always returns a new set.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        self._tensors: OrderedDict[str, torch.Tensor] = OrderedDict(
            (k, v.detach().clone()) for k, v in tensors.items()
        )

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterSet":
        return cls(OrderedDict(module.named_parameters()))

    def load_into(self, module: torch.nn.Module) -> None:
        params = OrderedDict(module.named_parameters())
        theirs = {k: (tuple(v.shape), v.dtype) for k, v in params.items()}
        if theirs != self.schema():
            raise ContractError("parameter schema does not match module")
        with torch.no_grad():
            for k, v in self._tensors.items():
                params[k].copy_(v)

    def schema(self) -> dict[str, tuple[tuple[int, ...], torch.dtype]]:
        return {k: (tuple(v.shape), v.dtype) for k, v in self._tensors.items()}

    def names(self) -> list[str]:
        return list(self._tensors)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def __len__(self) -> int:
        return len(self._tensors)

    def _check(self, other: "ParameterSet") -> None:
        if self.schema() != other.schema():
            raise ContractError("parameter sets have different schemas")

    def scale(self, c: float) -> "ParameterSet":
        return ParameterSet({k: c * v for k, v in self._tensors.items()})

    def __add__(self, other: "ParameterSet") -> "ParameterSet":
        self._check(other)
        return ParameterSet({k: v + other[k] for k, v in self._tensors.items()})

    def blend(self, other: "ParameterSet", tau: float) -> "ParameterSet":
        """Return tau * self + (1 - tau) * other."""
        self._check(other)
        return ParameterSet({k: tau * v + (1.0 - tau) * other[k] for k, v in self._tensors.items()})

    def flat(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self._tensors.values()]) if self._tensors else torch.zeros(0)

    def equal(self, other: "ParameterSet") -> bool:
        return self.schema() == other.schema() and all(
            torch.equal(v, other[k]) for k, v in self._tensors.items()
        )


# ---------------------------------------------------------------------------
# Run configuration

STRATEGIES = ("END2", "VanillaEND", "ForwardASL", "TDSL")
ALIGNMENT_LOSSES = ("cosine", "mse", "dino")


@dataclass
class DistortionEntry:
    name: str
    params: dict[str, Any] = field(default_factory=dict)
    weight: float = 1.0


@dataclass
class SuiteConfig:
    mode: str = "random"  # "random" (weighted one-of per batch) or "fixed" (round-robin)
    entries: list[DistortionEntry] = field(default_factory=lambda: [DistortionEntry("identity")])


@dataclass
class StrategyConfig:
    variant: str = "END2"
    use_fa: bool = True
    use_mu: bool = True
    use_sl: bool = True
    alignment_loss: str = "cosine"
    # "optimizer": every parameter gets an optimizer step (Algorithm 1 reading);
    # "momentum_only": the teacher moves only through the momentum update.
    teacher_update: str = "optimizer"
    export_decoder: str = "student"  # student | teacher | average
    tdsl_stage1_fraction: float = 0.5


@dataclass
class RunConfig:
    message_length: int = 8
    image_size: tuple[int, int] = (32, 32)
    latent_dim: int = 128
    proj_dim: int = 256
    encoder_channels: int = 32
    encoder_blocks: int = 2
    decoder_channels: int = 32
    decoder_blocks: int = 2
    lambda_align: float = 0.01
    lambda_msg: float = 8.0
    lambda_quality: float = 5.0
    tau: float = 0.999
    swap_interval: int = 1
    lr: float = 8e-4
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    strength: float = 1.0
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    dataset: str | None = None
    heldout: str | None = None
    eval_samples: int = 128
    eval_every: int = 0
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.message_length < 1:
            problems.append("message_length must be >= 1")
        if len(self.image_size) != 2 or min(self.image_size) < MIN_IMAGE_SIDE:
            problems.append(f"image_size must be two sides >= {MIN_IMAGE_SIDE}")
        if self.latent_dim < 1 or self.proj_dim < 1:
            problems.append("latent_dim and proj_dim must be positive")
        if min(self.lambda_align, self.lambda_msg, self.lambda_quality) < 0:
            problems.append("loss weights must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            problems.append("tau must lie in [0, 1]")
        if self.swap_interval < 1:
            problems.append("swap_interval must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.batch_size < 1 or self.steps < 0:
            problems.append("batch_size must be >= 1 and steps >= 0")
        s = self.strategy
        if s.variant not in STRATEGIES:
            problems.append(f"unknown strategy variant {s.variant!r}")
        if s.alignment_loss not in ALIGNMENT_LOSSES:
            problems.append(f"unknown alignment loss {s.alignment_loss!r}")
        if s.teacher_update not in ("optimizer", "momentum_only"):
            problems.append(f"unknown teacher_update {s.teacher_update!r}")
        if s.export_decoder not in ("student", "teacher", "average"):
            problems.append(f"unknown export_decoder {s.export_decoder!r}")
        if not 0.0 < s.tdsl_stage1_fraction < 1.0:
            problems.append("tdsl_stage1_fraction must lie in (0, 1)")
        if self.suite.mode not in ("random", "fixed"):
            problems.append(f"unknown suite mode {self.suite.mode!r}")
        if not self.suite.entries:
            problems.append("distortion suite must have at least one entry")
        if any(e.weight <= 0 for e in self.suite.entries):
            problems.append("distortion weights must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        strategy = data.pop("strategy", None) or {}
        suite = data.pop("suite", None) or {}
        try:
            strategy = StrategyConfig(**strategy)
            entries = [
                DistortionEntry(e["name"], dict(e.get("params") or {}), float(e.get("weight", 1.0)))
                for e in suite.get("entries", [{"name": "identity"}])
            ]
            suite = SuiteConfig(mode=suite.get("mode", "random"), entries=entries)
            return cls(**data, strategy=strategy, suite=suite)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# Distortion suites named after the experiments they reproduce.
TABLE2_SUITE = [
    DistortionEntry("identity"),
    DistortionEntry("gaussian_filter", {"sigma": 2.0}),
    DistortionEntry("jpeg_real", {"quality": 50}),
    DistortionEntry("crop", {"p": 0.1}),
    DistortionEntry("dropout", {"p": 0.5}),
    DistortionEntry("rotate", {"deg": 10.0}),
    DistortionEntry("translate", {"dis": 0.05}),
    DistortionEntry("scale", {"f": 0.65}),
    DistortionEntry("gaussian_noise", {"std": 0.01}),
]

COMBINED_SUITE = [
    DistortionEntry("rotate", {"deg": 10.0}),
    DistortionEntry("crop", {"p": 0.1}),
    DistortionEntry("translate", {"dis": 0.05}),
    DistortionEntry("scale", {"f": 0.65}),
    DistortionEntry("shear", {"deg": 10.0}),
    DistortionEntry("dropout", {"p": 0.5}),
    DistortionEntry("cropout", {"p": 0.5}),
    DistortionEntry("color", {}),
    DistortionEntry("jpeg_real", {"quality": 50}),
    DistortionEntry("gaussian_filter", {"sigma": 2.0}),
    DistortionEntry("gaussian_noise", {"std": 0.01}),
]

JPEG_SWEEP_QUALITIES = [50, 40, 30, 20, 10]

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "image_size": [32, 32],
        "message_length": 8,
        "latent_dim": 128,
        "batch_size": 16,
        "steps": 2000,
    },
    "paper": {
        "image_size": [128, 128],
        "message_length": 30,
        "latent_dim": 256,
        "proj_dim": 256,
        "encoder_channels": 64,
        "decoder_channels": 64,
        "decoder_blocks": 3,
        "batch_size": 32,
        "lr": 8e-4,
        "lambda_align": 0.01,
        "lambda_msg": 8.0,
        "lambda_quality": 5.0,
        "tau": 0.999,
        "swap_interval": 1,
        "suite": {"mode": "random", "entries": [dataclasses.asdict(e) for e in COMBINED_SUITE]},
    },
}


def _merge(base: dict, override: Mapping) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(dict(out[k]), v)
        else:
            out[k] = v
    return out


def resolve_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Resolve defaults <- preset <- config file <- explicit overrides."""
    data: dict[str, Any] = RunConfig().to_dict()
    file_data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        preset = preset or file_data.pop("preset", None)
        file_data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(data, PRESETS[preset])
    data = _merge(data, file_data)
    if overrides:
        data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def dump_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
