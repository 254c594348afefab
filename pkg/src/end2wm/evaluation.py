"""Metrics (bit accuracy, PSNR, SSIM) and benchmark harnesses."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

from . import distortions as dist
from .core import (
    ConfigError,
    DistortionEntry,
    DistortionFailedError,
    JPEG_SWEEP_QUALITIES,
    RunConfig,
    ShapeError,
    derive_seed,
    random_messages,
    torch_generator,
)
from .models import Checkpoint, Decoder, Encoder, load_checkpoint

IDENTICAL = math.inf  # PSNR sentinel for identical inputs


# ---------------------------------------------------------------------------
# Metrics


def bit_accuracy(m_hat: torch.Tensor, m: torch.Tensor) -> float:
    """Fraction of positions where the bit score, thresholded at 0.5, equals m."""
    m_hat, m = torch.as_tensor(m_hat), torch.as_tensor(m)
    if m_hat.shape != m.shape:
        raise ShapeError(f"shape mismatch: {tuple(m_hat.shape)} vs {tuple(m.shape)}")
    return float(((m_hat > 0.5).to(m.dtype) == m).double().mean())


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all elements; :data:`IDENTICAL` (inf) when a == b."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * math.log10(peak**2 / mse)


def psnr_per_image(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    mse = ((a.double() - b.double()) ** 2).flatten(1).mean(1)
    return torch.where(mse == 0, torch.full_like(mse, math.inf), 10.0 * torch.log10(peak**2 / mse))


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    t = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-image mean SSIM over valid 11x11 Gaussian windows and channels."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ConfigError(f"image smaller than the {window}x{window} SSIM window")
    a, b = a.double(), b.double()
    c = a.shape[1]
    g = _gaussian_window(window, sigma)
    kx = g.view(1, 1, 1, -1).expand(c, 1, 1, window)
    ky = g.view(1, 1, -1, 1).expand(c, 1, window, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, kx, groups=c), ky, groups=c)

    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a**2
    sbb = blur(b * b) - mu_b**2
    sab = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return s.flatten(1).mean(1)


def ssim(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    return float(ssim_map(a, b, peak).mean())


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalRow:
    distortion: str
    params: dict[str, Any]
    acc: float
    psnr: float
    ssim: float
    n_samples: int
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    meta: dict[str, Any] = field(default_factory=dict)

    def row(self, name: str) -> EvalRow:
        for r in self.rows:
            if r.distortion == name:
                return r
        raise KeyError(name)

    def mean_acc(self) -> float:
        accs = [r.acc for r in self.rows if r.error is None]
        return sum(accs) / len(accs) if accs else math.nan

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["distortion", "params", "acc", "psnr", "ssim", "n_samples"])
            for r in self.rows:
                p = "identical" if r.psnr == IDENTICAL else ("" if math.isnan(r.psnr) else f"{r.psnr:.4f}")
                w.writerow([
                    r.distortion,
                    json.dumps(r.params, sort_keys=True),
                    "" if math.isnan(r.acc) else f"{r.acc:.6f}",
                    p,
                    "" if math.isnan(r.ssim) else f"{r.ssim:.6f}",
                    r.n_samples,
                ])
        meta = {**self.meta, "errors": {r.distortion: r.error for r in self.rows if r.error}}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))
        return path


# ---------------------------------------------------------------------------
# Model resolution and single-distortion evaluation


@dataclass
class Watermarker:
    encoder: Encoder
    decoder: Decoder
    config: RunConfig
    source: str = "in-memory"


def resolve_model(model, decoder: str | None = None) -> Watermarker:
    """Accept a checkpoint path, a loaded Checkpoint, a TrainerState or a Watermarker."""
    if isinstance(model, Watermarker):
        return model
    if isinstance(model, (str, Path)):
        ck = load_checkpoint(model)
        src = str(model)
    elif isinstance(model, Checkpoint):
        ck, src = model, "checkpoint"
    else:  # TrainerState
        dec = model.extraction_decoder() if decoder is None else (model.teacher if decoder == "teacher" else model.student)
        return Watermarker(model.encoder, dec, model.config, "trainer-state")
    if ck.extra.get("single_decoder"):
        dec = ck.bundle.decoders[0]
    else:
        dec = ck.extraction_decoder(decoder)
    return Watermarker(ck.bundle.encoder, dec, ck.config, src)


def eval_messages(n_images: int, n_bits: int, seed: int) -> torch.Tensor:
    return random_messages(torch_generator(derive_seed(seed, "eval-messages")), n_images, n_bits)


@torch.no_grad()
def embed_all(wm: Watermarker, images: torch.Tensor, messages: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    wm.encoder.eval()
    dtype = next(wm.encoder.parameters()).dtype
    return torch.cat([wm.encoder(images[i : i + chunk].to(dtype), messages[i : i + chunk].to(dtype)) for i in range(0, len(images), chunk)])


@torch.no_grad()
def decode_all(wm: Watermarker, images: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    wm.decoder.eval()
    dtype = next(wm.decoder.parameters()).dtype
    return torch.cat([wm.decoder(images[i : i + chunk].to(dtype))[0] for i in range(0, len(images), chunk)])


def _distort_all(d: dist.Distortion, x_hat, cover, seed, chunk=64):
    return torch.cat([
        dist.apply_blocked(d, x_hat[i : i + chunk], derive_seed(seed, d.label(), i), cover=cover[i : i + chunk])
        for i in range(0, len(x_hat), chunk)
    ])


@torch.no_grad()
def evaluate_decoder(encoder, decoder, images, config: RunConfig, distortion: dist.Distortion | None = None, seed: int = 0) -> dict:
    """Clean/distorted accuracy and watermark quality on a fixed image set."""
    wm = Watermarker(encoder, decoder, config)
    m = eval_messages(len(images), config.message_length, seed)
    x_hat = embed_all(wm, images, m)
    d = distortion or dist.make_distortion("identity")
    x_tilde = _distort_all(d, x_hat, images, seed)
    return {
        "acc": bit_accuracy(decode_all(wm, x_tilde), m),
        "psnr_wm": float(psnr_per_image(images, x_hat).mean()),
        "ssim_wm": float(ssim_map(images, x_hat).mean()),
    }


def _entries(suite) -> list[dist.Distortion]:
    if isinstance(suite, dist.DistortionSuite):
        out = suite.distortions
    else:
        out = [e if isinstance(e, dist.Distortion) else dist.from_entry(e) for e in suite]
    if not out:
        raise ConfigError("benchmark suite is empty")
    return out


def run_benchmark(model, images: torch.Tensor, suite, seed: int = 0, decoder: str | None = None, strength: float | None = None) -> EvalReport:
    """Embed -> distort -> extract on ``images`` for each distortion in ``suite``.

    Row psnr/ssim compare the watermarked and distorted images (psnr pooled
    over all samples); watermark quality (cover vs watermarked) is in meta.
    """
    distortions = _entries(suite)
    if len(images) == 0:
        raise ConfigError("evaluation dataset is empty")
    wm = resolve_model(model, decoder)
    old_strength = wm.encoder.strength
    if strength is not None:
        wm.encoder.strength = strength
    try:
        m = eval_messages(len(images), wm.config.message_length, seed)
        x_hat = embed_all(wm, images, m)
    finally:
        wm.encoder.strength = old_strength
    rows = []
    for d in distortions:
        try:
            x_tilde = _distort_all(d, x_hat, images, seed)
        except DistortionFailedError as exc:
            rows.append(EvalRow(d.name, dict(d.params), math.nan, math.nan, math.nan, 0, str(exc)))
            continue
        rows.append(EvalRow(
            d.name,
            {k: v for k, v in d.params.items()},
            bit_accuracy(decode_all(wm, x_tilde), m),
            psnr(x_hat, x_tilde),
            float(ssim_map(x_hat, x_tilde).mean()),
            len(images),
        ))
    meta = {
        "model": wm.source,
        "seed": seed,
        "n_images": len(images),
        "psnr_wm": float(psnr_per_image(images, x_hat).mean()),
        "ssim_wm": float(ssim_map(images, x_hat).mean()),
        "strength": old_strength if strength is None else strength,
        "codec": dist.codec_version(),
    }
    return EvalReport(rows, meta)


def run_jpeg_sweep(model, images, qualities: Sequence[int] = JPEG_SWEEP_QUALITIES, seed: int = 0, **kwargs) -> EvalReport:
    seen, qs = set(), []
    for q in qualities:
        if q in seen:
            warnings.warn(f"duplicate JPEG quality {q} dropped", stacklevel=2)
            continue
        seen.add(q)
        qs.append(q)
    suite = [dist.make_distortion("jpeg_real", quality=int(q)) for q in qs]
    return run_benchmark(model, images, suite, seed=seed, **kwargs)


@torch.no_grad()
def strength_for_psnr(model, images, target_psnr: float, seed: int = 0, lo: float = 0.0, hi: float = 8.0, iters: int = 30) -> float:
    """Bisect the residual multiplier so the mean cover/watermarked PSNR hits ``target_psnr``."""
    wm = resolve_model(model)
    m = eval_messages(len(images), wm.config.message_length, seed)
    old = wm.encoder.strength

    def quality(s):
        wm.encoder.strength = s
        return float(psnr_per_image(images, embed_all(wm, images, m)).mean())

    try:
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if quality(mid) > target_psnr:
                lo = mid
            else:
                hi = mid
    finally:
        wm.encoder.strength = old
    return 0.5 * (lo + hi)


def strength_sweep(model, images, distortion: dist.Distortion, strengths: Iterable[float], seed: int = 0) -> list[dict]:
    """ACC under ``distortion`` against watermark PSNR as the embedding strength varies."""
    out = []
    for s in strengths:
        rep = run_benchmark(model, images, [distortion], seed=seed, strength=s)
        out.append({"strength": s, "psnr_wm": rep.meta["psnr_wm"], "acc": rep.rows[0].acc})
    return out


# ---------------------------------------------------------------------------
# Ablation


ABLATION_STRUCTURES = {
    "None": (False, False, False),
    "FA": (True, False, False),
    "FA+MU": (True, True, False),
    "FA+SL": (True, False, True),
    "FA+MU+SL": (True, True, True),
}


def ablation_matrix(base: RunConfig, include_losses: bool = False) -> dict[str, RunConfig]:
    from .training import ablation_config

    cells = {name: ablation_config(base, *flags) for name, flags in ABLATION_STRUCTURES.items()}
    if include_losses:
        for loss in ("mse", "dino"):
            cfg = ablation_config(base, True, True, True)
            cells[f"FA+MU+SL[{loss}]"] = cfg.replace(strategy={**cfg.to_dict()["strategy"], "alignment_loss": loss})
    return cells


@dataclass
class AblationRow:
    name: str
    acc: float
    psnr: float
    ssim: float
    error: str | None = None


def run_ablation(
    config_matrix: Mapping[str, RunConfig],
    dataset_factory: Callable[[RunConfig], Any],
    heldout: torch.Tensor,
    eval_suite=None,
    seed: int = 0,
) -> list[AblationRow]:
    """Train every cell and report mean ACC over ``eval_suite`` plus watermark PSNR/SSIM.

    ``eval_suite`` defaults to each cell's training suite. A failing cell is
    recorded with its error and does not stop the others.
    """
    from .training import train_loop

    rows = []
    for name, cfg in config_matrix.items():
        try:
            result = train_loop(cfg, dataset_factory(cfg))
            suite = eval_suite if eval_suite is not None else [dist.from_entry(e) for e in cfg.suite.entries]
            rep = run_benchmark(result.state, heldout, suite, seed=seed)
            rows.append(AblationRow(name, rep.mean_acc(), rep.meta["psnr_wm"], rep.meta["ssim_wm"]))
        except Exception as exc:  # isolate per-cell failures
            rows.append(AblationRow(name, math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["structure", "acc", "psnr", "ssim", "error"])
        for r in rows:
            w.writerow([r.name, f"{r.acc:.6f}", f"{r.psnr:.4f}", f"{r.ssim:.6f}", r.error or ""])
    return path


# ---------------------------------------------------------------------------
# Plots


def plot_jpeg_sweep(report: EvalReport, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qs = [r.params["quality"] for r in report.rows]
    accs = [100 * r.acc for r in report.rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(qs, accs, marker="o")
    ax.set_xlabel("JPEG quality")
    ax.set_ylabel("ACC (%)")
    ax.invert_xaxis()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_strength_sweep(points: Sequence[dict], path: str | Path, label: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([p["psnr_wm"] for p in points], [100 * p["acc"] for p in points], marker="o", label=label or None)
    ax.set_xlabel("PSNR (dB)")
    ax.set_ylabel("ACC (%)")
    ax.grid(alpha=0.3)
    if label:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
