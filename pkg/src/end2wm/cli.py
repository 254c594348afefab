"""Command-line entry points: train, embed, extract, bench, ablate, distort.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import torch
import yaml

from . import __version__
from . import distortions as dist
from .core import (
    COMBINED_SUITE,
    JPEG_SWEEP_QUALITIES,
    TABLE2_SUITE,
    BitMessage,
    ConfigError,
    ContractError,
    CorruptDataError,
    NumericalAbort,
    RunConfig,
    ShapeError,
    dump_config,
    make_message,
    resolve_config,
)
from .data import CropDataset, fit_to_size, list_images, load_image, save_image

log = logging.getLogger("end2wm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _set_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _require_dir(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} directory configured")
    p = Path(path)
    if not p.is_dir():
        raise CorruptDataError(f"{what} directory not found: {p}")
    if not list_images(p):
        raise CorruptDataError(f"{what} directory has no images: {p}")
    return p


def _run_metadata(config: RunConfig) -> dict[str, Any]:
    return {
        "code_version": __version__,
        "torch": torch.__version__,
        "codec": dist.codec_version(),
        "seed": config.seed,
        "config_fingerprint": config.fingerprint(),
    }


def _heldout(config: RunConfig) -> torch.Tensor | None:
    if config.heldout is None:
        return None
    root = _require_dir(config.heldout, "held-out")
    return CropDataset(root, config.image_size, seed=config.seed).fixed_crops(config.eval_samples, seed=config.seed)


# ---------------------------------------------------------------------------
# train


def cmd_train(
    config_path: str | Path | None = None,
    preset: str | None = None,
    out: str | Path | None = None,
    seed: int | None = None,
    deterministic: bool | None = None,
    overrides: dict[str, Any] | None = None,
    quiet: bool = False,
) -> Path:
    """Resolve the config, check the data, write the run directory and train.

    Returns the run directory. Nothing is created when the config or the
    dataset is invalid.
    """
    from .evaluation import run_benchmark
    from .training import train_loop

    overrides = dict(overrides or {})
    if seed is not None:
        overrides["seed"] = seed
    if deterministic is not None:
        overrides["deterministic"] = deterministic
    config = resolve_config(config_path, preset, overrides)
    train_root = _require_dir(config.dataset, "dataset")
    heldout = _heldout(config)
    _set_determinism(config.deterministic)

    run_dir = Path(out) if out is not None else Path("runs") / f"{config.strategy.variant}-{config.fingerprint()[:10]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    # persisted before any compute
    dump_config(config, run_dir / "config.yaml")
    (run_dir / "metadata.json").write_text(json.dumps(_run_metadata(config), indent=1, sort_keys=True))

    dataset = CropDataset(train_root, config.image_size, seed=config.seed)

    def progress(i, rec):
        if not quiet and (i + 1) % 100 == 0:
            log.info("step %d total=%.4f", i + 1, rec.get("total", float("nan")))

    result = train_loop(config, dataset, heldout=heldout, run_dir=run_dir, progress=progress)
    if heldout is not None:
        suite = [dist.make_distortion("identity")] + [
            d for d in (dist.from_entry(e) for e in config.suite.entries) if d.name != "identity"
        ]
        run_benchmark(result.checkpoint, heldout, suite, seed=config.seed).write_csv(run_dir / "eval.csv")
    return run_dir


# ---------------------------------------------------------------------------
# embed / extract


def _parse_message(text: str | None, seed: int | None, n: int) -> BitMessage:
    if text is not None:
        msg = BitMessage.from_string(text)
        if msg.n != n:
            raise ConfigError(f"message has {msg.n} bits, checkpoint expects {n}")
        return msg
    return make_message(0 if seed is None else seed, n)


def cmd_embed(
    checkpoint: str | Path,
    image_in: str | Path,
    image_out: str | Path,
    message: str | None = None,
    seed: int | None = None,
    strength: float | None = None,
) -> dict[str, Any]:
    from .evaluation import psnr, resolve_model

    wm = resolve_model(checkpoint)
    msg = _parse_message(message, seed, wm.config.message_length)
    x = load_image(image_in)
    x, changed = fit_to_size(x, wm.config.image_size)
    if changed:
        warnings.warn(
            f"{image_in} resized by center crop/pad to {wm.config.image_size[0]}x{wm.config.image_size[1]}",
            stacklevel=2,
        )
    if strength is not None:
        wm.encoder.strength = strength
    with torch.no_grad():
        wm.encoder.eval()
        x_hat = wm.encoder(x, msg.to_tensor()[None])
    save_image(x_hat, image_out)
    # PSNR of what was actually written (8-bit quantised)
    written = load_image(image_out)
    return {"message": msg.to_string(), "psnr": psnr(x, written), "output": str(image_out), "cropped": changed}


def cmd_extract(checkpoint: str | Path, image_in: str | Path, decoder: str | None = None) -> dict[str, Any]:
    from .evaluation import resolve_model

    wm = resolve_model(checkpoint, decoder)
    x = load_image(image_in)
    x, changed = fit_to_size(x, wm.config.image_size)
    if changed:
        warnings.warn(f"{image_in} resized by center crop/pad to the model size", stacklevel=2)
    with torch.no_grad():
        wm.decoder.eval()
        scores = wm.decoder(x)[0][0]
    bits = "".join("1" if s > 0.5 else "0" for s in scores.tolist())
    return {"bits": bits, "scores": [round(float(s), 6) for s in scores]}


# ---------------------------------------------------------------------------
# bench / ablate


def _bench_suite(name: str, config: RunConfig):
    if name == "table2":
        return [dist.from_entry(e) for e in TABLE2_SUITE]
    if name == "combined":
        return [dist.from_entry(e) for e in COMBINED_SUITE]
    if name == "config":
        return [dist.from_entry(e) for e in config.suite.entries]
    raise ConfigError(f"unknown bench suite {name!r}")


def cmd_bench(
    checkpoint: str | Path,
    images: str | Path,
    out: str | Path,
    suite: str = "table2",
    samples: int = 128,
    seed: int = 0,
    target_psnr: float | None = None,
    decoder: str | None = None,
    qualities: Sequence[int] = JPEG_SWEEP_QUALITIES,
) -> Path:
    from .evaluation import plot_jpeg_sweep, resolve_model, run_benchmark, run_jpeg_sweep, strength_for_psnr

    wm = resolve_model(checkpoint, decoder)
    root = _require_dir(str(images), "evaluation")
    crops = CropDataset(root, wm.config.image_size, seed=seed).fixed_crops(samples, seed=seed)
    strength = strength_for_psnr(wm, crops, target_psnr, seed=seed) if target_psnr is not None else None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if suite == "jpeg-sweep":
        report = run_jpeg_sweep(wm, crops, qualities, seed=seed, strength=strength)
        plot_jpeg_sweep(report, out / "jpeg_sweep.png")
        name = "jpeg_sweep"
    else:
        report = run_benchmark(wm, crops, _bench_suite(suite, wm.config), seed=seed, strength=strength)
        name = f"bench_{suite}"
    report.meta["checkpoint"] = str(checkpoint)
    report.meta["dataset"] = str(images)
    return report.write_csv(out / f"{name}.csv")


def cmd_ablate(
    config_path: str | Path | None = None,
    preset: str | None = None,
    out: str | Path = "ablation",
    seed: int | None = None,
    include_losses: bool = False,
    overrides: dict[str, Any] | None = None,
) -> Path:
    from .evaluation import ablation_matrix, run_ablation, write_ablation_csv

    overrides = dict(overrides or {})
    if seed is not None:
        overrides["seed"] = seed
    config = resolve_config(config_path, preset, overrides)
    train_root = _require_dir(config.dataset, "dataset")
    heldout = _heldout(config)
    if heldout is None:
        raise ConfigError("ablation needs a held-out directory (config key 'heldout')")
    _set_determinism(config.deterministic)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    (out / "metadata.json").write_text(json.dumps(_run_metadata(config), indent=1, sort_keys=True))
    matrix = ablation_matrix(config, include_losses=include_losses)
    rows = run_ablation(
        matrix, lambda c: CropDataset(train_root, c.image_size, seed=c.seed), heldout, seed=config.seed
    )
    return write_ablation_csv(rows, out / "ablation.csv")


# ---------------------------------------------------------------------------
# distort


def _parse_params(items: Sequence[str]) -> dict[str, Any]:
    params = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = yaml.safe_load(v)
    return params


def cmd_distort(name: str, params: dict[str, Any], inputs: Sequence[str | Path], out: str | Path, seed: int = 0) -> list[Path]:
    d = dist.make_distortion(name, **params)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, path in enumerate(inputs):
        x = load_image(path)
        y = dist.apply_blocked(d, x, seed + i, cover=x)
        target = out / f"{Path(path).stem}_{name}.png"
        save_image(y, target)
        written.append(target)
    return written


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--preset", choices=["paper", "desk"])
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="end2wm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _common(p)
    p.add_argument("--dataset", help="training image directory")
    p.add_argument("--heldout", help="held-out image directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--variant", choices=["END2", "VanillaEND", "ForwardASL", "TDSL"])

    p = sub.add_parser("embed", help="watermark one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--message", help="bit string, e.g. 10110010")
    p.add_argument("--strength", type=float)

    p = sub.add_parser("extract", help="decode the bits of one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--decoder", choices=["student", "teacher", "average"])

    p = sub.add_parser("bench", help="robustness benchmark of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="evaluation image directory")
    p.add_argument("--suite", default="table2", choices=["table2", "jpeg-sweep", "combined", "config"])
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--target-psnr", type=float, help="calibrate embedding strength to this PSNR")
    p.add_argument("--decoder", choices=["student", "teacher", "average"])

    p = sub.add_parser("ablate", help="train and compare the FA/MU/SL structures")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--heldout")
    p.add_argument("--steps", type=int)
    p.add_argument("--losses", action="store_true", help="also run the MSE and DINO alignment losses")

    p = sub.add_parser("distort", help="apply a named distortion to image files")
    _common(p)
    p.add_argument("name")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--param", action="append", default=[], help="key=value distortion parameter")
    return parser


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "train":
        overrides = {"dataset": args.dataset, "heldout": args.heldout, "steps": args.steps}
        if args.variant:
            overrides["strategy"] = {"variant": args.variant}
        run = cmd_train(args.config, args.preset, args.out, args.seed, args.deterministic, overrides)
        print(f"run directory: {run}")
    elif args.command == "embed":
        _set_determinism(bool(args.deterministic))
        res = cmd_embed(args.checkpoint, args.input, args.output, args.message, args.seed, args.strength)
        print(f"message: {res['message']}")
        print(f"psnr: {res['psnr']:.2f} dB")
    elif args.command == "extract":
        res = cmd_extract(args.checkpoint, args.input, args.decoder)
        print(f"bits: {res['bits']}")
        print("scores: " + " ".join(f"{s:.4f}" for s in res["scores"]))
    elif args.command == "bench":
        _set_determinism(bool(args.deterministic))
        path = cmd_bench(
            args.checkpoint, args.images, args.out or "bench", args.suite, args.samples,
            args.seed or 0, args.target_psnr, args.decoder,
        )
        print(f"report: {path}")
    elif args.command == "ablate":
        overrides = {"dataset": args.dataset, "heldout": args.heldout, "steps": args.steps}
        if args.deterministic is not None:
            overrides["deterministic"] = args.deterministic
        path = cmd_ablate(args.config, args.preset, args.out or "ablation", args.seed, args.losses, overrides)
        print(f"report: {path}")
    elif args.command == "distort":
        for p in cmd_distort(args.name, _parse_params(args.param), args.inputs, args.out or "distorted", args.seed or 0):
            print(p)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CorruptDataError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
