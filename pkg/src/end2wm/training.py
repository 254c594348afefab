"""Dual-decoder training with a gradient-blocked noise layer, plus baseline strategies.

One END2 step:

1. x_hat = encoder(x, m)
2. x_tilde = sg[distortion(x_hat)]
3. teacher decodes x_hat, student decodes x_tilde
4. total loss -> backward -> optimizer step on every component
5. teacher <- tau * teacher + (1 - tau) * student
6. swap teacher/student roles when (i + 1) % k == 0
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from . import distortions as dist
from .core import (
    ConfigError,
    ContractError,
    DegenerateProjectionError,
    NumericalAbort,
    ParameterSet,
    RunConfig,
    derive_seed,
    torch_generator,
    random_messages,
)
from .losses import (
    DinoAlignmentLoss,
    LossBreakdown,
    feature_alignment_loss,
    message_loss,
    mse_alignment_loss,
    quality_loss,
    total_loss,
)
from .models import (
    STUDENT,
    TEACHER,
    Decoder,
    ModelBundle,
    encode,
    init_models,
    project,
    save_checkpoint,
)

log = logging.getLogger(__name__)

SINGLE_DECODER = ("VanillaEND", "ForwardASL", "TDSL")


def momentum_update(teacher: ParameterSet, student: ParameterSet, tau: float) -> ParameterSet:
    """Return tau * teacher + (1 - tau) * student element-wise."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    if teacher.schema() != student.schema():
        raise ContractError("teacher and student parameter schemas differ")
    return teacher.blend(student, tau)


@torch.no_grad()
def apply_momentum(teacher: torch.nn.Module, student: torch.nn.Module, tau: float) -> None:
    """In-place version of :func:`momentum_update` on live modules (same arithmetic)."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ContractError("teacher and student parameter schemas differ")
    for name, pt in t_params.items():
        ps = s_params[name]
        if pt.shape != ps.shape:
            raise ContractError(f"shape mismatch for {name}")
        pt.copy_(tau * pt + (1.0 - tau) * ps)


def suite_from_config(config: RunConfig) -> dist.DistortionSuite:
    return dist.DistortionSuite.from_entries(config.suite.entries, config.suite.mode)


@dataclass
class TrainerState:
    config: RunConfig
    bundle: ModelBundle
    suite: dist.DistortionSuite
    optimizers: dict[str, torch.optim.Optimizer]
    teacher_index: int = 0
    step: int = 0
    alignment: Callable | None = None
    trace: list[str] | None = None
    events: list[dict] = field(default_factory=list)
    message_gen: torch.Generator | None = None

    @property
    def encoder(self):
        return self.bundle.encoder

    @property
    def teacher(self) -> Decoder:
        return self.bundle.decoders[self.teacher_index]

    @property
    def student(self) -> Decoder:
        return self.bundle.decoders[1 - self.teacher_index]

    @property
    def projection(self):
        return self.bundle.projection

    def _trace(self, what: str) -> None:
        if self.trace is not None:
            self.trace.append(what)

    def extraction_decoder(self) -> Decoder:
        if self.config.strategy.variant in SINGLE_DECODER:
            return self.bundle.decoders[0]
        which = self.config.strategy.export_decoder
        if which == "teacher":
            return self.teacher
        if which == "student":
            return self.student
        avg = Decoder(
            self.config.message_length, self.config.latent_dim, self.config.decoder_channels, self.config.decoder_blocks
        ).to(next(self.teacher.parameters()).dtype)
        ParameterSet.from_module(self.teacher).blend(ParameterSet.from_module(self.student), 0.5).load_into(avg)
        return avg

    def next_messages(self, batch: int) -> torch.Tensor:
        return random_messages(self.message_gen, batch, self.config.message_length)


def check_strategy(config: RunConfig, suite: dist.DistortionSuite) -> None:
    if config.strategy.variant == "VanillaEND" and not suite.all_differentiable:
        bad = [d.name for d in suite.distortions if not d.differentiable]
        raise ConfigError(f"VanillaEND needs differentiable distortions; {bad} are not")


def make_alignment(config: RunConfig):
    kind = config.strategy.alignment_loss
    if kind == "cosine":
        return None
    if kind == "mse":
        return mse_alignment_loss
    return DinoAlignmentLoss(config.proj_dim)


def init_state(config: RunConfig, bundle: ModelBundle | None = None, trace: bool = False) -> TrainerState:
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    suite = suite_from_config(config)
    check_strategy(config, suite)
    bundle = bundle or init_models(config)
    components = {
        "encoder": bundle.encoder,
        "decoder0": bundle.decoders[0],
        "decoder1": bundle.decoders[1],
        "projection": bundle.projection,
    }
    # One optimizer per component so each decoder's moments follow its parameters across swaps.
    optimizers = {name: torch.optim.Adam(mod.parameters(), lr=config.lr) for name, mod in components.items()}
    state = TrainerState(
        config=config,
        bundle=bundle,
        suite=suite,
        optimizers=optimizers,
        alignment=make_alignment(config),
        trace=[] if trace else None,
        message_gen=torch_generator(derive_seed(config.seed, "messages")),
    )
    for mod in components.values():
        mod.train()
    bundle.decoders[0].role, bundle.decoders[1].role = TEACHER, STUDENT
    return state


def maybe_swap(state: TrainerState, k: int | None = None) -> bool:
    """Exchange teacher/student roles when (i + 1) % k == 0 for the current step i."""
    k = state.config.swap_interval if k is None else k
    if k < 1:
        raise ConfigError("swap interval must be >= 1")
    if (state.step + 1) % k != 0:
        return False
    swap_roles(state)
    return True


def swap_roles(state: TrainerState) -> None:
    state.teacher_index = 1 - state.teacher_index
    state.teacher.role, state.student.role = TEACHER, STUDENT
    state._trace("swap")


def _component_name(state: TrainerState, decoder: Decoder) -> str:
    return "decoder0" if decoder is state.bundle.decoders[0] else "decoder1"


def _zero_grads(state: TrainerState) -> None:
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)


def _alignment_loss(state: TrainerState, zs: torch.Tensor, zt: torch.Tensor) -> torch.Tensor:
    if state.alignment is None:
        return feature_alignment_loss(project(state.projection, zs), project(state.projection, zt))
    return state.alignment(state.projection(zs), state.projection(zt))


def end2_forward(state: TrainerState, x: torch.Tensor, m: torch.Tensor, distortion=None, seed=None):
    """Forward pass of one END2 step. Returns (breakdown, x_hat, x_tilde, features)."""
    cfg = state.config
    distortion = distortion or dist.sample_suite(state.suite, derive_seed(cfg.seed, "suite", state.step), state.step)
    seed = derive_seed(cfg.seed, "distort", state.step) if seed is None else seed
    x_hat = encode(state.encoder, x, m)
    x_tilde = dist.apply_blocked(distortion, x_hat, seed, cover=x)
    mt, zt = state.teacher(x_hat)
    ms, zs = state.student(x_tilde)
    if cfg.strategy.use_fa:
        l_align = _alignment_loss(state, zs, zt)
    else:
        l_align = torch.zeros((), dtype=x_hat.dtype)
    l_msg = message_loss(mt, ms, m)
    l_q = quality_loss(x_hat, x)
    lam_align = cfg.lambda_align if cfg.strategy.use_fa else 0.0
    bd = total_loss(l_align, l_msg, l_q, lam_align, cfg.lambda_msg, cfg.lambda_quality)
    return bd, x_hat, x_tilde, {"zt": zt, "zs": zs, "mt": mt, "ms": ms, "distortion": distortion}


def _check_finite(state: TrainerState, bd: LossBreakdown) -> None:
    if not torch.isfinite(bd.total):
        raise NumericalAbort(f"non-finite loss at step {state.step}: {bd.as_floats()}")


def _end2_step(state: TrainerState, x, m) -> LossBreakdown | None:
    cfg = state.config
    try:
        bd, _, _, extras = end2_forward(state, x, m)
    except DegenerateProjectionError as exc:
        state.events.append({"step": state.step, "event": "skipped", "reason": str(exc)})
        log.warning("step %d skipped: %s", state.step, exc)
        return None
    _check_finite(state, bd)
    _zero_grads(state)
    bd.total.backward()
    teacher_name = _component_name(state, state.teacher)
    for name, opt in state.optimizers.items():
        if name == teacher_name and cfg.strategy.teacher_update == "momentum_only":
            continue
        opt.step()
    state._trace("optimizer_step")
    if cfg.strategy.use_mu:
        apply_momentum(state.teacher, state.student, cfg.tau)
        state._trace("momentum_update")
    if cfg.strategy.use_sl:
        maybe_swap(state)
    bd.distortion = extras["distortion"].label()
    return bd


def _single_decoder_step(state: TrainerState, x, m, route: str) -> LossBreakdown:
    """VanillaEND ("through"), ForwardASL ("asl"), TDSL stage 1 ("clean")."""
    cfg = state.config
    decoder = state.bundle.decoders[0]
    x_hat = encode(state.encoder, x, m)
    if route == "clean":
        d = dist.make_distortion("identity")
        x_in = x_hat
    else:
        d = dist.sample_suite(state.suite, derive_seed(cfg.seed, "suite", state.step), state.step)
        seed = derive_seed(cfg.seed, "distort", state.step)
        if route == "through":
            x_in = dist.apply(d, x_hat, seed, cover=x)
        else:
            x_in = asl_input(x_hat, dist.apply_blocked(d, x_hat, seed, cover=x))
    mh, _ = decoder(x_in)
    bd = total_loss(torch.zeros(()), message_loss(mh, None, m), quality_loss(x_hat, x), 0.0, cfg.lambda_msg, cfg.lambda_quality)
    _check_finite(state, bd)
    _zero_grads(state)
    bd.total.backward()
    state.optimizers["encoder"].step()
    state.optimizers["decoder0"].step()
    state._trace("optimizer_step")
    bd.distortion = d.label()
    return bd


def asl_input(x_hat: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
    """Additive bypass: forward value is exactly x_tilde, gradient is the identity onto x_hat."""
    return x_tilde.detach() + (x_hat - x_hat.detach())


def _tdsl_stage2_step(state: TrainerState, x, m) -> LossBreakdown:
    """Decoder-only training on distorted images from the frozen encoder."""
    cfg = state.config
    decoder = state.bundle.decoders[0]
    with torch.no_grad():
        x_hat = encode(state.encoder, x, m)
    d = dist.sample_suite(state.suite, derive_seed(cfg.seed, "suite", state.step), state.step)
    x_tilde = dist.apply_blocked(d, x_hat, derive_seed(cfg.seed, "distort", state.step), cover=x)
    mh, _ = decoder(x_tilde)
    bd = total_loss(torch.zeros(()), message_loss(mh, None, m), quality_loss(x_hat, x), 0.0, cfg.lambda_msg, cfg.lambda_quality)
    _check_finite(state, bd)
    _zero_grads(state)
    (cfg.lambda_msg * bd.l_msg).backward()
    state.optimizers["decoder0"].step()
    state._trace("optimizer_step")
    bd.distortion = d.label()
    return bd


def tdsl_stage1_steps(config: RunConfig) -> int:
    return int(round(config.steps * config.strategy.tdsl_stage1_fraction))


def train_step(state: TrainerState, x: torch.Tensor, m: torch.Tensor) -> tuple[TrainerState, LossBreakdown | None]:
    """Run one training step in place; returns the state and the loss breakdown (None if skipped)."""
    variant = state.config.strategy.variant
    if variant == "END2":
        bd = _end2_step(state, x, m)
    elif variant == "VanillaEND":
        bd = _single_decoder_step(state, x, m, "through")
    elif variant == "ForwardASL":
        bd = _single_decoder_step(state, x, m, "asl")
    elif state.step < tdsl_stage1_steps(state.config):
        bd = _single_decoder_step(state, x, m, "clean")
    else:
        bd = _tdsl_stage2_step(state, x, m)
    state.step += 1
    return state, bd


@dataclass
class TrainResult:
    state: TrainerState
    checkpoint: Path | None
    log_records: list[dict]


def _checkpoint(state: TrainerState, path: Path) -> Path:
    extra = {
        "strategy": state.config.strategy.variant,
        "export_decoder": state.config.strategy.export_decoder,
        "single_decoder": state.config.strategy.variant in SINGLE_DECODER,
        "codec": dist.codec_version(),
        "loss_convention": "mean-squared",
        "events": state.events,
    }
    return save_checkpoint(path, state.bundle, state.config, state.step, state.teacher_index, extra)


def train_loop(
    config: RunConfig,
    dataset,
    heldout: torch.Tensor | None = None,
    run_dir: str | Path | None = None,
    bundle: ModelBundle | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Train for ``config.steps`` steps on batches drawn from ``dataset``.

    ``dataset`` needs a ``sample(batch)`` method returning a (b, 3, h, w)
    tensor. When ``run_dir`` is given, the training log (train_log.jsonl),
    periodic/final checkpoints and periodic eval records are written there.
    """
    from .evaluation import evaluate_decoder  # evaluation imports training types

    state = init_state(config, bundle)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "train_log.jsonl", "w")
    records: list[dict] = []
    try:
        while state.step < config.steps:
            x = dataset.sample(config.batch_size)
            m = state.next_messages(config.batch_size)
            i = state.step
            try:
                _, bd = train_step(state, x, m)
            except NumericalAbort:
                if run_dir is not None:
                    _checkpoint(state, run_dir / "checkpoints" / "diagnostic.ckpt")
                raise
            rec = {"step": i}
            if bd is None:
                rec["skipped"] = True
            else:
                rec.update(bd.as_floats())
                rec["distortion"] = getattr(bd, "distortion", None)
            if heldout is not None and config.eval_every and (i + 1) % config.eval_every == 0:
                rec["eval"] = evaluate_decoder(state.encoder, state.extraction_decoder(), heldout, config)
                for mod in (state.encoder, *state.bundle.decoders):
                    mod.train()
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if progress is not None:
                progress(i, rec)
            if run_dir is not None and config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
                _checkpoint(state, run_dir / "checkpoints" / f"step_{i + 1:07d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = _checkpoint(state, run_dir / "checkpoints" / "final.ckpt") if run_dir is not None else None
    for mod in (state.encoder, *state.bundle.decoders, state.projection):
        mod.eval()
    return TrainResult(state, ckpt, records)


def train_baseline(variant: str, config: RunConfig, dataset, **kwargs) -> TrainResult:
    strategy = {**config.to_dict()["strategy"], "variant": variant}
    return train_loop(config.replace(strategy=strategy), dataset, **kwargs)


def ablation_config(config: RunConfig, fa: bool, mu: bool, sl: bool) -> RunConfig:
    strategy = {**config.to_dict()["strategy"], "variant": "END2", "use_fa": fa, "use_mu": mu, "use_sl": sl}
    return config.replace(strategy=strategy)
