"""Training losses and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import ContractError, ShapeError

UNIT_TOL = 1e-4


@dataclass
class LossBreakdown:
    l_align: torch.Tensor
    l_msg: torch.Tensor
    l_quality: torch.Tensor
    total: torch.Tensor
    distortion: str | None = None

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_align", "l_msg", "l_quality", "total")}


def feature_alignment_loss(zs_bar: torch.Tensor, zt_bar: torch.Tensor) -> torch.Tensor:
    """2 - 2 <zs, sg[zt]> for unit vectors, averaged over the batch.

    The teacher side is detached here, so gradient only reaches the student.
    """
    for name, v in (("student", zs_bar), ("teacher", zt_bar)):
        dev = (v.detach().norm(dim=-1) - 1.0).abs().max()
        if dev > UNIT_TOL:
            raise ContractError(f"{name} projection is not unit-norm (deviation {float(dev):.2e})")
    zt_bar = zt_bar.detach()
    return (2.0 - 2.0 * (zs_bar * zt_bar).sum(dim=-1)).mean()


def mse_alignment_loss(ps: torch.Tensor, pt: torch.Tensor) -> torch.Tensor:
    """Plain MSE between (unnormalised) projections, teacher side detached."""
    return F.mse_loss(ps, pt.detach())


class DinoAlignmentLoss:
    """Cross-entropy between a centred, sharpened teacher distribution and the student.

    The centre is an exponential moving average of teacher projections and is
    the only state the loss carries.
    """

    def __init__(self, dim: int, student_temp: float = 0.1, teacher_temp: float = 0.04, center_momentum: float = 0.9):
        self.student_temp = student_temp
        self.teacher_temp = teacher_temp
        self.center_momentum = center_momentum
        self.center = torch.zeros(1, dim)

    def __call__(self, ps: torch.Tensor, pt: torch.Tensor) -> torch.Tensor:
        pt = pt.detach()
        teacher = F.softmax((pt - self.center.to(pt.dtype)) / self.teacher_temp, dim=-1)
        student = F.log_softmax(ps / self.student_temp, dim=-1)
        loss = -(teacher * student).sum(dim=-1).mean()
        with torch.no_grad():
            self.center = self.center_momentum * self.center + (1 - self.center_momentum) * pt.mean(0, keepdim=True)
        return loss


def message_loss(mt_hat: torch.Tensor, ms_hat: torch.Tensor | None, m: torch.Tensor) -> torch.Tensor:
    """Mean-squared error of the teacher and student bit scores against m, summed."""
    if mt_hat.shape != m.shape or (ms_hat is not None and ms_hat.shape != m.shape):
        raise ShapeError(
            f"message shapes differ: teacher {tuple(mt_hat.shape)}, "
            f"student {None if ms_hat is None else tuple(ms_hat.shape)}, target {tuple(m.shape)}"
        )
    loss = F.mse_loss(mt_hat, m)
    if ms_hat is not None:
        loss = loss + F.mse_loss(ms_hat, m)
    return loss


def quality_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if x_hat.shape != x.shape:
        raise ShapeError(f"image shapes differ: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return F.mse_loss(x_hat, x)


def total_loss(l_align, l_msg, l_quality, lambda_align=0.01, lambda_msg=8.0, lambda_quality=5.0) -> LossBreakdown:
    as_t = lambda v: v if isinstance(v, torch.Tensor) else torch.tensor(float(v))
    l_align, l_msg, l_quality = as_t(l_align), as_t(l_msg), as_t(l_quality)
    total = lambda_align * l_align + lambda_msg * l_msg + lambda_quality * l_quality
    return LossBreakdown(l_align, l_msg, l_quality, total)
