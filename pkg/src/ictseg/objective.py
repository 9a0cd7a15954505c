"""Supervised cross entropy, interpolation-consistency loss, ramp weight and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn

from ictseg.mixing import mix
from ictseg.model import NonFiniteLossError, ParamSet, forward

EPS = 1e-12


@dataclass(frozen=True)
class RampSpec:
    """Weight schedule of the unsupervised term.

    ``ramp_iters`` of None means 40% of the run length, resolved by the trainer.
    """

    w_max: float = 1.0
    ramp_iters: int | None = None
    shape: Literal["sigmoid_exp", "linear"] = "sigmoid_exp"

    def __post_init__(self) -> None:
        if not self.w_max >= 0:
            raise ValueError(f"ramp.w_max must be >= 0, got {self.w_max}")
        if self.ramp_iters is not None and self.ramp_iters < 1:
            raise ValueError(f"ramp.ramp_iters must be >= 1, got {self.ramp_iters}")
        if self.shape not in ("sigmoid_exp", "linear"):
            raise ValueError(f"ramp.shape must be 'sigmoid_exp' or 'linear', got {self.shape!r}")


@dataclass(frozen=True)
class LossReport:
    l_ce: float
    l_u: float
    r_t: float
    total: float
    iteration: int


def ramp(spec: RampSpec, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if spec.ramp_iters is None:
        raise ValueError("ramp_iters is unresolved")
    progress = min(t, spec.ramp_iters) / spec.ramp_iters
    if spec.shape == "linear":
        return spec.w_max * progress
    return spec.w_max * math.exp(-5.0 * (1.0 - progress) ** 2)


def cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of -log p[target] over batch and pixels.

    ``pred`` is N x K x H x W probabilities, ``target`` N x H x W class ids.
    """
    if pred.ndim != 4 or target.shape != (pred.shape[0], *pred.shape[2:]):
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} do not match")
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= pred.shape[1]):
        raise ValueError(f"target classes must lie in [0, {pred.shape[1] - 1}]")
    picked = pred.gather(1, target.unsqueeze(1))
    return -torch.log(picked.clamp_min(EPS)).mean()


def mixed_alpha(alpha, like: torch.Tensor):
    """Scalar alpha stays scalar; per-sample alphas become N x 1 x 1 x 1 tensors."""
    if np.ndim(alpha) == 0:
        return float(alpha)
    return torch.as_tensor(np.asarray(alpha), dtype=like.dtype).reshape(-1, 1, 1, 1)


def consistency_loss(
    net: nn.Module,
    student: ParamSet,
    teacher: ParamSet,
    u_i: torch.Tensor,
    u_j: torch.Tensor,
    alpha,
) -> torch.Tensor:
    """MSE between the student on mixed inputs and the mix of teacher outputs.

    Teacher outputs are computed without gradient; only the student path on the
    mixed batch is differentiable.
    """
    if u_i.shape != u_j.shape:
        raise ValueError(f"unlabelled batches differ in shape: {tuple(u_i.shape)} vs {tuple(u_j.shape)}")
    a = mixed_alpha(alpha, u_i)
    with torch.no_grad():
        y_i = forward(net, teacher, u_i)
        y_j = forward(net, teacher, u_j)
        target = mix(y_i, y_j, a)
    y_m = forward(net, student, mix(u_i, u_j, a))
    return ((y_m - target) ** 2).mean()


def total_loss(l_ce: float, l_u: float, spec: RampSpec, t: int) -> LossReport:
    for name, value in (("l_ce", l_ce), ("l_u", l_u)):
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value, t)
    r_t = ramp(spec, t)
    return LossReport(l_ce=l_ce, l_u=l_u, r_t=r_t, total=l_ce + r_t * l_u, iteration=t)
