"""Convex interpolation of inputs / soft predictions and the alpha policy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, TypeVar

import numpy as np
import torch

from ictseg.data import Raster

T = TypeVar("T", Raster, np.ndarray, torch.Tensor)


@dataclass(frozen=True)
class MixPolicy:
    mode: Literal["fixed", "beta"] = "fixed"
    alpha_fixed: float = 0.5
    beta_a: float = 1.0
    resample: Literal["per_batch", "per_sample"] = "per_batch"

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "beta"):
            raise ValueError(f"mix.mode must be 'fixed' or 'beta', got {self.mode!r}")
        if self.resample not in ("per_batch", "per_sample"):
            raise ValueError(f"mix.resample must be 'per_batch' or 'per_sample', got {self.resample!r}")
        if self.mode == "fixed" and not 0.0 <= self.alpha_fixed <= 1.0:
            raise ValueError(f"mix.alpha_fixed must lie in [0, 1], got {self.alpha_fixed}")
        if self.mode == "beta" and not self.beta_a > 0:
            raise ValueError(f"mix.beta_a must be > 0, got {self.beta_a}")


def _check_alpha(alpha) -> None:
    a = alpha.detach().cpu().numpy() if isinstance(alpha, torch.Tensor) else np.asarray(alpha)
    if not np.all((a >= 0.0) & (a <= 1.0)):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def mix(a: T, b: T, alpha) -> T:
    """Elementwise ``alpha * a + (1 - alpha) * b``.

    Works on rasters, numpy arrays and tensors. ``alpha`` is a scalar or, for
    batches, anything broadcastable against the leading batch axis. Integer
    label maps are refused; mix probabilities instead.
    """
    _check_alpha(alpha)
    if isinstance(a, Raster) or isinstance(b, Raster):
        if not (isinstance(a, Raster) and isinstance(b, Raster)):
            raise TypeError("cannot mix a Raster with a non-Raster")
        if a.kind == "label" or b.kind == "label":
            raise TypeError("integer label rasters cannot be mixed; mix probability rasters")
        if a.kind != b.kind:
            raise TypeError(f"cannot mix {a.kind} with {b.kind}")
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        values = alpha * a.values + (1.0 - alpha) * b.values
        return Raster(values, a.spacing, a.kind)
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    dtype = a.dtype
    if (isinstance(a, torch.Tensor) and not (dtype.is_floating_point)) or (
        isinstance(a, np.ndarray) and not np.issubdtype(dtype, np.floating)
    ):
        raise TypeError("integer arrays cannot be mixed")
    return alpha * a + (1.0 - alpha) * b


def draw_alpha(policy: MixPolicy, rng: np.random.Generator, batch_size: int = 1):
    """Mixing coefficient for one batch.

    Returns a float for ``per_batch`` and an array of ``batch_size`` floats for
    ``per_sample``. ``rng`` is only consumed in beta mode.
    """
    if policy.mode == "fixed":
        if policy.resample == "per_sample":
            return np.full(batch_size, policy.alpha_fixed)
        return float(policy.alpha_fixed)
    if policy.resample == "per_sample":
        return rng.beta(policy.beta_a, policy.beta_a, size=batch_size)
    return float(rng.beta(policy.beta_a, policy.beta_a))
