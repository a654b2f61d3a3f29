"""Composite reconstruction objective.

total = lambda_mse * mse + lambda_ssim * (1 - mean_ssim) + lambda_overlay * overlay_mse

where overlay_mse averages the squared error over overlay pixels only (zero
when the batch carries no overlay). All three terms are computed from the
reconstruction against the clean target, so the network is penalized for
reproducing injected defects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError, ValidationError
from .metrics import ssim_map_tensor, window_kernel


@dataclass(frozen=True)
class LossConfig:
    lambda_mse: float = 1.0
    lambda_ssim: float = 1.0
    lambda_overlay: float = 1.0
    ssim_c1: float = 0.01
    ssim_c2: float = 0.03
    ssim_window: int = 11

    def __post_init__(self) -> None:
        for name in ("lambda_mse", "lambda_ssim", "lambda_overlay"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ParameterError("ssim stabilizers must be positive")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ParameterError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values. Tensors (differentiable) for tensor inputs, floats otherwise."""

    mse: torch.Tensor | float
    ssim_term: torch.Tensor | float
    overlay_mse: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(v) for v in (self.mse, self.ssim_term, self.overlay_mse, self.total)))


def _as_batch(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(x))
        if t.dtype not in (torch.float32, torch.float64, torch.bool):
            t = t.to(torch.float64)
    elif isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(x)
    if dtype is not None and t.dtype != dtype:
        t = t.to(dtype)
    if t.ndim == 2:
        t = t.reshape(1, 1, *t.shape)
    elif t.ndim == 3:
        t = t.unsqueeze(1)
    elif t.ndim != 4:
        raise ParameterError(f"expected 2-D, 3-D, or 4-D input, got {tuple(t.shape)}")
    return t


def ssim_map(a, b, cfg: LossConfig | None = None):
    """Window-similarity map between two images or batches.

    Accepts numpy arrays or tensors; returns the same kind. Uniform window
    weighting, as used by the training objective.
    """
    cfg = cfg or LossConfig()
    numpy_in = isinstance(a, np.ndarray)
    ta = _as_batch(a)
    tb = _as_batch(b, dtype=ta.dtype)
    if ta.shape != tb.shape:
        raise ValidationError(f"shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if cfg.ssim_window > min(ta.shape[-2:]):
        raise ParameterError(
            f"ssim_window {cfg.ssim_window} exceeds input dims {tuple(ta.shape[-2:])}"
        )
    kernel = window_kernel(cfg.ssim_window, dtype=ta.dtype, device=ta.device)
    smap = ssim_map_tensor(ta, tb, kernel, cfg.ssim_c1, cfg.ssim_c2)
    if numpy_in:
        out = smap.detach().cpu().numpy()
        return out[0, 0] if np.asarray(a).ndim == 2 else out[:, 0]
    return smap


def compute_loss(target, reconstruction, masks, cfg: LossConfig | None = None) -> LossBreakdown:
    """Evaluate the objective for a batch.

    ``masks`` marks overlay pixels (boolean, same spatial layout). Numpy
    inputs produce a float breakdown; tensor inputs keep the graph so
    ``total`` can be backpropagated.
    """
    cfg = cfg or LossConfig()
    numpy_in = isinstance(target, np.ndarray) and isinstance(reconstruction, np.ndarray)
    t = _as_batch(target)
    r = _as_batch(reconstruction, dtype=t.dtype)
    m = _as_batch(masks).to(torch.bool)
    if t.shape != r.shape or t.shape != m.shape:
        raise ValidationError(
            f"shapes differ: target {tuple(t.shape)}, reconstruction {tuple(r.shape)}, "
            f"masks {tuple(m.shape)}"
        )
    for name, x in (("target", t), ("reconstruction", r)):
        if torch.isnan(x).any():
            raise ValidationError(f"{name} contains NaN")
    if cfg.ssim_window > min(t.shape[-2:]):
        raise ParameterError(
            f"ssim_window {cfg.ssim_window} exceeds input dims {tuple(t.shape[-2:])}"
        )

    diff2 = (t - r) ** 2
    mse = diff2.mean()

    kernel = window_kernel(cfg.ssim_window, dtype=t.dtype, device=t.device)
    smap = ssim_map_tensor(t, r, kernel, cfg.ssim_c1, cfg.ssim_c2)
    # Mean over windows per image first, then over the batch.
    ssim_term = 1.0 - smap.mean(dim=(1, 2, 3)).mean()

    overlay_count = m.sum()
    if int(overlay_count) > 0:
        overlay_mse = (diff2 * m).sum() / overlay_count.to(diff2.dtype)
    else:
        overlay_mse = torch.zeros((), dtype=t.dtype, device=t.device)

    total = cfg.lambda_mse * mse + cfg.lambda_ssim * ssim_term + cfg.lambda_overlay * overlay_mse
    breakdown = LossBreakdown(mse=mse, ssim_term=ssim_term, overlay_mse=overlay_mse, total=total)
    return breakdown.as_floats() if numpy_in else breakdown
