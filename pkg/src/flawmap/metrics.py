"""Structural similarity between single-channel images.

For each local window the score compares means, variances, and covariance:

    ssim = (2*mu_a*mu_b + c1) * (2*sigma_ab + c2)
           -----------------------------------------------
           (mu_a^2 + mu_b^2 + c1) * (sigma_a^2 + sigma_b^2 + c2)

with the stabilizers c1 and c2 used directly as configured. The reported
score is the mean over all window positions (valid positions only, no
padding). Windows are uniform by default; a normalized Gaussian weighting is
available as an option.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ValidationError


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    c1: float = 0.01
    c2: float = 0.03
    weighting: str = "uniform"  # "uniform" or "gaussian"
    gaussian_sigma: float = 1.5

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ParameterError(f"window must be odd and >= 3, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ParameterError(f"stabilizers must be positive, got c1={self.c1} c2={self.c2}")
        if self.weighting not in ("uniform", "gaussian"):
            raise ParameterError(f"unknown weighting {self.weighting!r}")
        if self.gaussian_sigma <= 0:
            raise ParameterError(f"gaussian_sigma must be positive, got {self.gaussian_sigma}")


def window_kernel(
    window: int,
    weighting: str = "uniform",
    gaussian_sigma: float = 1.5,
    dtype: torch.dtype = torch.float64,
    device: torch.device | str = "cpu",
) -> torch.Tensor:
    """Normalized [1, 1, w, w] window weights for the local statistics."""
    if weighting == "uniform":
        k = torch.full((window, window), 1.0 / (window * window), dtype=dtype, device=device)
    else:
        half = (window - 1) / 2.0
        x = torch.arange(window, dtype=dtype, device=device) - half
        g = torch.exp(-(x * x) / (2.0 * gaussian_sigma * gaussian_sigma))
        k = torch.outer(g, g)
        k = k / k.sum()
    return k.reshape(1, 1, window, window)


def ssim_map_tensor(
    a: torch.Tensor, b: torch.Tensor, kernel: torch.Tensor, c1: float, c2: float
) -> torch.Tensor:
    """Per-window similarity for [B, 1, H, W] batches. Differentiable."""
    mu_a = F.conv2d(a, kernel)
    mu_b = F.conv2d(b, kernel)
    # Variances are left unclamped: for a == b the numerator and denominator
    # are then built from bit-identical expressions and the map is exactly 1.
    var_a = F.conv2d(a * a, kernel) - mu_a * mu_a
    var_b = F.conv2d(b * b, kernel) - mu_b * mu_b
    cov = F.conv2d(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_score(a: np.ndarray, b: np.ndarray, cfg: SsimConfig | None = None) -> float:
    """Mean structural similarity between two grayscale images in [0, 1]."""
    cfg = cfg or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ParameterError(f"expected 2-D images, got shapes {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if cfg.window > min(a.shape):
        raise ParameterError(
            f"window {cfg.window} exceeds image dims {a.shape}"
        )
    for name, arr in (("first", a), ("second", b)):
        if not np.isfinite(arr).all():
            raise ValidationError(f"{name} image contains non-finite values")
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise ValidationError(f"{name} image values outside [0, 1]")

    ta = torch.from_numpy(a).reshape(1, 1, *a.shape)
    tb = torch.from_numpy(b).reshape(1, 1, *b.shape)
    kernel = window_kernel(cfg.window, cfg.weighting, cfg.gaussian_sigma, dtype=ta.dtype)
    smap = ssim_map_tensor(ta, tb, kernel, cfg.c1, cfg.c2)
    return float(smap.mean())
