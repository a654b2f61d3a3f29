"""Residual heatmaps, pixel-pooled ROC analysis, and overlay rendering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError, ValidationError
from .model import SkipAutoencoder, forward


@dataclass(frozen=True)
class AnomalyMap:
    residual: np.ndarray
    threshold: float
    binary: np.ndarray

    def rethreshold(self, threshold: float) -> "AnomalyMap":
        return AnomalyMap(self.residual, threshold, self.residual >= threshold)


def anomaly_map(model: SkipAutoencoder, tile: np.ndarray, threshold: float) -> AnomalyMap:
    """Absolute reconstruction residual of one tile, plus its binarization."""
    tile = np.asarray(tile, dtype=np.float64)
    recon = forward(model, tile)
    residual = np.abs(tile - recon)
    return AnomalyMap(residual=residual, threshold=threshold, binary=residual >= threshold)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending, ends with +inf first entry
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def _pool(residuals: Sequence[np.ndarray], truth_masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if len(residuals) != len(truth_masks) or len(residuals) == 0:
        raise ParameterError(
            f"need matching non-empty residual/mask lists, got {len(residuals)} and {len(truth_masks)}"
        )
    scores = []
    labels = []
    for r, m in zip(residuals, truth_masks):
        r = np.asarray(r, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        if r.shape != m.shape:
            raise ValidationError(f"residual {r.shape} and mask {m.shape} shapes differ")
        scores.append(r.ravel())
        labels.append(m.ravel())
    return np.concatenate(scores), np.concatenate(labels)


def _threshold_grid(scores: np.ndarray, grid_size: int, exact_limit: int) -> np.ndarray:
    ts = np.linspace(0.0, 1.0, grid_size)
    uniq = np.unique(scores)
    if uniq.size <= exact_limit:
        ts = np.union1d(ts, uniq)
    return np.concatenate([ts, [np.inf]])[::-1].copy()  # descending, inf first


def roc(
    residuals: Sequence[np.ndarray],
    truth_masks: Sequence[np.ndarray],
    thresholds: np.ndarray | None = None,
    grid_size: int = 256,
    exact_limit: int = 4096,
) -> RocCurve:
    """Pixel-pooled ROC curve over a set of residual maps.

    Every pixel is one scored instance; mask pixels are positives. The
    threshold grid is evenly spaced plus, when the number of distinct
    residual values is small, every observed value, which makes the
    trapezoidal area exact. Points run from (0, 0) toward (1, 1) as the
    threshold descends from +inf.
    """
    scores, labels = _pool(residuals, truth_masks)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError(
            f"ROC needs both classes; got {n_pos} positive and {n_neg} negative pixels"
        )
    if thresholds is None:
        ts = _threshold_grid(scores, grid_size, exact_limit)
    else:
        ts = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]

    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    # Predicted positive means score >= threshold.
    tp = n_pos - np.searchsorted(pos, ts, side="left")
    fp = n_neg - np.searchsorted(neg, ts, side="left")
    tpr = tp / n_pos
    fpr = fp / n_neg
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=ts, fpr=fpr, tpr=tpr, auc=auc)


def roc_per_image(
    residuals: Sequence[np.ndarray],
    truth_masks: Sequence[np.ndarray],
    grid_size: int = 256,
    exact_limit: int = 4096,
) -> list[RocCurve]:
    """One ROC curve per residual map (maps without both classes are skipped)."""
    curves = []
    for r, m in zip(residuals, truth_masks):
        m = np.asarray(m, dtype=bool)
        if m.any() and not m.all():
            curves.append(roc([r], [m], grid_size=grid_size, exact_limit=exact_limit))
    return curves


def select_threshold(curve: RocCurve, target_tpr: float) -> float:
    """Largest finite threshold whose TPR meets the target."""
    if not 0.0 < target_tpr <= 1.0:
        raise ParameterError(f"target_tpr must be in (0, 1], got {target_tpr}")
    finite = np.isfinite(curve.thresholds)
    ok = finite & (curve.tpr >= target_tpr)
    if not ok.any():
        reachable = curve.tpr[finite].max() if finite.any() else 0.0
        raise ParameterError(
            f"target TPR {target_tpr} is unreachable; maximum achievable is {reachable:.4f}"
        )
    return float(curve.thresholds[ok].max())


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to an RGB ramp black -> red -> yellow -> white."""
    v = np.asarray(values, dtype=np.float64)
    r = np.clip(3.0 * v, 0.0, 1.0)
    g = np.clip(3.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * v - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_heatmap_overlay(
    tile: np.ndarray,
    residual: np.ndarray,
    opacities: tuple[float, float] = (0.75, 0.5),
) -> np.ndarray:
    """Side-by-side RGB panel: tile, residual heatmap, heatmap-over-tile.

    The residual is max-normalized before coloring. The overlay blends the
    colored heatmap at ``opacities[0]`` over the tile dimmed to
    ``opacities[1]`` of its intensity.
    """
    tile = np.asarray(tile, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if tile.shape != residual.shape:
        raise ValidationError(f"tile {tile.shape} and residual {residual.shape} shapes differ")
    a_heat, a_tile = opacities
    if not (0.0 <= a_heat <= 1.0 and 0.0 <= a_tile <= 1.0):
        raise ParameterError(f"opacities must be in [0, 1], got {opacities}")

    peak = residual.max()
    norm = residual / peak if peak > 0 else np.zeros_like(residual)
    heat = heat_colormap(norm)
    tile_rgb = np.repeat(tile[:, :, None], 3, axis=2)
    blend = a_heat * heat + (1.0 - a_heat) * (a_tile * tile_rgb)
    return np.concatenate([tile_rgb, heat, blend], axis=1)
