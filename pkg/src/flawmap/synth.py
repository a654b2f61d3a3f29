"""Training-sample synthesis: photometric augmentation plus texture overlay.

Each sample starts from a clean tile. The tile is flipped and photometric-
jittered, then, with configurable probability, a segment harvested from a
texture image is alpha-blended onto it at a random position. The clean
augmented tile stays the reconstruction target, so the network learns to
remove the injected structure.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import DataError, ParameterError
from .graphseg import SegParams, SegmentMap, felzenszwalb_segment, harvest_segment


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    brightness_range: tuple[float, float] = (0.98, 1.5)
    contrast_range: tuple[float, float] = (1.0, 1.2)
    alpha_range: tuple[float, float] = (0.3, 1.0)
    anomaly_probability: float = 0.5

    def __post_init__(self) -> None:
        for name in ("p_hflip", "p_vflip", "anomaly_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")
        for name in ("brightness_range", "contrast_range", "alpha_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name} is inverted: ({lo}, {hi})")
            if name != "alpha_range" and lo < 0:
                raise ParameterError(f"{name} must be non-negative, got ({lo}, {hi})")
        if self.alpha_range[0] < 0 or self.alpha_range[1] > 1:
            raise ParameterError(f"alpha_range must lie in [0, 1], got {self.alpha_range}")


@dataclass(frozen=True)
class SyntheticSample:
    clean: np.ndarray  # augmented tile, the reconstruction target
    input: np.ndarray  # clean with the overlay applied (or identical to clean)
    mask: np.ndarray  # boolean overlay footprint, tile-sized
    alpha: float


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from ints and strings, independent of hash randomization."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def augment(tile: np.ndarray, cfg: AugmentConfig, rng_seed: int) -> np.ndarray:
    """Flip and photometric-jitter one tile.

    Draw order is fixed (hflip, vflip, brightness, contrast) so a seed fully
    determines the result. Contrast pivots on the tile mean; the output is
    clipped to [0, 1] once at the end.
    """
    rng = np.random.default_rng(rng_seed)
    u_h = rng.random()
    u_v = rng.random()
    b = rng.uniform(*cfg.brightness_range)
    c = rng.uniform(*cfg.contrast_range)

    out = np.asarray(tile, dtype=np.float64)
    if u_h < cfg.p_hflip:
        out = out[:, ::-1]
    if u_v < cfg.p_vflip:
        out = out[::-1, :]
    out = out.copy()
    if b != 1.0:
        out = out * b
    if c != 1.0:
        pivot = out.mean()
        out = pivot + c * (out - pivot)
    return np.clip(out, 0.0, 1.0)


def overlay(
    clean: np.ndarray,
    patch: np.ndarray,
    mask: np.ndarray,
    position: tuple[int, int],
    alpha: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-blend a masked patch onto a tile.

    Returns the blended tile and the tile-sized boolean footprint. Pixels
    outside the mask are carried over from ``clean`` unchanged.
    """
    clean = np.asarray(clean, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if patch.shape != mask.shape:
        raise ParameterError(f"patch {patch.shape} and mask {mask.shape} shapes differ")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    H, W = clean.shape
    mh, mw = mask.shape
    y, x = position
    if y < 0 or x < 0 or y + mh > H or x + mw > W:
        raise ParameterError(
            f"patch of dims {mask.shape} at position {position} exceeds tile {clean.shape}"
        )
    out = clean.copy()
    region = out[y : y + mh, x : x + mw]
    blended = (1.0 - alpha) * region + alpha * patch
    region[mask] = blended[mask]
    full_mask = np.zeros((H, W), dtype=bool)
    full_mask[y : y + mh, x : x + mw] = mask
    return out, full_mask


class TexturePool:
    """Texture sources with their segmentations, computed once up front."""

    def __init__(self, sources: Sequence[np.ndarray], params: SegParams | None = None):
        if not len(sources):
            raise ParameterError("texture pool needs at least one source image")
        self.params = params or SegParams()
        self.items: list[tuple[SegmentMap, np.ndarray]] = []
        for s in sources:
            arr = np.asarray(s, dtype=np.float64)
            self.items.append((felzenszwalb_segment(arr, self.params), arr))

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> tuple[SegmentMap, np.ndarray]:
        return self.items[i]


def _center_crop(arr: np.ndarray, max_h: int, max_w: int) -> np.ndarray:
    h, w = arr.shape
    y = max(0, (h - max_h) // 2)
    x = max(0, (w - max_w) // 2)
    return arr[y : y + min(h, max_h), x : x + min(w, max_w)]


def make_sample(
    clean_tile: np.ndarray,
    texture_pool: TexturePool,
    cfg: AugmentConfig,
    rng_seed: int,
) -> SyntheticSample:
    """Build one training sample from a clean tile.

    The anomaly branch harvests a random segment from the pool, center-crops
    it to fit the tile if needed, and blends it at a random position. Alpha
    is drawn on both branches so the clean branch consumes the same stream.
    """
    if len(texture_pool) == 0:
        raise ParameterError("texture pool is empty")
    tile = np.asarray(clean_tile, dtype=np.float64)
    H, W = tile.shape
    rng = np.random.default_rng(rng_seed)

    aug_seed = int(rng.integers(2**63))
    u = rng.random()
    alpha = float(rng.uniform(*cfg.alpha_range))
    clean = augment(tile, cfg, aug_seed)

    if u >= cfg.anomaly_probability:
        return SyntheticSample(clean=clean, input=clean.copy(), mask=np.zeros((H, W), dtype=bool), alpha=alpha)

    for _ in range(16):
        seg, src = texture_pool[int(rng.integers(len(texture_pool)))]
        mask, patch = harvest_segment(seg, src, int(rng.integers(2**63)))
        mask = _center_crop(mask, H, W)
        patch = _center_crop(patch, H, W)
        if mask.any():
            mh, mw = mask.shape
            y = int(rng.integers(H - mh + 1))
            x = int(rng.integers(W - mw + 1))
            blended, full_mask = overlay(clean, patch, mask, (y, x), alpha)
            return SyntheticSample(clean=clean, input=blended, mask=full_mask, alpha=alpha)
    # A harvested segment only loses all pixels to the center crop for
    # pathological ring shapes; 16 independent draws failing means the pool
    # itself is unusable.
    raise DataError("could not harvest a non-empty segment that fits the tile")


class SampleStream:
    """Reproducible batched sample source for the training loop.

    Per-sample seeds derive from (seed, epoch, tile index), so results do not
    depend on batch size or iteration order. A ``fixed`` stream ignores the
    epoch and always yields the same samples (validation use).
    """

    def __init__(
        self,
        tiles: Sequence[np.ndarray],
        pool: TexturePool,
        cfg: AugmentConfig,
        seed: int,
        batch_size: int = 32,
        fixed: bool = False,
        shuffle: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        if not len(tiles):
            raise ParameterError("sample stream needs at least one tile")
        if batch_size < 1:
            raise ParameterError(f"batch_size must be positive, got {batch_size}")
        self.tiles = [np.asarray(t, dtype=np.float64) for t in tiles]
        self.pool = pool
        self.cfg = cfg
        self.seed = seed
        self.batch_size = batch_size
        self.fixed = fixed
        self.shuffle = shuffle and not fixed
        self.dtype = dtype

    def __len__(self) -> int:
        return len(self.tiles)

    def batches(self, epoch: int) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        e = 0 if self.fixed else int(epoch)
        order = np.arange(len(self.tiles))
        if self.shuffle:
            np.random.default_rng(derive_seed(self.seed, "order", e)).shuffle(order)
        for start in range(0, len(order), self.batch_size):
            chunk = order[start : start + self.batch_size]
            samples = [
                make_sample(self.tiles[i], self.pool, self.cfg, derive_seed(self.seed, e, int(i)))
                for i in chunk
            ]
            inputs = torch.stack(
                [torch.from_numpy(s.input).to(self.dtype) for s in samples]
            ).unsqueeze(1)
            targets = torch.stack(
                [torch.from_numpy(s.clean).to(self.dtype) for s in samples]
            ).unsqueeze(1)
            masks = torch.stack([torch.from_numpy(s.mask) for s in samples]).unsqueeze(1)
            yield inputs, targets, masks
