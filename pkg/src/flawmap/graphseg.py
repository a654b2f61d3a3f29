"""Graph-based greedy segmentation used to harvest texture patches.

The segmenter builds an 8-connected grid graph over a grayscale image with
edge weights |I(p) - I(q)|, optionally after Gaussian smoothing, and sorts
the edges ascending. An edge (p, q) of weight w merges the components C1 and
C2 of its endpoints when

    w <= min(Int(C1) + scale / |C1|, Int(C2) + scale / |C2|)

where Int(C) is the weight of the edge that last assembled C. Larger
``scale`` therefore tolerates more internal contrast and produces coarser
partitions. A final pass over the same edge order absorbs every component
smaller than ``min_size`` into its lowest-weight neighbor.

Determinism: edge order is a lexicographic sort on (weight, source index,
target index) and all merges follow that order, so identical inputs yield
identical label maps on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ParameterError, ValidationError


@dataclass(frozen=True)
class SegParams:
    scale: float = 2.0
    sigma: float = 5.0
    min_size: int = 100

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be non-negative, got {self.sigma}")
        if self.min_size < 1:
            raise ParameterError(f"min_size must be at least 1, got {self.min_size}")


@dataclass(frozen=True)
class SegmentMap:
    labels: np.ndarray  # int32 label per pixel, ids contiguous from 0
    segment_count: int
    sizes: np.ndarray  # pixel count per label id


class _UnionFind:
    """Union by size with path halving; tracks component internal weight."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)
        self.internal = np.zeros(n, dtype=np.float64)

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a: int, b: int, weight: float) -> None:
        # Tie on size goes to the lower index so merges stay deterministic.
        if self.size[a] < self.size[b] or (self.size[a] == self.size[b] and b < a):
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight


def _grid_edges(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-connectivity edges as (source, target, weight) arrays, source < target."""
    H, W = img.shape
    idx = np.arange(H * W, dtype=np.int64).reshape(H, W)
    flat = img.ravel()
    pairs = []
    if W > 1:
        pairs.append((idx[:, :-1], idx[:, 1:]))
    if H > 1:
        pairs.append((idx[:-1, :], idx[1:, :]))
    if H > 1 and W > 1:
        pairs.append((idx[:-1, :-1], idx[1:, 1:]))
        pairs.append((idx[:-1, 1:], idx[1:, :-1]))
    if not pairs:
        return (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.float64),
        )
    src = np.concatenate([a.ravel() for a, _ in pairs])
    tgt = np.concatenate([b.ravel() for _, b in pairs])
    # The down-left diagonal produces source > target pairs; normalize so the
    # tie-break key is orientation independent.
    lo = np.minimum(src, tgt)
    hi = np.maximum(src, tgt)
    w = np.abs(flat[lo] - flat[hi])
    return lo, hi, w


def felzenszwalb_segment(image: np.ndarray, params: SegParams | None = None) -> SegmentMap:
    """Partition a grayscale image into contiguously labeled segments."""
    params = params or SegParams()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ParameterError(f"expected a non-empty 2-D image, got shape {img.shape}")

    if params.sigma > 0:
        img = gaussian_filter(img, sigma=params.sigma, mode="reflect", truncate=4.0)

    src, tgt, weight = _grid_edges(img)
    order = np.lexsort((tgt, src, weight))
    src, tgt, weight = src[order], tgt[order], weight[order]

    n = img.size
    uf = _UnionFind(n)
    scale = params.scale
    for k in range(len(weight)):
        a = uf.find(int(src[k]))
        b = uf.find(int(tgt[k]))
        if a == b:
            continue
        w = float(weight[k])
        if w <= uf.internal[a] + scale / uf.size[a] and w <= uf.internal[b] + scale / uf.size[b]:
            uf.union(a, b, w)

    # Small-component cleanup, same edge order.
    min_size = params.min_size
    if min_size > 1:
        for k in range(len(weight)):
            a = uf.find(int(src[k]))
            b = uf.find(int(tgt[k]))
            if a != b and (uf.size[a] < min_size or uf.size[b] < min_size):
                uf.union(a, b, float(weight[k]))

    roots = _resolve_roots(uf.parent)
    labels = _relabel_first_seen(roots).reshape(img.shape)
    sizes = np.bincount(labels.ravel())
    return SegmentMap(labels=labels, segment_count=len(sizes), sizes=sizes)


def _resolve_roots(parent: np.ndarray) -> np.ndarray:
    roots = parent.copy()
    while True:
        nxt = roots[roots]
        if np.array_equal(nxt, roots):
            return roots
        roots = nxt


def _relabel_first_seen(roots: np.ndarray) -> np.ndarray:
    """Map root ids to 0..n-1 in order of first row-major appearance."""
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse].astype(np.int32)


def harvest_segment(
    seg: SegmentMap, source: np.ndarray, rng_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Pick one segment at random; return its bounding-box mask and pixels.

    The mask is boolean, cropped to the segment's bounding box; the patch is
    the matching crop of ``source``.
    """
    source = np.asarray(source, dtype=np.float64)
    if seg.labels.shape != source.shape:
        raise ValidationError(
            f"label map {seg.labels.shape} does not match source {source.shape}"
        )
    rng = np.random.default_rng(rng_seed)
    sid = int(rng.integers(seg.segment_count))
    ys, xs = np.nonzero(seg.labels == sid)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    box = (slice(y0, y1 + 1), slice(x0, x1 + 1))
    mask = seg.labels[box] == sid
    return mask, source[box].copy()


def segment_boundaries(labels: np.ndarray) -> np.ndarray:
    """Boolean map marking pixels whose right or down neighbor differs."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return b
