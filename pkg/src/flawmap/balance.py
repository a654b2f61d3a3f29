"""Tile features, k-means clustering, and frequency-based rebalancing.

Tiles from a uniform surface are dominated by near-identical texture; the
two most frequent clusters (flat surface and empty background) are dropped
so the training set keeps its rare structures (edges, drill holes, groove
junctions) at a usable rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, ParameterError, ValidationError
from .tiler import Tile

log = logging.getLogger(__name__)

TileRef = tuple[str, int, int]  # (source_id, row, col)


@dataclass(frozen=True)
class FeatureVector:
    tile_ref: TileRef
    values: np.ndarray


class FeatureExtractor(Protocol):
    name: str

    def extract(self, tiles: Sequence[np.ndarray]) -> np.ndarray:
        """Map a batch of [H, W] tiles to an [N, D] feature matrix."""
        ...


class ProjectionExtractor:
    """Deterministic random-projection features.

    Tiles are pooled to a small grid of block means, flattened, and projected
    with a fixed seeded Gaussian matrix. Hermetic (no downloads) and fast;
    the default choice for tests and small runs.
    """

    def __init__(self, dim: int = 64, seed: int = 0, pool_grid: int = 8):
        if dim < 1 or pool_grid < 1:
            raise ParameterError(f"dim and pool_grid must be positive, got {dim}, {pool_grid}")
        self.name = f"projection-{pool_grid}x{pool_grid}-d{dim}"
        self.dim = dim
        self.pool_grid = pool_grid
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((pool_grid * pool_grid, dim)) / np.sqrt(dim)

    def _pool(self, tile: np.ndarray) -> np.ndarray:
        g = self.pool_grid
        rows = np.array_split(np.asarray(tile, dtype=np.float64), g, axis=0)
        return np.array([[c.mean() for c in np.array_split(r, g, axis=1)] for r in rows])

    def extract(self, tiles: Sequence[np.ndarray]) -> np.ndarray:
        if not len(tiles):
            return np.empty((0, self.dim))
        pooled = np.stack([self._pool(t).ravel() for t in tiles])
        return pooled @ self._proj


class Vgg16Extractor:
    """ImageNet-pretrained VGG16 features from the first fully connected layer.

    Tiles are resized to 224x224, replicated to three channels, normalized
    with the ImageNet statistics, and passed through the convolutional stack
    plus the first classifier layer (4096-dim, post-ReLU).
    """

    def __init__(self, device: str = "cpu", batch_size: int = 16):
        self.name = "vgg16-fc1"
        self.device = device
        self.batch_size = batch_size
        try:
            import torchvision.models as tvm
        except ImportError as exc:
            raise ConfigError(
                "torchvision is required for the vgg16 extractor; install the "
                "'vgg' extra or switch to the projection extractor"
            ) from exc
        try:
            net = tvm.vgg16(weights=tvm.VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ConfigError(
                "could not load pretrained VGG16 weights (download failed?); "
                "place the weight file under TORCH_HOME or switch to the "
                "projection extractor"
            ) from exc
        import torch

        self._torch = torch
        net.eval()
        self._features = net.features.to(device)
        self._avgpool = net.avgpool.to(device)
        self._fc1 = net.classifier[0].to(device)
        self._relu = net.classifier[1].to(device)
        self._mean = torch.tensor([0.485, 0.456, 0.406], device=device).reshape(1, 3, 1, 1)
        self._std = torch.tensor([0.229, 0.224, 0.225], device=device).reshape(1, 3, 1, 1)

    def extract(self, tiles: Sequence[np.ndarray]) -> np.ndarray:
        torch = self._torch
        out = []
        with torch.no_grad():
            for start in range(0, len(tiles), self.batch_size):
                chunk = tiles[start : start + self.batch_size]
                x = torch.stack(
                    [torch.from_numpy(np.asarray(t, dtype=np.float32)) for t in chunk]
                ).unsqueeze(1)
                x = torch.nn.functional.interpolate(
                    x, size=(224, 224), mode="bilinear", align_corners=False
                )
                x = x.repeat(1, 3, 1, 1).to(self.device)
                x = (x - self._mean) / self._std
                x = self._avgpool(self._features(x)).flatten(1)
                x = self._relu(self._fc1(x))
                out.append(x.cpu().numpy().astype(np.float64))
        if not out:
            return np.empty((0, 4096))
        return np.concatenate(out)


def extract_features(
    tiles: Sequence[Tile], extractor: FeatureExtractor, batch_size: int = 64
) -> list[FeatureVector]:
    """Run the extractor over tiles, keeping (source_id, row, col) references."""
    feats: list[FeatureVector] = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        values = extractor.extract([t.pixels for t in chunk])
        for t, v in zip(chunk, values):
            feats.append(FeatureVector(tile_ref=(t.source_id, t.row, t.col), values=v))
    return feats


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray  # [k, D]
    assignments: dict[TileRef, int]
    frequencies: np.ndarray  # cluster sizes, length k
    dropped: frozenset[int]
    inertia: float
    objective_history: list[float]


def kmeans_fit(
    features: Sequence[FeatureVector],
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    restarts: int = 1,
) -> ClusterModel:
    """Lloyd's algorithm with greedy k-means++ seeding.

    Ties in the point assignment go to the lowest cluster index; a cluster
    that empties is reseeded at the point farthest from its current centroid.
    Restart r uses seed + r; the run with the lowest final objective wins.
    All arithmetic is plain numpy, so identical inputs give bit-identical
    assignments.
    """
    if not features:
        raise ParameterError("no feature vectors to cluster")
    if k < 1:
        raise ParameterError(f"k must be positive, got {k}")
    if restarts < 1:
        raise ParameterError(f"restarts must be positive, got {restarts}")
    X = np.stack([np.asarray(f.values, dtype=np.float64) for f in features])
    if not np.isfinite(X).all():
        raise ValidationError("features contain non-finite values")
    if len(X) < k:
        raise ParameterError(f"need at least k={k} points, got {len(X)}")
    refs = [f.tile_ref for f in features]
    if len(set(refs)) != len(refs):
        raise ValidationError("duplicate tile refs in feature list")

    best: tuple[np.ndarray, np.ndarray, float, list[float]] | None = None
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        centroids = _kmeanspp(X, k, rng)
        assign, centroids, history = _lloyd(X, centroids, max_iter, tol)
        inertia = history[-1]
        if best is None or inertia < best[2]:
            best = (assign, centroids, inertia, history)

    assign, centroids, inertia, history = best
    frequencies = np.bincount(assign, minlength=k)
    dropped = _top_frequency_clusters(frequencies, min(2, k))
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments={ref: int(c) for ref, c in zip(refs, assign)},
        frequencies=frequencies,
        dropped=dropped,
        inertia=float(inertia),
        objective_history=history,
    )


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(len(X))]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining points coincide with a centroid; any choice works.
            centroids[j] = X[rng.integers(len(X))]
            continue
        centroids[j] = X[rng.choice(len(X), p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    return d2


def _lloyd(
    X: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    history: list[float] = []
    assign = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centroids)
        assign = d2.argmin(axis=1)  # argmin takes the lowest index on ties
        history.append(float(d2[np.arange(len(X)), assign].sum()))
        new_centroids = centroids.copy()
        for c in range(len(centroids)):
            members = assign == c
            if members.any():
                new_centroids[c] = X[members].mean(axis=0)
        empties = [c for c in range(len(centroids)) if not (assign == c).any()]
        if empties:
            # Reseed each empty cluster at the point currently worst served.
            cost = d2[np.arange(len(X)), assign].copy()
            for c in empties:
                far = int(cost.argmax())
                new_centroids[c] = X[far]
                cost[far] = -1.0
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _sq_dists(X, centroids)
    assign = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(X)), assign].sum()))
    return assign, centroids, history


def _top_frequency_clusters(frequencies: np.ndarray, n: int) -> frozenset[int]:
    # Highest frequency first; ties resolved toward the lower cluster id.
    order = sorted(range(len(frequencies)), key=lambda c: (-int(frequencies[c]), c))
    return frozenset(order[:n])


def select_balanced(model: ClusterModel, features: Sequence[FeatureVector] | None = None) -> set[TileRef]:
    """Tile refs outside the dropped clusters.

    When ``features`` is given, its refs are checked against the model's
    assignments to catch mixed-up inputs.
    """
    if model.k < 3:
        raise ParameterError(
            f"rebalancing needs at least 3 clusters (2 are dropped), got k={model.k}"
        )
    if features is not None:
        unknown = [f.tile_ref for f in features if f.tile_ref not in model.assignments]
        if unknown:
            raise ValidationError(
                f"{len(unknown)} feature refs missing from cluster assignments "
                f"(first: {unknown[0]})"
            )
    return {ref for ref, c in model.assignments.items() if c not in model.dropped}


def save_features(path: str | Path, feats: Sequence[FeatureVector]) -> None:
    ids = np.array([f.tile_ref[0] for f in feats])
    rows = np.array([f.tile_ref[1] for f in feats], dtype=np.int64)
    cols = np.array([f.tile_ref[2] for f in feats], dtype=np.int64)
    values = np.stack([f.values for f in feats]) if feats else np.empty((0, 0))
    np.savez_compressed(path, source_ids=ids, rows=rows, cols=cols, values=values)


def load_features(path: str | Path) -> list[FeatureVector]:
    try:
        data = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise ValidationError(f"cannot read feature cache {path}: {exc}") from exc
    return [
        FeatureVector(tile_ref=(str(s), int(r), int(c)), values=v)
        for s, r, c, v in zip(data["source_ids"], data["rows"], data["cols"], data["values"])
    ]


def save_cluster_report(path: str | Path, model: ClusterModel) -> None:
    lines = ["cluster\tfrequency\tdropped"]
    for c in range(model.k):
        lines.append(f"{c}\t{int(model.frequencies[c])}\t{int(c in model.dropped)}")
    Path(path).write_text("\n".join(lines) + "\n")
