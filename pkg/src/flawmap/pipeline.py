"""Stage orchestration over a working directory.

Each stage hashes its inputs (relevant config sections plus input file
contents), writes its outputs together with an effective-config snapshot,
and records a stamp. Re-running a stage with unchanged inputs is a no-op
unless forced. A lock file guards the working directory against concurrent
runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import balance, evaluator, graphseg, metrics, model as model_mod, synth, tiler, trainer
from .config import PipelineConfig, render_config
from .errors import ConfigError, DataError, ParameterError
from .ingest import ImageRecord, Manifest, ManifestEntry, build_manifest, load_image

log = logging.getLogger(__name__)


def save_gray16(arr: np.ndarray, path: Path) -> None:
    """Store a [0, 1] float matrix as 16-bit grayscale PNG (exact for 8/16-bit sources)."""
    data = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path)


def load_gray16(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 65535.0


def save_rgb8(arr: np.ndarray, path: Path) -> None:
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


class WorkDir:
    """Paths and bookkeeping under one working directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest = self.root / "manifest.tsv"
        self.tiles_dir = self.root / "tiles"
        self.tile_index = self.tiles_dir / "index.tsv"
        self.features = self.root / "features.npz"
        self.cluster_report = self.root / "clusters.tsv"
        self.selected = self.root / "selected.tsv"
        self.previews_dir = self.root / "previews"
        self.checkpoints_dir = self.root / "checkpoints"
        self.train_log = self.root / "train_log.tsv"
        self.eval_dir = self.root / "eval"
        self.stamps_dir = self.root / ".stamps"
        self.lock_path = self.root / ".lock"

    def prepare(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.stamps_dir.mkdir(exist_ok=True)

    def acquire_lock(self) -> None:
        self.prepare()
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"working directory {self.root} is locked by another run "
                f"(remove {self.lock_path} if that run is dead)"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()} {time.time():.0f}\n")

    def release_lock(self) -> None:
        try:
            self.lock_path.unlink()
        except FileNotFoundError:
            pass

    def stamp_path(self, stage: str) -> Path:
        return self.stamps_dir / f"{stage}.json"

    def is_current(self, stage: str, digest: str) -> bool:
        p = self.stamp_path(stage)
        if not p.exists():
            return False
        try:
            return json.loads(p.read_text()).get("digest") == digest
        except (OSError, json.JSONDecodeError):
            return False

    def mark(self, stage: str, digest: str) -> None:
        self.stamp_path(stage).write_text(
            json.dumps({"digest": digest, "time": time.time()}) + "\n"
        )

    def write_effective_config(self, stage: str, cfg: PipelineConfig) -> None:
        (self.root / f"config.{stage}.ini").write_text(render_config(cfg))


def _hash_file(path: Path, h) -> None:
    h.update(str(path.name).encode())
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)


def _digest(cfg: PipelineConfig, sections: list[str], files: list[Path]) -> str:
    h = hashlib.sha256()
    from dataclasses import fields

    for sec in sections:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            h.update(f"{sec}.{f.name}={getattr(obj, f.name)}\n".encode())
    for p in sorted(files):
        _hash_file(p, h)
    return h.hexdigest()


def _board_files(cfg: PipelineConfig) -> list[Path]:
    root = Path(cfg.paths.board_dir)
    if not root.is_dir():
        raise DataError(f"board directory not found: {root}")
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in
                  {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"})


def run_ingest(cfg: PipelineConfig, force: bool = False) -> Path:
    """Discover board images and write the split manifest."""
    wd = WorkDir(cfg.paths.work_dir)
    wd.prepare()
    digest = _digest(cfg, ["ingest"], _board_files(cfg))
    if not force and wd.is_current("ingest", digest) and wd.manifest.exists():
        log.info("ingest: up to date")
        return wd.manifest
    manifest = build_manifest(cfg.paths.board_dir, cfg.split_fractions(), cfg.ingest.seed, role="board")
    tex_root = Path(cfg.paths.texture_dir)
    if tex_root.is_dir():
        textures = build_manifest(tex_root, (1.0, 0.0, 0.0), cfg.ingest.seed, role="texture")
        entries = manifest.entries + [
            ManifestEntry(id=f"tex-{e.id}", path=e.path, split=e.split, role="texture")
            for e in textures.entries
        ]
        manifest = Manifest(entries)
    manifest.save(wd.manifest)
    wd.write_effective_config("ingest", cfg)
    wd.mark("ingest", digest)
    log.info("ingest: %d entries -> %s", len(manifest), wd.manifest)
    return wd.manifest


def _grid_for(cfg: PipelineConfig, record: ImageRecord) -> tiler.TileGrid:
    return tiler.plan_grid((record.height, record.width), cfg.window(), cfg.stride())


def run_tile(cfg: PipelineConfig, force: bool = False) -> Path:
    """Cut every train-split board image into window tiles on disk."""
    wd = WorkDir(cfg.paths.work_dir)
    if not wd.manifest.exists():
        raise DataError(f"manifest missing, run ingest first: {wd.manifest}")
    manifest = Manifest.load(wd.manifest)
    boards = [e for e in manifest.by_role("board") if e.split == "train"]
    digest = _digest(cfg, ["tiling"], [wd.manifest] + [Path(e.path) for e in boards])
    if not force and wd.is_current("tile", digest) and wd.tile_index.exists():
        log.info("tile: up to date")
        return wd.tile_index

    wd.tiles_dir.mkdir(parents=True, exist_ok=True)
    lines = ["source_id\trow\tcol\ty\tx\tfile"]
    total = 0
    for e in boards:
        record = load_image(e.path, e.id)
        grid = _grid_for(cfg, record)
        for t in tiler.iter_tiles(record, grid):
            name = f"{t.source_id}_{t.row}_{t.col}.png"
            save_gray16(t.pixels, wd.tiles_dir / name)
            lines.append(f"{t.source_id}\t{t.row}\t{t.col}\t{t.origin[0]}\t{t.origin[1]}\t{name}")
            total += 1
    wd.tile_index.write_text("\n".join(lines) + "\n")
    wd.write_effective_config("tile", cfg)
    wd.mark("tile", digest)
    log.info("tile: wrote %d tiles from %d images", total, len(boards))
    return wd.tile_index


def _read_tile_index(wd: WorkDir) -> list[dict]:
    if not wd.tile_index.exists():
        raise DataError(f"tile index missing, run tile first: {wd.tile_index}")
    rows = []
    lines = wd.tile_index.read_text().splitlines()
    for line in lines[1:]:
        sid, row, col, y, x, fname = line.split("\t")
        rows.append(
            {"source_id": sid, "row": int(row), "col": int(col), "y": int(y), "x": int(x), "file": fname}
        )
    return rows


def _make_extractor(cfg: PipelineConfig):
    c = cfg.cluster
    if c.extractor == "projection":
        return balance.ProjectionExtractor(dim=c.feature_dim, seed=c.extractor_seed, pool_grid=c.pool_grid)
    if c.extractor == "vgg16":
        return balance.Vgg16Extractor()
    raise ConfigError(f"unknown feature extractor {c.extractor!r}")


def run_cluster(cfg: PipelineConfig, force: bool = False) -> Path:
    """Cluster tile features and write the rebalanced tile selection."""
    wd = WorkDir(cfg.paths.work_dir)
    index = _read_tile_index(wd)
    digest = _digest(cfg, ["cluster"], [wd.tile_index])
    if not force and wd.is_current("cluster", digest) and wd.selected.exists():
        log.info("cluster: up to date")
        return wd.selected

    tiles = [
        tiler.Tile(
            source_id=r["source_id"],
            origin=(r["y"], r["x"]),
            row=r["row"],
            col=r["col"],
            pixels=load_gray16(wd.tiles_dir / r["file"]),
        )
        for r in index
    ]
    extractor = _make_extractor(cfg)
    feats = balance.extract_features(tiles, extractor)
    balance.save_features(wd.features, feats)
    c = cfg.cluster
    km = balance.kmeans_fit(
        feats, k=c.k, seed=c.seed, max_iter=c.max_iter, tol=c.tol, restarts=c.restarts
    )
    balance.save_cluster_report(wd.cluster_report, km)
    keep = balance.select_balanced(km, feats)
    lines = [f"{sid}\t{row}\t{col}" for sid, row, col in sorted(keep)]
    wd.selected.write_text("\n".join(lines) + ("\n" if lines else ""))
    wd.write_effective_config("cluster", cfg)
    wd.mark("cluster", digest)
    log.info(
        "cluster: kept %d of %d tiles (dropped clusters %s)",
        len(keep),
        len(feats),
        sorted(km.dropped),
    )
    return wd.selected


def _texture_records(cfg: PipelineConfig, manifest: Manifest) -> list[ImageRecord]:
    entries = manifest.by_role("texture")
    if entries:
        return [load_image(e.path, e.id) for e in entries]
    tex_root = Path(cfg.paths.texture_dir)
    if not tex_root.is_dir():
        raise DataError(
            f"no texture images: manifest has none and {tex_root} is not a directory"
        )
    records = [
        load_image(p, f"tex-{p.stem}")
        for p in sorted(tex_root.rglob("*"))
        if p.is_file() and p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
    ]
    if not records:
        raise DataError(f"no texture images under {tex_root}")
    return records


def _build_pool(cfg: PipelineConfig, manifest: Manifest) -> synth.TexturePool:
    records = _texture_records(cfg, manifest)
    return synth.TexturePool([r.pixels for r in records], cfg.seg_params())


def _selected_tiles(wd: WorkDir, cfg: PipelineConfig) -> list[np.ndarray]:
    if not wd.selected.exists():
        raise DataError(f"tile selection missing, run cluster first: {wd.selected}")
    keep = set()
    for line in wd.selected.read_text().splitlines():
        if line.strip():
            sid, row, col = line.split("\t")
            keep.add((sid, int(row), int(col)))
    index = _read_tile_index(wd)
    tiles = [
        load_gray16(wd.tiles_dir / r["file"])
        for r in index
        if (r["source_id"], r["row"], r["col"]) in keep
    ]
    if not tiles:
        raise DataError("tile selection is empty")
    return tiles


def run_synth_preview(cfg: PipelineConfig, count: int = 8) -> Path:
    """Write a few synthetic samples (input, target, mask) for inspection."""
    wd = WorkDir(cfg.paths.work_dir)
    manifest = Manifest.load(wd.manifest)
    tiles = _selected_tiles(wd, cfg)
    pool = _build_pool(cfg, manifest)
    aug = cfg.augment_config()
    wd.previews_dir.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        sample = synth.make_sample(
            tiles[i % len(tiles)], pool, aug, synth.derive_seed(cfg.train.seed, "preview", i)
        )
        panel = np.concatenate(
            [sample.input, sample.clean, sample.mask.astype(np.float64)], axis=1
        )
        save_gray16(panel, wd.previews_dir / f"sample_{i:03d}.png")
    log.info("synth-preview: wrote %d panels to %s", count, wd.previews_dir)
    return wd.previews_dir


def _split_train_val(tiles: list[np.ndarray], fraction: float, seed: int) -> tuple[list, list]:
    order = np.random.default_rng(synth.derive_seed(seed, "val-split")).permutation(len(tiles))
    n_val = max(1, int(round(len(tiles) * fraction))) if len(tiles) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(tiles) if i not in val_idx]
    val = [t for i, t in enumerate(tiles) if i in val_idx]
    return train, val


def run_train(cfg: PipelineConfig, force: bool = False, resume: bool = False) -> Path:
    """Train on the rebalanced tiles; writes best/last checkpoints and a log."""
    wd = WorkDir(cfg.paths.work_dir)
    manifest = Manifest.load(wd.manifest)
    digest = _digest(cfg, ["tiling", "segmentation", "augment", "model", "loss", "train"],
                     [wd.selected])
    best_path = wd.checkpoints_dir / "best.pt"
    if not force and not resume and wd.is_current("train", digest) and best_path.exists():
        log.info("train: up to date")
        return best_path

    tiles = _selected_tiles(wd, cfg)
    pool = _build_pool(cfg, manifest)
    train_tiles, val_tiles = _split_train_val(tiles, cfg.train.val_tile_fraction, cfg.train.seed)
    if not train_tiles or not val_tiles:
        raise ParameterError(
            f"cannot split {len(tiles)} tiles into train and validation parts"
        )
    aug = cfg.augment_config()
    train_stream = synth.SampleStream(
        train_tiles, pool, aug, seed=synth.derive_seed(cfg.train.seed, "train"),
        batch_size=cfg.train.batch_size,
    )
    val_stream = synth.SampleStream(
        val_tiles, pool, aug, seed=synth.derive_seed(cfg.train.seed, "val"),
        batch_size=cfg.train.batch_size, fixed=True,
    )
    net = model_mod.build(cfg.network_config(), init_seed=cfg.model.init_seed)
    _, state = trainer.train(
        net,
        train_stream,
        val_stream,
        loss_cfg=cfg.loss_config(),
        train_cfg=cfg.train_config(),
        checkpoint_dir=wd.checkpoints_dir,
        log_path=wd.train_log,
        resume=resume,
    )
    wd.write_effective_config("train", cfg)
    wd.mark("train", digest)
    log.info(
        "train: best val loss %.6f at epoch %d (stopped after epoch %d)",
        state.best_val_loss,
        state.best_epoch,
        state.epoch,
    )
    return best_path


class _IdentityModel:
    """Stand-in network: reconstruction equals input. For harness checks."""

    def __init__(self, input_size: tuple[int, int]):
        self.input_size = input_size

    def reconstruct(self, batch: np.ndarray) -> np.ndarray:
        return np.array(batch, dtype=np.float64, copy=True)


def _reconstruct(net, batch: np.ndarray) -> np.ndarray:
    if isinstance(net, _IdentityModel):
        return net.reconstruct(batch)
    return model_mod.forward(net, batch)


def run_eval(
    cfg: PipelineConfig,
    force: bool = False,
    checkpoint: str | Path | None = None,
    stub: str | None = None,
) -> Path:
    """Score held-out boards with synthetic defects; write ROC and heatmaps.

    Test-split board images are tiled in memory, each tile gets a seeded
    synthetic defect, and residuals are pooled into one pixel-level ROC
    curve. ``stub='identity'`` replaces the network with a pass-through
    model to sanity-check the harness (its AUC is 0.5 by construction).
    """
    wd = WorkDir(cfg.paths.work_dir)
    manifest = Manifest.load(wd.manifest)
    boards = [e for e in manifest.by_role("board") if e.split == "test"]
    if not boards:
        raise DataError("manifest has no test-split boards to evaluate")

    if stub == "identity":
        net = _IdentityModel(cfg.window())
    elif stub is not None:
        raise ConfigError(f"unknown stub {stub!r}")
    else:
        ckpt = Path(checkpoint) if checkpoint else wd.checkpoints_dir / "best.pt"
        if not ckpt.exists():
            raise DataError(f"checkpoint not found: {ckpt}")
        net = model_mod.load(ckpt, expected_config=cfg.network_config())
        net.eval()

    pool = _build_pool(cfg, manifest)
    aug = cfg.augment_config(anomaly_probability=cfg.eval.anomaly_probability)

    residuals: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    panels_written = 0
    wd.eval_dir.mkdir(parents=True, exist_ok=True)
    batch_tiles: list[synth.SyntheticSample] = []

    def flush(batch: list[synth.SyntheticSample]) -> None:
        nonlocal panels_written
        if not batch:
            return
        stack = np.stack([s.input for s in batch])
        recon = _reconstruct(net, stack)
        for s, rec in zip(batch, recon):
            residual = np.abs(s.input - rec)
            residuals.append(residual)
            masks.append(s.mask)
            if panels_written < cfg.eval.n_heatmaps:
                panel = evaluator.render_heatmap_overlay(
                    s.input, residual, (cfg.eval.opacity_heatmap, cfg.eval.opacity_tile)
                )
                save_rgb8(panel, wd.eval_dir / f"heatmap_{panels_written:03d}.png")
                panels_written += 1

    sample_index = 0
    for e in boards:
        record = load_image(e.path, e.id)
        grid = _grid_for(cfg, record)
        for t in tiler.iter_tiles(record, grid):
            sample = synth.make_sample(
                t.pixels, pool, aug, synth.derive_seed(cfg.eval.seed, "eval", sample_index)
            )
            sample_index += 1
            batch_tiles.append(sample)
            if len(batch_tiles) >= cfg.eval.batch_size:
                flush(batch_tiles)
                batch_tiles = []
    flush(batch_tiles)

    curve = evaluator.roc(residuals, masks)
    roc_lines = ["threshold\tfpr\ttpr"]
    roc_lines += [f"{t:.10g}\t{f:.10g}\t{p:.10g}" for t, f, p in curve.points]
    (wd.eval_dir / "roc.tsv").write_text("\n".join(roc_lines) + "\n")

    summary = {
        "auc": curve.auc,
        "tiles": sample_index,
        "positive_pixels": int(sum(m.sum() for m in masks)),
        "total_pixels": int(sum(m.size for m in masks)),
        "stub": stub,
    }
    try:
        summary["threshold_at_target_tpr"] = evaluator.select_threshold(curve, cfg.eval.target_tpr)
        summary["target_tpr"] = cfg.eval.target_tpr
    except ParameterError as exc:
        summary["threshold_at_target_tpr"] = None
        summary["threshold_note"] = str(exc)
    (wd.eval_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    wd.write_effective_config("eval", cfg)
    log.info("eval: AUC %.4f over %d tiles -> %s", curve.auc, sample_index, wd.eval_dir)
    return wd.eval_dir


def run_ssim(path_a: str | Path, path_b: str | Path, cfg: PipelineConfig) -> float:
    a = load_image(path_a)
    b = load_image(path_b)
    sc = metrics.SsimConfig(
        window=cfg.loss.ssim_window, c1=cfg.loss.ssim_c1, c2=cfg.loss.ssim_c2
    )
    return metrics.ssim_score(a.pixels, b.pixels, sc)


def run_heatmap(
    cfg: PipelineConfig,
    image_path: str | Path,
    out_path: str | Path,
    checkpoint: str | Path | None = None,
) -> Path:
    """Residual heatmap for one image; larger images are tiled and stitched."""
    wd = WorkDir(cfg.paths.work_dir)
    ckpt = Path(checkpoint) if checkpoint else wd.checkpoints_dir / "best.pt"
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    net = model_mod.load(ckpt, expected_config=cfg.network_config())
    net.eval()

    record = load_image(image_path)
    H, W = record.height, record.width
    if (H, W) == cfg.window():
        recon = model_mod.forward(net, record.pixels)
        residual = np.abs(record.pixels - recon)
    else:
        grid = _grid_for(cfg, record)
        pieces = []
        for t in tiler.iter_tiles(record, grid):
            recon = model_mod.forward(net, t.pixels)
            pieces.append((t.origin, np.abs(t.pixels - recon)))
        residual = tiler.stitch_map(pieces, (H, W), reducer="mean")
    panel = evaluator.render_heatmap_overlay(
        record.pixels, residual, (cfg.eval.opacity_heatmap, cfg.eval.opacity_tile)
    )
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rgb8(panel, out)
    log.info("heatmap: wrote %s", out)
    return out
