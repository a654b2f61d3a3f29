"""Image loading and dataset manifests.

Images are decoded to single-channel float matrices in [0, 1]. Color inputs
are reduced with the BT.601 luma combination before scaling. A manifest is a
line-delimited TSV file assigning every image an id, a split, and a role.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, ParameterError, ValidationError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPLITS = ("train", "val", "test")
ROLES = ("board", "texture")

# BT.601 luma weights, applied to 8-bit RGB before the /255 scaling.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_16BIT_MODES = {"I;16", "I;16L", "I;16B", "I;16N"}


@dataclass(frozen=True)
class ImageRecord:
    """A decoded grayscale image with intensities in [0, 1]."""

    id: str
    path: str
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def load_image(path: str | Path, image_id: str | None = None) -> ImageRecord:
    """Decode an image file to an ImageRecord.

    8-bit data is scaled by 1/255, 16-bit data by 1/65535. Palette images are
    expanded first; alpha channels are dropped.
    """
    p = Path(path)
    try:
        with Image.open(p) as img:
            img.load()
            if img.width == 0 or img.height == 0:
                raise ValidationError(f"image has zero area: {p}")
            arr = _to_gray(img, p)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {p}: {exc}") from exc
    return ImageRecord(id=image_id or p.stem, path=str(p), pixels=arr)


def _to_gray(img: Image.Image, path: Path) -> np.ndarray:
    mode = img.mode
    if mode == "P":
        img = img.convert("RGB")
        mode = img.mode
    if mode == "RGBA":
        img = img.convert("RGB")
        mode = img.mode
    if mode == "LA":
        img = img.convert("L")
        mode = img.mode

    if mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    if mode in _16BIT_MODES:
        return np.asarray(img, dtype=np.float64) / 65535.0
    if mode == "I":
        # 16-bit data in a 32-bit container (common for PNG/TIFF readers).
        return np.asarray(img, dtype=np.float64) / 65535.0
    if mode == "RGB":
        rgb = np.asarray(img, dtype=np.float64)
        return (rgb @ _LUMA) / 255.0
    raise DataError(f"unsupported image mode {mode!r}: {path}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    split: str
    role: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.id in seen:
                raise ValidationError(f"duplicate manifest id: {e.id}")
            seen.add(e.id)
            if e.split not in SPLITS:
                raise ValidationError(f"unknown split {e.split!r} for id {e.id}")
            if e.role not in ROLES:
                raise ValidationError(f"unknown role {e.role!r} for id {e.id}")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def by_role(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]

    def missing_paths(self) -> list[ManifestEntry]:
        return [e for e in self.entries if not Path(e.path).exists()]

    def save(self, path: str | Path) -> None:
        lines = [f"{e.id}\t{e.path}\t{e.split}\t{e.role}" for e in self.entries]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest {p}: {exc}") from exc
        entries = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{p}:{n}: expected 4 tab-separated fields, got {len(parts)}")
            entries.append(ManifestEntry(*parts))
        manifest = cls(entries)
        missing = manifest.missing_paths()
        for e in missing:
            log.warning("manifest entry %s points at a missing file: %s", e.id, e.path)
        return manifest


def build_manifest(
    root_dir: str | Path,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 42,
    role: str = "board",
) -> Manifest:
    """Discover images under root_dir and assign train/val/test splits.

    Discovery order is sorted so ids are stable; the split assignment is a
    seeded permutation with split sizes fixed by largest-remainder rounding.
    """
    if role not in ROLES:
        raise ParameterError(f"unknown role {role!r}")
    if len(split_fractions) != 3:
        raise ParameterError("split_fractions must have exactly 3 entries")
    if any(f < 0 for f in split_fractions):
        raise ParameterError(f"split fractions must be non-negative: {split_fractions}")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must sum to 1, got {sum(split_fractions)}")

    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    files = sorted(
        p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not files:
        log.warning("no images found under %s", root)
        return Manifest([])

    n = len(files)
    counts = _largest_remainder([f * n for f in split_fractions], n)
    tags = np.empty(n, dtype=object)
    perm = np.random.default_rng(seed).permutation(n)
    offset = 0
    for split, count in zip(SPLITS, counts):
        tags[perm[offset : offset + count]] = split
        offset += count

    ids = _unique_ids([p.stem for p in files])
    entries = [
        ManifestEntry(id=i, path=str(p), split=tags[k], role=role)
        for k, (i, p) in enumerate(zip(ids, files))
    ]
    return Manifest(entries)


def _largest_remainder(exact: list[float], total: int) -> list[int]:
    base = [math.floor(e) for e in exact]
    # Ties go to the earlier split (train before val before test).
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def _unique_ids(stems: list[str]) -> list[str]:
    counts: dict[str, int] = {}
    out = []
    for s in stems:
        k = counts.get(s, 0)
        counts[s] = k + 1
        out.append(s if k == 0 else f"{s}-{k + 1}")
    return out
