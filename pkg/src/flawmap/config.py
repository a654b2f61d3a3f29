"""Layered run configuration.

Values resolve in order: built-in defaults, then an INI file, then
command-line overrides of the form ``section.key=value``. The canonical
rendering is a comment-free INI document with a fixed section and key order,
so rendering and re-parsing a config is a fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .graphseg import SegParams
from .loss import LossConfig
from .model import NetworkConfig, default_config
from .synth import AugmentConfig
from .trainer import EarlyStopConfig, PlateauConfig, TrainConfig


@dataclass
class PathsSection:
    board_dir: str = "boards"
    texture_dir: str = "textures"
    work_dir: str = "work"


@dataclass
class IngestSection:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 42


@dataclass
class TilingSection:
    window_h: int = 289
    window_w: int = 289
    stride_y: int = 97
    stride_x: int = 67


@dataclass
class ClusterSection:
    k: int = 7
    extractor: str = "projection"  # "projection" or "vgg16"
    feature_dim: int = 64
    pool_grid: int = 8
    extractor_seed: int = 0
    seed: int = 42
    max_iter: int = 300
    tol: float = 1e-6
    restarts: int = 5


@dataclass
class SegmentationSection:
    scale: float = 2.0
    sigma: float = 5.0
    min_size: int = 100


@dataclass
class AugmentSection:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    brightness_lo: float = 0.98
    brightness_hi: float = 1.5
    contrast_lo: float = 1.0
    contrast_hi: float = 1.2
    alpha_lo: float = 0.3
    alpha_hi: float = 1.0
    anomaly_probability: float = 0.5


@dataclass
class ModelSection:
    channels: str = "auto"  # comma-separated list, or "auto" to fit the window
    skip_stages: str = "1,2,3"
    init_seed: int = 42


@dataclass
class LossSection:
    lambda_mse: float = 1.0
    lambda_ssim: float = 1.0
    lambda_overlay: float = 1.0
    ssim_c1: float = 0.01
    ssim_c2: float = 0.03
    ssim_window: int = 11


@dataclass
class TrainSection:
    seed: int = 42
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = False
    batch_size: int = 32
    max_epochs: int = 500
    strict: bool = False
    val_tile_fraction: float = 0.1
    plateau_factor: float = 0.7
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    plateau_eps: float = 1e-8
    plateau_cooldown: int = 0
    plateau_min_lr: float = 0.0
    early_patience: int = 40
    early_min_delta: float = 1e-6


@dataclass
class EvalSection:
    seed: int = 42
    target_tpr: float = 0.4
    anomaly_probability: float = 1.0
    opacity_heatmap: float = 0.75
    opacity_tile: float = 0.5
    n_heatmaps: int = 8
    batch_size: int = 32


_SECTION_ORDER: list[tuple[str, type]] = [
    ("paths", PathsSection),
    ("ingest", IngestSection),
    ("tiling", TilingSection),
    ("cluster", ClusterSection),
    ("segmentation", SegmentationSection),
    ("augment", AugmentSection),
    ("model", ModelSection),
    ("loss", LossSection),
    ("train", TrainSection),
    ("eval", EvalSection),
]

_SEED_KEYS = [
    "ingest.seed",
    "cluster.seed",
    "cluster.extractor_seed",
    "model.init_seed",
    "train.seed",
    "eval.seed",
]


@dataclass
class PipelineConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    tiling: TilingSection = field(default_factory=TilingSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # Derived domain objects -------------------------------------------------

    def window(self) -> tuple[int, int]:
        return (self.tiling.window_h, self.tiling.window_w)

    def stride(self) -> tuple[int, int]:
        return (self.tiling.stride_y, self.tiling.stride_x)

    def split_fractions(self) -> tuple[float, float, float]:
        return (self.ingest.train_fraction, self.ingest.val_fraction, self.ingest.test_fraction)

    def seg_params(self) -> SegParams:
        s = self.segmentation
        return SegParams(scale=s.scale, sigma=s.sigma, min_size=s.min_size)

    def augment_config(self, anomaly_probability: float | None = None) -> AugmentConfig:
        a = self.augment
        return AugmentConfig(
            p_hflip=a.p_hflip,
            p_vflip=a.p_vflip,
            brightness_range=(a.brightness_lo, a.brightness_hi),
            contrast_range=(a.contrast_lo, a.contrast_hi),
            alpha_range=(a.alpha_lo, a.alpha_hi),
            anomaly_probability=(
                a.anomaly_probability if anomaly_probability is None else anomaly_probability
            ),
        )

    def network_config(self) -> NetworkConfig:
        m = self.model
        if m.channels.strip() == "auto":
            base = default_config(self.window())
            channels = base.channels
        else:
            channels = _parse_int_tuple(m.channels, "model.channels")
        skips = _parse_int_tuple(m.skip_stages, "model.skip_stages")
        return NetworkConfig(input_size=self.window(), channels=channels, skip_stages=skips)

    def loss_config(self) -> LossConfig:
        l = self.loss
        return LossConfig(
            lambda_mse=l.lambda_mse,
            lambda_ssim=l.lambda_ssim,
            lambda_overlay=l.lambda_overlay,
            ssim_c1=l.ssim_c1,
            ssim_c2=l.ssim_c2,
            ssim_window=l.ssim_window,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            seed=t.seed,
            lr=t.lr,
            betas=(t.beta1, t.beta2),
            eps=t.eps,
            amsgrad=t.amsgrad,
            batch_size=t.batch_size,
            max_epochs=t.max_epochs,
            strict=t.strict,
            plateau=PlateauConfig(
                factor=t.plateau_factor,
                patience=t.plateau_patience,
                threshold=t.plateau_threshold,
                eps=t.plateau_eps,
                cooldown=t.plateau_cooldown,
                min_lr=t.plateau_min_lr,
            ),
            early_stop=EarlyStopConfig(patience=t.early_patience, min_delta=t.early_min_delta),
        )


def _parse_int_tuple(raw: str, where: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: expected comma-separated integers, got {raw!r}") from exc


def _coerce(raw: str, target_type: type, where: str):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: expected {target_type.__name__}, got {raw!r}") from exc
    return raw


def default_pipeline_config() -> PipelineConfig:
    return PipelineConfig()


def parse_config_text(text: str, source: str = "<string>") -> dict[str, dict[str, str]]:
    """Minimal INI reader: sections, key=value lines, # or ; comments."""
    out: dict[str, dict[str, str]] = {}
    section: str | None = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"{source}:{n}: key outside any [section]")
        key, _, value = stripped.partition("=")
        out[section][key.strip()] = value.strip()
    return out


def apply_values(cfg: PipelineConfig, values: dict[str, dict[str, str]], source: str) -> None:
    sections = dict(_SECTION_ORDER)
    for sec_name, pairs in values.items():
        if sec_name not in sections:
            raise ConfigError(f"{source}: unknown section [{sec_name}]")
        section_obj = getattr(cfg, sec_name)
        known = {f.name for f in fields(section_obj)}
        for key, raw in pairs.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {sec_name}.{key}")
            current = getattr(section_obj, key)
            setattr(section_obj, key, _coerce(raw, type(current), f"{source}: {sec_name}.{key}"))


def parse_overrides(pairs: list[str]) -> dict[str, dict[str, str]]:
    """Turn ['train.lr=1e-3', ...] into nested section/key dicts."""
    out: dict[str, dict[str, str]] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        dotted, _, value = pair.partition("=")
        if "." not in dotted:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        sec, _, key = dotted.strip().partition(".")
        out.setdefault(sec, {})[key.strip()] = value.strip()
    return out


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, dict[str, str]] | None = None,
) -> PipelineConfig:
    """Defaults, optionally updated from a file, then from overrides."""
    cfg = default_pipeline_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        apply_values(cfg, parse_config_text(p.read_text(), str(p)), str(p))
    if overrides:
        apply_values(cfg, overrides, "command line")
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: PipelineConfig) -> str:
    """Canonical INI form: fixed section and key order, no comments."""
    lines = []
    for sec_name, _ in _SECTION_ORDER:
        lines.append(f"[{sec_name}]")
        section_obj = getattr(cfg, sec_name)
        for f in fields(section_obj):
            lines.append(f"{f.name} = {_format_value(getattr(section_obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def seed_overrides(seed: int) -> dict[str, dict[str, str]]:
    """Overrides pinning every stage seed to one value (the --seed flag)."""
    out: dict[str, dict[str, str]] = {}
    for dotted in _SEED_KEYS:
        sec, _, key = dotted.partition(".")
        out.setdefault(sec, {})[key] = str(seed)
    return out


def describe_sources(
    file_values: dict[str, dict[str, str]] | None,
    override_values: dict[str, dict[str, str]] | None,
) -> list[str]:
    """One line per non-default key, naming where its value came from."""
    notes = []
    for label, values in (("file", file_values), ("override", override_values)):
        if not values:
            continue
        for sec in sorted(values):
            for key in sorted(values[sec]):
                notes.append(f"{sec}.{key} = {values[sec][key]}  ({label})")
    return notes
