"""Skip-connection convolutional autoencoder.

Every encoder stage is a stride-2 convolution (kernel 4) followed by batch
norm and LeakyReLU; stages repeat until the spatial dims reach 1x1, so the
latent is a [C, 1, 1] code. The decoder mirrors the encoder with transposed
convolutions whose padding and output padding are planned so each stage
restores its twin's input size exactly. Selected early encoder activations
are concatenated onto the matching decoder inputs, letting fine surface
detail bypass the bottleneck. The final stage maps to one channel through a
sigmoid, keeping reconstructions in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import pickle
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CompatibilityError, ConfigError, DataError, ParameterError, ValidationError

# Channel ladder from the reference setup for 289x289 inputs (7 stages).
_CHANNELS_289 = (32, 64, 128, 128, 256, 256, 512)


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (289, 289)
    channels: tuple[int, ...] = _CHANNELS_289
    kernel: int = 4
    stride: int = 2
    skip_stages: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self) -> None:
        h, w = self.input_size
        if h < 2 or w < 2:
            raise ConfigError(f"input_size must be at least 2x2, got {self.input_size}")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.kernel < 2 or self.stride < 2:
            raise ConfigError(
                f"kernel must be >= 2 and stride >= 2, got kernel={self.kernel} stride={self.stride}"
            )
        n = len(self.channels)
        bad = [s for s in self.skip_stages if not 1 <= s <= n - 1]
        if bad:
            raise ConfigError(f"skip stages {bad} outside encoder range 1..{n - 1}")

    @property
    def latent_dims(self) -> tuple[int, int, int]:
        return (self.channels[-1], 1, 1)

    @property
    def encoder_stages(self) -> tuple[tuple[int, int, int], ...]:
        return tuple((c, self.kernel, self.stride) for c in self.channels)

    @property
    def skip_links(self) -> tuple[tuple[int, int], ...]:
        n = len(self.channels)
        return tuple((i, n + 1 - i) for i in sorted(self.skip_stages))

    def plan(self) -> "StagePlan":
        return plan_stages(self)


@dataclass(frozen=True)
class StagePlan:
    sizes: tuple[tuple[int, int], ...]  # spatial dims entering each stage, plus the latent
    paddings: tuple[tuple[int, int], ...]
    output_paddings: tuple[tuple[int, int], ...]  # decoder stages, latent side first


def _axis_chain(size: int, kernel: int, stride: int) -> tuple[list[int], list[int]]:
    sizes = [size]
    pads = []
    s = size
    while s > 1:
        p = 0 if s >= kernel else (kernel - s + 1) // 2
        out = (s + 2 * p - kernel) // stride + 1
        if out < 1 or out >= s:
            raise ConfigError(
                f"stage geometry does not shrink: {s} -> {out} with kernel {kernel} stride {stride}"
            )
        sizes.append(out)
        pads.append(p)
        s = out
    return sizes, pads


def plan_stages(config: NetworkConfig) -> StagePlan:
    """Derive per-stage dims and paddings; reject configs that miss 1x1."""
    h_sizes, h_pads = _axis_chain(config.input_size[0], config.kernel, config.stride)
    w_sizes, w_pads = _axis_chain(config.input_size[1], config.kernel, config.stride)
    depth = len(config.channels)
    if len(h_pads) != len(w_pads):
        raise ConfigError(
            f"input {config.input_size} needs {len(h_pads)} stages vertically but "
            f"{len(w_pads)} horizontally; use an input whose sides shrink together"
        )
    if depth != len(h_pads):
        if depth < len(h_pads):
            dims = (h_sizes[depth], w_sizes[depth])
            raise ConfigError(
                f"latent spatial dims {dims[0]}x{dims[1]} != 1x1 after stage {depth}; "
                f"input {config.input_size} needs {len(h_pads)} stages"
            )
        raise ConfigError(
            f"stage {len(h_pads) + 1} would operate on a 1x1 input; "
            f"input {config.input_size} supports only {len(h_pads)} stages"
        )

    sizes = tuple(zip(h_sizes, w_sizes))
    paddings = tuple(zip(h_pads, w_pads))
    out_pads = []
    for j in range(depth):  # decoder stage j+1 inverts encoder stage depth-j
        enc = depth - 1 - j
        base_h = (sizes[enc + 1][0] - 1) * config.stride - 2 * paddings[enc][0] + config.kernel
        base_w = (sizes[enc + 1][1] - 1) * config.stride - 2 * paddings[enc][1] + config.kernel
        op = (sizes[enc][0] - base_h, sizes[enc][1] - base_w)
        if not (0 <= op[0] < config.stride and 0 <= op[1] < config.stride):
            raise ConfigError(f"decoder stage {j + 1} cannot restore dims {sizes[enc]}")
        out_pads.append(op)
    return StagePlan(sizes=sizes, paddings=paddings, output_paddings=tuple(out_pads))


def default_config(input_size: tuple[int, int] = (289, 289)) -> NetworkConfig:
    """Pick a channel ladder matching the stage count the input size needs."""
    h_sizes, h_pads = _axis_chain(input_size[0], 4, 2)
    depth = len(h_pads)
    if depth == len(_CHANNELS_289):
        channels = _CHANNELS_289
    else:
        channels = tuple(min(32 * 2**i, 512) for i in range(depth))
    skips = tuple(i for i in (1, 2, 3) if i <= depth - 1)
    return NetworkConfig(input_size=tuple(input_size), channels=channels, skip_stages=skips)


def config_hash(config: NetworkConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class SkipAutoencoder(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        plan = config.plan()
        self.plan = plan
        n = len(config.channels)
        skip_set = set(config.skip_stages)

        encoder = []
        in_ch = 1
        for i in range(n):
            out_ch = config.channels[i]
            encoder.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, config.kernel, config.stride, plan.paddings[i]),
                    nn.BatchNorm2d(out_ch),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            in_ch = out_ch
        self.encoder = nn.ModuleList(encoder)

        decoder = []
        for j in range(1, n + 1):
            enc = n - j  # encoder stage (0-based) this decoder stage inverts
            in_ch = config.channels[enc]
            if (enc + 1) in skip_set:
                in_ch *= 2
            out_ch = 1 if enc == 0 else config.channels[enc - 1]
            conv = nn.ConvTranspose2d(
                in_ch,
                out_ch,
                config.kernel,
                config.stride,
                plan.paddings[enc],
                output_padding=plan.output_paddings[j - 1],
            )
            if enc == 0:
                decoder.append(nn.Sequential(conv, nn.Sigmoid()))
            else:
                decoder.append(nn.Sequential(conv, nn.BatchNorm2d(out_ch), nn.LeakyReLU(0.2, inplace=True)))
        self.decoder = nn.ModuleList(decoder)
        self.meta: dict = {"epoch": None, "val_loss": None}

    def forward(self, x: torch.Tensor, zero_skips: bool = False) -> torch.Tensor:
        n = len(self.encoder)
        skip_set = set(self.config.skip_stages)
        skips: dict[int, torch.Tensor] = {}
        for i, stage in enumerate(self.encoder, start=1):
            x = stage(x)
            if i in skip_set:
                skips[i] = x
        for j, stage in enumerate(self.decoder, start=1):
            i = n + 1 - j
            if i in skip_set:
                s = skips[i]
                if zero_skips:
                    s = torch.zeros_like(s)
                x = torch.cat([x, s], dim=1)
            x = stage(x)
        return x


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, a=0.2, mode="fan_in", nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build(config: NetworkConfig | None = None, init_seed: int = 42) -> SkipAutoencoder:
    """Construct and deterministically initialize the network."""
    config = config or NetworkConfig()
    config.plan()  # validate geometry before allocating anything
    torch.manual_seed(init_seed)
    model = SkipAutoencoder(config)
    model.apply(_init_weights)
    return model


def forward(model: SkipAutoencoder, batch) -> np.ndarray | torch.Tensor:
    """Inference helper: eval mode, no gradients, numpy in -> numpy out."""
    numpy_in = isinstance(batch, np.ndarray)
    x = torch.from_numpy(np.ascontiguousarray(batch)) if numpy_in else batch
    squeeze_to = x.ndim
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 3:
        x = x.unsqueeze(1)
    elif x.ndim != 4:
        raise ParameterError(f"expected 2-D, 3-D, or 4-D batch, got {tuple(x.shape)}")
    if tuple(x.shape[-2:]) != tuple(model.config.input_size):
        raise ValidationError(
            f"batch dims {tuple(x.shape[-2:])} do not match model input {model.config.input_size}"
        )
    param_dtype = next(model.parameters()).dtype
    x = x.to(param_dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            y = model(x)
    finally:
        model.train(was_training)
    if squeeze_to == 2:
        y = y[0, 0]
    elif squeeze_to == 3:
        y = y[:, 0]
    return y.numpy().astype(np.float64) if numpy_in else y


_FORMAT = 1


def save(model: SkipAutoencoder, path: str | Path, epoch: int | None = None, val_loss: float | None = None) -> None:
    payload = {
        "format": _FORMAT,
        "config": asdict(model.config),
        "config_hash": config_hash(model.config),
        "state_dict": model.state_dict(),
        "epoch": epoch if epoch is not None else model.meta.get("epoch"),
        "val_loss": val_loss if val_loss is not None else model.meta.get("val_loss"),
    }
    torch.save(payload, path)


def _config_from_payload(raw: dict) -> NetworkConfig:
    return NetworkConfig(
        input_size=tuple(raw["input_size"]),
        channels=tuple(raw["channels"]),
        kernel=int(raw["kernel"]),
        stride=int(raw["stride"]),
        skip_stages=tuple(raw["skip_stages"]),
    )


def load(path: str | Path, expected_config: NetworkConfig | None = None) -> SkipAutoencoder:
    """Restore a checkpoint; reject files for other architectures."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (
        OSError,
        RuntimeError,
        EOFError,
        ValueError,
        pickle.UnpicklingError,
        zipfile.BadZipFile,
    ) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != _FORMAT:
        raise DataError(f"not a recognized checkpoint file: {path}")
    config = _config_from_payload(payload["config"])
    stored_hash = payload.get("config_hash")
    if stored_hash != config_hash(config):
        raise DataError(f"checkpoint {path} is internally inconsistent (hash mismatch)")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        raise CompatibilityError(
            f"checkpoint {path} was trained with a different architecture: "
            f"{config} vs expected {expected_config}"
        )
    model = SkipAutoencoder(config)
    model.load_state_dict(payload["state_dict"])
    model.meta = {"epoch": payload.get("epoch"), "val_loss": payload.get("val_loss")}
    return model
