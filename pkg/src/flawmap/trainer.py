"""Seeded optimization loop: Adam, plateau LR decay, early stopping.

The learning rate drops by a fixed factor once the validation loss has gone
``patience`` consecutive epochs without a relative improvement; training
stops once ``patience`` epochs pass without an absolute improvement over the
best seen. Best weights (not last) are returned and checkpointed.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ParameterError, TrainingError
from .loss import LossBreakdown, LossConfig, compute_loss
from .model import SkipAutoencoder, config_hash, save as save_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.7
    patience: int = 3
    threshold: float = 1e-4
    eps: float = 1e-8
    cooldown: int = 0
    min_lr: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.factor < 1.0:
            raise ParameterError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ParameterError(f"patience must be at least 1, got {self.patience}")
        if self.threshold < 0 or self.eps < 0 or self.cooldown < 0 or self.min_lr < 0:
            raise ParameterError("plateau thresholds must be non-negative")


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 40
    min_delta: float = 1e-6

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ParameterError(f"patience must be at least 1, got {self.patience}")
        if self.min_delta < 0:
            raise ParameterError(f"min_delta must be non-negative, got {self.min_delta}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 42
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    amsgrad: bool = False
    batch_size: int = 32
    max_epochs: int = 500
    strict: bool = False
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1:
            raise ParameterError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be at least 1, got {self.batch_size}")


class PlateauScheduler:
    """Multiplicative LR decay on stalled validation loss (min mode).

    An epoch counts as improved when the value drops below
    best * (1 - threshold). After ``patience`` consecutive unimproved epochs
    the rate is multiplied by ``factor`` (updates smaller than ``eps`` are
    skipped) and the counter resets.
    """

    def __init__(self, lr: float, cfg: PlateauConfig | None = None):
        self.cfg = cfg or PlateauConfig()
        self.lr = lr
        self.best: float | None = None
        self.num_bad = 0
        self.cooldown_left = 0

    def step(self, value: float) -> float:
        c = self.cfg
        if self.best is None or value < self.best * (1.0 - c.threshold):
            self.best = value
            self.num_bad = 0
        elif self.cooldown_left > 0:
            self.cooldown_left -= 1
        else:
            self.num_bad += 1
            if self.num_bad >= c.patience:
                new_lr = max(self.lr * c.factor, c.min_lr)
                if self.lr - new_lr > c.eps:
                    self.lr = new_lr
                self.num_bad = 0
                self.cooldown_left = c.cooldown
        return self.lr

    def state(self) -> dict:
        return {
            "lr": self.lr,
            "best": self.best,
            "num_bad": self.num_bad,
            "cooldown_left": self.cooldown_left,
        }

    def load_state(self, s: dict) -> None:
        self.lr = s["lr"]
        self.best = s["best"]
        self.num_bad = s["num_bad"]
        self.cooldown_left = s["cooldown_left"]


class EarlyStopper:
    """Halt once the loss stops improving by more than min_delta."""

    def __init__(self, cfg: EarlyStopConfig | None = None):
        self.cfg = cfg or EarlyStopConfig()
        self.best: float | None = None
        self.epochs_since_best = 0

    def step(self, value: float) -> bool:
        if self.best is None or (self.best - value) > self.cfg.min_delta:
            self.best = value
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.cfg.patience

    def state(self) -> dict:
        return {"best": self.best, "epochs_since_best": self.epochs_since_best}

    def load_state(self, s: dict) -> None:
        self.best = s["best"]
        self.epochs_since_best = s["epochs_since_best"]


@dataclass
class TrainState:
    epoch: int = 0
    current_lr: float = 0.0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    epochs_since_plateau_improve: int = 0
    history: list[dict] = field(default_factory=list)  # per-epoch train/val breakdowns


def _accumulate(sums: dict, lb: LossBreakdown, n: int) -> None:
    sums["n"] += n
    for k in ("mse", "ssim_term", "overlay_mse", "total"):
        v = getattr(lb, k)
        if torch.is_tensor(v):
            v = v.detach()
        sums[k] += float(v) * n


def _mean_breakdown(sums: dict) -> LossBreakdown:
    n = sums["n"]
    return LossBreakdown(
        mse=sums["mse"] / n,
        ssim_term=sums["ssim_term"] / n,
        overlay_mse=sums["overlay_mse"] / n,
        total=sums["total"] / n,
    )


def evaluate_epoch(model: SkipAutoencoder, val_stream, loss_cfg: LossConfig | None = None) -> LossBreakdown:
    """Mean per-sample loss over a fixed stream, no gradient updates."""
    loss_cfg = loss_cfg or LossConfig()
    sums = {"n": 0, "mse": 0.0, "ssim_term": 0.0, "overlay_mse": 0.0, "total": 0.0}
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for inputs, targets, masks in val_stream.batches(0):
                lb = compute_loss(targets, model(inputs), masks, loss_cfg)
                _accumulate(sums, lb, inputs.shape[0])
    finally:
        model.train(was_training)
    if sums["n"] == 0:
        raise ParameterError("validation stream yielded no batches")
    return _mean_breakdown(sums)


def _log_epoch(log_file, epoch: int, split: str, lb: LossBreakdown, lr: float) -> None:
    if log_file is None:
        return
    log_file.write(
        f"{epoch}\t{split}\t{float(lb.mse):.8e}\t{float(lb.ssim_term):.8e}"
        f"\t{float(lb.overlay_mse):.8e}\t{float(lb.total):.8e}\t{lr:.8e}\n"
    )
    log_file.flush()


def train(
    model: SkipAutoencoder,
    train_stream,
    val_stream,
    loss_cfg: LossConfig | None = None,
    train_cfg: TrainConfig | None = None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: bool = False,
) -> tuple[SkipAutoencoder, TrainState]:
    """Optimize the model; returns it holding the best-validation weights.

    Streams must expose ``batches(epoch)`` yielding (input, target, mask)
    tensors. With ``resume`` the loop continues from the ``last.pt``
    checkpoint in ``checkpoint_dir`` if one exists; sample synthesis derives
    from (seed, epoch, index), so a resumed run reproduces an uninterrupted
    one exactly.
    """
    loss_cfg = loss_cfg or LossConfig()
    cfg = train_cfg or TrainConfig()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    prev_deterministic = torch.are_deterministic_algorithms_enabled()
    if cfg.strict:
        torch.use_deterministic_algorithms(True)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, amsgrad=cfg.amsgrad
    )
    plateau = PlateauScheduler(cfg.lr, cfg.plateau)
    early = EarlyStopper(cfg.early_stop)
    state = TrainState(current_lr=cfg.lr)
    best_sd = copy.deepcopy(model.state_dict())
    start_epoch = 1

    if resume and ckpt_dir and (ckpt_dir / "last.pt").exists():
        payload = torch.load(ckpt_dir / "last.pt", map_location="cpu", weights_only=True)
        if payload.get("config_hash") != config_hash(model.config):
            raise TrainingError("resume checkpoint belongs to a different architecture")
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        plateau.load_state(payload["plateau"])
        early.load_state(payload["early"])
        state.epoch = payload["epoch"]
        state.current_lr = plateau.lr
        state.best_val_loss = payload["best_val_loss"]
        state.best_epoch = payload["best_epoch"]
        state.history = payload["history"]
        for group in optimizer.param_groups:
            group["lr"] = plateau.lr
        best_sd = copy.deepcopy(model.state_dict())
        if (ckpt_dir / "best.pt").exists():
            best = torch.load(ckpt_dir / "best.pt", map_location="cpu", weights_only=True)
            best_sd = best["state_dict"]
        start_epoch = state.epoch + 1
        log.info("resuming from epoch %d", start_epoch)

    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.max_epochs + 1):
            model.train()
            sums = {"n": 0, "mse": 0.0, "ssim_term": 0.0, "overlay_mse": 0.0, "total": 0.0}
            for bidx, (inputs, targets, masks) in enumerate(train_stream.batches(epoch)):
                optimizer.zero_grad(set_to_none=True)
                lb = compute_loss(targets, model(inputs), masks, loss_cfg)
                if not torch.isfinite(lb.total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} batch {bidx}: "
                        f"mse={lb.mse.detach().item()} "
                        f"ssim_term={lb.ssim_term.detach().item()} "
                        f"overlay_mse={lb.overlay_mse.detach().item()}"
                    )
                lb.total.backward()
                optimizer.step()
                _accumulate(sums, lb, inputs.shape[0])
            if sums["n"] == 0:
                raise ParameterError("training stream yielded no batches")
            train_lb = _mean_breakdown(sums)
            val_lb = evaluate_epoch(model, val_stream, loss_cfg)
            val_total = float(val_lb.total)

            state.epoch = epoch
            state.history.append(
                {
                    "epoch": epoch,
                    "train": [float(train_lb.mse), float(train_lb.ssim_term), float(train_lb.overlay_mse), float(train_lb.total)],
                    "val": [float(val_lb.mse), float(val_lb.ssim_term), float(val_lb.overlay_mse), float(val_lb.total)],
                    "lr": state.current_lr,
                }
            )
            _log_epoch(log_file, epoch, "train", train_lb, state.current_lr)
            _log_epoch(log_file, epoch, "val", val_lb, state.current_lr)

            if val_total < state.best_val_loss:
                state.best_val_loss = val_total
                state.best_epoch = epoch
                best_sd = copy.deepcopy(model.state_dict())
                if ckpt_dir:
                    model.meta = {"epoch": epoch, "val_loss": val_total}
                    save_model(model, ckpt_dir / "best.pt", epoch=epoch, val_loss=val_total)

            halt = early.step(val_total)
            state.epochs_since_best = early.epochs_since_best
            new_lr = plateau.step(val_total)
            state.epochs_since_plateau_improve = plateau.num_bad
            if new_lr != state.current_lr:
                log.info("epoch %d: lr %.3e -> %.3e", epoch, state.current_lr, new_lr)
                for group in optimizer.param_groups:
                    group["lr"] = new_lr
            state.current_lr = new_lr

            if ckpt_dir:
                torch.save(
                    {
                        "config_hash": config_hash(model.config),
                        "model": model.state_dict(),
                        "optimizer": optimizer.state_dict(),
                        "plateau": plateau.state(),
                        "early": early.state(),
                        "epoch": epoch,
                        "best_val_loss": state.best_val_loss,
                        "best_epoch": state.best_epoch,
                        "history": state.history,
                    },
                    ckpt_dir / "last.pt",
                )
            log.info(
                "epoch %d: train %.6f val %.6f (best %.6f @ %d)",
                epoch,
                float(train_lb.total),
                val_total,
                state.best_val_loss,
                state.best_epoch,
            )
            if halt:
                log.info("early stop at epoch %d", epoch)
                break
    finally:
        if log_file:
            log_file.close()
        if cfg.strict:
            torch.use_deterministic_algorithms(prev_deterministic)

    model.load_state_dict(best_sd)
    model.meta = {"epoch": state.best_epoch, "val_loss": state.best_val_loss}
    return model, state
