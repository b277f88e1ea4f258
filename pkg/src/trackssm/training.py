"""Losses, step-by-step linear pseudo-labels, gradients and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, DimensionError, TrainingError
from .model import BBox, ModelConfig, TrackSSM, TrajectoryHistory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingSegment:
    history: TrajectoryHistory
    target: BBox


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # smooth L1
    lambda2: float = 1.0  # GIoU
    use_giou: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lambda1 + (self.lambda2 if self.use_giou else 0.0) <= 0:
            raise ConfigError("at least one loss term must have positive weight")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 1.0
    use_giou: bool = False
    s2l: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.use_giou)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    step: int
    loss: float


# --- pseudo-labels -----------------------------------------------------------


def s2l_targets(box_i: Tensor, box_next: Tensor, n_layers: int) -> Tensor:
    """Equally spaced interpolants between ``box_i`` and ``box_next``, shape [n_layers, ..., 4].

    The last entry is ``box_next`` itself, bit for bit.
    """
    if n_layers < 1:
        raise ConfigError("n_layers must be >= 1")
    diff = box_next - box_i
    out = [box_i + (k / n_layers) * diff for k in range(1, n_layers)]
    out.append(box_next)
    return torch.stack(out)


def layer_targets(box_i: Tensor, box_next: Tensor, n_layers: int, s2l: bool = True) -> Tensor:
    if s2l:
        return s2l_targets(box_i, box_next, n_layers)
    return box_next.expand((n_layers,) + box_next.shape)


# --- losses ------------------------------------------------------------------


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over the 4 coordinates of the elementwise smooth L1 (threshold 1)."""
    d = (pred - target).abs()
    per = torch.where(d < 1, 0.5 * d * d, d - 0.5)
    return per.mean(-1)


def _corners(b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy, w, h = b.unbind(-1)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou(pred: Tensor, target: Tensor) -> Tensor:
    px1, py1, px2, py2 = _corners(pred)
    tx1, ty1, tx2, ty2 = _corners(target)
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp_min(0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp_min(0)
    inter = iw * ih
    union = area_p + area_t - inter
    ew = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    eh = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def giou_loss(pred: Tensor, target: Tensor) -> Tensor:
    return 1.0 - giou(pred, target)


def total_loss(per_layer: Sequence[Tensor] | Tensor, targets: Tensor, w: LossWeights) -> Tensor:
    """Per-sample loss: mean over layers of ``lambda1*smoothL1 + lambda2*GIoU-loss``."""
    preds = torch.stack(list(per_layer)) if not isinstance(per_layer, Tensor) else per_layer
    if preds.shape != targets.shape:
        raise DimensionError(f"per-layer predictions {tuple(preds.shape)} vs targets {tuple(targets.shape)}")
    loss = w.lambda1 * smooth_l1(preds, targets)
    if w.use_giou:
        loss = loss + w.lambda2 * giou_loss(preds, targets)
    return loss.mean(0)


def _as_tensor(box: BBox, dtype=torch.float64) -> Tensor:
    return torch.as_tensor(box.as_array(), dtype=dtype)


def smooth_l1_loss(pred: BBox, target: BBox) -> float:
    return float(smooth_l1(_as_tensor(pred), _as_tensor(target)))


def box_giou_loss(pred: BBox, target: BBox) -> float:
    return float(giou_loss(_as_tensor(pred), _as_tensor(target)))


# --- data batches ------------------------------------------------------------


@dataclass
class SegmentArrays:
    """Stacked training segments: histories [S, n, 8], targets [S, 4]."""

    histories: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    @classmethod
    def from_segments(cls, segments: Sequence[TrainingSegment]) -> "SegmentArrays":
        if not segments:
            raise ConfigError("dataset is empty")
        return cls(
            np.stack([s.history.steps for s in segments]),
            np.stack([s.target.as_array() for s in segments]),
        )


# --- gradients ---------------------------------------------------------------


def batch_loss(model: TrackSSM, histories: Tensor, targets: Tensor, w: LossWeights, s2l: bool = True) -> Tensor:
    """Batch-mean total loss over a stack of histories [B, n, 8] with next boxes [B, 4]."""
    _, per_layer = model(histories)
    lt = layer_targets(histories[:, -1, :4], targets, len(per_layer), s2l)
    return total_loss(per_layer, lt, w).mean()


def backward(
    model: TrackSSM,
    histories: Tensor,
    targets: Tensor,
    w: LossWeights,
    s2l: bool = True,
    batch_index: int | None = None,
) -> tuple[float, dict[str, Tensor]]:
    """Loss and reverse-mode gradients of every learnable tensor, keyed by parameter name."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, histories, targets, w, s2l)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss.detach())} in batch {batch_index}", batch_index)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return float(loss.detach()), grads


# --- optimizer ---------------------------------------------------------------


def make_optimizer(model: TrackSSM, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=betas, eps=eps)


def adam_step(model: TrackSSM, grads: dict[str, Tensor], opt: torch.optim.Adam) -> None:
    """Apply one bias-corrected Adam update in place."""
    params = dict(model.named_parameters())
    if set(grads) != set(params):
        raise DimensionError("gradient keys do not match model parameters")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        p.grad = g.to(p.dtype)
    opt.step()


def optimizer_step_count(opt: torch.optim.Adam) -> int:
    steps = [int(s["step"]) for s in opt.state.values() if "step" in s]
    return max(steps, default=0)


# --- training loop -----------------------------------------------------------


def train(
    data: SegmentArrays | Sequence[TrainingSegment],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    model: TrackSSM | None = None,
    opt: torch.optim.Adam | None = None,
) -> tuple[TrackSSM, torch.optim.Adam, list[EpochLog]]:
    """Mini-batch Adam over shuffled segments; returns the model, optimizer and per-epoch loss log."""
    if not isinstance(data, SegmentArrays):
        data = SegmentArrays.from_segments(data)
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    model = model or TrackSSM(model_cfg)
    opt = opt or make_optimizer(model, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    dtype = model.dtype
    hist_all = torch.as_tensor(data.histories, dtype=dtype)
    tgt_all = torch.as_tensor(data.targets, dtype=dtype)
    rng = np.random.default_rng(cfg.seed)
    w = cfg.loss_weights
    history: list[EpochLog] = []
    step = optimizer_step_count(opt)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.as_tensor(rng.permutation(len(data)))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(data), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, grads = backward(model, hist_all[idx], tgt_all[idx], w, cfg.s2l, batch_index=b)
            adam_step(model, grads, opt)
            step += 1
            total += loss * len(idx)
            count += len(idx)
        epoch_loss = total / count
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"non-finite epoch loss at epoch {epoch}")
        history.append(EpochLog(epoch, step, epoch_loss))
        log.info("epoch %d step %d loss %.6g", epoch, step, epoch_loss)
    model.eval()
    return model, opt, history


def write_loss_csv(entries: Sequence[EpochLog], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["epoch", "step", "loss"])
        for e in entries:
            wr.writerow([e.epoch, e.step, repr(e.loss)])
    tmp.replace(path)


def train_config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    return TrainConfig(**d)

