"""Joint training loop: momentum gradient descent over the three weighted losses."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import networks
from .data import PairSource
from .losses import CLS_MODES, PA_REDUCTIONS, LossWeights, cls_loss, feature_align_loss, pixel_align_loss, total_loss
from .nncore import Tape, Tensor, backward
from .shapeprior import KeypointProvider, shape_prior

LOG_COLUMNS = ("epoch", "lr", "L_cls", "L_pa", "L_fa", "L_total")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 30
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    cls_mode: str = "literal"
    pa_reduction: str = "sum"
    carry_momentum: bool = False  # keep v across epochs instead of restarting it

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        elif isinstance(self.weights, (list, tuple)):
            object.__setattr__(self, "weights", LossWeights(*self.weights))
        problems = []
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_decay_every < 1:
            problems.append("batch_size, epochs and lr_decay_every must be >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            problems.append("lr_decay_factor must lie in (0, 1]")
        if self.cls_mode not in CLS_MODES:
            problems.append(f"cls_mode must be one of {CLS_MODES}")
        if self.pa_reduction not in PA_REDUCTIONS:
            problems.append(f"pa_reduction must be one of {PA_REDUCTIONS}")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_TRAIN = TrainConfig(epochs=100, batch_size=64)
DESK_TRAIN = TrainConfig(epochs=20, batch_size=16)  # the 30-epoch decay never triggers


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: the base rate decays by ``lr_decay_factor`` every ``lr_decay_every`` epochs."""
    if epoch < 1:
        raise ValueError(f"epochs count from 1, got {epoch}")
    return cfg.lr * cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch = epoch, batch


@dataclass
class EpochLog:
    epoch: int
    lr: float
    L_cls: float
    L_pa: float
    L_fa: float
    L_total: float

    def row(self):
        return [self.epoch, f"{self.lr:.6g}"] + [
            "" if math.isnan(v) else f"{v:.6f}" for v in (self.L_cls, self.L_pa, self.L_fa, self.L_total)]


def momentum_step(params, velocity: dict, lr: float, tau: float, restart: bool):
    """v <- g on restart, otherwise v <- tau * v + g; then theta <- theta - lr * v."""
    for p in params:
        if not p.trainable:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocity.get(p.name)
        v = g.copy() if restart or v is None else tau * v + g
        velocity[p.name] = v
        p.data -= np.asarray(lr * v, dtype=p.data.dtype)


def _shrink(x_w: np.ndarray, size: int) -> np.ndarray:
    """Block-average (N, C, H, W) images down to size x size."""
    n, c, h, w = x_w.shape
    if h == size and w == size:
        return x_w
    if h % size or w % size:
        raise ValueError(f"cannot block-average {h}x{w} to {size}")
    fh, fw = h // size, w // size
    return x_w.reshape(n, c, size, fh, size, fw).mean(axis=(3, 5))


@dataclass
class Batch:
    x_r: np.ndarray
    x_w: np.ndarray
    h_s: np.ndarray
    labels: np.ndarray


def assemble_batch(source: PairSource, indices, rng: np.random.Generator, provider: KeypointProvider,
                   cfg: networks.NetConfig, tag: str) -> Batch:
    """Render crops and shape priors for one batch, in index order."""
    xr, xw, hs, ys = [], [], [], []
    for i in indices:
        pair = source.pair(int(i), rng)
        kps = provider(pair.x_r, f"{source.records[i].image}@{tag}", pair.keypoints)
        xr.append(pair.x_r)
        xw.append(pair.x_w)
        hs.append(shape_prior(kps, cfg.heatmap_raw_size, cfg.feature_size))
        ys.append(pair.label)
    x_w = _shrink(np.stack(xw), cfg.decode_size)
    return Batch(np.stack(xr), x_w.astype(np.float32), np.stack(hs), np.array(ys))


def batch_losses(bundle, batch: Batch, tcfg: TrainConfig):
    """Forward one batch; returns (total, {name: term or None})."""
    w = tcfg.weights
    out = networks.forward_train(bundle, Tensor(batch.x_r), Tensor(batch.h_s),
                                 decode=w.beta > 0, aggregate=(w.beta > 0 or w.gamma > 0))
    parts = {
        "L_cls": cls_loss(out["logits"], batch.labels, tcfg.cls_mode) if w.alpha > 0 else None,
        "L_pa": pixel_align_loss(batch.x_w, out["x_recon"], tcfg.pa_reduction) if w.beta > 0 else None,
        "L_fa": feature_align_loss(out["g_agg"], out["g_emb"]) if w.gamma > 0 else None,
    }
    return total_loss(parts["L_cls"], parts["L_pa"], parts["L_fa"], w), parts


@dataclass
class TrainResult:
    bundle: networks.ModelBundle
    log: list[EpochLog]
    momentum: dict


def train(bundle: networks.ModelBundle, source: PairSource, provider: KeypointProvider,
          cfg: TrainConfig, start_epoch: int = 1, momentum: Optional[dict] = None,
          log_path=None, checkpoint_path=None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Run epochs ``start_epoch..cfg.epochs``.

    Each epoch shuffles with a generator seeded by (seed, epoch), so a run
    resumed from a checkpoint continues exactly as an uninterrupted one.
    """
    if len(source) == 0:
        raise ValueError("training split is empty")
    net_cfg = bundle.config
    params = [p for p in bundle.parameters() if p.trainable]
    velocity = dict(momentum or {})
    log: list[EpochLog] = []
    bundle.train()
    if log_path is not None:
        log_path = Path(log_path)
        if start_epoch == 1 or not log_path.exists():
            with log_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)
    for epoch in range(start_epoch, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(source))
        lr = lr_at(epoch, cfg)
        sums = {"L_cls": 0.0, "L_pa": 0.0, "L_fa": 0.0, "L_total": 0.0}
        seen = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = assemble_batch(source, idx, rng, provider, net_cfg, f"e{epoch}")
            for p in params:
                p.grad = None
            with Tape() as tape:
                try:
                    total, parts = batch_losses(bundle, batch, cfg)
                except FloatingPointError as exc:
                    raise TrainingDiverged(epoch, b, str(exc)) from None
            backward(tape, total, params)
            restart = b == 0 and (not cfg.carry_momentum or not velocity)
            momentum_step(params, velocity, lr, cfg.momentum, restart)
            k = len(idx)
            seen += k
            sums["L_total"] += total.item() * k
            for name, t in parts.items():
                sums[name] += (t.item() if t is not None else math.nan) * k
        entry = EpochLog(epoch, lr, *(sums[c] / seen for c in LOG_COLUMNS[2:]))
        log.append(entry)
        if log_path is not None:
            with log_path.open("a", newline="") as fh:
                csv.writer(fh).writerow(entry.row())
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, bundle, velocity, epoch, cfg)
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(bundle, log, velocity)


def save_checkpoint(path, bundle, momentum: dict, epoch: int, cfg: TrainConfig):
    networks.write_checkpoint(path, bundle, momentum=momentum,
                              meta={"epoch": int(epoch), "train_config": cfg.to_dict()})


def load_checkpoint(path):
    """Returns (bundle, momentum, epoch, TrainConfig or None)."""
    bundle, momentum, meta = networks.load_bundle(path)
    tc = meta.get("train_config")
    return bundle, momentum, int(meta.get("epoch", 0)), (TrainConfig(**tc) if tc else None)


def read_log(path) -> list[EpochLog]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochLog(int(r["epoch"]), float(r["lr"]),
                     *(float(r[c]) if r[c] else math.nan for c in LOG_COLUMNS[2:])) for r in rows]
