"""AdamW, plateau scheduling, the training loop and sliding-window evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from . import tensor
from .checkpoint import save_checkpoint
from .data import (AugmentConfig, SegmentationSample, augment, crop_patches, dice, load_samples,
                   one_hot, read_manifest)
from .network import Model


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at step {step}; last checkpoint: {checkpoint}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.08
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState,
               decay: Optional[Dict[str, bool]] = None):
    """One AdamW update; returns ``(new_params, state)``.

    Decay is decoupled: ``theta *= 1 - lr * wd`` before the moment step.
    ``decay`` optionally switches it off per parameter.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    out = {}
    for name, theta in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        wd = state.weight_decay if decay is None or decay.get(name, True) else 0.0
        new = theta * (1.0 - state.lr * wd) - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = new.astype(theta.dtype, copy=False)
    return out, state


@dataclass
class SchedulerState:
    factor: float = 0.9
    patience: int = 10
    best: float = -math.inf
    bad: int = 0


def scheduler_step(state: SchedulerState, metric: float, opt: OptimState) -> SchedulerState:
    """Plateau rule on a metric to maximize; mutates ``opt.lr`` when it fires."""
    if not math.isfinite(metric):
        raise ValueError(f"monitored metric must be finite, got {metric}")
    if metric > state.best:
        state.best = metric
        state.bad = 0
    else:
        state.bad += 1
        if state.bad >= state.patience:
            opt.lr *= state.factor
            state.bad = 0
    return state


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    patch: Tuple[int, int, int] = (32, 32, 32)
    crops_per_volume: int = 2
    lr: float = 2e-3
    weight_decay: float = 0.08
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.9
    plateau_patience: int = 10
    val_every: int = 50
    seed: int = 1
    ce_weight: float = 0.0
    augment: bool = True
    overlap: float = 0.5
    workers: int = 2

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.crops_per_volume < 1 or self.val_every < 1:
            raise ValueError("steps, batch_size, crops_per_volume and val_every must be positive")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "patch" in d:
            d["patch"] = tuple(d["patch"])
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and inference


def loss_fn(model: Model, image: np.ndarray, labels: np.ndarray, ce_weight: float = 0.0) -> ag.Var:
    logits = model(image)
    target = one_hot(labels, model.cfg.num_classes, model.dtype)
    loss = ag.soft_dice_loss(ag.softmax(logits), target)
    if ce_weight:
        loss = ag.add(loss, ag.scale(ag.cross_entropy(logits, target), ce_weight))
    return loss


def _window_starts(extent: int, size: int, overlap: float) -> List[int]:
    if size >= extent:
        return [0]
    step = max(1, int(size * (1.0 - overlap)))
    starts = list(range(0, extent - size + 1, step))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def sliding_window_logits(model: Model, image: np.ndarray, patch: Sequence[int], overlap: float = 0.5) -> np.ndarray:
    """Mean of window logits over a (1, D, H, W) image; returns (classes, D, H, W)."""
    spatial = image.shape[1:]
    patch = [min(p, s) for p, s in zip(patch, spatial)]
    acc = np.zeros((model.cfg.num_classes,) + tuple(spatial), dtype=np.float64)
    count = np.zeros(spatial, dtype=np.float64)
    for d in _window_starts(spatial[0], patch[0], overlap):
        for h in _window_starts(spatial[1], patch[1], overlap):
            for w in _window_starts(spatial[2], patch[2], overlap):
                sl = (slice(d, d + patch[0]), slice(h, h + patch[1]), slice(w, w + patch[2]))
                out = model(image[(slice(None),) + sl][None], grad=False).value[0]
                acc[(slice(None),) + sl] += out
                count[sl] += 1.0
    return acc / count


def predict(model: Model, image: np.ndarray, patch: Sequence[int], overlap: float = 0.5) -> np.ndarray:
    return np.argmax(sliding_window_logits(model, image, patch, overlap), axis=0).astype(np.uint8)


def dice_table(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], classes: int) -> dict:
    """Per-class Dice averaged over cases; ``mean`` averages foreground classes."""
    per = {c: float(np.mean([dice(p, g, c, classes) for p, g in zip(preds, gts)])) for c in range(classes)}
    return {"per_class": {str(c): v for c, v in per.items()},
            "mean": float(np.mean([per[c] for c in range(1, classes)])), "cases": len(preds)}


def evaluate(model: Model, samples: Sequence[SegmentationSample], patch: Sequence[int] = (32, 32, 32),
             overlap: float = 0.5) -> dict:
    samples = list(samples)
    preds = [predict(model, s.image, patch, overlap) for s in samples]
    return dice_table(preds, [s.labels for s in samples], model.cfg.num_classes)


# ---------------------------------------------------------------------------
# training loop


class Dataset:
    """Preprocessed samples grouped by split."""

    def __init__(self, splits: Dict[str, List[SegmentationSample]]):
        self.splits = {k: list(v) for k, v in splits.items()}

    @classmethod
    def from_manifest(cls, path, workers: int = 2) -> "Dataset":
        paths = read_manifest(path)
        return cls({k: list(load_samples(v, workers)) for k, v in paths.items()})

    def __getitem__(self, split):
        return self.splits.get(split, [])


def _batch(samples, cfg: TrainConfig, rng) -> Tuple[np.ndarray, np.ndarray]:
    patches = []
    while len(patches) < cfg.batch_size:
        s = samples[int(rng.integers(0, len(samples)))]
        for p in crop_patches(s, cfg.patch, cfg.crops_per_volume, int(rng.integers(0, 2**31))):
            if cfg.augment:
                p = augment(p, int(rng.integers(0, 2**31)), AugmentConfig())
            patches.append(p)
    patches = patches[: cfg.batch_size]
    return (np.stack([p.image for p in patches]).astype(np.float32),
            np.stack([p.labels for p in patches]).astype(np.int64))


def _decay_mask(model: Model) -> Dict[str, bool]:
    return {k: v.value.ndim > 1 for k, v in model.params.items()}


def train(model: Model, data: Dataset, cfg: TrainConfig, out_dir=None, log=None) -> dict:
    """Train in place; returns the report and writes it under ``out_dir`` when given.

    ``events.jsonl`` is a deterministic function of (model, data, cfg);
    wall-clock time goes only into ``report.json``.
    """
    t0 = time.perf_counter()
    train_set, val_set = data["train"], data["val"]
    if not train_set:
        raise ValueError("dataset has no training samples")
    out = Path(out_dir) if out_dir is not None else None
    events = None
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        events = open(out / "events.jsonl", "w")
    opt = OptimState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    sched = SchedulerState(cfg.plateau_factor, cfg.plateau_patience)
    rng = tensor.generator(cfg.seed)
    decay = _decay_mask(model)
    losses, lrs, vals = [], [], []

    def emit(rec):
        if events is not None:
            events.write(json.dumps(rec, sort_keys=True) + "\n")
            events.flush()
        if log is not None:
            log(rec)

    def validate(step):
        nonlocal ckpt
        table = evaluate(model, val_set, cfg.patch, cfg.overlap) if val_set else None
        rec = {"event": "val", "step": step, "lr": opt.lr}
        if table is not None:
            rec.update(dice=table["mean"], per_class=table["per_class"])
            vals.append({"step": step, "dice": table["mean"]})
            scheduler_step(sched, table["mean"], opt)
        if out is not None:
            ckpt = save_checkpoint(model, out / "checkpoint.bin", {"step": step})
        emit(rec)

    try:
        for step in range(1, cfg.steps + 1):
            image, labels = _batch(train_set, cfg, rng)
            loss = loss_fn(model, image, labels, cfg.ce_weight)
            value = float(loss.value)
            if not math.isfinite(value):
                emit({"event": "abort", "step": step, "reason": "non-finite loss"})
                raise TrainingDiverged(step, ckpt)
            names = list(model.params)
            grads = ag.backward(loss, [model.params[k] for k in names])
            g = {k: grads[model.params[k]] for k in names}
            new, _ = adamw_step({k: model.params[k].value for k in names}, g, opt, decay)
            for k in names:
                model.params[k].value = new[k]
            losses.append(value)
            lrs.append(opt.lr)
            emit({"event": "step", "step": step, "loss": value, "lr": opt.lr})
            if step % cfg.val_every == 0 or step == cfg.steps:
                validate(step)
        test = evaluate(model, data["test"], cfg.patch, cfg.overlap) if data["test"] else None
        if test is not None:
            emit({"event": "test", "dice": test["mean"], "per_class": test["per_class"]})
    finally:
        if events is not None:
            events.close()
    report = {"steps": cfg.steps, "loss": losses, "lr": lrs, "val": vals, "test": test,
              "final_lr": opt.lr, "wall_clock_s": time.perf_counter() - t0}
    if out is not None:
        report["checkpoint"] = str(save_checkpoint(model, out / "final.bin", {"step": cfg.steps}))
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
