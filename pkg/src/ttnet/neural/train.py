"""Training loop, optimiser, checkpoints and gradient checking for TT-Net."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, TTNet, pack_complex

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    epochs_per_stage: int = 5
    curriculum: str = "lrg2sml"
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 3
    min_delta: float = 1e-5
    seed: int = 0
    max_epochs: int | None = None

    def __post_init__(self):
        if self.curriculum not in ("lrg2sml", "sml2lrg", "mixed"):
            raise ValueError(f"unknown curriculum {self.curriculum!r}")
        if self.batch_size < 1 or self.epochs_per_stage < 1:
            raise ValueError("batch size and epochs per stage must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Adam:
    """Adam with elementwise gradient clipping to ``[-clip, clip]``."""

    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8, clip: float | None = 1.0):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps, self.clip = beta1, beta2, eps, clip

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        if self.clip is not None:
            grads = np.clip(grads, -self.clip, self.clip)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauHalving:
    """Halve the learning rate after ``patience`` epochs without an
    improvement larger than ``min_delta``."""

    def __init__(self, lr: float, patience: int = 3, min_delta: float = 1e-5, factor: float = 0.5):
        self.lr = lr
        self.patience, self.min_delta, self.factor = patience, min_delta, factor
        self.best = math.inf
        self.bad = 0

    def update(self, metric: float) -> float:
        if metric < self.best - self.min_delta:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
                log.info("learning rate halved to %.3g", self.lr)
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None, "bad": self.bad}

    def load(self, st: dict) -> None:
        self.lr = st["lr"]
        self.best = math.inf if st["best"] is None else st["best"]
        self.bad = st["bad"]


def stack_batch(examples, idx):
    inputs = np.stack([examples[i].inputs for i in idx])
    geometry = np.stack([examples[i].geometry for i in idx])
    target = pack_complex(np.stack([examples[i].target for i in idx]))
    return inputs, geometry, target


def curriculum_stages(examples, curriculum: str) -> list:
    qs = sorted({ex.q for ex in examples})
    if curriculum == "lrg2sml":
        return qs[::-1]
    if curriculum == "sml2lrg":
        return qs
    return ["all"]


def evaluate_mse(model: TTNet, examples, batch_size: int = 64) -> float:
    """Mean squared error over ``examples`` (batched by Q, weighted by size)."""
    if not examples:
        return math.nan
    groups: dict = {}
    for i, ex in enumerate(examples):
        groups.setdefault(ex.q, []).append(i)
    total, count = 0.0, 0
    for q in sorted(groups):
        idx = groups[q]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            x, g, t = stack_batch(examples, chunk)
            total += float(model.loss(x, g, t).value) * len(chunk)
            count += len(chunk)
    return total / count


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    curve: list = field(default_factory=list)


def _stage_schedule(stages, cfg: TrainConfig):
    """Flat list of (global epoch, stage) pairs."""
    sched = [st for st in stages for _ in range(cfg.epochs_per_stage)]
    if cfg.max_epochs is not None:
        sched = sched[: cfg.max_epochs]
    return sched


def train(model: TTNet, train_set, val_set=None, cfg: TrainConfig | None = None,
          checkpoint_dir=None, resume: bool = False, stop_after: int | None = None,
          on_epoch=None) -> TrainState:
    """Fit ``model`` in place.

    Parameters
    ----------
    model : TTNet
    train_set, val_set : list of TrainingExample
        The plateau rule watches the validation MSE, or the training MSE
        when no validation set is given.
    cfg : TrainConfig
    checkpoint_dir : path, optional
        Written after every epoch; with ``resume`` the run continues from it.
    stop_after : int, optional
        Stop after this many epochs in this call (used to test resumption).

    Returns
    -------
    TrainState
        Completed epochs, optimiser steps and the loss curve rows
        ``(epoch, split, mse, lr, q_stage)``.
    """
    cfg = cfg or TrainConfig()
    ps = model.params
    opt = Adam(ps.size, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip)
    sched = PlateauHalving(cfg.lr, cfg.patience, cfg.min_delta)
    state = TrainState()
    if resume and checkpoint_dir is not None and (Path(checkpoint_dir) / "checkpoint.json").exists():
        state = load_checkpoint(checkpoint_dir, model, opt, sched)

    stages = curriculum_stages(train_set, cfg.curriculum)
    plan = _stage_schedule(stages, cfg)
    ran = 0
    while state.epoch < len(plan):
        if stop_after is not None and ran >= stop_after:
            break
        stage = plan[state.epoch]
        subset = _stage_subset(train_set, stage, cfg.curriculum)
        rng = np.random.default_rng([cfg.seed, state.epoch])
        order = _batches(subset, cfg.batch_size, rng)
        losses = []
        for idx in order:
            x, g, t = stack_batch(subset, idx)
            loss = model.loss(x, g, t)
            if not np.isfinite(loss.value):
                raise FloatingPointError(
                    f"non-finite loss at epoch {state.epoch}, step {state.step} (stage Q={stage})")
            ps.zero_grad()
            loss.backward()
            ps.load_flat(opt.step(ps.flat(), ps.grads(), sched.lr))
            losses.append(float(loss.value))
            state.step += 1
        train_mse = float(np.mean(losses)) if losses else math.nan
        lr_used = sched.lr
        state.curve.append((state.epoch, "train", train_mse, lr_used, stage))
        watch = train_mse
        if val_set:
            watch = evaluate_mse(model, val_set)
            state.curve.append((state.epoch, "val", watch, lr_used, stage))
        sched.update(watch)
        state.epoch += 1
        ran += 1
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, model, opt, sched, state, cfg)
        if on_epoch is not None:
            on_epoch(state)
    return state


def _stage_subset(examples, stage, curriculum):
    """Examples active in a curriculum stage; stages accumulate toward the end Q."""
    if stage == "all":
        return list(examples)
    if curriculum == "lrg2sml":
        return [ex for ex in examples if ex.q >= stage]
    return [ex for ex in examples if ex.q <= stage]


def _batches(examples, batch_size, rng):
    groups: dict = {}
    for i, ex in enumerate(examples):
        groups.setdefault(ex.q, []).append(i)
    out = []
    for q in sorted(groups):
        idx = np.asarray(groups[q])[rng.permutation(len(groups[q]))]
        out.extend(idx[s:s + batch_size].tolist() for s in range(0, len(idx), batch_size))
    return [out[i] for i in rng.permutation(len(out))]


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "mse", "lr", "q_stage"])
        for epoch, split, mse, lr, stage in rows:
            w.writerow([epoch, split, repr(float(mse)), repr(float(lr)), stage])


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, model: TTNet, opt: Adam | None = None, sched: PlateauHalving | None = None,
                    state: TrainState | None = None, train_cfg: TrainConfig | None = None) -> None:
    """JSON manifest plus little-endian float64 parameter blob in manifest order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    state = state or TrainState()
    model.params.flat().astype("<f8").tofile(d / "params.bin")
    manifest = {
        "model_config": model.cfg.to_dict(),
        "seed": model.seed,
        "step": state.step,
        "epoch": state.epoch,
        "params": model.params.layout(),
        "param_count": model.params.size,
        "train_config": None if train_cfg is None else train_cfg.to_dict(),
        "scheduler": None if sched is None else sched.state(),
        "adam_t": None if opt is None else opt.t,
        "curve": [list(r) for r in state.curve],
    }
    if opt is not None:
        np.concatenate([opt.m, opt.v]).astype("<f8").tofile(d / "adam.bin")
    (d / "checkpoint.json").write_text(json.dumps(manifest, indent=1))


def load_model(directory) -> TTNet:
    d = Path(directory)
    manifest = json.loads((d / "checkpoint.json").read_text())
    model = TTNet(ModelConfig.from_dict(manifest["model_config"]), manifest["seed"])
    layout = model.params.layout()
    if layout != manifest["params"]:
        raise ValueError("checkpoint parameter layout does not match the model config")
    model.params.load_flat(np.fromfile(d / "params.bin", dtype="<f8"))
    return model


def load_checkpoint(directory, model: TTNet, opt: Adam, sched: PlateauHalving) -> TrainState:
    d = Path(directory)
    manifest = json.loads((d / "checkpoint.json").read_text())
    if manifest["model_config"] != model.cfg.to_dict():
        raise ValueError("checkpoint was written for a different model config")
    model.params.load_flat(np.fromfile(d / "params.bin", dtype="<f8"))
    mv = np.fromfile(d / "adam.bin", dtype="<f8")
    opt.m, opt.v = mv[: mv.size // 2].copy(), mv[mv.size // 2:].copy()
    opt.t = manifest["adam_t"]
    sched.load(manifest["scheduler"])
    curve = [tuple(r) for r in manifest["curve"]]
    return TrainState(manifest["epoch"], manifest["step"], curve)


# ---------------------------------------------------------------- gradient check

def grad_check(model: TTNet, inputs, geometry, target, n_params: int = 20, step: float = 1e-6,
               rng: np.random.Generator | None = None, floor: float = 1e-8) -> float:
    """Largest relative error between analytic and central-difference gradients
    of the MSE loss on a random subset of parameter entries.

    The central difference carries a rounding error of about
    ``eps |L| / step``; discrepancies below that bound count as zero.
    """
    rng = rng or np.random.default_rng(0)
    ps = model.params
    ps.zero_grad()
    loss = model.loss(inputs, geometry, target)
    loss.backward()
    analytic = ps.grads()
    theta = ps.flat()
    noise = 8 * np.finfo(float).eps * max(abs(float(loss.value)), 1.0) / step
    picks = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    worst = 0.0
    for i in picks:
        plus, minus = theta.copy(), theta.copy()
        plus[i] += step
        minus[i] -= step
        ps.load_flat(plus)
        lp = float(model.loss(inputs, geometry, target).value)
        ps.load_flat(minus)
        lm = float(model.loss(inputs, geometry, target).value)
        numeric = (lp - lm) / (2 * step)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, max(abs(analytic[i] - numeric) - noise, 0.0) / denom)
    ps.load_flat(theta)
    return worst
