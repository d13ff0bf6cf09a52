"""RMSProp training on frame-averaged cross-entropy.

The optimizer follows the common accumulator form: a <- 0.9 a + 0.1 g^2,
effective learning rate lr0 / (1 + decay * step_index) with a 0-based
step index, update p -= lr_eff * g / (sqrt(a) + 1e-7).  Defaults: lr0
1e-3, decay 1e-6 per update, batch 64, 26 frames.

One epoch turns every corpus image into exactly one sequence (see
``data.epoch_batches``); the loss is cross-entropy averaged over every
frame and item, so the model must get each frame right, not just the
last one.  A NaN loss or non-finite gradient aborts the run with a
:class:`DivergenceError`; whatever checkpoint was last written stays on
disk.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time

import numpy as np

from . import data, model as model_mod

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "loss", "lr", "wall_ms")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 10
    frames: int = 26
    snr_set: tuple = data.DEFAULT_SNR_SET
    seeds: int = 2
    base_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        for field in ("batch_size", "epochs", "frames", "seeds"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be nonnegative")
        self.snr_set = tuple(float(s) for s in self.snr_set)
        if not self.snr_set or any(s <= 0 for s in self.snr_set):
            raise ValueError("snr_set must be non-empty and positive")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["snr_set"] = list(self.snr_set)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "snr_set" in d:
            d["snr_set"] = tuple(d["snr_set"])
        return TrainConfig(**d)


def rmsprop_step(params, grads, state, lr0, decay, rho=0.9, eps=1e-7, step_index=0):
    """One optimizer update over name-keyed arrays; mutates params and state.

    ``state`` maps names to squared-gradient accumulators (created on
    first sight).  Raises DivergenceError on any non-finite gradient.
    """
    lr_eff = lr0 / (1.0 + decay * step_index)
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
        acc = state.get(name)
        if acc is None:
            acc = state[name] = np.zeros_like(p)
        acc *= rho
        acc += (1.0 - rho) * np.square(g)
        p -= lr_eff * g / (np.sqrt(acc) + eps)
    return params


class RmsProp:
    """Stateful wrapper around :func:`rmsprop_step` for a model's tensors."""

    def __init__(self, lr0=1e-3, decay=1e-6, rho=0.9, eps=1e-7):
        self.lr0 = lr0
        self.decay = decay
        self.rho = rho
        self.eps = eps
        self.step_index = 0
        self.accumulators = {}

    @property
    def effective_lr(self):
        return self.lr0 / (1.0 + self.decay * self.step_index)

    def step(self, named_params):
        params, grads = {}, {}
        for name, t in named_params:
            if t.grad is None:
                raise DivergenceError(f"parameter {name} received no gradient")
            params[name] = t.data
            grads[name] = t.grad
        rmsprop_step(params, grads, self.accumulators, self.lr0, self.decay,
                     self.rho, self.eps, self.step_index)
        self.step_index += 1


def append_log(path, rows):
    """Append rows to the training-log CSV, writing the header on creation."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"], r["epoch"], repr(r["loss"]), repr(r["lr"]),
                        round(r["wall_ms"], 3)])


def read_log(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [{"step": int(r["step"]), "epoch": int(r["epoch"]),
                 "loss": float(r["loss"]), "lr": float(r["lr"]),
                 "wall_ms": float(r["wall_ms"])} for r in reader]


def train(model, corpus, cfg, seed, optimizer=None, dropout_rng=None,
          start_epoch=0, on_epoch_end=None, log_path=None):
    """Train in place for cfg.epochs; returns the per-step log rows.

    ``seed`` drives both the data stream (per-epoch, per-image derivation)
    and, unless a restored generator is supplied, the dropout masks.
    ``on_epoch_end(model, optimizer, dropout_rng, epoch)`` is the
    checkpoint hook.  On divergence the exception propagates after the
    log rows so far have been flushed.
    """
    optimizer = optimizer or RmsProp(cfg.learning_rate, cfg.lr_decay)
    if dropout_rng is None:
        dropout_rng = data.sequence_rng(seed, 2 ** 30)
    rows, pending = [], []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t_epoch = time.perf_counter()
            for batch in data.epoch_batches(corpus, cfg.snr_set, cfg.batch_size,
                                            cfg.frames, base_seed=seed, epoch=epoch):
                t0 = time.perf_counter()
                model.zero_grads()
                loss = model_mod.sequence_loss(model, batch, training=True, rng=dropout_rng)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise DivergenceError(f"loss is {loss_val} at step {optimizer.step_index}")
                lr_used = optimizer.effective_lr
                loss.backward()
                optimizer.step(model.parameters())
                row = {"step": optimizer.step_index - 1, "epoch": epoch,
                       "loss": loss_val, "lr": lr_used,
                       "wall_ms": (time.perf_counter() - t0) * 1000.0}
                rows.append(row)
                pending.append(row)
            if log_path is not None:
                append_log(log_path, pending)
                pending = []
            n_epoch = sum(1 for r in rows if r["epoch"] == epoch)
            if n_epoch:
                mean_loss = np.mean([r["loss"] for r in rows if r["epoch"] == epoch])
                log.info("epoch %d: %d steps, mean loss %.4f, %.1fs",
                         epoch, n_epoch, mean_loss, time.perf_counter() - t_epoch)
            if on_epoch_end is not None:
                on_epoch_end(model, optimizer, dropout_rng, epoch)
    finally:
        if log_path is not None and pending:
            append_log(log_path, pending)
    return rows
