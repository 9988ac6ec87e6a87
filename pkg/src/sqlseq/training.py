"""The optimization loop: length-bucketed epochs, gradient clipping, Adam,
curve logging, periodic checkpoints, and NaN aborts that keep the last good
checkpoint on disk.

Everything logged is a pure function of (seed, data, config): batch order
comes from a per-epoch RNG stream and, by default, the wall_ms column is
written as 0 so artifacts are byte-reproducible run to run. Pass a clock
(e.g. ``time.monotonic``) to record real timing at the cost of that
reproducibility; progress lines on stdout always show real elapsed time.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import metrics as M
from .checkpoint import save_model
from .models import ConfigError, Seq2SeqModel
from .tensor import Adam, NumericError, Rng, clip_gradients
from .text import Batch, EncodedPair, bucket_batches

CURVE_HEADER = "epoch,step,train_loss,train_acc,dev_bow,wall_ms"


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or parameter; the last checkpoint on
    disk is still the last good state."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 0.01            # the pointer variant wants 0.001
    clip_lo: float = -5.0
    clip_hi: float = 5.0
    eval_every: int = 10        # 0 disables dev evaluation between epochs
    seed: int = 2

    def validate(self) -> None:
        if min(self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size, lr must be positive")
        if not self.clip_lo < self.clip_hi:
            raise ConfigError(f"clip range ({self.clip_lo}, {self.clip_hi}) is empty")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")


@dataclass
class CurvePoint:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    dev_bow: float | None
    wall_ms: int

    def csv_row(self) -> str:
        dev = "" if self.dev_bow is None else repr(self.dev_bow)
        return (f"{self.epoch},{self.step},{self.train_loss!r},"
                f"{self.train_acc!r},{dev},{self.wall_ms}")


def _assert_clipped(params, lo, hi):
    for name, p in params.items():
        if p.grad.size and (p.grad.max() > hi or p.grad.min() < lo):
            raise AssertionError(f"gradient of {name} escaped clip range")


def _assert_finite_params(params):
    for name, p in params.items():
        if not np.all(np.isfinite(p.values)):
            raise NumericAbort(f"non-finite values in parameter {name}")


def train_step(model: Seq2SeqModel, batch: Batch, optimizer: Adam,
               config: TrainConfig) -> dict:
    """One forward/backward/clip/update; returns the forward stats."""
    _, loss, stats = model.forward_teacher_forced(batch)
    if not np.isfinite(stats["loss"]):
        raise NumericAbort(f"non-finite training loss {stats['loss']}")
    loss.backward()
    clip_gradients(model.params.values(), config.clip_lo, config.clip_hi)
    _assert_clipped(model.params, config.clip_lo, config.clip_hi)
    try:
        optimizer.step()
    except NumericError as exc:
        raise NumericAbort(str(exc)) from exc
    _assert_finite_params(model.params)
    return stats


def train(model: Seq2SeqModel, train_pairs: list[EncodedPair],
          dev_pairs: list[EncodedPair] | None, config: TrainConfig,
          out_dir=None, input_vocab=None, target_vocab=None,
          start_epoch: int = 0, start_step: int = 0,
          optimizer: Adam | None = None, meta: dict | None = None,
          clock=None, log=None) -> list[CurvePoint]:
    """Run ``config.epochs`` epochs; write curve.csv and checkpoint.ckpt
    under ``out_dir`` (if given) and return the curve points.

    Pass ``start_epoch``/``start_step``/``optimizer`` to resume from a
    checkpoint: batch shuffles come from RNG stream ``epoch + 1`` of the
    config seed, so a resumed run continues exactly where the uninterrupted
    one would be.
    """
    config.validate()
    if not train_pairs:
        raise ConfigError("empty training set")
    if optimizer is None:
        optimizer = Adam(model.params, lr=config.lr)
    curve: list[CurvePoint] = []
    curve_fh = None
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
        curve_fh = open(os.path.join(out_dir, "curve.csv"), "w", encoding="utf-8")
        curve_fh.write(CURVE_HEADER + "\n")

    can_eval = (dev_pairs and input_vocab is not None and target_vocab is not None)
    step = start_step
    t_start = time.monotonic()
    try:
        for epoch in range(start_epoch, start_epoch + config.epochs):
            batches = bucket_batches(train_pairs, config.batch_size,
                                     Rng(config.seed, stream=epoch + 1))
            loss_sum = 0.0
            weight_sum = 0.0
            correct = 0.0
            for batch in batches:
                stats = train_step(model, batch, optimizer, config)
                step += 1
                loss_sum += stats["loss"] * stats["total_tokens"]
                weight_sum += stats["total_tokens"]
                correct += stats["correct_tokens"]
            train_loss = loss_sum / weight_sum
            train_acc = correct / weight_sum

            last = epoch == start_epoch + config.epochs - 1
            eval_now = can_eval and ((config.eval_every > 0 and
                                      (epoch + 1) % config.eval_every == 0) or last)
            dev_bow = None
            if eval_now:
                dev_bow = M.evaluate_split(model, dev_pairs, input_vocab,
                                           target_vocab).bow_accuracy
            wall_ms = int((clock() - t_start) * 1000) if clock is not None else 0
            point = CurvePoint(epoch, step, train_loss, train_acc, dev_bow, wall_ms)
            curve.append(point)
            if curve_fh is not None:
                curve_fh.write(point.csv_row() + "\n")
                curve_fh.flush()
            if log is not None:
                extra = f" dev_bow {dev_bow:.4f}" if dev_bow is not None else ""
                log(f"epoch {epoch} step {step} loss {train_loss:.4f} "
                    f"acc {train_acc:.4f}{extra} "
                    f"[{time.monotonic() - t_start:.1f}s]")
            if ckpt_path is not None and (eval_now or last or
                                          (config.eval_every > 0 and
                                           (epoch + 1) % config.eval_every == 0)):
                save_model(model, ckpt_path,
                           meta={**(meta or {}), "epoch": epoch + 1, "step": step},
                           optimizer=optimizer)
    finally:
        if curve_fh is not None:
            curve_fh.close()
    return curve


def read_curve(path) -> list[CurvePoint]:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected curve header {header!r}")
        for line in fh:
            epoch, step, loss, acc, dev, wall = line.strip().split(",")
            points.append(CurvePoint(int(epoch), int(step), float(loss), float(acc),
                                     float(dev) if dev else None, int(wall)))
    return points
