"""Aggregation probe: the LSTM encoder rewired into a 6-way classifier.

The probe reads the bare question (no augmentation), runs the same 2-layer
LSTM used by the parsers, and feeds the final top-layer hidden state into a
small MLP that predicts which aggregation function the gold query uses:
NULL, MAX, MIN, COUNT, SUM, or AVG. Encoder and head train jointly from
scratch. An embedding on/off switch reproduces the with/without-embeddings
comparison: with it off, tokens enter the first LSTM layer as one-hot rows.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from collections import Counter

import numpy as np

from . import layers as L
from . import tensor as T
from .models import ConfigError
from .tensor import Adam, Rng, Tensor, clip_gradients
from .text import DataError, Example, PAD_ID, SqlTarget, Vocabulary, tokenize_question

AGG_CLASS_NAMES = ("null", "max", "min", "count", "sum", "avg")
N_CLASSES = 6

PROBE_CURVE_HEADER = "epoch,step,train_loss,train_acc,dev_acc,wall_ms"


def extract_agg_label(sql: SqlTarget) -> int:
    """The class index is the gold aggregation index, never a text heuristic."""
    if not 0 <= sql.agg < N_CLASSES:
        raise DataError(f"aggregation index {sql.agg} outside 0..5")
    return sql.agg


@dataclass
class ProbeExample:
    question_ids: list[int]
    label: int


def build_probe_dataset(examples: list[Example], vocab: Vocabulary
                        ) -> list[ProbeExample]:
    return [ProbeExample(vocab.encode(tokenize_question(ex.question)),
                         extract_agg_label(ex.sql)) for ex in examples]


def probe_vocabulary(examples: list[Example], min_count: int = 1) -> Vocabulary:
    from .text import build_vocab
    return build_vocab([tokenize_question(ex.question) for ex in examples], min_count)


@dataclass
class ProbeConfig:
    hidden: int = 200
    embed: int = 300
    layers: int = 2
    mlp_hidden: tuple = (100,)
    use_embedding: bool = True
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.01
    clip_lo: float = -5.0
    clip_hi: float = 5.0
    init_lo: float = -0.1
    init_hi: float = 0.1
    seed: int = 2

    def validate(self) -> None:
        if min(self.hidden, self.embed, self.layers, self.epochs, self.batch_size) < 1:
            raise ConfigError("probe dims, epochs, batch_size must be >= 1")
        if not self.clip_lo < self.clip_hi or not self.init_lo < self.init_hi:
            raise ConfigError("empty clip or init range")


class ProbeModel:
    def __init__(self, config: ProbeConfig, vocab_size: int):
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        rng = Rng(config.seed)
        lo, hi = config.init_lo, config.init_hi
        self.params: dict[str, Tensor] = {}
        if config.use_embedding:
            self.params["embed"] = T.uniform_init([vocab_size, config.embed], lo, hi, rng)
            input_dim = config.embed
        else:
            # One-hot inputs: a fixed identity, not a trainable parameter.
            self.onehot = T.const(np.eye(vocab_size))
            input_dim = vocab_size
        self.encoder = L.LstmStack(input_dim, config.hidden, config.layers,
                                   rng, lo, hi, prefix="enc")
        self.params.update(self.encoder.params)
        self.mlp = L.MlpHead(config.hidden, list(config.mlp_hidden), N_CLASSES,
                             rng, lo, hi, prefix="mlp")
        self.params.update(self.mlp.params)

    def _input_rows(self, ids: np.ndarray) -> Tensor:
        table = self.params["embed"] if self.config.use_embedding else self.onehot
        return L.embedding_lookup(ids, table)

    def forward(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Class logits [B, 6] from padded question ids [B, T]."""
        b, t_len = ids.shape
        steps = [self._input_rows(ids[:, t]) for t in range(t_len)]
        hiddens, _ = self.encoder.run(steps)
        stacked = T.concat_rows(hiddens)           # row t*B + b
        final_idx = (lengths - 1) * b + np.arange(b)
        final_h = T.rows(stacked, final_idx)
        return self.mlp.forward(final_h)


def probe_forward(model: ProbeModel, question_ids: list[int]) -> Tensor:
    """Logits for a single question; the per-batch path with B = 1."""
    ids = np.asarray(question_ids, dtype=np.int64)[None, :]
    return model.forward(ids, np.array([ids.shape[1]], dtype=np.int64))


def _probe_batches(examples: list[ProbeExample], batch_size: int, rng: Rng):
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].question_ids))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)
    batches = []
    for chunk in chunks:
        members = [examples[i] for i in chunk]
        t_max = max(len(m.question_ids) for m in members)
        ids = np.full((len(members), t_max), PAD_ID, dtype=np.int64)
        lengths = np.zeros(len(members), dtype=np.int64)
        labels = np.zeros(len(members), dtype=np.int64)
        for j, m in enumerate(members):
            ids[j, :len(m.question_ids)] = m.question_ids
            lengths[j] = len(m.question_ids)
            labels[j] = m.label
        batches.append((ids, lengths, labels))
    return batches


def probe_accuracy(model: ProbeModel, examples: list[ProbeExample],
                   batch_size: int = 256) -> float:
    if not examples:
        raise DataError("cannot score an empty probe split")
    correct = 0
    for ids, lengths, labels in _probe_batches(examples, batch_size, Rng(0)):
        logits = model.forward(ids, lengths)
        correct += int((logits.values.argmax(axis=1) == labels).sum())
    return correct / len(examples)


def majority_class_rate(examples: list[ProbeExample]) -> float:
    counts = Counter(e.label for e in examples)
    return max(counts.values()) / len(examples)


def shuffle_labels(examples: list[ProbeExample], rng: Rng) -> list[ProbeExample]:
    """No-leakage control: questions keep their ids, labels get permuted."""
    labels = [e.label for e in examples]
    rng.shuffle(labels)
    return [ProbeExample(e.question_ids, lab) for e, lab in zip(examples, labels)]


@dataclass
class ProbeCurvePoint:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    dev_acc: float | None
    wall_ms: int

    def csv_row(self) -> str:
        dev = "" if self.dev_acc is None else repr(self.dev_acc)
        return (f"{self.epoch},{self.step},{self.train_loss!r},"
                f"{self.train_acc!r},{dev},{self.wall_ms}")


def train_probe(train_examples: list[ProbeExample],
                dev_examples: list[ProbeExample] | None,
                config: ProbeConfig, vocab_size: int,
                out_dir=None, clock=None, log=None
                ) -> tuple[list[ProbeCurvePoint], ProbeModel]:
    """Cross-entropy over the six classes with the same clip/Adam recipe as
    the parser trainer; logs accuracy per epoch next to the majority-class
    baseline."""
    config.validate()
    if not train_examples:
        raise DataError("empty probe training set")
    if len({e.label for e in train_examples}) < 2 and log is not None:
        log("warning: probe training data has a single class")
    model = ProbeModel(config, vocab_size)
    optimizer = Adam(model.params, lr=config.lr)
    baseline = majority_class_rate(train_examples)
    if log is not None:
        log(f"majority-class baseline {baseline:.4f}")

    curve: list[ProbeCurvePoint] = []
    curve_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        curve_fh = open(os.path.join(out_dir, "curve.csv"), "w", encoding="utf-8")
        curve_fh.write(PROBE_CURVE_HEADER + "\n")
    step = 0
    t_start = time.monotonic()
    try:
        for epoch in range(config.epochs):
            batches = _probe_batches(train_examples, config.batch_size,
                                     Rng(config.seed, stream=epoch + 1))
            loss_sum = 0.0
            n_seen = 0
            n_correct = 0
            for ids, lengths, labels in batches:
                logits = model.forward(ids, lengths)
                total, wsum = T.cross_entropy_rows(logits, labels, np.ones(len(labels)))
                loss = T.scale(total, 1.0 / wsum)
                loss.backward()
                clip_gradients(model.params.values(), config.clip_lo, config.clip_hi)
                optimizer.step()
                step += 1
                loss_sum += float(loss.values) * len(labels)
                n_seen += len(labels)
                n_correct += int((logits.values.argmax(axis=1) == labels).sum())
            dev_acc = probe_accuracy(model, dev_examples) if dev_examples else None
            wall_ms = int((clock() - t_start) * 1000) if clock is not None else 0
            point = ProbeCurvePoint(epoch, step, loss_sum / n_seen,
                                    n_correct / n_seen, dev_acc, wall_ms)
            curve.append(point)
            if curve_fh is not None:
                curve_fh.write(point.csv_row() + "\n")
                curve_fh.flush()
            if log is not None:
                extra = f" dev_acc {dev_acc:.4f}" if dev_acc is not None else ""
                log(f"epoch {epoch} loss {point.train_loss:.4f} "
                    f"acc {point.train_acc:.4f}{extra} baseline {baseline:.4f} "
                    f"[{time.monotonic() - t_start:.1f}s]")
    finally:
        if curve_fh is not None:
            curve_fh.close()
    return curve, model
