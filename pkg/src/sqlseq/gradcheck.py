"""Finite-difference validation of every layer and every model variant.

Runs at tiny dimensions so a full sweep takes seconds. Each component gets
a deterministic scalar loss built from its output; the analytic gradients
of all its parameters are compared against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .models import ModelConfig, Seq2SeqModel
from .tensor import Rng
from .text import Batch

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class GradCheckResult:
    component: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _mixer(shape, seed):
    return T.const(Rng(seed).uniform_array(shape, -1.0, 1.0))


def _check(name, loss_fn, params, samples=6) -> GradCheckResult:
    err = T.finite_difference_check(loss_fn, params, eps=EPS,
                                    max_samples_per_param=samples)
    return GradCheckResult(name, err)


def check_layers() -> list[GradCheckResult]:
    results = []

    w = T.uniform_init([3, 2], -0.5, 0.5, Rng(1))
    b = T.uniform_init([2], -0.5, 0.5, Rng(2))
    x = _mixer((4, 3), 3)
    results.append(_check(
        "affine", lambda: T.sum_all(T.tanh(T.affine(x, w, b))), {"W": w, "b": b}))

    emb = T.uniform_init([6, 3], -0.5, 0.5, Rng(4))
    results.append(_check(
        "embedding", lambda: T.sum_all(T.mul(L.embedding_lookup([1, 4, 4, 0], emb),
                                             _mixer((4, 3), 5))), {"E": emb}))

    logits = T.uniform_init([4, 5], -1.0, 1.0, Rng(6))
    results.append(_check(
        "softmax", lambda: T.sum_all(T.mul(T.softmax_rows(logits), _mixer((4, 5), 7))),
        {"logits": logits}))
    results.append(_check(
        "sequence_cross_entropy",
        lambda: T.sequence_cross_entropy(logits, [0, 2, 4, 1], [1.0, 0.5, 0.0, 2.0]),
        {"logits": logits}))

    cell = L.LstmStack(3, 4, 1, Rng(8), -0.5, 0.5, "cell")
    xc = _mixer((2, 3), 9)
    mix = _mixer((2, 4), 10)

    def cell_loss():
        h, c = L.lstm_cell_step(xc, T.zeros((2, 4)), T.zeros((2, 4)),
                                cell.layer_params(0))
        return T.sum_all(T.mul(T.add(h, c), mix))

    results.append(_check("lstm_cell", cell_loss, cell.params))

    stack = L.LstmStack(2, 3, 2, Rng(11), -0.5, 0.5, "unroll")
    xs = Rng(12).uniform_array((4, 2, 2), -1.0, 1.0)
    mix2 = _mixer((2, 3), 13)

    def unroll_loss():
        hiddens, final = stack.run([T.const(s) for s in xs])
        return T.sum_all(T.mul(T.add(hiddens[-1], final[0][1]), mix2))

    results.append(_check("lstm_unroll", unroll_loss, stack.params))

    bidi = L.BidirectionalEncoder(2, 3, 1, Rng(14), -0.5, 0.5)
    xs_b = Rng(15).uniform_array((3, 2, 2), -1.0, 1.0)
    mix3 = _mixer((2, 3), 16)

    def bidi_loss():
        outs, (h0, c0) = bidi.run([T.const(s) for s in xs_b])
        return T.add(T.sum_all(T.tanh(T.concat_cols(outs))),
                     T.sum_all(T.mul(T.add(h0, c0), mix3)))

    results.append(_check("bidirectional", bidi_loss, bidi.params))

    attn = L.AdditiveAttention(3, 4, 3, Rng(17), -0.5, 0.5)
    q = Rng(18).uniform_array((3,), -1.0, 1.0)
    keys = Rng(19).uniform_array((5, 4), -1.0, 1.0)
    mix4 = _mixer((4,), 20)

    def attn_loss():
        ctx, _ = L.additive_attention(T.const(q), T.const(keys), attn)
        return T.sum_all(T.mul(ctx, mix4))

    results.append(_check("additive_attention", attn_loss, attn.params))

    def ptr_loss():
        s = L.pointer_scores(T.const(q), T.const(keys), attn)
        return T.sequence_cross_entropy(T.reshape(s, (1, 5)), [3], [1.0])

    results.append(_check("pointer_scores", ptr_loss, attn.params))

    mlp = L.MlpHead(4, [5], 6, Rng(21), -0.5, 0.5)
    xm = _mixer((2, 4), 22)

    def mlp_loss():
        total, wsum = T.cross_entropy_rows(mlp.forward(xm), [2, 5], [1.0, 1.0])
        return T.scale(total, 1.0 / wsum)

    results.append(_check("mlp_head", mlp_loss, mlp.params))
    return results


def _tiny_batch(variant: str, cell_size: int = 8) -> Batch:
    if variant == "pointer":
        input_ids = np.array([[4, 5, 6, 7, 4, 5, 6, 2],
                              [5, 7, 6, 4, 5, 7, 6, 2]], dtype=np.int64)
        pointer_targets = np.array([[0, 2, 3, 7, 7], [1, 0, 2, 7, 7]], dtype=np.int64)
        target_ids = np.array([[4, 6, 7, 2, 0], [5, 4, 6, 2, 0]], dtype=np.int64)
        weights = np.array([[1.0, 1.0, 1.0, 1.0, 0.0],
                            [1.0, 1.0, 1.0, 1.0, 0.0]])
        lengths = np.array([8, 8], dtype=np.int64)
        return Batch(input_ids, lengths, target_ids, weights, pointer_targets)
    input_ids = np.array([[4, 5, 6, 7], [6, 4, 7, 5]], dtype=np.int64)
    target_ids = np.array([[4, 5, 2, 0], [5, 6, 7, 2]], dtype=np.int64)
    weights = np.array([[1.0, 1.0, 1.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
    lengths = np.array([4, 4], dtype=np.int64)
    return Batch(input_ids, lengths, target_ids, weights, None)


def tiny_model(variant: str, seed: int = 2) -> Seq2SeqModel:
    cfg = ModelConfig(variant=variant, hidden=3, layers=2, embed=4,
                      cell_size=8 if variant == "pointer" else None,
                      max_decode_len=8, seed=seed)
    return Seq2SeqModel(cfg, input_vocab_size=8, target_vocab_size=8)


def check_variants() -> list[GradCheckResult]:
    results = []
    for variant in ("vanilla", "reversed", "bidirectional", "attention", "pointer"):
        model = tiny_model(variant)
        batch = _tiny_batch(variant)

        def loss_fn(model=model, batch=batch):
            return model.forward_teacher_forced(batch)[1]

        results.append(_check(f"model.{variant}", loss_fn, model.params, samples=4))
    return results


def run_all() -> list[GradCheckResult]:
    return check_layers() + check_variants()
