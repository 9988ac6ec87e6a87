"""Layer tests: each forward against an independently written direct-formula
oracle, structural contracts, and finite-difference gradient checks."""

import numpy as np
import pytest

from sqlseq import layers as L
from sqlseq import tensor as T
from sqlseq.tensor import Rng


def _np_rng(seed=0):
    return np.random.default_rng(seed)


def _zero_params(in_dim, hidden):
    return {f"{kind}{g}": T.zeros((in_dim if kind == "W" else hidden, hidden))
            if kind != "b" else T.zeros((hidden,))
            for g in L.GATES for kind in ("W", "U", "b")}


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


def test_lstm_cell_zero_everything_gives_zero_state():
    p = _zero_params(3, 4)
    h, c = L.lstm_cell_step(T.zeros((2, 3)), T.zeros((2, 4)), T.zeros((2, 4)), p)
    assert np.array_equal(h.values, np.zeros((2, 4)))
    assert np.array_equal(c.values, np.zeros((2, 4)))


def test_lstm_cell_saturated_forget_gate_preserves_memory():
    p = _zero_params(3, 4)
    p["bf"].values[...] = 50.0  # forget gate pinned open, input path stays zero
    c_prev = T.const(_np_rng(1).normal(size=(2, 4)))
    x = T.const(_np_rng(2).normal(size=(2, 3)))
    _, c = L.lstm_cell_step(x, T.zeros((2, 4)), c_prev, p)
    assert np.allclose(c.values, c_prev.values, atol=1e-9)


def _lstm_oracle(x, h, c, p):
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    i = sig(x @ p["Wi"] + h @ p["Ui"] + p["bi"])
    f = sig(x @ p["Wf"] + h @ p["Uf"] + p["bf"])
    g = np.tanh(x @ p["Wg"] + h @ p["Ug"] + p["bg"])
    o = sig(x @ p["Wo"] + h @ p["Uo"] + p["bo"])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def test_lstm_cell_matches_direct_formula_oracle():
    rng = _np_rng(7)
    raw = {f"{k}{g}": rng.normal(scale=0.4, size=(3 if k == "W" else 5, 5))
           if k != "b" else rng.normal(scale=0.4, size=5)
           for g in L.GATES for k in ("W", "U", "b")}
    p = {k: T.const(v) for k, v in raw.items()}
    x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    h2, c2 = L.lstm_cell_step(T.const(x), T.const(h), T.const(c), p)
    oh, oc = _lstm_oracle(x, h, c, raw)
    assert np.allclose(h2.values, oh, atol=1e-12)
    assert np.allclose(c2.values, oc, atol=1e-12)


def test_lstm_cell_gradients():
    stack = L.LstmStack(3, 4, 1, Rng(2), -0.5, 0.5, "cell")
    x = T.const(_np_rng(3).normal(size=(2, 3)))
    mixer = _np_rng(4).normal(size=(2, 4))

    def loss_fn():
        h, c = L.lstm_cell_step(x, T.zeros((2, 4)), T.zeros((2, 4)), stack.layer_params(0))
        return T.sum_all(T.mul(T.add(h, c), T.const(mixer)))

    assert T.finite_difference_check(loss_fn, stack.params, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# unroll
# ---------------------------------------------------------------------------


def test_unroll_single_step_equals_cell_steps():
    stack = L.LstmStack(3, 4, 2, Rng(5), -0.3, 0.3, "u")
    x = T.const(_np_rng(5).normal(size=(2, 3)))
    hiddens, final = stack.run([x])
    state = stack.initial_state(2)
    h0, c0 = L.lstm_cell_step(x, state[0][0], state[0][1], stack.layer_params(0))
    h1, c1 = L.lstm_cell_step(h0, state[1][0], state[1][1], stack.layer_params(1))
    assert np.allclose(hiddens[0].values, h1.values, atol=1e-15)
    assert np.allclose(final[0][1].values, c0.values, atol=1e-15)
    assert np.allclose(final[1][0].values, h1.values, atol=1e-15)


def test_unroll_deterministic():
    stack = L.LstmStack(3, 4, 2, Rng(6), -0.3, 0.3, "u")
    xs = [T.const(_np_rng(i).normal(size=(2, 3))) for i in range(3)]
    a, _ = stack.run(xs)
    b, _ = stack.run(xs)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))


def test_unroll_gradient_through_five_steps():
    stack = L.LstmStack(2, 3, 2, Rng(7), -0.4, 0.4, "u")
    xs_raw = _np_rng(8).normal(size=(5, 2, 2))
    mixer = _np_rng(9).normal(size=(2, 3))

    def loss_fn():
        hiddens, final = stack.run([T.const(x) for x in xs_raw])
        return T.sum_all(T.mul(T.add(hiddens[-1], final[0][1]), T.const(mixer)))

    assert T.finite_difference_check(loss_fn, stack.params, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# Bidirectional encoder
# ---------------------------------------------------------------------------


def test_bidirectional_output_dim_is_2h():
    enc = L.BidirectionalEncoder(3, 4, 2, Rng(1), -0.2, 0.2)
    xs = [T.const(_np_rng(i).normal(size=(2, 3))) for i in range(3)]
    outputs, (h0, c0) = enc.run(xs)
    assert all(o.shape == (2, 8) for o in outputs)
    assert h0.shape == (2, 4) and c0.shape == (2, 4)


def test_bidirectional_palindrome_with_tied_directions():
    enc = L.BidirectionalEncoder(3, 4, 2, Rng(2), -0.3, 0.3)
    for name, p in enc.fwd.params.items():
        enc.bwd.params[name.replace(".fwd.", ".bwd.")].values[...] = p.values
    x0 = _np_rng(3).normal(size=(1, 3))
    x1 = _np_rng(4).normal(size=(1, 3))
    outputs, _ = enc.run([T.const(x0), T.const(x1), T.const(x0)])
    h = enc.hidden_dim
    first, last = outputs[0].values, outputs[2].values
    assert np.allclose(first[:, :h], last[:, h:], atol=1e-12)
    assert np.allclose(first[:, h:], last[:, :h], atol=1e-12)


def test_bidirectional_single_step_both_directions_see_same_token():
    enc = L.BidirectionalEncoder(3, 4, 1, Rng(3), -0.3, 0.3)
    for name, p in enc.fwd.params.items():
        enc.bwd.params[name.replace(".fwd.", ".bwd.")].values[...] = p.values
    x = T.const(_np_rng(5).normal(size=(2, 3)))
    outputs, _ = enc.run([x])
    assert np.allclose(outputs[0].values[:, :4], outputs[0].values[:, 4:], atol=1e-12)


def test_bidirectional_every_position_depends_on_every_input():
    enc = L.BidirectionalEncoder(2, 3, 1, Rng(4), -0.5, 0.5)
    xs_raw = _np_rng(6).normal(size=(4, 1, 2))
    base = [o.values.copy() for o in enc.run([T.const(x) for x in xs_raw])[0]]
    for perturb in range(4):
        bumped = xs_raw.copy()
        bumped[perturb] += 0.1
        outs = enc.run([T.const(x) for x in bumped])[0]
        for t in range(4):
            assert not np.allclose(outs[t].values, base[t], atol=1e-12), \
                f"position {t} ignored input {perturb}"


def test_bidirectional_gradients():
    enc = L.BidirectionalEncoder(2, 3, 1, Rng(5), -0.4, 0.4)
    xs_raw = _np_rng(7).normal(size=(3, 2, 2))
    mixer = _np_rng(8).normal(size=(2, 3))

    def loss_fn():
        outs, (h0, c0) = enc.run([T.const(x) for x in xs_raw])
        return T.add(T.sum_all(T.tanh(T.concat_cols(outs))),
                     T.sum_all(T.mul(T.add(h0, c0), T.const(mixer))))

    assert T.finite_difference_check(loss_fn, enc.params, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# Attention / pointer scores
# ---------------------------------------------------------------------------


def _attn_oracle(q, keys, wq, wk, v):
    scores = np.tanh(keys @ wk + q @ wq) @ v
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    return (w * keys).sum(axis=0), w.ravel(), scores.ravel()


def test_attention_single_key():
    attn = L.AdditiveAttention(4, 5, 3, Rng(6), -0.3, 0.3)
    key = _np_rng(9).normal(size=(1, 5))
    ctx, w = L.additive_attention(T.const(_np_rng(8).normal(size=4)), T.const(key), attn)
    assert np.allclose(w.values, [1.0], atol=1e-15)
    assert np.allclose(ctx.values, key[0], atol=1e-15)


def test_attention_identical_keys_uniform_weights():
    attn = L.AdditiveAttention(4, 5, 3, Rng(7), -0.3, 0.3)
    key = _np_rng(10).normal(size=5)
    keys = np.stack([key] * 6)
    _, w = L.additive_attention(T.const(_np_rng(11).normal(size=4)), T.const(keys), attn)
    assert np.allclose(w.values, 1.0 / 6.0, atol=1e-12)


def test_attention_matches_direct_formula_oracle():
    attn = L.AdditiveAttention(4, 5, 3, Rng(8), -0.5, 0.5)
    q = _np_rng(12).normal(size=4)
    keys = _np_rng(13).normal(size=(3, 5))
    ctx, w = L.additive_attention(T.const(q), T.const(keys), attn)
    octx, ow, _ = _attn_oracle(q[None, :], keys, attn.w_q.values, attn.w_k.values,
                               attn.v.values)
    assert np.allclose(w.values, ow, atol=1e-12)
    assert np.allclose(ctx.values, octx, atol=1e-12)


def test_attention_weights_are_probability_vector():
    attn = L.AdditiveAttention(4, 5, 3, Rng(9), -0.5, 0.5)
    for seed in range(5):
        q = _np_rng(seed).normal(size=4)
        keys = _np_rng(seed + 100).normal(size=(7, 5))
        _, w = L.additive_attention(T.const(q), T.const(keys), attn)
        assert np.all(w.values >= 0)
        assert abs(w.values.sum() - 1.0) <= 1e-12


def test_pointer_scores_shape_and_argmax_consistency():
    attn = L.AdditiveAttention(4, 5, 3, Rng(10), -0.5, 0.5)
    q = T.const(_np_rng(14).normal(size=4))
    keys = T.const(_np_rng(15).normal(size=(9, 5)))
    logits = L.pointer_scores(q, keys, attn)
    assert logits.shape == (9,)
    p = T.softmax(logits)
    assert int(np.argmax(p.values)) == int(np.argmax(logits.values))


def test_pointer_scores_equal_attention_prenormalized_scores():
    attn = L.AdditiveAttention(4, 5, 3, Rng(11), -0.5, 0.5)
    q = _np_rng(16).normal(size=4)
    keys = _np_rng(17).normal(size=(6, 5))
    logits = L.pointer_scores(T.const(q), T.const(keys), attn)
    _, _, oracle_scores = _attn_oracle(q[None, :], keys, attn.w_q.values,
                                       attn.w_k.values, attn.v.values)
    assert np.allclose(logits.values, oracle_scores, atol=1e-12)
    _, w = L.additive_attention(T.const(q), T.const(keys), attn)
    e = np.exp(logits.values - logits.values.max())
    assert np.allclose(w.values, e / e.sum(), atol=1e-12)


def test_attention_gradients():
    attn = L.AdditiveAttention(3, 4, 3, Rng(12), -0.4, 0.4)
    q = _np_rng(18).normal(size=3)
    keys = _np_rng(19).normal(size=(5, 4))
    mixer = _np_rng(20).normal(size=4)

    def loss_fn():
        ctx, _ = L.additive_attention(T.const(q), T.const(keys), attn)
        return T.sum_all(T.mul(ctx, T.const(mixer)))

    assert T.finite_difference_check(loss_fn, attn.params, eps=1e-5) < 1e-4


def test_pointer_gradients():
    attn = L.AdditiveAttention(3, 4, 3, Rng(13), -0.4, 0.4)
    q = _np_rng(21).normal(size=3)
    keys = _np_rng(22).normal(size=(5, 4))

    def loss_fn():
        logits = L.pointer_scores(T.const(q), T.const(keys), attn)
        return T.sequence_cross_entropy(T.reshape(logits, (1, 5)), [2], [1.0])

    assert T.finite_difference_check(loss_fn, attn.params, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# MLP head / embeddings
# ---------------------------------------------------------------------------


def test_mlp_zero_weights_gives_uniform_distribution():
    head = L.MlpHead(5, [7], 6, Rng(14), -0.3, 0.3)
    for p in head.params.values():
        p.values[...] = 0.0
    logits = head.forward(T.const(_np_rng(23).normal(size=(1, 5))))
    probs = T.softmax(T.reshape(logits, (6,))).values
    assert np.allclose(probs, 1.0 / 6.0, atol=1e-15)


def test_mlp_six_logits():
    head = L.MlpHead(5, [100], 6, Rng(15), -0.1, 0.1)
    out = head.forward(T.const(_np_rng(24).normal(size=(3, 5))))
    assert out.shape == (3, 6)


def test_mlp_gradients():
    head = L.MlpHead(4, [6], 6, Rng(16), -0.4, 0.4)
    x = _np_rng(25).normal(size=(2, 4))

    def loss_fn():
        logits = head.forward(T.const(x))
        total, wsum = T.cross_entropy_rows(logits, [1, 4], [1.0, 1.0])
        return T.scale(total, 1.0 / wsum)

    assert T.finite_difference_check(loss_fn, head.params, eps=1e-5) < 1e-4


def test_embedding_lookup_exact_rows_and_scatter():
    table = T.const(_np_rng(26).normal(size=(6, 3)))
    out = L.embedding_lookup([4, 0, 4], table)
    assert np.array_equal(out.values[0], table.values[4])
    assert np.array_equal(out.values[1], table.values[0])
    T.sum_all(out).backward()
    assert np.array_equal(table.grad[4], np.full(3, 2.0))  # two lookups of row 4
    assert np.array_equal(table.grad[1], np.zeros(3))


def test_embedding_lookup_out_of_range():
    with pytest.raises(IndexError):
        L.embedding_lookup([7], T.zeros((4, 3)))
