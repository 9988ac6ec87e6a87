"""Parameterized layers: embeddings, stacked LSTM cells, bidirectional
encoding, additive attention, pointer scoring, and a small MLP head.

Layers own named parameter tensors (flat ``dict[str, Tensor]``) so a model
can collect everything it trains into one container for the optimizer and
the checkpoint writer. All step functions are batched: activations are
``[batch, features]`` tensors.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor

GATES = ("i", "f", "g", "o")


def embedding_lookup(ids, table: Tensor) -> Tensor:
    """Rows of the embedding table for a sequence of token ids.

    Backward scatters into the looked-up rows only; a repeated id
    accumulates both contributions. PAD rows participate like any other —
    masking happens through loss weights, not here.
    """
    return T.rows(table, ids)


def lstm_cell_step(x: Tensor, h: Tensor, c: Tensor, p: dict[str, Tensor]
                   ) -> tuple[Tensor, Tensor]:
    """One LSTM cell update.

    i, f, o = sigmoid(x W + h U + b); g = tanh(...);
    c' = f*c + i*g; h' = o * tanh(c').
    ``p`` maps "Wi","Ui","bi",...,"Wo","Uo","bo" to the gate parameters.
    """
    def gate(name, squash):
        pre = T.add_bias(T.add(T.matmul(x, p["W" + name]), T.matmul(h, p["U" + name])),
                         p["b" + name])
        return squash(pre)

    i = gate("i", T.sigmoid)
    f = gate("f", T.sigmoid)
    g = gate("g", T.tanh)
    o = gate("o", T.sigmoid)
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


class LstmStack:
    """A stack of LSTM layers unrolled over a token sequence.

    Layer l consumes layer l-1's hidden sequence; ``run`` returns the top
    layer's hidden at every step plus the final (h, c) of every layer.
    """

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int,
                 rng: Rng, lo: float, hi: float, prefix: str):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        for layer in range(num_layers):
            in_dim = input_dim if layer == 0 else hidden_dim
            for gate_name in GATES:
                base = f"{prefix}.l{layer}"
                self.params[f"{base}.W{gate_name}"] = T.uniform_init([in_dim, hidden_dim], lo, hi, rng)
                self.params[f"{base}.U{gate_name}"] = T.uniform_init([hidden_dim, hidden_dim], lo, hi, rng)
                self.params[f"{base}.b{gate_name}"] = T.uniform_init([hidden_dim], lo, hi, rng)

    def layer_params(self, layer: int) -> dict[str, Tensor]:
        base = f"{self.prefix}.l{layer}"
        return {f"{kind}{g}": self.params[f"{base}.{kind}{g}"]
                for g in GATES for kind in ("W", "U", "b")}

    def initial_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        return [(T.zeros((batch, self.hidden_dim)), T.zeros((batch, self.hidden_dim)))
                for _ in range(self.num_layers)]

    def step(self, x: Tensor, state: list[tuple[Tensor, Tensor]]
             ) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        new_state = []
        inp = x
        for layer in range(self.num_layers):
            h, c = state[layer]
            h, c = lstm_cell_step(inp, h, c, self.layer_params(layer))
            new_state.append((h, c))
            inp = h
        return inp, new_state

    def run(self, inputs: list[Tensor], state=None
            ) -> tuple[list[Tensor], list[tuple[Tensor, Tensor]]]:
        if not inputs:
            raise T.DimensionError("LstmStack.run needs at least one step")
        if state is None:
            state = self.initial_state(inputs[0].shape[0])
        hiddens = []
        for x in inputs:
            top, state = self.step(x, state)
            hiddens.append(top)
        return hiddens, state


def unroll(inputs: list[Tensor], init, stack: LstmStack):
    """Static unroll over a fixed-length input list; see LstmStack.run."""
    return stack.run(inputs, init)


class BidirectionalEncoder:
    """Forward and backward LSTM stacks over the same input.

    Per-position outputs are the concatenated [fwd, bwd] hiddens (2H wide);
    the final state is the concatenation of both directions' top-layer
    finals passed through a learned projection back to H, so a size-H
    decoder can start from it.
    """

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int,
                 rng: Rng, lo: float, hi: float, prefix: str = "enc"):
        self.hidden_dim = hidden_dim
        self.fwd = LstmStack(input_dim, hidden_dim, num_layers, rng, lo, hi, f"{prefix}.fwd")
        self.bwd = LstmStack(input_dim, hidden_dim, num_layers, rng, lo, hi, f"{prefix}.bwd")
        self.params: dict[str, Tensor] = {}
        self.params.update(self.fwd.params)
        self.params.update(self.bwd.params)
        for kind in ("h", "c"):
            self.params[f"{prefix}.merge.W{kind}"] = T.uniform_init(
                [2 * hidden_dim, hidden_dim], lo, hi, rng)
            self.params[f"{prefix}.merge.b{kind}"] = T.uniform_init(
                [hidden_dim], lo, hi, rng)
        self.prefix = prefix

    def run(self, inputs: list[Tensor]) -> tuple[list[Tensor], tuple[Tensor, Tensor]]:
        fwd_h, fwd_state = self.fwd.run(inputs)
        bwd_h_rev, bwd_state = self.bwd.run(list(reversed(inputs)))
        bwd_h = list(reversed(bwd_h_rev))
        outputs = [T.concat_cols([f, b]) for f, b in zip(fwd_h, bwd_h)]
        h_cat = T.concat_cols([fwd_state[-1][0], bwd_state[-1][0]])
        c_cat = T.concat_cols([fwd_state[-1][1], bwd_state[-1][1]])
        h0 = T.affine(h_cat, self.params[f"{self.prefix}.merge.Wh"],
                      self.params[f"{self.prefix}.merge.bh"])
        c0 = T.affine(c_cat, self.params[f"{self.prefix}.merge.Wc"],
                      self.params[f"{self.prefix}.merge.bc"])
        return outputs, (h0, c0)


def bidirectional_encode(inputs: list[Tensor], encoder: BidirectionalEncoder):
    return encoder.run(inputs)


class AdditiveAttention:
    """Additive (concat) attention: score_t = v . tanh(Wk key_t + Wq query)."""

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int,
                 rng: Rng, lo: float, hi: float, prefix: str = "attn"):
        self.key_dim = key_dim
        self.attn_dim = attn_dim
        self.params = {
            f"{prefix}.Wq": T.uniform_init([query_dim, attn_dim], lo, hi, rng),
            f"{prefix}.Wk": T.uniform_init([key_dim, attn_dim], lo, hi, rng),
            f"{prefix}.v": T.uniform_init([attn_dim, 1], lo, hi, rng),
        }
        self.prefix = prefix

    @property
    def w_q(self) -> Tensor:
        return self.params[f"{self.prefix}.Wq"]

    @property
    def w_k(self) -> Tensor:
        return self.params[f"{self.prefix}.Wk"]

    @property
    def v(self) -> Tensor:
        return self.params[f"{self.prefix}.v"]

    def project_keys(self, keys_flat: Tensor) -> Tensor:
        """Precompute Wk . key for a whole [B*T, key_dim] block once."""
        return T.matmul(keys_flat, self.w_k)

    def scores(self, query: Tensor, keys_proj: Tensor, t_len: int) -> Tensor:
        """Unnormalized attention logits [B, T] for a [B, query_dim] query."""
        q = T.repeat_rows(T.matmul(query, self.w_q), t_len)
        s = T.matmul(T.tanh(T.add(keys_proj, q)), self.v)
        return T.reshape(s, (query.shape[0], t_len))

    def context(self, weights: Tensor, keys_flat: Tensor, t_len: int) -> Tensor:
        """Attention-weighted sum of keys: [B, T] weights -> [B, key_dim]."""
        w_col = T.reshape(weights, (weights.size, 1))
        return T.block_sum_rows(T.scale_rows(keys_flat, w_col), t_len)


def additive_attention(query: Tensor, keys: Tensor, params: AdditiveAttention
                       ) -> tuple[Tensor, Tensor]:
    """Single-sequence attention: query [H], keys [T, K] -> (context [K], weights [T])."""
    t_len = keys.shape[0]
    q2 = T.reshape(query, (1, query.size))
    scores = params.scores(q2, params.project_keys(keys), t_len)
    weights = T.softmax(T.reshape(scores, (t_len,)))
    ctx = params.context(T.reshape(weights, (1, t_len)), keys, t_len)
    return T.reshape(ctx, (keys.shape[1],)), weights


def pointer_scores(query: Tensor, keys: Tensor, params: AdditiveAttention) -> Tensor:
    """Unnormalized additive-attention scores as logits over input positions.

    No context vector and no vocabulary projection: the score vector itself
    is the output distribution's logits, so the prediction space is exactly
    the input positions.
    """
    t_len = keys.shape[0]
    q2 = T.reshape(query, (1, query.size))
    scores = params.scores(q2, params.project_keys(keys), t_len)
    return T.reshape(scores, (t_len,))


class MlpHead:
    """affine -> tanh -> ... -> affine classifier head."""

    def __init__(self, input_dim: int, hidden_sizes: list[int], n_classes: int,
                 rng: Rng, lo: float, hi: float, prefix: str = "mlp"):
        self.sizes = [input_dim] + list(hidden_sizes) + [n_classes]
        self.n_layers = len(self.sizes) - 1
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        for k in range(self.n_layers):
            self.params[f"{prefix}.l{k}.W"] = T.uniform_init(
                [self.sizes[k], self.sizes[k + 1]], lo, hi, rng)
            self.params[f"{prefix}.l{k}.b"] = T.uniform_init([self.sizes[k + 1]], lo, hi, rng)

    def forward(self, x: Tensor) -> Tensor:
        out = x
        for k in range(self.n_layers):
            out = T.affine(out, self.params[f"{self.prefix}.l{k}.W"],
                           self.params[f"{self.prefix}.l{k}.b"])
            if k < self.n_layers - 1:
                out = T.tanh(out)
        return out


def mlp_forward(x: Tensor, head: MlpHead) -> Tensor:
    return head.forward(x)
