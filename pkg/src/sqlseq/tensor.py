"""Minimal float64 autodiff kernel for the sequence models in this package.

All model state lives in :class:`Tensor` objects: a dense value buffer plus a
same-shape gradient buffer. Ops build a computation graph as they execute;
calling ``backward()`` on a scalar result walks that graph once in reverse
topological order and accumulates gradients into every reachable node.

Everything is 64-bit. The models here are desk-scale, and central-difference
gradient checking (``finite_difference_check``) wants the precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class OracleInvalidError(RuntimeError):
    """The gradient-check oracle cannot be trusted (loss is not deterministic)."""


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

_PCG_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1


class Rng:
    """PCG32 generator (pcg32, XSH-RR 64/32 variant).

    State transition ``s' = s * 6364136223846793005 + inc (mod 2^64)`` with
    the XSH-RR output permutation, seeded exactly like the PCG reference
    implementation. Pure integer arithmetic, so a given ``(seed, stream)``
    yields the same draw sequence on every platform, and any implementation
    of the same recipe in another language reproduces it bit for bit.

    Doubles take 53 bits from two consecutive 32-bit outputs. ``randint``
    reduces one 32-bit output modulo ``n`` (the tiny modulo bias is
    irrelevant at the ranges used here and keeps the recipe one line).
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._inc = (((self.stream << 1) | 1)) & _MASK64
        self._state = 0
        self._next_u32()
        self._state = (self._state + (self.seed & _MASK64)) & _MASK64
        self._next_u32()

    def _next_u32(self) -> int:
        old = self._state
        self._state = (old * _PCG_MULT + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def next_u32(self) -> int:
        """Next raw 32-bit output."""
        return self._next_u32()

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """One double in [lo, hi) with 53 bits of resolution."""
        hi53 = self._next_u32() >> 5
        lo53 = self._next_u32() >> 6
        u = (hi53 * 67108864.0 + lo53) / 9007199254740992.0
        return lo + (hi - lo) * u

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        nxt = self._next_u32
        span = hi - lo
        for i in range(n):
            u = ((nxt() >> 5) * 67108864.0 + (nxt() >> 6)) / 9007199254740992.0
            out[i] = lo + span * u
        return out.reshape(shape)

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self._next_u32() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(len(items))]


# ---------------------------------------------------------------------------
# Tensor and graph machinery
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array with a same-shape gradient buffer.

    Leaf tensors (parameters, constants) have no parents. Op results carry
    their parents and a closure that pushes ``self.grad`` back into them.
    """

    __slots__ = ("values", "grad", "parents", "_backward")

    def __init__(self, values, parents=(), backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def check_finite(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"non-finite values in {name}")
        return self

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into ``grad`` buffers."""
        if self.values.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad[...] = 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def const(values) -> Tensor:
    """Leaf tensor (no parents); used for inputs and fixed buffers."""
    return Tensor(values)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def uniform_init(shape, lo: float, hi: float, rng: Rng) -> Tensor:
    """Fresh leaf tensor with values drawn uniformly from [lo, hi)."""
    if not lo < hi:
        raise ValueError(f"uniform_init needs lo < hi, got [{lo}, {hi})")
    return Tensor(rng.uniform_array(tuple(shape), lo, hi))


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values, (a, b))

    def bw():
        a.grad += out.grad @ b.values.T
        b.grad += a.values.T @ out.grad

    out._backward = bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values, (a, b))

    def bw():
        a.grad += out.grad
        b.grad += out.grad

    out._backward = bw
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """[n, k] + [k] row-broadcast."""
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias shapes {x.shape} + {b.shape}")
    out = Tensor(x.values + b.values, (x, b))

    def bw():
        x.grad += out.grad
        b.grad += out.grad.sum(axis=0)

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} vs {b.shape}")
    out = Tensor(a.values * b.values, (a, b))

    def bw():
        a.grad += out.grad * b.values
        b.grad += out.grad * a.values

    out._backward = bw
    return out


def scale(x: Tensor, alpha: float) -> Tensor:
    out = Tensor(x.values * alpha, (x,))

    def bw():
        x.grad += out.grad * alpha

    out._backward = bw
    return out


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """[n, k] * [n, 1] column-broadcast."""
    if x.values.ndim != 2 or s.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows shapes {x.shape} * {s.shape}")
    out = Tensor(x.values * s.values, (x, s))

    def bw():
        x.grad += out.grad * s.values
        s.grad += (out.grad * x.values).sum(axis=1, keepdims=True)

    out._backward = bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = np.empty_like(x.values)
    pos = x.values >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-x.values[pos]))
    ex = np.exp(x.values[~pos])
    v[~pos] = ex / (1.0 + ex)
    out = Tensor(v, (x,))

    def bw():
        x.grad += out.grad * v * (1.0 - v)

    out._backward = bw
    return out


def tanh(x: Tensor) -> Tensor:
    v = np.tanh(x.values)
    out = Tensor(v, (x,))

    def bw():
        x.grad += out.grad * (1.0 - v * v)

    out._backward = bw
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts or any(p.values.ndim != 2 for p in parts):
        raise DimensionError("concat_cols needs 2-D tensors")
    n = parts[0].shape[0]
    if any(p.shape[0] != n for p in parts):
        raise DimensionError("concat_cols row counts differ")
    out = Tensor(np.concatenate([p.values for p in parts], axis=1), tuple(parts))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw():
        for p, o in zip(parts, offsets):
            p.grad += out.grad[:, o:o + p.shape[1]]

    out._backward = bw
    return out


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts or any(p.values.ndim != 2 for p in parts):
        raise DimensionError("concat_rows needs 2-D tensors")
    k = parts[0].shape[1]
    if any(p.shape[1] != k for p in parts):
        raise DimensionError("concat_rows column counts differ")
    out = Tensor(np.concatenate([p.values for p in parts], axis=0), tuple(parts))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw():
        for p, o in zip(parts, offsets):
            p.grad += out.grad[o:o + p.shape[0], :]

    out._backward = bw
    return out


def rows(x: Tensor, idx) -> Tensor:
    """Row gather; the backbone of embedding lookup.

    Backward scatter-adds into the gathered rows only, so a repeated index
    accumulates every contribution.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if x.values.ndim != 2:
        raise DimensionError("rows needs a 2-D tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    out = Tensor(x.values[idx], (x,))

    def bw():
        np.add.at(x.grad, idx, out.grad)

    out._backward = bw
    return out


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Each of the n rows repeated k times consecutively -> [n*k, d]."""
    if x.values.ndim != 2:
        raise DimensionError("repeat_rows needs a 2-D tensor")
    out = Tensor(np.repeat(x.values, k, axis=0), (x,))

    def bw():
        x.grad += out.grad.reshape(x.shape[0], k, x.shape[1]).sum(axis=1)

    out._backward = bw
    return out


def block_sum_rows(x: Tensor, k: int) -> Tensor:
    """Sum each consecutive block of k rows -> [n/k, d]; dual of repeat_rows."""
    if x.values.ndim != 2 or x.shape[0] % k != 0:
        raise DimensionError(f"block_sum_rows: {x.shape[0]} rows not divisible by {k}")
    n = x.shape[0] // k
    out = Tensor(x.values.reshape(n, k, x.shape[1]).sum(axis=1), (x,))

    def bw():
        x.grad += np.repeat(out.grad, k, axis=0)

    out._backward = bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.values.reshape(shape), (x,))

    def bw():
        x.grad += out.grad.reshape(x.shape)

    out._backward = bw
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.values.sum()), (x,))

    def bw():
        x.grad += out.grad[()]

    out._backward = bw
    return out


def softmax(logits: Tensor) -> Tensor:
    """Probability vector over a 1-D logit tensor, max-stabilized."""
    if logits.values.ndim != 1 or logits.values.size == 0:
        raise DimensionError("softmax needs a nonempty 1-D tensor")
    z = logits.values - logits.values.max()
    e = np.exp(z)
    p = e / e.sum()
    out = Tensor(p, (logits,))

    def bw():
        g = out.grad
        logits.grad += p * (g - (g * p).sum())

    out._backward = bw
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over a [n, k] tensor."""
    if x.values.ndim != 2 or x.values.size == 0:
        raise DimensionError("softmax_rows needs a nonempty 2-D tensor")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, (x,))

    def bw():
        g = out.grad
        x.grad += p * (g - (g * p).sum(axis=1, keepdims=True))

    out._backward = bw
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x [n, d], w [d, k], b [k]."""
    return add_bias(matmul(x, w), b)


def cross_entropy_rows(logits: Tensor, targets, weights) -> tuple[Tensor, float]:
    """Weighted NLL summed over rows: (sum_i w_i * -log p_i[t_i], sum_i w_i).

    The caller divides by the total weight once, so per-step losses from a
    batched unroll can be accumulated before normalizing.
    """
    t = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if logits.values.ndim != 2 or t.shape != (logits.shape[0],) or w.shape != t.shape:
        raise DimensionError(
            f"cross_entropy_rows shapes: logits {logits.shape}, targets {t.shape}, weights {w.shape}"
        )
    if np.any(w < 0):
        raise ValueError("cross_entropy_rows weights must be >= 0")
    n, v = logits.shape
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range for vocab of {v}")
    z = logits.values
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(se)
    nll = -logp[np.arange(n), t]
    out = Tensor(np.asarray((w * nll).sum()), (logits,))
    probs = e / se

    def bw():
        g = out.grad[()]
        gz = probs * w[:, None]
        gz[np.arange(n), t] -= w
        logits.grad += g * gz

    out._backward = bw
    return out, float(w.sum())


def sequence_cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Weighted per-step cross-entropy over a [T, V] logit sequence.

    loss = sum_t w_t * -log softmax(logits[t])[targets[t]] / sum_t w_t
    """
    total, wsum = cross_entropy_rows(logits, targets, weights)
    if wsum <= 0.0:
        raise ValueError("sequence_cross_entropy needs at least one positive weight")
    return scale(total, 1.0 / wsum)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def clip_gradients(tensors, lo: float, hi: float):
    """Clamp every gradient component into [lo, hi] in place; values untouched."""
    if not lo < hi:
        raise ValueError(f"clip range needs lo < hi, got ({lo}, {hi})")
    for t in tensors:
        np.clip(t.grad, lo, hi, out=t.grad)
    return tensors


@dataclass
class AdamState:
    """Per-parameter Adam moments; ``t`` advances by one per applied step."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param.values), v=np.zeros_like(param.values),
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: Tensor, state: AdamState, lr: float, name: str = "param") -> None:
    """One bias-corrected Adam update; zeroes ``param.grad`` afterwards."""
    if state.m.shape != param.values.shape:
        raise DimensionError(f"Adam state shape {state.m.shape} vs param {param.shape}")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter '{name}'")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    param.values -= lr * mhat / (np.sqrt(vhat) + state.eps)
    param.grad[...] = 0.0


class Adam:
    """Adam over a named parameter dict, one AdamState per tensor."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.states = {name: AdamState.for_param(p, beta1, beta2, eps)
                       for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            adam_step(p, self.states[name], self.lr, name=name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------


def finite_difference_check(loss_fn, params, eps: float = 1e-5,
                            max_samples_per_param: int = 8) -> float:
    """Worst relative error of analytic gradients vs central differences.

    ``loss_fn`` must rebuild the graph from the live ``params`` on every call
    and be deterministic; two baseline evaluations are compared bit for bit
    and a mismatch raises :class:`OracleInvalidError`. Components are sampled
    at evenly spaced flat indices so the check itself is deterministic.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]

    first = float(loss_fn().values)
    second = float(loss_fn().values)
    if first != second:
        raise OracleInvalidError(
            f"loss_fn is not deterministic ({first!r} vs {second!r})")

    for _, p in named:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in named}

    worst = 0.0
    for name, p in named:
        flat = p.values.reshape(-1)
        n = flat.size
        if n <= max_samples_per_param:
            idxs = range(n)
        else:
            idxs = np.unique(np.linspace(0, n - 1, max_samples_per_param).astype(int))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().values)
            flat[i] = orig - eps
            fm = float(loss_fn().values)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
    for _, p in named:
        p.zero_grad()
    return worst
