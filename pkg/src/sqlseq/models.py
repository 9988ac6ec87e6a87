"""The five sequence-to-sequence variants, assembled from the layer kit.

All variants share the same skeleton: embed input ids, run a 2-layer LSTM
encoder, seed a 2-layer LSTM decoder with the encoder's final top-layer
state (copied per decoder layer), and read per-step logits off the decoder.

variant        wiring change
-------        -------------
vanilla        none
reversed       source sequence reversed at batch time, target untouched
bidirectional  encoder swapped for a forward+backward pair, merged to size H
attention      bidirectional encoder + additive attention; the context
               vector is concatenated with the decoder hidden before the
               output projection
pointer        vocabulary projection replaced by attention scores over the
               input positions; fixed static length (cell_size) on both
               sides, decoder inputs drawn from the *input* embedding at
               the pointed position

Batches are teacher-forced: the decoder consumes GO plus the gold prefix
(gold positions for the pointer variant) and the loss is per-step weighted
cross-entropy with weight 0 on padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from . import layers as L
from .tensor import Rng, Tensor
from .text import Batch, GO_ID, EOS_ID

VARIANTS = ("vanilla", "reversed", "bidirectional", "attention", "pointer")


class ConfigError(ValueError):
    """Inconsistent or incomplete model/training configuration."""


class ModelDataError(ValueError):
    """A batch does not carry what the model variant needs."""


@dataclass
class ModelConfig:
    variant: str = "vanilla"
    hidden: int = 200
    layers: int = 2
    embed: int = 300
    cell_size: int | None = None       # pointer only; fixed static length
    max_decode_len: int = 32
    init_lo: float = -0.1
    init_hi: float = 0.1
    seed: int = 2
    project_keys: bool = True          # attention keys 2H -> H before scoring
    pointer_eos_slot: bool = True      # reserve the last input position for EOS

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if min(self.hidden, self.layers, self.embed, self.max_decode_len) < 1:
            raise ConfigError("hidden, layers, embed, max_decode_len must be >= 1")
        if not self.init_lo < self.init_hi:
            raise ConfigError(f"init range ({self.init_lo}, {self.init_hi}) is empty")
        if self.variant == "pointer":
            if self.cell_size is None or self.cell_size < 2:
                raise ConfigError("pointer variant needs cell_size >= 2 "
                                  "(encoder and decoder share one static length)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        cfg = cls(**obj)
        cfg.validate()
        return cfg


@dataclass
class Prediction:
    """Greedy decode result; the EOS itself is not part of the output."""

    token_ids: list[int]
    positions: list[int] | None     # pointer variant only
    stopped_by: str                 # "eos" | "max_len"


def reverse_input(ids: list) -> list:
    """Source-side reversal; the target is never touched."""
    return list(reversed(ids))


def _vocab_size(vocab) -> int:
    return vocab if isinstance(vocab, int) else len(vocab)


class Seq2SeqModel:
    """One built variant: parameter tensors plus forward/decode logic."""

    def __init__(self, config: ModelConfig, input_vocab_size: int,
                 target_vocab_size: int):
        config.validate()
        self.config = config
        self.input_vocab_size = input_vocab_size
        self.target_vocab_size = target_vocab_size
        cfg = config
        rng = Rng(cfg.seed)
        lo, hi = cfg.init_lo, cfg.init_hi
        self.params: dict[str, Tensor] = {}

        self.params["embed.in"] = T.uniform_init([input_vocab_size, cfg.embed], lo, hi, rng)
        if cfg.variant != "pointer":
            self.params["embed.tgt"] = T.uniform_init([target_vocab_size, cfg.embed], lo, hi, rng)

        if cfg.variant in ("bidirectional", "attention"):
            self.encoder = L.BidirectionalEncoder(cfg.embed, cfg.hidden, cfg.layers,
                                                  rng, lo, hi, prefix="enc")
            self.params.update(self.encoder.params)
            key_dim = 2 * cfg.hidden
        else:
            self.encoder = L.LstmStack(cfg.embed, cfg.hidden, cfg.layers, rng, lo, hi,
                                       prefix="enc")
            self.params.update(self.encoder.params)
            key_dim = cfg.hidden

        self.decoder = L.LstmStack(cfg.embed, cfg.hidden, cfg.layers, rng, lo, hi,
                                   prefix="dec")
        self.params.update(self.decoder.params)

        self.attention = None
        self.key_dim = key_dim
        if cfg.variant == "attention":
            if cfg.project_keys:
                self.params["keyproj.W"] = T.uniform_init([key_dim, cfg.hidden], lo, hi, rng)
                self.params["keyproj.b"] = T.uniform_init([cfg.hidden], lo, hi, rng)
                self.key_dim = cfg.hidden
            self.attention = L.AdditiveAttention(cfg.hidden, self.key_dim, cfg.hidden,
                                                 rng, lo, hi, prefix="attn")
            self.params.update(self.attention.params)
        elif cfg.variant == "pointer":
            self.attention = L.AdditiveAttention(cfg.hidden, self.key_dim, cfg.hidden,
                                                 rng, lo, hi, prefix="ptr")
            self.params.update(self.attention.params)

        if cfg.variant != "pointer":
            out_in = cfg.hidden + (self.key_dim if cfg.variant == "attention" else 0)
            self.params["out.W"] = T.uniform_init([out_in, target_vocab_size], lo, hi, rng)
            self.params["out.b"] = T.uniform_init([target_vocab_size], lo, hi, rng)

    # -- encoding ----------------------------------------------------------

    def _prepare_input_ids(self, input_ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        if self.config.variant != "reversed":
            return input_ids
        out = input_ids.copy()
        for b in range(out.shape[0]):
            n = int(lengths[b])
            out[b, :n] = out[b, :n][::-1]
        return out

    def _encode(self, input_ids: np.ndarray, lengths: np.ndarray):
        """Returns (keys context or None, decoder initial state).

        Keys context is (keys_flat [B*T, K] row-major per example, keys_proj,
        T) for the attention/pointer variants.
        """
        ids = self._prepare_input_ids(input_ids, lengths)
        b, t_len = ids.shape
        emb = self.params["embed.in"]
        steps = [L.embedding_lookup(ids[:, t], emb) for t in range(t_len)]

        if isinstance(self.encoder, L.BidirectionalEncoder):
            hiddens, (h0, c0) = self.encoder.run(steps)
        else:
            hiddens, final = self.encoder.run(steps)
            h0, c0 = final[-1]
        # Encoder's last-layer final state, copied into every decoder layer.
        dec_state = [(h0, c0) for _ in range(self.config.layers)]

        keys_ctx = None
        if self.config.variant in ("attention", "pointer"):
            stacked = T.concat_rows(hiddens)  # [(t, b)] row order
            perm = (np.arange(t_len)[None, :] * b + np.arange(b)[:, None]).reshape(-1)
            keys_flat = T.rows(stacked, perm)  # -> [(b, t)] row order
            if self.config.variant == "attention" and self.config.project_keys:
                keys_flat = T.affine(keys_flat, self.params["keyproj.W"],
                                     self.params["keyproj.b"])
            keys_ctx = (keys_flat, self.attention.project_keys(keys_flat), t_len)
        return keys_ctx, dec_state

    # -- decoding steps ------------------------------------------------------

    def _decoder_embedding(self) -> Tensor:
        return self.params["embed.in" if self.config.variant == "pointer" else "embed.tgt"]

    def _step_logits(self, x: Tensor, dec_state, keys_ctx):
        h_top, dec_state = self.decoder.step(x, dec_state)
        if self.config.variant == "pointer":
            keys_flat, keys_proj, t_len = keys_ctx
            logits = self.attention.scores(h_top, keys_proj, t_len)
        elif self.config.variant == "attention":
            keys_flat, keys_proj, t_len = keys_ctx
            scores = self.attention.scores(h_top, keys_proj, t_len)
            weights = T.softmax_rows(scores)
            ctx = self.attention.context(weights, keys_flat, t_len)
            logits = T.affine(T.concat_cols([h_top, ctx]), self.params["out.W"],
                              self.params["out.b"])
        else:
            logits = T.affine(h_top, self.params["out.W"], self.params["out.b"])
        return logits, dec_state

    # -- training forward ----------------------------------------------------

    def forward_teacher_forced(self, batch: Batch):
        """Teacher-forced pass over one batch.

        Returns (per-step logits, loss tensor, stats dict with weighted token
        counts). Targets are vocabulary ids, or gold input positions for the
        pointer variant.
        """
        cfg = self.config
        is_pointer = cfg.variant == "pointer"
        if is_pointer:
            if batch.pointer_targets is None:
                raise ModelDataError("pointer variant needs batches with pointer_targets")
            if batch.input_ids.shape[1] != cfg.cell_size:
                raise ModelDataError(
                    f"pointer batch input length {batch.input_ids.shape[1]} != "
                    f"cell_size {cfg.cell_size}")
        keys_ctx, dec_state = self._encode(batch.input_ids, batch.input_lengths)

        b, s_len = batch.target_ids.shape
        targets = batch.pointer_targets if is_pointer else batch.target_ids
        emb = self._decoder_embedding()

        step_logits = []
        loss_sum = None
        weight_total = 0.0
        correct = 0.0
        for t in range(s_len):
            if t == 0:
                prev_ids = np.full(b, GO_ID, dtype=np.int64)
            elif is_pointer:
                prev_pos = batch.pointer_targets[:, t - 1]
                prev_ids = batch.input_ids[np.arange(b), prev_pos]
            else:
                prev_ids = batch.target_ids[:, t - 1]
            x = L.embedding_lookup(prev_ids, emb)
            logits, dec_state = self._step_logits(x, dec_state, keys_ctx)
            step_logits.append(logits)
            w = batch.weights[:, t]
            part, wsum = T.cross_entropy_rows(logits, targets[:, t], w)
            loss_sum = part if loss_sum is None else T.add(loss_sum, part)
            weight_total += wsum
            pred = logits.values.argmax(axis=1)
            correct += float(((pred == targets[:, t]) * w).sum())
        if weight_total <= 0.0:
            raise ModelDataError("batch carries no positive loss weight")
        loss = T.scale(loss_sum, 1.0 / weight_total)
        stats = {"correct_tokens": correct, "total_tokens": weight_total,
                 "loss": float(loss.values)}
        return step_logits, loss, stats

    # -- greedy decoding -------------------------------------------------------

    def greedy_decode(self, input_ids: list) -> Prediction:
        """Feed back the argmax at each step; stop on EOS or the length cap.

        For the pointer variant the argmax is an input position and the next
        decoder input is the embedding of the *input token at that position*.
        """
        cfg = self.config
        is_pointer = cfg.variant == "pointer"
        ids = np.asarray(input_ids, dtype=np.int64)[None, :]
        if is_pointer and ids.shape[1] != cfg.cell_size:
            raise ModelDataError(
                f"pointer decode input length {ids.shape[1]} != cell_size {cfg.cell_size}")
        lengths = np.array([ids.shape[1]], dtype=np.int64)
        keys_ctx, dec_state = self._encode(ids, lengths)
        emb = self._decoder_embedding()
        max_len = cfg.cell_size if is_pointer else cfg.max_decode_len

        token_ids: list[int] = []
        positions: list[int] | None = [] if is_pointer else None
        prev_id = GO_ID
        stopped_by = "max_len"
        for _ in range(max_len):
            x = L.embedding_lookup(np.array([prev_id]), emb)
            logits, dec_state = self._step_logits(x, dec_state, keys_ctx)
            choice = int(logits.values.argmax())
            if is_pointer:
                tok = int(ids[0, choice])
                if cfg.pointer_eos_slot and tok == EOS_ID:
                    stopped_by = "eos"
                    break
                positions.append(choice)
                token_ids.append(tok)
                prev_id = tok
            else:
                if choice == EOS_ID:
                    stopped_by = "eos"
                    break
                token_ids.append(choice)
                prev_id = choice
        return Prediction(token_ids=token_ids, positions=positions, stopped_by=stopped_by)


def build_model(config: ModelConfig, vocabs) -> Seq2SeqModel:
    """Construct a variant from (input vocabulary, target vocabulary).

    ``vocabs`` may be Vocabulary objects or plain integer sizes.
    """
    input_vocab, target_vocab = vocabs
    return Seq2SeqModel(config, _vocab_size(input_vocab), _vocab_size(target_vocab))
