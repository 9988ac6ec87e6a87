"""Dataset deserialization and the question/SQL preprocessing pipeline.

Raw records are one JSON object per line with fields
``{question, header, types, sql: {sel, agg, conds}}``. The pipeline
tokenizes questions, hyphenates multi-word column names, aligns column
mentions inside questions to the hyphenated form, prefixes the fixed SQL
keyword block, linearizes the structured target, and (for the pointer
model) replicates inputs to a fixed cell size and derives per-token input
positions.

Display-form sequences keep the original casing of headers and the
uppercase keyword block; encoding to ids lowercases everything so that
keyword, header, and question/value surface forms share vocabulary
entries and pointer targets resolve by exact token equality.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD_ID, GO_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
PAD_TOKEN, GO_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<go>", "<eos>", "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, GO_TOKEN, EOS_TOKEN, UNK_TOKEN)

# Fixed 10-token prefix every augmented input starts with.
KEYWORD_PREFIX = ["SELECT", "FROM", "WHERE", "COUNT", "MIN", "MAX", "AVG", "SUM", "AND", "="]

# Aggregation index 0 means "no aggregation" and emits nothing.
AGG_KEYWORDS = ["", "max", "min", "count", "sum", "avg"]


class TruncationError(ValueError):
    """A sequence does not fit the fixed cell size; refusing to drop tokens."""


class UnpointableTokenError(ValueError):
    """A target token has no occurrence in the input sequence."""

    def __init__(self, token: str):
        super().__init__(f"target token {token!r} does not occur in the input")
        self.token = token


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class SqlTarget:
    """Structured target query: SELECT [agg] col [WHERE col = value AND ...]."""

    sel: int
    agg: int
    conds: list[tuple[int, str, str]] = field(default_factory=list)

    def validate(self, n_columns: int) -> None:
        if not 0 <= self.agg <= 5:
            raise DataError(f"agg index {self.agg} outside 0..5")
        if not 0 <= self.sel < n_columns:
            raise DataError(f"sel column {self.sel} outside header of {n_columns}")
        for col, _, _ in self.conds:
            if not 0 <= col < n_columns:
                raise DataError(f"condition column {col} outside header of {n_columns}")


@dataclass
class Example:
    question: str
    header: list[str]
    types: list[str]
    sql: SqlTarget

    def validate(self) -> None:
        if not self.header:
            raise DataError("empty header")
        if len(self.header) != len(self.types):
            raise DataError(f"{len(self.header)} columns but {len(self.types)} types")
        self.sql.validate(len(self.header))


def example_from_json(obj: dict) -> Example:
    sql = obj["sql"]
    conds = [(int(c[0]), str(c[1]), str(c[2])) for c in sql.get("conds", [])]
    ex = Example(
        question=str(obj["question"]),
        header=[str(h) for h in obj["header"]],
        types=[str(t) for t in obj["types"]],
        sql=SqlTarget(sel=int(sql["sel"]), agg=int(sql["agg"]), conds=conds),
    )
    ex.validate()
    return ex


def example_to_json(ex: Example) -> dict:
    return {
        "question": ex.question,
        "header": list(ex.header),
        "types": list(ex.types),
        "sql": {"sel": ex.sql.sel, "agg": ex.sql.agg,
                "conds": [[c, o, v] for c, o, v in ex.sql.conds]},
    }


def load_examples(path) -> list[Example]:
    """Read a JSON-lines dataset file; raises DataError with the line number."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                examples.append(example_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return examples


def save_examples(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Tokenization and augmentation
# ---------------------------------------------------------------------------


def tokenize_question(text: str) -> list[str]:
    """Lowercased whitespace tokens; strips one trailing '?' off the last token.

    Interior punctuation stays put ("u.s." survives intact).
    """
    if not text or not text.strip():
        raise DataError("empty question text")
    tokens = text.lower().split()
    if tokens and tokens[-1].endswith("?"):
        last = tokens[-1][:-1]
        if last:
            tokens[-1] = last
        else:
            tokens.pop()
    if not tokens:
        raise DataError("question is only a question mark")
    return tokens


def hyphenate_headers(header: list[str]) -> list[str]:
    """Multi-word column names become single hyphen-joined tokens."""
    out = []
    for name in header:
        if not name or not name.strip():
            raise DataError("empty column name")
        out.append("-".join(name.split()))
    return out


def align_columns(question_tokens: list[str], headers: list[str]) -> list[str]:
    """Replace question spans that spell out a column name with its hyphenated token.

    Headers must already be hyphenated. Matching is case-insensitive over the
    header's word sequence; the longest match wins, leftmost first, and the
    replacement is the lowercased header token so the question side stays
    lowercase.
    """
    word_seqs = []
    for h in headers:
        words = [w.lower() for w in h.split("-")]
        word_seqs.append((words, h.lower()))
    # Longest header first at any given start position.
    word_seqs.sort(key=lambda p: -len(p[0]))

    out: list[str] = []
    i = 0
    n = len(question_tokens)
    while i < n:
        replaced = False
        for words, token in word_seqs:
            k = len(words)
            if question_tokens[i:i + k] == words:
                out.append(token)
                i += k
                replaced = True
                break
        if not replaced:
            out.append(question_tokens[i])
            i += 1
    return out


def augment(example: Example, style: str = "keywords_first") -> list[str]:
    """Full input sequence: keyword block, hyphenated headers, aligned question.

    ``style="seq2sql"`` puts the columns before the keyword block instead
    (the alternative layout; not the default because a fixed keyword prefix
    keeps keyword positions constant for the pointer model).
    """
    q = align_columns(tokenize_question(example.question), hyphenate_headers(example.header))
    headers = hyphenate_headers(example.header)
    if style == "keywords_first":
        return list(KEYWORD_PREFIX) + headers + q
    if style == "seq2sql":
        return headers + list(KEYWORD_PREFIX) + q
    raise ValueError(f"unknown augmentation style {style!r}")


def tokenize_value(value: str) -> list[str]:
    """Condition values go through the question tokenizer so they can align
    with question tokens."""
    return tokenize_question(str(value))


def linearize_sql(sql: SqlTarget, header: list[str]) -> list[str]:
    """Flat lowercase target: select [agg] col from [where col = val (and ...)*].

    FROM carries no table name (single-table task); multi-word condition
    values are emitted as their individual tokens.
    """
    headers = hyphenate_headers(header)
    tokens = ["select"]
    if sql.agg > 0:
        tokens.append(AGG_KEYWORDS[sql.agg])
    tokens.append(headers[sql.sel].lower())
    tokens.append("from")
    if sql.conds:
        tokens.append("where")
        for i, (col, op, value) in enumerate(sql.conds):
            if i > 0:
                tokens.append("and")
            tokens.append(headers[col].lower())
            tokens.append(op)
            tokens.extend(tokenize_value(value))
    return tokens


@dataclass
class ParsedQuery:
    """Structured read-back of a linearized query."""

    agg: int
    sel: str
    conds: list[tuple[str, str]]  # (column token, value string), in emitted order


def parse_linearized(tokens: list[str]) -> ParsedQuery | None:
    """Inverse of :func:`linearize_sql` on its output grammar; None if unparseable."""
    if not tokens or tokens[0] != "select":
        return None
    i = 1
    agg = 0
    if i < len(tokens) and tokens[i] in AGG_KEYWORDS[1:]:
        agg = AGG_KEYWORDS.index(tokens[i])
        i += 1
    if i >= len(tokens):
        return None
    sel = tokens[i]
    i += 1
    if i >= len(tokens) or tokens[i] != "from":
        return None
    i += 1
    if i == len(tokens):
        return ParsedQuery(agg=agg, sel=sel, conds=[])
    if tokens[i] != "where":
        return None
    i += 1
    conds: list[tuple[str, str]] = []
    while i < len(tokens):
        col = tokens[i]
        i += 1
        if i >= len(tokens) or tokens[i] != "=":
            return None
        i += 1
        value: list[str] = []
        while i < len(tokens) and tokens[i] != "and":
            value.append(tokens[i])
            i += 1
        if not value:
            return None
        conds.append((col, " ".join(value)))
        if i < len(tokens):  # consume "and", require another condition
            i += 1
            if i == len(tokens):
                return None
    if not conds:
        return None
    return ParsedQuery(agg=agg, sel=sel, conds=conds)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Bijective token<->id map with PAD/GO/EOS/UNK pinned to ids 0..3."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the four reserved tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: list[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                if int(idx) != len(tokens):
                    raise DataError(f"{path}: vocabulary ids not contiguous at {idx}")
                tokens.append(tok)
        return cls(tokens)

    def checksum(self) -> int:
        """Order-sensitive fingerprint used for checkpoint compatibility checks."""
        h = 1469598103934665603  # FNV-1a 64
        for tok in self.id_to_token:
            for byte in tok.encode("utf-8"):
                h = ((h ^ byte) * 1099511628211) & ((1 << 64) - 1)
            h = ((h ^ 0x1F) * 1099511628211) & ((1 << 64) - 1)
        return h


def build_vocab(token_sequences, min_count: int = 1) -> Vocabulary:
    """Frequency-sorted vocabulary after the reserved block, ties lexicographic."""
    counts: Counter = Counter()
    total = 0
    for seq in token_sequences:
        counts.update(seq)
        total += 1
    if total == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [(tok, c) for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED_TOKENS) + [tok for tok, _ in kept])


# ---------------------------------------------------------------------------
# Pointer-model sequence shaping
# ---------------------------------------------------------------------------


def emphasize(ids: list, cell_size: int) -> list:
    """Cyclic replication of a sequence up to the fixed cell size.

    Replication, not padding: position i holds ids[i mod len(ids)], so no
    PAD symbol ever enters the input. Sequences longer than the cell raise
    rather than silently truncating.
    """
    if not ids:
        raise ValueError("emphasize needs a nonempty sequence")
    if len(ids) > cell_size:
        raise TruncationError(
            f"sequence of {len(ids)} does not fit cell size {cell_size}")
    n = len(ids)
    return [ids[i % n] for i in range(cell_size)]


def derive_pointer_targets(target_tokens: list[str], input_tokens: list[str]) -> list[int]:
    """Position of each target token's first occurrence in the input."""
    first: dict[str, int] = {}
    for pos, tok in enumerate(input_tokens):
        if tok not in first:
            first[tok] = pos
    out = []
    for tok in target_tokens:
        if tok not in first:
            raise UnpointableTokenError(tok)
        out.append(first[tok])
    return out


# ---------------------------------------------------------------------------
# Encoded pairs and batching
# ---------------------------------------------------------------------------


@dataclass
class EncodedPair:
    """One model-ready example: augmented input ids, target ids ending in EOS,
    and, for pointer data, gold input positions aligned with target_ids."""

    input_ids: list[int]
    target_ids: list[int]
    pointer_targets: list[int] | None = None

    def to_json(self) -> dict:
        obj = {"input_ids": self.input_ids, "target_ids": self.target_ids}
        if self.pointer_targets is not None:
            obj["pointer_targets"] = self.pointer_targets
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "EncodedPair":
        return cls(input_ids=list(obj["input_ids"]),
                   target_ids=list(obj["target_ids"]),
                   pointer_targets=list(obj["pointer_targets"])
                   if obj.get("pointer_targets") is not None else None)


@dataclass
class Batch:
    """Equal-length stack of pairs; weights are 0 exactly on target padding."""

    input_ids: np.ndarray       # [B, T] int64
    input_lengths: np.ndarray   # [B] int64
    target_ids: np.ndarray      # [B, S] int64
    weights: np.ndarray         # [B, S] float64
    pointer_targets: np.ndarray | None = None  # [B, S] int64

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]


def make_batch(pairs: list[EncodedPair]) -> Batch:
    b = len(pairs)
    t_max = max(len(p.input_ids) for p in pairs)
    s_max = max(len(p.target_ids) for p in pairs)
    inputs = np.full((b, t_max), PAD_ID, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    targets = np.full((b, s_max), PAD_ID, dtype=np.int64)
    weights = np.zeros((b, s_max), dtype=np.float64)
    with_pointers = all(p.pointer_targets is not None for p in pairs)
    pointers = np.zeros((b, s_max), dtype=np.int64) if with_pointers else None
    for i, p in enumerate(pairs):
        lengths[i] = len(p.input_ids)
        inputs[i, :len(p.input_ids)] = p.input_ids
        targets[i, :len(p.target_ids)] = p.target_ids
        weights[i, :len(p.target_ids)] = 1.0
        if with_pointers:
            pointers[i, :len(p.pointer_targets)] = p.pointer_targets
    return Batch(inputs, lengths, targets, weights, pointers)


def bucket_batches(pairs: list[EncodedPair], batch_size: int, rng) -> list[Batch]:
    """Sort by input length, cut into contiguous batches, shuffle batch order.

    The sort is stable, so for a fixed rng the batching is fully
    deterministic and every pair lands in exactly one batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sorted(range(len(pairs)), key=lambda i: len(pairs[i].input_ids))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)
    return [make_batch([pairs[i] for i in chunk]) for chunk in chunks]


# ---------------------------------------------------------------------------
# End-to-end preprocessing
# ---------------------------------------------------------------------------


@dataclass
class PreprocessStats:
    input_vocab_size: int = 0
    target_vocab_size: int = 0
    n_examples: dict = field(default_factory=dict)
    dropped_unpointable: dict = field(default_factory=dict)
    dropped_too_long: dict = field(default_factory=dict)
    input_length_histogram: dict = field(default_factory=dict)
    target_length_histogram: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "input_vocab_size": self.input_vocab_size,
            "target_vocab_size": self.target_vocab_size,
            "n_examples": self.n_examples,
            "dropped_unpointable": self.dropped_unpointable,
            "dropped_too_long": self.dropped_too_long,
            "input_length_histogram": self.input_length_histogram,
            "target_length_histogram": self.target_length_histogram,
        }


def input_tokens_for(example: Example, style: str = "keywords_first") -> list[str]:
    """Lowercased augmented input sequence, as consumed by the encoder."""
    return [t.lower() for t in augment(example, style=style)]


def target_tokens_for(example: Example) -> list[str]:
    return linearize_sql(example.sql, example.header)


def build_vocabularies(train_examples: list[Example], min_count: int = 1,
                       style: str = "keywords_first") -> tuple[Vocabulary, Vocabulary]:
    """Input and target vocabularies from the training split only."""
    in_seqs = [input_tokens_for(ex, style) for ex in train_examples]
    tgt_seqs = [target_tokens_for(ex) for ex in train_examples]
    return build_vocab(in_seqs, min_count), build_vocab(tgt_seqs, min_count)


def encode_examples(examples: list[Example], input_vocab: Vocabulary,
                    target_vocab: Vocabulary,
                    style: str = "keywords_first") -> list[EncodedPair]:
    """Standard (vocabulary-decoder) pairs: augmented input, target + EOS."""
    pairs = []
    for ex in examples:
        input_ids = input_vocab.encode(input_tokens_for(ex, style))
        target_ids = target_vocab.encode(target_tokens_for(ex)) + [EOS_ID]
        pairs.append(EncodedPair(input_ids, target_ids))
    return pairs


def encode_pointer_examples(examples: list[Example], input_vocab: Vocabulary,
                            target_vocab: Vocabulary, cell_size: int,
                            eos_slot: bool = True,
                            style: str = "keywords_first"
                            ) -> tuple[list[EncodedPair], int, int]:
    """Pointer pairs with emphasized inputs and gold positions.

    With ``eos_slot`` the input is replicated to cell_size - 1 and a
    dedicated EOS slot occupies the final position, giving the decoder a
    position that means "stop". Without it the raw replication scheme is
    used: both input and target are replicated to the full cell size and
    every decode step carries weight.

    Returns (pairs, n_dropped_unpointable, n_dropped_too_long); examples a
    pointer model cannot express are dropped, not mangled.
    """
    pairs: list[EncodedPair] = []
    dropped_unpointable = 0
    dropped_too_long = 0
    for ex in examples:
        in_tokens = input_tokens_for(ex, style)
        tgt_tokens = target_tokens_for(ex)
        try:
            if eos_slot:
                emph = emphasize(in_tokens, cell_size - 1) + [EOS_TOKEN]
                ptr_tokens = tgt_tokens + [EOS_TOKEN]
            else:
                emph = emphasize(in_tokens, cell_size)
                ptr_tokens = emphasize(tgt_tokens, cell_size)
        except TruncationError:
            dropped_too_long += 1
            continue
        try:
            positions = derive_pointer_targets(ptr_tokens, emph)
        except UnpointableTokenError:
            dropped_unpointable += 1
            continue
        input_ids = input_vocab.encode(emph)
        target_ids = [EOS_ID if t == EOS_TOKEN else target_vocab.encode_token(t)
                      for t in ptr_tokens]
        pairs.append(EncodedPair(input_ids, target_ids, positions))
    return pairs, dropped_unpointable, dropped_too_long


def length_histogram(lengths) -> dict:
    hist: Counter = Counter(int(n) for n in lengths)
    return {str(k): hist[k] for k in sorted(hist)}


def save_pairs(pairs: list[EncodedPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def load_pairs(path) -> list[EncodedPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                pairs.append(EncodedPair.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return pairs
