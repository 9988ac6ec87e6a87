"""Sequence evaluation: exact match, bag-of-words overlap, positional
accuracy for pointer runs, and a per-clause breakdown of parsed queries.

Counts are integers right up to a single float division, so results match
an exact-rational reference bit for bit. The bag-of-words denominator is
max(len(pred), len(ref)) — truncation and over-generation are penalized
symmetrically; the |ref|-denominator variant is reported alongside.
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .text import (DataError, EOS_ID, EOS_TOKEN, PAD_ID, PAD_TOKEN,
                   parse_linearized)


class UndefinedMetricError(ValueError):
    """The metric's denominator is empty."""


def strip_sequence(tokens: list) -> list:
    """Drop EOS and PAD markers (token or id form) before comparison."""
    drop = {EOS_TOKEN, PAD_TOKEN, EOS_ID, PAD_ID}
    return [t for t in tokens if t not in drop]


def exact_match(pred: list, ref: list) -> int:
    """1 iff the sequences are identical after stripping EOS/padding."""
    return 1 if strip_sequence(pred) == strip_sequence(ref) else 0


def bow_counts(pred: list, ref: list) -> tuple[int, int]:
    """(multiset intersection size, max length) — the exact rational parts."""
    if not ref:
        raise UndefinedMetricError("bag-of-words accuracy needs a nonempty reference")
    inter = sum((Counter(pred) & Counter(ref)).values())
    return inter, max(len(pred), len(ref))


def bow_accuracy(pred: list, ref: list) -> float:
    num, den = bow_counts(pred, ref)
    return num / den


def bow_accuracy_ref_len(pred: list, ref: list) -> float:
    """Same overlap count with |ref| as the denominator (logged alongside)."""
    if not ref:
        raise UndefinedMetricError("bag-of-words accuracy needs a nonempty reference")
    inter = sum((Counter(pred) & Counter(ref)).values())
    return inter / len(ref)


def positional_counts(pred: list, ref: list) -> tuple[int, int]:
    if not ref:
        raise UndefinedMetricError("positional accuracy needs a nonempty reference")
    hits = sum(1 for a, b in zip(pred, ref) if a == b)
    return hits, max(len(pred), len(ref))


def positional_accuracy(pred: list, ref: list) -> float:
    """Index-by-index agreement over max(len(pred), len(ref))."""
    num, den = positional_counts(pred, ref)
    return num / den


@dataclass
class ClauseFlags:
    """Correctness of each clause of a predicted query vs the gold one."""

    parsed: bool
    agg: bool
    sel: bool
    where: bool


def clause_breakdown(pred_tokens: list[str], ref_tokens: list[str]) -> ClauseFlags:
    """Parse both sides and compare (aggregation, select column, where set).

    Conditions compare as an unordered multiset. A prediction that does not
    parse scores all-false (models emit free text early in training); a
    reference that does not parse is a data error.
    """
    ref = parse_linearized(strip_sequence(ref_tokens))
    if ref is None:
        raise DataError(f"gold query does not parse: {' '.join(map(str, ref_tokens))}")
    pred = parse_linearized(strip_sequence(pred_tokens))
    if pred is None:
        return ClauseFlags(parsed=False, agg=False, sel=False, where=False)
    return ClauseFlags(
        parsed=True,
        agg=pred.agg == ref.agg,
        sel=pred.sel == ref.sel,
        where=sorted(pred.conds) == sorted(ref.conds),
    )


# ---------------------------------------------------------------------------
# Split-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class ExampleScore:
    index: int
    exact: int
    bow: float
    bow_ref_len: float
    positional: float | None
    clauses: ClauseFlags
    pred: str
    ref: str


@dataclass
class MetricsReport:
    n_examples: int
    exact_match: float
    bow_accuracy: float
    bow_accuracy_ref_len: float
    positional_accuracy: float | None
    agg_accuracy: float
    sel_accuracy: float
    where_accuracy: float
    parse_failure_rate: float
    worst: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "exact_match": self.exact_match,
            "bow_accuracy": self.bow_accuracy,
            "bow_accuracy_ref_len": self.bow_accuracy_ref_len,
            "positional_accuracy": self.positional_accuracy,
            "agg_accuracy": self.agg_accuracy,
            "sel_accuracy": self.sel_accuracy,
            "where_accuracy": self.where_accuracy,
            "parse_failure_rate": self.parse_failure_rate,
            "worst": self.worst,
        }

    def to_text(self) -> str:
        lines = [
            f"examples            {self.n_examples}",
            f"exact match         {self.exact_match:.4f}",
            f"bow accuracy        {self.bow_accuracy:.4f}  (max-length denominator)",
            f"bow accuracy (ref)  {self.bow_accuracy_ref_len:.4f}  (reference-length denominator)",
        ]
        if self.positional_accuracy is not None:
            lines.append(f"positional accuracy {self.positional_accuracy:.4f}")
        lines += [
            f"aggregation correct {self.agg_accuracy:.4f}",
            f"select-col correct  {self.sel_accuracy:.4f}",
            f"where-set correct   {self.where_accuracy:.4f}",
            f"unparseable preds   {self.parse_failure_rate:.4f}",
        ]
        if self.worst:
            lines.append("")
            lines.append("worst predictions (by bow accuracy):")
            for w in self.worst:
                lines.append(f"  [{w['index']}] bow={w['bow']:.3f}")
                lines.append(f"      pred: {w['pred']}")
                lines.append(f"      gold: {w['ref']}")
        return "\n".join(lines) + "\n"


def score_example(index, prediction, pair, input_vocab, target_vocab,
                  cell_size=None) -> ExampleScore:
    """Metrics for one greedy decode against its encoded gold pair."""
    ref_tokens = strip_sequence(target_vocab.decode(strip_sequence(pair.target_ids)))
    if prediction.positions is not None:
        pred_tokens = strip_sequence(input_vocab.decode(prediction.token_ids))
        pred_positions = list(prediction.positions)
        if prediction.stopped_by == "eos" and cell_size is not None:
            pred_positions.append(cell_size - 1)
        positional = positional_accuracy(pred_positions, pair.pointer_targets)
    else:
        pred_tokens = strip_sequence(target_vocab.decode(prediction.token_ids))
        positional = None
    try:
        clauses = clause_breakdown(pred_tokens, ref_tokens)
    except DataError:
        # gold targets straight from linearize_sql always parse; synthetic
        # test pairs may not, and then clause scores are meaningless
        clauses = ClauseFlags(parsed=False, agg=False, sel=False, where=False)
    return ExampleScore(
        index=index,
        exact=exact_match(pred_tokens, ref_tokens),
        bow=bow_accuracy(pred_tokens, ref_tokens),
        bow_ref_len=bow_accuracy_ref_len(pred_tokens, ref_tokens),
        positional=positional,
        clauses=clauses,
        pred=" ".join(pred_tokens),
        ref=" ".join(ref_tokens),
    )


def aggregate_scores(scores: list[ExampleScore], worst_k: int = 10) -> MetricsReport:
    if not scores:
        raise UndefinedMetricError("cannot aggregate an empty split")
    n = len(scores)
    positional_scores = [s.positional for s in scores if s.positional is not None]
    worst = sorted(scores, key=lambda s: (s.bow, s.index))[:worst_k]
    return MetricsReport(
        n_examples=n,
        exact_match=sum(s.exact for s in scores) / n,
        bow_accuracy=sum(s.bow for s in scores) / n,
        bow_accuracy_ref_len=sum(s.bow_ref_len for s in scores) / n,
        positional_accuracy=(sum(positional_scores) / len(positional_scores)
                             if positional_scores else None),
        agg_accuracy=sum(s.clauses.agg for s in scores) / n,
        sel_accuracy=sum(s.clauses.sel for s in scores) / n,
        where_accuracy=sum(s.clauses.where for s in scores) / n,
        parse_failure_rate=sum(not s.clauses.parsed for s in scores) / n,
        worst=[{"index": s.index, "bow": s.bow, "pred": s.pred, "ref": s.ref}
               for s in worst],
    )


def evaluate_split(model, pairs, input_vocab, target_vocab, worst_k: int = 10,
                   threads: int = 1) -> MetricsReport:
    """Greedy-decode every pair and aggregate all applicable metrics.

    Decoding is read-only on the model, so examples may be scored on a
    thread pool; the ordered reduction keeps the report deterministic
    either way.
    """
    cell = model.config.cell_size

    def one(item):
        i, pair = item
        return score_example(i, model.greedy_decode(pair.input_ids), pair,
                             input_vocab, target_vocab, cell_size=cell)

    items = list(enumerate(pairs))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(one, items))
    else:
        scores = [one(item) for item in items]
    return aggregate_scores(scores, worst_k=worst_k)


def write_report(report: MetricsReport, out_dir, prefix: str = "report") -> None:
    """Emit the human-readable and JSON forms of a report."""
    import os

    with open(os.path.join(out_dir, f"{prefix}.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out_dir, f"{prefix}.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_per_example_csv(scores: list[ExampleScore], path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "exact", "bow", "bow_ref_len", "positional",
                         "agg_ok", "sel_ok", "where_ok", "parsed", "pred", "ref"])
        for s in scores:
            writer.writerow([s.index, s.exact, repr(s.bow), repr(s.bow_ref_len),
                             "" if s.positional is None else repr(s.positional),
                             int(s.clauses.agg), int(s.clauses.sel),
                             int(s.clauses.where), int(s.clauses.parsed),
                             s.pred, s.ref])
