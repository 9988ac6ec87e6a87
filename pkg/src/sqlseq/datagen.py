"""Synthetic single-table question generator.

Produces records in the same shape as the real dataset files, for desk-scale
training runs, the aggregation-probe study, and the pointer toy set.
Condition values are embedded verbatim in the question text so pointer
targets always resolve. Everything is driven by the deterministic RNG, so a
given (seed, size) always yields the same data.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Rng
from .text import Example, SqlTarget


@dataclass
class Schema:
    header: list[str]
    types: list[str]
    values: dict[int, list[str]]  # column index -> value pool

    def text_columns(self):
        return [i for i, t in enumerate(self.types) if t == "text"]

    def real_columns(self):
        return [i for i, t in enumerate(self.types) if t == "real"]


SCHEMAS = [
    Schema(
        header=["home team", "away team", "crowd", "venue", "date"],
        types=["text", "text", "real", "text", "text"],
        values={
            0: ["fitzroy", "geelong", "carlton", "south melbourne", "richmond",
                "essendon", "collingwood", "hawthorn"],
            1: ["fitzroy", "geelong", "carlton", "south melbourne", "richmond",
                "st kilda", "footscray", "north melbourne"],
            2: ["5000", "12000", "23415", "8700", "31205", "15600"],
            3: ["mcg", "arden street oval", "kardinia park", "victoria park",
                "princes park", "western oval"],
            4: ["february 9", "march 22", "april 1", "may 15", "august 30",
                "june 11"],
        },
    ),
    Schema(
        header=["player", "no.", "position", "school/club team", "years"],
        types=["text", "real", "text", "text", "real"],
        values={
            0: ["amir johnson", "jalen rose", "tracy murray", "pape sow",
                "jamario moon", "voshon lenard"],
            1: ["3", "5", "8", "21", "13", "42"],
            2: ["guard", "forward", "center", "forward-center"],
            3: ["butler cc", "michigan", "ucla", "detroit mercy", "minnesota"],
            4: ["1", "2", "3", "4", "6"],
        },
    ),
    Schema(
        header=["aircraft", "description", "max gross weight", "total disk area"],
        types=["text", "text", "real", "real"],
        values={
            0: ["ch-47d chinook", "robinson r-22", "mil mi-26", "ch-53e super stallion",
                "bell 206b3 jetranger"],
            1: ["tandem rotor helicopter", "light utility helicopter",
                "heavy-lift helicopter", "turboshaft utility helicopter"],
            2: ["1370", "22680", "50000", "33300", "3200"],
            3: ["497", "872", "4900", "789", "950"],
        },
    ),
    Schema(
        header=["catalog", "label", "format", "year"],
        types=["text", "text", "text", "real"],
        values={
            0: ["alca-9201", "tocp-8742", "srcl-3855", "wpcl-10776"],
            1: ["alfa records", "emi music", "sony records", "warner pioneer"],
            2: ["cd", "cassette", "vinyl", "mini-disc"],
            3: ["1985", "1991", "1994", "2002", "2007"],
        },
    ),
    Schema(
        header=["city", "country", "population", "area"],
        types=["text", "text", "real", "real"],
        values={
            0: ["wellington", "osaka", "turin", "porto", "gdansk", "leipzig"],
            1: ["new zealand", "japan", "italy", "portugal", "poland", "germany"],
            2: ["212000", "2691000", "870000", "237000", "470000"],
            3: ["290", "225", "130", "41", "262"],
        },
    ),
]

# Aggregation class index matches SqlTarget.agg: 0 none, then max..avg.
TEMPLATES = {
    0: ["what is the {sel} when {col} is {val}",
        "what was the {sel} for {col} {val}",
        "which {sel} has {col} {val}",
        "name the {sel} where {col} is {val}"],
    1: ["what is the largest {sel} when {col} is {val}",
        "what was the highest {sel} for {col} {val}",
        "what is the maximum {sel} where {col} is {val}"],
    2: ["what is the smallest {sel} when {col} is {val}",
        "what was the lowest {sel} for {col} {val}",
        "what is the minimum {sel} where {col} is {val}"],
    3: ["how many {sel} have {col} {val}",
        "how many {sel} are there when {col} is {val}",
        "count the {sel} where {col} is {val}"],
    4: ["what is the total {sel} for {col} {val}",
        "what is the sum of {sel} when {col} is {val}",
        "what is the combined {sel} where {col} is {val}"],
    5: ["what is the average {sel} for {col} {val}",
        "what is the mean {sel} when {col} is {val}",
        "what is the typical {sel} where {col} is {val}"],
}

# One fixed template per class, each with a trigger word no other class
# uses: a linearly separable set for the probe sanity bound.
SEPARABLE_TEMPLATES = {
    0: "show the {sel} for {col} {val}",
    1: "largest {sel} for {col} {val}",
    2: "smallest {sel} for {col} {val}",
    3: "how many {sel} for {col} {val}",
    4: "total {sel} for {col} {val}",
    5: "average {sel} for {col} {val}",
}


def _make_example(schema: Schema, agg: int, rng: Rng, template: str,
                  two_cond_rate: float = 0.25) -> Example:
    if agg in (1, 2, 4, 5) and schema.real_columns():
        sel = rng.choice(schema.real_columns())
    else:
        sel = rng.randint(len(schema.header))
    cond_col = rng.randint(len(schema.header))
    value = rng.choice(schema.values[cond_col])
    question = template.format(sel=schema.header[sel].lower(),
                               col=schema.header[cond_col].lower(), val=value)
    conds = [(cond_col, "=", value)]
    if rng.uniform() < two_cond_rate:
        col2 = rng.randint(len(schema.header))
        if col2 != cond_col:
            val2 = rng.choice(schema.values[col2])
            question += f" and {schema.header[col2].lower()} is {val2}"
            conds.append((col2, "=", val2))
    return Example(question=question, header=list(schema.header),
                   types=list(schema.types), sql=SqlTarget(sel=sel, agg=agg, conds=conds))


def generate_examples(n: int, rng: Rng, balanced_agg: bool = False,
                      two_cond_rate: float = 0.25) -> list[Example]:
    """Mixed-template dataset; ``balanced_agg`` cycles through the six
    aggregation classes instead of sampling them."""
    out = []
    for i in range(n):
        agg = i % 6 if balanced_agg else rng.randint(6)
        schema = rng.choice(SCHEMAS)
        template = rng.choice(TEMPLATES[agg])
        out.append(_make_example(schema, agg, rng, template,
                                 two_cond_rate=two_cond_rate))
    return out


_TRIGGERS = {"show", "largest", "smallest", "how", "many", "total", "average"}


def generate_separable_examples(n: int, rng: Rng) -> list[Example]:
    """Balanced dataset where one trigger keyword pins each class.

    Restricted to schemas whose column names stay clear of the trigger
    words (the aircraft table has a "total disk area" column).
    """
    clean = [s for s in SCHEMAS
             if not any(w in _TRIGGERS for h in s.header for w in h.lower().split())]
    out = []
    for i in range(n):
        agg = i % 6
        schema = rng.choice(clean)
        out.append(_make_example(schema, agg, rng, SEPARABLE_TEMPLATES[agg],
                                 two_cond_rate=0.0))
    return out


def pointer_toy_examples() -> list[Example]:
    """A fixed toy set small enough for the pointer variant to crack."""
    header = ["aircraft", "weight"]
    types = ["text", "real"]
    specs = [
        ("what is the weight of ch-47d", 1, 0, [(0, "=", "ch-47d")]),
        ("what is the weight of mi-26", 1, 0, [(0, "=", "mi-26")]),
        ("what aircraft has weight 5000", 0, 0, [(1, "=", "5000")]),
        ("what aircraft has weight 123", 0, 0, [(1, "=", "123")]),
    ]
    return [Example(q, list(header), list(types), SqlTarget(sel, agg, conds))
            for q, sel, agg, conds in specs]
