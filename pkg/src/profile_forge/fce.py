"""Factual consistency examination: per-dimension judge scores, blinded
pairwise comparisons, result tables and Pearson validation."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from scipy import stats

from .errors import DegenerateInput, MissingCell, ScoreOutOfRange, UnknownWinnerLabel
from .llm_gateway import CompletionRequest, Gateway, JsonSchema
from .profile import DIMENSIONS, ProfileDimension

SCORE_SCHEMA = JsonSchema({"score": int, "reason": str})
RANK_SCHEMA = JsonSchema({"model_name": str, "reason": str})
JUDGE_MAX_TOKENS = 1024
POINTS = {"a": (1.0, 0.0), "b": (0.0, 1.0), "equilibrium": (0.5, 0.5)}


@dataclass(frozen=True)
class ConsistencyReport:
    book_id: str
    dimension: ProfileDimension
    score: int
    reason: str
    judge_model: str
    method: str = ""
    model: str = ""

    def __post_init__(self):
        if isinstance(self.score, bool) or not isinstance(self.score, int) or not 1 <= self.score <= 5:
            raise ScoreOutOfRange(f"{self.book_id}/{self.dimension.value}: score {self.score!r} outside 1-5")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dimension"] = self.dimension.key
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyReport":
        return cls(**{**d, "dimension": ProfileDimension.parse(d["dimension"])})


@dataclass(frozen=True)
class PairwiseVerdict:
    book_id: str
    dimension: ProfileDimension
    model_a: str
    model_b: str
    winner: str  # a | b | equilibrium
    points_a: float
    points_b: float
    reason: str
    presentation_order: str  # ab | ba
    seed: int = 0
    method: str = ""

    def __post_init__(self):
        if POINTS.get(self.winner) != (self.points_a, self.points_b):
            raise ValueError(f"points {self.points_a}/{self.points_b} do not match winner {self.winner!r}")
        if self.presentation_order not in ("ab", "ba"):
            raise ValueError("presentation_order must be 'ab' or 'ba'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dimension"] = self.dimension.key
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PairwiseVerdict":
        return cls(**{**d, "dimension": ProfileDimension.parse(d["dimension"])})


def score_consistency(
    reference_section: str,
    candidate_section: str,
    dim: ProfileDimension,
    character: str,
    judge: Gateway,
    judge_model: str,
    *,
    book_id: str = "",
    method: str = "",
    model: str = "",
) -> ConsistencyReport:
    if not reference_section.strip():
        raise ValueError("reference section is empty")
    prompt = judge.prompts.render(
        "fce_consistency",
        character=character,
        dimension=dim.key,
        golden=reference_section,
        summarized=candidate_section or "None",
    )
    req = CompletionRequest(judge_model, prompt, JUDGE_MAX_TOKENS, 0.0, f"fce:score:{book_id}:{dim.key}")
    value = judge.complete_json(req, SCORE_SCHEMA).value
    return ConsistencyReport(book_id, dim, value["score"], value["reason"], judge_model, method, model)


def comparison_seed(base_seed: int, *parts: str) -> int:
    """Stable per-comparison seed derived from a run seed and cell identity."""
    digest = hashlib.sha256("\x1f".join([str(base_seed), *parts]).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def compare_pairwise(
    reference_section: str,
    cand_a: str,
    cand_b: str,
    dim: ProfileDimension,
    character: str,
    judge: Gateway,
    judge_model: str,
    rng_seed: int,
    *,
    book_id: str = "",
    model_a: str = "a",
    model_b: str = "b",
    method: str = "",
    presentation_order: str | None = None,
) -> PairwiseVerdict:
    """Blinded comparison; candidates appear as ``model_1``/``model_2`` in a
    seeded random order that is recorded on the verdict.

    ``presentation_order`` pins the order instead of drawing it from the seed.
    """
    if not cand_a.strip() or not cand_b.strip():
        raise ValueError("both candidates must be non-empty")
    order = presentation_order or ("ab" if random.Random(rng_seed).random() < 0.5 else "ba")
    first, second = (cand_a, cand_b) if order == "ab" else (cand_b, cand_a)
    prompt = judge.prompts.render(
        "fce_pairwise",
        character=character,
        dimension=dim.key,
        golden=reference_section,
        summary_1=first,
        summary_2=second,
    )
    req = CompletionRequest(judge_model, prompt, JUDGE_MAX_TOKENS, 0.0, f"fce:pairwise:{book_id}:{dim.key}")
    value = judge.complete_json(req, RANK_SCHEMA).value
    label = value["model_name"].strip().strip("\"'").lower().replace(" ", "_")
    if label == "equilibrium":
        winner = "equilibrium"
    elif label in ("model_1", "model_2"):
        first_won = label == "model_1"
        winner = "a" if first_won == (order == "ab") else "b"
    else:
        raise UnknownWinnerLabel(f"judge answered {value['model_name']!r}")
    pa, pb = POINTS[winner]
    return PairwiseVerdict(book_id, dim, model_a, model_b, winner, pa, pb, value["reason"], order, rng_seed, method)


# --- aggregation ------------------------------------------------------------


@dataclass
class ResultRow:
    method: str
    model: str
    consistency: dict[ProfileDimension, float] | None = None
    win_rate: dict[ProfileDimension, float] | None = None
    mr_accuracy: float | None = None

    @property
    def consistency_avg(self) -> float | None:
        return math.fsum(self.consistency.values()) / len(DIMENSIONS) if self.consistency else None

    @property
    def win_rate_avg(self) -> float | None:
        if not self.win_rate or len(self.win_rate) < len(DIMENSIONS):
            return None
        return math.fsum(self.win_rate.values()) / len(DIMENSIONS)


@dataclass
class ResultTable:
    rows: dict[tuple[str, str], ResultRow] = field(default_factory=dict)

    HEADER = (
        "Method", "Model",
        "Attr", "Rela", "Even", "Pers", "Avg",
        "WW Attr", "WW Rela", "WW Even", "WW Pers", "WW Avg",
        "MR Acc",
    )

    def with_mr_accuracy(self, accuracies: dict[tuple[str, str], float]) -> "ResultTable":
        for key, acc in accuracies.items():
            row = self.rows.setdefault(key, ResultRow(*key))
            row.mr_accuracy = acc
        return self

    def records(self, display: bool = False) -> list[list]:
        def fmt(value, digits):
            if value is None:
                return "-" if display else ""
            return f"{value:.{digits}f}" if display else repr(value)

        out = []
        for key in sorted(self.rows):
            row = self.rows[key]
            cons = [row.consistency.get(d) if row.consistency else None for d in DIMENSIONS]
            wins = [row.win_rate.get(d) if row.win_rate else None for d in DIMENSIONS]
            out.append(
                [row.method, row.model]
                + [fmt(v, 2) for v in cons + [row.consistency_avg]]
                + [fmt(v, 3) for v in wins + [row.win_rate_avg]]
                + [fmt(row.mr_accuracy, 2)]
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        writer.writerows(self.records())
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.HEADER) + " |", "|" + "---|" * len(self.HEADER)]
        lines += ["| " + " | ".join(r) + " |" for r in self.records(display=True)]
        return "\n".join(lines) + "\n"


def aggregate(
    reports: Iterable[ConsistencyReport], verdicts: Iterable[PairwiseVerdict] = ()
) -> ResultTable:
    """Fold reports and verdicts into per-(method, model) rows.

    Every book a row has reports for must have all four dimensions. Sums use
    ``math.fsum`` so the result does not depend on input order.
    """
    scores: dict[tuple[str, str], dict[ProfileDimension, list[int]]] = {}
    books: dict[tuple[str, str], dict[str, set]] = {}
    for r in reports:
        key = (r.method, r.model)
        scores.setdefault(key, {}).setdefault(r.dimension, []).append(r.score)
        books.setdefault(key, {}).setdefault(r.book_id, set()).add(r.dimension)

    table = ResultTable()
    for key, per_book in books.items():
        for book_id, dims in per_book.items():
            missing = [d.value for d in DIMENSIONS if d not in dims]
            if missing:
                raise MissingCell(f"{key[0]}/{key[1]} book {book_id}: no report for {', '.join(missing)}")
        table.rows[key] = ResultRow(
            *key, consistency={d: math.fsum(scores[key][d]) / len(scores[key][d]) for d in DIMENSIONS}
        )

    points: dict[tuple[str, str], dict[ProfileDimension, list[float]]] = {}
    for v in verdicts:
        for model, pts in ((v.model_a, v.points_a), (v.model_b, v.points_b)):
            points.setdefault((v.method, model), {}).setdefault(v.dimension, []).append(pts)
    for key, per_dim in points.items():
        row = table.rows.setdefault(key, ResultRow(*key))
        row.win_rate = {d: math.fsum(p) / len(p) for d, p in per_dim.items()}
    return table


# --- validation statistics --------------------------------------------------


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Product-moment correlation and its two-sided t-test p-value."""
    n = len(xs)
    if n != len(ys):
        raise ValueError("xs and ys differ in length")
    if n < 3:
        raise DegenerateInput("pearson needs at least 3 pairs")
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        raise DegenerateInput("zero variance input")
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    # r is scale free; normalizing keeps tiny spreads from underflowing
    sx, sy = max(map(abs, dx)), max(map(abs, dy))
    if sx == 0 or sy == 0:
        raise DegenerateInput("zero variance input")
    dx = [a / sx for a in dx]
    dy = [b / sy for b in dy]
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    sxx = math.fsum(a * a for a in dx)
    syy = math.fsum(b * b for b in dy)
    r = sxy / math.sqrt(sxx * syy)
    # rounding noise on exactly collinear data
    if abs(1.0 - abs(r)) < 1e-12:
        r = math.copysign(1.0, r)
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * stats.t.sf(abs(t), n - 2)
    return r, float(p)
