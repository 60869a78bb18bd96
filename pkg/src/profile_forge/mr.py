"""Motivation recognition: question generation and review, answer
rebalancing, the reasoner loop and accuracy statistics."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import re
import statistics
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Hashable, Iterable, Sequence

from .errors import (
    DegenerateAgreement,
    IncompleteGroup,
    InvalidChoiceLabel,
    MissingAnnotation,
    NoValidQuestions,
)
from .llm_gateway import CompletionRequest, Gateway, JsonSchema, atomic_write_text
from .profile import DIMENSIONS, CharacterProfile, ProfileDimension, ablate, render_profile

logger = logging.getLogger(__name__)

LABELS = "ABCD"
CHOICE_SCHEMA = JsonSchema({"Choice": str, "Reason": str})
STATUSES = ("generated", "accepted", "rejected")

_A, _R, _E, _P = DIMENSIONS
# Ablation rows studied for the incremental GPT-4 profiles.
TABLE3_ABLATIONS: tuple[frozenset, ...] = (
    frozenset(),
    frozenset({_A}),
    frozenset({_R}),
    frozenset({_E}),
    frozenset({_P}),
    frozenset({_A, _R}),
    frozenset({_A, _R, _E}),
    frozenset(DIMENSIONS),
)


def ablation_label(dims: Iterable[ProfileDimension]) -> str:
    dims = set(dims)
    return "&".join(d.short for d in DIMENSIONS if d in dims) or "-"


def parse_ablation(spec: str) -> frozenset:
    """``"-"``/``""`` → none, ``"all"`` → every dimension, else ``Attr&Rela`` or ``attr,rela``."""
    spec = spec.strip()
    if spec in ("", "-", "none"):
        return frozenset()
    if spec.lower() == "all":
        return frozenset(DIMENSIONS)
    return frozenset(ProfileDimension.parse(p) for p in re.split(r"[&,+]", spec) if p.strip())


@dataclass(frozen=True)
class MCQ:
    id: str
    book_id: str
    character: str
    scenario: str
    question: str
    options: tuple[str, ...]
    answer_index: int
    option_rationales: tuple[str, ...] = ("", "", "", "")
    status: str = "generated"

    def __post_init__(self):
        if len(self.options) != 4:
            raise ValueError(f"{self.id}: expected 4 options, got {len(self.options)}")
        if len(self.option_rationales) != 4:
            raise ValueError(f"{self.id}: expected 4 option rationales")
        if not 0 <= self.answer_index <= 3:
            raise ValueError(f"{self.id}: answer_index {self.answer_index} out of range")
        if not self.scenario.strip() or not self.question.strip():
            raise ValueError(f"{self.id}: scenario and question must be non-empty")
        if self.status not in STATUSES:
            raise ValueError(f"{self.id}: unknown status {self.status!r}")

    @property
    def answer_label(self) -> str:
        return LABELS[self.answer_index]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["options"] = list(self.options)
        d["option_rationales"] = list(self.option_rationales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MCQ":
        d = dict(d)
        d["options"] = tuple(d["options"])
        d["option_rationales"] = tuple(d.get("option_rationales") or ("",) * 4)
        return cls(**d)


@dataclass(frozen=True)
class MRRecord:
    mcq_id: str
    method: str
    model: str
    ablated_dims: tuple[str, ...]
    chosen_index: int
    answer_index: int
    reason: str
    trial: int = 0

    @property
    def correct(self) -> bool:
        return self.chosen_index == self.answer_index

    @property
    def provenance(self) -> tuple[str, str, tuple[str, ...]]:
        return (self.method, self.model, self.ablated_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablated_dims"] = list(self.ablated_dims)
        d["correct"] = self.correct
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MRRecord":
        d = {k: v for k, v in d.items() if k != "correct"}
        d["ablated_dims"] = tuple(d["ablated_dims"])
        return cls(**d)


@dataclass(frozen=True)
class AnnotationSheet:
    mcq_id: str
    annotator_id: str
    keep: bool


# --- persistence --------------------------------------------------------------


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    text = "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)
    atomic_write_text(Path(path), text)


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_mcqs(path: Path) -> list[MCQ]:
    return [MCQ.from_dict(d) for d in read_jsonl(path)]


def save_mcqs(path: Path, mcqs: Iterable[MCQ]) -> None:
    write_jsonl(path, (m.to_dict() for m in mcqs))


def _parse_keep(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "keep", "k", "y"):
        return True
    if v in ("0", "false", "no", "reject", "r", "n"):
        return False
    raise ValueError(f"cannot read keep value {value!r}")


def load_annotations(path: Path) -> list[AnnotationSheet]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"mcq_id", "annotator_id", "keep"}
        if not reader.fieldnames or not needed <= set(reader.fieldnames):
            raise MissingAnnotation(f"{path}: annotation CSV needs columns {sorted(needed)}")
        return [AnnotationSheet(r["mcq_id"], r["annotator_id"], _parse_keep(r["keep"])) for r in reader]


def save_annotations(path: Path, sheets: Iterable[AnnotationSheet]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mcq_id", "annotator_id", "keep"])
        for s in sheets:
            writer.writerow([s.mcq_id, s.annotator_id, int(s.keep)])


# --- generation ----------------------------------------------------------------


def _exemplar_json(mcq: MCQ) -> dict:
    return {
        "scenario": mcq.scenario,
        "question": mcq.question,
        "options": list(mcq.options),
        "answer": mcq.answer_label,
        "option_rationales": list(mcq.option_rationales),
    }


def _mcq_from_item(item, book_id: str, character: str, mcq_id: str) -> MCQ:
    if not isinstance(item, dict):
        raise ValueError("item is not an object")
    options = item.get("options")
    if not isinstance(options, list) or not all(isinstance(o, str) and o.strip() for o in options):
        raise ValueError("options must be a list of strings")
    answer = item.get("answer")
    if isinstance(answer, str) and len(answer.strip()) == 1 and answer.strip().upper() in LABELS:
        answer_index = LABELS.index(answer.strip().upper())
    elif isinstance(answer, int) and not isinstance(answer, bool):
        answer_index = answer
    else:
        raise ValueError(f"unreadable answer {answer!r}")
    rationales = item.get("option_rationales") or [""] * len(options)
    if not isinstance(rationales, list) or not all(isinstance(r, str) for r in rationales):
        raise ValueError("option_rationales must be a list of strings")
    return MCQ(
        mcq_id, book_id, character,
        str(item.get("scenario", "")), str(item.get("question", "")),
        tuple(options), answer_index, tuple(rationales),
    )


def generate_mcqs(
    character: str,
    chapter_summaries: str,
    exemplars: Sequence[MCQ],
    gen: Gateway,
    model_id: str,
    count_hint: int = 5,
    *,
    book_id: str = "",
) -> list[MCQ]:
    if not exemplars:
        raise ValueError("generate_mcqs needs at least one exemplar question")
    prompt = gen.prompts.render(
        "mcq_generate",
        character=character,
        summaries=chapter_summaries,
        exemplars=json.dumps([_exemplar_json(m) for m in exemplars], indent=2, ensure_ascii=False),
        count=count_hint,
    )
    req = CompletionRequest(model_id, prompt, 4096, 0.0, f"mcq:generate:{book_id}")
    items = gen.complete_json(req, JsonSchema(many=True)).value
    out = []
    for n, item in enumerate(items):
        mcq_id = f"{book_id or 'book'}-q{n:03d}"
        try:
            out.append(_mcq_from_item(item, book_id, character, mcq_id))
        except (ValueError, TypeError) as exc:
            logger.warning("dropping generated question %s: %s", mcq_id, exc)
    if not out:
        raise NoValidQuestions(f"{book_id}: generator produced no valid questions")
    return out


# --- review ---------------------------------------------------------------------


def review_mcqs(
    mcqs: Sequence[MCQ], annotations: Sequence[AnnotationSheet], quorum: str = "all"
) -> list[MCQ]:
    """Accept questions by keep votes from every registered annotator.

    ``quorum="all"`` needs unanimous keeps, ``"majority"`` more than half.
    """
    if quorum not in ("all", "majority"):
        raise ValueError("quorum must be 'all' or 'majority'")
    annotators = sorted({a.annotator_id for a in annotations})
    if not annotators:
        raise MissingAnnotation("no annotations given")
    votes: dict[tuple[str, str], bool] = {}
    for a in annotations:
        key = (a.mcq_id, a.annotator_id)
        if key in votes:
            raise ValueError(f"duplicate annotation for {key}")
        votes[key] = a.keep

    reviewed = []
    for m in mcqs:
        keeps = []
        for who in annotators:
            if (m.id, who) not in votes:
                raise MissingAnnotation(f"{m.id} has no annotation from {who}")
            keeps.append(votes[(m.id, who)])
        ok = all(keeps) if quorum == "all" else sum(keeps) * 2 > len(keeps)
        reviewed.append(replace(m, status="accepted" if ok else "rejected"))
    accepted = sum(m.status == "accepted" for m in reviewed)
    logger.info("review accepted %d of %d questions", accepted, len(reviewed))
    return reviewed


def ratings_by_item(annotations: Iterable[AnnotationSheet]) -> list[list[str]]:
    grouped: dict[str, list[str]] = defaultdict(list)
    for a in annotations:
        grouped[a.mcq_id].append("keep" if a.keep else "reject")
    return [grouped[k] for k in sorted(grouped)]


def fleiss_kappa(ratings: Sequence[Sequence[Hashable]], categories: Sequence[Hashable] | None = None) -> float:
    """Fleiss' kappa for items each rated by the same number of raters."""
    if not ratings:
        raise ValueError("no items to rate")
    n = len(ratings[0])
    if n < 2 or any(len(r) != n for r in ratings):
        raise ValueError("every item needs the same number (>= 2) of ratings")
    cats = list(categories) if categories is not None else sorted({c for r in ratings for c in r}, key=str)
    counts = [Counter(r) for r in ratings]
    n_items = len(ratings)
    p_bar = math.fsum((sum(c[k] ** 2 for k in cats) - n) / (n * (n - 1)) for c in counts) / n_items
    p_j = [math.fsum(c[k] for c in counts) / (n_items * n) for k in cats]
    p_e = math.fsum(p * p for p in p_j)
    if p_e == 1.0:
        if p_bar == 1.0:
            return 1.0
        raise DegenerateAgreement("chance agreement is 1 but observed agreement is not")
    return (p_bar - p_e) / (1.0 - p_e)


def rebalance_answers(mcqs: Sequence[MCQ], seed: int = 0) -> list[MCQ]:
    """Reorder options so correct answers spread evenly over A-D.

    Target positions are a seeded shuffle of ``0,1,2,3,0,1,...``; the
    distractors fill the remaining slots in seeded random order.
    """
    rng = random.Random(seed)
    targets = [i % 4 for i in range(len(mcqs))]
    rng.shuffle(targets)
    out = []
    for m, target in zip(mcqs, targets):
        distractors = [i for i in range(4) if i != m.answer_index]
        rng.shuffle(distractors)
        order = distractors[:target] + [m.answer_index] + distractors[target:]
        out.append(
            replace(
                m,
                options=tuple(m.options[i] for i in order),
                option_rationales=tuple(m.option_rationales[i] for i in order),
                answer_index=target,
            )
        )
    return out


# --- reasoning -------------------------------------------------------------------


def format_question(mcq: MCQ) -> str:
    opts = "\n".join(f"{LABELS[i]}. {o}" for i, o in enumerate(mcq.options))
    return f"Scenario: {mcq.scenario}\nQuestion: {mcq.question}\nOptions:\n{opts}"


def render_mr_prompt(profile: CharacterProfile, mcq: MCQ, ablation: Iterable[ProfileDimension], prompts) -> str:
    view = ablate(profile, ablation)
    body = render_profile(view)
    if body:
        return prompts.render("mr_normal", character=mcq.character, profile=body, question=format_question(mcq))
    return prompts.render("mr_ablate_all", character=mcq.character, question=format_question(mcq))


_CHOICE = re.compile(r"^[\s\"'(\[]*([A-Za-z])(?:[\s.):\]\"']|$)")


def parse_choice(choice: str) -> int:
    m = _CHOICE.match(choice)
    if not m or m.group(1).upper() not in LABELS:
        raise InvalidChoiceLabel(f"choice {choice!r} is not one of A-D")
    return LABELS.index(m.group(1).upper())


def run_mr(
    profile: CharacterProfile,
    mcq: MCQ,
    reasoner: Gateway,
    model_id: str,
    ablation: Iterable[ProfileDimension] = frozenset(),
    *,
    trial: int = 0,
    bypass_cache: bool = False,
) -> MRRecord:
    if mcq.status != "accepted":
        raise ValueError(f"{mcq.id} has status {mcq.status!r}; only accepted questions are asked")
    ablation = frozenset(ablation)
    prompt = render_mr_prompt(profile, mcq, ablation, reasoner.prompts)
    req = CompletionRequest(model_id, prompt, 1024, 0.0, f"mr:{mcq.id}:{trial}")
    value = reasoner.complete_json(req, CHOICE_SCHEMA, bypass_cache=bypass_cache).value
    return MRRecord(
        mcq.id,
        profile.provenance.method,
        profile.provenance.model_id,
        tuple(d.key for d in DIMENSIONS if d in ablation),
        parse_choice(value["Choice"]),
        mcq.answer_index,
        value["Reason"],
        trial,
    )


@dataclass(frozen=True)
class AccuracyStat:
    mean_pct: float
    std_pct: float
    per_trial: tuple[float, ...] = field(default=())


def accuracy(
    records: Iterable[MRRecord],
    trials: int = 1,
    group_by: Callable[[MRRecord], Hashable] = lambda r: r.provenance,
    mcq_ids: Iterable[str] | None = None,
) -> dict[Hashable, AccuracyStat]:
    """Per-group mean and population standard deviation of per-trial accuracy (%)."""
    expected = set(mcq_ids) if mcq_ids is not None else None
    groups: dict[Hashable, dict[int, dict[str, bool]]] = defaultdict(lambda: defaultdict(dict))
    for r in records:
        groups[group_by(r)][r.trial][r.mcq_id] = r.correct
    out = {}
    for key, by_trial in groups.items():
        if sorted(by_trial) != list(range(trials)):
            raise IncompleteGroup(f"{key}: have trials {sorted(by_trial)}, expected 0..{trials - 1}")
        ids = expected if expected is not None else set(by_trial[0])
        per_trial = []
        for t in range(trials):
            if set(by_trial[t]) != ids:
                raise IncompleteGroup(f"{key}: trial {t} does not cover every question")
            per_trial.append(100.0 * sum(by_trial[t].values()) / len(ids))
        out[key] = AccuracyStat(statistics.fmean(per_trial), statistics.pstdev(per_trial), tuple(per_trial))
    return out
