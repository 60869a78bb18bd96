"""Four-dimension character profiles: parsing, rendering, budgets, ablation."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .errors import DuplicateSection, MissingSection


class ProfileDimension(enum.Enum):
    ATTRIBUTES = "Attributes"
    RELATIONSHIPS = "Relationships"
    EVENTS = "Events"
    PERSONALITY = "Personality"

    @property
    def key(self) -> str:
        return self.value.lower()

    @property
    def short(self) -> str:
        return self.value[:4]

    @property
    def header(self) -> str:
        return f"{self.value}:"

    @classmethod
    def parse(cls, name: str) -> "ProfileDimension":
        name = name.strip().lower()
        for dim in cls:
            if name in (dim.key, dim.short.lower()):
                return dim
        raise ValueError(f"unknown profile dimension {name!r}")


DIMENSIONS = tuple(ProfileDimension)

_HEADER = re.compile(
    r"^[ \t>#*_-]*(attributes|relationships|events|personality)[ \t*_]*:[ \t*_]*",
    re.IGNORECASE | re.MULTILINE,
)
_NONE_SENTINEL = re.compile(r"""^[\s*_'"`‘’“”]*none[.\s*_'"`‘’“”]*$""", re.IGNORECASE)


def word_count(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class Provenance:
    method: str = ""
    model_id: str = ""
    step_count: int = 0


@dataclass(frozen=True)
class CharacterProfile:
    character_name: str
    sections: Mapping[ProfileDimension, str]
    provenance: Provenance = field(default_factory=Provenance)
    ablated: frozenset = frozenset()

    def __post_init__(self):
        missing = [d for d in DIMENSIONS if d not in self.sections]
        if missing:
            raise MissingSection(missing[0])

    @property
    def word_counts(self) -> dict[ProfileDimension, int]:
        return {d: word_count(self.sections[d]) for d in DIMENSIONS}

    @property
    def total_words(self) -> int:
        return sum(self.word_counts.values())

    def content_hash(self) -> str:
        payload = self.character_name + "\n" + render_profile(self)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        data = {
            "character": self.character_name,
            "sections": {d.key: self.sections[d] for d in DIMENSIONS},
            "provenance": {
                "method": self.provenance.method,
                "model_id": self.provenance.model_id,
                "step_count": self.provenance.step_count,
            },
        }
        if self.ablated:
            data["ablated"] = [d.key for d in DIMENSIONS if d in self.ablated]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CharacterProfile":
        sections = {}
        for dim in DIMENSIONS:
            if dim.key not in data.get("sections", {}):
                raise MissingSection(dim)
            sections[dim] = _clean_body(data["sections"][dim.key] or "")
        prov = data.get("provenance") or {}
        return cls(
            character_name=data["character"],
            sections=sections,
            provenance=Provenance(prov.get("method", ""), prov.get("model_id", ""), int(prov.get("step_count", 0))),
            ablated=frozenset(ProfileDimension.parse(k) for k in data.get("ablated", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CharacterProfile":
        return cls.from_dict(json.loads(text))


def empty_profile(character_name: str, provenance: Provenance = Provenance()) -> CharacterProfile:
    return CharacterProfile(character_name, {d: "" for d in DIMENSIONS}, provenance)


@dataclass(frozen=True)
class BudgetConfig:
    total_words: int = 1200
    per_section: Mapping[ProfileDimension, int] = field(
        default_factory=lambda: {
            ProfileDimension.ATTRIBUTES: 150,
            ProfileDimension.RELATIONSHIPS: 250,
            ProfileDimension.EVENTS: 600,
            ProfileDimension.PERSONALITY: 200,
        }
    )

    def __post_init__(self):
        if self.total_words < 1:
            raise ValueError("total_words must be >= 1")
        if sum(self.per_section.values()) > self.total_words:
            raise ValueError("per-section budgets exceed the total word budget")

    def scaled(self, total_words: int) -> "BudgetConfig":
        """Same proportions under a different total, rounding sections down."""
        ratio = total_words / self.total_words
        return BudgetConfig(total_words, {d: int(n * ratio) for d, n in self.per_section.items()})

    def placeholders(self) -> dict[str, int]:
        return {f"{d.key}_budget": self.per_section[d] for d in DIMENSIONS}


def _clean_body(body: str) -> str:
    body = body.strip()
    return "" if _NONE_SENTINEL.match(body) else body


def parse_profile(text: str, character_name: str) -> CharacterProfile:
    """Read the four ``Header:`` sections from model output.

    Headers may appear in any order and may carry markdown decoration.
    Text before the first header is ignored; a body of ``None`` means the
    section is empty.
    """
    matches = list(_HEADER.finditer(text))
    found: dict[ProfileDimension, str] = {}
    for i, m in enumerate(matches):
        dim = ProfileDimension(m.group(1).capitalize())
        if dim in found:
            raise DuplicateSection(dim, text)
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        found[dim] = _clean_body(text[m.end() : end])
    for dim in DIMENSIONS:
        if dim not in found:
            raise MissingSection(dim, text)
    return CharacterProfile(character_name, found)


def render_profile(p: CharacterProfile) -> str:
    blocks = [f"{d.header}\n{p.sections[d] or 'None'}" for d in DIMENSIONS if d not in p.ablated]
    return "\n\n".join(blocks)


def needs_compression(p: CharacterProfile, budget: BudgetConfig) -> bool:
    return p.total_words > budget.total_words


def ablate(p: CharacterProfile, drop: Iterable[ProfileDimension]) -> CharacterProfile:
    drop = frozenset(drop)
    if not drop:
        return p
    sections = {d: ("" if d in drop else p.sections[d]) for d in DIMENSIONS}
    return replace(p, sections=sections, ablated=p.ablated | drop)
