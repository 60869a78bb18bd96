"""The three profiling strategies: incremental updating, hierarchical merging
and summarizing in one go.

Every model call becomes a ``StepTrace``; the raw output rides along on the
trace object so the run store can persist it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

from .corpus import DEFAULT_TOKENIZER, Chunk, Document, Tokenizer, segment
from .errors import ApologyPersisted, BudgetExceeded, DocumentTooLong, PackingImpossible, ProfileParseError
from .llm_gateway import CompletionRequest, Gateway, max_tokens_for_words, prompt_hash
from .profile import (
    BudgetConfig,
    CharacterProfile,
    Provenance,
    empty_profile,
    needs_compression,
    parse_profile,
    render_profile,
)

logger = logging.getLogger(__name__)

METHODS = ("incremental", "hierarchical", "one_go")
SUMMARY_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class SummarizerConfig:
    method: str = "incremental"
    chunk_size: int = 3000
    context_window: int = 8096
    max_summary_words: int = 1200
    one_go_token_limit: int = 120_000
    model_id: str = ""
    section_budget: BudgetConfig | None = None
    max_compress_attempts: int = 3
    workers: int = 1
    tokenizer: Tokenizer = DEFAULT_TOKENIZER

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.context_window <= self.chunk_size:
            raise ValueError("context_window must exceed chunk_size")
        if self.max_summary_words < 1:
            raise ValueError("max_summary_words must be >= 1")

    @property
    def budget(self) -> BudgetConfig:
        if self.section_budget is not None:
            return self.section_budget
        return BudgetConfig().scaled(self.max_summary_words)


@dataclass(frozen=True)
class StepTrace:
    step_index: int
    kind: str  # init | update | compress | level1 | merge | merge_with_context | one_go
    input_refs: tuple[str, ...]
    prompt_hash: str
    output_profile_hash: str
    prompt_tokens: int = 0
    raw_output: str = field(default="", repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "kind": self.kind,
            "input_refs": list(self.input_refs),
            "prompt_hash": self.prompt_hash,
            "output_profile_hash": self.output_profile_hash,
            "prompt_tokens": self.prompt_tokens,
        }


@dataclass(frozen=True)
class MergeNode:
    id: str
    level: int
    children: tuple[str, ...]
    carried_context: str | None = None
    step_index: int = -1

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "level": self.level,
            "children": list(self.children),
            "carried_context": self.carried_context,
            "step_index": self.step_index,
        }


@dataclass
class MergeTree:
    nodes: dict[str, MergeNode] = field(default_factory=dict)
    root: str = ""

    def leaf_chunks(self) -> list[int]:
        """Chunk indices reached from the root through child edges, in order."""
        out: list[int] = []
        stack = [self.root]
        while stack:
            ref = stack.pop()
            if ref.startswith("chunk:"):
                out.append(int(ref.split(":", 1)[1]))
            else:
                stack.extend(reversed(self.nodes[ref].children))
        return out

    def to_dict(self) -> dict:
        return {"root": self.root, "nodes": [n.to_dict() for n in self.nodes.values()]}


@dataclass
class SummaryResult:
    profile: CharacterProfile
    trace: list[StepTrace]
    tree: MergeTree | None = None


# --- packing --------------------------------------------------------------


def next_group(lengths: list[int], start: int, prompt_len: int, context_len: int, window: int) -> int:
    """End (exclusive) of the longest run from ``start`` whose total plus
    prompt and context stays strictly below ``window``."""
    total = prompt_len + context_len
    end = start
    while end < len(lengths) and total + lengths[end] < window:
        total += lengths[end]
        end += 1
    if end == start:
        raise PackingImpossible(start)
    return end


def pack_summaries(lengths: list[int], prompt_len: int, context_len: int, window: int) -> list[range]:
    """Greedy consecutive packing; the first group carries no context."""
    if any(n <= 0 for n in lengths):
        raise ValueError("summary lengths must be positive")
    groups = []
    start = 0
    while start < len(lengths):
        end = next_group(lengths, start, prompt_len, context_len if groups else 0, window)
        groups.append(range(start, end))
        start = end
    return groups


# --- shared step machinery ------------------------------------------------


class _Job:
    """State for one summarization of one document."""

    def __init__(self, doc: Document, character: str, cfg: SummarizerConfig, gateway: Gateway):
        self.doc = doc
        self.character = character
        self.cfg = cfg
        self.gateway = gateway
        self.prompts = gateway.prompts
        self.tok = cfg.tokenizer
        self.trace: list[StepTrace] = []

    def output_format(self, budget: BudgetConfig) -> str:
        return self.prompts.render("output_format", **budget.placeholders())

    def render(self, template: str, words: int, **values) -> str:
        budget = self.cfg.budget if words == self.cfg.max_summary_words else self.cfg.budget.scaled(words)
        return self.prompts.render(
            template, character=self.character, budget=words, output_format=self.output_format(budget), **values
        )

    def call(
        self,
        step_index: int,
        kind: str,
        prompt: str,
        input_refs: tuple[str, ...],
        words: int,
        feedback: str | None = None,
        on_apology: Callable[[], CharacterProfile] | None = None,
    ) -> tuple[CharacterProfile, StepTrace]:
        req = CompletionRequest(
            self.cfg.model_id,
            prompt,
            max_tokens_for_words(words),
            0.0,
            f"{self.cfg.method}:{kind}:{step_index}",
        )
        if feedback is None:
            text = self.gateway.complete(req).text
            profile = self._parse(text)
        else:
            fb = self.prompts.render(feedback, character=self.character)
            try:
                text = self.gateway.complete_with_apology_retry(req, fb).text
                profile = self._parse(text)
            except ApologyPersisted as exc:
                logger.warning("%s step %d: apology persisted; using fallback profile", self.doc.id, step_index)
                text = exc.raw_text
                profile = on_apology()
        step = StepTrace(
            step_index, kind, input_refs, prompt_hash(prompt), profile.content_hash(), self.tok.count(prompt), text
        )
        return profile, step

    def _parse(self, text: str) -> CharacterProfile:
        try:
            return parse_profile(text, self.character)
        except ProfileParseError as exc:
            exc.partial_trace = list(self.trace)
            raise

    def record(self, step: StepTrace) -> str:
        self.trace.append(step)
        return f"step:{step.step_index}"

    def compress(self, profile: CharacterProfile, ref: str, target_words: int) -> tuple[CharacterProfile, str]:
        """Condense until the profile fits ``target_words``."""
        attempts = 0
        while profile.total_words > target_words:
            if attempts >= self.cfg.max_compress_attempts:
                raise BudgetExceeded(
                    f"{self.doc.id}: profile still {profile.total_words} words after {attempts} compress steps"
                )
            attempts += 1
            prompt = self.render(
                "incremental_compress", target_words, summary=render_profile(profile), word_count=profile.total_words
            )
            profile, step = self.call(len(self.trace), "compress", prompt, (ref,), target_words)
            ref = self.record(step)
        return profile, ref

    def fit(self, profile: CharacterProfile, ref: str) -> tuple[CharacterProfile, str]:
        if needs_compression(profile, self.cfg.budget):
            return self.compress(profile, ref, self.cfg.max_summary_words)
        return profile, ref

    def finish(self, profile: CharacterProfile) -> CharacterProfile:
        return replace(profile, provenance=Provenance(self.cfg.method, self.cfg.model_id, len(self.trace)))


# --- strategies -------------------------------------------------------------


def summarize_one_go(doc: Document, character: str, cfg: SummarizerConfig, gateway: Gateway) -> SummaryResult:
    if doc.token_count > cfg.one_go_token_limit:
        raise DocumentTooLong(f"{doc.id}: {doc.token_count} tokens exceeds the {cfg.one_go_token_limit}-token limit")
    job = _Job(doc, character, cfg, gateway)
    m = cfg.max_summary_words
    profile, step = job.call(0, "one_go", job.render("one_go", m, content=doc.text), (f"doc:{doc.id}",), m)
    profile, _ = job.fit(profile, job.record(step))
    return SummaryResult(job.finish(profile), job.trace)


def summarize_incremental(doc: Document, character: str, cfg: SummarizerConfig, gateway: Gateway) -> SummaryResult:
    job = _Job(doc, character, cfg, gateway)
    m = cfg.max_summary_words
    chunks = segment(doc, cfg.chunk_size, cfg.tokenizer)

    profile, step = job.call(
        0, "init", job.render("incremental_init", m, content=chunks[0].text), ("chunk:0",), m,
        feedback="feedback_init_incremental",
        on_apology=lambda: empty_profile(character),
    )
    profile, ref = job.fit(profile, job.record(step))

    for chunk in chunks[1:]:
        prior = profile
        prompt = job.render("incremental_update", m, content=chunk.text, summary=render_profile(prior))
        profile, step = job.call(
            len(job.trace), "update", prompt, (ref, f"chunk:{chunk.index}"), m,
            feedback="feedback_update_incremental",
            on_apology=lambda: prior,
        )
        profile, ref = job.fit(profile, job.record(step))
    return SummaryResult(job.finish(profile), job.trace)


def summarize_hierarchical(doc: Document, character: str, cfg: SummarizerConfig, gateway: Gateway) -> SummaryResult:
    job = _Job(doc, character, cfg, gateway)
    m = cfg.max_summary_words
    tok = cfg.tokenizer
    chunks = segment(doc, cfg.chunk_size, tok)
    tree = MergeTree()

    def level1(chunk: Chunk):
        prompt = job.render("hierarchical_init", m, content=chunk.text)
        return job.call(
            chunk.index, "level1", prompt, (f"chunk:{chunk.index}",), m,
            feedback="feedback_init_hierarchical",
            on_apology=lambda: empty_profile(character),
        )

    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            firsts = list(pool.map(level1, chunks))
    else:
        firsts = [level1(c) for c in chunks]

    # (node id, profile, ref of the step that produced the node's current text)
    current: list[tuple[str, CharacterProfile, str]] = []
    for chunk, (profile, step) in zip(chunks, firsts):
        node_id = f"L1-{chunk.index}"
        tree.nodes[node_id] = MergeNode(node_id, 1, (f"chunk:{chunk.index}",), None, step.step_index)
        current.append((node_id, profile, job.record(step)))
    for i, (node_id, profile, ref) in enumerate(current):
        current[i] = (node_id, *job.fit(profile, ref))

    merge_overhead = tok.count(job.render("hierarchical_merge", m, summaries=""))
    context_overhead = tok.count(job.render("hierarchical_merge_context", m, summaries="", context=""))

    level = 1
    while len(current) > 1:
        level += 1
        lengths = [tok.count(render_profile(p)) for _, p, _ in current]
        merged: list[tuple[str, CharacterProfile, str]] = []
        context: tuple[str, CharacterProfile, str] | None = None
        start = 0
        while start < len(current):
            ctx_text = render_profile(context[1]) if context else ""
            overhead = context_overhead if context else merge_overhead
            ctx_len = tok.count(ctx_text)
            try:
                end = next_group(lengths, start, overhead, ctx_len, cfg.context_window)
            except PackingImpossible:
                node_id, profile, ref = current[start]
                logger.info("%s: summary %s too long to pack; compressing to %d words", doc.id, node_id, m // 2)
                profile, ref = job.compress(profile, ref, m // 2)
                current[start] = (node_id, profile, ref)
                lengths[start] = tok.count(render_profile(profile))
                end = next_group(lengths, start, overhead, ctx_len, cfg.context_window)

            group = current[start:end]
            summaries = SUMMARY_SEPARATOR.join(render_profile(p) for _, p, _ in group)
            refs = tuple(ref for _, _, ref in group)
            if context:
                kind = "merge_with_context"
                prompt = job.render("hierarchical_merge_context", m, summaries=summaries, context=ctx_text)
                refs = refs + (context[2],)
            else:
                kind = "merge"
                prompt = job.render("hierarchical_merge", m, summaries=summaries)
            if tok.count(prompt) >= cfg.context_window:
                raise PackingImpossible(start, f"{doc.id}: rendered merge prompt reaches the context window")

            profile, step = job.call(len(job.trace), kind, prompt, refs, m)
            node_id = f"L{level}-{len(merged)}"
            tree.nodes[node_id] = MergeNode(
                node_id, level, tuple(n for n, _, _ in group), context[0] if context else None, step.step_index
            )
            profile, ref = job.fit(profile, job.record(step))
            context = (node_id, profile, ref)
            merged.append(context)
            start = end
        if len(merged) == len(current):
            raise PackingImpossible(0, f"{doc.id}: level {level} merged nothing; summaries too long for the window")
        current = merged

    tree.root = current[0][0]
    return SummaryResult(job.finish(current[0][1]), job.trace, tree)


def summarize(doc: Document, character: str, cfg: SummarizerConfig, gateway: Gateway) -> SummaryResult:
    runner = {
        "incremental": summarize_incremental,
        "hierarchical": summarize_hierarchical,
        "one_go": summarize_one_go,
    }[cfg.method]
    return runner(doc, character, cfg, gateway)
