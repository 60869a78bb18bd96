"""Experiment configuration, run directories and the pipeline drivers
behind the command line.

Layout of one run::

    runs/<run_id>/
      config.json              config snapshot plus recorded overrides
      manifest.json            per-book status and every file in the run
      books/<book_id>/profile.json
      books/<book_id>/trace.jsonl
      books/<book_id>/raw/<step_index>.txt
      books/<book_id>/merge_tree.json      (hierarchical runs)
      evaluations/<mode>/...
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .corpus import Document, get_tokenizer, load_corpus
from .errors import ConfigInvalid, MissingArtifacts, ProfileForgeError, ProfileParseError
from .fce import (
    ConsistencyReport,
    PairwiseVerdict,
    aggregate,
    compare_pairwise,
    comparison_seed,
    score_consistency,
)
from .llm_gateway import BackendSpec, Gateway, atomic_write_text
from .mr import (
    TABLE3_ABLATIONS,
    MRRecord,
    ablation_label,
    accuracy,
    load_mcqs,
    parse_ablation,
    read_jsonl,
    run_mr,
)
from .profile import DIMENSIONS, BudgetConfig, CharacterProfile, ProfileDimension, Provenance
from .prompts import get_registry
from .summarizer import SummarizerConfig, summarize

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
STATUSES = ("pending", "done", "failed")


def dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def default_clock() -> float:
    """Wall clock, pinned by ``SOURCE_DATE_EPOCH`` for reproducible runs."""
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    return float(pinned) if pinned else time.time()


def iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --- configuration ---------------------------------------------------------------


@dataclass
class ExperimentConfig:
    corpus_dir: str
    model_id: str
    method: str = "incremental"
    judge_model_id: str = ""
    reasoner_model_id: str = ""
    generator_model_id: str = ""
    chunk_size: int = 3000
    context_window: int = 8096
    max_summary_words: int = 1200
    one_go_token_limit: int = 120_000
    section_budgets: dict[str, int] | None = None
    tokenizer: str = "whitespace"
    prompt_version: str = "v1"
    seeds: dict[str, int] = field(default_factory=lambda: {"pairwise": 0, "rebalance": 0})
    trials: int = 1
    workers: int = 1
    runs_dir: str = "runs"
    cache_dir: str | None = ".profile_forge_cache"
    references_dir: str | None = None
    mcq_path: str | None = None
    baseline_run: str | None = None
    ablations: list[str] = field(default_factory=lambda: [ablation_label(s) for s in TABLE3_ABLATIONS])
    backends: dict[str, dict] = field(default_factory=dict)
    config_version: int = CONFIG_VERSION
    base_dir: str = field(default=".", metadata={"snapshot": False})
    overrides: dict[str, Any] = field(default_factory=dict, metadata={"snapshot": False})

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def snapshot(self) -> dict:
        return {
            f.name: copy.deepcopy(getattr(self, f.name))
            for f in dataclasses.fields(self)
            if f.metadata.get("snapshot", True)
        }

    def summarizer_config(self) -> SummarizerConfig:
        budget = BudgetConfig(total_words=self.max_summary_words)
        if self.section_budgets:
            per = {ProfileDimension.parse(k): int(v) for k, v in self.section_budgets.items()}
            budget = BudgetConfig(self.max_summary_words, per)
        elif self.max_summary_words != 1200:
            budget = BudgetConfig().scaled(self.max_summary_words)
        return SummarizerConfig(
            method=self.method,
            chunk_size=self.chunk_size,
            context_window=self.context_window,
            max_summary_words=self.max_summary_words,
            one_go_token_limit=self.one_go_token_limit,
            model_id=self.model_id,
            section_budget=budget,
            workers=1,
            tokenizer=get_tokenizer(self.tokenizer),
        )

    def backend(self, role: str) -> BackendSpec:
        spec = self.backends.get(role) or self.backends.get("summarizer")
        if spec is None:
            raise ConfigInvalid(f"no backend configured for {role!r}")
        return BackendSpec.from_dict(spec, Path(self.base_dir))

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ConfigInvalid(f"unsupported config_version {self.config_version}")
        try:
            self.summarizer_config()
        except (ValueError, KeyError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        if not self.model_id:
            raise ConfigInvalid("model_id is required")
        if self.trials < 1:
            raise ConfigInvalid("trials must be >= 1")
        corpus = self.path(self.corpus_dir)
        if not corpus.is_dir():
            raise ConfigInvalid(f"corpus_dir {corpus} does not exist")
        if self.references_dir and not self.path(self.references_dir).is_dir():
            raise ConfigInvalid(f"references_dir {self.references_dir} does not exist")
        for spec in self.backends.values():
            if spec.get("kind") not in ("scripted", "http_openai_compatible"):
                raise ConfigInvalid(f"unknown backend kind {spec.get('kind')!r}")


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigInvalid(f"override {pair!r} is not KEY=VALUE")
        key, value = pair.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def load_config(path: Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    overrides = overrides or {}
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known | ({"base_dir", "overrides"} & set(data))
    if unknown:
        raise ConfigInvalid(f"unknown config fields: {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**data, base_dir=str(path.parent.resolve()), overrides=dict(overrides))
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc
    cfg.validate()
    return cfg


# --- run store -------------------------------------------------------------------


class RunStore:
    """One run directory and its manifest. Manifest writes are serialized."""

    def __init__(self, runs_dir: Path, run_id: str, clock: Callable[[], float] = default_clock):
        self.run_id = run_id
        self.root = Path(runs_dir) / run_id
        self.clock = clock
        self._lock = threading.Lock()
        self.manifest: dict = {}

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def load(self) -> dict:
        if not self.exists():
            raise MissingArtifacts(f"no run {self.run_id!r} under {self.root.parent}")
        self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return self.manifest

    def config_snapshot(self) -> dict:
        return json.loads((self.root / "config.json").read_text(encoding="utf-8"))

    def create_or_resume(self, cfg: ExperimentConfig, book_ids: list[str]) -> None:
        snapshot = {"config": cfg.snapshot(), "overrides": cfg.overrides}
        if self.exists():
            self.load()
            if self.config_snapshot()["config"] != snapshot["config"]:
                raise ConfigInvalid(f"run {self.run_id} exists with a different configuration")
            with self._lock:
                for b in book_ids:
                    self.manifest["books"].setdefault(b, {"status": "pending", "files": [], "error": None})
                self._flush()
            return
        now = iso(self.clock())
        self._write("config.json", dump_json(snapshot))
        self.manifest = {
            "run_id": self.run_id,
            "tool_version": __version__,
            "created_at": now,
            "updated_at": now,
            "config_file": "config.json",
            "seeds": cfg.seeds,
            "books": {b: {"status": "pending", "files": [], "error": None} for b in book_ids},
            "evaluations": {},
        }
        self._flush()

    def _write(self, rel: str, text: str) -> str:
        atomic_write_text(self.root / rel, text)
        return rel

    def _flush(self) -> None:
        self.manifest["updated_at"] = iso(self.clock())
        atomic_write_text(self.manifest_path, dump_json(self.manifest))

    def status(self, book_id: str) -> str:
        return self.manifest["books"][book_id]["status"]

    def mark(self, book_id: str, status: str, files: list[str], error: str | None = None) -> None:
        with self._lock:
            entry = self.manifest["books"][book_id]
            if entry["status"] != "pending":
                raise ValueError(f"{book_id}: status is final ({entry['status']})")
            entry.update(status=status, files=sorted(files), error=error)
            self._flush()

    def record_evaluation(self, mode: str, files: list[str]) -> None:
        with self._lock:
            self.manifest["evaluations"][mode] = sorted(files)
            self._flush()

    def write_file(self, rel: str, text: str) -> str:
        return self._write(rel, text)

    def read_profile(self, book_id: str) -> CharacterProfile:
        return CharacterProfile.from_json((self.root / "books" / book_id / "profile.json").read_text(encoding="utf-8"))

    def done_books(self) -> list[str]:
        return sorted(b for b, e in self.manifest["books"].items() if e["status"] == "done")

    def listed_files(self) -> set[str]:
        files = {"manifest.json", self.manifest["config_file"]}
        for entry in self.manifest["books"].values():
            files.update(entry["files"])
        for paths in self.manifest["evaluations"].values():
            files.update(paths)
        return files


def default_run_id(cfg: ExperimentConfig) -> str:
    digest = hashlib.sha256(dump_json(cfg.snapshot()).encode("utf-8")).hexdigest()
    return f"run-{digest[:12]}"


def make_gateway(cfg: ExperimentConfig, role: str) -> Gateway:
    return Gateway(
        cfg.backend(role),
        cfg.path(cfg.cache_dir),
        tokenizer=get_tokenizer(cfg.tokenizer),
        prompts=get_registry(cfg.prompt_version),
        clock=default_clock,
    )


# --- profiling ---------------------------------------------------------------------


def _profile_book(store: RunStore, doc: Document, scfg: SummarizerConfig, gateway: Gateway) -> None:
    base = f"books/{doc.id}"
    if not doc.main_character:
        store.mark(doc.id, "failed", [], "sidecar has no main_character")
        return
    try:
        result = summarize(doc, doc.main_character, scfg, gateway)
    except ProfileForgeError as exc:
        files = []
        partial = exc.partial_trace if isinstance(exc, ProfileParseError) else []
        payload = {
            "error": f"{type(exc).__name__}: {exc}",
            "raw_text": getattr(exc, "raw_text", None),
            "partial_trace": [s.to_dict() for s in partial],
        }
        files.append(store.write_file(f"{base}/error.json", dump_json(payload)))
        logger.error("%s failed: %s", doc.id, payload["error"])
        store.mark(doc.id, "failed", files, payload["error"])
        return

    files = [store.write_file(f"{base}/profile.json", result.profile.to_json())]
    trace_text = "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in result.trace)
    files.append(store.write_file(f"{base}/trace.jsonl", trace_text))
    for step in result.trace:
        files.append(store.write_file(f"{base}/raw/{step.step_index}.txt", step.raw_output))
    if result.tree is not None:
        files.append(store.write_file(f"{base}/merge_tree.json", dump_json(result.tree.to_dict())))
    store.mark(doc.id, "done", files)


def cli_profile(
    cfg: ExperimentConfig,
    book_ids: list[str] | None = None,
    run_id: str | None = None,
    clock: Callable[[], float] = default_clock,
    gateway: Gateway | None = None,
) -> tuple[str, int]:
    """Profile every selected book; returns ``(run_id, exit_code)``."""
    docs = load_corpus(cfg.path(cfg.corpus_dir), get_tokenizer(cfg.tokenizer))
    selected = sorted(book_ids or docs)
    unknown = [b for b in selected if b not in docs]
    if unknown:
        raise ConfigInvalid(f"unknown book ids: {unknown}")
    run_id = run_id or default_run_id(cfg)
    store = RunStore(cfg.path(cfg.runs_dir), run_id, clock)
    store.create_or_resume(cfg, selected)
    gateway = gateway or make_gateway(cfg, "summarizer")
    scfg = cfg.summarizer_config()

    todo = [b for b in selected if store.status(b) == "pending"]
    skipped = len(selected) - len(todo)
    if skipped:
        logger.info("resuming %s: %d books already finished", run_id, skipped)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(lambda b: _profile_book(store, docs[b], scfg, gateway), todo))
    else:
        for b in todo:
            _profile_book(store, docs[b], scfg, gateway)
    failed = [b for b in selected if store.status(b) == "failed"]
    return run_id, 1 if failed else 0


# --- evaluation ------------------------------------------------------------------


def open_run(cfg: ExperimentConfig, run_id: str, clock: Callable[[], float] = default_clock) -> RunStore:
    store = RunStore(cfg.path(cfg.runs_dir), run_id, clock)
    store.load()
    if not store.done_books():
        raise MissingArtifacts(f"run {run_id} has no finished profiles")
    return store


def _load_references(cfg: ExperimentConfig, book_ids: list[str]) -> dict[str, CharacterProfile]:
    if not cfg.references_dir:
        return {}
    refs = {}
    for b in book_ids:
        p = cfg.path(cfg.references_dir) / f"{b}.json"
        if p.exists():
            ref = CharacterProfile.from_json(p.read_text(encoding="utf-8"))
            refs[b] = dataclasses.replace(
                ref, provenance=Provenance("reference", ref.provenance.model_id or "reference", 0)
            )
    return refs


def _fce_table_files(store: RunStore) -> list[str]:
    fce_dir = store.root / "evaluations" / "fce"
    reports = [ConsistencyReport.from_dict(d) for d in read_jsonl(fce_dir / "reports.jsonl")]
    verdicts = [PairwiseVerdict.from_dict(d) for d in read_jsonl(fce_dir / "verdicts.jsonl")]
    table = aggregate(reports, verdicts)
    acc_path = store.root / "evaluations" / "mr" / "accuracy.json"
    if acc_path.exists():
        rows = json.loads(acc_path.read_text(encoding="utf-8"))
        table.with_mr_accuracy({(r["method"], r["model"]): r["mean_pct"] for r in rows if not r["ablated"]})
    return [
        store.write_file("evaluations/fce/table.csv", table.to_csv()),
        store.write_file("evaluations/fce/table.md", table.to_markdown()),
    ]


def evaluate_fce(cfg: ExperimentConfig, store: RunStore, judge: Gateway) -> int:
    books = store.done_books()
    refs = _load_references(cfg, books)
    if not refs:
        raise MissingArtifacts("no reference profiles found for finished books")
    baseline = open_run(cfg, cfg.baseline_run) if cfg.baseline_run else None
    judge_model = cfg.judge_model_id or cfg.model_id
    reports, verdicts, failures = [], [], []
    for b in books:
        ref = refs.get(b)
        if ref is None:
            continue
        if any(not ref.sections[d].strip() for d in DIMENSIONS):
            failures.append({"book_id": b, "error": "reference profile has an empty section"})
            continue
        cand = store.read_profile(b)
        other = baseline.read_profile(b) if baseline and b in baseline.done_books() else None
        character = ref.character_name or cand.character_name
        try:
            book_reports = [
                score_consistency(
                    ref.sections[d], cand.sections[d], d, character, judge, judge_model,
                    book_id=b, method=cand.provenance.method, model=cand.provenance.model_id,
                )
                for d in DIMENSIONS
            ]
        except ProfileForgeError as exc:
            failures.append({"book_id": b, "error": f"{type(exc).__name__}: {exc}"})
            continue
        reports.extend(book_reports)
        if other is None:
            continue
        for d in DIMENSIONS:
            a_text, b_text = cand.sections[d], other.sections[d]
            if not a_text.strip() or not b_text.strip():
                failures.append({"book_id": b, "error": f"pairwise {d.key}: empty candidate section"})
                continue
            model_a, model_b = cand.provenance.model_id, other.provenance.model_id
            if model_a == model_b:
                # same model on both sides; keep the win-rate rows apart
                model_b = f"{model_b}@{cfg.baseline_run}"
            seed = comparison_seed(cfg.seeds.get("pairwise", 0), b, d.key, model_a, model_b)
            try:
                verdicts.append(
                    compare_pairwise(
                        ref.sections[d], a_text, b_text, d, character, judge, judge_model, seed,
                        book_id=b, model_a=model_a, model_b=model_b, method=cand.provenance.method,
                    )
                )
            except ProfileForgeError as exc:
                failures.append({"book_id": b, "error": f"pairwise {d.key}: {type(exc).__name__}: {exc}"})

    files = [
        store.write_file("evaluations/fce/reports.jsonl", _jsonl(r.to_dict() for r in reports)),
        store.write_file("evaluations/fce/verdicts.jsonl", _jsonl(v.to_dict() for v in verdicts)),
    ]
    if failures:
        files.append(store.write_file("evaluations/fce/failures.jsonl", _jsonl(failures)))
    if reports:
        files += _fce_table_files(store)
    store.record_evaluation("fce", files)
    return 1 if failures else 0


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows)


def _accepted_mcqs(cfg: ExperimentConfig, books: list[str]):
    if not cfg.mcq_path or not cfg.path(cfg.mcq_path).exists():
        raise MissingArtifacts("no MCQ dataset configured (mcq_path)")
    wanted = set(books)
    mcqs = [m for m in load_mcqs(cfg.path(cfg.mcq_path)) if m.status == "accepted" and m.book_id in wanted]
    if not mcqs:
        raise MissingArtifacts("no accepted MCQs for the finished books")
    return mcqs


def _run_questions(cfg, profiles, mcqs, ablations, reasoner) -> tuple[list[MRRecord], list[dict]]:
    model = cfg.reasoner_model_id or cfg.model_id
    records, failures = [], []
    for profile_key, profile_by_book in profiles:
        for ablation in ablations:
            for t in range(cfg.trials):
                for m in mcqs:
                    profile = profile_by_book.get(m.book_id)
                    if profile is None:
                        continue
                    try:
                        records.append(run_mr(profile, m, reasoner, model, ablation, trial=t, bypass_cache=t > 0))
                    except ProfileForgeError as exc:
                        failures.append({"mcq_id": m.id, "profile": profile_key, "trial": t,
                                         "error": f"{type(exc).__name__}: {exc}"})
    return records, failures


def _accuracy_rows(records: list[MRRecord], trials: int, ablations: list[frozenset]) -> list[dict]:
    stats = accuracy(records, trials=trials)
    order = {tuple(d.key for d in DIMENSIONS if d in a): i for i, a in enumerate(ablations)}
    rows = []
    for (method, model, ablated), s in sorted(stats.items(), key=lambda kv: (kv[0][:2], order.get(kv[0][2], 0))):
        label = ablation_label(ProfileDimension.parse(k) for k in ablated)
        rows.append({
            "method": method,
            "model": model,
            "ablated": list(ablated),
            "ablation": label,
            "mean_pct": s.mean_pct,
            "std_pct": s.std_pct,
            "per_trial": list(s.per_trial),
        })
    return rows


def _accuracy_markdown(rows: list[dict]) -> str:
    lines = ["| Method | Model | Ablation | Acc. | Std. |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {r['model']} | {r['ablation']} | {r['mean_pct']:.2f} | {r['std_pct']:.2f} |")
    return "\n".join(lines) + "\n"


def _accuracy_csv(rows: list[dict]) -> str:
    out = ["method,model,ablation,acc,std"]
    out += [f"{r['method']},{r['model']},{r['ablation']},{r['mean_pct']!r},{r['std_pct']!r}" for r in rows]
    return "\n".join(out) + "\n"


def evaluate_mr(cfg: ExperimentConfig, store: RunStore, reasoner: Gateway, mode: str = "mr") -> int:
    books = store.done_books()
    mcqs = _accepted_mcqs(cfg, books)
    profiles = [("run", {b: store.read_profile(b) for b in books})]
    if mode == "ablation":
        ablations = [parse_ablation(s) for s in cfg.ablations]
        refs = _load_references(cfg, books)
        if refs:
            profiles.append(("reference", refs))
    else:
        ablations = [frozenset()]
    records, failures = _run_questions(cfg, profiles, mcqs, ablations, reasoner)
    rows = _accuracy_rows(records, cfg.trials, ablations) if records else []

    out = f"evaluations/{mode}"
    files = [
        store.write_file(f"{out}/records.jsonl", _jsonl(r.to_dict() for r in records)),
        store.write_file(f"{out}/accuracy.json", dump_json(rows)),
        store.write_file(f"{out}/accuracy.csv", _accuracy_csv(rows)),
        store.write_file(f"{out}/accuracy.md", _accuracy_markdown(rows)),
    ]
    if failures:
        files.append(store.write_file(f"{out}/failures.jsonl", _jsonl(failures)))
    store.record_evaluation(mode, files)
    fce = store.manifest["evaluations"].get("fce")
    if mode == "mr" and fce and "evaluations/fce/reports.jsonl" in fce:
        store.record_evaluation("fce", sorted(set(fce) | set(_fce_table_files(store))))
    return 1 if failures else 0


def cli_evaluate(
    cfg: ExperimentConfig, run_id: str, mode: str, gateway: Gateway | None = None,
    clock: Callable[[], float] = default_clock,
) -> tuple[list[str], int]:
    """Run one evaluation mode (``fce``, ``mr`` or ``ablation``) over a run."""
    store = open_run(cfg, run_id, clock)
    if mode == "fce":
        code = evaluate_fce(cfg, store, gateway or make_gateway(cfg, "judge"))
    elif mode in ("mr", "ablation"):
        code = evaluate_mr(cfg, store, gateway or make_gateway(cfg, "reasoner"), mode)
    else:
        raise ConfigInvalid(f"unknown evaluation mode {mode!r}")
    return [str(store.root / f) for f in store.manifest["evaluations"][mode]], code


def report(cfg: ExperimentConfig, run_id: str) -> str:
    store = RunStore(cfg.path(cfg.runs_dir), run_id)
    store.load()
    parts = [f"# Run {run_id}", ""]
    books = store.manifest["books"]
    counts = {s: sum(e["status"] == s for e in books.values()) for s in STATUSES}
    parts.append(", ".join(f"{n} {s}" for s, n in counts.items()))
    for mode, name in (("fce", "table.md"), ("mr", "accuracy.md"), ("ablation", "accuracy.md")):
        path = store.root / "evaluations" / mode / name
        if path.exists():
            parts += ["", f"## {mode}", "", path.read_text(encoding="utf-8").rstrip()]
    return "\n".join(parts) + "\n"
