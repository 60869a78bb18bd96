"""Deterministic fake chat model and synthetic books for offline tests.

``FakeModel`` reads the registry's prompt shapes and answers in the
expected format. Its answers are a pure function of the prompt, so running
it behind a ``RecordingBackend`` yields a script the scripted backend can
replay.
"""

from __future__ import annotations

import hashlib
import json
import random
import re

from profile_forge.llm_gateway import CompletionRequest

FILLER = "river lantern orchard winter harbor letter promise garden silence market".split()
NAMES = ["Margot", "Yunxian", "Benjamin", "Avery", "Millie", "June", "Ava", "Bobby"]

_WITHIN = re.compile(r"must be within (\d+) words")
_CONDENSE = re.compile(r"condense it to less than (\d+) words")
_CONTENT = re.compile(r"- - -\n(.*?)\n- - -", re.DOTALL)


def _h(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode()).digest()[:8], "big")


def _base_tag(tag: str) -> str:
    return tag.split(":feedback")[0].split(":repair")[0]


class FakeModel:
    def __init__(
        self,
        seed: int = 0,
        min_frac: float = 0.3,
        max_frac: float = 1.15,
        overflow_tags: set[str] = frozenset(),
        apology_tags: set[str] = frozenset(),
        stubborn_tags: set[str] = frozenset(),
    ):
        self.seed = str(seed)
        self.min_frac = min_frac
        self.max_frac = max_frac
        self.overflow_tags = set(overflow_tags)
        self.apology_tags = set(apology_tags)
        self.stubborn_tags = set(stubborn_tags)
        self.requests: list[CompletionRequest] = []

    def send(self, req: CompletionRequest) -> str:
        self.requests.append(req)
        p = req.prompt
        h = _h(self.seed, p)
        base = _base_tag(req.request_tag)
        if base in self.apology_tags or base in self.stubborn_tags:
            if "Do not apologize" not in p or base in self.stubborn_tags:
                return "I'm sorry, but this excerpt says nothing about that character."
        if "Consistency (1-5)" in p:
            return json.dumps({"score": 1 + h % 5, "reason": "synthetic judgement"})
        if "rank the models" in p:
            return json.dumps({"model_name": ("model_1", "model_2", "Equilibrium")[h % 3], "reason": "synthetic"})
        if '"Choice"' in p:
            return json.dumps({"Choice": "ABCD"[h % 4], "Reason": "synthetic reasoning"})
        if "multiple-choice questions" in p:
            return self._mcqs(p, h)
        m = _CONDENSE.search(p)
        if m:
            target = int(m.group(1))
            return self._profile(p, h, int(target * (0.5 + (h % 45) / 100)))
        m = _WITHIN.search(p)
        if m:
            budget = int(m.group(1))
            if base in self.overflow_tags:
                return self._profile(p, h, budget + 100)
            span = self.max_frac - self.min_frac
            return self._profile(p, h, max(8, int(budget * (self.min_frac + span * (h % 1000) / 1000))))
        raise ValueError(f"fake model cannot answer prompt tagged {req.request_tag!r}")

    def _words(self, prompt: str) -> list[str]:
        m = _CONTENT.search(prompt)
        words = re.findall(r"[A-Za-z]+", m.group(1)) if m else []
        words = [w for w in words if w not in ("Attributes", "Relationships", "Events", "Personality", "None")]
        return words or FILLER

    def _profile(self, prompt: str, h: int, total: int) -> str:
        words = self._words(prompt)
        shares = (1, 2, 4, 1)
        sizes = [max(1, total * s // 8) for s in shares]
        sizes[2] += total - sum(sizes)
        sizes[2] = max(1, sizes[2])
        out, pos = [], h % len(words)
        for header, n in zip(("Attributes", "Relationships", "Events", "Personality"), sizes):
            body = [words[(pos + i) % len(words)] for i in range(n)]
            pos += n
            out.append(f"{header}:\n{' '.join(body)}")
        return "\n\n".join(out)

    def _mcqs(self, prompt: str, h: int) -> str:
        rng = random.Random(h)
        words = self._words(prompt)
        items = []
        for i in range(5):
            pick = lambda n: " ".join(rng.choice(words) for _ in range(n))  # noqa: E731
            items.append({
                "scenario": f"The character decides to {pick(5)}.",
                "question": f"Why does the character decide to {pick(4)}?",
                "options": [pick(6) for _ in range(4)],
                "answer": "ABCD"[rng.randrange(4)],
                "option_rationales": [pick(5) for _ in range(4)],
            })
        return json.dumps(items)


def make_book_text(rng: random.Random, n_tokens: int, character: str, sentence_len=(6, 30), para_len=(3, 12)) -> str:
    """Synthetic prose of roughly ``n_tokens`` whitespace tokens."""
    vocab = FILLER + ["the", "and", "walked", "said", "quietly", "remembered", "decided", "because"]
    paragraphs, total = [], 0
    while total < n_tokens:
        sentences = []
        for _ in range(rng.randint(*para_len)):
            n = rng.randint(*sentence_len)
            words = [character if rng.random() < 0.1 else rng.choice(vocab) for _ in range(n)]
            words[0] = words[0].capitalize()
            sentences.append(" ".join(words) + rng.choice([".", ".", "!", "?"]))
            total += n
            if total >= n_tokens:
                break
        paragraphs.append(" ".join(sentences))
    return "\n\n".join(paragraphs)


# --- workspaces for run-store and end-to-end tests ------------------------------------

BOOK_SPECS = [("b1", 7000, "Margot"), ("b2", 10500, "Yunxian"), ("b3", 12000, "Benjamin")]


def reference_profile(character: str, seed: int):
    from profile_forge.profile import DIMENSIONS, CharacterProfile, Provenance

    rng = random.Random(seed)
    sections = {d: " ".join(rng.choice(FILLER) for _ in range(12 + 4 * i)) for i, d in enumerate(DIMENSIONS)}
    return CharacterProfile(character, sections, Provenance("reference", "human", 0))


def fixture_mcqs(book_id: str, character: str, n: int, seed: int, status: str = "accepted"):
    from profile_forge.mr import MCQ

    rng = random.Random(seed)
    out = []
    for i in range(n):
        opts = tuple(f"{character} wants to {rng.choice(FILLER)} the {rng.choice(FILLER)} ({k})" for k in range(4))
        out.append(MCQ(f"{book_id}-q{i:03d}", book_id, character, f"{character} leaves the {rng.choice(FILLER)}.",
                       f"Why does {character} leave?", opts, rng.randrange(4), ("r",) * 4, status))
    return out


def write_workspace(root, books=BOOK_SPECS, seed: int = 0, **config) -> None:
    """Raw books with sidecars, reference profiles, MCQs and a scripted config."""
    from pathlib import Path

    from profile_forge.mr import save_mcqs

    root = Path(root)
    (root / "raw").mkdir(parents=True, exist_ok=True)
    (root / "references").mkdir(exist_ok=True)
    mcqs = []
    for n, (book_id, tokens, character) in enumerate(books):
        text = make_book_text(random.Random(seed * 1000 + n), tokens, character)
        # raw input as it might arrive: CRLF line endings and trailing spaces
        (root / "raw" / f"{book_id}.txt").write_bytes(text.replace("\n", "  \r\n").encode("utf-8"))
        meta = {"id": book_id, "title": f"The {character} Papers", "main_character": character}
        (root / "raw" / f"{book_id}.json").write_text(json.dumps(meta))
        (root / "references" / f"{book_id}.json").write_text(reference_profile(character, seed + n).to_json())
        mcqs += fixture_mcqs(book_id, character, 4, seed + n)
    save_mcqs(root / "mcqs.jsonl", mcqs)
    cfg = {
        "corpus_dir": "corpus",
        "model_id": "fake-large",
        "judge_model_id": "fake-judge",
        "reasoner_model_id": "fake-reasoner",
        "references_dir": "references",
        "mcq_path": "mcqs.jsonl",
        "runs_dir": "runs",
        "cache_dir": "cache",
        "trials": 2,
        "backends": {"summarizer": {"kind": "scripted", "script_path": "script.json"}},
    }
    cfg.update(config)
    (root / "config.json").write_text(json.dumps(cfg, indent=2))


PIPELINE = [
    ["ingest", "raw", "--out", "corpus"],
    ["profile", "--config", "config.json", "--run-id", "inc"],
    ["profile", "--config", "config.json", "--run-id", "hier", "--set", "method=hierarchical",
     "--set", "model_id=fake-small"],
    ["profile", "--config", "config.json", "--run-id", "onego", "--set", "method=one_go"],
    ["evaluate-fce", "--config", "config.json", "inc"],
    ["evaluate-fce", "--config", "config.json", "hier", "--set", "baseline_run=inc"],
    ["evaluate-mr", "--config", "config.json", "inc"],
    ["evaluate-mr", "--config", "config.json", "hier"],
    ["evaluate-mr", "--config", "config.json", "onego"],
    ["ablate", "--config", "config.json", "inc"],
]


def run_pipeline(root, steps=PIPELINE) -> list[int]:
    """Run CLI steps inside ``root``; returns their exit codes."""
    import os

    from profile_forge.cli import main

    here = os.getcwd()
    os.chdir(root)
    try:
        return [main(step) for step in steps]
    finally:
        os.chdir(here)


def record_script(root, model: FakeModel | None = None, steps=PIPELINE) -> dict:
    """Run the pipeline against the fake model and save what it answered as the script."""
    from unittest import mock

    from profile_forge import runstore
    from profile_forge.llm_gateway import Gateway, RecordingBackend, save_script

    recorder = RecordingBackend(model or FakeModel(max_frac=1.1))

    def gateway(cfg, role):
        return Gateway(recorder, tokenizer=runstore.get_tokenizer(cfg.tokenizer), prompts=runstore.get_registry())

    with mock.patch.object(runstore, "make_gateway", gateway):
        codes = run_pipeline(root, steps)
    if any(codes):
        raise RuntimeError(f"recording pass failed: exit codes {codes}")
    save_script(recorder.script, root / "script.json")
    return recorder.script


INPUTS = ("raw", "references", "mcqs.jsonl", "config.json", "script.json")


def copy_inputs(src, dst) -> None:
    import shutil
    from pathlib import Path

    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    for name in INPUTS:
        if (src / name).is_dir():
            shutil.copytree(src / name, dst / name)
        elif (src / name).exists():
            shutil.copy2(src / name, dst / name)


def tree_bytes(root) -> dict:
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
