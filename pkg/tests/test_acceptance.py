"""Acceptance criteria 1-8, checked offline against scripted or fake backends.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
Criterion 9 needs live credentials; see ``test_live.py``.
"""

import math
import os
import random
import time
from collections import Counter
from fractions import Fraction
from itertools import permutations

import pytest

import synthetic as sy
from profile_forge.corpus import ingest_document, segment
from profile_forge.errors import PackingImpossible
from profile_forge.fce import ConsistencyReport, aggregate, compare_pairwise, pearson
from profile_forge.llm_gateway import Gateway
from profile_forge.mr import MCQ, TABLE3_ABLATIONS, accuracy, MRRecord, fleiss_kappa, rebalance_answers, render_mr_prompt
from profile_forge.profile import DIMENSIONS, CharacterProfile, ProfileDimension, parse_profile
from profile_forge.prompts import get_registry
from profile_forge.summarizer import SummarizerConfig, pack_summaries, summarize

criterion = pytest.mark.criterion


# --- 1 -------------------------------------------------------------------------


@criterion(1, "scripted end-to-end runs are byte-identical and finish in < 60 s")
def test_end_to_end_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    started = time.monotonic()
    source = tmp_path / "recorded"
    sy.write_workspace(source)
    sy.record_script(source)

    trees = []
    for name in ("first", "second"):
        root = tmp_path / name
        sy.copy_inputs(source, root)
        assert sy.run_pipeline(root) == [0] * len(sy.PIPELINE)
        trees.append(sy.tree_bytes(root / "runs"))
    elapsed = time.monotonic() - started

    assert trees[0] == trees[1]
    # all three methods, FCE, MR and the ablation study are present
    names = set(trees[0])
    for run in ("inc", "hier", "onego"):
        assert {f"{run}/books/{b}/profile.json" for b in ("b1", "b2", "b3")} <= names
    assert "hier/books/b1/merge_tree.json" in names
    assert {"inc/evaluations/fce/table.csv", "hier/evaluations/fce/verdicts.jsonl",
            "onego/evaluations/mr/accuracy.json", "inc/evaluations/ablation/accuracy.json"} <= names
    assert elapsed < 60, f"pipeline took {elapsed:.1f}s"


# --- 2 -------------------------------------------------------------------------


class PromptMeter:
    """Wraps a backend and keeps the token count of every merge prompt."""

    def __init__(self, inner, tokenizer):
        self.inner, self.tok = inner, tokenizer
        self.merge_tokens: list[int] = []

    def send(self, req):
        if ":merge" in req.request_tag:
            self.merge_tokens.append(self.tok.count(req.prompt))
        return self.inner.send(req)


def _random_book(rng: random.Random, n: int):
    style = rng.choice(["plain", "long_paragraphs", "no_breaks"])
    tokens = rng.randint(200, 40_000)
    if style == "no_breaks":
        # one unbroken run of words forces hard cuts
        text = " ".join(rng.choice(sy.FILLER) for _ in range(tokens))
    elif style == "long_paragraphs":
        text = sy.make_book_text(rng, tokens, "Avery", sentence_len=(10, 60), para_len=(40, 200))
    else:
        text = sy.make_book_text(rng, tokens, "Avery")
    return ingest_document(text, f"r{n}", "Random", main_character="Avery")


@criterion(2, "200 random books: chunks <= 3000 tokens, merge prompts < 8096 tokens, profiles <= 1200 words")
def test_budget_invariants():
    rng = random.Random(2)
    violations = []
    merges = 0
    for n in range(200):
        doc = _random_book(rng, n)
        chunks = segment(doc, 3000)
        violations += [f"{doc.id} chunk {c.index}: {c.token_count}" for c in chunks if c.token_count > 3000]
        method = ("incremental", "hierarchical", "one_go")[n % 3]
        meter = PromptMeter(sy.FakeModel(seed=n, max_frac=1.5), SummarizerConfig().tokenizer)
        res = summarize(doc, "Avery", SummarizerConfig(method, model_id="fake"), Gateway(meter))
        merges += len(meter.merge_tokens)
        violations += [f"{doc.id} merge prompt {t} tokens" for t in meter.merge_tokens if t >= 8096]
        violations += [f"{doc.id} trace merge {s.prompt_tokens}" for s in res.trace
                       if s.kind.startswith("merge") and s.prompt_tokens >= 8096]
        if res.profile.total_words > 1200:
            violations.append(f"{doc.id} {method} profile {res.profile.total_words} words")
    assert merges > 0
    assert violations == []


# --- 3 -------------------------------------------------------------------------


def _k_chunk_doc(k: int):
    para = " ".join(f"word{i % 97}" for i in range(3000))
    return ingest_document("\n\n".join([para] * k), f"k{k}", "K", main_character="Ann")


@criterion(3, "one overflow at step j gives trace [init, update x (j-1), compress, update x (k-j)]")
def test_incremental_trace_shape():
    checked = 0
    for k in range(1, 8):
        doc = _k_chunk_doc(k)
        assert len(segment(doc, 3000)) == k
        for j in range(1, k + 1):
            tag = "incremental:init:0" if j == 1 else f"incremental:update:{j - 1}"
            model = sy.FakeModel(seed=k * 10 + j, max_frac=0.95, overflow_tags={tag})
            res = summarize(doc, "Ann", SummarizerConfig("incremental"), Gateway(model))
            expected = ["init"] + ["update"] * (j - 1) + ["compress"] + ["update"] * (k - j)
            assert [s.kind for s in res.trace] == expected, (k, j)
            assert parse_profile(res.trace[j - 1].raw_output, "Ann").total_words > 1200
            assert res.profile.total_words <= 1200
            checked += 1
    assert checked == 28


# --- 4 -------------------------------------------------------------------------


def _oracle_packing(lengths, prompt_len, ctx_len, window):
    groups, start = [], 0
    while start < len(lengths):
        ctx = ctx_len if groups else 0
        fits = [e for e in range(start + 1, len(lengths) + 1) if sum(lengths[start:e]) + prompt_len + ctx < window]
        if not fits:
            return None
        groups.append(range(start, max(fits)))
        start = max(fits)
    return groups


@criterion(4, "merge trees cover each chunk once; packing matches the brute-force oracle on 1000 vectors")
def test_merge_tree_conservation():
    rng = random.Random(4)
    counts = sorted({1, 2, 50, *rng.sample(range(3, 50), 20)})
    cfg = SummarizerConfig("hierarchical", chunk_size=100, context_window=1000, max_summary_words=80)
    for n in counts:
        para = " ".join(f"t{i}" for i in range(100))
        doc = ingest_document("\n\n".join([para] * n), f"c{n}", "C", main_character="Ann")
        res = summarize(doc, "Ann", cfg, Gateway(sy.FakeModel(seed=n, max_frac=1.0)))
        leaves = res.tree.leaf_chunks()
        assert sorted(leaves) == list(range(n)) and len(leaves) == n, n
        if n > 1:
            assert any(node.level > 1 for node in res.tree.nodes.values())

    for _ in range(1000):
        lengths = [rng.randint(1, 4000) for _ in range(rng.randint(1, 30))]
        prompt_len, ctx_len = rng.randint(0, 1500), rng.randint(0, 3000)
        expected = _oracle_packing(lengths, prompt_len, ctx_len, 8096)
        if expected is None:
            with pytest.raises(PackingImpossible):
                pack_summaries(lengths, prompt_len, ctx_len, 8096)
        else:
            assert pack_summaries(lengths, prompt_len, ctx_len, 8096) == expected


# --- 5 -------------------------------------------------------------------------


class ConstantJudge:
    def __init__(self, label):
        self.label = label

    def send(self, req):
        return f'{{"model_name": "{self.label}", "reason": "always the same"}}'


@criterion(5, "verdict points sum to 1; constant judge gives 0.5 over both orders; Avg equals mean of columns")
def test_fce_math():
    rng = random.Random(5)
    verdicts = []
    fake = Gateway(sy.FakeModel(seed=5))
    for i in range(200):
        dim = DIMENSIONS[i % 4]
        v = compare_pairwise("gold", f"first {i}", f"second {i}", dim, "Ann", fake, "j", rng.randrange(2**32),
                             book_id=f"b{i % 7}", model_a="x", model_b="y", method="m")
        verdicts.append(v)
    assert {v.winner for v in verdicts} == {"a", "b", "equilibrium"}
    assert all(v.points_a + v.points_b == 1.0 for v in verdicts)

    for label in ("model_1", "model_2"):
        both = [
            compare_pairwise("gold", "AAA", "BBB", dim, "Ann", Gateway(ConstantJudge(label)), "j", 0,
                             model_a="x", model_b="y", method="m", presentation_order=order)
            for dim in DIMENSIONS for order in ("ab", "ba")
        ]
        rows = aggregate([], both).rows
        for dim in DIMENSIONS:
            assert rows[("m", "x")].win_rate[dim] == 0.5 and rows[("m", "y")].win_rate[dim] == 0.5

    reports = [
        ConsistencyReport(f"b{b}", d, rng.randint(1, 5), "", "j", method, "m")
        for method in ("incremental", "hierarchical")
        for b in range(rng.randint(1, 30))
        for d in DIMENSIONS
    ]
    table = aggregate(reports, verdicts)
    for row in table.rows.values():
        if row.consistency:
            assert abs(row.consistency_avg - sum(row.consistency[d] for d in DIMENSIONS) / 4) <= 1e-12
        if row.win_rate:
            assert abs(row.win_rate_avg - sum(row.win_rate[d] for d in DIMENSIONS) / 4) <= 1e-12


# --- 6 -------------------------------------------------------------------------


def _pearson_oracle(xs, ys):
    fx, fy = [Fraction(x) for x in xs], [Fraction(y) for y in ys]
    n = len(fx)
    num = n * sum(a * b for a, b in zip(fx, fy)) - sum(fx) * sum(fy)
    den = (n * sum(a * a for a in fx) - sum(fx) ** 2) * (n * sum(b * b for b in fy) - sum(fy) ** 2)
    return math.copysign(math.sqrt(num * num / den), num)


def _kappa_oracle(ratings):
    n, items = len(ratings[0]), len(ratings)
    p_i = [Fraction(sum(1 for a, b in permutations(range(n), 2) if r[a] == r[b]), n * (n - 1)) for r in ratings]
    p_bar = sum(p_i) / items
    flat = [c for r in ratings for c in r]
    p_e = sum(Fraction(k, len(flat)) ** 2 for k in Counter(flat).values())
    return float((p_bar - p_e) / (1 - p_e))


@criterion(6, "pearson and fleiss_kappa match direct-formula oracles to 1e-9; accuracy matches hand values")
def test_statistics_oracles():
    rng = random.Random(6)
    for _ in range(100):
        n = rng.randint(3, 60)
        xs = [rng.uniform(-100, 100) for _ in range(n)]
        ys = [x * rng.uniform(-2, 2) + rng.gauss(0, 30) for x in xs]
        assert abs(pearson(xs, ys)[0] - _pearson_oracle(xs, ys)) <= 1e-9
        a, b = rng.uniform(0.1, 10), rng.uniform(-10, 10)
        ints = [rng.randint(-50, 50) for _ in range(n)]
        if len(set(ints)) > 1:
            assert pearson(ints, [a * x + b for x in ints])[0] == 1.0
            assert pearson(ints, [-a * x + b for x in ints])[0] == -1.0

    for _ in range(100):
        raters, items, cats = rng.randint(2, 6), rng.randint(1, 30), rng.randint(2, 4)
        ratings = [[rng.randrange(cats) for _ in range(raters)] for _ in range(items)]
        if len({c for r in ratings for c in r}) == 1:
            assert fleiss_kappa(ratings) == 1.0
        else:
            assert abs(fleiss_kappa(ratings) - _kappa_oracle(ratings)) <= 1e-9

    def rec(i, ok, t):
        return MRRecord(f"q{i}", "m", "x", (), 0 if ok else 1, 0, "", t)

    (s,) = accuracy([rec(i, i < 7, 0) for i in range(10)] + [rec(i, i < 8, 1) for i in range(10)], trials=2).values()
    assert (s.mean_pct, s.std_pct) == (75.0, 5.0)
    (s,) = accuracy([rec(i, i < 3, 0) for i in range(4)]).values()
    assert (s.mean_pct, s.std_pct) == (75.0, 0.0)


# --- 7 -------------------------------------------------------------------------


@criterion(7, "rebalanced answer positions differ by at most 1 for n = 1..100 all-A sets; content preserved")
def test_rebalance_fairness():
    for n in range(1, 101):
        qs = [MCQ(f"q{i}", "b", "Ann", "s", "q?", tuple(f"{i}-{k}" for k in range(4)), 0,
                  tuple(f"why {i}-{k}" for k in range(4)), "accepted") for i in range(n)]
        out = rebalance_answers(qs, seed=n)
        counts = Counter(m.answer_index for m in out)
        assert max(counts[k] for k in range(4)) - min(counts[k] for k in range(4)) <= 1, n
        for before, after in zip(qs, out):
            assert after.options[after.answer_index] == before.options[0]
            assert sorted(after.options) == sorted(before.options)
            assert dict(zip(after.options, after.option_rationales)) == dict(zip(before.options, before.option_rationales))
            assert (after.id, after.scenario, after.question) == (before.id, before.scenario, before.question)


# --- 8 -------------------------------------------------------------------------


@criterion(8, "MR prompts for the 8 ablation sets show exactly the surviving headers; all-ablated uses no-analysis")
def test_ablation_plumbing():
    reg = get_registry()
    profile = CharacterProfile("Ann", {d: f"{d.value} facts about Ann." for d in DIMENSIONS})
    mcq = MCQ("q", "b", "Ann", "Ann leaves.", "Why does Ann leave?", ("a", "b", "c", "d"), 0, status="accepted")
    assert len(TABLE3_ABLATIONS) == 8
    normal_intro = reg.template("mr_normal").split("{character}")[0]
    bare_intro = reg.template("mr_ablate_all").split("Your task")[0]
    for drop in TABLE3_ABLATIONS:
        prompt = render_mr_prompt(profile, mcq, drop, reg)
        lines = prompt.splitlines()
        assert {d for d in DIMENSIONS if d.header in lines} == set(DIMENSIONS) - drop
        for d in DIMENSIONS:
            assert (f"{d.value} facts about Ann." in prompt) == (d not in drop)
        if drop == frozenset(ProfileDimension):
            assert prompt.startswith(bare_intro) and "not given the character analysis" in prompt
            assert "Summary of this character" not in prompt
        else:
            assert prompt.startswith(normal_intro) and "Summary of this character:" in prompt


def test_pipeline_does_not_leak_environment(monkeypatch):
    # the determinism check relies on the pinned clock
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    from profile_forge.runstore import default_clock

    assert default_clock() == 0.0
    assert os.environ["SOURCE_DATE_EPOCH"] == "0"
