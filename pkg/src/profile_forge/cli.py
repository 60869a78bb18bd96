"""``profile-forge`` command line.

Exit codes: 0 success, 1 partial failures, 2 configuration or missing inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import get_tokenizer, load_corpus
from .errors import ConfigInvalid, MissingAnnotation, MissingArtifacts, ProfileForgeError
from .llm_gateway import atomic_write_text
from .mr import (
    AnnotationSheet,
    MCQ,
    fleiss_kappa,
    format_question,
    generate_mcqs,
    load_annotations,
    load_mcqs,
    ratings_by_item,
    rebalance_answers,
    review_mcqs,
    save_annotations,
    save_mcqs,
)
from .runstore import cli_evaluate, cli_profile, dump_json, load_config, make_gateway, parse_overrides, report

logger = logging.getLogger("profile_forge")

REVIEW_CRITERIA = """\
Keep the question only if all of these hold:
  1. The focus character is the one making the decision.
  2. It asks, directly or not, why the character decided.
  3. The decision matters to the story, not a routine act.
  4. Neither scenario nor question gives the motivation away."""


def _config(args):
    if not args.config:
        raise ConfigInvalid("--config is required for this command")
    return load_config(Path(args.config), parse_overrides(args.set or []))


def cmd_ingest(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs = load_corpus(Path(args.source), get_tokenizer(args.tokenizer))
    if not docs:
        raise MissingArtifacts(f"no .txt books in {args.source}")
    for doc in docs.values():
        atomic_write_text(out / f"{doc.id}.txt", doc.text + "\n")
        meta = {"id": doc.id, "title": doc.title, "main_character": doc.main_character, "token_count": doc.token_count}
        atomic_write_text(out / f"{doc.id}.json", dump_json(meta))
        print(f"{doc.id}\t{doc.token_count}\t{doc.title}")
    return 0


def cmd_profile(args) -> int:
    cfg = _config(args)
    run_id, code = cli_profile(cfg, args.books or None, args.run_id)
    print(run_id)
    return code


def _evaluate(mode):
    def run(args) -> int:
        cfg = _config(args)
        paths, code = cli_evaluate(cfg, args.run_id, mode)
        for p in paths:
            print(p)
        return code

    return run


def cmd_report(args) -> int:
    cfg = _config(args)
    sys.stdout.write(report(cfg, args.run_id))
    return 0


def cmd_mcq_generate(args) -> int:
    cfg = _config(args)
    gateway = make_gateway(cfg, "generator")
    exemplars = load_mcqs(Path(args.exemplars))
    summaries = Path(args.summaries).read_text(encoding="utf-8")
    model = cfg.generator_model_id or cfg.judge_model_id or cfg.model_id
    mcqs = generate_mcqs(args.character, summaries, exemplars, gateway, model, args.count, book_id=args.book_id)
    out = Path(args.out)
    existing = load_mcqs(out) if out.exists() else []
    save_mcqs(out, [m for m in existing if m.book_id != args.book_id] + mcqs)
    print(f"{len(mcqs)} questions written to {out}")
    return 0


def _interactive_review(mcqs: list[MCQ], path: Path, annotator: str) -> None:
    sheets = load_annotations(path) if path.exists() else []
    done = {s.mcq_id for s in sheets if s.annotator_id == annotator}
    print(REVIEW_CRITERIA)
    for m in mcqs:
        if m.id in done:
            continue
        print(f"\n[{m.id}] {m.character} ({m.book_id})\n{format_question(m)}\nAnswer: {m.answer_label}")
        while True:
            key = input("keep (k) / reject (r) / skip (s) / quit (q): ").strip().lower()
            if key in ("k", "r", "s", "q"):
                break
        if key == "q":
            break
        if key == "s":
            continue
        sheets.append(AnnotationSheet(m.id, annotator, key == "k"))
        save_annotations(path, sheets)


def cmd_mcq_review(args) -> int:
    mcqs = load_mcqs(Path(args.mcqs))
    ann_path = Path(args.annotations)
    if args.annotator:
        _interactive_review(mcqs, ann_path, args.annotator)
        if not args.out:
            return 0
    reviewed = review_mcqs(mcqs, load_annotations(ann_path), args.quorum)
    save_mcqs(Path(args.out), reviewed)
    accepted = sum(m.status == "accepted" for m in reviewed)
    print(f"{accepted} of {len(reviewed)} questions accepted")
    return 0


def cmd_mcq_rebalance(args) -> int:
    mcqs = [m for m in load_mcqs(Path(args.mcqs)) if args.all or m.status == "accepted"]
    balanced = rebalance_answers(mcqs, args.seed)
    save_mcqs(Path(args.out), balanced)
    counts = {label: sum(m.answer_label == label for m in balanced) for label in "ABCD"}
    print(json.dumps(counts))
    return 0


def cmd_mcq_kappa(args) -> int:
    kappa = fleiss_kappa(ratings_by_item(load_annotations(Path(args.annotations))), ["keep", "reject"])
    print(f"{kappa:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted keys)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="profile-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="normalize raw books into a corpus directory")
    p.add_argument("source")
    p.add_argument("--out", required=True)
    p.add_argument("--tokenizer", default="whitespace")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("profile", parents=[common], help="summarize character profiles")
    p.add_argument("--run-id")
    p.add_argument("--books", nargs="*")
    p.set_defaults(func=cmd_profile)

    for name, mode in (("evaluate-fce", "fce"), ("evaluate-mr", "mr"), ("ablate", "ablation")):
        p = sub.add_parser(name, parents=[common], help=f"{mode} evaluation of a run")
        p.add_argument("run_id")
        p.set_defaults(func=_evaluate(mode))

    p = sub.add_parser("report", parents=[common], help="print a run's tables")
    p.add_argument("run_id")
    p.set_defaults(func=cmd_report)

    mcq = sub.add_parser("mcq", help="motivation recognition question tools")
    msub = mcq.add_subparsers(dest="mcq_command", required=True)

    p = msub.add_parser("generate", parents=[common])
    p.add_argument("--book-id", required=True)
    p.add_argument("--character", required=True)
    p.add_argument("--summaries", required=True, help="chapter summaries text file")
    p.add_argument("--exemplars", required=True, help="exemplar MCQ JSONL")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mcq_generate)

    p = msub.add_parser("review", parents=[common])
    p.add_argument("--mcqs", required=True)
    p.add_argument("--annotations", required=True, help="CSV with mcq_id,annotator_id,keep")
    p.add_argument("--annotator", help="annotate interactively as this annotator first")
    p.add_argument("--quorum", choices=("all", "majority"), default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mcq_review)

    p = msub.add_parser("rebalance", parents=[common])
    p.add_argument("--mcqs", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--all", action="store_true", help="include questions that were not accepted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mcq_rebalance)

    p = msub.add_parser("kappa", parents=[common])
    p.add_argument("--annotations", required=True)
    p.set_defaults(func=cmd_mcq_kappa)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "mcq" and args.mcq_command == "review" and not args.annotator and not args.out:
        parser.error("mcq review needs --out unless annotating interactively")
    try:
        return args.func(args)
    except (ConfigInvalid, MissingArtifacts, MissingAnnotation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProfileForgeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
