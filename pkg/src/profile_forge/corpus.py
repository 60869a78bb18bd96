"""Book ingestion, token counting and token-budgeted segmentation.

Chunks are contiguous slices of the document text, so joining them in
index order gives back the text exactly. Whitespace that separates two
chunks (including a paragraph's trailing newlines) stays with the earlier
chunk.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import EmptyDocument

_PARAGRAPH_GAP = re.compile(r"\n[ \t]*\n")
_SENTENCE_END = re.compile(r"[.!?…][\"'”’)\]]*$")


class Tokenizer:
    """Deterministic tokenizer defined by a regex over token spans.

    Subclasses only need a ``pattern``. Splitting text at the start of any
    token never changes how the two halves tokenize, which is what keeps
    chunk counts additive.
    """

    name = "base"
    pattern: re.Pattern[str]

    def spans(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in self.pattern.finditer(text)]

    def count(self, text: str) -> int:
        return sum(1 for _ in self.pattern.finditer(text))

    def split(self, text: str, max_tokens: int) -> list[str]:
        """Hard split into pieces of at most ``max_tokens`` tokens."""
        spans = self.spans(text)
        if not spans:
            return [text] if text else []
        cuts = [0] + [spans[i][0] for i in range(max_tokens, len(spans), max_tokens)] + [len(text)]
        return [text[a:b] for a, b in zip(cuts, cuts[1:])]

    def __repr__(self) -> str:
        return f"<Tokenizer {self.name}>"


class WhitespaceTokenizer(Tokenizer):
    name = "whitespace"
    pattern = re.compile(r"\S+")


class WordPunctTokenizer(Tokenizer):
    """Words and individual punctuation marks are separate tokens."""

    name = "wordpunct"
    pattern = re.compile(r"\w+|[^\w\s]")


class TiktokenTokenizer(Tokenizer):
    """BPE counts for live runs; needs the optional ``tiktoken`` package."""

    def __init__(self, encoding: str = "cl100k_base"):
        import tiktoken

        self._enc = tiktoken.get_encoding(encoding)
        self.name = f"tiktoken:{encoding}"

    def spans(self, text: str) -> list[tuple[int, int]]:
        _, offsets = self._enc.decode_with_offsets(self._enc.encode(text))
        ends = offsets[1:] + [len(text)]
        return list(zip(offsets, ends))

    def count(self, text: str) -> int:
        return len(self._enc.encode(text))


_REGISTRY: dict[str, Callable[[], Tokenizer]] = {
    "whitespace": WhitespaceTokenizer,
    "wordpunct": WordPunctTokenizer,
    "tiktoken": TiktokenTokenizer,
}


def register_tokenizer(name: str, factory: Callable[[], Tokenizer]) -> None:
    _REGISTRY[name] = factory


def get_tokenizer(name: str = "whitespace") -> Tokenizer:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ValueError(f"unknown tokenizer {name!r}; known: {sorted(_REGISTRY)}") from None


DEFAULT_TOKENIZER = WhitespaceTokenizer()


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str
    token_count: int
    main_character: str = ""


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    index: int
    text: str
    token_count: int


def count_tokens(text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> int:
    return tokenizer.count(text)


def normalize_text(raw_text: str) -> str:
    text = raw_text.replace("\r\n", "\n").replace("\r", "\n")
    text = "\n".join(line.rstrip() for line in text.split("\n"))
    return text.strip()


def ingest_document(
    raw_text: str,
    id: str,
    title: str,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    main_character: str = "",
) -> Document:
    text = normalize_text(raw_text)
    if not text:
        raise EmptyDocument(f"document {id!r} is empty after normalization")
    return Document(id=id, title=title, text=text, token_count=tokenizer.count(text), main_character=main_character)


def _boundary_kind(text: str, prev_end: int, next_start: int) -> int:
    """2 = paragraph break, 1 = sentence break, 0 = plain token gap."""
    gap = text[prev_end:next_start]
    if _PARAGRAPH_GAP.search(gap):
        return 2
    if gap and _SENTENCE_END.search(text, max(0, prev_end - 8), prev_end):
        return 1
    return 0


def segment(doc: Document, chunk_size: int, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> list[Chunk]:
    """Split ``doc`` into chunks of at most ``chunk_size`` tokens.

    Each chunk is the longest prefix of the remaining text that fits the
    budget and ends on a paragraph break; failing that, on a sentence
    break; failing that, exactly at the budget.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not doc.text or not doc.text.strip():
        raise EmptyDocument(f"document {doc.id!r} is empty")

    text = doc.text
    spans = tokenizer.spans(text)
    n = len(spans)
    if n == 0:
        raise EmptyDocument(f"document {doc.id!r} has no tokens")
    kinds = [0] * (n + 1)
    for k in range(1, n):
        kinds[k] = _boundary_kind(text, spans[k - 1][1], spans[k][0])

    chunks: list[Chunk] = []
    start_tok, start_pos = 0, 0
    while start_tok < n:
        limit = start_tok + chunk_size
        if limit >= n:
            cut = n
        else:
            cut = limit
            for wanted in (2, 1):
                k = next((k for k in range(limit, start_tok, -1) if kinds[k] == wanted), None)
                if k is not None:
                    cut = k
                    break
        end_pos = len(text) if cut == n else spans[cut][0]
        chunks.append(Chunk(doc.id, len(chunks), text[start_pos:end_pos], cut - start_tok))
        start_tok, start_pos = cut, end_pos
    return chunks


def load_book(txt_path: Path, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> Document:
    """Read ``<id>.txt`` plus its ``<id>.json`` sidecar ({id, title, main_character})."""
    sidecar = txt_path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    raw = txt_path.read_bytes().decode("utf-8")
    return ingest_document(
        raw,
        id=meta.get("id", txt_path.stem),
        title=meta.get("title", txt_path.stem),
        tokenizer=tokenizer,
        main_character=meta.get("main_character", ""),
    )


def load_corpus(corpus_dir: Path, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> dict[str, Document]:
    docs = {}
    for txt in sorted(Path(corpus_dir).glob("*.txt")):
        doc = load_book(txt, tokenizer)
        docs[doc.id] = doc
    return docs
