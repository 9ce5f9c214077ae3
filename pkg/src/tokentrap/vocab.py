"""Vocabulary ingestion, normalization, language filtering and lookup indices."""

from __future__ import annotations

import json
import logging
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

log = logging.getLogger(__name__)

META_SYMBOL = "▁"
DEFAULT_CONTINUATION = "##"

CHINESE_RANGES = ((0x4E00, 0x9FFF),)
ENGLISH_RANGES = ((ord("A"), ord("Z")), (ord("a"), ord("z")))


class Algorithm(str, Enum):
    BPE = "BPE"
    WORDPIECE = "WordPiece"
    UNIGRAM = "Unigram"


FORMATS = {
    "bpe-json": Algorithm.BPE,
    "wordpiece-txt": Algorithm.WORDPIECE,
    "unigram-tsv": Algorithm.UNIGRAM,
}


class VocabError(Exception):
    """Base class for vocabulary loading problems."""


class VocabParseError(VocabError):
    def __init__(self, path, message: str, line: int | None = None, offset: int | None = None):
        where = str(path)
        if line is not None:
            where += f":{line}"
            if offset is not None:
                where += f":{offset}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.offset = offset


class VocabIntegrityError(VocabError):
    pass


def normalize_token(raw: str) -> str:
    """Replace the sentencepiece meta symbol with a space and strip outer spaces."""
    return raw.replace(META_SYMBOL, " ").strip(" ")


@dataclass(frozen=True)
class Token:
    id: int
    surface: str
    raw_surface: str

    @property
    def degenerate(self) -> bool:
        return self.surface == ""


@dataclass(frozen=True)
class LanguageFilter:
    """Keeps tokens whose every character falls inside one of ``ranges`` (inclusive)."""

    kind: str
    ranges: tuple[tuple[int, int], ...]

    @classmethod
    def chinese(cls, ranges: Sequence[tuple[int, int]] = CHINESE_RANGES) -> "LanguageFilter":
        return cls("Chinese", tuple(tuple(r) for r in ranges))

    @classmethod
    def english(cls, ranges: Sequence[tuple[int, int]] = ENGLISH_RANGES) -> "LanguageFilter":
        return cls("English", tuple(tuple(r) for r in ranges))

    @classmethod
    def custom(cls, ranges: Sequence[tuple[int, int]]) -> "LanguageFilter":
        return cls("Custom", tuple(tuple(r) for r in ranges))

    @classmethod
    def by_name(cls, name: str) -> "LanguageFilter":
        name = name.lower()
        if name in ("chinese", "zh"):
            return cls.chinese()
        if name in ("english", "en"):
            return cls.english()
        raise ValueError(f"unknown language filter {name!r}")

    def accepts_char(self, ch: str) -> bool:
        cp = ord(ch)
        return any(lo <= cp <= hi for lo, hi in self.ranges)

    def accepts(self, surface: str) -> bool:
        return bool(surface) and all(self.accepts_char(c) for c in surface)


@dataclass
class Vocabulary:
    """Normalized token set plus the algorithm payload needed to segment text.

    Tokens are unique by surface; on collision the lowest id is kept and
    ``duplicates`` counts the dropped entries.  Degenerate tokens (empty after
    normalization) keep their ids but are excluded from matching.
    """

    tokens: list[Token]
    algorithm: Algorithm
    source_name: str = ""
    merges: list[tuple[str, str]] = field(default_factory=list)
    continuation_prefix: str = DEFAULT_CONTINUATION
    logprobs: dict[str, float] = field(default_factory=dict)
    duplicates: int = 0

    def __post_init__(self) -> None:
        self._by_surface: dict[str, Token] = {}
        self._by_id: dict[int, Token] = {}
        for tok in self.tokens:
            self._by_id[tok.id] = tok
            if not tok.degenerate:
                self._by_surface.setdefault(tok.surface, tok)
        self.max_token_len = max((len(s) for s in self._by_surface), default=0)
        self.merge_ranks = {pair: rank for rank, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, surface: object) -> bool:
        return surface in self._by_surface

    def __iter__(self) -> Iterator[Token]:
        return iter(self.tokens)

    def get(self, surface: str) -> Token | None:
        return self._by_surface.get(surface)

    def by_id(self, token_id: int) -> Token:
        return self._by_id[token_id]

    def id_of(self, surface: str) -> int:
        return self._by_surface[surface].id

    @property
    def surfaces(self) -> list[str]:
        return list(self._by_surface)

    def matchable(self) -> list[Token]:
        """Tokens eligible as words for trap matching, in id order."""
        out = [t for t in self.tokens if not t.degenerate]
        if self.algorithm is Algorithm.WORDPIECE and self.continuation_prefix:
            out = [t for t in out if not t.surface.startswith(self.continuation_prefix)]
        return out

    def subset(self, keep: Iterable[Token], source_name: str | None = None) -> "Vocabulary":
        kept = list(keep)
        surfaces = {t.surface for t in kept}
        merges = [m for m in self.merges if m[0] + m[1] in surfaces]
        logprobs = {s: lp for s, lp in self.logprobs.items() if s in surfaces}
        return Vocabulary(
            tokens=kept,
            algorithm=self.algorithm,
            source_name=source_name or self.source_name,
            merges=merges,
            continuation_prefix=self.continuation_prefix,
            logprobs=logprobs,
        )

    @classmethod
    def from_surfaces(
        cls,
        surfaces: Iterable[str],
        algorithm: Algorithm = Algorithm.BPE,
        source_name: str = "inline",
        **payload,
    ) -> "Vocabulary":
        """Build a vocabulary from raw surfaces, ids assigned in order."""
        return _collect(enumerate(surfaces), algorithm, source_name, **payload)


def _collect(pairs: Iterable[tuple[int, str]], algorithm: Algorithm, source_name: str, **payload) -> Vocabulary:
    seen: dict[str, Token] = {}
    tokens: list[Token] = []
    duplicates = 0
    for tid, raw in sorted(pairs, key=lambda p: p[0]):
        surface = normalize_token(raw)
        tok = Token(tid, surface, raw)
        if surface and surface in seen:
            duplicates += 1
            log.debug("duplicate surface %r (id %d) dropped in favour of id %d", surface, tid, seen[surface].id)
            continue
        if surface:
            seen[surface] = tok
        tokens.append(tok)
    if duplicates:
        log.warning("%s: %d duplicate surfaces collapsed after normalization", source_name, duplicates)
    return Vocabulary(tokens=tokens, algorithm=algorithm, source_name=source_name, duplicates=duplicates, **payload)


def _normalize_merges(raw_merges: list[tuple[str, str]], raw_surfaces: set[str], path) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    for rank, (left, right) in enumerate(raw_merges):
        if left + right not in raw_surfaces:
            raise VocabIntegrityError(f"{path}: merge #{rank} ({left!r}, {right!r}) yields unknown token {left + right!r}")
        nl, nr = normalize_token(left), normalize_token(right)
        # merges touching the meta symbol do not survive normalization cleanly
        if not nl or not nr or nl + nr != normalize_token(left + right):
            continue
        if (nl, nr) in seen:
            continue
        seen.add((nl, nr))
        out.append((nl, nr))
    return out


def _load_bpe_json(path: Path, text: str) -> Vocabulary:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VocabParseError(path, exc.msg, exc.lineno, exc.colno) from None
    # accept the full tokenizer export layout as well as the bare {vocab, merges} object
    if isinstance(obj, dict) and "model" in obj and "vocab" not in obj:
        obj = obj["model"]
    if not isinstance(obj, dict) or not isinstance(obj.get("vocab"), dict):
        raise VocabParseError(path, "expected an object with a 'vocab' map")
    vocab = obj["vocab"]
    pairs = []
    for surface, tid in vocab.items():
        if not isinstance(tid, int) or tid < 0:
            raise VocabParseError(path, f"token {surface!r} has invalid id {tid!r}")
        pairs.append((tid, surface))
    raw_merges = []
    for i, m in enumerate(obj.get("merges", [])):
        if isinstance(m, str):
            parts = m.split(" ")
        elif isinstance(m, list):
            parts = m
        else:
            parts = []
        if len(parts) != 2:
            raise VocabParseError(path, f"merge #{i} is not a 'left right' pair: {m!r}")
        raw_merges.append((parts[0], parts[1]))
    merges = _normalize_merges(raw_merges, set(vocab), path)
    return _collect(pairs, Algorithm.BPE, path.stem, merges=merges)


def _load_wordpiece(path: Path, text: str, continuation_prefix: str) -> Vocabulary:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pairs = [(i, line.rstrip("\r")) for i, line in enumerate(lines)]
    return _collect(pairs, Algorithm.WORDPIECE, path.stem, continuation_prefix=continuation_prefix)


def _load_unigram(path: Path, text: str) -> Vocabulary:
    pairs = []
    raw_logprobs: dict[int, float] = {}
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r")
        surface, sep, score = line.rpartition("\t")
        if not sep:
            raise VocabParseError(path, "expected 'surface<TAB>logprob'", lineno)
        try:
            lp = float(score)
        except ValueError:
            raise VocabParseError(path, f"log-probability {score!r} is not a number", lineno, len(surface) + 2) from None
        if not math.isfinite(lp):
            raise VocabIntegrityError(f"{path}:{lineno}: non-finite log-probability for {surface!r}")
        tid = lineno - 1
        pairs.append((tid, surface))
        raw_logprobs[tid] = lp
    vocab = _collect(pairs, Algorithm.UNIGRAM, path.stem)
    vocab.logprobs = {t.surface: raw_logprobs[t.id] for t in vocab.tokens if not t.degenerate}
    return vocab


def load_vocabulary(path, fmt: str, continuation_prefix: str = DEFAULT_CONTINUATION) -> Vocabulary:
    """Load a vocabulary file in one of ``bpe-json``, ``wordpiece-txt`` or ``unigram-tsv``."""
    path = Path(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown vocabulary format {fmt!r}; expected one of {sorted(FORMATS)}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise VocabParseError(path, f"not valid UTF-8 ({exc.reason})", offset=exc.start) from None
    if fmt == "bpe-json":
        vocab = _load_bpe_json(path, text)
    elif fmt == "wordpiece-txt":
        vocab = _load_wordpiece(path, text, continuation_prefix)
    else:
        vocab = _load_unigram(path, text)
    log.info("loaded %s: %d tokens (%d duplicates collapsed)", path, len(vocab), vocab.duplicates)
    return vocab


def filter_by_language(vocab: Vocabulary, lang: LanguageFilter) -> Vocabulary:
    kept = [t for t in vocab.tokens if lang.accepts(t.surface)]
    if not kept:
        log.warning("%s filter left no tokens in %s", lang.kind, vocab.source_name)
    return vocab.subset(kept, source_name=f"{vocab.source_name}[{lang.kind}]")


def vocab_stats(vocab: Vocabulary) -> dict:
    return {
        "source": vocab.source_name,
        "algorithm": vocab.algorithm.value,
        "tokens": len(vocab),
        "degenerate": sum(t.degenerate for t in vocab.tokens),
        "duplicates_collapsed": vocab.duplicates,
        "chinese": sum(LanguageFilter.chinese().accepts(t.surface) for t in vocab.tokens),
        "english": sum(LanguageFilter.english().accepts(t.surface) for t in vocab.tokens),
    }


class VocabularyIndex:
    """Sorted-array index answering prefix, suffix and membership queries.

    Prefix and suffix lookups are a binary search plus a walk over the hits,
    so each query costs O(log n + k).
    """

    def __init__(self, surfaces: Iterable[str]):
        uniq = sorted(set(surfaces))
        self._members = frozenset(uniq)
        self._forward = uniq
        self._backward = sorted(s[::-1] for s in uniq)

    def __len__(self) -> int:
        return len(self._forward)

    def __contains__(self, surface: object) -> bool:
        return surface in self._members

    @staticmethod
    def _scan(keys: list[str], prefix: str) -> list[str]:
        out = []
        i = bisect_left(keys, prefix)
        while i < len(keys) and keys[i].startswith(prefix):
            out.append(keys[i])
            i += 1
        return out

    def with_prefix(self, prefix: str) -> list[str]:
        return self._scan(self._forward, prefix)

    def with_suffix(self, suffix: str) -> list[str]:
        return [s[::-1] for s in self._scan(self._backward, suffix[::-1])]


def build_indices(vocab: Vocabulary) -> VocabularyIndex:
    return VocabularyIndex(t.surface for t in vocab.matchable())
