"""Trap-word triple enumeration over a vocabulary.

A triple (word1, word2, trap) matches when a suffix of word1 joined with a
prefix of word2 spells a vocabulary token while word1 + word2 itself is not
one.  Enumeration pivots on the trap word and its split points instead of
pairing every two tokens.
"""

from __future__ import annotations

import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

from .vocab import Vocabulary, VocabularyIndex, build_indices


class Schema(str, Enum):
    BEFORE = "Before"
    AFTER = "After"
    BEFORE_AND_AFTER = "BeforeAndAfter"


@dataclass(frozen=True)
class TrapTriple:
    word1: str
    word2: str
    trap: str
    k1: int
    k2: int
    schema: Schema

    @property
    def remainder1(self) -> str:
        return self.word1[: self.k1]

    @property
    def remainder2(self) -> str:
        return self.word2[self.k2:]

    @property
    def span(self) -> str:
        return self.word1 + self.word2

    def to_json(self) -> dict:
        return {
            "word1": self.word1,
            "word2": self.word2,
            "trap": self.trap,
            "k1": self.k1,
            "k2": self.k2,
            "schema": self.schema.value,
            "remainder1": self.remainder1,
            "remainder2": self.remainder2,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrapTriple":
        t = cls(obj["word1"], obj["word2"], obj["trap"], int(obj["k1"]), int(obj["k2"]), Schema(obj["schema"]))
        if t.word1[t.k1:] + t.word2[: t.k2] != t.trap:
            raise ValueError(f"inconsistent triple record: {obj}")
        return t


def classify_schema(word1: str, word2: str, k1: int, k2: int) -> Schema:
    """After when word1 lies wholly inside the trap, Before when word2 does."""
    whole1 = k1 == 0
    whole2 = k2 == len(word2)
    assert not (whole1 and whole2), "trap equal to word1 + word2 is never a triple"
    if whole1:
        return Schema.AFTER
    if whole2:
        return Schema.BEFORE
    return Schema.BEFORE_AND_AFTER


@dataclass(frozen=True)
class StopCharacterSet:
    characters: frozenset
    source: str = "empty"

    def __contains__(self, ch: object) -> bool:
        return ch in self.characters

    def __len__(self) -> int:
        return len(self.characters)

    @classmethod
    def empty(cls) -> "StopCharacterSet":
        return cls(frozenset(), "empty")

    @classmethod
    def parse(cls, text: str, source: str = "inline") -> "StopCharacterSet":
        chars = set()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if len(line) != 1:
                raise ValueError(f"{source}:{lineno}: expected a single character, got {line!r}")
            chars.add(line)
        return cls(frozenset(chars), source)

    @classmethod
    def load(cls, path) -> "StopCharacterSet":
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), str(path))

    @classmethod
    def builtin_chinese(cls) -> "StopCharacterSet":
        text = resources.files("tokentrap.data").joinpath("stop_chars_zh.txt").read_text(encoding="utf-8")
        return cls.parse(text, "builtin:zh")


class _Matcher:
    """Holds the per-vocabulary lookups shared by every trap word."""

    def __init__(self, vocab: Vocabulary, idx: VocabularyIndex, stops: StopCharacterSet, strict: bool):
        self.idx = idx
        self.stops = stops
        self.strict = strict
        self.ids = {t.surface: t.id for t in vocab.matchable()}
        self._left: dict[str, list[tuple[int, str, int]]] = {}
        self._right: dict[str, list[tuple[int, str, int]]] = {}

    def left_hits(self, part: str) -> list[tuple[int, str, int]]:
        # candidates for word1: tokens ending with ``part``; stored as (id, word, k1)
        hits = self._left.get(part)
        if hits is None:
            hits = []
            for w in self.idx.with_suffix(part):
                k1 = len(w) - len(part)
                if self.strict and k1 and w[:k1] not in self.idx:
                    continue
                hits.append((self.ids[w], w, k1))
            hits.sort()
            self._left[part] = hits
        return hits

    def right_hits(self, part: str) -> list[tuple[int, str, int]]:
        hits = self._right.get(part)
        if hits is None:
            hits = []
            k2 = len(part)
            for w in self.idx.with_prefix(part):
                if self.strict and k2 < len(w) and w[k2:] not in self.idx:
                    continue
                hits.append((self.ids[w], w, k2))
            hits.sort()
            self._right[part] = hits
        return hits

    def triples_for(self, trap: str) -> list[TrapTriple]:
        out: list[TrapTriple] = []
        if len(trap) < 2 or trap[0] in self.stops or trap[-1] in self.stops:
            return out
        members = self.idx
        for k in range(1, len(trap)):
            lefts = self.left_hits(trap[:k])
            if not lefts:
                continue
            rights = self.right_hits(trap[k:])
            for _, w1, k1 in lefts:
                for _, w2, k2 in rights:
                    if k1 == 0 and k2 == len(w2):
                        continue
                    if w1 + w2 in members:
                        continue
                    out.append(TrapTriple(w1, w2, trap, k1, k2, classify_schema(w1, w2, k1, k2)))
        return out


_worker_state: _Matcher | None = None


def _init_worker(vocab, stops, strict):
    global _worker_state
    _worker_state = _Matcher(vocab, build_indices(vocab), stops, strict)


def _work(traps: list[str]) -> list[TrapTriple]:
    assert _worker_state is not None
    out = []
    for trap in traps:
        out.extend(_worker_state.triples_for(trap))
    return out


def enumerate_triples(
    vocab: Vocabulary,
    idx: VocabularyIndex | None = None,
    stops: StopCharacterSet | None = None,
    strict: bool = True,
    workers: int = 1,
    chunk_size: int = 512,
) -> Iterator[TrapTriple]:
    """Yield every matching triple, ordered by (trap id, split, word1 id, word2 id).

    With ``strict`` the leftover parts of word1 and word2 outside the trap
    must themselves be tokens.  ``workers > 1`` shards trap words across
    processes; output order is unchanged.
    """
    if idx is None:
        idx = build_indices(vocab)
    stops = stops or StopCharacterSet.empty()
    traps = [t.surface for t in vocab.matchable()]
    if workers <= 1:
        m = _Matcher(vocab, idx, stops, strict)
        for trap in traps:
            yield from m.triples_for(trap)
        return
    chunks = [traps[i:i + chunk_size] for i in range(0, len(traps), chunk_size)]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(vocab, stops, strict)) as pool:
        for part in pool.map(_work, chunks):
            yield from part


def sample_pairs(triples: Iterable[TrapTriple], n: int, seed: int) -> list[TrapTriple]:
    """Uniform reservoir sample of ``min(n, total)`` triples, in stream order."""
    if n < 0:
        raise ValueError("sample size must be non-negative")
    rng = random.Random(seed)
    reservoir: list[tuple[int, TrapTriple]] = []
    for i, t in enumerate(triples):
        if i < n:
            reservoir.append((i, t))
        else:
            j = rng.randint(0, i)
            if j < n:
                reservoir[j] = (i, t)
    reservoir.sort(key=lambda p: p[0])
    return [t for _, t in reservoir]


def count_summary(triples: Iterable[TrapTriple]) -> dict:
    total = 0
    pairs = set()
    by_schema = {s.value: 0 for s in Schema}
    for t in triples:
        total += 1
        pairs.add((t.word1, t.word2))
        by_schema[t.schema.value] += 1
    return {"triples": total, "distinct_pairs": len(pairs), "by_schema": by_schema}


def write_triples(triples: Iterable[TrapTriple], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_triples(path) -> list[TrapTriple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(TrapTriple.from_json(json.loads(line)))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad triple record ({exc})") from None
    return out
