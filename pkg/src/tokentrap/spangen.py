"""Challenging spans: an origin token wrapped by inserted text so that the
tokenizer's reading and a human's reading of the span disagree."""

from __future__ import annotations

from dataclasses import dataclass, field

from .matcher import Schema, TrapTriple
from .vocab import Vocabulary


class SpanValidationError(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__("human-side tokens missing from vocabulary: " + ", ".join(repr(m) for m in missing))
        self.missing = missing


@dataclass(frozen=True)
class ChallengingSpan:
    origin: str
    inserted_before: str
    inserted_after: str
    schema: Schema
    model_tokens: tuple[str, ...]
    human_tokens: tuple[str, ...]
    missing: tuple[str, ...] = field(default=(), compare=False)

    @property
    def span(self) -> str:
        return self.inserted_before + self.origin + self.inserted_after

    def check(self) -> None:
        span = self.span
        if "".join(self.model_tokens) != span or "".join(self.human_tokens) != span:
            raise ValueError(f"token lists do not spell {span!r}")
        # compared by position: a trap such as "aa" in (a, aa) may equal a human word as a string
        origin_at = (len(self.inserted_before), len(self.inserted_before) + len(self.origin))
        if origin_at not in _offsets(self.model_tokens) or origin_at in _offsets(self.human_tokens):
            raise ValueError(f"origin {self.origin!r} must be isolated by the model reading only")

    def to_json(self) -> dict:
        return {
            "origin": self.origin,
            "before": self.inserted_before,
            "after": self.inserted_after,
            "span": self.span,
            "schema": self.schema.value,
            "model_tokens": list(self.model_tokens),
            "human_tokens": list(self.human_tokens),
        }


def _offsets(tokens) -> set[tuple[int, int]]:
    out, pos = set(), 0
    for t in tokens:
        out.add((pos, pos + len(t)))
        pos += len(t)
    return out


def _schema_for(before: str, after: str) -> Schema:
    if before and after:
        return Schema.BEFORE_AND_AFTER
    return Schema.BEFORE if before else Schema.AFTER


def _human_reading(origin: str, before: str, after: str, split: int) -> tuple[str, str]:
    return before + origin[:split], origin[split:] + after


def build_span(
    origin: str,
    before: str,
    after: str,
    vocab: Vocabulary,
    split: int | None = None,
    strict: bool = False,
) -> ChallengingSpan:
    """Insert ``before``/``after`` around ``origin`` and derive both readings.

    The human reading re-cuts the origin token at ``split`` so the inserted
    text fuses with its neighbouring part.  Without an explicit ``split`` the
    first cut whose two halves are both tokens is used.  Missing human-side
    tokens are recorded on the span, or raised with ``strict=True``.
    """
    if not before and not after:
        raise ValueError("at least one of before/after must be non-empty")
    if origin not in vocab:
        raise ValueError(f"origin token {origin!r} is not in the vocabulary")
    if len(origin) < 2 and split is None:
        raise ValueError("origin token must have at least two characters to be re-cut")

    if split is None:
        scored = []
        for k in range(1, len(origin)):
            pair = _human_reading(origin, before, after, k)
            scored.append((sum(p in vocab for p in pair), -k, k))
        split = max(scored)[2]
    elif not 0 < split < len(origin):
        raise ValueError(f"split must lie strictly inside the origin token, got {split}")

    human = _human_reading(origin, before, after, split)
    missing = [p for p in human if p not in vocab]
    if missing and strict:
        raise SpanValidationError(missing)

    model = tuple(p for p in (before, origin, after) if p)
    span = ChallengingSpan(origin, before, after, _schema_for(before, after), model, human, tuple(missing))
    span.check()
    return span


def from_triple(t: TrapTriple) -> ChallengingSpan:
    span = ChallengingSpan(
        origin=t.trap,
        inserted_before=t.remainder1,
        inserted_after=t.remainder2,
        schema=t.schema,
        model_tokens=tuple(p for p in (t.remainder1, t.trap, t.remainder2) if p),
        human_tokens=(t.word1, t.word2),
    )
    span.check()
    return span


def to_triple(span: ChallengingSpan) -> TrapTriple:
    """Recover the word pair reading of a span (the inverse of ``from_triple``)."""
    w1, w2 = span.human_tokens
    k1 = len(span.inserted_before)
    k2 = len(w2) - len(span.inserted_after)
    return TrapTriple(w1, w2, span.origin, k1, k2, span.schema)
