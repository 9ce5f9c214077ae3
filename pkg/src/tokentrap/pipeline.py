"""Filtering stages: automated trap-word filtering and interactive review."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .llmgen import ChatClient, ChatRequest, Instance, TransportError, call_with_backoff, write_instances
from .tokenize import TokenizationList, tokenize_text
from .vocab import Vocabulary

log = logging.getLogger(__name__)


# -- automated filter ---------------------------------------------------------


@dataclass(frozen=True)
class FilterVerdict:
    """Outcome of one filter query.

    An indeterminate verdict (the model call failed) is neither retained nor
    discarded; the instance is queried again in the next round.
    """

    instance_id: str
    list1: TokenizationList
    answer: str | None
    list2: TokenizationList | None
    trap_in_list1: bool
    trap_in_list2: bool
    retained: bool
    error: str = ""

    @property
    def indeterminate(self) -> bool:
        return self.answer is None

    @property
    def status(self) -> str:
        if self.indeterminate:
            return "indeterminate"
        return "retained" if self.retained else "discarded"

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "list1": self.list1.to_json(),
            "answer": self.answer,
            "list2": self.list2.to_json() if self.list2 is not None else None,
            "trap_in_list1": self.trap_in_list1,
            "trap_in_list2": self.trap_in_list2,
            "retained": self.retained,
            "status": self.status,
            "error": self.error,
        }


def verdict_from_lists(
    instance_id: str, trap: str, list1: TokenizationList, answer: str, list2: TokenizationList
) -> FilterVerdict:
    """Keep the instance only when the trap is an element of both lists."""
    in1 = list1.contains(trap)
    in2 = list2.contains(trap)
    return FilterVerdict(instance_id, list1, answer, list2, in1, in2, in1 and in2)


def filter_query(inst: Instance, model: str = "target", temperature: float = 0.7) -> ChatRequest:
    """The question goes out with its sentence as context, in one user turn."""
    return ChatRequest(model, (("user", f"{inst.sentence}\n{inst.question}"),), temperature=temperature)


def auto_filter(
    inst: Instance,
    vocab: Vocabulary,
    client: ChatClient,
    mode: str = "whitespace",
    model: str = "target",
    retries: int = 2,
    sleep: Callable[[float], None] = time.sleep,
) -> FilterVerdict:
    list1 = tokenize_text(vocab, inst.sentence, mode)
    try:
        answer = call_with_backoff(client, filter_query(inst, model), retries=retries, sleep=sleep)
    except TransportError as exc:
        return FilterVerdict(inst.id, list1, None, None, list1.contains(inst.trap), False, False, str(exc))
    return verdict_from_lists(inst.id, inst.trap, list1, answer, tokenize_text(vocab, answer, mode))


@dataclass
class FilterResult:
    retained: list[Instance]
    rounds: list[dict] = field(default_factory=list)
    verdicts: list[list[FilterVerdict]] = field(default_factory=list)
    # every instance with its accumulated history, in input order
    instances: list[Instance] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"retained": len(self.retained), "rounds": self.rounds}


def iterate_filter(
    instances: Sequence[Instance],
    vocab: Vocabulary,
    client: ChatClient,
    rounds: int = 3,
    parallelism: int = 4,
    mode: str = "whitespace",
    model: str = "target",
    retries: int = 2,
    sleep: Callable[[float], None] = time.sleep,
) -> FilterResult:
    """Run the filter ``rounds`` times and keep the union of retained instances.

    Answers vary between calls, so an instance that slipped through one round
    may be caught in the next.  Only instances not yet retained are queried
    again; each participation appends a history entry.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    current = {inst.id: inst for inst in instances}
    if len(current) != len(instances):
        raise ValueError("instance ids must be unique")
    kept: set[str] = set()
    result = FilterResult(retained=[])

    def one(inst: Instance) -> FilterVerdict:
        return auto_filter(inst, vocab, client, mode, model, retries, sleep)

    for rnd in range(1, rounds + 1):
        pending = [current[i.id] for i in instances if i.id not in kept]
        if parallelism == 1:
            verdicts = [one(i) for i in pending]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                verdicts = list(pool.map(one, pending))
        counts = {"round": rnd, "queried": len(pending), "retained": 0, "discarded": 0, "indeterminate": 0}
        for v in verdicts:
            counts[v.status] += 1
            details = {"round": rnd, "trap_in_list1": v.trap_in_list1, "trap_in_list2": v.trap_in_list2}
            if v.answer is not None:
                details["answer"] = v.answer
            else:
                details["error"] = v.error
            current[v.instance_id] = current[v.instance_id].with_history("filter", v.status, **details)
            if v.retained:
                kept.add(v.instance_id)
        counts["retained_total"] = len(kept)
        log.info("filter round %d: %s", rnd, counts)
        result.rounds.append(counts)
        result.verdicts.append(verdicts)
    result.instances = [current[i.id] for i in instances]
    result.retained = [current[i.id] for i in instances if i.id in kept]
    return result


# -- human review -------------------------------------------------------------

VERDICTS = ("accept", "reject", "edit")
PROMPT = "[a]ccept [r]eject [e]dit [q]uit: "


class DecisionsFileError(ValueError):
    """The decisions file cannot be trusted; it is left untouched."""


@dataclass(frozen=True)
class ReviewDecision:
    instance_id: str
    verdict: str
    edited_sentence: str | None = None
    edited_question: str | None = None
    reviewer: str = ""
    timestamp: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.verdict == "edit" and not (self.edited_sentence or self.edited_question):
            raise ValueError("an edit decision needs an edited sentence or question")

    def to_json(self) -> dict:
        row = {"instance_id": self.instance_id, "verdict": self.verdict}
        if self.edited_sentence is not None:
            row["edited_sentence"] = self.edited_sentence
        if self.edited_question is not None:
            row["edited_question"] = self.edited_question
        row["reviewer"] = self.reviewer
        row["timestamp"] = self.timestamp
        return row

    @classmethod
    def from_json(cls, row: dict) -> "ReviewDecision":
        return cls(
            instance_id=row["instance_id"],
            verdict=row["verdict"],
            edited_sentence=row.get("edited_sentence"),
            edited_question=row.get("edited_question"),
            reviewer=row.get("reviewer", ""),
            timestamp=row.get("timestamp", ""),
        )


def load_decisions(path) -> dict[str, ReviewDecision]:
    """Read a decisions file; any malformed or duplicated line is fatal."""
    path = Path(path)
    out: dict[str, ReviewDecision] = {}
    if not path.exists():
        return out
    raw = path.read_bytes()
    if raw and not raw.endswith(b"\n"):
        raise DecisionsFileError(f"{path}: last line is truncated")
    for lineno, line in enumerate(raw.decode("utf-8", errors="strict").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = ReviewDecision.from_json(json.loads(line))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise DecisionsFileError(f"{path}:{lineno}: {exc}") from None
        if d.instance_id in out:
            raise DecisionsFileError(f"{path}:{lineno}: second decision for {d.instance_id}")
        out[d.instance_id] = d
    return out


def _append(path: Path, decision: ReviewDecision) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(decision.to_json(), ensure_ascii=False) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def edited_id(parent: Instance, sentence: str, question: str) -> str:
    digest = hashlib.sha256(f"{parent.id}\x00{sentence}\x00{question}".encode("utf-8")).hexdigest()
    return digest[:16]


def apply_decision(inst: Instance, d: ReviewDecision) -> Instance | None:
    """The dataset record a decision yields; the candidate itself is never changed."""
    if d.verdict == "reject":
        return None
    if d.verdict == "accept":
        return inst.with_history("review", "accept", reviewer=d.reviewer)
    sentence = d.edited_sentence or inst.sentence
    question = d.edited_question or inst.question
    child = replace(
        inst,
        id=edited_id(inst, sentence, question),
        sentence=sentence,
        question=question,
        origin="edited",
        parent_id=inst.id,
    )
    if not child.contains_span():
        log.warning("edited instance %s no longer contains %r", child.id, inst.triple.span)
    return child.with_history("review", "edit", reviewer=d.reviewer)


def last_answer(inst: Instance) -> str | None:
    for entry in reversed(inst.filter_history):
        answer = entry.get("details", {}).get("answer")
        if answer is not None:
            return answer
    return None


@dataclass
class ReviewOutcome:
    dataset: list[Instance]
    decided: int
    pending: int
    quit: bool = False

    def to_json(self) -> dict:
        return {"accepted": len(self.dataset), "decided": self.decided, "pending": self.pending, "quit": self.quit}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _ask(inst: Instance, index: int, total: int, input_fn, output_fn, reviewer: str, clock) -> ReviewDecision | None:
    output_fn(f"\n[{index}/{total}] {inst.id}")
    output_fn(f"  sentence: {inst.sentence}")
    output_fn(f"  question: {inst.question}")
    output_fn(f"  trap:     {inst.trap}")
    output_fn(f"  answer:   {last_answer(inst) or '-'}")
    while True:
        choice = input_fn(PROMPT).strip().lower()[:1]
        if choice == "q":
            return None
        if choice == "a":
            return ReviewDecision(inst.id, "accept", reviewer=reviewer, timestamp=clock())
        if choice == "r":
            return ReviewDecision(inst.id, "reject", reviewer=reviewer, timestamp=clock())
        if choice == "e":
            sentence = input_fn("  new sentence (blank keeps): ").strip() or None
            question = input_fn("  new question (blank keeps): ").strip() or None
            if sentence and inst.triple.span not in sentence:
                output_fn(f"  sentence must contain {inst.triple.span!r}")
                continue
            if not (sentence or question):
                output_fn("  nothing changed")
                continue
            return ReviewDecision(inst.id, "edit", sentence, question, reviewer, clock())
        output_fn("  please answer a, r, e or q")


def review_loop(
    candidates: Sequence[Instance],
    decisions_path,
    interactive: bool = True,
    input_fn: Callable[[str], str] = input,
    output_fn: Callable[[str], None] = print,
    reviewer: str = "",
    clock: Callable[[], str] = _now,
) -> ReviewOutcome:
    """Walk the candidates, recording one decision each.

    Decisions already present in ``decisions_path`` are replayed without
    prompting, so an interrupted session resumes where it stopped.  Without
    ``interactive`` undecided candidates are simply left pending.
    """
    path = Path(decisions_path)
    decisions = load_decisions(path)
    quit_early = False
    todo = [c for c in candidates if c.id not in decisions]
    if interactive:
        for n, inst in enumerate(todo, 1):
            try:
                d = _ask(inst, n, len(todo), input_fn, output_fn, reviewer, clock)
            except EOFError:
                d = None
            if d is None:
                quit_early = True
                break
            _append(path, d)
            decisions[inst.id] = d
    dataset = []
    decided = 0
    for inst in candidates:
        d = decisions.get(inst.id)
        if d is None:
            continue
        decided += 1
        out = apply_decision(inst, d)
        if out is not None:
            dataset.append(out)
    return ReviewOutcome(dataset, decided, len(candidates) - decided, quit_early)


def write_dataset(instances: Iterable[Instance], path) -> int:
    """Write the final dataset as JSONL, one instance per line."""
    return write_instances(instances, path)
