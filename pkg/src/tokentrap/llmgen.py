"""Instance generation through an external chat-completions endpoint."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx
import yaml

from .matcher import Schema, TrapTriple, classify_schema
from .spangen import ChallengingSpan, from_triple

log = logging.getLogger(__name__)

PLACEHOLDERS = ("word1", "word2", "trap")
DEFAULT_OUTPUT_NOTE = (
    'Reply with a single JSON object of the form {"sentence": "...", "question": "..."} '
    "and nothing else."
)
CORRECTIVE_SUFFIX = {
    "unparseable": "Your reply was not a valid JSON object with string fields 'sentence' and 'question'. "
    "Reply again with only that JSON object.",
    "span-missing": "The sentence must contain the exact character sequence {span!r} with nothing in between. "
    "Reply again with only the JSON object.",
}


# -- chat transport -----------------------------------------------------------


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.7
    max_tokens: int = 512
    timeout: float = 60.0

    def __post_init__(self):
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        for role, _ in self.messages:
            if role not in ("system", "user", "assistant"):
                raise ValueError(f"bad message role {role!r}")
        first = next((r for r, _ in self.messages if r != "system"), None)
        if first != "user":
            raise ValueError("first non-system message must come from the user")
        if self.temperature < 0 or self.max_tokens <= 0:
            raise ValueError("temperature must be >= 0 and max_tokens positive")

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def with_messages(self, *extra: tuple[str, str]) -> "ChatRequest":
        return replace(self, messages=self.messages + tuple(extra))


class TransportError(Exception):
    """A chat call failed before producing a usable reply."""

    def __init__(self, message: str, retryable: bool = True, retry_after: float | None = None):
        super().__init__(message)
        self.retryable = retryable
        self.retry_after = retry_after


class ChatClient(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


class HttpChatClient:
    """Client for the chat-completions wire shape.

    The credential is read from the environment variable ``api_key_env`` at
    call time and is never stored on the instance.
    """

    def __init__(
        self,
        base_url: str,
        path: str = "/v1/chat/completions",
        api_key_env: str = "TOKENTRAP_API_KEY",
        auth_header: str = "Authorization",
        auth_scheme: str = "Bearer",
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.path = path
        self.api_key_env = api_key_env
        self.auth_header = auth_header
        self.auth_scheme = auth_scheme
        self._http = httpx.Client(transport=transport)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers[self.auth_header] = f"{self.auth_scheme} {key}".strip()
        return headers

    def complete(self, request: ChatRequest) -> str:
        try:
            resp = self._http.post(
                self.base_url + self.path,
                json=request.body(),
                headers=self._headers(),
                timeout=request.timeout,
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from None
        if resp.status_code == 429 or resp.status_code >= 500:
            after = resp.headers.get("Retry-After")
            try:
                retry_after = float(after) if after else None
            except ValueError:
                retry_after = None
            raise TransportError(f"HTTP {resp.status_code}", retryable=True, retry_after=retry_after)
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", retryable=False)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise TransportError("response is not a chat completion", retryable=False) from None

    def close(self) -> None:
        self._http.close()


class MockChatClient:
    """Deterministic stand-in for a chat endpoint; ``responder`` maps a request to a reply."""

    def __init__(self, responder: Callable[[ChatRequest], str]):
        self.responder = responder
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
        return self.responder(request)


def backoff_delay(attempt: int, base: float = 1.0, cap: float = 60.0, hint: float | None = None) -> float:
    delay = min(cap, base * (2 ** attempt))
    return max(delay, hint or 0.0)


def call_with_backoff(
    client: ChatClient,
    request: ChatRequest,
    retries: int = 3,
    sleep: Callable[[float], None] = time.sleep,
    base_delay: float = 1.0,
) -> str:
    for attempt in range(retries + 1):
        try:
            return client.complete(request)
        except TransportError as exc:
            if not exc.retryable or attempt == retries:
                raise
            sleep(backoff_delay(attempt, base_delay, hint=exc.retry_after))
    raise AssertionError("unreachable")


# -- prompt template ----------------------------------------------------------


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str
    demonstrations: tuple[tuple[dict, dict], ...] = ()
    output_note: str = DEFAULT_OUTPUT_NOTE
    model: str = "gpt-4"
    temperature: float = 0.7
    max_tokens: int = 512

    def __post_init__(self):
        fields = [f for _, f, _, _ in string.Formatter().parse(self.instruction) if f is not None]
        unknown = sorted(set(fields) - set(PLACEHOLDERS))
        if unknown:
            raise TemplateError(f"unknown placeholder(s) in instruction: {unknown}")
        for name in PLACEHOLDERS:
            n = fields.count(name)
            if n != 1:
                raise TemplateError(f"placeholder {{{name}}} must appear exactly once, found {n}")
        for i, (inp, out) in enumerate(self.demonstrations):
            if set(inp) != set(PLACEHOLDERS):
                raise TemplateError(f"demonstration {i} input must have keys {PLACEHOLDERS}")
            try:
                parse_reply(json.dumps(out, ensure_ascii=False))
            except ValueError as exc:
                raise TemplateError(f"demonstration {i} output: {exc}") from None

    def fill(self, word1: str, word2: str, trap: str) -> str:
        return self.instruction.format(word1=word1, word2=word2, trap=trap)

    def render(self, t: TrapTriple) -> ChatRequest:
        messages: list[tuple[str, str]] = [("system", self.output_note)]
        for inp, out in self.demonstrations:
            messages.append(("user", self.fill(**inp)))
            messages.append(("assistant", json.dumps(out, ensure_ascii=False)))
        messages.append(("user", self.fill(t.word1, t.word2, t.trap)))
        return ChatRequest(self.model, tuple(messages), self.temperature, self.max_tokens)

    @classmethod
    def parse(cls, text: str, **overrides) -> "PromptTemplate":
        """Parse a template file: optional ``---`` YAML front matter, then the instruction."""
        meta: dict = {}
        body = text
        if text.startswith("---"):
            parts = text.split("\n---", 1)
            if len(parts) != 2:
                raise TemplateError("unterminated front-matter block")
            try:
                meta = yaml.safe_load(parts[0][3:]) or {}
            except yaml.YAMLError as exc:
                raise TemplateError(f"front matter is not valid YAML: {exc}") from None
            body = parts[1].split("\n", 1)[1] if "\n" in parts[1] else ""
        demos = tuple((d["input"], d["output"]) for d in meta.get("demonstrations", []))
        kwargs = {k: meta[k] for k in ("output_note", "model", "temperature", "max_tokens") if k in meta}
        kwargs.update(overrides)
        return cls(instruction=body.strip(), demonstrations=demos, **kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "PromptTemplate":
        return cls.parse(Path(path).read_text(encoding="utf-8"), **overrides)

    @classmethod
    def default(cls, **overrides) -> "PromptTemplate":
        text = resources.files("tokentrap.data").joinpath("default_template.txt").read_text(encoding="utf-8")
        return cls.parse(text, **overrides)


# -- instances ----------------------------------------------------------------


@dataclass(frozen=True)
class Instance:
    id: str
    sentence: str
    question: str
    triple: TrapTriple
    origin: str = "generated"
    filter_history: tuple[dict, ...] = ()
    group: str = ""
    parent_id: str | None = None

    @property
    def span(self) -> ChallengingSpan:
        return from_triple(self.triple)

    @property
    def trap(self) -> str:
        return self.triple.trap

    def contains_span(self) -> bool:
        return self.triple.span in self.sentence

    def with_history(self, stage: str, verdict: str, **details) -> "Instance":
        entry = {"stage": stage, "verdict": verdict, "details": details}
        return replace(self, filter_history=self.filter_history + (entry,))

    def to_json(self) -> dict:
        row = {
            "id": self.id,
            "sentence": self.sentence,
            "question": self.question,
            "word1": self.triple.word1,
            "word2": self.triple.word2,
            "trap": self.triple.trap,
            "schema": self.triple.schema.value,
            "origin": self.origin,
            "filter_history": list(self.filter_history),
        }
        if self.group:
            row["group"] = self.group
        if self.parent_id:
            row["parent_id"] = self.parent_id
        return row

    @classmethod
    def from_json(cls, row: dict) -> "Instance":
        triple = triple_from_words(row["word1"], row["word2"], row["trap"], Schema(row["schema"]))
        return cls(
            id=row["id"],
            sentence=row["sentence"],
            question=row["question"],
            triple=triple,
            origin=row.get("origin", "generated"),
            filter_history=tuple(row.get("filter_history", ())),
            group=row.get("group", ""),
            parent_id=row.get("parent_id"),
        )


def triple_from_words(word1: str, word2: str, trap: str, schema: Schema | None = None) -> TrapTriple:
    """Locate the split offsets of ``trap`` across ``word1 + word2``."""
    for k1 in range(len(word1)):
        left = word1[k1:]
        if not trap.startswith(left):
            continue
        k2 = len(trap) - len(left)
        if 0 < k2 <= len(word2) and word2[:k2] == trap[len(left):]:
            if k1 == 0 and k2 == len(word2):
                continue
            s = classify_schema(word1, word2, k1, k2)
            if schema is None or s is schema:
                return TrapTriple(word1, word2, trap, k1, k2, s)
    raise ValueError(f"{trap!r} does not straddle {word1!r} + {word2!r}")


def instance_id(t: TrapTriple, run: str) -> str:
    key = json.dumps([t.word1, t.word2, t.trap, t.k1, t.k2, run], ensure_ascii=False)
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def check_instance(inst: Instance) -> None:
    if not inst.question.strip():
        raise ValueError(f"instance {inst.id} has an empty question")
    if inst.origin == "generated" and not inst.contains_span():
        raise ValueError(f"generated instance {inst.id} does not contain {inst.triple.span!r}")


def write_instances(instances: Iterable[Instance], path) -> int:
    """Validate every instance, then write them as JSONL."""
    rows = list(instances)
    for inst in rows:
        check_instance(inst)
    with open(path, "w", encoding="utf-8") as fh:
        for inst in rows:
            fh.write(json.dumps(inst.to_json(), ensure_ascii=False) + "\n")
    return len(rows)


def read_instances(path) -> list[Instance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Instance.from_json(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad instance record ({exc})") from None
    return out


# -- generation ---------------------------------------------------------------


@dataclass(frozen=True)
class GenerationFailure:
    triple: TrapTriple
    reason: str
    attempts: int
    last_reply: str | None = None
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "triple": self.triple.to_json(),
            "reason": self.reason,
            "attempts": self.attempts,
            "last_reply": self.last_reply,
            "detail": self.detail,
        }


def parse_reply(reply: str) -> tuple[str, str]:
    """Extract (sentence, question) from a model reply; tolerates a fenced code block."""
    text = reply.strip()
    if text.startswith("```"):
        text = text.strip("`")
        if text.startswith("json"):
            text = text[4:]
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise ValueError("no JSON object in reply")
    try:
        obj = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg}") from None
    sentence, question = obj.get("sentence"), obj.get("question")
    if not isinstance(sentence, str) or not isinstance(question, str) or not sentence.strip() or not question.strip():
        raise ValueError("reply needs non-empty string fields 'sentence' and 'question'")
    return sentence.strip(), question.strip()


def generate_instance(
    client: ChatClient,
    tpl: PromptTemplate,
    t: TrapTriple,
    retries: int = 2,
    run: str = "run",
    sleep: Callable[[float], None] = time.sleep,
    base_delay: float = 1.0,
) -> Instance | GenerationFailure:
    """Ask the model for a sentence/question pair containing ``word1 + word2``.

    At most ``1 + retries`` requests are sent.  Transport errors back off
    exponentially; bad replies are re-asked with a corrective message.
    """
    request = tpl.render(t)
    reason, detail, reply = "transport", "", None
    transport_failures = 0
    for attempt in range(retries + 1):
        try:
            reply = client.complete(request)
        except TransportError as exc:
            reason, detail = "transport", str(exc)
            if not exc.retryable:
                return GenerationFailure(t, reason, attempt + 1, reply, detail)
            transport_failures += 1
            if attempt < retries:
                sleep(backoff_delay(transport_failures - 1, base_delay, hint=exc.retry_after))
            continue
        try:
            sentence, question = parse_reply(reply)
        except ValueError as exc:
            reason, detail = "unparseable", str(exc)
        else:
            if t.span in sentence:
                inst = Instance(instance_id(t, run), sentence, question, t, "generated")
                return inst.with_history("generate", "accepted", attempts=attempt + 1, retries=attempt)
            reason, detail = "span-missing", f"sentence lacks {t.span!r}"
        request = request.with_messages(
            ("assistant", reply),
            ("user", CORRECTIVE_SUFFIX[reason].format(span=t.span)),
        )
    return GenerationFailure(t, reason, retries + 1, reply, detail)


@dataclass
class BatchReport:
    accepted: int = 0
    failures: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"accepted": self.accepted, "failures": dict(sorted(self.failures.items()))}


def batch_generate(
    client: ChatClient,
    tpl: PromptTemplate,
    triples: Sequence[TrapTriple],
    parallelism: int = 4,
    seed: int = 0,
    retries: int = 2,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[Instance | GenerationFailure], BatchReport]:
    """Generate one outcome per triple, in input order, with bounded concurrency."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    run = f"seed-{seed}"

    def one(t: TrapTriple):
        return generate_instance(client, tpl, t, retries=retries, run=run, sleep=sleep)

    if parallelism == 1:
        results = [one(t) for t in triples]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, triples))
    report = BatchReport()
    for r in results:
        if isinstance(r, Instance):
            report.accepted += 1
        else:
            report.failures[r.reason] = report.failures.get(r.reason, 0) + 1
    log.info("generated %d instances, failures %s", report.accepted, report.failures)
    return results, report
