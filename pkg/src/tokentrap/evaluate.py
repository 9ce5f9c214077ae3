"""Evaluation: query models, judge tokenization and responses, aggregate metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .llmgen import ChatClient, Instance, TransportError, call_with_backoff
from .pipeline import filter_query
from .tokenize import TokenizationList, tokenize_text
from .vocab import Vocabulary

log = logging.getLogger(__name__)

HEURISTIC = "heuristic"
HUMAN_OVERRIDE = "human-override"
QUADRANTS = ("TP", "FP", "FN", "TN")
OVERALL = "overall"


# -- percentages ----------------------------------------------------------------


def round_half_up(value: Fraction, places: int = 2) -> Decimal:
    """Round an exact fraction half away from zero (values here are never negative)."""
    scale = 10 ** places
    scaled = value * scale
    q = (scaled.numerator * 2 + scaled.denominator) // (scaled.denominator * 2)
    return Decimal(q).scaleb(-places)


def percent(num: int, den: int, places: int = 2) -> Decimal:
    if den <= 0:
        raise ValueError("percentage of an empty population")
    return round_half_up(Fraction(100 * num, den), places)


# -- records ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    model: str
    instance_id: str
    response: str | None
    tokenization: tuple[str, ...] | None = None
    tokenization_correct: bool | None = None
    response_correct: bool | None = None
    judge: str = HEURISTIC
    group: str = ""
    error: str = ""

    def __post_init__(self):
        if self.tokenization is None and self.tokenization_correct is None:
            return
        if self.tokenization_correct is None:
            raise ValueError("tokenization correctness is unknown only without a tokenization")

    @property
    def failed(self) -> bool:
        return bool(self.error)

    @property
    def key(self) -> tuple[str, str]:
        return self.model, self.instance_id

    @property
    def quadrant(self) -> str | None:
        if self.failed or self.tokenization_correct is None:
            return None
        if self.tokenization_correct:
            return "TP" if self.response_correct else "FN"
        return "FP" if self.response_correct else "TN"

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "instance_id": self.instance_id,
            "group": self.group,
            "response": self.response,
            "tokenization": list(self.tokenization) if self.tokenization is not None else None,
            "tokenization_correct": self.tokenization_correct,
            "response_correct": self.response_correct,
            "judge": self.judge,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, row: dict) -> "EvalRecord":
        tok = row.get("tokenization")
        return cls(
            model=row["model"],
            instance_id=row["instance_id"],
            response=row.get("response"),
            tokenization=tuple(tok) if tok is not None else None,
            tokenization_correct=row.get("tokenization_correct"),
            response_correct=row.get("response_correct"),
            judge=row.get("judge", HEURISTIC),
            group=row.get("group", ""),
            error=row.get("error", ""),
        )


def read_records(path) -> list[EvalRecord]:
    """Load a records file; a later record for the same (model, instance) replaces an earlier one."""
    by_key: dict[tuple[str, str], EvalRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = EvalRecord.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from None
            by_key.pop(rec.key, None)
            by_key[rec.key] = rec
    return list(by_key.values())


def write_records(records: Iterable[EvalRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


def load_overrides(path) -> dict[tuple[str, str], bool]:
    """Human verdicts keyed by (instance id, model name)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                value = row["responseCorrect"] if "responseCorrect" in row else row["response_correct"]
                iid = row.get("instanceId", row.get("instance_id"))
                model = row.get("modelName", row.get("model"))
                if not isinstance(value, bool) or iid is None or model is None:
                    raise ValueError("needs instanceId, modelName and a boolean responseCorrect")
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad override ({exc})") from None
            out[(iid, model)] = value
    return out


# -- judging ------------------------------------------------------------------


def judge_response(trap: str, response: str, override: bool | None = None) -> tuple[bool, str]:
    """Return (correct, judge).

    The heuristic is one-sided: a response containing the trap word is
    wrong, anything else is taken as right unless a human override says
    otherwise.
    """
    if override is not None:
        return override, HUMAN_OVERRIDE
    return trap not in response, HEURISTIC


def judge_tokenization(trap: str, tokens: TokenizationList | Sequence[str]) -> bool:
    """Correct iff the trap word is not isolated as a token."""
    pieces = tokens.pieces if isinstance(tokens, TokenizationList) else list(tokens)
    return trap not in pieces


@dataclass(frozen=True)
class ModelSpec:
    name: str
    client: ChatClient
    vocab: Vocabulary | None = None
    pretokenize: str = "whitespace"


def evaluate_one(
    spec: ModelSpec,
    inst: Instance,
    overrides: dict | None = None,
    retries: int = 2,
    sleep: Callable[[float], None] = time.sleep,
) -> EvalRecord:
    tokens = None
    tok_ok = None
    if spec.vocab is not None:
        tl = tokenize_text(spec.vocab, inst.sentence, spec.pretokenize)
        tokens = tl.tokens
        tok_ok = judge_tokenization(inst.trap, tl)
    try:
        response = call_with_backoff(spec.client, filter_query(inst, spec.name), retries=retries, sleep=sleep)
    except TransportError as exc:
        return EvalRecord(spec.name, inst.id, None, tokens, tok_ok, None, group=inst.group, error=str(exc) or "transport")
    override = (overrides or {}).get((inst.id, spec.name))
    ok, judge = judge_response(inst.trap, response, override)
    return EvalRecord(spec.name, inst.id, response, tokens, tok_ok, ok, judge, inst.group)


def run_eval(
    dataset: Sequence[Instance],
    models: Sequence[ModelSpec],
    parallelism: int = 4,
    records_path=None,
    overrides: dict | None = None,
    retries: int = 2,
    sleep: Callable[[float], None] = time.sleep,
) -> list[EvalRecord]:
    """Evaluate every (model, instance) pair.

    With ``records_path`` each record is appended as soon as it is known, and
    pairs that already have a successful record there are skipped, so an
    interrupted run resumes without duplicates.  Failed calls are retried on
    resume.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    done: dict[tuple[str, str], EvalRecord] = {}
    if records_path is not None and Path(records_path).exists():
        done = {r.key: r for r in read_records(records_path) if not r.failed}
    todo = [(m, inst) for m in models for inst in dataset if (m.name, inst.id) not in done]
    lock = threading.Lock()
    fh = open(records_path, "a", encoding="utf-8") if records_path is not None else None

    def one(job):
        spec, inst = job
        rec = evaluate_one(spec, inst, overrides, retries, sleep)
        if fh is not None:
            with lock:
                fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
                fh.flush()
        return rec

    try:
        if parallelism == 1:
            fresh = [one(j) for j in todo]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                fresh = list(pool.map(one, todo))
    finally:
        if fh is not None:
            fh.close()
    for rec in fresh:
        done[rec.key] = rec
    out = [done[(m.name, inst.id)] for m in models for inst in dataset if (m.name, inst.id) in done]
    failures = sum(r.failed for r in out)
    if failures:
        log.warning("%d model calls failed and are excluded from aggregates", failures)
    return out


# -- aggregation --------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def count(self, quadrant: str) -> int:
        return getattr(self, quadrant.lower())

    def error_rate(self) -> Fraction:
        return Fraction(self.fn + self.tn, self.total)

    def proportions(self, places: int = 2) -> dict[str, Decimal]:
        return {q: percent(self.count(q), self.total, places) for q in QUADRANTS}

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class ModelSummary:
    model: str
    groups: dict[str, tuple[int, int]] = field(default_factory=dict)  # group -> (wrong, total)
    confusion: ConfusionMatrix | None = None
    failures: int = 0

    @property
    def wrong(self) -> int:
        return sum(w for w, _ in self.groups.values())

    @property
    def total(self) -> int:
        return sum(n for _, n in self.groups.values())

    def error_rate(self, group: str | None = None) -> Decimal:
        if group is None:
            return percent(self.wrong, self.total)
        wrong, total = self.groups[group]
        return percent(wrong, total)


@dataclass
class Aggregation:
    models: dict[str, ModelSummary] = field(default_factory=dict)
    failures: int = 0

    def __bool__(self) -> bool:
        return bool(self.models)

    def mean_tn_proportion(self, models: Iterable[str] | None = None, label_decimals: int | None = 1) -> Decimal:
        """Mean TN share across models with known tokenization.

        Each model's share is rounded to ``label_decimals`` first (the
        precision of a pie-chart label) unless that is None.
        """
        names = list(models) if models is not None else sorted(self.models)
        shares = []
        for name in names:
            cm = self.models[name].confusion
            if cm is None or cm.total == 0:
                continue
            exact = Fraction(100 * cm.tn, cm.total)
            shares.append(Fraction(round_half_up(exact, label_decimals)) if label_decimals is not None else exact)
        if not shares:
            raise ValueError("no model has a known-tokenization confusion matrix")
        return round_half_up(sum(shares, Fraction(0)) / len(shares), 2)


def aggregate(records: Iterable[EvalRecord]) -> Aggregation:
    """Per-model error rates (overall and per group) and confusion matrices."""
    agg = Aggregation()
    counts: dict[str, dict[str, int]] = {}
    for r in records:
        summary = agg.models.setdefault(r.model, ModelSummary(r.model))
        if r.failed or r.response_correct is None:
            summary.failures += 1
            agg.failures += 1
            continue
        group = r.group or OVERALL
        wrong, total = summary.groups.get(group, (0, 0))
        summary.groups[group] = (wrong + (not r.response_correct), total + 1)
        q = r.quadrant
        if q is not None:
            c = counts.setdefault(r.model, dict.fromkeys(QUADRANTS, 0))
            c[q] += 1
    for name, c in counts.items():
        agg.models[name].confusion = ConfusionMatrix(c["TP"], c["FP"], c["FN"], c["TN"])
    # drop models whose every call failed; their failures stay counted
    agg.models = {k: agg.models[k] for k in sorted(agg.models) if agg.models[k].total}
    for s in agg.models.values():
        s.groups = dict(sorted(s.groups.items()))
    return agg


def records_from_counts(model: str, tp: int, fp: int, fn: int, tn: int, group: str = "", prefix: str = "") -> list[EvalRecord]:
    """Synthesize records reproducing a published confusion table."""
    spec = (("TP", tp, True, True), ("FP", fp, False, True), ("FN", fn, True, False), ("TN", tn, False, False))
    out = []
    for quadrant, n, tok_ok, resp_ok in spec:
        for i in range(n):
            iid = f"{prefix}{quadrant.lower()}-{i:04d}"
            out.append(EvalRecord(model, iid, "", None, tok_ok, resp_ok, HEURISTIC, group))
    return out


# -- reports ------------------------------------------------------------------

REPORT_FORMATS = ("csv", "json", "markdown")
CSV_COLUMNS = ("model", "group", "metric", "value")


def report_rows(agg: Aggregation) -> list[tuple[str, str, str, str]]:
    rows = []
    for name, s in agg.models.items():
        for group in s.groups:
            if group != OVERALL:
                rows.append((name, group, "error_rate", str(s.error_rate(group))))
        rows.append((name, OVERALL, "error_rate", str(s.error_rate())))
        rows.append((name, OVERALL, "instances", str(s.total)))
        if s.failures:
            rows.append((name, OVERALL, "failures", str(s.failures)))
        if s.confusion is not None and s.confusion.total:
            for q, value in s.confusion.proportions().items():
                rows.append((name, "quadrant", q, str(value)))
    return rows


def _render_csv(agg: Aggregation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(report_rows(agg))
    return buf.getvalue()


def _render_json(agg: Aggregation) -> str:
    models = []
    for name, s in agg.models.items():
        entry = {
            "model": name,
            "instances": s.total,
            "wrong": s.wrong,
            "error_rate": str(s.error_rate()),
            "groups": {g: {"wrong": w, "total": n, "error_rate": str(percent(w, n))} for g, (w, n) in s.groups.items()},
            "failures": s.failures,
        }
        if s.confusion is not None and s.confusion.total:
            entry["confusion"] = s.confusion.to_json()
            entry["quadrants"] = {q: str(v) for q, v in s.confusion.proportions().items()}
        models.append(entry)
    doc: dict = {"models": models, "failures": agg.failures}
    if any(s.confusion is not None and s.confusion.total for s in agg.models.values()):
        doc["mean_tn_proportion"] = str(agg.mean_tn_proportion())
    return json.dumps(doc, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _render_markdown(agg: Aggregation) -> str:
    groups = sorted({g for s in agg.models.values() for g in s.groups if g != OVERALL})
    head = ["Model", *groups, "Overall error rate"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, s in agg.models.items():
        cells = [str(s.error_rate(g)) if g in s.groups else "-" for g in groups]
        lines.append("| " + " | ".join([name, *cells, str(s.error_rate())]) + " |")
    with_cm = [(n, s.confusion) for n, s in agg.models.items() if s.confusion is not None and s.confusion.total]
    if with_cm:
        lines += ["", "| Model | " + " | ".join(QUADRANTS) + " |", "|" + "---|" * (len(QUADRANTS) + 1)]
        for name, cm in with_cm:
            props = cm.proportions()
            lines.append("| " + " | ".join([name, *(str(props[q]) for q in QUADRANTS)]) + " |")
        lines += ["", f"Mean TN proportion: {agg.mean_tn_proportion()}"]
    return "\n".join(lines) + "\n"


_RENDERERS = {"csv": _render_csv, "json": _render_json, "markdown": _render_markdown}


def render_report(agg: Aggregation, fmt: str) -> str:
    try:
        return _RENDERERS[fmt](agg)
    except KeyError:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {', '.join(REPORT_FORMATS)}") from None


def emit_report(agg: Aggregation, fmt: str, path) -> Path:
    """Write the report; output bytes depend only on the aggregation."""
    text = render_report(agg, fmt)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
