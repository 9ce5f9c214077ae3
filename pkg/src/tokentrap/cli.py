"""Command-line entry point: configuration, subcommands and run manifests."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Mapping
from urllib.parse import urlparse

from . import __version__
from .evaluate import (
    REPORT_FORMATS,
    ModelSpec,
    aggregate,
    emit_report,
    load_overrides,
    read_records,
    render_report,
    run_eval,
)
from .llmgen import (
    ChatRequest,
    GenerationFailure,
    HttpChatClient,
    Instance,
    MockChatClient,
    PromptTemplate,
    TransportError,
    batch_generate,
    read_instances,
    write_instances,
)
from .matcher import StopCharacterSet, count_summary, enumerate_triples, read_triples, sample_pairs, write_triples
from .pipeline import DecisionsFileError, iterate_filter, review_loop
from .vocab import FORMATS, LanguageFilter, VocabError, Vocabulary, filter_by_language, load_vocabulary, vocab_stats

log = logging.getLogger("tokentrap")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

REDACTED = "***"
SECRET_MARKERS = ("key", "token", "secret", "password")


# -- configuration ------------------------------------------------------------


class ConfigError(ValueError):
    """A configuration value is missing or invalid; the message names the field."""


@dataclass
class Config:
    endpoint: str | None = None
    api_path: str = "/v1/chat/completions"
    api_key_env: str = "TOKENTRAP_API_KEY"
    generator_model: str = "gpt-4"
    target_model: str = "target"
    temperature: float = 0.7
    seed: int = 0
    parallelism: int = 4
    rounds: int = 3
    retries: int = 2
    workers: int = 1
    sample: int | None = None
    template: str | None = None
    models: list = field(default_factory=list)

    def validate(self) -> "Config":
        if self.endpoint is not None:
            check_url("endpoint", self.endpoint)
        for name in ("parallelism", "rounds", "workers"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("retries", "seed", "sample"):
            value = getattr(self, name)
            if value is None and name == "sample":
                continue
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
        if not isinstance(self.temperature, (int, float)) or self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature!r}")
        if not isinstance(self.models, list):
            raise ConfigError("models must be a list")
        for i, m in enumerate(self.models):
            if not isinstance(m, dict) or not m.get("name"):
                raise ConfigError(f"models[{i}].name is required")
            if m.get("endpoint") is not None:
                check_url(f"models[{i}].endpoint", m["endpoint"])
            if m.get("vocab") is not None and m.get("format") not in FORMATS:
                raise ConfigError(f"models[{i}].format must be one of {sorted(FORMATS)}")
        return self

    def require(self, name: str, command: str):
        value = getattr(self, name)
        if value in (None, ""):
            raise ConfigError(f"missing required field '{name}' for {command}")
        return value

    def snapshot(self) -> dict:
        return redact(asdict(self))


def check_url(name: str, value) -> None:
    parsed = urlparse(value) if isinstance(value, str) else None
    if parsed is None or parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise ConfigError(f"{name} must be an http(s) URL, got {value!r}")


CONFIG_KEYS = {f.name for f in fields(Config)}


def load_config(path=None, env: Mapping[str, str] | None = None, flags: Mapping | None = None) -> Config:
    """Merge the config file, the environment and command-line flags, rightmost winning.

    The environment contributes credentials only; they are looked up by name
    (``api_key_env``) at call time and never copied into the config.  A
    credential value inside the config file is rejected.
    """
    merged: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for key in raw:
            if key not in CONFIG_KEYS:
                if any(m in key.lower() for m in SECRET_MARKERS):
                    raise ConfigError(f"{key}: credentials are read from the environment, not the config file")
                raise ConfigError(f"unknown config key {key!r}")
        merged.update(raw)
    env = os.environ if env is None else env
    # the env layer only names where the credential lives; the value stays in env
    if env.get("TOKENTRAP_API_KEY_ENV"):
        merged["api_key_env"] = env["TOKENTRAP_API_KEY_ENV"]
    for key, value in (flags or {}).items():
        if value is not None:
            merged[key] = value
    return Config(**merged).validate()


def credentials(cfg: Config, env: Mapping[str, str] | None = None) -> list[str]:
    env = os.environ if env is None else env
    names = {cfg.api_key_env, *(m.get("api_key_env") for m in cfg.models if m.get("api_key_env"))}
    return [env[n] for n in sorted(names) if env.get(n)]


def redact(obj):
    """Blank any value whose key looks like a credential (key names such as ``api_key_env`` are kept)."""
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            secret = any(m in k.lower() for m in SECRET_MARKERS) and not k.lower().endswith("_env")
            out[k] = REDACTED if secret and v is not None else redact(v)
        return out
    if isinstance(obj, list):
        return [redact(v) for v in obj]
    return obj


def scrub(text: str, secrets) -> str:
    for s in sorted((s for s in secrets if s), key=len, reverse=True):
        text = text.replace(s, REDACTED)
    return text


class ScrubbingFilter(logging.Filter):
    """Replace credential values in log messages before any handler sees them."""

    def __init__(self, secrets):
        super().__init__()
        self.secrets = list(secrets)

    def filter(self, record: logging.LogRecord) -> bool:
        if self.secrets:
            record.msg = scrub(record.getMessage(), self.secrets)
            record.args = None
        return True


# -- run manifest -------------------------------------------------------------


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    tool_version: str = __version__
    exit_code: int = 0
    started_at: str = ""
    finished_at: str = ""
    wall_time_s: float = 0.0

    def to_json(self, secrets=()) -> str:
        text = json.dumps(asdict(self), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
        return scrub(text, secrets)

    def write(self, path, secrets=()) -> Path:
        """Write atomically: a temporary file in the target directory, then a rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(self.to_json(secrets))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return path


# -- argument parsing ---------------------------------------------------------


class Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; usage errors here are validation errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _vocab_args(p, required=True):
    p.add_argument("--vocab", required=required, help="vocabulary file")
    p.add_argument("--format", dest="vocab_format", choices=sorted(FORMATS), default="bpe-json")
    p.add_argument("--lang", choices=("chinese", "english"), help="keep only tokens of this language")


def _endpoint_args(p):
    p.add_argument("--endpoint", help="base URL of the chat-completions service")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--retries", type=int)


def build_parser() -> Parser:
    parser = Parser(prog="tokentrap", description="Build and evaluate trap-word datasets for subword tokenizers.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--manifest", help="where to write the run manifest")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("vocab", help="load, filter and summarize a vocabulary")
    _vocab_args(p)
    p.add_argument("--out", help="write kept tokens as JSONL")

    p = sub.add_parser("match", help="enumerate trap-word triples")
    _vocab_args(p)
    p.add_argument("--stops", help="stop-character file, or 'builtin-zh'")
    p.add_argument("--non-strict", action="store_true", help="do not require leftover parts to be tokens")
    p.add_argument("--workers", type=int)
    p.add_argument("--sample", type=int, help="keep a uniform sample of this many triples")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="generate instances from triples")
    p.add_argument("--triples", required=True)
    p.add_argument("--template", help="prompt template file")
    p.add_argument("--model", dest="generator_model")
    p.add_argument("--seed", type=int)
    _endpoint_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--failures", help="write failed triples as JSONL")

    p = sub.add_parser("filter", help="iterated trap-word filtering against a target model")
    p.add_argument("--instances", required=True)
    _vocab_args(p)
    p.add_argument("--model", dest="target_model")
    p.add_argument("--rounds", type=int)
    _endpoint_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("review", help="interactive accept/reject/edit pass")
    p.add_argument("--candidates", required=True)
    p.add_argument("--decisions", required=True, help="append-only decisions JSONL")
    p.add_argument("--non-interactive", action="store_true", help="replay decisions only, never prompt")
    p.add_argument("--reviewer", default=os.environ.get("USER", ""))
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="run a dataset against target models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", dest="target_model", help="single model name (otherwise config 'models')")
    _vocab_args(p, required=False)
    _endpoint_args(p)
    p.add_argument("--overrides", help="JSONL of human response verdicts")
    p.add_argument("--records", required=True, help="records JSONL, appended and resumable")

    p = sub.add_parser("report", help="aggregate records into error-rate and quadrant tables")
    p.add_argument("--records", required=True)
    p.add_argument("--format", dest="report_format", choices=REPORT_FORMATS, default="csv")
    p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("demo", help="offline end-to-end run on the bundled toy vocabulary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="tokentrap-demo")
    return parser


# -- helpers ------------------------------------------------------------------


def _load_vocab(args) -> Vocabulary:
    vocab = load_vocabulary(args.vocab, args.vocab_format)
    if args.lang:
        vocab = filter_by_language(vocab, LanguageFilter.by_name(args.lang))
    return vocab


def _stops(spec: str | None) -> StopCharacterSet:
    if not spec:
        return StopCharacterSet.empty()
    if spec == "builtin-zh":
        return StopCharacterSet.builtin_chinese()
    return StopCharacterSet.load(spec)


def _client(cfg: Config, command: str, endpoint: str | None = None) -> HttpChatClient:
    return HttpChatClient(endpoint or cfg.require("endpoint", command), cfg.api_path, cfg.api_key_env)


def _flags(args, *names) -> dict:
    return {n: getattr(args, n, None) for n in names}


class Run:
    """Collects what the manifest records while a subcommand executes."""

    def __init__(self, command: str, cfg: Config):
        self.manifest = RunManifest(command=command, config=cfg.snapshot())
        self.files: list[Path] = []

    def input(self, name, path):
        self.manifest.inputs[name] = str(path)

    def output(self, name, path, actual=None):
        self.manifest.outputs[name] = str(path)
        self.files.append(Path(actual if actual is not None else path))

    def scrub_outputs(self, secrets) -> None:
        """Redact credentials a server may have echoed into responses or error text."""
        if not secrets:
            return
        for path in self.files:
            if not path.is_file():
                continue
            text = path.read_text(encoding="utf-8")
            clean = scrub(text, secrets)
            if clean != text:
                log.warning("redacted a credential echoed into %s", path)
                path.write_text(clean, encoding="utf-8")

    def count(self, name, value):
        self.manifest.counts[name] = value


# -- subcommands --------------------------------------------------------------


def cmd_vocab(args, cfg: Config, run: Run) -> int:
    vocab = _load_vocab(args)
    run.input("vocab", args.vocab)
    stats = vocab_stats(vocab)
    run.count("vocab", stats)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for t in vocab.tokens:
                fh.write(json.dumps({"id": t.id, "surface": t.surface}, ensure_ascii=False) + "\n")
        run.output("tokens", args.out)
    print(json.dumps(stats, ensure_ascii=False, indent=2))
    return EXIT_OK


def cmd_match(args, cfg: Config, run: Run) -> int:
    vocab = _load_vocab(args)
    run.input("vocab", args.vocab)
    stops = _stops(args.stops)
    triples = enumerate_triples(vocab, stops=stops, strict=not args.non_strict, workers=cfg.workers)
    if cfg.sample is not None:
        triples = sample_pairs(triples, cfg.sample, cfg.seed)
        run.manifest.seed = cfg.seed
    else:
        triples = list(triples)
    write_triples(triples, args.out)
    run.output("triples", args.out)
    summary = count_summary(triples)
    summary["stop_characters"] = len(stops)
    run.count("match", summary)
    print(json.dumps(summary, ensure_ascii=False))
    return EXIT_OK


def cmd_generate(args, cfg: Config, run: Run) -> int:
    triples = read_triples(args.triples)
    run.input("triples", args.triples)
    tpl = PromptTemplate.load(cfg.template) if cfg.template else PromptTemplate.default()
    tpl = _with_model(tpl, cfg.generator_model, cfg.temperature)
    client = _client(cfg, "generate")
    results, report = batch_generate(client, tpl, triples, cfg.parallelism, cfg.seed, cfg.retries)
    run.manifest.seed = cfg.seed
    write_instances([r for r in results if isinstance(r, Instance)], args.out)
    run.output("instances", args.out)
    if args.failures:
        with open(args.failures, "w", encoding="utf-8") as fh:
            for r in results:
                if isinstance(r, GenerationFailure):
                    fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
        run.output("failures", args.failures)
    run.count("generate", {"triples": len(triples), **report.to_json()})
    print(json.dumps(report.to_json()))
    return EXIT_OK


def _with_model(tpl: PromptTemplate, model: str, temperature: float) -> PromptTemplate:
    return replace(tpl, model=model, temperature=temperature)


def cmd_filter(args, cfg: Config, run: Run) -> int:
    instances = read_instances(args.instances)
    vocab = _load_vocab(args)
    run.input("instances", args.instances)
    run.input("vocab", args.vocab)
    client = _client(cfg, "filter")
    result = iterate_filter(instances, vocab, client, cfg.rounds, cfg.parallelism, model=cfg.target_model, retries=cfg.retries)
    write_instances(result.retained, args.out)
    run.output("retained", args.out)
    run.count("filter", {"instances": len(instances), **result.to_json()})
    print(json.dumps(result.to_json()))
    return EXIT_OK


def cmd_review(args, cfg: Config, run: Run) -> int:
    candidates = read_instances(args.candidates)
    run.input("candidates", args.candidates)
    run.input("decisions", args.decisions)
    interactive = not args.non_interactive
    if interactive and not sys.stdin.isatty():
        log.info("stdin is not a terminal; replaying decisions only")
        interactive = False
    outcome = review_loop(candidates, args.decisions, interactive=interactive, reviewer=args.reviewer)
    write_instances(outcome.dataset, args.out)
    run.output("dataset", args.out)
    run.count("review", {"candidates": len(candidates), **outcome.to_json()})
    print(json.dumps(outcome.to_json()))
    return EXIT_OK


def _model_specs(args, cfg: Config) -> list[ModelSpec]:
    entries = list(cfg.models)
    if not entries:
        entry = {"name": cfg.target_model, "endpoint": cfg.endpoint}
        if args.vocab:
            entry.update(vocab=args.vocab, format=args.vocab_format)
        entries = [entry]
    specs = []
    for e in entries:
        endpoint = e.get("endpoint") or cfg.endpoint
        if not endpoint:
            raise ConfigError(f"missing required field 'endpoint' for eval model {e['name']!r}")
        client = HttpChatClient(endpoint, e.get("api_path", cfg.api_path), e.get("api_key_env", cfg.api_key_env))
        vocab = load_vocabulary(e["vocab"], e.get("format", "bpe-json")) if e.get("vocab") else None
        specs.append(ModelSpec(e["name"], client, vocab))
    return specs


def cmd_eval(args, cfg: Config, run: Run) -> int:
    dataset = read_instances(args.dataset)
    run.input("dataset", args.dataset)
    overrides = None
    if args.overrides:
        overrides = load_overrides(args.overrides)
        run.input("overrides", args.overrides)
    specs = _model_specs(args, cfg)
    run.output("records", args.records)
    records = run_eval(dataset, specs, cfg.parallelism, args.records, overrides, cfg.retries)
    failed = sum(r.failed for r in records)
    run.count("eval", {"records": len(records), "failures": failed})
    print(json.dumps({"records": len(records), "failures": failed}))
    return EXIT_OK


def cmd_report(args, cfg: Config, run: Run) -> int:
    records = read_records(args.records)
    run.input("records", args.records)
    agg = aggregate(records)
    if args.out:
        emit_report(agg, args.report_format, args.out)
        run.output("report", args.out)
    else:
        sys.stdout.write(render_report(agg, args.report_format))
    run.count("report", {"records": len(records), "models": len(agg.models), "failures": agg.failures})
    return EXIT_OK


# -- demo ---------------------------------------------------------------------

DEMO_SENTENCES = (
    ("On the sign someone had painted {span} in large letters.", "What was painted on the sign?"),
    ("The label on the box simply said {span}.", "What did the label on the box say?"),
    ("She wrote {span} at the top of the page.", "What did she write at the top of the page?"),
)


def _stable_hash(*parts) -> int:
    return int(hashlib.sha256("\x00".join(map(str, parts)).encode("utf-8")).hexdigest()[:12], 16)


def demo_generator(seed: int) -> MockChatClient:
    """Generator stand-in; on some triples the first reply forgets the span to exercise the retry path."""

    def respond(req: ChatRequest) -> str:
        prompt = next(c for r, c in req.messages if r == "user")
        span = _span_from_prompt(prompt)
        retry = any(r == "assistant" for r, _ in req.messages)
        sentence, question = DEMO_SENTENCES[_stable_hash(seed, span) % len(DEMO_SENTENCES)]
        if not retry and _stable_hash(seed, span, "slip") % 3 == 0:
            return json.dumps({"sentence": sentence.format(span="something"), "question": question})
        return json.dumps({"sentence": sentence.format(span=span), "question": question})

    return MockChatClient(respond)


def _span_from_prompt(prompt: str) -> str:
    fields = dict(line.split(": ", 1) for line in prompt.splitlines() if ": " in line)
    return fields["WORD1"] + fields["WORD2"]


def demo_target(seed: int) -> MockChatClient:
    """Target-model stand-in whose answers vary from call to call, like a sampled model."""
    calls: dict[str, int] = {}
    lock = threading.Lock()

    def respond(req: ChatRequest) -> str:
        prompt = req.messages[-1][1]
        with lock:
            n = calls.get(prompt, 0)
            calls[prompt] = n + 1
        # sometimes parrot the sentence back, sometimes dodge
        if _stable_hash(seed, prompt, n) % 2 == 0:
            return "It says: " + prompt.split("\n", 1)[0]
        return "I am not sure what it says."

    return MockChatClient(respond)


def cmd_demo(args, cfg: Config, run: Run) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    run.manifest.seed = seed
    data = resources.files("tokentrap.data")
    with resources.as_file(data.joinpath("toy_bpe.json")) as vocab_path:
        vocab = load_vocabulary(vocab_path, "bpe-json")
    stops = StopCharacterSet.parse(data.joinpath("toy_stops.txt").read_text(encoding="utf-8"), "builtin:toy")
    run.input("vocab", "builtin:toy_bpe.json")
    run.input("stops", "builtin:toy_stops.txt")
    run.count("vocab", vocab_stats(vocab))

    triples = list(enumerate_triples(vocab, stops=stops, strict=True))
    write_triples(triples, out / "triples.jsonl")
    run.output("triples", "triples.jsonl", out / "triples.jsonl")
    run.count("match", count_summary(triples))

    tpl = PromptTemplate(
        instruction="Write a sentence containing the exact sequence below, and a question about it.\n"
        "WORD1: {word1}\nWORD2: {word2}\nTRAP: {trap}",
        demonstrations=(),
        model="demo-generator",
    )
    results, report = batch_generate(demo_generator(seed), tpl, triples, cfg.parallelism, seed, cfg.retries, sleep=lambda s: None)
    instances = [r for r in results if isinstance(r, Instance)]
    write_instances(instances, out / "instances.jsonl")
    run.output("instances", "instances.jsonl", out / "instances.jsonl")
    run.count("generate", report.to_json())

    result = iterate_filter(instances, vocab, demo_target(seed), cfg.rounds, cfg.parallelism, model="demo-target", sleep=lambda s: None)
    write_instances(result.retained, out / "dataset.jsonl")
    run.output("dataset", "dataset.jsonl", out / "dataset.jsonl")
    run.count("filter", result.to_json())

    specs = [ModelSpec("demo-target", demo_target(seed + 1), vocab)]
    records_path = out / "records.jsonl"
    records_path.unlink(missing_ok=True)
    records = run_eval(result.retained, specs, cfg.parallelism, records_path, sleep=lambda s: None) if result.retained else []
    run.output("records", "records.jsonl", records_path)
    agg = aggregate(records)
    for fmt, name in (("csv", "report.csv"), ("json", "report.json"), ("markdown", "report.md")):
        emit_report(agg, fmt, out / name)
        run.output(f"report_{fmt}", name, out / name)
    run.count("eval", {"records": len(records), "failures": agg.failures})
    print(json.dumps(run.manifest.counts, ensure_ascii=False, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "vocab": cmd_vocab,
    "match": cmd_match,
    "generate": cmd_generate,
    "filter": cmd_filter,
    "review": cmd_review,
    "eval": cmd_eval,
    "report": cmd_report,
    "demo": cmd_demo,
}

FLAG_NAMES = ("endpoint", "parallelism", "retries", "rounds", "workers", "sample", "seed", "template", "generator_model", "target_model")


def _manifest_path(args) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if args.command == "demo":
        return Path(args.out_dir) / "manifest.json"
    out = getattr(args, "out", None)
    return Path(f"{out}.manifest.json") if out else None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started, t0 = _utc_now(), time.monotonic()
    try:
        cfg = load_config(args.config, flags=_flags(args, *FLAG_NAMES))
    except ConfigError as exc:
        print(f"tokentrap: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"tokentrap: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    secrets = credentials(cfg)
    scrubber = ScrubbingFilter(secrets)
    handlers = list(logging.getLogger().handlers)
    for handler in handlers:
        handler.addFilter(scrubber)
    try:
        return _execute(args, cfg, secrets, started, t0)
    finally:
        for handler in handlers:
            handler.removeFilter(scrubber)


def _execute(args, cfg: Config, secrets: list[str], started: str, t0: float) -> int:
    run = Run(args.command, cfg)
    try:
        code = COMMANDS[args.command](args, cfg, run)
    except (ConfigError, VocabError, ValueError) as exc:
        if isinstance(exc, DecisionsFileError):
            code = EXIT_IO
        else:
            code = EXIT_VALIDATION
        print(scrub(f"tokentrap {args.command}: {exc}", secrets), file=sys.stderr)
    except (OSError, TransportError) as exc:
        code = EXIT_IO
        print(scrub(f"tokentrap {args.command}: {exc}", secrets), file=sys.stderr)

    try:
        run.scrub_outputs(secrets)
    except OSError as exc:
        print(f"tokentrap: cannot scrub outputs: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    run.manifest.exit_code = code
    run.manifest.started_at = started
    run.manifest.finished_at = _utc_now()
    run.manifest.wall_time_s = round(time.monotonic() - t0, 3)
    path = _manifest_path(args)
    if path is not None:
        try:
            run.manifest.write(path, secrets)
        except OSError as exc:
            print(f"tokentrap: cannot write manifest: {exc}", file=sys.stderr)
            return code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
