from __future__ import annotations

from pathlib import Path

import pytest

from tokentrap.matcher import StopCharacterSet
from tokentrap.vocab import load_vocabulary

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

# recorded cells whose counts disagree with their recorded error rate
INCONSISTENT = {
    ("chinese", "Yi-34B-Chat (Local)"),
    ("chinese", "Yi-34B-Chat (API)"),
    ("english", "Llama-3-8B-Instruct (API)"),
    ("english", "Llama-3-70B-Instruct (Local)"),
    ("english", "Mixtral-8x7B-Instruct-v0.1 (Local)"),
}


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def toy_vocab():
    return load_vocabulary(FIXTURES / "toy.json", "bpe-json")


@pytest.fixture(scope="session")
def toy_stops():
    return StopCharacterSet.load(FIXTURES / "toy_stops.txt")


@pytest.fixture(scope="session")
def merge_vocab():
    """Toy vocabulary whose merges derive every example word, so whole spans tokenize as expected."""
    return load_vocabulary(FIXTURES / "toy_tokenize.json", "bpe-json")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Print and remember one PASS/FAIL line per acceptance criterion."""

    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
