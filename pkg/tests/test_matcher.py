from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_triples, random_surfaces
from tokentrap.matcher import (
    Schema,
    StopCharacterSet,
    TrapTriple,
    classify_schema,
    count_summary,
    enumerate_triples,
    read_triples,
    sample_pairs,
    write_triples,
)
from tokentrap.vocab import Vocabulary

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def triples(surfaces, stops=None, strict=True, **kw):
    return list(enumerate_triples(Vocabulary.from_surfaces(surfaces), stops=stops, strict=strict, **kw))


def keys(ts):
    return {(t.word1, t.word2, t.trap, t.k1, t.k2) for t in ts}


def words(ts):
    return {(t.word1, t.word2, t.trap, t.schema) for t in ts}


def test_before_example():
    out = triples(["moves", "table", "stable", "move", "s"])
    assert ("moves", "table", "stable", Schema.BEFORE) in words(out)
    t = next(t for t in out if t.trap == "stable" and t.word1 == "moves")
    assert (t.remainder1, t.remainder2) == ("move", "")


def test_after_example_needs_non_strict():
    vocab = ["drive", "nothing", "driven", "n"]
    assert ("drive", "nothing", "driven", Schema.AFTER) in words(triples(vocab, strict=False))
    assert ("drive", "nothing", "driven", Schema.AFTER) not in words(triples(vocab, strict=True))
    assert ("drive", "nothing", "driven", Schema.AFTER) in words(triples(vocab + ["othing"], strict=True))


def test_before_and_after_example():
    out = triples(["sixth", "island", "this", "six", "land", "th", "is"])
    t = next(t for t in out if (t.word1, t.word2, t.trap) == ("sixth", "island", "this"))
    assert t.schema is Schema.BEFORE_AND_AFTER
    assert (t.remainder1, t.remainder2) == ("six", "land")


def test_concatenation_in_vocab_excluded():
    out = triples(["moves", "table", "stable", "move", "s", "movestable"])
    assert not any((t.word1, t.word2) == ("moves", "table") for t in out)


def test_trap_equal_to_concatenation_excluded():
    assert not any(t.trap == "abcd" for t in triples(["ab", "cd", "abcd"], strict=False))


def test_classify_schema():
    assert classify_schema("moves", "table", 4, 5) is Schema.BEFORE
    assert classify_schema("drive", "nothing", 0, 1) is Schema.AFTER
    assert classify_schema("sixth", "island", 3, 2) is Schema.BEFORE_AND_AFTER
    with pytest.raises(AssertionError):
        classify_schema("ab", "cd", 0, 2)


def test_toy_vocabulary_strict(toy_vocab, toy_stops):
    out = list(enumerate_triples(toy_vocab, stops=toy_stops))
    assert words(out) == {
        ("moves", "table", "stable", Schema.BEFORE),
        ("drive", "nothing", "driven", Schema.AFTER),
        ("sixth", "island", "this", Schema.BEFORE_AND_AFTER),
    }


def test_toy_vocabulary_without_stops_adds_mirrors(toy_vocab):
    extra = words(enumerate_triples(toy_vocab)) - words(enumerate_triples(toy_vocab, stops=StopCharacterSet.parse("m\ng")))
    assert {(w1, w2, trap) for w1, w2, trap, _ in extra} == {
        ("move", "stable", "moves"),
        ("driven", "othing", "nothing"),
    }


def test_empty_vocabulary():
    assert triples([]) == []


def test_output_order(toy_vocab):
    out = list(enumerate_triples(toy_vocab, strict=False))
    order = [(toy_vocab.id_of(t.trap), len(t.word1) - t.k1, toy_vocab.id_of(t.word1), toy_vocab.id_of(t.word2)) for t in out]
    assert order == sorted(order)


@settings(max_examples=80, deadline=None)
@given(seeds, st.booleans())
def test_matches_brute_force(seed, strict):
    rng = random.Random(seed)
    surfaces = random_surfaces(rng, max_tokens=rng.choice([10, 60, 200]), max_len=rng.randint(2, 6))
    stops = set(rng.sample("abcd", rng.randint(0, 1)))
    out = triples(surfaces, StopCharacterSet(frozenset(stops)), strict)
    assert keys(out) == brute_triples(surfaces, stops, strict)
    assert len(out) == len(keys(out))


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_schema_partition(seed):
    surfaces = random_surfaces(random.Random(seed), max_tokens=120)
    for t in triples(surfaces, strict=False):
        flags = [t.k1 == 0, t.k2 == len(t.word2), t.k1 > 0 and t.k2 < len(t.word2)]
        assert sum(flags) == 1
        assert t.schema is [Schema.AFTER, Schema.BEFORE, Schema.BEFORE_AND_AFTER][flags.index(True)]


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_monotonicity(seed):
    rng = random.Random(seed)
    surfaces = random_surfaces(rng, max_tokens=120)
    loose = keys(triples(surfaces, strict=False))
    assert keys(triples(surfaces, strict=True)) <= loose
    stops = StopCharacterSet(frozenset(rng.sample("abcd", 2)))
    assert keys(triples(surfaces, stops=stops, strict=False)) <= loose


def test_workers_keep_order():
    surfaces = random_surfaces(random.Random(3), max_tokens=200)
    v = Vocabulary.from_surfaces(surfaces)
    serial = list(enumerate_triples(v, strict=False))
    parallel = list(enumerate_triples(v, strict=False, workers=2, chunk_size=16))
    assert serial and parallel == serial


def test_stop_file(tmp_path):
    path = tmp_path / "stops.txt"
    path.write_text("# function characters\n的\n\n了\n", encoding="utf-8")
    stops = StopCharacterSet.load(path)
    assert "的" in stops and "了" in stops and len(stops) == 2
    path.write_text("ab\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        StopCharacterSet.load(path)


def test_builtin_chinese_stops():
    stops = StopCharacterSet.builtin_chinese()
    assert "的" in stops
    assert stops.source == "builtin:zh"


def test_sample_pairs():
    ts = triples(random_surfaces(random.Random(5), max_tokens=200), strict=False)[:10]
    assert len(ts) == 10
    assert sample_pairs(ts, 10, seed=1) == ts
    assert sample_pairs(ts, 3, seed=42) == sample_pairs(ts, 3, seed=42)
    assert len(sample_pairs(ts, 3, seed=42)) == 3
    assert sample_pairs(ts, 50, seed=0) == ts
    with pytest.raises(ValueError):
        sample_pairs(ts, -1, seed=0)


def test_sample_is_roughly_uniform():
    counts = [0] * 20
    for seed in range(2000):
        for i in sample_pairs(range(20), 5, seed):
            counts[i] += 1
    # expected 500 per item
    assert min(counts) > 400 and max(counts) < 600


def test_count_summary(toy_vocab, toy_stops):
    s = count_summary(enumerate_triples(toy_vocab, stops=toy_stops))
    assert s == {"triples": 3, "distinct_pairs": 3, "by_schema": {"Before": 1, "After": 1, "BeforeAndAfter": 1}}


def test_jsonl_round_trip(tmp_path, toy_vocab):
    out = list(enumerate_triples(toy_vocab, strict=False))
    path = tmp_path / "t.jsonl"
    assert write_triples(out, path) == len(out)
    assert read_triples(path) == out


def test_inconsistent_record_rejected(tmp_path):
    path = tmp_path / "t.jsonl"
    bad = TrapTriple("moves", "table", "stable", 4, 5, Schema.BEFORE).to_json()
    bad["k1"] = 3
    path.write_text(json.dumps(bad) + "\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        read_triples(path)
