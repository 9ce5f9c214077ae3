from __future__ import annotations

import json
import logging
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import scan_prefix, scan_suffix
from tokentrap.vocab import (
    Algorithm,
    LanguageFilter,
    VocabIntegrityError,
    VocabParseError,
    Vocabulary,
    VocabularyIndex,
    build_indices,
    filter_by_language,
    load_vocabulary,
    normalize_token,
    vocab_stats,
)


def write_json(path, obj):
    path.write_text(json.dumps(obj, ensure_ascii=False), encoding="utf-8")
    return path


def test_normalize_examples():
    assert normalize_token("▁table") == "table"
    assert normalize_token("  cat  ") == "cat"
    assert normalize_token("▁New▁York") == "New York"
    assert normalize_token("▁▁") == ""


@given(st.text(alphabet=st.sampled_from(["▁", " ", "a", "b", "\t", "中"]), max_size=12))
def test_normalize_idempotent(raw):
    once = normalize_token(raw)
    assert normalize_token(once) == once
    assert "▁" not in once
    assert once == once.strip(" ")


def test_bpe_json_meta_symbol(tmp_path):
    path = write_json(tmp_path / "toy.json", {"vocab": {"▁move": 0, "stable": 1, "s": 2}, "merges": []})
    v = load_vocabulary(path, "bpe-json")
    assert sorted(v.surfaces) == ["move", "s", "stable"]
    assert v.algorithm is Algorithm.BPE
    assert v.get("move").raw_surface == "▁move"


def test_bpe_json_nested_model_layout(fixtures_dir):
    v = load_vocabulary(fixtures_dir / "toy.json", "bpe-json")
    assert "stable" in v and "this" in v
    assert v.merges[0] == ("m", "o")


def test_bpe_merge_must_name_a_token(tmp_path):
    path = write_json(tmp_path / "bad.json", {"vocab": {"a": 0, "b": 1}, "merges": ["a b"]})
    with pytest.raises(VocabIntegrityError, match="ab"):
        load_vocabulary(path, "bpe-json")


def test_bpe_merges_normalized(tmp_path):
    vocab = {"▁": 0, "a": 1, "▁a": 2, "b": 3, "ab": 4, "▁ab": 5}
    merges = ["▁ a", "a b", "▁a b"]
    v = load_vocabulary(write_json(tmp_path / "m.json", {"vocab": vocab, "merges": merges}), "bpe-json")
    # "▁ a" degenerates on the left side; "▁a b" collapses onto "a b"
    assert v.merges == [("a", "b")]
    assert v.get("a").id == 1
    assert v.get("") is None


def test_bpe_malformed_json_names_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"vocab": {"a": 0,,}}', encoding="utf-8")
    with pytest.raises(VocabParseError) as info:
        load_vocabulary(path, "bpe-json")
    assert info.value.line == 1 and info.value.offset is not None


def test_wordpiece_duplicates_collapse(tmp_path, caplog):
    path = tmp_path / "wp.txt"
    path.write_text("▁a\na\n##b\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        v = load_vocabulary(path, "wordpiece-txt")
    assert v.duplicates == 1
    assert v.id_of("a") == 0
    assert len(v.surfaces) == 2
    assert "duplicate" in caplog.text


def test_wordpiece_continuation_tokens_not_matchable(tmp_path):
    path = tmp_path / "wp.txt"
    path.write_text("un\n##able\nable\n", encoding="utf-8")
    v = load_vocabulary(path, "wordpiece-txt")
    assert [t.surface for t in v.matchable()] == ["un", "able"]


def test_unigram_tsv(tmp_path):
    path = tmp_path / "u.tsv"
    path.write_text("▁ab\t-1.5\na\t-2\nb\t-2.25\n", encoding="utf-8")
    v = load_vocabulary(path, "unigram-tsv")
    assert v.logprobs == {"ab": -1.5, "a": -2.0, "b": -2.25}


def test_unigram_bad_number_names_line(tmp_path):
    path = tmp_path / "u.tsv"
    path.write_text("a\t-1\nb\tnope\n", encoding="utf-8")
    with pytest.raises(VocabParseError) as info:
        load_vocabulary(path, "unigram-tsv")
    assert info.value.line == 2


@pytest.mark.parametrize("value", ["inf", "-inf", "nan"])
def test_unigram_non_finite_rejected(tmp_path, value):
    path = tmp_path / "u.tsv"
    path.write_text(f"a\t{value}\n", encoding="utf-8")
    with pytest.raises(VocabIntegrityError):
        load_vocabulary(path, "unigram-tsv")


def test_unigram_missing_score_rejected(tmp_path):
    path = tmp_path / "u.tsv"
    path.write_text("a\n", encoding="utf-8")
    with pytest.raises(VocabParseError):
        load_vocabulary(path, "unigram-tsv")


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="unknown vocabulary format"):
        load_vocabulary(tmp_path / "x", "spm-model")


def test_degenerate_tokens_kept_but_unmatchable():
    v = Vocabulary.from_surfaces(["▁", "a", "  "])
    assert len(v) == 3
    assert [t.surface for t in v.matchable()] == ["a"]
    assert v.by_id(0).degenerate


def test_language_filter_examples():
    zh, en = LanguageFilter.chinese(), LanguageFilter.english()
    assert zh.accepts("的")
    assert not en.accepts("abc1")
    assert en.accepts("abc")
    assert not zh.accepts("")


def test_language_filter_empty_result_warns(caplog):
    v = Vocabulary.from_surfaces(["abc", "de"])
    with caplog.at_level(logging.WARNING):
        out = filter_by_language(v, LanguageFilter.chinese())
    assert len(out) == 0
    assert "no tokens" in caplog.text


def test_custom_ranges():
    digits = LanguageFilter.custom([(ord("0"), ord("9"))])
    v = Vocabulary.from_surfaces(["12", "a1", "7"])
    assert filter_by_language(v, digits).surfaces == ["12", "7"]


@given(st.lists(st.text(alphabet="ab中文1 ▁", min_size=1, max_size=4), max_size=30))
def test_language_partition(raw):
    v = Vocabulary.from_surfaces(raw)
    zh = LanguageFilter.chinese()
    kept = filter_by_language(v, zh)
    rest = [t for t in v.tokens if not zh.accepts(t.surface)]
    assert len(kept) <= len(v)
    assert sorted(t.id for t in kept.tokens) == sorted(t.id for t in v.tokens if zh.accepts(t.surface))
    assert len(kept) + len(rest) == len(v)


def test_index_examples():
    idx = VocabularyIndex(["six", "sixth", "this", "island", "land"])
    assert idx.with_prefix("is") == ["island"]
    assert idx.with_suffix("th") == ["sixth"]
    assert "sixthis" not in idx
    assert "this" in idx


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_index_matches_linear_scan(seed):
    rng = random.Random(seed)
    surfaces = sorted({"".join(rng.choice("abc") for _ in range(rng.randint(1, 5))) for _ in range(rng.randint(0, 500))})
    idx = VocabularyIndex(surfaces)
    probes = {"", "a", "b", "ab", "ba", "abc", "cc", "zzz"} | {s[: rng.randint(0, len(s))] for s in surfaces[:20]}
    for p in probes:
        assert idx.with_prefix(p) == scan_prefix(surfaces, p)
        assert sorted(idx.with_suffix(p)) == scan_suffix(surfaces, p)
        assert (p in idx) == (p in surfaces)


def test_build_indices_uses_matchable_tokens(tmp_path):
    path = tmp_path / "wp.txt"
    path.write_text("un\n##able\nable\n", encoding="utf-8")
    idx = build_indices(load_vocabulary(path, "wordpiece-txt"))
    assert idx.with_suffix("able") == ["able"]


def test_vocab_stats(toy_vocab):
    stats = vocab_stats(toy_vocab)
    assert stats["tokens"] == 28
    assert stats["english"] == 28
    assert stats["algorithm"] == "BPE"
