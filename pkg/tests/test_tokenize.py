from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_unigram, random_logprobs
from tokentrap.tokenize import (
    UNK,
    pretokenize,
    tokenize_bpe,
    tokenize_text,
    tokenize_unigram,
    tokenize_wordpiece,
)
from tokentrap.vocab import Algorithm, Vocabulary

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def bpe(surfaces, merges):
    return Vocabulary.from_surfaces(surfaces, Algorithm.BPE, merges=list(merges))


def wordpiece(surfaces):
    return Vocabulary.from_surfaces(surfaces, Algorithm.WORDPIECE)


def unigram(logprobs):
    return Vocabulary.from_surfaces(list(logprobs), Algorithm.UNIGRAM, logprobs=dict(logprobs))


ABC = bpe(["a", "b", "c", "ab", "abc"], [("a", "b"), ("ab", "c")])


def random_bpe(rng, alphabet="abc", n_merges=8):
    """Random merge table whose every product is a token, plus all base characters."""
    symbols = list(alphabet)
    merges = []
    for _ in range(n_merges):
        a, b = rng.choice(symbols), rng.choice(symbols)
        if (a, b) in merges or a + b in symbols:
            continue
        merges.append((a, b))
        symbols.append(a + b)
    return bpe(symbols, merges)


def random_unigram(rng, alphabet="abc", size=12, max_len=4):
    return unigram(random_logprobs(rng, alphabet, size, max_len))


def test_pretokenize_examples():
    assert pretokenize("move stable") == ["move", "stable"]
    assert pretokenize("movestable") == ["movestable"]
    assert pretokenize("六号 房间", "none") == ["六号 房间"]
    assert pretokenize("  a   b ") == ["a", "b"]
    assert pretokenize("", "none") == []
    with pytest.raises(ValueError):
        pretokenize("x", "chars")


def test_bpe_examples():
    assert list(tokenize_bpe(ABC, "abc")) == ["abc"]
    assert list(tokenize_bpe(ABC, "ba")) == ["b", "a"]
    assert list(tokenize_bpe(ABC, "abab")) == ["ab", "ab"]


def test_bpe_unknown_symbol():
    assert list(tokenize_bpe(ABC, "abz")) == ["ab", UNK]


def test_bpe_rank_tie_goes_leftmost():
    v = bpe(["a", "aa"], [("a", "a")])
    assert list(tokenize_bpe(v, "aaa")) == ["aa", "a"]


def test_bpe_rejects_other_algorithms():
    with pytest.raises(ValueError):
        tokenize_bpe(wordpiece(["x"]), "x")


def test_wordpiece_examples():
    assert list(tokenize_wordpiece(wordpiece(["un", "##able", "##a"]), "unable")) == ["un", "##able"]
    assert list(tokenize_wordpiece(wordpiece(["un", "##able"]), "unables")) == [UNK]
    assert list(tokenize_wordpiece(wordpiece(["x"]), "x")) == ["x"]


def test_wordpiece_pieces_strip_prefix():
    out = tokenize_wordpiece(wordpiece(["un", "##able"]), "unable")
    assert out.pieces == ["un", "able"]
    assert out.contains("able") and not out.contains("##able")


def test_unigram_examples():
    assert list(tokenize_unigram(unigram({"ab": -1.0, "a": -2.0, "b": -2.0}), "ab")) == ["ab"]
    assert list(tokenize_unigram(unigram({"a": -1.0}), "aa")) == ["a", "a"]
    assert list(tokenize_unigram(unigram({"ab": -2.0, "a": -1.0, "b": -1.0}), "ab")) == ["ab"]


def test_unigram_lexicographic_tie():
    v = unigram({"ab": -1.0, "c": -1.0, "a": -1.0, "bc": -1.0})
    # [ab, c] and [a, bc] tie on score and length
    assert list(tokenize_unigram(v, "abc")) == ["a", "bc"]


def test_unigram_uncovered_character():
    out = tokenize_unigram(unigram({"a": -1.0}), "aza")
    assert list(out) == ["a", UNK, "a"]
    assert out.reconstruct() == "aza"


def test_tokenize_text_toy_examples(merge_vocab):
    assert list(tokenize_text(merge_vocab, "movestable", "none")) == ["move", "stable"]
    assert list(tokenize_text(merge_vocab, "sixthisland", "none")) == ["six", "this", "land"]
    assert list(tokenize_text(merge_vocab, "drivenothing", "none")) == ["driven", "othing"]
    assert list(tokenize_text(merge_vocab, "", "none")) == []


def test_tokenize_text_keeps_boundaries(merge_vocab):
    out = tokenize_text(merge_vocab, "moves  table")
    assert list(out) == ["moves", "table"]
    assert out.spans == ((0, 5), (7, 12))
    assert out.reconstruct() == "moves  table"


def test_bundled_toy_vocabulary(toy_vocab):
    assert list(tokenize_text(toy_vocab, "movestable", "none")) == ["move", "stable"]
    assert list(tokenize_text(toy_vocab, "drivenothing", "none")) == ["driven", "othing"]


@settings(max_examples=150, deadline=None)
@given(seeds)
def test_unigram_matches_exhaustive_search(seed):
    rng = random.Random(seed)
    v = random_unigram(rng, alphabet=rng.choice(["ab", "abc", "abcd"]))
    text = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 12)))
    assert list(tokenize_unigram(v, text)) == brute_unigram(v.logprobs, text)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_bpe_invariant_under_unused_merges(seed):
    rng = random.Random(seed)
    v = random_bpe(rng)
    text = "".join(rng.choice("abc") for _ in range(rng.randint(1, 10)))
    base = list(tokenize_bpe(v, text))
    # merges over a character that never occurs in the text cannot apply
    extra = [("z", "a"), ("b", "z"), ("zb", "z")]
    extended = bpe(list(v.surfaces) + ["z", "za", "bz", "zbz", "zb"], v.merges + extra)
    assert list(tokenize_bpe(extended, text)) == base


def _round_trip(out, text):
    assert UNK not in out.tokens
    assert out.reconstruct() == text
    pieces = out.pieces
    for (start, end), piece in zip(out.spans, pieces):
        assert text[start:end] == piece


@settings(max_examples=100, deadline=None)
@given(seeds, st.sampled_from(["whitespace", "none"]))
def test_round_trip_all_algorithms(seed, mode):
    rng = random.Random(seed)
    text = "".join(rng.choice("abc  ") for _ in range(rng.randint(0, 16)))
    if mode == "none":
        text = text.replace(" ", "")
    v_bpe = random_bpe(rng)
    v_wp = wordpiece(["a", "b", "c", "ab", "##a", "##b", "##c", "##bc", "##ca"])
    lp = dict(random_unigram(rng).logprobs)
    lp.update({ch: -3.5 for ch in "abc"})
    for v in (v_bpe, v_wp, unigram(lp)):
        out = tokenize_text(v, text, mode)
        _round_trip(out, text)
        assert all(t in v for t in out.tokens)


def test_round_trip_with_unknowns():
    v = wordpiece(["un", "##able"])
    text = "unable zzz unable"
    out = tokenize_text(v, text)
    assert list(out) == ["un", "##able", UNK, "un", "##able"]
    assert out.reconstruct() == text


def test_deterministic_across_threads(merge_vocab):
    texts = ["movestable", "sixthisland", "drivenothing", "island six"] * 25
    serial = [tokenize_text(merge_vocab, t, "none") for t in texts]
    with ThreadPoolExecutor(max_workers=8) as pool:
        threaded = list(pool.map(lambda t: tokenize_text(merge_vocab, t, "none"), texts))
    assert serial == threaded


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_bpe_agrees_with_reference_library(seed):
    tokenizers = pytest.importorskip("tokenizers")
    rng = random.Random(seed)
    v = random_bpe(rng, n_merges=10)
    ref = tokenizers.Tokenizer(
        tokenizers.models.BPE(vocab={s: i for i, s in enumerate(v.surfaces)}, merges=list(v.merges))
    )
    text = "".join(rng.choice("abc") for _ in range(rng.randint(1, 12)))
    assert list(tokenize_bpe(v, text)) == ref.encode(text).tokens
