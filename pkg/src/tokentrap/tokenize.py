"""Offline BPE, WordPiece and Unigram segmentation over a loaded Vocabulary."""

from __future__ import annotations

from dataclasses import dataclass

from .vocab import Algorithm, Vocabulary

UNK = "[UNK]"
UNK_LOGPROB = -1e9


@dataclass(frozen=True)
class TokenizationList:
    """Tokens a vocabulary produced for ``text``.

    ``spans`` holds the (start, end) character offsets of each token in
    ``text``; unknown tokens still cover the characters they replaced, so the
    input can always be reconstructed.
    """

    text: str
    tokens: tuple[str, ...]
    algorithm: Algorithm
    spans: tuple[tuple[int, int], ...] = ()
    continuation_prefix: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    @property
    def pieces(self) -> list[str]:
        """Token surfaces with WordPiece continuation markers removed."""
        p = self.continuation_prefix
        if not p:
            return list(self.tokens)
        return [t[len(p):] if t.startswith(p) and t != p else t for t in self.tokens]

    def contains(self, surface: str) -> bool:
        return surface in self.pieces

    def reconstruct(self) -> str:
        """Rebuild the text from token spans, re-inserting the gaps between pre-tokens."""
        out = []
        pos = 0
        for start, end in self.spans:
            out.append(self.text[pos:start])
            out.append(self.text[start:end])
            pos = end
        out.append(self.text[pos:])
        return "".join(out)

    def to_json(self) -> list[str]:
        return list(self.tokens)


@dataclass(frozen=True)
class PreToken:
    text: str
    start: int


def pretokenize_spans(text: str, mode: str = "whitespace") -> list[PreToken]:
    if mode == "none":
        return [PreToken(text, 0)] if text else []
    if mode != "whitespace":
        raise ValueError(f"unknown pretokenize mode {mode!r}")
    out = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace():
            if start is not None:
                out.append(PreToken(text[start:i], start))
                start = None
        elif start is None:
            start = i
    if start is not None:
        out.append(PreToken(text[start:], start))
    return out


def pretokenize(text: str, mode: str = "whitespace") -> list[str]:
    return [p.text for p in pretokenize_spans(text, mode)]


def _result(vocab: Vocabulary, text: str, tokens, lengths, offset: int = 0) -> TokenizationList:
    spans = []
    pos = offset
    for ln in lengths:
        spans.append((pos, pos + ln))
        pos += ln
    return TokenizationList(
        text=text,
        tokens=tuple(tokens),
        algorithm=vocab.algorithm,
        spans=tuple(spans),
        continuation_prefix=vocab.continuation_prefix if vocab.algorithm is Algorithm.WORDPIECE else "",
    )


def _check(vocab: Vocabulary, algorithm: Algorithm) -> None:
    if vocab.algorithm is not algorithm:
        raise ValueError(f"expected a {algorithm.value} vocabulary, got {vocab.algorithm.value}")


# -- BPE ---------------------------------------------------------------------


def _segment_bpe(vocab: Vocabulary, pretoken: str, unk: str):
    ranks = vocab.merge_ranks
    symbols = list(pretoken)
    while len(symbols) > 1:
        best_rank = None
        best_at = -1
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            # strict < keeps the leftmost occurrence on rank ties
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_at = r, i
        if best_rank is None:
            break
        symbols[best_at:best_at + 2] = [symbols[best_at] + symbols[best_at + 1]]
    return [s if s in vocab else unk for s in symbols], [len(s) for s in symbols]


def tokenize_bpe(vocab: Vocabulary, pretoken: str, unk: str = UNK) -> TokenizationList:
    """Apply the lowest-ranked applicable merge until none applies."""
    _check(vocab, Algorithm.BPE)
    return _result(vocab, pretoken, *_segment_bpe(vocab, pretoken, unk))


# -- WordPiece ---------------------------------------------------------------


def _segment_wordpiece(vocab: Vocabulary, pretoken: str, unk: str):
    prefix = vocab.continuation_prefix
    tokens, lengths = [], []
    start = 0
    n = len(pretoken)
    while start < n:
        end = min(n, start + vocab.max_token_len)
        piece = None
        while end > start:
            cand = pretoken[start:end]
            if start > 0:
                cand = prefix + cand
            if cand in vocab:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [unk], [n]
        tokens.append(piece)
        lengths.append(end - start)
        start = end
    return tokens, lengths


def tokenize_wordpiece(vocab: Vocabulary, pretoken: str, unk: str = UNK) -> TokenizationList:
    """Greedy longest match; any unmatched position turns the whole pre-token into ``unk``."""
    _check(vocab, Algorithm.WORDPIECE)
    return _result(vocab, pretoken, *_segment_wordpiece(vocab, pretoken, unk))


# -- Unigram -----------------------------------------------------------------


def _better(a, b) -> bool:
    if a[0] != b[0]:
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] < b[1]
    return a[2] < b[2]


def _segment_unigram(vocab: Vocabulary, pretoken: str, unk: str, unk_logprob: float = UNK_LOGPROB):
    # ranking: higher total log-prob, then fewer tokens, then lexicographically smaller sequence
    n = len(pretoken)
    if n == 0:
        return [], []
    lp = vocab.logprobs
    maxlen = max(vocab.max_token_len, 1)
    best: list[tuple | None] = [None] * (n + 1)
    best[0] = (0.0, 0, (), ())
    for j in range(1, n + 1):
        winner = None
        for i in range(max(0, j - maxlen), j):
            prev = best[i]
            if prev is None:
                continue
            piece = pretoken[i:j]
            if piece in lp:
                surface, score = piece, lp[piece]
            elif j - i == 1:
                surface, score = unk, unk_logprob
            else:
                continue
            cand = (prev[0] + score, prev[1] + 1, prev[2] + (surface,), prev[3] + (j - i,))
            if winner is None or _better(cand, winner):
                winner = cand
        best[j] = winner
    return list(best[n][2]), list(best[n][3])


def tokenize_unigram(vocab: Vocabulary, pretoken: str, unk: str = UNK, unk_logprob: float = UNK_LOGPROB) -> TokenizationList:
    """Viterbi segmentation maximizing the summed token log-probabilities."""
    _check(vocab, Algorithm.UNIGRAM)
    return _result(vocab, pretoken, *_segment_unigram(vocab, pretoken, unk, unk_logprob))


_SEGMENTERS = {
    Algorithm.BPE: _segment_bpe,
    Algorithm.WORDPIECE: _segment_wordpiece,
    Algorithm.UNIGRAM: _segment_unigram,
}


def tokenize_text(vocab: Vocabulary, text: str, mode: str = "whitespace", unk: str = UNK) -> TokenizationList:
    """Pre-tokenize ``text`` and segment each piece with the vocabulary's algorithm."""
    segment = _SEGMENTERS[vocab.algorithm]
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    for pre in pretokenize_spans(text, mode):
        part = _result(vocab, pre.text, *segment(vocab, pre.text, unk), offset=pre.start)
        tokens.extend(part.tokens)
        spans.extend(part.spans)
    return TokenizationList(
        text=text,
        tokens=tuple(tokens),
        algorithm=vocab.algorithm,
        spans=tuple(spans),
        continuation_prefix=vocab.continuation_prefix if vocab.algorithm is Algorithm.WORDPIECE else "",
    )
