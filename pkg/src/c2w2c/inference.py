"""Sentence scoring, corpus perplexity and character-by-character text generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import numkernel as nk
from .corpus import EOW, MARKERS, PAD, SENT_END, SENT_START, CharVocab, EncodedWord, WordVocab
from .numkernel import Tensor


class ScoringError(ValueError):
    def __init__(self, message: str, words: Sequence[str] = ()):
        super().__init__(message)
        self.words = list(words)


@dataclass
class ScoreReport:
    tokens: list[str]  # the scored words, in order
    nlls: list[float]  # raw per-word NLL (sum over characters, natural log)

    @property
    def total(self) -> float:
        return float(sum(self.nlls))

    @property
    def score(self) -> float:
        """Length-normalised log-loss: total NLL divided by the number of scored words."""
        return self.total / len(self.nlls) if self.nlls else 0.0

    def format(self, decimals: int = 6) -> str:
        pairs = "\t".join(f"{t}:{n:.{decimals}f}" for t, n in zip(self.tokens, self.nlls))
        return f"{self.score:.{decimals}f}\t{pairs}" if pairs else f"{self.score:.{decimals}f}"


@dataclass(order=True)
class Hypothesis:
    """A partial decode. ``tokens`` holds characters (word beam) or words (sentence beam)."""

    logp: float
    tokens: list = field(compare=False)
    terminated: bool = field(default=False, compare=False)


def wrap_sentence(tokens: Sequence[str]) -> list[str]:
    toks = list(tokens)
    if not toks or toks[0] != SENT_START:
        toks.insert(0, SENT_START)
    if toks[-1] != SENT_END:
        toks.append(SENT_END)
    return toks


def _dtype(model: M.Model):
    return next(iter(model.params.values())).dtype


def _check_known(tokens: Sequence[str], vocab: CharVocab) -> None:
    bad = [t for t in tokens if not vocab.is_known(t)]
    if bad:
        raise ScoringError(f"words with unknown characters cannot be scored: {' '.join(bad)}", bad)


def _encode_batch(words: Sequence[EncodedWord]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.array([w.char_ids for w in words], dtype=np.int64),
        np.array([w.true_length for w in words], dtype=np.int64),
    )


def score_sentence(
    tokens: Sequence[str],
    model: M.Model,
    vocab: CharVocab | WordVocab,
    include_markers: bool = False,
) -> ScoreReport:
    """Per-word NLLs of a sentence, each word conditioned on all words before it.

    The sentence is wrapped in ``<S> ... </S>`` when the markers are missing.
    ``<S>`` is never scored; ``</S>`` is scored only with ``include_markers``.
    """
    toks = wrap_sentence(tokens)
    if model.kind == "c2w2c":
        _check_known(toks, vocab)
    p = model.params
    maxlen = model.dims.max_word_len
    out_tokens, nlls = [], []
    with nk.no_grad():
        state = M.RecurrentState.zeros(1, model.dims.d_l, dtype=_dtype(model))
        for prev, word in zip(toks[:-1], toks[1:]):
            if model.kind == "c2w2c":
                w = M.c2w_embed_batch(p, *_encode_batch([vocab.encode(prev, maxlen)]))
            else:
                w = M.wordlstm_embed(p, [vocab.id(prev)])
            state, c = M.lm_advance(state, w, p)
            if word in MARKERS and not include_markers:
                continue
            if model.kind == "c2w2c":
                ids, lengths = _encode_batch([vocab.encode(word, maxlen)])
                nll = M.word_nll_batch(p, c, ids, lengths, maxlen=maxlen).word_nll[0]
            else:
                nll = M.wordlstm_nll_batch(c, [vocab.id(word)], p)[1][0]
            out_tokens.append(word)
            nlls.append(float(nll))
    return ScoreReport(out_tokens, nlls)


def corpus_perplexity(
    sentences: Sequence[Sequence[str]],
    model: M.Model,
    vocab: CharVocab | WordVocab,
    include_markers: bool = False,
) -> float:
    """``exp(total word NLL / number of scored words)`` over a test set."""
    total = 0.0
    count = 0
    for sent in sentences:
        rep = score_sentence(sent, model, vocab, include_markers)
        total += rep.total
        count += len(rep.nlls)
    if count == 0:
        raise ValueError("perplexity of an empty test set is undefined")
    return math.exp(total / count)


# -- generation ---------------------------------------------------------------------------


def _encoded_from_ids(ids: Sequence[int], maxlen: int) -> EncodedWord:
    n = len(ids)
    out = list(ids) + ([EOW] if n < maxlen else [])
    out += [PAD] * (maxlen - len(out))
    return EncodedWord(tuple(out), n)


def _word_text(ids: Sequence[int], vocab: CharVocab) -> str:
    return vocab.decode(ids)


def _advance(model: M.Model, state: M.RecurrentState, words: Sequence[EncodedWord]):
    w = M.c2w_embed_batch(model.params, *_encode_batch(words))
    return M.lm_advance(state, w, model.params)


def _run_context(model: M.Model, context: Sequence[str], vocab: CharVocab):
    maxlen = model.dims.max_word_len
    toks = list(context)
    if not toks or toks[0] != SENT_START:
        toks.insert(0, SENT_START)
    _check_known(toks, vocab)
    state = M.RecurrentState.zeros(1, model.dims.d_l, dtype=_dtype(model))
    c = None
    for tok in toks:
        state, c = _advance(model, state, [vocab.encode(tok, maxlen)])
    return toks, state, c


def _allowed(n_symbols: int, first: bool) -> np.ndarray:
    ok = np.ones(n_symbols, dtype=bool)
    ok[PAD] = False
    if first:
        ok[EOW] = False  # words are never empty
    return ok


def beam_words(
    model: M.Model,
    context: Tensor,
    word_k: int = 20,
    length_normalize: bool = False,
) -> list[Hypothesis]:
    """Inner character-level beam for a single context vector ``(1, d_l)``.

    Returns at most ``word_k`` terminated hypotheses (character id lists) sorted by
    descending log-probability. A hypothesis ends on EOW or when it reaches the
    character budget. PAD is never emitted and EOW is not allowed first.
    """
    p = model.params
    maxlen = model.dims.max_word_len
    V = model.dims.char_vocab
    with nk.no_grad():
        ctx1 = M.DecoderContext.build(context, p)
        h = M.w2c_init(context, p)
        alive_ids: list[list[int]] = [[]]
        alive_lp = np.zeros(1)
        prev = np.array([M.START])
        finished: list[Hypothesis] = []

        def rank(hyp: Hypothesis) -> float:
            return hyp.logp / max(len(hyp.tokens), 1) if length_normalize else hyp.logp

        while alive_ids:
            n = len(alive_ids)
            ctx = ctx1 if n == 1 else _tile_ctx(ctx1, n)
            h_new, logits = M.w2c_step(h, None, prev, p, ctx)
            logp = nk.log_softmax_np(logits.data.astype(np.float64))
            first = len(alive_ids[0]) == 0
            allowed = _allowed(V, first)
            cand = np.where(allowed[None, :], alive_lp[:, None] + logp, -np.inf)
            flat = cand.reshape(-1)
            order = np.argsort(-flat, kind="stable")[: min(word_k, int(allowed.sum()) * n)]
            next_ids, next_lp, next_rows, next_prev = [], [], [], []
            for j in order:
                r, s = divmod(int(j), V)
                if s == EOW:
                    finished.append(Hypothesis(float(flat[j]), list(alive_ids[r]), True))
                elif len(alive_ids[r]) + 1 >= maxlen:
                    finished.append(Hypothesis(float(flat[j]), alive_ids[r] + [s], True))
                else:
                    next_ids.append(alive_ids[r] + [s])
                    next_lp.append(float(flat[j]))
                    next_rows.append(r)
                    next_prev.append(s)
            finished.sort(key=rank, reverse=True)
            del finished[word_k:]
            if not next_ids:
                break
            # scores only fall as hypotheses grow, so a full pool whose worst
            # member beats every live hypothesis is final
            if not length_normalize and len(finished) >= word_k and max(next_lp) <= finished[-1].logp:
                break
            alive_ids, alive_lp = next_ids, np.array(next_lp)
            h = Tensor(h_new.data[next_rows])
            prev = np.array(next_prev)
    return finished


def _tile_ctx(ctx: M.DecoderContext, n: int) -> M.DecoderContext:
    def tile(t: Tensor) -> Tensor:
        return Tensor(np.repeat(t.data, n, axis=0))

    return M.DecoderContext(tile(ctx.Cz), tile(ctx.Cr), tile(ctx.Ch), tile(ctx.O1c), tile(ctx.O2c))


def greedy_word(model: M.Model, context: Tensor, rng: np.random.Generator | None = None) -> Hypothesis:
    """Decode one word: argmax per character, or a draw from the softmax when ``rng`` is given."""
    p = model.params
    maxlen = model.dims.max_word_len
    V = model.dims.char_vocab
    with nk.no_grad():
        ctx = M.DecoderContext.build(context, p)
        h = M.w2c_init(context, p)
        prev = M.START
        ids: list[int] = []
        lp = 0.0
        while True:
            h, logits = M.w2c_step(h, None, prev, p, ctx)
            logp = nk.log_softmax_np(logits.data.astype(np.float64))[0]
            masked = np.where(_allowed(V, not ids), logp, -np.inf)
            if rng is None:
                s = int(np.argmax(masked))
            else:
                probs = np.exp(masked - masked.max())
                s = int(rng.choice(V, p=probs / probs.sum()))
            lp += float(logp[s])
            if s == EOW:
                break
            ids.append(s)
            if len(ids) >= maxlen:
                break
            prev = s
    return Hypothesis(lp, ids, True)


def sample_stochastic(
    context: Sequence[str],
    model: M.Model,
    vocab: CharVocab,
    max_words: int = 50,
    rng: np.random.Generator | None = None,
) -> Hypothesis:
    """Extend ``context`` one decoded word at a time until ``</S>`` or ``max_words``.

    Without ``rng`` every character is the most likely one; with ``rng`` characters
    are drawn from the model distribution. The returned log-probability covers the
    generated words only.
    """
    if model.kind != "c2w2c":
        raise ValueError("character-level sampling needs a c2w2c model")
    maxlen = model.dims.max_word_len
    toks, state, c = _run_context(model, context, vocab)
    total = 0.0
    ended = False
    with nk.no_grad():
        for _ in range(max_words):
            hyp = greedy_word(model, c, rng)
            total += hyp.logp
            word = _word_text(hyp.tokens, vocab)
            toks.append(word)
            if word == SENT_END:
                ended = True
                break
            state, c = _advance(model, state, [_encoded_from_ids(hyp.tokens, maxlen)])
    return Hypothesis(total, toks, ended)


def sample_beam(
    context: Sequence[str],
    model: M.Model,
    vocab: CharVocab,
    word_k: int = 20,
    sentence_k: int = 10,
    max_words: int = 50,
    length_normalize: bool = False,
) -> list[Hypothesis]:
    """Two-level beam search. Each live sentence proposes ``word_k`` words from the
    character beam; the best ``sentence_k`` extensions survive. Sentences end at
    ``</S>``; survivors are returned best first (unfinished ones only if nothing
    finished within ``max_words``)."""
    if model.kind != "c2w2c":
        raise ValueError("character-level sampling needs a c2w2c model")
    maxlen = model.dims.max_word_len
    toks, state, c = _run_context(model, context, vocab)
    alive = [(Hypothesis(0.0, list(toks)), state, c)]
    finished: list[Hypothesis] = []
    with nk.no_grad():
        for _ in range(max_words):
            cands = []
            for hi, (hyp, st, ctx) in enumerate(alive):
                for wi, w in enumerate(beam_words(model, ctx, word_k, length_normalize)):
                    cands.append((hyp.logp + w.logp, hi, wi, w.tokens))
            cands.sort(key=lambda x: (-x[0], x[1], x[2]))
            nxt = []
            for lp, hi, _, ids in cands[:sentence_k]:
                hyp, st, _ = alive[hi]
                word = _word_text(ids, vocab)
                new = Hypothesis(lp, hyp.tokens + [word], word == SENT_END)
                if new.terminated:
                    finished.append(new)
                else:
                    nxt.append((new, st, ids))
            finished.sort(key=lambda h: -h.logp)
            del finished[sentence_k:]
            if not nxt:
                alive = []
                break
            if len(finished) >= sentence_k and nxt[0][0].logp <= finished[-1].logp:
                alive = []
                break
            alive = []
            for new, st, ids in nxt:
                st2, c2 = _advance(model, st, [_encoded_from_ids(ids, maxlen)])
                alive.append((new, st2, c2))
    if not finished:
        finished = [hyp for hyp, _, _ in alive]
    return sorted(finished, key=lambda h: -h.logp)
