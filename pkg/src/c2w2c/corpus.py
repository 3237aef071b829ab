"""Vocabularies, bounded character encoding, stream batching and corpus statistics."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SENT_START = "<S>"
SENT_END = "</S>"
MARKERS = (SENT_START, SENT_END)

PAD, EOW, UNK_CHAR, SOS_CHAR, EOS_CHAR = 0, 1, 2, 3, 4
SPECIALS = ("<PAD>", "<EOW>", "<UNK>", SENT_START, SENT_END)
MAX_WORD_LEN = 20
REPLACEMENT = "\ufffd"

UNK_WORD = "<UNK>"
WORD_SPECIALS = (UNK_WORD, SENT_START, SENT_END)

LENGTH_BUCKETS = ("1-5", "6-10", "11-15", "16-20", "21-25", "26-30", "31-35", "36+")


class CorpusError(ValueError):
    pass


def load_sentences(path, lowercase: bool = True) -> list[list[str]]:
    """Read a sentence-per-line file into marker-wrapped token lists."""
    raw = Path(path).read_bytes()
    sentences = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise UnicodeDecodeError(
                exc.encoding, exc.object, exc.start, exc.end, f"{exc.reason} (line {lineno} of {path})"
            ) from None
        if lowercase:
            text = text.lower()
        tokens = text.split()
        if tokens:
            sentences.append([SENT_START, *tokens, SENT_END])
    return sentences


@dataclass(frozen=True)
class EncodedWord:
    char_ids: tuple[int, ...]
    true_length: int


class CharVocab:
    """Character index space. Specials sit at fixed low indices; the two sentence
    markers are single symbols so the marker pseudo-words stay one character long."""

    def __init__(self, symbols: Sequence[str]):
        if tuple(symbols[: len(SPECIALS)]) != SPECIALS:
            raise CorpusError(f"vocab must start with the specials {SPECIALS}")
        if len(set(symbols)) != len(symbols):
            raise CorpusError("duplicate symbols in character vocabulary")
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, CharVocab) and self.symbols == other.symbols

    def encode(self, word: str, maxlen: int = MAX_WORD_LEN) -> EncodedWord:
        return encode_word(word, self, maxlen)

    def decode(self, ids: Iterable[int]) -> str:
        ids = [i for i in ids if i != PAD]
        if EOW in ids:
            ids = ids[: ids.index(EOW)]
        if len(ids) == 1 and ids[0] in (SOS_CHAR, EOS_CHAR):
            return self.symbols[ids[0]]
        # specials inside a word become one replacement character each
        return "".join(REPLACEMENT if i < len(SPECIALS) else self.symbols[i] for i in ids)

    def is_known(self, word: str) -> bool:
        return word in MARKERS or all(ch in self.index for ch in word)

    def text(self) -> str:
        return "".join(s + "\n" for s in self.symbols)

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CharVocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def build_char_vocab(sentences: Sequence[Sequence[str]]) -> CharVocab:
    """Specials first, then characters by first occurrence."""
    if not sentences:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    seen = dict.fromkeys(SPECIALS)
    for sent in sentences:
        for tok in sent:
            if tok in MARKERS:
                continue
            for ch in tok:
                if ch not in seen:
                    seen[ch] = None
    return CharVocab(list(seen))


def encode_word(word: str, vocab: CharVocab, maxlen: int = MAX_WORD_LEN) -> EncodedWord:
    """Truncate to ``maxlen`` characters; shorter words get EOW then PAD."""
    if not word:
        raise CorpusError("cannot encode an empty word")
    if word == SENT_START:
        ids = [SOS_CHAR]
    elif word == SENT_END:
        ids = [EOS_CHAR]
    else:
        ids = [vocab.index.get(ch, UNK_CHAR) for ch in word[:maxlen]]
    n = len(ids)
    if n < maxlen:
        ids.append(EOW)
    ids.extend([PAD] * (maxlen - len(ids)))
    return EncodedWord(tuple(ids), n)


def decode_word(word: EncodedWord, vocab: CharVocab) -> str:
    return vocab.decode(word.char_ids[: word.true_length])


class WordVocab:
    """Word types for the word-level baseline; ``<UNK>`` absorbs everything else."""

    def __init__(self, words: Sequence[str]):
        if tuple(words[: len(WORD_SPECIALS)]) != WORD_SPECIALS:
            raise CorpusError(f"word vocab must start with {WORD_SPECIALS}")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, 0)

    def text(self) -> str:
        return "".join(w + "\n" for w in self.words)

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "WordVocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def build_word_vocab(sentences: Sequence[Sequence[str]], max_size: int | None = None) -> WordVocab:
    counts = Counter(tok for sent in sentences for tok in sent if tok not in MARKERS)
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(WORD_SPECIALS))]
    return WordVocab([*WORD_SPECIALS, *ranked])


# -- stream batching ------------------------------------------------------------


@dataclass
class StreamBatch:
    """``streams[i]`` is a contiguous run of whole sentences; consecutive entries
    are textual neighbours. ``order`` records the shuffled sentence indices."""

    streams: list[list[str]]
    order: list[int]
    cursor: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.cursor:
            self.cursor = [0] * len(self.streams)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.streams)


def shuffled_order(n: int, seed: int, epoch: int = 0) -> list[int]:
    rng = np.random.default_rng([seed, epoch])
    return [int(i) for i in rng.permutation(n)]


def make_streams(
    sentences: Sequence[Sequence[str]],
    batch_size: int = 150,
    shuffle_seed: int | None = 0,
    epoch: int = 0,
) -> StreamBatch:
    """Shuffle sentences (by seed and epoch), concatenate them and cut the result
    into ``batch_size`` contiguous streams of near-equal token count, never
    splitting a sentence. ``shuffle_seed=None`` keeps the input order."""
    if batch_size < 1:
        raise CorpusError("batch_size must be positive")
    if len(sentences) < batch_size:
        raise CorpusError(
            f"{len(sentences)} sentences cannot fill {batch_size} streams; use --batch-size <= {len(sentences)}"
        )
    order = list(range(len(sentences))) if shuffle_seed is None else shuffled_order(len(sentences), shuffle_seed, epoch)
    # offsets[k] = tokens in the first k sentences; cut j sits at the sentence
    # boundary nearest j/B of the tokens, keeping at least one sentence per stream
    offsets = np.concatenate([[0], np.cumsum([len(sentences[i]) for i in order])])
    n = len(order)
    cuts = [0]
    for j in range(1, batch_size):
        target = offsets[-1] * j / batch_size
        k = int(np.searchsorted(offsets, target))
        if k > 0 and target - offsets[k - 1] <= offsets[min(k, n)] - target:
            k -= 1
        cuts.append(min(max(k, cuts[-1] + 1), n - (batch_size - j)))
    cuts.append(n)
    streams = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        streams.append([tok for i in order[a:b] for tok in sentences[i]])
    return StreamBatch(streams, order)


# -- statistics -------------------------------------------------------------------


def length_bucket(n: int) -> str:
    if n > 35:
        return "36+"
    lo = (n - 1) // 5 * 5 + 1
    return f"{lo}-{lo + 4}"


@dataclass
class CorpusStats:
    total_tokens: int
    unique_tokens: int
    ranked_counts: list[int]
    length_histogram: dict[str, int]

    def coverage(self, k: int) -> float:
        if k <= 0:
            return 0.0
        return sum(self.ranked_counts[:k]) / self.total_tokens

    @property
    def unique_ratio(self) -> float:
        return self.unique_tokens / self.total_tokens

    def max_len_coverage(self, maxlen: int = MAX_WORD_LEN) -> float:
        """Fraction of tokens no longer than ``maxlen`` (bucket-aligned lengths only)."""
        keep = sum(c for b, c in self.length_histogram.items() if b != "36+" and int(b.split("-")[1]) <= maxlen)
        return keep / self.total_tokens


def compute_stats(sentences: Sequence[Sequence[str]]) -> CorpusStats:
    """Token statistics with the sentence markers excluded."""
    counts = Counter(tok for sent in sentences for tok in sent if tok not in MARKERS)
    if not counts:
        raise CorpusError("cannot compute statistics of an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    hist = dict.fromkeys(LENGTH_BUCKETS, 0)
    for word, c in counts.items():
        hist[length_bucket(len(word))] += c
    return CorpusStats(
        total_tokens=sum(counts.values()),
        unique_tokens=len(counts),
        ranked_counts=[c for _, c in ranked],
        length_histogram=hist,
    )
