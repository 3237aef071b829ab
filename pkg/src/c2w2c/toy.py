"""Small synthetic corpora for tests, demos and the acceptance suite."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .corpus import SENT_END, SENT_START

# subject -> verb, object -> adverb; every subject meets every object once
_SUBJECTS = (("kissa", "syö"), ("koira", "juo"), ("lapsi", "näkee"), ("isä", "ostaa"))
_OBJECTS = (("kalaa", "nopeasti"), ("vettä", "hitaasti"), ("maitoa", "aamulla"), ("leipää", "illalla"), ("omenan", "tänään"))


def overfit_lines() -> list[str]:
    """Twenty sentences over 21 word types; only the subject and the object are free."""
    return [f"{s} {v} {o} {a} ." for (s, v), (o, a) in itertools.product(_SUBJECTS, _OBJECTS)]


def wrap(lines) -> list[list[str]]:
    return [[SENT_START, *line.split(), SENT_END] for line in lines]


# -- case-agreement grammar ---------------------------------------------------

CASES = {"ssa": "olen", "sta": "tulen", "lla": "käyn", "lle": "menen"}
ADJECTIVES = ("iso", "vanha", "pieni", "uusi", "hyvä", "kylmä")
NOUNS = ("talo", "auto", "kirja", "maa", "kylä", "koulu")


@dataclass
class MinimalPair:
    good: list[str]
    bad: list[str]


@dataclass
class Grammar:
    train: list[list[str]]
    pairs: list[MinimalPair]


def agreement_grammar(n_heldout: int = 24, seed: int = 0) -> Grammar:
    """``<S> VERB ADJ+case NOUN+case . </S>``: the verb selects the case and the
    adjective and noun must both carry it.

    ``n_heldout`` (adjective, noun, case) combinations never appear in training;
    each yields minimal pairs that swap the noun's case for a wrong one. Every
    inflected held-out noun form still occurs in training with other adjectives.
    """
    combos = list(itertools.product(ADJECTIVES, NOUNS, CASES))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(combos))
    held = {combos[i] for i in order[:n_heldout]}

    def sent(adj, noun, case, noun_case=None):
        return [SENT_START, CASES[case], adj + case, noun + (noun_case or case), ".", SENT_END]

    train = [sent(*c) for c in combos if c not in held]
    pairs = []
    for adj, noun, case in sorted(held):
        for other in CASES:
            if other != case:
                pairs.append(MinimalPair(sent(adj, noun, case), sent(adj, noun, case, other)))
    return Grammar(train, pairs)


def zipf_lines(n_types: int = 12) -> list[str]:
    """Word ``w{i}`` occurs exactly ``i`` times (i = 1..n_types), one token per line.

    Word lengths are ``len("w") + digits``, so the length histogram is exact.
    """
    out = []
    for i in range(1, n_types + 1):
        out += [f"w{i}"] * i
    return out
