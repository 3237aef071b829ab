"""Plain-numpy reference of the C2W2C forward pass, one word at a time.

Written straight from the model equations with no batching, masking or
autograd, so that it can serve as an independent oracle for the library.
"""

from __future__ import annotations

import math

import numpy as np

EOW = 1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def lstm(x, h, c, W, U, b):
    g = x @ W + h @ U + b
    n = h.shape[0]
    i, f, cand, o = sigmoid(g[:n]), sigmoid(g[n : 2 * n]), np.tanh(g[2 * n : 3 * n]), sigmoid(g[3 * n :])
    c = f * c + i * cand
    return o * np.tanh(c), c


def arrays(params) -> dict[str, np.ndarray]:
    return {k: np.asarray(v.data, dtype=np.float64) for k, v in params.items()}


def c2w(P, ids):
    E = P["c2w.char_table"]
    n = P["c2w.fwd.U"].shape[0]
    hf = cf = np.zeros(n)
    for i in ids:
        hf, cf = lstm(E[i], hf, cf, P["c2w.fwd.W"], P["c2w.fwd.U"], P["c2w.fwd.b"])
    hb = cb = np.zeros(n)
    for i in reversed(ids):
        hb, cb = lstm(E[i], hb, cb, P["c2w.bwd.W"], P["c2w.bwd.U"], P["c2w.bwd.b"])
    return np.concatenate([hf, hb]) @ P["c2w.proj.W"] + P["c2w.proj.b"]


def lm(P, state, w):
    out = []
    x = w
    for k, (h, c) in enumerate(state, start=1):
        h, c = lstm(x, h, c, P[f"lm.l{k}.W"], P[f"lm.l{k}.U"], P[f"lm.l{k}.b"])
        out.append((h, c))
        x = h
    return out, x


def decoder_step(P, h, e, c):
    """One step of the gated decoder and its Maxout readout. Returns (h, probs)."""
    z = sigmoid(e @ P["w2c.W_z"] + h @ P["w2c.U_z"] + c @ P["w2c.C_z"])
    r = sigmoid(e @ P["w2c.W_r"] + h @ P["w2c.U_r"] + c @ P["w2c.C_r"])
    cand = np.tanh(e @ P["w2c.W_h"] + r * (h @ P["w2c.U_h"] + c @ P["w2c.C_h"]))
    h = z * h + (1 - z) * cand
    s1 = h @ P["w2c.O1_h"] + e @ P["w2c.O1_e"] + c @ P["w2c.O1_c"] + P["w2c.b"]
    s2 = h @ P["w2c.O2_h"] + e @ P["w2c.O2_e"] + c @ P["w2c.O2_c"] + P["w2c.b"]
    s = np.maximum(s1, s2)
    return h, softmax(s @ P["w2c.P_I"] + P["w2c.P_I_b"])


def word_probability(P, c, ids, maxlen):
    """Product of teacher-forced character probabilities (EOW appended when it fits)."""
    targets = list(ids[:maxlen]) + ([EOW] if len(ids) < maxlen else [])
    h = np.tanh(c @ P["w2c.V"])
    e = np.zeros(P["w2c.char_table"].shape[1])
    prob = 1.0
    for t in targets:
        h, p = decoder_step(P, h, e, c)
        prob *= p[t]
        e = P["w2c.char_table"][t]
    return prob


def sentence_word_nlls(P, vocab, sentence, maxlen, skip=("<S>", "</S>")):
    """``-ln`` of each scored word's character product, conditioned on its predecessors."""
    d_l = P["lm.l1.U"].shape[0]
    state = [(np.zeros(d_l), np.zeros(d_l)), (np.zeros(d_l), np.zeros(d_l))]
    out = []
    for prev, word in zip(sentence[:-1], sentence[1:]):
        state, c = lm(P, state, c2w(P, [vocab.index[ch] if ch in vocab.index else 2 for ch in _chars(prev)][:maxlen]))
        if word in skip:
            continue
        ids = [vocab.index[ch] for ch in _chars(word)]
        out.append(-math.log(word_probability(P, c, ids, maxlen)))
    return out


def _chars(word):
    # sentence markers are single symbols at the character level
    return [word] if word in ("<S>", "</S>") else list(word)
