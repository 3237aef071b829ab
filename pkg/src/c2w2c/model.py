"""C2W encoder, two-layer LSTM language model, W2C decoder and the Word-LSTM baseline.

All functions are pure: they take a flat ``params`` mapping (name -> Tensor)
and batched inputs, and return new tensors. Vectors are rows, so a weight
that maps ``a`` features to ``b`` features is stored as ``(a, b)`` and applied
as ``x @ W``. Parameter counts are unaffected by the orientation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numkernel as nk
from .corpus import MAX_WORD_LEN, EncodedWord
from .numkernel import Tensor

Dropout = Callable[[Tensor], Tensor] | None
Params = dict[str, Tensor]

START = -1  # previous-character sentinel for the first decoder step (zero embedding)

MODEL_KINDS = ("c2w2c", "wordlstm")


@dataclass(frozen=True)
class Dims:
    """Model sizes. Defaults are the full-scale configuration."""

    char_vocab: int = 100
    word_vocab: int = 0
    d_c: int = 50
    d_wi: int = 150
    d_w: int = 50
    d_l: int = 500
    decoder_hidden: int = 500
    bottleneck: int = 150
    max_word_len: int = MAX_WORD_LEN

    def validate(self, kind: str = "c2w2c") -> "Dims":
        for name, value in asdict(self).items():
            if name == "word_vocab":
                continue
            if value <= 0:
                raise ValueError(f"dimension {name} must be positive, got {value}")
        if kind == "wordlstm" and self.word_vocab <= 0:
            raise ValueError("word_vocab must be positive for the wordlstm model")
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        return self


@dataclass
class Model:
    kind: str
    dims: Dims
    params: Params

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())


# -- parameter layout -----------------------------------------------------------


def _lstm_shapes(prefix: str, n_in: int, n_hidden: int) -> dict[str, tuple[int, ...]]:
    # gate blocks along the last axis: input, forget, candidate, output
    return {
        f"{prefix}.W": (n_in, 4 * n_hidden),
        f"{prefix}.U": (n_hidden, 4 * n_hidden),
        f"{prefix}.b": (4 * n_hidden,),
    }


def c2w_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    shapes = {"c2w.char_table": (d.char_vocab, d.d_c)}
    shapes |= _lstm_shapes("c2w.fwd", d.d_c, d.d_wi)
    shapes |= _lstm_shapes("c2w.bwd", d.d_c, d.d_wi)
    shapes |= {"c2w.proj.W": (2 * d.d_wi, d.d_w), "c2w.proj.b": (d.d_w,)}
    return shapes


def lm_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    return _lstm_shapes("lm.l1", d.d_w, d.d_l) | _lstm_shapes("lm.l2", d.d_l, d.d_l)


def w2c_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    H, dc, ds = d.decoder_hidden, d.d_c, d.d_c
    shapes: dict[str, tuple[int, ...]] = {}
    for g in "zrh":
        shapes[f"w2c.W_{g}"] = (dc, H)
        shapes[f"w2c.U_{g}"] = (H, H)
        shapes[f"w2c.C_{g}"] = (d.d_l, H)
    shapes["w2c.V"] = (d.d_l, H)
    shapes["w2c.char_table"] = (d.char_vocab, dc)
    for i in (1, 2):
        shapes[f"w2c.O{i}_h"] = (H, ds)
        shapes[f"w2c.O{i}_e"] = (dc, ds)
        shapes[f"w2c.O{i}_c"] = (d.d_l, ds)
    shapes["w2c.b"] = (ds,)
    shapes["w2c.P_I"] = (ds, d.char_vocab)
    shapes["w2c.P_I_b"] = (d.char_vocab,)
    return shapes


def wordlstm_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    shapes = {"wl.input": (d.word_vocab, d.d_w)}
    shapes |= lm_shapes(d)
    shapes |= {"wl.bottleneck": (d.d_l, d.bottleneck), "wl.output": (d.bottleneck, d.word_vocab)}
    return shapes


def param_shapes(kind: str, dims: Dims) -> dict[str, tuple[int, ...]]:
    dims.validate(kind)
    if kind == "c2w2c":
        return c2w_shapes(dims) | lm_shapes(dims) | w2c_shapes(dims)
    return wordlstm_shapes(dims)


def init_params(kind: str, dims: Dims, rng: np.random.Generator, dtype=np.float64) -> Params:
    """Glorot-uniform matrices, zero biases, LSTM forget-gate bias 1."""
    params: Params = {}
    for name, shape in param_shapes(kind, dims).items():
        if len(shape) == 1:
            data = np.zeros(shape)
            if name.startswith(("c2w.fwd", "c2w.bwd", "lm.")) and name.endswith(".b"):
                h = shape[0] // 4
                data[h : 2 * h] = 1.0
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def new_model(kind: str, dims: Dims, seed: int = 0, dtype=np.float64) -> Model:
    return Model(kind, dims, init_params(kind, dims, np.random.default_rng(seed), dtype))


# -- parameter counting -------------------------------------------------------------

COMPONENTS = {
    "c2w2c": (("C2W", "c2w."), ("LM", "lm."), ("W2C", "w2c.")),
    "wordlstm": (("FF-NN input", "wl.input"), ("LM", "lm."), ("FF-NN output", ("wl.bottleneck", "wl.output"))),
}


def count_params(kind: str, params_or_shapes: Mapping) -> dict[str, int]:
    """Trainable scalar counts per sub-model plus ``"total"``.

    Accepts either a parameter dict or the shape dict from :func:`param_shapes`,
    so full-size models can be counted without allocating them. Gate matrices
    of the decoder carry no bias; the Maxout readout has one shared bias and
    the character projection has its own bias.
    """
    sizes = {
        name: int(np.prod(v.shape if isinstance(v, Tensor) else v, dtype=np.int64))
        for name, v in params_or_shapes.items()
    }
    out: dict[str, int] = {}
    for label, prefix in COMPONENTS[kind]:
        out[label] = sum(n for name, n in sizes.items() if name.startswith(prefix))
    out["total"] = sum(sizes.values())
    return out


# -- recurrent pieces ------------------------------------------------------------------


@dataclass
class RecurrentState:
    """Per-layer ``(hidden, cell)`` of the language-model LSTM, one row per stream."""

    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    @classmethod
    def zeros(cls, batch: int, hidden: int, n_layers: int = 2, dtype=np.float64) -> "RecurrentState":
        return cls([(Tensor(np.zeros((batch, hidden), dtype)), Tensor(np.zeros((batch, hidden), dtype))) for _ in range(n_layers)])

    def detach(self) -> "RecurrentState":
        return RecurrentState([(h.detach(), c.detach()) for h, c in self.layers])

    @property
    def is_detached(self) -> bool:
        return all(h._backward is None and c._backward is None for h, c in self.layers)

    def select(self, rows) -> "RecurrentState":
        rows = np.asarray(rows)
        return RecurrentState([(Tensor(h.data[rows]), Tensor(c.data[rows])) for h, c in self.layers])

    def arrays(self) -> list[np.ndarray]:
        return [a.data for pair in self.layers for a in pair]


def lstm_cell(gates: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    n = gates.shape[1] // 4
    act = nk.sigmoid(gates)
    i = nk.slice_cols(act, 0, n)
    f = nk.slice_cols(act, n, 2 * n)
    o = nk.slice_cols(act, 3 * n, 4 * n)
    g = nk.tanh(nk.slice_cols(gates, 2 * n, 3 * n))
    c = nk.add(nk.mul(f, c_prev), nk.mul(i, g))
    h = nk.mul(o, nk.tanh(c))
    return h, c


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: Mapping[str, Tensor], prefix: str) -> tuple[Tensor, Tensor]:
    gates = nk.add_bias(nk.add(nk.matmul(x, p[f"{prefix}.W"]), nk.matmul(h, p[f"{prefix}.U"])), p[f"{prefix}.b"])
    return lstm_cell(gates, c)


def _as_batch(words: Sequence[EncodedWord]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([w.char_ids for w in words], dtype=np.int64)
    lengths = np.array([w.true_length for w in words], dtype=np.int64)
    return ids, lengths


# -- C2W --------------------------------------------------------------------------------


def c2w_embed_batch(p: Mapping[str, Tensor], char_ids: np.ndarray, lengths: np.ndarray, drop: Dropout = None) -> Tensor:
    """Word embeddings ``(B, d_w)`` from padded character ids ``(B, L)``.

    The forward LSTM reads positions ``0..len-1`` and the backward LSTM reads
    ``len-1..0``; padding never touches either state.
    """
    char_ids = np.asarray(char_ids)
    lengths = np.asarray(lengths)
    if lengths.min() < 1:
        raise ValueError("every word needs at least one character")
    B = char_ids.shape[0]
    L = int(lengths.max())
    table = p["c2w.char_table"]
    x = nk.lookup(table, char_ids[:, :L].T.reshape(-1))
    finals = []
    for direction, steps in (("fwd", range(L)), ("bwd", range(L - 1, -1, -1))):
        prefix = f"c2w.{direction}"
        xw = nk.add_bias(nk.matmul(x, p[f"{prefix}.W"]), p[f"{prefix}.b"])
        hidden = p[f"{prefix}.U"].shape[0]
        h = Tensor(np.zeros((B, hidden), table.dtype))
        c = Tensor(np.zeros((B, hidden), table.dtype))
        U = p[f"{prefix}.U"]
        for t in steps:
            gates = nk.add(nk.slice_rows(xw, t * B, (t + 1) * B), nk.matmul(h, U))
            h_new, c_new = lstm_cell(gates, c)
            active = t < lengths
            if active.all():
                h, c = h_new, c_new
            else:
                h, c = nk.mask_rows(h_new, h, active), nk.mask_rows(c_new, c, active)
        finals.append(h)
    out = nk.add_bias(nk.matmul(nk.concat_cols(finals), p["c2w.proj.W"]), p["c2w.proj.b"])
    return drop(out) if drop else out


def c2w_embed(word: EncodedWord, p: Mapping[str, Tensor]) -> Tensor:
    """Embedding of a single word as a ``(1, d_w)`` row."""
    ids, lengths = _as_batch([word])
    return c2w_embed_batch(p, ids, lengths)


# -- language model ------------------------------------------------------------------------


def lm_advance(state: RecurrentState, w: Tensor, p: Mapping[str, Tensor]) -> tuple[RecurrentState, Tensor]:
    """One step of the two-layer LSTM. Returns the new state and the layer-2 hidden
    state, which is the context vector when ``w`` is the last context word."""
    if w.shape[1] != p["lm.l1.W"].shape[0]:
        raise nk.DimensionError(f"lm_advance: input {w.shape} does not match layer-1 weights {p['lm.l1.W'].shape}")
    layers = []
    x = w
    for k, (h, c) in enumerate(state.layers, start=1):
        if h.shape != (w.shape[0], p[f"lm.l{k}.U"].shape[0]):
            raise nk.DimensionError(f"lm_advance: state {h.shape} does not match layer {k}")
        h, c = lstm_step(x, h, c, p, f"lm.l{k}")
        layers.append((h, c))
        x = h
    return RecurrentState(layers), x


# -- W2C --------------------------------------------------------------------------------------


def w2c_init(context: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Initial decoder state ``tanh(c V)``."""
    return nk.tanh(nk.matmul(context, p["w2c.V"]))


@dataclass
class DecoderContext:
    """Context-only terms of the decoder, computed once per context vector."""

    Cz: Tensor
    Cr: Tensor
    Ch: Tensor
    O1c: Tensor
    O2c: Tensor

    @classmethod
    def build(cls, context: Tensor, p: Mapping[str, Tensor]) -> "DecoderContext":
        return cls(
            nk.matmul(context, p["w2c.C_z"]),
            nk.matmul(context, p["w2c.C_r"]),
            nk.matmul(context, p["w2c.C_h"]),
            nk.matmul(context, p["w2c.O1_c"]),
            nk.matmul(context, p["w2c.O2_c"]),
        )


def _prev_embedding(prev_char, batch: int, p: Mapping[str, Tensor]) -> Tensor | None:
    """Decoder embedding of the previous characters, ``None`` if all are START."""
    prev = np.broadcast_to(np.asarray(prev_char, dtype=np.int64), (batch,))
    is_start = prev == START
    if is_start.all():
        return None
    table = p["w2c.char_table"]
    e = nk.lookup(table, np.where(is_start, 0, prev))
    if is_start.any():
        e = nk.mask_rows(e, Tensor(np.zeros(e.shape, e.dtype)), ~is_start)
    return e


def _gru_update(h_prev: Tensor, ctx: DecoderContext, p, ew: Sequence[Tensor] | None, parts: dict | None = None) -> Tensor:
    # h_t = z*h_{t-1} + (1-z)*h'_t with h'_t = tanh(W_h e + r*(U_h h_{t-1} + C_h c));
    # ew holds (W_z e, W_r e, W_h e), None when e is the zero START embedding
    az = nk.add(ctx.Cz, nk.matmul(h_prev, p["w2c.U_z"]))
    ar = nk.add(ctx.Cr, nk.matmul(h_prev, p["w2c.U_r"]))
    inner = nk.add(nk.matmul(h_prev, p["w2c.U_h"]), ctx.Ch)
    if ew is not None:
        az, ar = nk.add(az, ew[0]), nk.add(ar, ew[1])
    z = nk.sigmoid(az)
    r = nk.sigmoid(ar)
    pre = nk.mul(r, inner)
    if ew is not None:
        pre = nk.add(ew[2], pre)
    cand = nk.tanh(pre)
    h = nk.add(nk.mul(z, h_prev), nk.mul(nk.one_minus(z), cand))
    if parts is not None:
        parts.update(z=z, r=r, candidate=cand, h=h)
    return h


def _readout(h: Tensor, e_terms: Sequence[Tensor] | None, o1c: Tensor, o2c: Tensor, p, parts: dict | None = None) -> Tensor:
    s1 = nk.add(nk.matmul(h, p["w2c.O1_h"]), o1c)
    s2 = nk.add(nk.matmul(h, p["w2c.O2_h"]), o2c)
    if e_terms is not None:
        s1, s2 = nk.add(s1, e_terms[0]), nk.add(s2, e_terms[1])
    s1, s2 = nk.add_bias(s1, p["w2c.b"]), nk.add_bias(s2, p["w2c.b"])
    s = nk.pairwise_max(s1, s2)
    logits = nk.add_bias(nk.matmul(s, p["w2c.P_I"]), p["w2c.P_I_b"])
    if parts is not None:
        parts.update(s1=s1, s2=s2, s=s, logits=logits)
    return logits


def w2c_step(
    h_prev: Tensor,
    context: Tensor,
    prev_char,
    p: Mapping[str, Tensor],
    ctx: DecoderContext | None = None,
    parts: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """One decoder step: gated update of the hidden state, then Maxout readout
    to character logits. ``prev_char`` is a char id (or array of ids), or
    :data:`START` for the first step. Pass a dict as ``parts`` to receive the
    intermediate gates and Maxout features."""
    B = h_prev.shape[0]
    ctx = ctx or DecoderContext.build(context, p)
    e = _prev_embedding(prev_char, B, p)
    ew = None if e is None else [nk.matmul(e, p[f"w2c.W_{g}"]) for g in "zrh"]
    h = _gru_update(h_prev, ctx, p, ew, parts)
    e_terms = None if e is None else (nk.matmul(e, p["w2c.O1_e"]), nk.matmul(e, p["w2c.O2_e"]))
    return h, _readout(h, e_terms, ctx.O1c, ctx.O2c, p, parts)


def n_targets(lengths: np.ndarray, maxlen: int) -> np.ndarray:
    """Decoder steps per word: the characters plus EOW unless the word fills the budget."""
    lengths = np.asarray(lengths)
    return lengths + (lengths < maxlen)


@dataclass
class DecodeLoss:
    loss: Tensor  # weighted sum of character NLLs
    word_nll: np.ndarray  # per-row unweighted NLL
    n_chars: float  # weighted number of scored characters


def word_nll_batch(
    p: Mapping[str, Tensor],
    context: Tensor,
    char_ids: np.ndarray,
    lengths: np.ndarray,
    weights: np.ndarray | None = None,
    maxlen: int = MAX_WORD_LEN,
    drop: Dropout = None,
) -> DecodeLoss:
    """Teacher-forced negative log-likelihood of target words given contexts."""
    char_ids = np.asarray(char_ids)
    B = char_ids.shape[0]
    steps = n_targets(lengths, maxlen)
    T = int(steps.max())
    weights = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    ctx = DecoderContext.build(context, p)
    ew = eo = None
    if T > 1:
        e_all = nk.lookup(p["w2c.char_table"], char_ids[:, : T - 1].T.reshape(-1))
        ew = [nk.matmul(e_all, p[f"w2c.W_{g}"]) for g in "zrh"]
        eo = [nk.matmul(e_all, p[f"w2c.O{i}_e"]) for i in (1, 2)]
    h = w2c_init(context, p)
    hs = []
    for t in range(T):
        if t == 0:
            h = _gru_update(h, ctx, p, None)
        else:
            rows = ((t - 1) * B, t * B)
            h = _gru_update(h, ctx, p, [nk.slice_rows(m, *rows) for m in ew])
        hs.append(h)
    H = nk.concat_rows(hs) if T > 1 else hs[0]
    if drop:
        H = drop(H)
    o1c = nk.concat_rows([ctx.O1c] * T) if T > 1 else ctx.O1c
    o2c = nk.concat_rows([ctx.O2c] * T) if T > 1 else ctx.O2c
    e_terms = None
    if T > 1:
        zero = Tensor(np.zeros((B, eo[0].shape[1]), context.dtype))
        e_terms = (nk.concat_rows([zero, eo[0]]), nk.concat_rows([zero, eo[1]]))
    logits = _readout(H, e_terms, o1c, o2c, p)
    targets = char_ids[:, :T].T.reshape(-1)
    active = (np.arange(T)[:, None] < steps[None, :])  # (T, B)
    w_flat = (active * weights[None, :]).reshape(-1)
    loss = nk.softmax_cross_entropy(logits, targets, w_flat)
    logp = nk.log_softmax_np(logits.data.astype(np.float64))
    per = -logp[np.arange(T * B), targets].reshape(T, B)
    word_nll = (per * active).sum(axis=0)
    return DecodeLoss(loss, word_nll, float((steps * weights).sum()))


def word_nll(context: Tensor, target: EncodedWord, p: Mapping[str, Tensor], maxlen: int = MAX_WORD_LEN) -> Tensor:
    """``-ln P(word | context)`` as a product of teacher-forced character probabilities."""
    ids, lengths = _as_batch([target])
    return word_nll_batch(p, context, ids, lengths, maxlen=maxlen).loss


# -- Word-LSTM baseline -----------------------------------------------------------------------


def wordlstm_embed(p: Mapping[str, Tensor], word_ids, drop: Dropout = None) -> Tensor:
    out = nk.lookup(p["wl.input"], np.asarray(word_ids, dtype=np.int64))
    return drop(out) if drop else out


def wordlstm_logits(context: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return nk.matmul(nk.matmul(context, p["wl.bottleneck"]), p["wl.output"])


def wordlstm_nll_batch(context: Tensor, target_ids, p: Mapping[str, Tensor], weights=None) -> tuple[Tensor, np.ndarray]:
    logits = wordlstm_logits(context, p)
    tgt = np.asarray(target_ids, dtype=np.int64)
    loss = nk.softmax_cross_entropy(logits, tgt, weights)
    logp = nk.log_softmax_np(logits.data.astype(np.float64))
    return loss, -logp[np.arange(len(tgt)), tgt]


def wordlstm_nll(context: Tensor, target_word_id: int, p: Mapping[str, Tensor]) -> Tensor:
    return wordlstm_nll_batch(context, [target_word_id], p)[0]


# -- whole-sentence losses (used by gradient checks and scoring) -------------------------------


def sentence_nll(model: Model, sentence: Sequence[str], vocab, maxlen: int | None = None) -> Tensor:
    """Total NLL of words ``1..n-1`` of a token list, each conditioned on its
    predecessors, from a zero initial state. ``vocab`` is a :class:`CharVocab`
    for C2W2C or a :class:`WordVocab` for the baseline."""
    p = model.params
    d = model.dims
    maxlen = maxlen or d.max_word_len
    dtype = next(iter(p.values())).dtype
    state = RecurrentState.zeros(1, d.d_l, dtype=dtype)
    total = None
    for prev, word in zip(sentence[:-1], sentence[1:]):
        if model.kind == "c2w2c":
            w = c2w_embed_batch(p, *_as_batch([vocab.encode(prev, maxlen)]))
            state, c = lm_advance(state, w, p)
            ids, lengths = _as_batch([vocab.encode(word, maxlen)])
            term = word_nll_batch(p, c, ids, lengths, maxlen=maxlen).loss
        else:
            w = wordlstm_embed(p, [vocab.id(prev)])
            state, c = lm_advance(state, w, p)
            term = wordlstm_nll_batch(c, [vocab.id(word)], p)[0]
        total = term if total is None else nk.add(total, term)
    return total
