import math

import numpy as np
import pytest

import reference as ref
from c2w2c import corpus as C
from c2w2c import model as M
from c2w2c import numkernel as nk
from c2w2c.numkernel import Tensor
from oracles import gradient_check, randomize, scalar_lstm, toy_dims

PAPER = M.Dims(char_vocab=100, word_vocab=88_000)


def zero_model(kind, dims):
    m = M.new_model(kind, dims)
    for p in m.params.values():
        p.data[...] = 0.0
    return m


def row(rng, n):
    return Tensor(rng.normal(size=(1, n)))


# -- counting --------------------------------------------------------------------------------


def test_reference_scale_counts():
    c = M.count_params("c2w2c", M.param_shapes("c2w2c", PAPER))
    assert c["LM"] == 4 * ((50 + 500) * 500 + 500) + 4 * ((500 + 500) * 500 + 500) == 3_104_000
    assert c["C2W"] == 100 * 50 + 2 * (4 * ((50 + 150) * 150 + 150)) + (300 * 50 + 50) == 261_250
    gates = 3 * (500 * 50) + 3 * (500 * 500) + 3 * (500 * 500)
    maxout = 2 * (50 * 500 + 50 * 50 + 50 * 500) + 50
    assert c["W2C"] == gates + 250_000 + 5_000 + maxout + (100 * 50 + 100) == 1_940_150
    assert c["total"] == c["C2W"] + c["LM"] + c["W2C"]
    w = M.count_params("wordlstm", M.param_shapes("wordlstm", PAPER))
    assert w["FF-NN input"] == 88_000 * 50
    assert w["FF-NN output"] == 500 * 150 + 150 * 88_000
    assert w["LM"] == 3_104_000


@pytest.mark.parametrize("V,d", [(7, 3), (12, 5), (30, 8)])
def test_toy_counts_match_closed_form(V, d):
    dims = toy_dims(V, word_vocab=11, d=d)
    lstm = 4 * ((d + d) * d + d)
    c = M.count_params("c2w2c", M.new_model("c2w2c", dims).params)
    assert c["C2W"] == V * d + 2 * lstm + (2 * d * d + d)
    assert c["LM"] == 2 * lstm
    assert c["W2C"] == 9 * d * d + d * d + V * d + 2 * 3 * d * d + d + d * V + V
    w = M.count_params("wordlstm", M.new_model("wordlstm", dims).params)
    assert w == {"FF-NN input": 11 * d, "LM": 2 * lstm, "FF-NN output": d * d + d * 11, "total": 11 * d + 2 * lstm + d * d + d * 11}


def test_invalid_dims_rejected():
    with pytest.raises(ValueError):
        M.Dims(char_vocab=0).validate()
    with pytest.raises(ValueError):
        M.Dims(word_vocab=0).validate("wordlstm")


def test_init_scheme():
    m = M.new_model("c2w2c", toy_dims(9, d=4), seed=3)
    b = m.params["lm.l1.b"].data
    assert b[4:8].tolist() == [1.0] * 4 and np.all(b[:4] == 0) and np.all(b[8:] == 0)
    W = m.params["w2c.U_z"].data
    assert np.all(np.abs(W) <= math.sqrt(6 / 8))
    again = M.new_model("c2w2c", toy_dims(9, d=4), seed=3)
    assert all(np.array_equal(m.params[k].data, again.params[k].data) for k in m.params)


# -- C2W --------------------------------------------------------------------------------------


@pytest.fixture
def c2w_setup(toy_vocab):
    m = M.new_model("c2w2c", toy_dims(len(toy_vocab), d=6), seed=0)
    randomize(m.params, 1)
    return m, toy_vocab


def test_c2w_matches_reference(c2w_setup):
    m, v = c2w_setup
    P = ref.arrays(m.params)
    words = ["kissa", "a", "näkee", "leipää"]
    enc = [v.encode(w) for w in words]
    ids, lengths = M._as_batch(enc)
    batch = M.c2w_embed_batch(m.params, ids, lengths).data
    for i, w in enumerate(words):
        assert np.allclose(batch[i], ref.c2w(P, [v.index[ch] for ch in w]), atol=1e-12)


def test_c2w_single_character_takes_one_step(c2w_setup):
    m, v = c2w_setup
    P = ref.arrays(m.params)
    out = M.c2w_embed(v.encode("a"), m.params).data[0]
    assert np.allclose(out, ref.c2w(P, [v.index["a"]]), atol=1e-12)


def test_c2w_zero_params_gives_projection_bias(toy_vocab):
    m = zero_model("c2w2c", toy_dims(len(toy_vocab), d=4))
    m.params["c2w.proj.b"].data[...] = [0.1, -0.2, 0.3, 0.4]
    out = M.c2w_embed(toy_vocab.encode("auto"), m.params).data[0]
    assert out.tolist() == [0.1, -0.2, 0.3, 0.4]


def test_c2w_ignores_padding_content(c2w_setup):
    m, v = c2w_setup
    enc = v.encode("auto")
    ids = np.array([enc.char_ids])
    base = M.c2w_embed_batch(m.params, ids, [4]).data
    garbage = ids.copy()
    garbage[0, 5:] = np.arange(3, 18) % len(v)
    assert np.array_equal(M.c2w_embed_batch(m.params, garbage, [4]).data, base)
    # also when batched next to a longer word
    other = np.array([v.encode("näkee").char_ids])
    both = M.c2w_embed_batch(m.params, np.concatenate([garbage, other]), [4, 5]).data
    assert np.allclose(both[0], base[0], atol=1e-14)


def test_c2w_bad_char_id(c2w_setup):
    m, v = c2w_setup
    with pytest.raises(IndexError):
        M.c2w_embed_batch(m.params, np.array([[len(v), 1]]), [1])


def test_c2w_gradient_wrt_char_table(c2w_setup):
    m, v = c2w_setup
    enc = v.encode("kissa")
    table = {"c2w.char_table": m.params["c2w.char_table"]}
    w = np.random.default_rng(0).normal(size=(1, 6))
    errs = gradient_check(lambda: nk.total(nk.mul(M.c2w_embed(enc, m.params), Tensor(w))), table, max_entries=10_000)
    assert errs["c2w.char_table"] < 1e-4


# -- LM --------------------------------------------------------------------------------------


def test_lm_zero_everything_gives_zero_context():
    m = zero_model("c2w2c", toy_dims(8, d=4))
    st = M.RecurrentState.zeros(1, 4)
    _, c = M.lm_advance(st, Tensor(np.zeros((1, 4))), m.params)
    assert np.all(c.data == 0)


def test_lm_is_nonlinear(rng):
    m = M.new_model("c2w2c", toy_dims(8, d=4), seed=2)
    x1, x2 = row(rng, 4), row(rng, 4)
    st = M.RecurrentState.zeros(1, 4)
    s1, _ = M.lm_advance(st, x1, m.params)
    _, two = M.lm_advance(s1, x2, m.params)
    _, one = M.lm_advance(st, nk.add(x1, x2), m.params)
    assert not np.allclose(two.data, one.data)


def test_lm_step_matches_scalar_oracle(rng):
    m = M.new_model("c2w2c", M.Dims(char_vocab=8, d_c=2, d_wi=2, d_w=3, d_l=2, decoder_hidden=2), seed=5)
    randomize(m.params, 6)
    x = rng.normal(size=3)
    h0 = [rng.normal(size=2), rng.normal(size=2)]
    c0 = [rng.normal(size=2), rng.normal(size=2)]
    st = M.RecurrentState([(Tensor(h0[k][None]), Tensor(c0[k][None])) for k in range(2)])
    new, ctx = M.lm_advance(st, Tensor(x[None]), m.params)
    P = {k: v.data.tolist() for k, v in m.params.items()}
    h1, c1 = scalar_lstm(list(x), list(h0[0]), list(c0[0]), P["lm.l1.W"], P["lm.l1.U"], P["lm.l1.b"])
    h2, c2 = scalar_lstm(h1, list(h0[1]), list(c0[1]), P["lm.l2.W"], P["lm.l2.U"], P["lm.l2.b"])
    assert np.allclose(ctx.data[0], h2, atol=1e-14)
    assert np.allclose(new.layers[0][1].data[0], c1, atol=1e-14)
    assert np.allclose(new.layers[1][1].data[0], c2, atol=1e-14)


def test_lm_shape_errors():
    m = M.new_model("c2w2c", toy_dims(8, d=4))
    with pytest.raises(nk.DimensionError):
        M.lm_advance(M.RecurrentState.zeros(1, 4), Tensor(np.zeros((1, 5))), m.params)
    with pytest.raises(nk.DimensionError):
        M.lm_advance(M.RecurrentState.zeros(1, 3), Tensor(np.zeros((1, 4))), m.params)


def test_state_detach(rng):
    m = M.new_model("c2w2c", toy_dims(8, d=4))
    st, _ = M.lm_advance(M.RecurrentState.zeros(1, 4), row(rng, 4), m.params)
    assert not st.is_detached
    d = st.detach()
    assert d.is_detached
    assert all(np.array_equal(a, b) for a, b in zip(st.arrays(), d.arrays()))


# -- W2C ---------------------------------------------------------------------------------------


@pytest.fixture
def w2c_model():
    m = M.new_model("c2w2c", toy_dims(9, d=5), seed=0)
    randomize(m.params, 2)
    return m


def test_w2c_init_cases(w2c_model, rng):
    p = w2c_model.params
    assert np.all(M.w2c_init(Tensor(np.zeros((1, 5))), p).data == 0)
    c = row(rng, 5)
    h = M.w2c_init(c, p).data
    assert np.all(np.abs(h) < 1)
    zp = dict(p)
    zp["w2c.V"] = Tensor(np.zeros((5, 5)))
    assert np.all(M.w2c_init(c, zp).data == 0)


def test_w2c_step_matches_reference(w2c_model, rng):
    p = w2c_model.params
    P = ref.arrays(p)
    c, h = rng.normal(size=5), np.tanh(rng.normal(size=5))
    for prev in (M.START, 3):
        hn, logits = M.w2c_step(Tensor(h[None]), Tensor(c[None]), prev, p)
        e = np.zeros(5) if prev == M.START else P["w2c.char_table"][prev]
        rh, rp = ref.decoder_step(P, h, e, c)
        assert np.allclose(hn.data[0], rh, atol=1e-13)
        probs = nk.softmax(logits).data[0]
        assert np.allclose(probs, rp, atol=1e-13)
        assert abs(probs.sum() - 1) < 1e-12


def test_w2c_float32_softmax_sums(w2c_model, rng):
    p32 = {k: Tensor(v.data, dtype="float32") for k, v in w2c_model.params.items()}
    _, logits = M.w2c_step(Tensor(rng.normal(size=(3, 5)), dtype="float32"), Tensor(rng.normal(size=(3, 5)), dtype="float32"), np.array([1, 4, 6]), p32)
    assert logits.dtype == np.float32
    assert np.allclose(nk.softmax(logits).data.sum(axis=1), 1.0, atol=1e-6)


def test_w2c_zero_gates_give_embedding_candidate(w2c_model, rng):
    p = dict(w2c_model.params)
    # z -> 0 and r -> 0 through very negative context pre-activations
    big = Tensor(np.full((5, 5), -60.0))
    p["w2c.C_z"], p["w2c.C_r"] = big, big
    p["w2c.W_z"] = p["w2c.W_r"] = p["w2c.U_z"] = p["w2c.U_r"] = Tensor(np.zeros((5, 5)))
    c = Tensor(np.abs(rng.normal(size=(1, 5))) + 0.5)
    h_prev = Tensor(np.tanh(rng.normal(size=(1, 5))))
    parts = {}
    h, _ = M.w2c_step(h_prev, c, 4, p, parts=parts)
    e = p["w2c.char_table"].data[4]
    assert np.all(parts["z"].data < 1e-20) and np.all(parts["r"].data < 1e-20)
    assert np.allclose(h.data[0], np.tanh(e @ p["w2c.W_h"].data), atol=1e-12)


def test_w2c_bad_char(w2c_model, rng):
    with pytest.raises(IndexError):
        M.w2c_step(Tensor(np.zeros((1, 5))), row(rng, 5), 9, w2c_model.params)


def test_w2c_step_gradients_every_decoder_tensor(rng):
    m = M.new_model("c2w2c", toy_dims(8, d=4), seed=9)
    randomize(m.params, 10)
    p = m.params
    c = Tensor(rng.normal(size=(1, 4)))
    names = [k for k in p if k.startswith("w2c.")]

    def loss():
        h, logits = M.w2c_step(M.w2c_init(c, p), c, 5, p)
        h, logits2 = M.w2c_step(h, c, 2, p)
        return nk.add(nk.softmax_cross_entropy(logits, [2]), nk.softmax_cross_entropy(logits2, [1]))

    errs = gradient_check(loss, {k: p[k] for k in names}, max_entries=10_000)
    assert max(errs.values()) < 1e-4, errs


# -- word NLL ---------------------------------------------------------------------------------


def test_word_nll_uniform(toy_vocab):
    V = len(toy_vocab)
    m = zero_model("c2w2c", toy_dims(V, d=4))
    c = Tensor(np.zeros((1, 4)))
    for w in ("a", "kissa", "abcdefghijklmnopqrstuvw"):
        n = min(len(w), 20)
        expected = (n + (n < 20)) * math.log(V)
        assert M.word_nll(c, toy_vocab.encode(w), m.params).item() == pytest.approx(expected, rel=1e-12)


def test_word_nll_equals_character_product(w2c_model, toy_vocab, rng):
    v = C.CharVocab(toy_vocab.symbols[:9])
    P = ref.arrays(w2c_model.params)
    c = rng.normal(size=5)
    for word in ("k", "kis", "kissa"[:3] * 4):
        ids = [v.index[ch] for ch in word]
        nll = M.word_nll(Tensor(c[None]), v.encode(word, 6), w2c_model.params, maxlen=6).item()
        assert nll >= 0
        assert math.exp(-nll) == pytest.approx(ref.word_probability(P, c, ids, 6), rel=1e-10)


def test_word_nll_batch_matches_single(w2c_model, toy_vocab, rng):
    v = C.CharVocab(toy_vocab.symbols[:9])
    words = ["k", "kis", "sik", "kiss"]
    enc = [v.encode(w, 6) for w in words]
    ctx = rng.normal(size=(4, 5))
    batch = M.word_nll_batch(w2c_model.params, Tensor(ctx), *M._as_batch(enc), maxlen=6)
    singles = [M.word_nll(Tensor(ctx[i : i + 1]), e, w2c_model.params, 6).item() for i, e in enumerate(enc)]
    assert np.allclose(batch.word_nll, singles, atol=1e-12)
    assert batch.loss.item() == pytest.approx(sum(singles), rel=1e-12)
    assert batch.n_chars == sum(len(w) + 1 for w in words)


# -- Word-LSTM ---------------------------------------------------------------------------------


def test_wordlstm_uniform():
    m = zero_model("wordlstm", toy_dims(8, word_vocab=13, d=4))
    assert M.wordlstm_nll(Tensor(np.ones((1, 4))), 5, m.params).item() == pytest.approx(math.log(13), rel=1e-12)


def test_wordlstm_descends(rng):
    m = M.new_model("wordlstm", toy_dims(8, word_vocab=13, d=4), seed=1)
    c = row(rng, 4)
    before = M.wordlstm_nll(c, 3, m.params)
    before.backward()
    for p in m.params.values():
        if p.grad is not None:
            p.data -= 1e-3 * p.grad
    assert M.wordlstm_nll(c, 3, m.params).item() < before.item()


def test_wordlstm_bad_id(rng):
    m = M.new_model("wordlstm", toy_dims(8, word_vocab=13, d=4))
    with pytest.raises(IndexError):
        M.wordlstm_nll(row(rng, 4), 13, m.params)


def test_wordlstm_gradient(rng):
    m = M.new_model("wordlstm", toy_dims(8, word_vocab=13, d=4), seed=1)
    randomize(m.params, 4)
    c = row(rng, 4)
    p = {k: m.params[k] for k in ("wl.bottleneck", "wl.output")}
    errs = gradient_check(lambda: M.wordlstm_nll(c, 7, m.params), p, max_entries=10_000)
    assert max(errs.values()) < 1e-4


# -- purity ----------------------------------------------------------------------------------


def test_sentence_nll_is_pure(c2w_setup, toy_sentences):
    m, v = c2w_setup
    with nk.no_grad():
        a = M.sentence_nll(m, toy_sentences[2], v).item()
        b = M.sentence_nll(m, toy_sentences[2], v).item()
    assert a == b
