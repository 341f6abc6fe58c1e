"""Finite-difference checks for every trainable block at small sizes."""
import numpy as np

from stackforecast import kernel as K
from stackforecast import nn
from stackforecast.acb import AcbArchitecture, AcbModel, attention_gate_step, bilstm_forward, cell_params
from stackforecast.tft import TftArchitecture, TftModel, grn, grn_params, temporal_self_attention

RNG_SEED = 11


def _probe(t: K.Tensor, seed: int) -> K.Tensor:
    r = np.random.default_rng(seed).normal(size=t.shape)
    return K.sum(K.mul(t, r))


# both gradients below this are an agreed zero (e.g. the key bias, which the
# softmax cancels); central-difference roundoff here is ~1e-11
ZERO_TOL = 1e-9


def _check(f, params) -> float:
    return K.grad_check(f, list(params), eps=1e-5, zero_tol=ZERO_TOL)


def attention_gated_cell() -> float:
    rng = K.make_rng(RNG_SEED)
    p = cell_params(rng, 3, 4, "c")
    x = np.random.default_rng(1).normal(size=(2, 3))
    h0 = K.parameter(np.random.default_rng(2).normal(size=(2, 4)) * 0.5)
    c0 = K.parameter(np.random.default_rng(3).normal(size=(2, 4)) * 0.5)

    def f():
        h, c = attention_gate_step(p, "c", x, h0, c0, 4)
        return K.add(_probe(h, 4), _probe(c, 5))
    return _check(f, [*p.values(), h0, c0])


def bilstm_layer() -> float:
    rng = K.make_rng(RNG_SEED)
    p = {}
    for d in ("fwd", "bwd"):
        p.update(cell_params(rng, 3, 2, f"b.{d}"))
    xs_v = np.random.default_rng(6).normal(size=(4, 2, 3))

    def f():
        seq, final = bilstm_forward(p, "b", [K.Tensor(x) for x in xs_v], 2)
        return K.add(_probe(K.stack(seq, axis=1), 7), _probe(final, 8))
    return _check(f, p.values())


def _acb() -> tuple[AcbModel, np.ndarray]:
    m = AcbModel(AcbArchitecture(lookback=4, hidden1=3, hidden2=2, dense_units=4), seed=RNG_SEED)
    # non-zero attention parameters so the softmax is not at its symmetric point
    m.params["fa.u"].value = np.random.default_rng(9).normal(size=5)
    m.params["fa.c"].value = np.random.default_rng(10).normal(size=5)
    X = np.random.default_rng(12).uniform(0, 1, size=(3, 4, 5))
    return m, X


def feature_attention() -> float:
    m, X = _acb()

    def f():
        ctx, w = m.feature_attention(X)
        return K.add(_probe(ctx, 13), _probe(w, 14))
    return _check(f, [m.params["fa.u"], m.params["fa.c"]])


def acb_head() -> float:
    m, X = _acb()
    return _check(lambda: _probe(m.forward(X), 15), [v for k, v in m.params.items() if k.startswith("head")])


def acb_full() -> float:
    m, X = _acb()
    return _check(lambda: _probe(m.forward(X), 16), m.params.values())


def grn_block() -> float:
    rng = K.make_rng(RNG_SEED)
    p = grn_params(rng, 4, "g")
    x = K.parameter(np.random.default_rng(17).normal(size=(3, 4)))
    return _check(lambda: _probe(grn(p, "g", x), 18), [*p.values(), x])


def _tft() -> tuple[TftModel, np.ndarray]:
    m = TftModel(TftArchitecture(encoder_length=4, d_model=4), seed=RNG_SEED)
    X = np.random.default_rng(19).uniform(0, 1, size=(2, 4, 24))
    return m, X


def variable_selection() -> float:
    m, X = _tft()

    def f():
        blended, w = m.variable_selection(X)
        return K.add(_probe(blended, 20), _probe(w, 21))
    return _check(f, [v for k, v in m.params.items() if k.startswith(("emb.", "vsn."))])


def temporal_attention() -> float:
    rng = K.make_rng(RNG_SEED)
    p = {}
    for n in ("q", "k", "v", "o"):
        p.update(nn.dense_params(rng, 4, 4, f"a.{n}"))
    H = K.parameter(np.random.default_rng(22).normal(size=(2, 5, 4)))

    def f():
        out, w = temporal_self_attention(p, "a", H)
        return K.add(_probe(out, 23), _probe(w, 24))
    return _check(f, [*p.values(), H])


def lstm_encoder() -> float:
    m, X = _tft()
    return _check(lambda: _probe(m.forward(X), 25), [v for k, v in m.params.items() if k.startswith("lstm.")])


def feed_forward() -> float:
    m, X = _tft()
    return _check(lambda: _probe(m.forward(X), 26), [v for k, v in m.params.items() if k.startswith("ff.")])


def tft_head() -> float:
    m, X = _tft()
    return _check(lambda: _probe(m.forward(X), 27), [m.params["head.W"], m.params["head.b"]])


def tft_full() -> float:
    m, X = _tft()
    return _check(lambda: _probe(m.forward(X), 28), m.params.values())


BLOCKS = {
    "attention-gated cell": attention_gated_cell,
    "BiLSTM layer": bilstm_layer,
    "feature attention": feature_attention,
    "ACB head": acb_head,
    "ACB end-to-end": acb_full,
    "GRN": grn_block,
    "variable selection": variable_selection,
    "temporal attention": temporal_attention,
    "TFT LSTM encoder": lstm_encoder,
    "feed-forward": feed_forward,
    "TFT head": tft_head,
    "TFT end-to-end": tft_full,
}
