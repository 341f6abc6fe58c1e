"""Attention-customised BiLSTM (ACB) base learner.

The recurrent cell drops the LSTM forget gate in favour of an attention gate
computed from the previous cell state alone::

    A_t = sigmoid(C_{t-1} W_a + b_a)
    C_t = A_t * C_{t-1} + i_t * cand_t

Input, candidate and output gates are the conventional ones over
``[h_{t-1}, x_t]``. Two bidirectional layers run alongside a feature-attention
branch over the five OHLCV channels; both feed a dense regression head.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernel as K
from . import nn
from .market_data import CLOSE, FEATURES, VOLUME

log = logging.getLogger(__name__)

PUBLISHED_PARAM_COUNTS = {
    "bilstm1": 49_536,
    "bilstm2": 30_912,
    "feature_attention": 65,
    "baseline_total": 80_926,
    "reduced_total": 16_610,
}


@dataclass(frozen=True)
class AcbArchitecture:
    lookback: int = 60
    n_features: int = 5
    hidden1: int = 64
    hidden2: int = 32
    dense_units: int = 64
    dropout: float = 0.2
    attention_prior: float = 0.5
    prior_features: tuple[int, ...] = (CLOSE, VOLUME)
    summary: str = "last"  # per-feature summary for the attention branch: "last" or "mean"
    gate_bias_init: float = 1.0

    def __post_init__(self):
        if min(self.hidden1, self.hidden2, self.dense_units, self.n_features, self.lookback) < 1:
            raise ValueError("layer widths must be positive")
        if self.summary not in ("last", "mean"):
            raise ValueError("summary must be 'last' or 'mean'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior_features"] = list(self.prior_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AcbArchitecture":
        d = dict(d)
        d["prior_features"] = tuple(d["prior_features"])
        return cls(**d)


def reduced_variant(base: AcbArchitecture | None = None) -> AcbArchitecture:
    """Halved hidden widths (32/16) for ablation runs."""
    base = base or AcbArchitecture()
    return AcbArchitecture(**{**asdict(base), "hidden1": base.hidden1 // 2, "hidden2": base.hidden2 // 2,
                              "dense_units": base.dense_units // 2,
                              "prior_features": base.prior_features})


def cell_params(rng, n_in: int, hidden: int, prefix: str, gate_bias: float = 1.0) -> dict[str, K.Tensor]:
    fan = n_in + hidden
    return {
        f"{prefix}.W_gates": K.parameter(nn.uniform_init(rng, fan, (fan, 3 * hidden))),
        f"{prefix}.b_gates": K.parameter(np.zeros(3 * hidden)),
        f"{prefix}.W_a": K.parameter(nn.uniform_init(rng, hidden, (hidden, hidden))),
        f"{prefix}.b_a": K.parameter(np.full(hidden, gate_bias)),
    }


def attention_gate_step(params: dict[str, K.Tensor], prefix: str, x_t, h_prev, c_prev,
                        hidden: int, trace: dict | None = None) -> tuple[K.Tensor, K.Tensor]:
    """One step of the attention-gated cell; returns (h_t, C_t).

    Gate columns of ``W_gates`` are ordered [input | candidate | output] and
    act on ``[h_prev, x_t]``.
    """
    h_prev, c_prev = K.as_tensor(h_prev), K.as_tensor(c_prev)
    a = K.sigmoid(K.add(K.matmul(c_prev, params[f"{prefix}.W_a"]), params[f"{prefix}.b_a"]))
    z = K.add(K.matmul(K.concat([h_prev, K.as_tensor(x_t)], axis=-1), params[f"{prefix}.W_gates"]),
              params[f"{prefix}.b_gates"])
    i = K.sigmoid(z[:, :hidden])
    cand = K.tanh(z[:, hidden:2 * hidden])
    o = K.sigmoid(z[:, 2 * hidden:])
    c = K.add(K.mul(a, c_prev), K.mul(i, cand))
    h = K.mul(o, K.tanh(c))
    if trace is not None:
        trace.update(A=a.value, i=i.value, cand=cand.value, o=o.value)
    return h, c


def run_direction(params, prefix: str, xs: list, hidden: int, reverse: bool = False) -> list[K.Tensor]:
    """Hidden states aligned with input positions (processing order reversed if asked)."""
    batch = xs[0].shape[0]
    h = K.Tensor(np.zeros((batch, hidden)))
    c = K.Tensor(np.zeros((batch, hidden)))
    out: list[K.Tensor | None] = [None] * len(xs)
    steps = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in steps:
        h, c = attention_gate_step(params, prefix, xs[t], h, c, hidden)
        out[t] = h
    return out  # type: ignore[return-value]


def bilstm_forward(params, prefix: str, xs: list, hidden: int) -> tuple[list[K.Tensor], K.Tensor]:
    """Per-step [fwd_h_t, bwd_h_t] outputs and the terminal state [fwd_h_T, bwd_h_1]."""
    fwd = run_direction(params, f"{prefix}.fwd", xs, hidden)
    bwd = run_direction(params, f"{prefix}.bwd", xs, hidden, reverse=True)
    seq = [K.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
    return seq, K.concat([fwd[-1], bwd[0]], axis=-1)


class AcbModel:
    kind = "acb"

    def __init__(self, arch: AcbArchitecture | None = None, seed: int = 0):
        self.arch = arch or AcbArchitecture()
        a = self.arch
        rng = K.make_rng(seed)
        p: dict[str, K.Tensor] = {}
        for d in ("fwd", "bwd"):
            p.update(cell_params(rng, a.n_features, a.hidden1, f"l1.{d}", a.gate_bias_init))
        for d in ("fwd", "bwd"):
            p.update(cell_params(rng, 2 * a.hidden1, a.hidden2, f"l2.{d}", a.gate_bias_init))
        # zero init: attention starts at the fixed prior alone
        p["fa.u"] = K.parameter(np.zeros(a.n_features))
        p["fa.c"] = K.parameter(np.zeros(a.n_features))
        p.update(nn.dense_params(rng, 2 * a.hidden2 + a.n_features, a.dense_units, "head1"))
        p.update(nn.dense_params(rng, a.dense_units, 1, "head2"))
        self.params = p
        self.prior = np.zeros(a.n_features)
        self.prior[list(a.prior_features)] = a.attention_prior
        audit = self.param_audit()
        log.info("ACB %s parameters: %d (reference %d, difference %+d)", audit["variant"],
                 audit["counts"]["total"], audit["reference"]["total"], audit["difference"]["total"])

    # -- pieces -------------------------------------------------------------
    def feature_attention(self, X: np.ndarray) -> tuple[K.Tensor, K.Tensor]:
        """(context, weights): softmax weights over the features and weighted summaries."""
        X = np.asarray(X, dtype=np.float64)
        s = X[:, -1, :] if self.arch.summary == "last" else X.mean(axis=1)
        s = K.Tensor(s)
        scores = K.add(K.add(K.mul(s, self.params["fa.u"]), self.params["fa.c"]), self.prior)
        w = K.softmax(scores, axis=-1)
        return K.mul(w, s), w

    def encode(self, X: np.ndarray, training: bool = False, rng=None) -> K.Tensor:
        a = self.arch
        xs = [K.Tensor(X[:, t, :]) for t in range(X.shape[1])]
        seq, _ = bilstm_forward(self.params, "l1", xs, a.hidden1)
        if training and a.dropout > 0:
            seq = [K.dropout(s, K.dropout_mask(rng, s.shape, a.dropout), a.dropout) for s in seq]
        _, final = bilstm_forward(self.params, "l2", seq, a.hidden2)
        if training and a.dropout > 0:
            final = K.dropout(final, K.dropout_mask(rng, final.shape, a.dropout), a.dropout)
        return final

    def forward(self, X: np.ndarray, training: bool = False, rng=None) -> K.Tensor:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.arch.n_features:
            raise ValueError(f"ACB expects (batch, steps, {self.arch.n_features}) windows, got {X.shape}")
        final = self.encode(X, training, rng)
        ctx, _ = self.feature_attention(X)
        z = K.elu(nn.dense(self.params, "head1", K.concat([final, ctx], axis=-1)))
        return K.reshape(nn.dense(self.params, "head2", z), (-1,))

    def predict(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        from .trainer import predict_batched
        return predict_batched(self, X, batch_size)

    # -- audit / io ---------------------------------------------------------
    def param_count(self) -> int:
        return nn.count(self.params)

    def param_audit(self) -> dict:
        reduced = self.arch.hidden1 < AcbArchitecture().hidden1
        counts = {
            "bilstm1": nn.count(self.params, "l1."),
            "bilstm2": nn.count(self.params, "l2."),
            "feature_attention": nn.count(self.params, "fa."),
            "dense_head": nn.count(self.params, "head"),
            "total": self.param_count(),
        }
        ref_total = PUBLISHED_PARAM_COUNTS["reduced_total" if reduced else "baseline_total"]
        reference = {"total": ref_total}
        if not reduced:
            reference.update({k: PUBLISHED_PARAM_COUNTS[k] for k in ("bilstm1", "bilstm2", "feature_attention")})
        return {"model": "acb", "variant": "reduced" if reduced else "baseline", "counts": counts,
                "reference": reference,
                "difference": {k: counts[k] - v for k, v in reference.items()}}

    def export_feature_weights(self, X: np.ndarray, path, dates=None) -> np.ndarray:
        _, w = self.feature_attention(X)
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["window"] + list(FEATURES))
            for i, row in enumerate(w.value):
                wr.writerow([str(dates[i]) if dates is not None else i, *map(repr, row.tolist())])
        return w.value

    def save(self, path) -> None:
        nn.save_params(path, self.kind, self.arch.to_dict(), self.params)

    @classmethod
    def load(cls, path) -> "AcbModel":
        kind, arch, arrays = nn.load_params(path)
        if kind != cls.kind:
            raise ValueError(f"{path}: holds a '{kind}' model, not '{cls.kind}'")
        model = cls(AcbArchitecture.from_dict(arch))
        for k, v in arrays.items():
            model.params[k].value = v
        return model
