"""Customised Temporal Fusion Transformer base learner (point forecast, no static covariates).

Pipeline per window: per-variable embedding, GRN-scored variable selection,
an LSTM encoder, causal single-head self-attention, a position-wise
feed-forward block and a dense head reading the last position. Sub-blocks
are joined by parameter-free residual additions.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernel as K
from . import nn
from .market_data import FEATURES, calendar_names

log = logging.getLogger(__name__)

MASK_VALUE = -1e9

# component rows of the published parameter table at d_model = 32
PUBLISHED_PARAM_COUNTS = {
    "variable_selection_grn": 4_224,
    "lstm_encoder": 8_320,
    "temporal_attention": 4_224,
    "feed_forward": 2_112,
    "output_head": 33,
    "total": 15_457,
}


def variable_names() -> list[str]:
    return list(FEATURES) + calendar_names()


@dataclass(frozen=True)
class TftArchitecture:
    encoder_length: int = 60
    decoder_length: int = 1
    n_variables: int = 24
    d_model: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.encoder_length, self.n_variables, self.d_model) < 1:
            raise ValueError("dimensions must be positive")
        if self.decoder_length != 1:
            raise ValueError("only one-step-ahead decoding is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def grn_params(rng, d: int, prefix: str) -> dict[str, K.Tensor]:
    p: dict[str, K.Tensor] = {}
    for name in ("d1", "d2", "glu_value", "glu_gate"):
        p.update(nn.dense_params(rng, d, d, f"{prefix}.{name}"))
    return p


def grn(params: dict[str, K.Tensor], prefix: str, x) -> K.Tensor:
    """x + GLU(dense2(ELU(dense1(x)))), GLU(u) = value(u) * sigmoid(gate(u))."""
    x = K.as_tensor(x)
    u = nn.dense(params, f"{prefix}.d2", K.elu(nn.dense(params, f"{prefix}.d1", x)))
    glu = K.mul(nn.dense(params, f"{prefix}.glu_value", u), K.sigmoid(nn.dense(params, f"{prefix}.glu_gate", u)))
    return K.add(x, glu)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def temporal_self_attention(params: dict[str, K.Tensor], prefix: str, H) -> tuple[K.Tensor, K.Tensor]:
    """Causal single-head scaled dot-product attention; returns (output, weights)."""
    H = K.as_tensor(H)
    d = H.shape[-1]
    q = nn.dense(params, f"{prefix}.q", H)
    k = nn.dense(params, f"{prefix}.k", H)
    v = nn.dense(params, f"{prefix}.v", H)
    scores = K.add(K.scale(K.matmul(q, K.transpose(k)), 1.0 / np.sqrt(d)), causal_mask(H.shape[-2]))
    weights = K.softmax(scores, axis=-1)
    return nn.dense(params, f"{prefix}.o", K.matmul(weights, v)), weights


class TftModel:
    kind = "tft"

    def __init__(self, arch: TftArchitecture | None = None, seed: int = 0):
        self.arch = arch or TftArchitecture()
        a = self.arch
        d = a.d_model
        rng = K.make_rng(seed)
        p: dict[str, K.Tensor] = {
            "emb.W": K.parameter(nn.uniform_init(rng, 1, (a.n_variables, d))),
            "emb.b": K.parameter(np.zeros((a.n_variables, d))),
        }
        p.update(grn_params(rng, d, "vsn"))
        p.update(nn.dense_params(rng, 2 * d, 4 * d, "lstm"))
        # forget-gate bias +1 (gate order i, f, g, o)
        p["lstm.b"].value[d:2 * d] = 1.0
        for name in ("q", "k", "v", "o"):
            p.update(nn.dense_params(rng, d, d, f"attn.{name}"))
        p.update(nn.dense_params(rng, d, d, "ff.d1"))
        p.update(nn.dense_params(rng, d, d, "ff.d2"))
        p.update(nn.dense_params(rng, d, 1, "head"))
        self.params = p
        audit = self.param_audit()
        log.info("TFT parameters: %d (table components sum %d, stated total %d)",
                 audit["counts"]["total"], audit["table_component_sum"], PUBLISHED_PARAM_COUNTS["total"])

    # -- pieces -------------------------------------------------------------
    def embed(self, X: np.ndarray) -> K.Tensor:
        """(..., V) scalars -> (..., V, d) per-variable linear embeddings."""
        x = K.Tensor(np.asarray(X, dtype=np.float64)[..., None])
        return K.add(K.mul(x, self.params["emb.W"]), self.params["emb.b"])

    def variable_selection(self, X: np.ndarray) -> tuple[K.Tensor, K.Tensor]:
        """(blended (..., d), weights (..., V)) for inputs of shape (..., V)."""
        e = self.embed(X)
        scores = K.mean(grn(self.params, "vsn", e), axis=-1)
        w = K.softmax(scores, axis=-1)
        blended = K.sum(K.mul(e, K.reshape(w, w.shape + (1,))), axis=-2)
        return blended, w

    def encode(self, blended: K.Tensor, training: bool = False, rng=None) -> K.Tensor:
        d = self.arch.d_model
        batch, steps = blended.shape[0], blended.shape[1]
        h = K.Tensor(np.zeros((batch, d)))
        c = K.Tensor(np.zeros((batch, d)))
        hs = []
        for t in range(steps):
            h, c = nn.lstm_step(self.params, "lstm", blended[:, t, :], h, c, d)
            hs.append(h)
        H = K.stack(hs, axis=1)
        if training and self.arch.dropout > 0:
            H = K.dropout(H, K.dropout_mask(rng, H.shape, self.arch.dropout), self.arch.dropout)
        return K.add(H, blended)

    def forward(self, X: np.ndarray, training: bool = False, rng=None, trace: dict | None = None) -> K.Tensor:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.arch.n_variables:
            raise ValueError(f"TFT expects (batch, steps, {self.arch.n_variables}) windows, got {X.shape}")
        blended, sel = self.variable_selection(X)
        H = self.encode(blended, training, rng)
        att, att_w = temporal_self_attention(self.params, "attn", H)
        Z = K.add(H, att)
        F = K.add(Z, nn.dense(self.params, "ff.d2", K.elu(nn.dense(self.params, "ff.d1", Z))))
        out = nn.dense(self.params, "head", F[:, -1, :])
        if trace is not None:
            trace["selection"] = sel.value
            trace["attention"] = att_w.value
        return K.reshape(out, (-1,))

    def predict(self, X: np.ndarray, batch_size: int = 128) -> np.ndarray:
        from .trainer import predict_batched
        return predict_batched(self, X, batch_size)

    # -- audit / io ---------------------------------------------------------
    def param_count(self) -> int:
        return nn.count(self.params)

    def param_audit(self) -> dict:
        counts = {
            "embeddings": nn.count(self.params, "emb."),
            "variable_selection_grn": nn.count(self.params, "vsn."),
            "lstm_encoder": nn.count(self.params, "lstm."),
            "temporal_attention": nn.count(self.params, "attn."),
            "feed_forward": nn.count(self.params, "ff."),
            "output_head": nn.count(self.params, "head."),
        }
        counts["total"] = self.param_count()
        table_rows = [k for k in PUBLISHED_PARAM_COUNTS if k != "total"]
        component_sum = sum(counts[k] for k in table_rows)
        audit = {"model": "tft", "d_model": self.arch.d_model, "counts": counts,
                 "table_component_sum": component_sum, "stated_total": PUBLISHED_PARAM_COUNTS["total"]}
        if self.arch.d_model == 32:
            audit["reference"] = dict(PUBLISHED_PARAM_COUNTS)
            audit["matches"] = {k: counts[k] == PUBLISHED_PARAM_COUNTS[k] for k in table_rows}
        return audit

    def interpretability(self, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Selection weights (steps, V) and causal attention map (steps, steps) for one window."""
        trace: dict = {}
        self.forward(np.asarray(window)[None], trace=trace)
        return trace["selection"][0], trace["attention"][0]

    def export_interpretability(self, window: np.ndarray, selection_path, attention_path) -> None:
        sel, att = self.interpretability(window)
        with Path(selection_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + variable_names()[: sel.shape[1]])
            for t, row in enumerate(sel):
                w.writerow([t, *map(repr, row.tolist())])
        with Path(attention_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query"] + [f"key_{j}" for j in range(att.shape[1])])
            for t, row in enumerate(att):
                w.writerow([t, *map(repr, row.tolist())])

    def save(self, path) -> None:
        nn.save_params(path, self.kind, self.arch.to_dict(), self.params)

    @classmethod
    def load(cls, path) -> "TftModel":
        kind, arch, arrays = nn.load_params(path)
        if kind != cls.kind:
            raise ValueError(f"{path}: holds a '{kind}' model, not '{cls.kind}'")
        model = cls(TftArchitecture(**arch))
        for k, v in arrays.items():
            model.params[k].value = v
        return model
