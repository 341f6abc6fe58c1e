"""Layer building blocks and parameter (de)serialisation shared by both base learners."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import kernel as K

FORMAT_VERSION = 1


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, shape)


def dense_params(rng, n_in: int, n_out: int, prefix: str) -> dict[str, K.Tensor]:
    return {f"{prefix}.W": K.parameter(uniform_init(rng, n_in, (n_in, n_out))),
            f"{prefix}.b": K.parameter(np.zeros(n_out))}


def dense(params: dict[str, K.Tensor], prefix: str, x) -> K.Tensor:
    return K.add(K.matmul(x, params[f"{prefix}.W"]), params[f"{prefix}.b"])


def lstm_step(params: dict[str, K.Tensor], prefix: str, x_t, h_prev: K.Tensor, c_prev: K.Tensor,
              hidden: int) -> tuple[K.Tensor, K.Tensor]:
    """Conventional four-gate LSTM step; gate columns ordered [i | f | g | o]."""
    z = dense(params, prefix, K.concat([h_prev, x_t], axis=-1))
    i = K.sigmoid(z[:, :hidden])
    f = K.sigmoid(z[:, hidden:2 * hidden])
    g = K.tanh(z[:, 2 * hidden:3 * hidden])
    o = K.sigmoid(z[:, 3 * hidden:])
    c = K.add(K.mul(f, c_prev), K.mul(i, g))
    h = K.mul(o, K.tanh(c))
    return h, c


def count(params: dict[str, K.Tensor], prefix: str = "") -> int:
    return int(sum(p.value.size for k, p in params.items() if k.startswith(prefix)))


def params_digest(params: dict[str, K.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].value).tobytes())
    return h.hexdigest()


def save_params(path, kind: str, architecture: dict, params: dict[str, K.Tensor]) -> None:
    """npz archive: a JSON header (format version, model kind, architecture) plus raw float64 arrays."""
    header = json.dumps({"format": FORMAT_VERSION, "kind": kind, "architecture": architecture},
                        sort_keys=True)
    arrays = {f"p:{k}": v.value for k, v in params.items()}
    with Path(path).open("wb") as fh:
        np.savez(fh, __header__=np.array(header), **arrays)


def load_params(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format {header.get('format')}")
        arrays = {k[2:]: z[k].astype(np.float64) for k in z.files if k.startswith("p:")}
    return header["kind"], header["architecture"], arrays
