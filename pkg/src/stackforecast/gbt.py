"""Second-order gradient-boosted regression trees (squared error, exact greedy splits)."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kernel import make_rng

log = logging.getLogger(__name__)

FORMAT_TAG = "stackforecast-gbt v1"


@dataclass(frozen=True)
class GbtConfig:
    n_estimators: int = 1000
    learning_rate: float = 0.05
    max_depth: int = 4
    subsample: float = 0.7
    colsample_bytree: float = 0.7
    reg_alpha: float = 1.0
    reg_lambda: float = 5.0
    gamma: float = 1.0
    min_child_weight: float = 10.0
    early_stopping_rounds: int | None = 50
    base_score: float | None = None  # None: mean of training targets
    seed: int = 0
    verbosity: int = 1

    def __post_init__(self):
        if min(self.reg_alpha, self.reg_lambda, self.gamma, self.min_child_weight) < 0:
            raise ValueError("regularisers must be non-negative")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        for name in ("learning_rate", "subsample", "colsample_bytree"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")


def soft_threshold(g: float, alpha: float) -> float:
    return float(np.sign(g) * max(0.0, abs(g) - alpha))


def leaf_weight(G: float, H: float, alpha: float, lam: float) -> float:
    return -soft_threshold(G, alpha) / (H + lam)


def leaf_score(G: float, H: float, alpha: float, lam: float) -> float:
    t = soft_threshold(G, alpha)
    return t * t / (H + lam)


def split_gain(GL, HL, GR, HR, alpha, lam, gamma) -> float:
    return 0.5 * (leaf_score(GL, HL, alpha, lam) + leaf_score(GR, HR, alpha, lam)
                  - leaf_score(GL + GR, HL + HR, alpha, lam)) - gamma


@dataclass
class Node:
    """Internal node when ``feature >= 0``; leaf otherwise (then ``value`` is used)."""

    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0
    gain: float = 0.0
    hessian: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class RegressionTree:
    nodes: list[Node] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        feat = np.array([n.feature for n in self.nodes])
        thr = np.array([n.threshold for n in self.nodes])
        left = np.array([n.left for n in self.nodes])
        right = np.array([n.right for n in self.nodes])
        value = np.array([n.value for n in self.nodes])
        at = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = feat[at] >= 0
        while active.any():
            r, i = rows[active], at[active]
            at[r] = np.where(X[r, feat[i]] < thr[i], left[i], right[i])
            active = feat[at] >= 0
        return value[at]

    def depth(self) -> int:
        def d(i):
            n = self.nodes[i]
            return 0 if n.is_leaf else 1 + max(d(n.left), d(n.right))
        return d(0)

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.is_leaf]


def best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, features, cfg: GbtConfig):
    """Best (gain, feature, threshold) over midpoints of consecutive distinct values.

    A vectorised scan shortlists candidates within rounding distance of the
    best gain; those are rescored from correctly rounded subset sums so the
    result does not depend on summation order. Ties then resolve to the
    lowest feature index, then the lowest threshold.
    """
    G, H = g.sum(), h.sum()
    shortlist = []
    top = -np.inf
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cg, ch = np.cumsum(g[order])[:-1], np.cumsum(h[order])[:-1]
        ok = (xs[:-1] != xs[1:]) & (ch >= cfg.min_child_weight) & (H - ch >= cfg.min_child_weight)
        if not ok.any():
            continue
        gains = 0.5 * (_vscore(cg, ch, cfg) + _vscore(G - cg, H - ch, cfg) - _vscore(G, H, cfg)) - cfg.gamma
        gains = np.where(ok, gains, -np.inf)
        top = max(top, float(gains.max()))
        shortlist.append((f, xs, gains))
    if not shortlist:
        return None
    tol = 1e-9 * max(1.0, abs(top), abs(float(G)) ** 2 / (float(H) + cfg.reg_lambda + 1e-300))
    G_exact, H_exact = math.fsum(g), math.fsum(h)
    best = None
    for f, xs, gains in shortlist:
        for k in np.flatnonzero(gains >= top - tol):
            thr = 0.5 * (xs[k] + xs[k + 1])
            left = X[:, f] < thr
            GL, HL = math.fsum(g[left]), math.fsum(h[left])
            GR, HR = math.fsum(g[~left]), math.fsum(h[~left])
            if HL < cfg.min_child_weight or HR < cfg.min_child_weight:
                continue
            gain = 0.5 * (leaf_score(GL, HL, cfg.reg_alpha, cfg.reg_lambda)
                          + leaf_score(GR, HR, cfg.reg_alpha, cfg.reg_lambda)
                          - leaf_score(G_exact, H_exact, cfg.reg_alpha, cfg.reg_lambda)) - cfg.gamma
            if best is None or gain > best[0]:
                best = (gain, f, float(thr))
    return best


def _vscore(G, H, cfg: GbtConfig):
    t = np.sign(G) * np.maximum(0.0, np.abs(G) - cfg.reg_alpha)
    return t * t / (H + cfg.reg_lambda)


def build_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, features, cfg: GbtConfig) -> RegressionTree:
    tree = RegressionTree()

    def grow(rows: np.ndarray, depth: int) -> int:
        idx = len(tree.nodes)
        G, H = math.fsum(g[rows]), math.fsum(h[rows])
        tree.nodes.append(Node(value=leaf_weight(G, H, cfg.reg_alpha, cfg.reg_lambda), hessian=H))
        if depth >= cfg.max_depth or len(rows) < 2:
            return idx
        split = best_split(X[rows], g[rows], h[rows], features, cfg)
        if split is None or split[0] <= 0:
            return idx
        gain, f, thr = split
        go_left = X[rows, f] < thr
        node = tree.nodes[idx]
        node.feature, node.threshold, node.gain = f, float(thr), float(gain)
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return idx

    grow(np.arange(len(X)), 0)
    return tree


@dataclass
class BoostedEnsemble:
    base_score: float
    learning_rate: float
    n_features: int
    trees: list[RegressionTree] = field(default_factory=list)
    eval_history: list[float] = field(default_factory=list)
    train_history: list[float] = field(default_factory=list)
    best_iteration: int | None = None  # number of trees kept
    uses_margin: bool = False  # trees fit residuals around a per-row base margin

    def raw_predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) features, got {X.shape}")
        total = np.zeros(len(X))
        for tree in self.trees[:n_trees]:
            total += tree.predict(X)
        return self.learning_rate * total

    def predict(self, X: np.ndarray, base_margin: np.ndarray | None = None) -> np.ndarray:
        if self.uses_margin and base_margin is None:
            raise ValueError("ensemble was fitted around a base margin; pass base_margin")
        base = self.base_score if base_margin is None else np.asarray(base_margin, dtype=np.float64)
        return base + self.raw_predict(X)

    # -- text serialisation -------------------------------------------------
    def to_text(self) -> str:
        lines = [FORMAT_TAG,
                 f"base_score {self.base_score!r}",
                 f"learning_rate {self.learning_rate!r}",
                 f"n_features {self.n_features}",
                 f"best_iteration {self.best_iteration if self.best_iteration is not None else -1}",
                 f"uses_margin {int(self.uses_margin)}",
                 f"trees {len(self.trees)}"]
        for t, tree in enumerate(self.trees):
            lines.append(f"tree {t} nodes {len(tree.nodes)}")
            for i, n in enumerate(tree.nodes):
                lines.append(f"{i} {n.feature} {n.threshold!r} {n.left} {n.right} {n.value!r} "
                             f"{n.gain!r} {n.hessian!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BoostedEnsemble":
        lines = text.splitlines()
        if not lines or lines[0] != FORMAT_TAG:
            raise ValueError("not a boosted-ensemble file")
        kv = dict(line.split(" ", 1) for line in lines[1:7])
        best = int(kv["best_iteration"])
        ens = cls(float(kv["base_score"]), float(kv["learning_rate"]), int(kv["n_features"]),
                  best_iteration=None if best < 0 else best, uses_margin=bool(int(kv["uses_margin"])))
        pos = 7
        for _ in range(int(kv["trees"])):
            n_nodes = int(lines[pos].split()[3])
            pos += 1
            tree = RegressionTree()
            for line in lines[pos:pos + n_nodes]:
                _, f, thr, l, r, v, gain, hess = line.split()
                tree.nodes.append(Node(int(f), float(thr), int(l), int(r), float(v), float(gain), float(hess)))
            pos += n_nodes
            ens.trees.append(tree)
        return ens

    def save(self, path, header: dict | None = None) -> None:
        stamp = "".join(f"# {k}={v}\n" for k, v in (header or {}).items())
        Path(path).write_text(stamp + self.to_text())

    @classmethod
    def load(cls, path) -> "BoostedEnsemble":
        lines = Path(path).read_text().splitlines(keepends=True)
        return cls.from_text("".join(line for line in lines if not line.startswith("#")))


def fit(X: np.ndarray, y: np.ndarray, config: GbtConfig | None = None,
        eval_set: tuple[np.ndarray, np.ndarray] | None = None,
        base_margin: np.ndarray | None = None,
        eval_margin: np.ndarray | None = None) -> BoostedEnsemble:
    """Fit a boosted ensemble by squared error (g = pred - y, h = 1).

    ``base_margin`` optionally replaces the constant base score with a
    per-row starting prediction, so the trees model residuals around it.
    Early stopping watches MAE on ``eval_set`` and truncates the ensemble to
    the round with the lowest value.
    """
    cfg = config or GbtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need a non-empty (n, features) training matrix")
    if len(y) != len(X):
        raise ValueError("features and targets differ in length")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite training data")
    n, m = X.shape
    if base_margin is None:
        base = float(np.mean(y)) if cfg.base_score is None else float(cfg.base_score)
        start = np.full(n, base)
    else:
        base = 0.0
        start = np.asarray(base_margin, dtype=np.float64).copy()
    ens = BoostedEnsemble(base, cfg.learning_rate, m, uses_margin=base_margin is not None)
    pred = start.copy()
    if eval_set is not None:
        Xe = np.asarray(eval_set[0], dtype=np.float64)
        ye = np.asarray(eval_set[1], dtype=np.float64)
        pred_e = np.full(len(ye), base) if eval_margin is None else np.asarray(eval_margin, dtype=np.float64).copy()
    rng = make_rng(cfg.seed)
    n_rows = max(1, int(round(cfg.subsample * n)))
    n_cols = max(1, int(cfg.colsample_bytree * m))
    best_round, best_mae, since = 0, np.inf, 0
    for r in range(cfg.n_estimators):
        g = pred - y
        h = np.ones(n)
        rows = np.sort(rng.choice(n, n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(m, n_cols, replace=False)) if n_cols < m else np.arange(m)
        tree = build_tree(X[rows], g[rows], h[rows], cols.tolist(), cfg)
        ens.trees.append(tree)
        pred += cfg.learning_rate * tree.predict(X)
        ens.train_history.append(float(np.mean(np.abs(pred - y))))
        if eval_set is None:
            continue
        pred_e += cfg.learning_rate * tree.predict(Xe)
        mae = float(np.mean(np.abs(pred_e - ye)))
        ens.eval_history.append(mae)
        if cfg.verbosity >= 2 or (cfg.verbosity == 1 and r % 100 == 0):
            log.info("round %d eval-mae %.6g", r + 1, mae)
        if mae < best_mae:
            best_mae, best_round, since = mae, r + 1, 0
        else:
            since += 1
            if cfg.early_stopping_rounds is not None and since >= cfg.early_stopping_rounds:
                break
    if eval_set is not None and ens.trees:
        ens.trees = ens.trees[:best_round]
    ens.best_iteration = len(ens.trees)
    return ens


def params_dict(cfg: GbtConfig) -> dict:
    return asdict(cfg)
