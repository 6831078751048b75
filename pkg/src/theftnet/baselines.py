"""Random forest and gradient boosting over the handcrafted features.

Both are plain CART ensembles grown greedily. Split search is exhaustive over
midpoints between consecutive distinct values; ties go to the lowest feature
index, then the lowest threshold, so training is fully deterministic for a
given seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError
from .tensor import PROB_CLIP, bce_loss, sigmoid


@dataclass
class Tree:
    """Flat preorder tree. ``feature[i] == -1`` marks a leaf holding ``value[i]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def depth(self):
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X) -> np.ndarray:
        """Index of the leaf reached by every row."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


class _Builder:
    def __init__(self, X, max_depth, min_leaf, n_split_features, rng, leaf_value, criterion, targets):
        self.X = X
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.n_split_features = n_split_features
        self.rng = rng
        self.leaf_value = leaf_value
        self.criterion = criterion
        self.targets = targets
        self.nodes = []

    def build(self, idx) -> Tree:
        self._grow(idx, 0)
        f, t, lft, rgt, v = zip(*self.nodes)
        return Tree(np.array(f, np.int64), np.array(t, np.float64), np.array(lft, np.int64),
                    np.array(rgt, np.int64), np.array(v, np.float64))

    def _grow(self, idx, depth) -> int:
        me = len(self.nodes)
        self.nodes.append([-1, 0.0, -1, -1, self.leaf_value(idx)])
        if depth >= self.max_depth or len(idx) < 2 * self.min_leaf:
            return me
        split = self._best_split(idx)
        if split is None:
            return me
        feat, thr = split
        mask = self.X[idx, feat] <= thr
        node = self.nodes[me]
        node[0], node[1] = feat, thr
        node[2] = self._grow(idx[mask], depth + 1)
        node[3] = self._grow(idx[~mask], depth + 1)
        return me

    def _best_split(self, idx):
        n_feat = self.X.shape[1]
        if self.n_split_features and self.n_split_features < n_feat:
            feats = np.sort(self.rng.choice(n_feat, self.n_split_features, replace=False))
        else:
            feats = np.arange(n_feat)
        vals = self.X[np.ix_(idx, feats)]
        order = np.argsort(vals, axis=0, kind="stable")
        sv = np.take_along_axis(vals, order, axis=0)
        st = self.targets[idx][order]
        n = len(idx)
        left_n = np.arange(1, n)
        score = self.criterion.split(st)  # [n - 1, f]; lower is better
        valid = (sv[:-1] < sv[1:]) & ((left_n >= self.min_leaf) & (n - left_n >= self.min_leaf))[:, None]
        if not valid.any():
            return None
        score = np.where(valid, score, np.inf).T  # feature-major: argmin picks lowest feature, then lowest threshold
        flat = int(np.argmin(score))
        fi, pos = divmod(flat, n - 1)
        if score[fi, pos] >= self.criterion.node(self.targets[idx]) - 1e-12:
            return None
        lo, hi = sv[pos, fi], sv[pos + 1, fi]
        thr = (lo + hi) / 2
        if thr >= hi:
            thr = lo
        return int(feats[fi]), float(thr)


class Gini:
    """Size-weighted Gini impurity, ``n * 2p(1 - p)`` per child."""

    @staticmethod
    def node(y):
        n = len(y)
        p = y.sum() / n
        return 2 * n * p * (1 - p)

    @staticmethod
    def split(st):
        # st: [n, f] binary labels sorted by each candidate feature
        n = st.shape[0]
        c_left = np.cumsum(st, axis=0)[:-1]
        c_right = st.sum(axis=0) - c_left
        n_left = np.arange(1, n, dtype=np.float64)[:, None]
        n_right = n - n_left
        return 2 * (c_left * (n_left - c_left) / n_left + c_right * (n_right - c_right) / n_right)


class SquaredError:
    """Within-node SSE up to a constant: ``-S^2 / n`` summed over children."""

    @staticmethod
    def node(y):
        return -(y.sum() ** 2) / len(y)

    @staticmethod
    def split(st):
        n = st.shape[0]
        s_left = np.cumsum(st, axis=0)[:-1]
        s_right = st.sum(axis=0) - s_left
        n_left = np.arange(1, n, dtype=np.float64)[:, None]
        return -(s_left**2 / n_left + s_right**2 / (n - n_left))


# ---------------------------------------------------------------------------
# random forest


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 5
    max_features: int | None = None  # default ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    tree_seeds: list[int] = field(default_factory=list)

    @property
    def n_trees(self):
        return len(self.trees)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ConfigurationError("X must be [n, features] with one label per row")
    if not np.isin(y, (0, 1)).all():
        raise ConfigurationError("labels must be 0/1")
    return X, y.astype(np.float64)


def train_random_forest(X, y, cfg: ForestConfig | None = None) -> ForestModel:
    cfg = cfg or ForestConfig()
    X, y = _check_xy(X, y)
    if cfg.n_trees < 1:
        raise ConfigurationError("a forest needs at least one tree")
    n, d = X.shape
    m = cfg.max_features or math.ceil(math.sqrt(d))
    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.n_trees).tolist()

    def leaf(idx):
        return float(y[idx].mean())

    trees = []
    for s in seeds:
        rng = np.random.default_rng(s)
        idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        builder = _Builder(X, cfg.max_depth, cfg.min_leaf, m, rng, leaf, Gini, y)
        trees.append(builder.build(idx))
    return ForestModel(trees, d, seeds)


# ---------------------------------------------------------------------------
# gradient boosting


@dataclass
class GbmConfig:
    n_rounds: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    seed: int = 0


@dataclass
class GbmModel:
    initial_logit: float
    trees: list[Tree]
    learning_rate: float
    n_features: int

    def decision_function(self, X, n_trees: int | None = None) -> np.ndarray:
        z = np.full(len(X), self.initial_logit)
        for tree in self.trees[:n_trees]:
            z += self.learning_rate * tree.predict(X)
        return z

    def staged(self, n_trees: int) -> GbmModel:
        return GbmModel(self.initial_logit, self.trees[:n_trees], self.learning_rate, self.n_features)


def _prior_logit(y) -> float:
    p = min(max(float(np.mean(y)), PROB_CLIP), 1 - PROB_CLIP)
    return math.log(p / (1 - p))


def train_gbm(X, y, cfg: GbmConfig | None = None, history: list | None = None) -> GbmModel:
    """Boosted regression trees on the logistic-loss negative gradient ``y - p``.

    Split search uses squared error on the gradient; each leaf then takes the
    Newton step ``sum(y - p) / sum(p (1 - p))`` for its samples.
    """
    cfg = cfg or GbmConfig()
    X, y = _check_xy(X, y)
    if not 0 < cfg.learning_rate <= 1:
        raise ConfigurationError("learning_rate must lie in (0, 1]")
    n, d = X.shape
    model = GbmModel(_prior_logit(y), [], cfg.learning_rate, d)
    if y.min() == y.max():
        return model
    z = np.full(n, model.initial_logit)
    rng = np.random.default_rng(cfg.seed)
    all_idx = np.arange(n)
    for _ in range(cfg.n_rounds):
        p = sigmoid(z)
        resid = y - p
        hess = p * (1 - p)

        def leaf(idx, resid=resid, hess=hess):
            return float(resid[idx].sum() / max(hess[idx].sum(), 1e-12))

        tree = _Builder(X, cfg.max_depth, cfg.min_leaf, None, rng, leaf, SquaredError, resid).build(all_idx)
        model.trees.append(tree)
        z += cfg.learning_rate * tree.predict(X)
        if history is not None:
            history.append(bce_loss(sigmoid(z), y))
    return model


def predict_baseline(model: ForestModel | GbmModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ConfigurationError(f"expected [n, {model.n_features}] features, got {X.shape}")
    if isinstance(model, ForestModel):
        if not model.trees:
            raise ConfigurationError("empty forest")
        return np.mean([t.predict(X) for t in model.trees], axis=0)
    return sigmoid(model.decision_function(X))


# ---------------------------------------------------------------------------
# text format: header line, then one node per line in preorder


def _tree_lines(tree: Tree) -> list[str]:
    lines = [f"tree {tree.n_nodes}"]
    for i in range(tree.n_nodes):
        if tree.feature[i] < 0:
            lines.append(f"leaf {float(tree.value[i])!r}")
        else:
            lines.append(f"split {tree.feature[i]} {float(tree.threshold[i])!r} {tree.left[i]} {tree.right[i]} {float(tree.value[i])!r}")
    return lines


def baseline_to_text(model: ForestModel | GbmModel) -> str:
    if isinstance(model, ForestModel):
        lines = ["theftnet-forest 1", f"n_features {model.n_features}", f"n_trees {model.n_trees}"]
    else:
        lines = ["theftnet-gbm 1", f"n_features {model.n_features}", f"initial_logit {float(model.initial_logit)!r}",
                 f"learning_rate {float(model.learning_rate)!r}", f"n_trees {len(model.trees)}"]
    for t in model.trees:
        lines += _tree_lines(t)
    return "\n".join(lines) + "\n"


def baseline_from_text(text: str) -> ForestModel | GbmModel:
    lines = text.splitlines()
    try:
        kind, version = lines[0].split()
        if version != "1" or kind not in ("theftnet-forest", "theftnet-gbm"):
            raise ParseError(f"unsupported model header {lines[0]!r}", 1)
        n_head = 3 if kind == "theftnet-forest" else 5
        head = dict(line.split() for line in lines[1:n_head])
        pos = n_head
        trees = []
        for _ in range(int(head["n_trees"])):
            n_nodes = int(lines[pos].split()[1])
            pos += 1
            f, t, lft, rgt, val = [], [], [], [], []
            for line in lines[pos:pos + n_nodes]:
                parts = line.split()
                if parts[0] == "leaf":
                    f.append(-1), t.append(0.0), lft.append(-1), rgt.append(-1), val.append(float(parts[1]))
                else:
                    f.append(int(parts[1])), t.append(float(parts[2])), lft.append(int(parts[3]))
                    rgt.append(int(parts[4])), val.append(float(parts[5]))
            pos += n_nodes
            trees.append(Tree(np.array(f, np.int64), np.array(t), np.array(lft, np.int64),
                              np.array(rgt, np.int64), np.array(val)))
    except (IndexError, KeyError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"malformed baseline model: {e}") from None
    d = int(head["n_features"])
    if kind == "theftnet-forest":
        return ForestModel(trees, d)
    return GbmModel(float(head["initial_logit"]), trees, float(head["learning_rate"]), d)
