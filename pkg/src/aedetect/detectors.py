"""Final-stage classifiers over manifold features.

A linear max-margin classifier, a CART random forest (used for importances)
and an isolation forest for the one-class setting. All of them are plain
numpy; fitted models are immutable and serialise to JSON.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import read_csv, write_csv

FORMAT_VERSION = 1


class FitError(ValueError):
    pass


class ContractError(ValueError):
    pass


def _check_xy(features, labels=None):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ContractError(f"expected a non-empty (n, d) feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("features contain non-finite values")
    if labels is None:
        return x
    y = np.asarray(labels).astype(np.int64)
    if y.shape != (len(x),):
        raise ContractError(f"{len(y)} labels for {len(x)} samples")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0/1")
    return x, y


@dataclass(frozen=True)
class DetectionScore:
    kind: str
    values: np.ndarray  # higher = more adversarial


# ---------------------------------------------------------------- linear SVM

@dataclass
class LinearSVMModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    C: float
    epochs: int
    lr: float
    objective: float = float("nan")

    def to_dict(self) -> dict:
        return {"kind": "svm", "weights": self.weights.tolist(), "bias": self.bias, "mean": self.mean.tolist(),
                "std": self.std.tolist(), "C": self.C, "epochs": self.epochs, "lr": self.lr,
                "objective": self.objective}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSVMModel":
        return cls(np.array(d["weights"]), d["bias"], np.array(d["mean"]), np.array(d["std"]),
                   d["C"], d["epochs"], d["lr"], d.get("objective", float("nan")))


def _standardizer(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[~(std > 1e-12)] = 1.0
    return mean, std


def fit_linear_svm(features, labels, C: float = 1.0, epochs: int = 300, lr: float = 0.5,
                   seed: int = 0) -> LinearSVMModel:
    """Full-batch subgradient descent on mean hinge loss + (1/C)·‖w‖²/2.

    The objective uses the mean hinge, so duplicating the training set leaves
    it unchanged. Step size decays as min(lr, C)/sqrt(1+t); the cap keeps the
    shrinkage factor on w inside [0, 1). The best iterate by objective value
    is kept. ``seed`` only jitters the starting point.
    """
    x, y = _check_xy(features, labels)
    if len(np.unique(y)) < 2:
        raise FitError("linear SVM needs samples of both classes")
    if C <= 0:
        raise FitError("C must be positive")
    mean, std = _standardizer(x)
    xs = (x - mean) / std
    t = 2.0 * y - 1.0
    reg = 1.0 / C
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 1e-3, x.shape[1])
    b = 0.0
    best = (np.inf, w.copy(), b)
    for step in range(epochs + 1):
        margin = t * (xs @ w + b)
        active = margin < 1
        obj = float(np.mean(np.maximum(0.0, 1 - margin)) + 0.5 * reg * (w @ w))
        if obj < best[0]:
            best = (obj, w.copy(), b)
        if step == epochs:
            break
        gw = reg * w - (t[active, None] * xs[active]).sum(axis=0) / len(xs)
        gb = -t[active].sum() / len(xs)
        eta = min(lr, C) / math.sqrt(1.0 + step)
        w = w - eta * gw
        b = b - eta * gb
    obj, w, b = best
    return LinearSVMModel(w, float(b), mean, std, float(C), int(epochs), float(lr), obj)


def svm_score(model: LinearSVMModel, features) -> DetectionScore:
    x = _check_xy(features)
    if x.shape[1] != len(model.weights):
        raise ContractError(f"model expects {len(model.weights)} features, got {x.shape[1]}")
    return DetectionScore("svm", ((x - model.mean) / model.std) @ model.weights + model.bias)


def stratified_folds(labels, folds: int, seed: int) -> list[np.ndarray]:
    """Assign each sample to one of ``folds`` folds, balanced per class."""
    y = np.asarray(labels)
    counts = np.bincount(y, minlength=2)
    if folds < 2 or folds > counts.min():
        raise FitError(f"cannot build {folds} folds with class counts {counts.tolist()}")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(y), dtype=np.int64)
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == cls))
        assign[idx] = np.arange(len(idx)) % folds
    return [np.flatnonzero(assign == f) for f in range(folds)]


def grid_search_cv(features, labels, grid=(0.01, 0.1, 1.0, 10.0, 100.0), folds: int = 5, seed: int = 0,
                   epochs: int = 300, lr: float = 0.5) -> dict:
    """Pick C by mean held-out-fold AUROC; ties resolve to the smallest C."""
    from .evaluation import auroc

    x, y = _check_xy(features, labels)
    grid = sorted(float(c) for c in grid)
    if not grid:
        raise FitError("empty C grid")
    parts = stratified_folds(y, folds, seed)
    scores = {}
    for c in grid:
        fold_auc = []
        for k, held in enumerate(parts):
            train = np.setdiff1d(np.arange(len(y)), held)
            m = fit_linear_svm(x[train], y[train], C=c, epochs=epochs, lr=lr, seed=seed + k)
            fold_auc.append(auroc(svm_score(m, x[held]).values, y[held]))
        scores[c] = float(np.mean(fold_auc))
    top = max(scores.values())
    best = min(c for c in grid if scores[c] == top)
    return {"C": best, "cv_auroc": scores}


# ---------------------------------------------------------------- trees

@dataclass
class _Tree:
    """Flat array representation; feature == -1 marks a leaf."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # class-1 fraction (RF) or node size (iForest)

    def leaf_index(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        node = np.zeros(len(x), dtype=np.int64)
        depth = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node, depth
            r = rows[inner]
            go_left = x[r, f[inner]] < self.threshold[node[inner]]
            node[r] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])
            depth[r] += 1

    def to_nested(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"value": float(self.value[i])}
        return {"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                "value": float(self.value[i]),
                "left": self.to_nested(int(self.left[i])), "right": self.to_nested(int(self.right[i]))}

    @classmethod
    def from_nested(cls, root: dict) -> "_Tree":
        b = _Builder()

        def walk(node):
            if "feature" not in node:
                return b.leaf(node["value"])
            i = b.split(node["feature"], node["threshold"], node["value"])
            b.link(i, walk(node["left"]), walk(node["right"]))
            return i

        walk(root)
        return b.done()


class _Builder:
    def __init__(self):
        self.f, self.t, self.l, self.r, self.v = [], [], [], [], []

    def _add(self, f, t, v):
        self.f.append(f), self.t.append(t), self.l.append(-1), self.r.append(-1), self.v.append(v)
        return len(self.f) - 1

    def leaf(self, value):
        return self._add(-1, 0.0, value)

    def split(self, feature, threshold, value):
        return self._add(int(feature), float(threshold), value)

    def link(self, i, left, right):
        self.l[i], self.r[i] = left, right

    def done(self) -> _Tree:
        return _Tree(np.array(self.f, np.int64), np.array(self.t, np.float64), np.array(self.l, np.int64),
                     np.array(self.r, np.int64), np.array(self.v, np.float64))


# ---------------------------------------------------------------- random forest

@dataclass
class RandomForestModel:
    trees: list[_Tree]
    max_depth: int
    seed: int
    n_features: int
    importance_sums: np.ndarray  # raw Gini decrease per feature, weighted by node size

    def to_dict(self) -> dict:
        return {"kind": "random_forest", "max_depth": self.max_depth, "seed": self.seed,
                "n_features": self.n_features, "importance_sums": self.importance_sums.tolist(),
                "trees": [t.to_nested() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForestModel":
        return cls([_Tree.from_nested(t) for t in d["trees"]], d["max_depth"], d["seed"], d["n_features"],
                   np.array(d["importance_sums"]))


def _gini(pos, n):
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(x, y, features):
    """Best (gain·n, feature, threshold) over candidate features, or None."""
    n = len(y)
    total_pos = y.sum()
    parent = n * _gini(total_pos, n)
    best = None
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xv = x[order, f]
        cut = np.flatnonzero(xv[1:] > xv[:-1])  # split after position cut
        if len(cut) == 0:
            continue
        pos_left = np.cumsum(y[order])[cut]
        n_left = cut + 1.0
        n_right = n - n_left
        pos_right = total_pos - pos_left
        child = n_left * _gini(pos_left, n_left) + n_right * _gini(pos_right, n_right)
        j = int(np.argmin(child))
        gain = parent - child[j]
        if gain > 1e-12 and (best is None or gain > best[0]):
            best = (gain, f, 0.5 * (xv[cut[j]] + xv[cut[j] + 1]))
    return best


def _grow_cart(x, y, max_depth, mtry, rng, importances):
    b = _Builder()
    n_total = len(y)

    def grow(idx, depth):
        ys = y[idx]
        frac = float(ys.mean())
        if depth >= max_depth or frac in (0.0, 1.0) or len(idx) < 2:
            return b.leaf(frac)
        feats = rng.choice(x.shape[1], size=mtry, replace=False)
        split = _best_split(x[idx], ys, feats)
        if split is None:
            return b.leaf(frac)
        gain, f, thr = split
        importances[f] += gain / n_total
        node = b.split(f, thr, frac)
        mask = x[idx, f] < thr
        left = grow(idx[mask], depth + 1)
        right = grow(idx[~mask], depth + 1)
        b.link(node, left, right)
        return node

    grow(np.arange(len(y)), 0)
    return b.done()


def fit_random_forest(features, labels, trees: int = 100, max_depth: int = 12, seed: int = 0) -> RandomForestModel:
    """Bagged Gini CART trees with sqrt(d) candidate features per split."""
    x, y = _check_xy(features, labels)
    if trees < 1:
        raise FitError("trees must be >= 1")
    d = x.shape[1]
    mtry = max(1, int(math.isqrt(d)))
    importances = np.zeros(d)
    out = []
    for child in np.random.SeedSequence(seed).spawn(trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, len(y), len(y))
        out.append(_grow_cart(x[boot], y[boot], max_depth, mtry, rng, importances))
    return RandomForestModel(out, max_depth, seed, d, importances)


def rf_importances(model: RandomForestModel) -> np.ndarray:
    total = model.importance_sums.sum()
    if not total > 0:
        warnings.warn("forest contains no splits; reporting uniform importances", RuntimeWarning, stacklevel=2)
        return np.full(model.n_features, 1.0 / model.n_features)
    return model.importance_sums / total


def rf_score(model: RandomForestModel, features) -> DetectionScore:
    x = _check_xy(features)
    probs = np.zeros(len(x))
    for tree in model.trees:
        leaf, _ = tree.leaf_index(x)
        probs += tree.value[leaf]
    return DetectionScore("random_forest", probs / len(model.trees))


# ---------------------------------------------------------------- isolation forest

def harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1))) if n >= 1 else 0.0


def average_path_length(n: int) -> float:
    """c(n): mean unsuccessful-search path length in a BST of n nodes."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsolationForestModel:
    trees: list[_Tree]
    psi: int
    seed: int
    n_features: int
    c_psi: float = field(init=False)

    def __post_init__(self):
        self.c_psi = average_path_length(self.psi)

    def to_dict(self) -> dict:
        return {"kind": "isolation_forest", "psi": self.psi, "seed": self.seed, "n_features": self.n_features,
                "trees": [t.to_nested() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationForestModel":
        return cls([_Tree.from_nested(t) for t in d["trees"]], d["psi"], d["seed"], d["n_features"])


def _grow_itree(x, limit, rng):
    b = _Builder()

    def grow(sub, depth):
        if depth >= limit or len(sub) <= 1:
            return b.leaf(len(sub))
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        usable = np.flatnonzero(hi > lo)
        if len(usable) == 0:
            return b.leaf(len(sub))
        f = int(rng.choice(usable))
        thr = rng.uniform(lo[f], hi[f])
        if not thr > lo[f]:
            thr = np.nextafter(lo[f], hi[f])
        node = b.split(f, thr, len(sub))
        mask = sub[:, f] < thr
        left = grow(sub[mask], depth + 1)
        right = grow(sub[~mask], depth + 1)
        b.link(node, left, right)
        return node

    grow(x, 0)
    return b.done()


def fit_isolation_forest(features, trees: int = 100, psi: int = 256, seed: int = 0) -> IsolationForestModel:
    x = _check_xy(features)
    if len(x) < 2:
        raise FitError("isolation forest needs at least two training samples")
    if trees < 1:
        raise FitError("trees must be >= 1")
    if psi > len(x):
        warnings.warn(f"subsample size {psi} exceeds training size {len(x)}; clamping", RuntimeWarning,
                      stacklevel=2)
        psi = len(x)
    limit = int(math.ceil(math.log2(psi))) if psi > 1 else 1
    out = []
    for child in np.random.SeedSequence(seed).spawn(trees):
        rng = np.random.default_rng(child)
        sub = x[rng.choice(len(x), size=psi, replace=False)]
        out.append(_grow_itree(sub, limit, rng))
    return IsolationForestModel(out, psi, seed, x.shape[1])


def expected_path_length(model: IsolationForestModel, features) -> np.ndarray:
    x = _check_xy(features)
    total = np.zeros(len(x))
    cache = {}
    for tree in model.trees:
        leaf, depth = tree.leaf_index(x)
        sizes = tree.value[leaf].astype(np.int64)
        adj = np.array([cache.setdefault(s, average_path_length(s)) for s in sizes.tolist()])
        total += depth + adj
    return total / len(model.trees)


def path_score(mean_path, c_psi: float) -> np.ndarray:
    return np.power(2.0, -np.asarray(mean_path, dtype=np.float64) / c_psi)


def iso_score(model: IsolationForestModel, features) -> DetectionScore:
    return DetectionScore("isolation_forest", path_score(expected_path_length(model, features), model.c_psi))


# ---------------------------------------------------------------- persistence

_KINDS = {"svm": LinearSVMModel, "random_forest": RandomForestModel, "isolation_forest": IsolationForestModel}


def save_model(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"format_version": FORMAT_VERSION, **model.to_dict()}, sort_keys=True))


def load_model(path: str | Path):
    d = json.loads(Path(path).read_text())
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('format_version')}")
    return _KINDS[d["kind"]].from_dict(d)


def save_scores(path: str | Path, sample_ids, scores, labels) -> None:
    write_csv(path, ["sample_id", "score", "label"],
              ([int(i), float(s), int(l)] for i, s, l in zip(sample_ids, scores, labels)))


def load_scores(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    header, rows = read_csv(path)
    if header != ["sample_id", "score", "label"]:
        raise ValueError(f"{path}: not a score file")
    return (np.array([int(r[0]) for r in rows], dtype=np.int64), np.array([float(r[1]) for r in rows]),
            np.array([int(r[2]) for r in rows], dtype=np.int64))
