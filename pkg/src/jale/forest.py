"""Random-forest regression: CART trees on bootstrap resamples.

Split rule: a sample goes left iff ``x[feature] < threshold``. Thresholds are
midpoints between consecutive distinct sorted values. The best split maximises
variance reduction over all features; ties keep the lower feature index, then
the lower threshold. Each tree draws its bootstrap from an RNG seeded with
``(seed, tree_index)`` so sequential and threaded training agree bit for bit.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numba
import numpy as np

from .core import JaleError

MODEL_VERSION = "jale-model/1"
SPEED_FEATURES = ("E_Y", "h", "L_Y", "r", "b")


class ModelError(JaleError):
    pass


class ModelVersionError(ModelError):
    pass


class CorruptModelError(ModelError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int = 100
    max_depth: int = 14
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    bootstrap: bool = True  # False is a test hook: every tree sees the full set

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 0:
            raise ValueError("n_estimators >= 1 and max_depth >= 0 required")
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise ValueError("min_samples_split >= 2 and min_samples_leaf >= 1 required")

    @classmethod
    def from_mapping(cls, m: Mapping | None) -> "ForestParams":
        m = dict(m or {})
        known = {k: m[k] for k in ("n_estimators", "max_depth", "min_samples_split", "min_samples_leaf", "bootstrap") if k in m}
        return cls(**known)

    def to_dict(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "min_samples_split": self.min_samples_split,
            "min_samples_leaf": self.min_samples_leaf,
            "bootstrap": self.bootstrap,
        }


@dataclass(frozen=True)
class ModelScope:
    """Which model this is: ``speed`` for one (threads, preset) or ``quality`` for one preset."""

    kind: str
    preset: int
    threads: int | None = None

    def __post_init__(self):
        if self.kind not in ("speed", "quality"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if (self.kind == "speed") != (self.threads is not None):
            raise ValueError("speed models need threads; quality models must not have them")

    @property
    def filename(self) -> str:
        if self.kind == "speed":
            return f"speed_n{self.threads}_p{self.preset}.json"
        return f"quality_p{self.preset}.json"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "threads": self.threads, "preset": self.preset}


@dataclass
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    target_name: str = "target"

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise ValueError(f"shape mismatch: X{self.X.shape}, y{self.y.shape}")
        if self.X.shape[1] != len(self.feature_names):
            raise ValueError("feature_names does not match X width")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("training data contains non-finite values")
        self.feature_names = tuple(self.feature_names)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[Sequence[float], float]], feature_names, target_name="target"):
        if not rows:
            return cls(np.empty((0, len(feature_names))), np.empty(0), tuple(feature_names), target_name)
        X = np.array([r[0] for r in rows], dtype=np.float64)
        return cls(X, np.array([r[1] for r in rows], dtype=np.float64), tuple(feature_names), target_name)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.X[idx], self.y[idx], self.feature_names, self.target_name)


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Tree":
        t = cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
            np.asarray(d["n_samples"], dtype=np.int64),
        )
        n = t.node_count
        if n == 0 or any(len(a) != n for a in (t.threshold, t.left, t.right, t.value, t.n_samples)):
            raise CorruptModelError("tree arrays disagree in length")
        inner = t.feature >= 0
        if np.any(inner & ((t.left < 0) | (t.left >= n) | (t.right < 0) | (t.right >= n))):
            raise CorruptModelError("child index out of range")
        return t

    def equals(self, other: "Tree") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("feature", "threshold", "left", "right", "value", "n_samples")
        )


@dataclass
class ForestModel:
    trees: list[Tree]
    params: ForestParams
    seed: int
    feature_names: tuple[str, ...]
    target_name: str
    scope: ModelScope | None = None
    target_range: tuple[float, float] = (0.0, 0.0)
    oob_score: float | None = field(default=None, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


# -- tree construction -------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _best_split(X, y, idx, start, end, min_leaf):
    n = end - start
    n_feat = X.shape[1]
    total = 0.0
    for k in range(start, end):
        total += y[idx[k]]
    parent = total * total / n
    best_gain = 0.0
    best_f = -1
    best_thr = 0.0
    xs = np.empty(n)
    ys = np.empty(n)
    for f in range(n_feat):
        for k in range(n):
            xs[k] = X[idx[start + k], f]
        order = np.argsort(xs, kind="mergesort")
        for k in range(n):
            ys[k] = y[idx[start + order[k]]]
        left_sum = 0.0
        for k in range(n - 1):
            left_sum += ys[k]
            lo = xs[order[k]]
            hi = xs[order[k + 1]]
            n_left = k + 1
            n_right = n - n_left
            if not lo < hi or n_left < min_leaf or n_right < min_leaf:
                continue
            right_sum = total - left_sum
            gain = left_sum * left_sum / n_left + right_sum * right_sum / n_right - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                thr = 0.5 * (lo + hi)
                if not thr > lo:  # adjacent floats: midpoint rounds onto lo
                    thr = hi
                best_thr = thr
    return best_f, best_thr


@numba.njit(cache=True, nogil=True)
def _grow(X, y, sample_idx, max_depth, min_split, min_leaf):
    n = sample_idx.shape[0]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)
    idx = sample_idx.copy()
    buf = np.empty(n, dtype=np.int64)

    # explicit stack of (node, start, end, depth); nodes numbered in creation order
    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        m = end - start
        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for k in range(start, end):
            v = y[idx[k]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = s / m
        count[node] = m
        if depth >= max_depth or m < min_split or m < 2 * min_leaf or ymin == ymax:
            continue
        f, thr = _best_split(X, y, idx, start, end, min_leaf)
        if f < 0:
            continue
        # stable partition: left block first
        nl = 0
        for k in range(start, end):
            if X[idx[k], f] < thr:
                buf[nl] = idx[k]
                nl += 1
        nr = nl
        for k in range(start, end):
            if not X[idx[k], f] < thr:
                buf[nr] = idx[k]
                nr += 1
        for k in range(m):
            idx[start + k] = buf[k]
        feature[node] = f
        threshold[node] = thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # push right first so the left subtree is expanded first
        st_node[top] = rc
        st_start[top] = start + nl
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = start + nl
        st_depth[top] = depth + 1
        top += 1
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
    )


@numba.njit(cache=True, nogil=True)
def _predict_tree(feature, threshold, left, right, value, X, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]


def bootstrap_indices(n_rows: int, seed: int, tree_index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, tree_index])
    return rng.integers(0, n_rows, size=n_rows, dtype=np.int64)


def _fit_tree(data: TrainingSet, params: ForestParams, seed: int, t: int) -> Tree:
    n = len(data)
    idx = bootstrap_indices(n, seed, t) if params.bootstrap else np.arange(n, dtype=np.int64)
    arrays = _grow(data.X, data.y, idx, params.max_depth, params.min_samples_split, params.min_samples_leaf)
    return Tree(*arrays)


def train_forest(
    data: TrainingSet,
    params: ForestParams | None = None,
    seed: int = 0,
    scope: ModelScope | None = None,
    n_jobs: int = 1,
    oob: bool = False,
) -> ForestModel:
    params = params or ForestParams()
    if len(data) < params.min_samples_split:
        raise ModelError(f"need at least {params.min_samples_split} rows, got {len(data)}")
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(lambda t: _fit_tree(data, params, seed, t), range(params.n_estimators)))
    else:
        trees = [_fit_tree(data, params, seed, t) for t in range(params.n_estimators)]
    model = ForestModel(
        trees=trees,
        params=params,
        seed=seed,
        feature_names=data.feature_names,
        target_name=data.target_name,
        scope=scope,
        target_range=(float(data.y.min()), float(data.y.max())),
    )
    if oob:
        model.oob_score = oob_r2(model, data)
    return model


def _as_matrix(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ModelError(f"expected {model.n_features} features, got shape {X.shape}")
    return np.ascontiguousarray(X)


def _per_tree(model: ForestModel, X: np.ndarray) -> np.ndarray:
    out = np.empty((len(model.trees), X.shape[0]))
    for t, tree in enumerate(model.trees):
        _predict_tree(tree.feature, tree.threshold, tree.left, tree.right, tree.value, X, out[t])
    return out


def predict_many(model: ForestModel, X) -> np.ndarray:
    X = _as_matrix(model, X)
    pred = _per_tree(model, X).sum(axis=0) / len(model.trees)
    # averaging can overshoot the training range by an ulp
    pred = np.clip(pred, *model.target_range)
    if model.scope is not None and model.scope.kind == "quality":
        pred = np.clip(pred, 0.0, 100.0)
    return pred


def predict(model: ForestModel, features) -> float:
    return float(predict_many(model, features)[0])


def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    resid = float(np.sum((y_true - y_pred) ** 2))
    total = float(np.sum((y_true - y_true.mean()) ** 2))
    return 1.0 - resid / total if total > 0 else (1.0 if resid == 0 else 0.0)


def oob_predictions(model: ForestModel, data: TrainingSet) -> np.ndarray:
    """Out-of-bag predictions; NaN for rows every tree saw. Needs the training set."""
    n = len(data)
    if not model.params.bootstrap:
        return np.full(n, np.nan)
    per_tree = _per_tree(model, _as_matrix(model, data.X))
    acc = np.zeros(n)
    hits = np.zeros(n, dtype=np.int64)
    for t in range(len(model.trees)):
        mask = np.ones(n, dtype=bool)
        mask[bootstrap_indices(n, model.seed, t)] = False
        acc[mask] += per_tree[t, mask]
        hits[mask] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(hits > 0, acc / hits, np.nan)


def oob_r2(model: ForestModel, data: TrainingSet) -> float:
    pred = oob_predictions(model, data)
    ok = np.isfinite(pred)
    return r2_score(data.y[ok], pred[ok])


def kfold_split(n_rows: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffled folds; sizes differ by at most one, larger folds first."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n_rows:
        raise ValueError(f"k={k} exceeds n_rows={n_rows}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    return [np.sort(f) for f in np.array_split(perm, k)]


def cross_validate(
    data: TrainingSet,
    k: int = 5,
    params: ForestParams | None = None,
    seed: int = 0,
    groups: Sequence | None = None,
) -> list[dict]:
    """k-fold CV; with ``groups`` whole groups (e.g. segments) go to one fold."""
    if groups is None:
        folds = kfold_split(len(data), k, seed)
    else:
        labels, inverse = np.unique(np.asarray(groups), return_inverse=True, axis=0)
        gfolds = kfold_split(len(labels), k, seed)
        folds = [np.flatnonzero(np.isin(inverse, g)) for g in gfolds]
    scores = []
    for i, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(data)), test)
        model = train_forest(data.subset(train), params, seed=seed + i)
        pred = predict_many(model, data.X[test])
        y = data.y[test]
        scores.append(
            {
                "fold": i,
                "n_test": int(len(test)),
                "r2": r2_score(y, pred),
                "mae": float(np.mean(np.abs(y - pred))),
                "mape": float(np.mean(np.abs(y - pred) / np.maximum(np.abs(y), 1e-12))),
            }
        )
    return scores


# -- persistence -------------------------------------------------------------


def model_to_dict(model: ForestModel) -> dict:
    return {
        "format": MODEL_VERSION,
        "scope": model.scope.to_dict() if model.scope else None,
        "feature_names": list(model.feature_names),
        "target_name": model.target_name,
        "hyperparameters": model.params.to_dict(),
        "seed": model.seed,
        "target_range": list(model.target_range),
        "oob_score": model.oob_score,
        "trees": [t.to_dict() for t in model.trees],
    }


def save_model(model: ForestModel, path: str | Path | None = None) -> str:
    doc = json.dumps(model_to_dict(model), separators=(",", ":"))
    if path is not None:
        Path(path).write_text(doc, encoding="utf-8")
    return doc


def load_model(source: str | Path) -> ForestModel:
    """Parse a model document (JSON text, or a path to one)."""
    text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) else source
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptModelError(f"model document does not parse: {exc}") from None
    if not isinstance(d, dict):
        raise CorruptModelError("model document is not an object")
    if d.get("format") != MODEL_VERSION:
        raise ModelVersionError(f"expected {MODEL_VERSION!r}, got {d.get('format')!r}")
    try:
        sc = d["scope"]
        scope = ModelScope(sc["kind"], int(sc["preset"]), None if sc["threads"] is None else int(sc["threads"])) if sc else None
        trees = [Tree.from_dict(t) for t in d["trees"]]
        model = ForestModel(
            trees=trees,
            params=ForestParams(**d["hyperparameters"]),
            seed=int(d["seed"]),
            feature_names=tuple(d["feature_names"]),
            target_name=str(d["target_name"]),
            scope=scope,
            target_range=tuple(float(v) for v in d["target_range"]),
            oob_score=d.get("oob_score"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModelError(f"malformed model document: {exc!r}") from None
    if not trees:
        raise CorruptModelError("model has no trees")
    if any(np.any(t.feature >= model.n_features) for t in trees):
        raise CorruptModelError("split feature index out of range")
    return model


def forests_identical(a: ForestModel, b: ForestModel) -> bool:
    return len(a.trees) == len(b.trees) and all(x.equals(y) for x, y in zip(a.trees, b.trees))

