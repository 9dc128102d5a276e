"""CART random forests for regression/classification and the quantile
regression forest with stored training targets.

Determinism contract: tree ``i`` draws from its own generator seeded with
``seed + i``; split thresholds are midpoints between consecutive sorted
values; impurity-gain ties break toward the lower feature index, then the
lower threshold.  Quantile prediction uses the lower order statistic at
cumulative weight >= alpha with no interpolation, so a brute-force oracle
can match it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TERCILE_CLASSES = (-1, 0, 1)


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: str | int | None = None  # None: all (regression) / sqrt (classification)
    min_samples_split: int = 2
    bootstrap: bool = True
    seed: int = 0

    def resolve_max_features(self, p: int, task: str) -> int:
        mf = self.max_features
        if mf is None:
            mf = "all" if task == "regression" else "sqrt"
        if mf == "all":
            return p
        if mf == "sqrt":
            return max(1, int(math.isqrt(p)))
        m = int(mf)
        if m < 1:
            raise ForestError(f"max_features must be >= 1, got {m}")
        return min(m, p)


@dataclass
class Tree:
    """Flat-array binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray = field(repr=False)
    threshold: np.ndarray = field(repr=False)
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    value: np.ndarray = field(repr=False)              # leaf mean (regression)
    counts: np.ndarray | None = field(repr=False)      # (n_nodes, 3) class counts
    bootstrap_idx: np.ndarray = field(repr=False)
    # CSR layout of original-sample membership per leaf (stored for QRF)
    member_ptr: np.ndarray | None = field(repr=False, default=None)
    member_ids: np.ndarray | None = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by every row of X."""
        X = np.asarray(X, dtype=np.float64)
        cur = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[cur]
            active = feat >= 0
            if not active.any():
                return cur
            rows = np.flatnonzero(active)
            f = feat[rows]
            go_left = X[rows, f] <= self.threshold[cur[rows]]
            nxt = np.where(go_left, self.left[cur[rows]], self.right[cur[rows]])
            cur[rows] = nxt

    def leaf_members(self, node: int) -> np.ndarray:
        if self.member_ptr is None:
            raise ForestError("tree does not store per-leaf training samples")
        return self.member_ids[self.member_ptr[node]:self.member_ptr[node + 1]]


def _best_split(Xn: np.ndarray, yn: np.ndarray, feats: np.ndarray,
                task: str) -> tuple[int, float, float] | None:
    """Best (feature, threshold, gain) over candidate features, or None.

    ``feats`` must be in ascending original index so argmax tie-breaking
    lands on the lowest feature index, then the lowest threshold.
    """
    n = Xn.shape[0]
    sub = Xn[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    valid = xs[1:] > xs[:-1]                     # split allowed between distinct values
    if not valid.any():
        return None

    if task == "regression":
        ys = yn[order]                           # (n, m)
        s1 = np.cumsum(ys, axis=0)
        s2 = np.cumsum(ys * ys, axis=0)
        tot1 = s1[-1]
        tot2 = s2[-1]
        n_l = np.arange(1, n)[:, None].astype(np.float64)
        n_r = n - n_l
        sse_parent = tot2 - tot1 * tot1 / n
        sse_l = s2[:-1] - s1[:-1] ** 2 / n_l
        sse_r = (tot2 - s2[:-1]) - (tot1 - s1[:-1]) ** 2 / n_r
        gains = sse_parent - sse_l - sse_r
    else:
        onehot = np.zeros((n, 3))
        onehot[np.arange(n), yn.astype(np.int64)] = 1.0
        counts = np.cumsum(onehot[order], axis=0)  # (n, m, 3)
        tot = counts[-1]                         # (m, 3)
        n_l = np.arange(1, n)[:, None].astype(np.float64)
        n_r = n - n_l
        cl = counts[:-1]                         # (n-1, m, 3)
        cr = tot[None] - cl
        gini_l = 1.0 - ((cl / n_l[..., None]) ** 2).sum(axis=2)
        gini_r = 1.0 - ((cr / n_r[..., None]) ** 2).sum(axis=2)
        gini_parent = 1.0 - ((tot / n) ** 2).sum(axis=1)
        gains = gini_parent[None, :] - (n_l / n) * gini_l - (n_r / n) * gini_r

    gains = np.where(valid, gains, -np.inf)
    flat = np.argmax(gains.T.ravel())            # feature-major: lowest index wins ties
    f_idx, pos = divmod(flat, n - 1)
    gain = gains[pos, f_idx]
    if not gain > 0.0:
        return None
    threshold = 0.5 * (xs[pos, f_idx] + xs[pos + 1, f_idx])
    return int(feats[f_idx]), float(threshold), float(gain)


def _grow_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator,
               task: str) -> Tree:
    n, p = X.shape
    m = params.resolve_max_features(p, task)
    if params.bootstrap:
        rows0 = rng.integers(0, n, size=n)
    else:
        rows0 = np.arange(n)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    counts: list[np.ndarray] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        counts.append(np.zeros(3))
        return len(feature) - 1

    stack = [(new_node(), rows0)]
    while stack:
        node, rows = stack.pop()
        yn = y[rows]
        if task == "regression":
            value[node] = float(yn.mean())
        else:
            cnt = np.bincount(yn.astype(np.int64), minlength=3).astype(np.float64)
            counts[node] = cnt
            value[node] = float(np.argmax(cnt))
        pure = bool((yn == yn[0]).all())
        if rows.size < params.min_samples_split or pure:
            continue
        if m == p:
            feats = np.arange(p)
        else:
            feats = np.sort(rng.choice(p, size=m, replace=False))
        split = _best_split(X[rows], yn, feats, task)
        if split is None:
            continue
        f, thr, _ = split
        go_left = X[rows, f] <= thr
        feature[node] = f
        threshold[node] = thr
        l_id = new_node()
        r_id = new_node()
        left[node] = l_id
        right[node] = r_id
        stack.append((r_id, rows[~go_left]))
        stack.append((l_id, rows[go_left]))

    return Tree(feature=np.asarray(feature, dtype=np.int64),
                threshold=np.asarray(threshold),
                left=np.asarray(left, dtype=np.int64),
                right=np.asarray(right, dtype=np.int64),
                value=np.asarray(value),
                counts=np.stack(counts) if task == "classification" else None,
                bootstrap_idx=rows0)


@dataclass
class Forest:
    trees: list[Tree]
    params: ForestParams
    task: str
    n_features: int
    stored_targets: np.ndarray | None = field(repr=False, default=None)
    catalog_hash: str | None = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _check_X(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ForestError(
                f"query has {X.shape[1]} features, forest was grown on "
                f"{self.n_features}")
        return X


def rf_fit(X: np.ndarray, y: np.ndarray, params: ForestParams = ForestParams(),
           task: str = "regression", store_samples: bool = False,
           catalog_hash: str | None = None) -> Forest:
    """Grow a forest; ``store_samples=True`` routes every training sample to
    its leaf in each tree and keeps the ids (quantile prediction needs them).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ForestError(f"bad design shapes X={X.shape}, y={y.shape}")
    if X.shape[0] < 2:
        raise ForestError("need at least two training rows")
    if params.n_trees < 1:
        raise ForestError("n_trees must be >= 1")
    if task not in ("regression", "classification"):
        raise ForestError(f"unknown task {task!r}")

    y_grow = y
    if task == "classification":
        class_to_idx = {c: i for i, c in enumerate(TERCILE_CLASSES)}
        unknown = set(np.unique(y)) - set(float(c) for c in TERCILE_CLASSES)
        if unknown:
            raise ForestError(f"labels outside {TERCILE_CLASSES}: {sorted(unknown)}")
        y_grow = np.asarray([class_to_idx[int(v)] for v in y], dtype=np.float64)

    trees = []
    for i in range(params.n_trees):
        rng = np.random.default_rng(params.seed + i)
        tree = _grow_tree(X, y_grow, params, rng, task)
        if store_samples:
            leaf_of = tree.apply(X)
            order = np.argsort(leaf_of, kind="stable")
            ptr = np.zeros(tree.n_nodes + 1, dtype=np.int64)
            np.add.at(ptr, leaf_of + 1, 1)
            tree.member_ptr = np.cumsum(ptr)
            tree.member_ids = order
        trees.append(tree)
    return Forest(trees=trees, params=params, task=task, n_features=X.shape[1],
                  stored_targets=y.copy() if store_samples else None,
                  catalog_hash=catalog_hash)


def rf_predict(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Mean of tree predictions (regression) or mean leaf class frequencies."""
    X = forest._check_X(X)
    if forest.task == "regression":
        out = np.zeros(X.shape[0])
        for tree in forest.trees:
            out += tree.value[tree.apply(X)]
        return out / forest.n_trees
    proba = rf_predict_proba(forest, X)
    return np.asarray(TERCILE_CLASSES)[np.argmax(proba, axis=1)]


def rf_predict_proba(forest: Forest, X: np.ndarray) -> np.ndarray:
    if forest.task != "classification":
        raise ForestError("probabilities are only defined for classification forests")
    X = forest._check_X(X)
    proba = np.zeros((X.shape[0], 3))
    for tree in forest.trees:
        cnt = tree.counts[tree.apply(X)]
        proba += cnt / cnt.sum(axis=1, keepdims=True)
    return proba / forest.n_trees


def qrf_predict(forest: Forest, X: np.ndarray, alpha: float) -> np.ndarray:
    """Weighted empirical quantile over stored training targets.

    weight(i) = (1/n_trees) * sum over trees of 1[i in leaf(x)] / |leaf(x)|;
    the returned value is the smallest stored target whose cumulative
    weight (ascending target order) reaches alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ForestError(f"quantile level must be in (0, 1), got {alpha}")
    if forest.stored_targets is None:
        raise ForestError("forest was grown without stored training samples")
    X = forest._check_X(X)
    y = forest.stored_targets
    n = y.size
    order = np.argsort(y, kind="stable")
    y_sorted = y[order]

    out = np.empty(X.shape[0])
    leaf_per_tree = [tree.apply(X) for tree in forest.trees]
    for r in range(X.shape[0]):
        w = np.zeros(n)
        for tree, leaves in zip(forest.trees, leaf_per_tree):
            members = tree.leaf_members(int(leaves[r]))
            w[members] += 1.0 / (members.size * forest.n_trees)
        cw = np.cumsum(w[order])
        k = int(np.searchsorted(cw, alpha, side="left"))
        out[r] = y_sorted[min(k, n - 1)]
    return out


def per_location_qrf_fit(features, positions: np.ndarray,
                         params: ForestParams = ForestParams()) -> tuple[dict[int, Forest], dict[int, str]]:
    """One stored-sample forest per land location; failures reported per id.

    Every location uses the same seed, so identical location data yields
    identical forests.
    """
    models: dict[int, Forest] = {}
    failures: dict[int, str] = {}
    chash = features.catalog.sha256()
    for idx in range(features.n_land):
        X, y = features.location_rows(idx, positions)
        try:
            models[idx] = rf_fit(X, y, params=params, task="regression",
                                 store_samples=True, catalog_hash=chash)
        except ForestError as exc:
            failures[idx] = str(exc)
    if not models and failures:
        raise ForestError(f"every location failed: "
                          f"{dict(list(failures.items())[:3])}")
    return models, failures


# ---------------------------------------------------------------------------
# serialization

def forest_to_arrays(forest: Forest) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {
        "meta_task": np.array([forest.task]),
        "meta_n_features": np.array([forest.n_features]),
        "meta_n_trees": np.array([forest.n_trees]),
        "meta_params": np.array([str(forest.params.n_trees),
                                 str(forest.params.max_features),
                                 str(forest.params.min_samples_split),
                                 str(int(forest.params.bootstrap)),
                                 str(forest.params.seed)]),
    }
    if forest.stored_targets is not None:
        out["stored_targets"] = forest.stored_targets
    if forest.catalog_hash:
        out["meta_catalog_hash"] = np.array([forest.catalog_hash])
    for i, tree in enumerate(forest.trees):
        out[f"t{i}_feature"] = tree.feature
        out[f"t{i}_threshold"] = tree.threshold
        out[f"t{i}_left"] = tree.left
        out[f"t{i}_right"] = tree.right
        out[f"t{i}_value"] = tree.value
        out[f"t{i}_bootstrap"] = tree.bootstrap_idx
        if tree.counts is not None:
            out[f"t{i}_counts"] = tree.counts
        if tree.member_ptr is not None:
            out[f"t{i}_member_ptr"] = tree.member_ptr
            out[f"t{i}_member_ids"] = tree.member_ids
    return out


def forest_from_arrays(data) -> Forest:
    task = str(data["meta_task"][0])
    pm = data["meta_params"]
    mf = str(pm[1])
    max_features = None if mf == "None" else (mf if mf in ("all", "sqrt") else int(mf))
    params = ForestParams(n_trees=int(pm[0]), max_features=max_features,
                          min_samples_split=int(pm[2]), bootstrap=bool(int(pm[3])),
                          seed=int(pm[4]))
    trees = []
    for i in range(int(data["meta_n_trees"][0])):
        trees.append(Tree(
            feature=np.asarray(data[f"t{i}_feature"]),
            threshold=np.asarray(data[f"t{i}_threshold"]),
            left=np.asarray(data[f"t{i}_left"]),
            right=np.asarray(data[f"t{i}_right"]),
            value=np.asarray(data[f"t{i}_value"]),
            counts=np.asarray(data[f"t{i}_counts"]) if f"t{i}_counts" in data else None,
            bootstrap_idx=np.asarray(data[f"t{i}_bootstrap"]),
            member_ptr=np.asarray(data[f"t{i}_member_ptr"]) if f"t{i}_member_ptr" in data else None,
            member_ids=np.asarray(data[f"t{i}_member_ids"]) if f"t{i}_member_ids" in data else None,
        ))
    chash = str(data["meta_catalog_hash"][0]) if "meta_catalog_hash" in data else None
    stored = np.asarray(data["stored_targets"]) if "stored_targets" in data else None
    return Forest(trees=trees, params=params, task=task,
                  n_features=int(data["meta_n_features"][0]),
                  stored_targets=stored, catalog_hash=chash)
