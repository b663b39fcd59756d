"""Cost-sensitive classification trees.

An example-dependent cost matrix (one row of misclassification costs per
subject) is turned into an ordinary weighted classification problem by
data-space expansion: every subject is replicated once per label ``l`` with
weight ``max_s C_s - C_l``.  A CART tree grown on the expanded rows with
weighted Gini impurity then gives an interpretable treatment rule.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateFitWarning, InvalidArgumentError


@dataclass(frozen=True)
class CostMatrix:
    features: np.ndarray
    costs: np.ndarray
    best_labels: np.ndarray
    treatments: tuple[int, ...]
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        C = np.asarray(self.costs, dtype=float)
        best = np.asarray(self.best_labels).astype(int)
        treatments = tuple(int(a) for a in self.treatments)
        if X.ndim != 2 or C.ndim != 2 or C.shape[0] != X.shape[0] or best.shape != (X.shape[0],):
            raise InvalidArgumentError("cost matrix parts have inconsistent shapes")
        if C.shape[1] != len(treatments):
            raise InvalidArgumentError("one cost column per treatment is required")
        if np.any(C < 0) or not np.all(np.isfinite(C)):
            raise InvalidArgumentError("costs must be finite and non-negative")
        col = {a: j for j, a in enumerate(treatments)}
        if not all(b in col for b in best):
            raise InvalidArgumentError("best label outside the treatment set")
        cols = np.array([col[b] for b in best], dtype=int)
        if X.shape[0] and np.any(C[np.arange(len(best)), cols] != 0):
            raise InvalidArgumentError("cost at the best label must be exactly zero")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise InvalidArgumentError("feature_names length does not match features")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "costs", C)
        object.__setattr__(self, "best_labels", best)
        object.__setattr__(self, "treatments", treatments)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ExpandedDataset:
    """Rows ``(features, label, weight)``; row ``i*m + j`` is subject i, label j."""

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    treatments: tuple[int, ...]
    feature_names: tuple[str, ...]

    def __len__(self):
        return self.labels.shape[0]


def expand_dataset(cm: CostMatrix) -> ExpandedDataset:
    if np.any(cm.costs < 0):
        raise InvalidArgumentError("negative cost")
    m = len(cm.treatments)
    U = cm.costs.max(axis=1, keepdims=True) - cm.costs
    features = np.repeat(cm.features, m, axis=0)
    labels = np.tile(np.asarray(cm.treatments), cm.n)
    return ExpandedDataset(features, labels, U.reshape(-1), cm.treatments, cm.feature_names)


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 4
    min_leaf_weight: float = 0.02
    min_gain: float = 1e-6
    max_exhaustive_categories: int = 8
    cp: float = 0.01

    def __post_init__(self):
        if self.max_depth < 0:
            raise InvalidArgumentError("max_depth must be >= 0")
        if not 0 <= self.min_leaf_weight < 0.5:
            raise InvalidArgumentError("min_leaf_weight is a fraction of total weight in [0, 0.5)")
        if self.min_gain < 0:
            raise InvalidArgumentError("min_gain must be >= 0")
        if self.cp < 0:
            raise InvalidArgumentError("cp must be >= 0")

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_leaf_weight": self.min_leaf_weight,
            "min_gain": self.min_gain,
            "max_exhaustive_categories": self.max_exhaustive_categories,
            "cp": self.cp,
        }


@dataclass
class TreeNode:
    """A node; leaves have ``feature is None``.

    Numeric splits send ``x <= threshold`` left.  Categorical splits send
    members of ``categories`` left and unseen categories to the heavier
    child (``unseen_left``).
    """

    label: int
    class_weights: tuple[float, ...]
    fraction: float
    feature: int | None = None
    threshold: float | None = None
    categories: tuple[float, ...] | None = None
    unseen_left: bool = True
    seen: tuple[float, ...] | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def goes_left(self, value: float) -> bool:
        if self.categories is None:
            return value <= self.threshold
        if value in self.categories:
            return True
        if self.seen is not None and value in self.seen:
            return False
        return self.unseen_left


@dataclass
class RegimeTree:
    root: TreeNode
    treatments: tuple[int, ...]
    feature_names: tuple[str, ...]
    categorical: tuple[int, ...] = ()
    stage: int = 0
    degenerate: bool = False
    params: TreeParams = field(default_factory=TreeParams)

    # -- prediction ------------------------------------------------------

    def predict_one(self, x) -> int:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != len(self.feature_names):
            raise InvalidArgumentError(
                f"expected {len(self.feature_names)} features, got {x.shape[0]}"
            )
        node = self.root
        while not node.is_leaf:
            node = node.left if node.goes_left(x[node.feature]) else node.right
        return node.label

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise InvalidArgumentError(
                f"expected an (n, {len(self.feature_names)}) feature matrix, got {X.shape}"
            )
        out = np.empty(X.shape[0], dtype=int)
        self._route(self.root, X, np.arange(X.shape[0]), out)
        return out

    def _route(self, node, X, idx, out):
        if node.is_leaf:
            out[idx] = node.label
            return
        values = X[idx, node.feature]
        if node.categories is None:
            left = values <= node.threshold
        else:
            left = np.array([node.goes_left(v) for v in values], dtype=bool)
        self._route(node.left, X, idx[left], out)
        self._route(node.right, X, idx[~left], out)

    def predict_history(self, history: Mapping[str, object]) -> np.ndarray:
        missing = [f for f in self.feature_names if f not in history]
        if missing:
            raise InvalidArgumentError(f"history lacks feature(s) {missing}")
        X = np.column_stack([np.asarray(history[f], dtype=float).reshape(-1) for f in self.feature_names])
        return self.predict(X)

    # -- structure -------------------------------------------------------

    def nodes(self):
        stack = [(self.root, 0)]
        while stack:
            node, depth = stack.pop()
            yield node, depth
            if not node.is_leaf:
                stack.append((node.right, depth + 1))
                stack.append((node.left, depth + 1))

    @property
    def depth(self) -> int:
        return max(d for _, d in self.nodes())

    @property
    def n_leaves(self) -> int:
        return sum(1 for node, _ in self.nodes() if node.is_leaf)

    def leaf_labels(self) -> set[int]:
        return {node.label for node, _ in self.nodes() if node.is_leaf}

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "treatments": list(self.treatments),
            "feature_names": list(self.feature_names),
            "categorical": list(self.categorical),
            "degenerate": self.degenerate,
            "params": self.params.to_dict(),
            "root": _node_to_dict(self.root, self.feature_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegimeTree":
        names = tuple(d["feature_names"])
        return cls(
            _node_from_dict(d["root"], names),
            tuple(int(a) for a in d["treatments"]),
            names,
            tuple(int(j) for j in d.get("categorical", ())),
            int(d.get("stage", 0)),
            bool(d.get("degenerate", False)),
            TreeParams(**d["params"]) if "params" in d else TreeParams(),
        )

    def to_text(self, category_names: Mapping[str, Mapping[float, str]] | None = None) -> str:
        """Indented rendering, one node per line: condition, label, class shares, training share.

        ``category_names`` optionally maps a feature to ``{code: name}`` for
        categorical splits.
        """
        lines = []
        self._text(self.root, 0, "root", lines, category_names)
        return "\n".join(lines)

    def _text(self, node, depth, condition, lines, category_names):
        lines.append(f"{'  ' * depth}{condition}: {_describe(node)}")
        if not node.is_leaf:
            left_cond, right_cond = _conditions(node, self.feature_names, category_names)
            self._text(node.left, depth + 1, left_cond, lines, category_names)
            self._text(node.right, depth + 1, right_cond, lines, category_names)

    def to_dot(self, category_names: Mapping[str, Mapping[float, str]] | None = None) -> str:
        lines = ["digraph regime {", "  node [shape=box];"]
        counter = itertools.count()

        def visit(node):
            nid = next(counter)
            label = _describe(node, sep="\\n").replace('"', '\\"')
            lines.append(f'  n{nid} [label="{label}"];')
            if not node.is_leaf:
                left_cond, right_cond = _conditions(node, self.feature_names, category_names)
                lid = visit(node.left)
                lines.append(f'  n{nid} -> n{lid} [label="{_dot_escape(left_cond)}"];')
                rid = visit(node.right)
                lines.append(f'  n{nid} -> n{rid} [label="{_dot_escape(right_cond)}"];')
            return nid

        visit(self.root)
        lines.append("}")
        return "\n".join(lines)


def _dot_escape(s: str) -> str:
    return s.replace('"', '\\"')


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _describe(node: TreeNode, sep: str = " | ") -> str:
    total = sum(node.class_weights)
    shares = [w / total if total > 0 else 0.0 for w in node.class_weights]
    share_txt = "(" + ", ".join(f"{s:.2f}" for s in shares) + ")"
    return sep.join([f"treatment {node.label}", share_txt, f"{100 * node.fraction:.1f}%"])


def _conditions(node: TreeNode, names, category_names=None) -> tuple[str, str]:
    name = names[node.feature]
    if node.categories is None:
        t = _fmt(node.threshold)
        return f"{name} <= {t}", f"{name} > {t}"
    lookup = (category_names or {}).get(name, {})
    cats = ", ".join(str(lookup.get(c, _fmt(c))) for c in node.categories)
    return f"{name} in {{{cats}}}", f"{name} not in {{{cats}}}"


def _node_to_dict(node: TreeNode, names) -> dict:
    d = {
        "label": node.label,
        "class_weights": list(node.class_weights),
        "fraction": node.fraction,
    }
    if node.is_leaf:
        return d
    split = {"feature": names[node.feature], "index": node.feature}
    if node.categories is None:
        split["threshold"] = node.threshold
    else:
        split["categories"] = list(node.categories)
        split["seen"] = list(node.seen or ())
        split["unseen_left"] = node.unseen_left
    d["split"] = split
    d["left"] = _node_to_dict(node.left, names)
    d["right"] = _node_to_dict(node.right, names)
    return d


def _node_from_dict(d: Mapping, names) -> TreeNode:
    node = TreeNode(int(d["label"]), tuple(float(w) for w in d["class_weights"]), float(d["fraction"]))
    split = d.get("split")
    if split is None:
        return node
    node.feature = int(split["index"])
    if names[node.feature] != split["feature"]:
        raise InvalidArgumentError(f"split feature {split['feature']!r} does not match index {node.feature}")
    if "categories" in split:
        node.categories = tuple(float(c) for c in split["categories"])
        node.seen = tuple(float(c) for c in split.get("seen", ()))
        node.unseen_left = bool(split.get("unseen_left", True))
    else:
        node.threshold = float(split["threshold"])
    node.left = _node_from_dict(d["left"], names)
    node.right = _node_from_dict(d["right"], names)
    return node


# -- fitting -----------------------------------------------------------------


def _impurity(c: np.ndarray) -> np.ndarray:
    """Weight times Gini impurity, for class-weight rows ``c``."""
    W = c.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = W - (c ** 2).sum(axis=-1) / W
    return np.where(W > 0, out, 0.0)


class _Grower:
    def __init__(self, X, Y, treatments, params, categorical):
        self.X = X
        self.Y = Y
        self.treatments = treatments
        self.params = params
        self.categorical = set(categorical)
        self.total = Y.sum()
        self.min_leaf = params.min_leaf_weight * self.total

    def node(self, idx, depth) -> TreeNode:
        c = self.Y[idx].sum(axis=0)
        W = c.sum()
        node = TreeNode(
            self.treatments[int(np.argmax(c))],
            tuple(float(v) for v in c),
            float(W / self.total),
        )
        if depth >= self.params.max_depth or W <= 0 or _impurity(c) <= 0:
            return node
        best = self.best_split(idx, c)
        if best is None:
            return node
        gain, feature, rule, left_mask = best
        if gain < self.params.min_gain:
            return node
        node.feature = feature
        if isinstance(rule, float):
            node.threshold = rule
        else:
            cats, seen = rule
            node.categories = cats
            node.seen = seen
            node.unseen_left = bool(self.Y[idx[left_mask]].sum() >= self.Y[idx[~left_mask]].sum())
        node.left = self.node(idx[left_mask], depth + 1)
        node.right = self.node(idx[~left_mask], depth + 1)
        return node

    def best_split(self, idx, c):
        parent = _impurity(c)
        best = None
        for j in range(self.X.shape[1]):
            x = self.X[idx, j]
            if j in self.categorical:
                found = self._categorical(x, self.Y[idx], c, parent)
            else:
                found = self._numeric(x, self.Y[idx], c, parent)
            if found is None:
                continue
            gain, rule, mask = found
            if best is None or gain > best[0]:
                best = (gain, j, rule, mask)
        return best

    def _valid(self, WL, WR):
        return (WL >= self.min_leaf) & (WR >= self.min_leaf) & (WL > 0) & (WR > 0)

    def _numeric(self, x, Y, c, parent):
        order = np.argsort(x, kind="stable")
        xs = x[order]
        cut = np.nonzero(xs[:-1] < xs[1:])[0]
        if cut.size == 0:
            return None
        cum = np.cumsum(Y[order], axis=0)[cut]
        right = c[None, :] - cum
        WL, WR = cum.sum(axis=1), right.sum(axis=1)
        gain = (parent - _impurity(cum) - _impurity(right)) / self.total
        gain = np.where(self._valid(WL, WR), gain, -np.inf)
        k = int(np.argmax(gain))
        if not np.isfinite(gain[k]):
            return None
        threshold = float((xs[cut[k]] + xs[cut[k] + 1]) / 2)
        return float(gain[k]), threshold, x <= threshold

    def _categorical(self, x, Y, c, parent):
        cats = np.unique(x)
        if cats.size < 2:
            return None
        inv = np.searchsorted(cats, x)
        per_cat = np.zeros((cats.size, Y.shape[1]))
        np.add.at(per_cat, inv, Y)
        if cats.size <= self.params.max_exhaustive_categories:
            # subsets containing the first category; the complement is the mirror split
            candidates = []
            for bits in range(2 ** (cats.size - 1)):
                members = [0] + [i + 1 for i in range(cats.size - 1) if bits >> i & 1]
                if len(members) < cats.size:
                    candidates.append(members)
        else:
            majority = int(np.argmax(c))
            W = per_cat.sum(axis=1)
            share = np.where(W > 0, per_cat[:, majority] / np.where(W > 0, W, 1), 0.0)
            order = np.argsort(share, kind="stable")
            candidates = [sorted(order[: i + 1].tolist()) for i in range(cats.size - 1)]
        best = None
        for members in candidates:
            left = per_cat[members].sum(axis=0)
            right = c - left
            WL, WR = left.sum(), right.sum()
            if not self._valid(WL, WR):
                continue
            gain = float((parent - _impurity(left) - _impurity(right)) / self.total)
            if best is None or gain > best[0]:
                best = (gain, members)
        if best is None:
            return None
        chosen = tuple(float(v) for v in cats[best[1]])
        mask = np.isin(x, cats[best[1]])
        return best[0], (chosen, tuple(float(v) for v in cats)), mask


def fit_cost_sensitive_tree(
    ed: ExpandedDataset,
    params: TreeParams | None = None,
    categorical: Sequence[str] = (),
    stage: int = 0,
) -> RegimeTree:
    """Grow a weighted-Gini CART tree on expanded rows.

    With zero total weight a single leaf labelled by the lowest treatment is
    returned, flagged ``degenerate`` and accompanied by a warning.
    """
    params = params or TreeParams()
    treatments = tuple(ed.treatments)
    col = {a: j for j, a in enumerate(treatments)}
    if not all(int(l) in col for l in np.unique(ed.labels)):
        raise InvalidArgumentError("expanded labels outside the treatment set")
    if np.any(ed.weights < 0):
        raise InvalidArgumentError("expanded weights must be non-negative")
    unknown = [f for f in categorical if f not in ed.feature_names]
    if unknown:
        raise InvalidArgumentError(f"unknown categorical feature(s) {unknown}")
    cat_idx = tuple(ed.feature_names.index(f) for f in categorical)

    Y = np.zeros((len(ed), len(treatments)))
    Y[np.arange(len(ed)), [col[int(l)] for l in ed.labels]] = ed.weights
    total = Y.sum()
    if total <= 0:
        warnings.warn("zero total weight; returning a single-leaf tree", DegenerateFitWarning, stacklevel=2)
        root = TreeNode(treatments[0], tuple(0.0 for _ in treatments), 1.0)
        return RegimeTree(root, treatments, ed.feature_names, cat_idx, stage, True, params)

    grower = _Grower(np.asarray(ed.features, dtype=float), Y, treatments, params, cat_idx)
    root = grower.node(np.arange(len(ed)), 0)
    if params.cp > 0:
        root_risk = _risk(root)
        _prune(root, params.cp * root_risk)
    return RegimeTree(root, treatments, ed.feature_names, cat_idx, stage, False, params)


def _risk(node: TreeNode) -> float:
    """Weighted misclassification loss if ``node`` were a leaf."""
    return float(sum(node.class_weights) - max(node.class_weights))


def _prune(node: TreeNode, alpha: float) -> tuple[float, int]:
    """Cost-complexity pruning at fixed ``alpha``; returns (subtree risk, leaves).

    A subtree collapses into a leaf unless it lowers the risk by at least
    ``alpha`` per extra leaf.
    """
    if node.is_leaf:
        return _risk(node), 1
    rl, nl = _prune(node.left, alpha)
    rr, nr = _prune(node.right, alpha)
    risk, leaves = rl + rr, nl + nr
    if _risk(node) - risk < alpha * (leaves - 1):
        node.feature = node.threshold = node.categories = node.seen = None
        node.left = node.right = None
        return _risk(node), 1
    return risk, leaves


def predict_tree(tree: RegimeTree, features) -> int:
    return tree.predict_one(features)


def policy_cost(cm: CostMatrix, actions) -> float:
    """Total cost of assigning ``actions`` to the subjects of ``cm``."""
    col = {a: j for j, a in enumerate(cm.treatments)}
    cols = np.array([col[int(a)] for a in np.asarray(actions).reshape(-1)])
    return float(cm.costs[np.arange(cm.n), cols].sum())
