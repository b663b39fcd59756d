import itertools
import json
import re
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cclearn.costtree import (
    CostMatrix,
    RegimeTree,
    TreeNode,
    TreeParams,
    expand_dataset,
    fit_cost_sensitive_tree,
    policy_cost,
    predict_tree,
)
from cclearn.errors import DegenerateFitWarning, InvalidArgumentError


def cost_matrix(X, C, treatments, names=()):
    C = np.asarray(C, dtype=float)
    C = C - C.min(axis=1, keepdims=True)
    best = np.asarray(treatments)[np.argmin(C, axis=1)]
    return CostMatrix(np.asarray(X, dtype=float), C, best, treatments, names)


def separable(n, rng, margin=0.1):
    x1 = rng.uniform(margin, 1, n) * rng.choice([-1, 1], n)
    X = np.column_stack([x1, rng.normal(size=n)])
    best = (x1 > 0).astype(int) + 1
    C = np.zeros((n, 2))
    C[np.arange(n), 2 - best] = 1 + rng.uniform(size=n)
    return X, C, best


# -- expansion ----------------------------------------------------------------


def test_expand_row_count_and_weights():
    cm = cost_matrix([[0.0], [1.0]], [[0, 1, 4], [2, 0, 2]], (1, 2, 3))
    ed = expand_dataset(cm)
    assert len(ed) == 6
    np.testing.assert_array_equal(ed.weights[:3], [4, 3, 0])
    np.testing.assert_array_equal(ed.labels, [1, 2, 3, 1, 2, 3])
    np.testing.assert_array_equal(ed.features[:, 0], [0, 0, 0, 1, 1, 1])


def test_expand_indifferent_example_has_zero_weight():
    cm = cost_matrix([[0.0]], [[3, 3, 3]], (1, 2, 3))
    np.testing.assert_array_equal(expand_dataset(cm).weights, 0.0)


def test_cost_matrix_rejects_negative_or_nonzero_best():
    with pytest.raises(InvalidArgumentError):
        CostMatrix(np.zeros((1, 1)), np.array([[-1.0, 0.0]]), np.array([2]), (1, 2))
    with pytest.raises(InvalidArgumentError):
        CostMatrix(np.zeros((1, 1)), np.array([[1.0, 2.0]]), np.array([1]), (1, 2))


def test_expand_collapse_recovers_costs():
    rng = np.random.default_rng(4)
    cm = cost_matrix(rng.normal(size=(10, 2)), rng.uniform(0, 5, (10, 3)), (1, 2, 3))
    U = expand_dataset(cm).weights.reshape(10, 3)
    np.testing.assert_allclose(cm.costs.max(axis=1, keepdims=True) - U, cm.costs)


def enumerate_classifiers(p, treatments):
    for a in treatments:
        yield lambda x, a=a: a
    for j in range(p):
        for l, r in itertools.product(treatments, repeat=2):
            if l != r:
                yield lambda x, j=j, l=l, r=r: l if x[j] == 0 else r


@st.composite
def small_instances(draw):
    n = draw(st.integers(1, 3))
    m = draw(st.integers(2, 3))
    X = draw(st.lists(st.lists(st.integers(0, 1), min_size=2, max_size=2), min_size=n, max_size=n))
    C = draw(st.lists(st.lists(st.integers(0, 6), min_size=m, max_size=m), min_size=n, max_size=n))
    return cost_matrix(X, C, tuple(range(1, m + 1)))


@settings(max_examples=300, deadline=None)
@given(small_instances())
def test_expansion_equivalence_by_enumeration(cm):
    ed = expand_dataset(cm)
    expanded, original = [], []
    for g in enumerate_classifiers(cm.features.shape[1], cm.treatments):
        pred_rows = np.array([g(x) for x in ed.features])
        expanded.append(float(np.sum(ed.weights * (pred_rows != ed.labels))))
        original.append(policy_cost(cm, [g(x) for x in cm.features]))
    expanded, original = np.array(expanded), np.array(original)
    assert set(np.flatnonzero(expanded == expanded.min())) == set(np.flatnonzero(original == original.min()))
    # the two objectives differ by a classifier-independent constant
    np.testing.assert_allclose(expanded - original, (expanded - original)[0])


# -- fitting ------------------------------------------------------------------


def test_unanimous_label_gives_single_leaf():
    X = np.arange(6.0)[:, None]
    C = np.tile([1.0, 0.0, 1.0], (6, 1))
    tree = fit_cost_sensitive_tree(expand_dataset(cost_matrix(X, C, (1, 2, 3))))
    assert tree.n_leaves == 1 and tree.root.label == 2
    assert predict_tree(tree, [100.0]) == 2


def test_zero_weight_warns_and_flags():
    cm = cost_matrix(np.zeros((3, 1)), np.zeros((3, 2)), (1, 2))
    with pytest.warns(DegenerateFitWarning):
        tree = fit_cost_sensitive_tree(expand_dataset(cm))
    assert tree.degenerate and tree.n_leaves == 1 and tree.root.label == 1


def test_separable_instance():
    rng = np.random.default_rng(0)
    X, C, _ = separable(200, rng)
    tree = fit_cost_sensitive_tree(expand_dataset(cost_matrix(X, C, (1, 2))))
    assert tree.root.feature == 0 and abs(tree.root.threshold) < 0.1
    assert tree.leaf_labels() == {1, 2}
    Xt, _, best = separable(500, np.random.default_rng(1))
    np.testing.assert_array_equal(tree.predict(Xt), best)
    assert tree.n_leaves == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(2, 4), st.sampled_from([0.0, 0.01]))
def test_tree_never_worse_than_best_constant(seed, n, m, cp):
    rng = np.random.default_rng(seed)
    treatments = tuple(range(1, m + 1))
    cm = cost_matrix(rng.normal(size=(n, 2)).round(1), rng.exponential(size=(n, m)), treatments)
    tree = fit_cost_sensitive_tree(expand_dataset(cm), TreeParams(cp=cp))
    best_constant = min(policy_cost(cm, [a] * n) for a in treatments)
    assert policy_cost(cm, tree.predict(cm.features)) <= best_constant + 1e-9
    assert tree.depth <= tree.params.max_depth
    assert tree.leaf_labels() <= set(treatments)


def test_max_depth_respected():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(300, 3))
    C = rng.exponential(size=(300, 3))
    for depth in (0, 1, 2, 3):
        tree = fit_cost_sensitive_tree(expand_dataset(cost_matrix(X, C, (1, 2, 3))), TreeParams(max_depth=depth, cp=0))
        assert tree.depth <= depth


def test_pruning_removes_weak_splits():
    rng = np.random.default_rng(3)
    X, C, _ = separable(400, rng)
    # a small pocket that prefers label 1 on the right side
    X[:8, 0] = np.linspace(0.9, 0.95, 8)
    C[:8] = [[0.0, 0.05]] * 8
    ed = expand_dataset(cost_matrix(X, C, (1, 2)))
    grown = fit_cost_sensitive_tree(ed, TreeParams(cp=0.0, min_leaf_weight=0.0))
    pruned = fit_cost_sensitive_tree(ed, TreeParams(cp=0.01, min_leaf_weight=0.0))
    assert pruned.n_leaves < grown.n_leaves
    assert pruned.n_leaves == 2
    huge = fit_cost_sensitive_tree(ed, TreeParams(cp=10.0))
    assert huge.n_leaves == 1


def test_categorical_subset_split():
    rng = np.random.default_rng(12)
    codes = rng.integers(0, 4, 200).astype(float)
    best = np.where(np.isin(codes, [1, 3]), 2, 1)
    C = np.zeros((200, 2))
    C[np.arange(200), 2 - best] = 1.0
    X = np.column_stack([codes, rng.normal(size=200)])
    cm = cost_matrix(X, C, (1, 2), ("c", "z"))
    tree = fit_cost_sensitive_tree(expand_dataset(cm), categorical=("c",))
    assert tree.root.feature == 0 and tree.root.categories is not None
    assert set(tree.root.categories) in ({1.0, 3.0}, {0.0, 2.0})
    np.testing.assert_array_equal(tree.predict(X), best)
    # an unseen code follows the heavier child
    heavier = tree.root.left if tree.root.unseen_left else tree.root.right
    assert predict_tree(tree, [7.0, 0.0]) == heavier.label
    with pytest.raises(InvalidArgumentError):
        fit_cost_sensitive_tree(expand_dataset(cm), categorical=("nope",))


# -- routing and export -------------------------------------------------------


def stump():
    left = TreeNode(1, (3.0, 1.0), 0.5)
    right = TreeNode(3, (0.0, 1.0, 3.0), 0.5)
    root = TreeNode(1, (3.0, 2.0, 3.0), 1.0, feature=0, threshold=0.0, left=left, right=right)
    return RegimeTree(root, (1, 2, 3), ("x1", "x2"))


def test_routing_and_dimension_check():
    tree = stump()
    assert predict_tree(tree, [-1.0, 5.0]) == 1
    assert predict_tree(tree, [1.0, 5.0]) == 3
    assert predict_tree(tree, [0.0, 5.0]) == 1
    with pytest.raises(InvalidArgumentError):
        predict_tree(tree, [1.0])
    with pytest.raises(InvalidArgumentError):
        tree.predict(np.zeros((2, 3)))


def test_json_round_trip_is_stable():
    rng = np.random.default_rng(1)
    X, C, _ = separable(100, rng)
    tree = fit_cost_sensitive_tree(expand_dataset(cost_matrix(X, C, (1, 2))))
    text = json.dumps(tree.to_dict(), sort_keys=True)
    again = RegimeTree.from_dict(json.loads(text))
    assert json.dumps(again.to_dict(), sort_keys=True) == text
    np.testing.assert_array_equal(again.predict(X), tree.predict(X))


def test_single_leaf_text():
    tree = RegimeTree(TreeNode(2, (0.0, 5.0), 1.0), (1, 2), ("x",))
    lines = tree.to_text().splitlines()
    assert lines == ["root: treatment 2 | (0.00, 1.00) | 100.0%"]


def test_text_rendering_of_split():
    lines = stump().to_text().splitlines()
    assert lines[0].startswith("root: treatment 1")
    assert lines[1] == "  x1 <= 0: treatment 1 | (0.75, 0.25) | 50.0%"
    assert lines[2].startswith("  x1 > 0: treatment 3")


DOT_LINE = re.compile(
    r'^(digraph \w+ \{|  node \[shape=box\];|  n\d+ \[label="(?:[^"\\]|\\.)*"\];'
    r'|  n\d+ -> n\d+ \[label="(?:[^"\\]|\\.)*"\];|\})$'
)


def test_dot_output_is_well_formed():
    dot = stump().to_dot()
    lines = dot.splitlines()
    assert lines[0].startswith("digraph") and lines[-1] == "}"
    for line in lines:
        assert DOT_LINE.match(line), line
    assert dot.count("{") == dot.count("}")
    nodes = set(re.findall(r"^  (n\d+) \[", dot, re.M))
    for a, b in re.findall(r"^  (n\d+) -> (n\d+)", dot, re.M):
        assert a in nodes and b in nodes


def test_categorical_names_in_rendering():
    left = TreeNode(1, (1.0, 0.0), 0.5)
    right = TreeNode(2, (0.0, 1.0), 0.5)
    root = TreeNode(1, (1.0, 1.0), 1.0, feature=0, categories=(1.0, 3.0), seen=(0.0, 2.0), left=left, right=right)
    tree = RegimeTree(root, (1, 2), ("sex",), (0,))
    text = tree.to_text({"sex": {1.0: "F", 3.0: "X"}})
    assert "sex in {F, X}" in text and "sex not in {F, X}" in text
    assert all(DOT_LINE.match(l) for l in tree.to_dot({"sex": {1.0: 'a "q"'}}).splitlines())


def test_tree_params_validation():
    for bad in (dict(max_depth=-1), dict(min_leaf_weight=0.6), dict(min_gain=-1), dict(cp=-0.1)):
        with pytest.raises(InvalidArgumentError):
            TreeParams(**bad)


def test_fit_is_deterministic():
    rng = np.random.default_rng(2)
    cm = cost_matrix(rng.normal(size=(80, 3)), rng.exponential(size=(80, 3)), (1, 2, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = fit_cost_sensitive_tree(expand_dataset(cm)).to_dict()
        b = fit_cost_sensitive_tree(expand_dataset(cm)).to_dict()
    assert a == b
