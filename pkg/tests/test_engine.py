import json

import numpy as np
import pytest

from cclearn.costtree import TreeParams, expand_dataset, fit_cost_sensitive_tree
from cclearn.engine import (
    DynamicRegime,
    FitConfig,
    StageModels,
    aipw_pseudo_outcomes,
    backward_fit,
    count_label_ties,
    estimate_labels_and_contrasts,
    value_d_method,
    value_r_method,
)
from cclearn.errors import DegenerateFitError, InvalidArgumentError
from cclearn.regressors import DesignSpec, QModel, fit_propensity, fit_q_model
from cclearn.simlab import ScenarioConfig, generate, scenario_fit_config
from cclearn.trajectory import StageRecord, Trajectory

# -- the 12-subject two-stage recovery dataset ---------------------------------
#
# X1, X2 binary; treatments {1, 2}; no noise and no censoring.
#   Y1 = 2 + 2 * 1{A1 = g1(X1)},  g1 = 2 if X1 == 1 else 1
#   Y2 = 1 + 2 * 1{A2 = g2(X2)},  g2 = 2 if X2 == 1 else 1
# Stage 2 sees T1 = Y1 and X2.  The stage-2 Q-model (main T1, X2; blip X2)
# and the stage-1 Q-model on the remaining time (main X1; blip X1) are
# saturated, so every pseudo-outcome equals its Q-value and the best labels
# are g1 and g2 exactly.

RECOVERY_X1 = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
RECOVERY_A1 = [1, 1, 1, 2, 2, 2, 1, 1, 1, 2, 2, 2]
RECOVERY_X2 = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1]
RECOVERY_A2 = [1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2]


def g1(x1):
    return 2 if x1 == 1 else 1


def g2(x2):
    return 2 if x2 == 1 else 1


def recovery_dataset():
    data = []
    for x1, a1, x2, a2 in zip(RECOVERY_X1, RECOVERY_A1, RECOVERY_X2, RECOVERY_A2):
        y1 = 2.0 + 2.0 * (a1 == g1(x1))
        y2 = 1.0 + 2.0 * (a2 == g2(x2))
        stages = (StageRecord((float(x1),), a1, y1, 1), StageRecord((y1, float(x2)), a2, y2, 1))
        data.append(Trajectory(stages, y1 + y2, 1, True))
    return data


def recovery_config(induction="D", variant="I"):
    return FitConfig(
        K=2,
        treatment_sets=((1, 2), (1, 2)),
        covariate_names=(("X1",), ("T1", "X2")),
        stages=(
            StageModels(DesignSpec(("X1",), ("X1",)), ("X1",), (), ("X1",)),
            StageModels(DesignSpec(("T1", "X2"), ("X2",)), ("X2",), (), ("X2",)),
        ),
        ipcw_variant=variant,
        induction=induction,
    )


def random_uncensored(n, seed):
    """Two-stage data with no censoring and some subjects stopping after stage 1."""
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        x = rng.normal(size=2)
        a1 = int(rng.integers(1, 4))
        y1 = float(np.exp(1 + 0.3 * x[0] + 0.2 * (a1 == 2) + 0.2 * rng.normal()))
        if rng.uniform() < 0.2:
            data.append(Trajectory((StageRecord(tuple(x), a1, y1, 1),), y1, 1, True))
            continue
        a2 = int(rng.integers(1, 4))
        y2 = float(np.exp(0.5 + 0.1 * y1 - 0.3 * (a2 == 3) * x[1] + 0.2 * rng.normal()))
        stages = (StageRecord(tuple(x), a1, y1, 1), StageRecord((y1,), a2, y2, 1))
        data.append(Trajectory(stages, y1 + y2, 1, True))
    return data


def random_config(variant="I", induction="D"):
    return FitConfig(
        K=2,
        treatment_sets=((1, 2, 3), (1, 2, 3)),
        covariate_names=(("X1", "X2"), ("T1",)),
        stages=(
            StageModels(DesignSpec(("X1", "X2"), ("X1",), "log"), ("X1",), (), ("X1", "X2")),
            StageModels(DesignSpec(("X1", "T1"), ("X2",), "log"), ("X2",), (), ("X1", "X2", "T1")),
        ),
        ipcw_variant=variant,
        induction=induction,
    )


def assert_same_rule(a, b):
    """Same splits and labels; node weights equal up to rounding."""
    assert a["label"] == b["label"] and a.get("split") == b.get("split")
    np.testing.assert_allclose(a["class_weights"], b["class_weights"], atol=1e-8)
    if "split" in a:
        assert_same_rule(a["left"], b["left"])
        assert_same_rule(a["right"], b["right"])


# -- pseudo-outcomes and contrasts ---------------------------------------------


def test_aipw_reduces_to_ipw_oracle():
    observed = np.array([1, 2, 3, 1, 2, 3])
    v = np.array([4.0, 6.0, 2.0, 8.0, 1.0, 3.0])
    P = np.array([
        [0.5, 0.25, 0.25],
        [0.2, 0.4, 0.4],
        [0.1, 0.1, 0.8],
        [0.25, 0.5, 0.25],
        [1 / 3, 1 / 3, 1 / 3],
        [0.6, 0.2, 0.2],
    ])
    expected = np.zeros((6, 3))
    expected[0, 0] = 4 / 0.5
    expected[1, 1] = 6 / 0.4
    expected[2, 2] = 2 / 0.8
    expected[3, 0] = 8 / 0.25
    expected[4, 1] = 1 / (1 / 3)
    expected[5, 2] = 3 / 0.2
    got = aipw_pseudo_outcomes(observed, np.zeros((6, 3)), P, np.ones(6), v, (1, 2, 3))
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_aipw_collapses_to_observed_value_and_imputes_others():
    Q = np.array([[1.0, 9.0, 4.0]])
    P = np.array([[1.0, 0.5, 0.5]])
    got = aipw_pseudo_outcomes([1], Q, P, [1.0], [7.0], (1, 2, 3))
    np.testing.assert_allclose(got, [[7.0, 9.0, 4.0]])


def test_aipw_censored_subject_keeps_model_term():
    Q = np.array([[2.0, 3.0]])
    got = aipw_pseudo_outcomes([2], Q, np.array([[0.5, 0.5]]), [0.0], [100.0], (1, 2))
    np.testing.assert_allclose(got, [[2.0, 3.0 - 3.0 / 0.5]])


def test_aipw_errors():
    with pytest.raises(InvalidArgumentError):
        aipw_pseudo_outcomes([1], np.zeros((1, 3)), np.full((1, 2), 0.5), [1], [1], (1, 2, 3))
    with pytest.raises(InvalidArgumentError):
        aipw_pseudo_outcomes([4], np.zeros((1, 2)), np.full((1, 2), 0.5), [1], [1], (1, 2))


def test_labels_and_costs_example():
    cm = estimate_labels_and_contrasts(np.array([[5.0, 7.0, 7.0]]), (1, 2, 3))
    assert cm.best_labels.tolist() == [2]
    np.testing.assert_array_equal(cm.costs, [[2.0, 0.0, 0.0]])
    assert count_label_ties([[5.0, 7.0, 7.0], [1.0, 2.0, 3.0]]) == 1


def test_costs_positive_off_argmax_and_match_argmax():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pseudo = rng.normal(size=(4, 3))
        cm = estimate_labels_and_contrasts(pseudo, (1, 2, 3))
        np.testing.assert_array_equal(np.argmin(cm.costs, axis=1), np.argmax(pseudo, axis=1))
        assert np.all(cm.costs >= 0)
        best = cm.best_labels - 1
        assert np.all(cm.costs[np.arange(4), best] == 0)
        mask = np.ones_like(cm.costs, dtype=bool)
        mask[np.arange(4), best] = False
        assert np.all(cm.costs[mask] > 0)


def test_argmax_invariance_under_row_shifts():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pseudo = rng.integers(-5, 5, size=(6, 4)).astype(float)
        shift = rng.integers(-100, 100, size=(6, 1)).astype(float)
        a = estimate_labels_and_contrasts(pseudo, (1, 2, 3, 4))
        b = estimate_labels_and_contrasts(pseudo + shift, (1, 2, 3, 4))
        np.testing.assert_array_equal(a.best_labels, b.best_labels)
        np.testing.assert_array_equal(a.costs, b.costs)


# -- value propagation ---------------------------------------------------------


def test_value_d_method_examples():
    const = QModel(DesignSpec(), (1, 2, 3), np.array([4.0, 0.0, 0.0]))
    np.testing.assert_allclose(value_d_method(const, {"x": np.zeros(3)}), 4.0)
    two = QModel(DesignSpec(), (1, 2), np.array([3.0, 2.0]))
    np.testing.assert_allclose(value_d_method(two, {"x": np.zeros(2)}), 5.0)


def test_value_r_method_examples():
    model = QModel(DesignSpec(), (1, 2), np.array([3.0, 1.5]))
    h = {"x": np.zeros(2)}
    got = value_r_method(model, h, np.array([2, 1]), np.array([2, 2]), np.array([4.0, 4.0]))
    np.testing.assert_allclose(got, [4.0, 5.5])


# -- backward_fit --------------------------------------------------------------


def test_recovery_of_generating_rule():
    regime = backward_fit(recovery_dataset(), recovery_config())
    stage1, stage2 = regime.stage_trees
    for x1 in (0, 1):
        assert stage1.predict_one([x1]) == g1(x1)
    for x2 in (0, 1):
        assert stage2.predict_one([x2]) == g2(x2)
    assert stage1.n_leaves == 2 and stage2.n_leaves == 2
    for fit, g, x in ((regime.stage_fits[0], g1, RECOVERY_X1), (regime.stage_fits[1], g2, RECOVERY_X2)):
        np.testing.assert_array_equal(fit.cost_matrix.best_labels, [g(v) for v in x])
    # value after stage 1 is the best achievable total: 4 + 3
    np.testing.assert_allclose(regime.stage_fits[0].value_hat, 7.0, atol=1e-8)


def test_d_and_r_agree_on_saturated_toy():
    d = backward_fit(recovery_dataset(), recovery_config("D"))
    r = backward_fit(recovery_dataset(), recovery_config("R"))
    for fd, fr in zip(d.stage_fits, r.stage_fits):
        np.testing.assert_allclose(fd.value_hat, fr.value_hat, atol=1e-8)
    for a, b in zip(d.stage_trees, r.stage_trees):
        assert_same_rule(a.to_dict()["root"], b.to_dict()["root"])


def test_ipcw_variants_identical_without_censoring():
    data = random_uncensored(300, 4)
    one = backward_fit(data, random_config("I"))
    two = backward_fit(data, random_config("II"))
    for a, b in zip(one.stage_fits, two.stage_fits):
        assert np.array_equal(a.q_model.coefficients, b.q_model.coefficients)
        assert np.array_equal(a.value_hat, b.value_hat)
        assert np.array_equal(a.cost_matrix.costs, b.cost_matrix.costs)
    assert [t.to_dict() for t in one.stage_trees] == [t.to_dict() for t in two.stage_trees]


def test_backward_fit_is_deterministic():
    data = generate(ScenarioConfig(1, 400, 35.0, 0.8, seed=3))
    config = scenario_fit_config(1, "I", "D", seed=5)
    assert backward_fit(data, config).to_json() == backward_fit(data, config).to_json()


def test_single_stage_matches_direct_tree():
    rng = np.random.default_rng(7)
    n = 150
    x = rng.normal(size=n)
    a = rng.integers(1, 3, size=n)
    y = 2 + x + (a == 2) * (1.5 * x) + 0.1 * rng.normal(size=n)
    y = np.abs(y) + 0.1
    data = [Trajectory((StageRecord((float(xi),), int(ai), float(yi), 1),), float(yi), 1, True) for xi, ai, yi in zip(x, a, y)]
    config = FitConfig(1, ((1, 2),), (("x",),), (StageModels(DesignSpec(("x",), ("x",)), ("x",), (), ("x",)),))
    regime = backward_fit(data, config)

    h = {"x": x}
    q = fit_q_model(DesignSpec(("x",), ("x",)), h, a, y, np.ones(n), (1, 2)).predict_all(h)
    pi = np.clip(fit_propensity(h, a, (1, 2), ("x",)).predict(h), 0.01, 0.99)
    ind = np.column_stack([a == 1, a == 2]).astype(float)
    pseudo = ind / pi * y[:, None] + (1 - ind / pi) * q
    cm = estimate_labels_and_contrasts(pseudo, (1, 2), x[:, None], ("x",))
    direct = fit_cost_sensitive_tree(expand_dataset(cm), TreeParams(), stage=1)
    assert regime.stage_trees[0].to_dict() == direct.to_dict()


def test_degenerate_stage_is_named():
    data = recovery_dataset()
    short = [Trajectory(t.stages[:1], t.stages[0].reward, 1, True) for t in data[2:]]
    with pytest.raises(DegenerateFitError) as exc:
        backward_fit(data[:2] + short, recovery_config())
    assert exc.value.stage == 2 and "stage 2" in str(exc.value)


def test_variant_i_needs_intermediate_rewards():
    data = [Trajectory(t.stages, t.total_time, 1, False) for t in recovery_dataset()]
    with pytest.raises(InvalidArgumentError):
        backward_fit(data, recovery_config(variant="I"))
    backward_fit(data, recovery_config(variant="II"))


def test_padded_subjects_carry_observed_total():
    data = random_uncensored(200, 9)
    regime = backward_fit(data, random_config())
    v2 = regime.stage_fits[1].value_hat
    for i, t in enumerate(data):
        if t.n_stages == 1:
            assert v2[i] == t.total_time


def test_fit_config_validation():
    base = recovery_config()
    kwargs = dict(K=2, treatment_sets=base.treatment_sets, covariate_names=base.covariate_names, stages=base.stages)
    with pytest.raises(InvalidArgumentError):
        FitConfig(**dict(kwargs, K=0))
    with pytest.raises(InvalidArgumentError):
        FitConfig(**dict(kwargs, treatment_sets=((1,), (1, 2))))
    with pytest.raises(InvalidArgumentError):
        FitConfig(**dict(kwargs, ipcw_variant="III"))
    with pytest.raises(InvalidArgumentError):
        FitConfig(**dict(kwargs, induction="Q"))
    with pytest.raises(InvalidArgumentError):
        FitConfig(**dict(kwargs, covariate_names=(("X1",), ("A1",))))
    with pytest.raises(InvalidArgumentError):
        FitConfig(**dict(kwargs, covariate_names=(("X1",), ("T1",))))
    with pytest.raises(InvalidArgumentError):
        StageModels(DesignSpec(), classification=())


def test_regime_json_round_trip():
    regime = backward_fit(recovery_dataset(), recovery_config())
    text = regime.to_json()
    again = DynamicRegime.from_json(text)
    assert again.to_json() == text
    assert again.config == regime.config
    with pytest.raises(InvalidArgumentError):
        DynamicRegime.from_dict({"format": "other"})
    assert json.loads(text)["diagnostics"]["stages"][0]["stage"] == 1


def test_recommend_uses_named_history():
    regime = backward_fit(recovery_dataset(), recovery_config())
    got = regime.recommend(2, {"X1": np.array([0.0, 1.0]), "A1": np.array([1.0, 1.0]),
                               "T1": np.array([2.0, 2.0]), "X2": np.array([1.0, 0.0])})
    assert got.tolist() == [2, 1]
    with pytest.raises(InvalidArgumentError):
        regime.recommend(3, {})
