"""Acceptance criteria, one test and one PASS/FAIL line each.

Criteria 1-4 compare Monte Carlo benchmarks with published reference
numbers at fixed tolerances; 5-7 rerun the oracle and structural property
checks from the unit suites.
"""

import time

import numpy as np
import pytest

import test_costtree
import test_engine
import test_regressors
import test_trajectory
from cclearn.simlab import (
    BenchmarkRow,
    UniformRandomPolicy,
    evaluate_regime,
    run_benchmark,
    true_optimal_regime,
)

REPS = 20
N_TEST = 10000
SEED = 0
BASELINE_SEEDS = 5

_cache: dict = {}


def benchmark(scenario, n, cr, variant="I", induction="D"):
    key = (scenario, n, cr, variant, induction)
    if key not in _cache:
        row = BenchmarkRow(scenario, n, cr, variant, induction, 1.0)
        _cache[key] = run_benchmark(row, REPS, SEED, N_TEST)
    return _cache[key]


def within(value, target, tol):
    return abs(value - target) <= tol


def run_checks(checks):
    failed = []
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failed.append(f"{check.__name__} ({str(exc).splitlines()[0] if str(exc) else 'assertion'})")
    return failed


def test_criterion_1_scenario1_reproduction(report):
    t0 = time.perf_counter()
    s = benchmark(1, 1000, 10)
    elapsed = time.perf_counter() - t0
    ok_aa = within(s.aa, 0.968, 0.05)
    ok_v = within(s.v_hat, 7.836, 0.20)
    ok = s.n_ok == REPS and ok_aa and ok_v and elapsed < 600
    report(1, ok, f"scenario 1, n=1000, CR=10%, IPCW-I, D: AA={s.aa:.3f} (0.968 +/- 0.05), "
                  f"V_hat={s.v_hat:.3f} (7.836 +/- 0.20), {s.n_ok}/{REPS} reps, {elapsed:.1f}s")
    assert ok


def test_criterion_2_table1_orderings(report):
    i20, ii20 = benchmark(1, 500, 20, "I"), benchmark(1, 500, 20, "II")
    i10, ii10 = benchmark(1, 500, 10, "I"), benchmark(1, 500, 10, "II")
    ok = i20.aa >= ii20.aa and i10.aa >= i20.aa and ii10.aa >= ii20.aa
    report(2, ok, f"n=500: AA IPCW-I/II at CR=20% {i20.aa:.3f}/{ii20.aa:.3f}, "
                  f"at CR=10% {i10.aa:.3f}/{ii10.aa:.3f}")
    assert ok


def test_criterion_3_scenario2_reproduction(report):
    s = benchmark(2, 1000, 10)
    ok_aa = within(s.aa, 0.473, 0.07)
    ok_v = within(s.v_hat, 13.102, 0.30)
    ok_gap = s.v_hat > 12 > s.v_random
    ok = s.n_ok == REPS and ok_aa and ok_v and ok_gap
    report(3, ok, f"scenario 2, n=1000, CR=10%, IPCW-I, D: AA={s.aa:.3f} (0.473 +/- 0.07), "
                  f"V_hat={s.v_hat:.3f} (13.102 +/- 0.30), V_random={s.v_random:.3f} (need V_hat > 12 > V_random)")
    assert ok


def test_criterion_4_baselines(report):
    # averaging a few independent test sets keeps a lucky draw from deciding the check
    seeds = range(SEED, SEED + BASELINE_SEEDS)
    parts = []
    ok = True
    for scenario, rand_target, opt_target, tol in ((1, 3.518, 8.007, 0.10), (2, 9.870, 14.302, 0.15)):
        rand = np.mean([evaluate_regime(UniformRandomPolicy(None), scenario, N_TEST, s).v_hat for s in seeds])
        opt = np.mean([evaluate_regime(true_optimal_regime(scenario), scenario, N_TEST, s).v_hat for s in seeds])
        for name, value, target in ((f"S{scenario} random", rand, rand_target), (f"S{scenario} optimal", opt, opt_target)):
            hit = within(value, target, tol)
            ok &= hit
            parts.append(f"{name} {value:.3f} ({target} +/- {tol}{'' if hit else ', MISS'})")
    report(4, ok, f"mean of {BASELINE_SEEDS} test sets of {N_TEST}: " + "; ".join(parts))
    assert ok


def test_criterion_5_oracle_equivalences(report):
    t0 = time.perf_counter()
    failed = run_checks([
        test_trajectory.test_km_matches_bruteforce_oracle_on_corpus,
        test_regressors.test_wls_four_point_oracle,
        test_regressors.test_wls_random_full_rank_instances,
        test_regressors.test_softmax_gradient_matches_central_differences,
        test_costtree.test_expansion_equivalence_by_enumeration,
    ])
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60
    report(5, ok, f"KM, WLS, softmax gradient and expansion oracles in {elapsed:.1f}s"
                  + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def test_criterion_6_structural_invariants(report):
    failed = run_checks([
        test_engine.test_costs_positive_off_argmax_and_match_argmax,
        test_engine.test_argmax_invariance_under_row_shifts,
        test_engine.test_ipcw_variants_identical_without_censoring,
        test_engine.test_d_and_r_agree_on_saturated_toy,
        test_engine.test_backward_fit_is_deterministic,
    ])
    report(6, not failed, "cost matrices, argmax shift invariance, IPCW-I == IPCW-II, D == R, determinism"
                          + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_7_recovery(report):
    failed = run_checks([test_engine.test_recovery_of_generating_rule])
    report(7, not failed, "12-subject two-stage dataset recovered exactly"
                          + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
