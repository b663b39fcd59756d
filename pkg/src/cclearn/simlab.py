"""Two-stage, three-treatment survival simulations and regime evaluation.

Treatments are labelled 0, 1, 2 inside the data-generating formulas and
1, 2, 3 everywhere else (``label = dgp_action + 1``).

Scenario 1 has tree-shaped optimal rules; scenario 2 has linear ones.  Both
draw baseline covariates from N(0, 1), assign treatments through a softmax
mechanism, generate stage times from log-normal models, censor with
C ~ U(0, c0) and let a fraction ``1 - r`` of subjects fail during stage 1.

Counterfactual evaluation rolls a policy forward on fresh covariates with
the outcome noise switched off, so a policy's value is the mean of
``T1 + T2`` at the median of each stage's log-normal.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol

import numpy as np

from .costtree import RegimeTree, TreeNode, TreeParams
from .engine import DynamicRegime, FitConfig, StageModels, backward_fit, parallel_map
from .errors import CCLearnError, InvalidArgumentError
from .regressors import DesignSpec
from .trajectory import StageRecord, Trajectory

log = logging.getLogger(__name__)

TREATMENTS = (1, 2, 3)
NOISE_SD = 0.3
# stage-2 log-time intercept; the same value reproduces the reported optimal
# value in both scenarios
STAGE2_INTERCEPT = 1.26
# censoring bound giving roughly 10% / 20% censoring
C0_FOR_RATE = {1: {10: 35.0, 20: 18.0}, 2: {10: 115.0, 20: 55.0}}
N_COVARIATES = {1: 4, 2: 6}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int
    n: int
    c0: float
    r: float = 1.0
    seed: int = 0
    stage2_intercept: float = STAGE2_INTERCEPT

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise InvalidArgumentError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.n < 1:
            raise InvalidArgumentError("n must be >= 1")
        if not (self.c0 > 0 and math.isfinite(self.c0)):
            raise InvalidArgumentError("c0 must be a positive number")
        if not 0 < self.r <= 1:
            raise InvalidArgumentError("r must lie in (0, 1]")


@dataclass(frozen=True)
class EvalReport:
    v_hat: float
    aa1: float
    aa2: float
    aa: float
    v_opt: float
    v_random: float
    v_behavior: float
    se_v_hat: float
    n_test: int

    def as_row(self) -> dict:
        return asdict(self)


# -- data-generating mechanics -----------------------------------------------


def _draw(rng: np.random.Generator, odds: np.ndarray) -> np.ndarray:
    """Sample one category per row with probabilities proportional to ``odds``."""
    p = odds / odds.sum(axis=1, keepdims=True)
    u = rng.random(odds.shape[0])
    return np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), odds.shape[1] - 1)


def behavior_odds_stage1(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    return np.column_stack([np.ones(n), np.exp(0.5 - 0.5 * X[:, 2]), np.exp(0.5 * X[:, 3])])


def behavior_odds_stage2(X: np.ndarray, T1: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    return np.column_stack([np.ones(n), np.exp(0.2 * T1 - 1.0), np.exp(0.5 * X[:, 3])])


def optimal_stage1(scenario: int, X: np.ndarray) -> np.ndarray:
    """True optimal stage-1 action on the 0/1/2 scale."""
    if scenario == 1:
        return (X[:, 0] > -1) * ((X[:, 1] > -0.5).astype(int) + (X[:, 1] > 0.5))
    d = X[:, 0] - X[:, 1]
    return np.argmax(np.column_stack([np.zeros(len(d)), d, d + X[:, 2]]), axis=1)


def optimal_stage2(scenario: int, X: np.ndarray, T1: np.ndarray) -> np.ndarray:
    if scenario == 1:
        # T1 > 0 always holds; kept to mirror the rule as stated
        return (X[:, 2] > -1) * ((T1 > 0).astype(int) + (T1 > 2))
    s = X[:, 3] + X[:, 4] - X[:, 5]
    return np.argmax(np.column_stack([np.zeros(len(s)), X[:, 3], s]), axis=1)


def stage1_time(scenario: int, X: np.ndarray, a1: np.ndarray, eps: np.ndarray) -> np.ndarray:
    if scenario == 1:
        g = optimal_stage1(1, X)
        return np.exp(1.5 - np.abs(1.5 * X[:, 0] + 2) * (a1 - g) ** 2 + eps)
    d = X[:, 0] - X[:, 1]
    return np.exp(1.5 + 0.5 * (a1 == 1) * d + 0.5 * (a1 == 2) * (d + X[:, 2]) + eps)


def stage2_time(scenario: int, X, T1, a2, eps, intercept: float = STAGE2_INTERCEPT) -> np.ndarray:
    if scenario == 1:
        g = optimal_stage2(1, X, T1)
        return np.exp(intercept - np.abs(1.5 * X[:, 2] - 2) * (a2 - g) ** 2 + eps)
    s = X[:, 3] + X[:, 4] - X[:, 5]
    return np.exp(intercept + 0.5 * (a2 == 1) * X[:, 3] + 0.5 * (a2 == 2) * s + eps)


def covariate_names(scenario: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Stage-1 baseline covariates and the stage-2 covariate (elapsed stage-1 time)."""
    return tuple(f"X{j}" for j in range(1, N_COVARIATES[scenario] + 1)), ("T1",)


def _generate(cfg: ScenarioConfig) -> list[Trajectory]:
    rng = np.random.default_rng(cfg.seed)
    n, s = cfg.n, cfg.scenario
    X = rng.standard_normal((n, N_COVARIATES[s]))
    eps1 = rng.normal(0.0, NOISE_SD, n)
    eps2 = rng.normal(0.0, NOISE_SD, n)
    a1 = _draw(rng, behavior_odds_stage1(X))
    T1 = stage1_time(s, X, a1, eps1)
    a2 = _draw(rng, behavior_odds_stage2(X, T1))
    T2 = stage2_time(s, X, T1, a2, eps2, cfg.stage2_intercept)
    C = rng.uniform(0.0, cfg.c0, n)
    R = rng.random(n) < cfg.r

    out = []
    for i in range(n):
        x1 = tuple(X[i])
        delta1 = int(T1[i] < C[i])
        if R[i] and delta1:
            T = T1[i] + T2[i]
            delta = int(T < C[i])
            y2 = T2[i] if delta else C[i] - T1[i]
            stages = (
                StageRecord(x1, a1[i] + 1, T1[i], 1),
                StageRecord((T1[i],), a2[i] + 1, y2, delta),
            )
        else:
            delta = delta1
            y1 = T1[i] if delta1 else C[i]
            stages = (StageRecord(x1, a1[i] + 1, y1, delta1),)
        # summing the stored rewards keeps the form-1 invariant exact
        total = float(sum(st.reward for st in stages))
        out.append(Trajectory(stages, total, delta, True))
    return out


def generate_scenario1(cfg: ScenarioConfig) -> list[Trajectory]:
    if cfg.scenario != 1:
        raise InvalidArgumentError("generate_scenario1 needs scenario=1")
    return _generate(cfg)


def generate_scenario2(cfg: ScenarioConfig) -> list[Trajectory]:
    if cfg.scenario != 2:
        raise InvalidArgumentError("generate_scenario2 needs scenario=2")
    return _generate(cfg)


def generate(cfg: ScenarioConfig) -> list[Trajectory]:
    return _generate(cfg)


# -- policies ----------------------------------------------------------------


class Policy(Protocol):
    def recommend(self, k: int, history: Mapping[str, object]) -> np.ndarray: ...


def _matrix(history: Mapping[str, object], names) -> np.ndarray:
    return np.column_stack([np.asarray(history[name], dtype=float) for name in names])


@dataclass(frozen=True)
class TrueOptimalRule:
    """The closed-form optimal regime of a scenario, on the 1..3 label scale."""

    scenario: int

    def recommend(self, k: int, history: Mapping[str, object]) -> np.ndarray:
        names, _ = covariate_names(self.scenario)
        X = _matrix(history, names)
        if k == 1:
            return optimal_stage1(self.scenario, X) + 1
        if k == 2:
            T1 = np.asarray(history["T1"], dtype=float)
            return optimal_stage2(self.scenario, X, T1) + 1
        raise InvalidArgumentError(f"stage {k} outside 1..2")


@dataclass
class UniformRandomPolicy:
    rng: np.random.Generator

    def recommend(self, k: int, history: Mapping[str, object]) -> np.ndarray:
        n = len(next(iter(history.values())))
        return self.rng.integers(0, 3, n) + 1


@dataclass
class BehaviorPolicy:
    """The treatment-assignment mechanism used to simulate observational data."""

    scenario: int
    rng: np.random.Generator

    def recommend(self, k: int, history: Mapping[str, object]) -> np.ndarray:
        names, _ = covariate_names(self.scenario)
        X = _matrix(history, names)
        odds = behavior_odds_stage1(X) if k == 1 else behavior_odds_stage2(X, np.asarray(history["T1"], dtype=float))
        return _draw(self.rng, odds) + 1


def true_optimal_regime(scenario: int) -> TrueOptimalRule:
    if scenario not in (1, 2):
        raise InvalidArgumentError(f"scenario must be 1 or 2, got {scenario}")
    return TrueOptimalRule(scenario)


def _leaf(label: int) -> TreeNode:
    weights = tuple(1.0 if a == label else 0.0 for a in TREATMENTS)
    return TreeNode(label, weights, 0.0)


def _split(feature: int, threshold: float, left: TreeNode, right: TreeNode) -> TreeNode:
    return TreeNode(right.label, (0.0,) * len(TREATMENTS), 0.0, feature, threshold, left=left, right=right)


def scenario1_optimal_regime() -> DynamicRegime:
    """Scenario 1's optimal rule written out as a pair of regime trees.

    Node weights and fractions are placeholders (no training data).
    """
    names1, names2 = covariate_names(1)
    stage1 = _split(0, -1.0, _leaf(1), _split(1, -0.5, _leaf(1), _split(1, 0.5, _leaf(2), _leaf(3))))
    features2 = names1 + ("A1",) + names2
    t1 = features2.index("T1")
    stage2 = _split(2, -1.0, _leaf(1), _split(t1, 2.0, _leaf(2), _leaf(3)))
    trees = [
        RegimeTree(stage1, TREATMENTS, names1, stage=1),
        RegimeTree(stage2, TREATMENTS, features2, stage=2),
    ]
    return DynamicRegime(trees, None, {"source": "scenario 1 optimal rule"})


@dataclass
class Rollout:
    value: np.ndarray
    actions1: np.ndarray
    actions2: np.ndarray
    optimal1: np.ndarray
    optimal2: np.ndarray


def rollout(
    policy: Policy,
    scenario: int,
    X: np.ndarray,
    eps1: np.ndarray | None = None,
    eps2: np.ndarray | None = None,
    stage2_intercept: float = STAGE2_INTERCEPT,
) -> Rollout:
    """Follow ``policy`` through both stages on covariates ``X`` (no censoring)."""
    n = X.shape[0]
    eps1 = np.zeros(n) if eps1 is None else eps1
    eps2 = np.zeros(n) if eps2 is None else eps2
    names1, _ = covariate_names(scenario)
    h1 = {name: X[:, j] for j, name in enumerate(names1)}
    a1 = np.asarray(policy.recommend(1, h1))
    if not np.all(np.isin(a1, TREATMENTS)):
        raise InvalidArgumentError("policy produced a stage-1 action outside 1..3")
    T1 = stage1_time(scenario, X, a1 - 1, eps1)
    h2 = dict(h1, A1=a1.astype(float), T1=T1)
    a2 = np.asarray(policy.recommend(2, h2))
    if not np.all(np.isin(a2, TREATMENTS)):
        raise InvalidArgumentError("policy produced a stage-2 action outside 1..3")
    T2 = stage2_time(scenario, X, T1, a2 - 1, eps2, stage2_intercept)
    return Rollout(T1 + T2, a1, a2, optimal_stage1(scenario, X) + 1, optimal_stage2(scenario, X, T1) + 1)


def evaluate_regime(
    regime: Policy,
    scenario: int,
    n_test: int = 10000,
    seed: int = 0,
    noise: bool = False,
    stage2_intercept: float = STAGE2_INTERCEPT,
) -> EvalReport:
    """Counterfactual value and assignment accuracy on a fresh test set.

    The optimal, uniform-random and behaviour-policy baselines are rolled out
    on the same covariates.
    """
    if n_test < 1:
        raise InvalidArgumentError("n_test must be >= 1")
    if scenario not in (1, 2):
        raise InvalidArgumentError(f"scenario must be 1 or 2, got {scenario}")
    if isinstance(regime, DynamicRegime):
        _check_regime_features(regime, scenario)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_test, N_COVARIATES[scenario]))
    if noise:
        eps1, eps2 = rng.normal(0, NOISE_SD, n_test), rng.normal(0, NOISE_SD, n_test)
    else:
        eps1 = eps2 = None
    policy_rng, random_rng, behavior_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    if isinstance(regime, (UniformRandomPolicy, BehaviorPolicy)):
        regime.rng = policy_rng

    run = rollout(regime, scenario, X, eps1, eps2, stage2_intercept)
    opt = rollout(TrueOptimalRule(scenario), scenario, X, eps1, eps2, stage2_intercept)
    rand = rollout(UniformRandomPolicy(random_rng), scenario, X, eps1, eps2, stage2_intercept)
    behav = rollout(BehaviorPolicy(scenario, behavior_rng), scenario, X, eps1, eps2, stage2_intercept)

    hit1 = run.actions1 == run.optimal1
    hit2 = run.actions2 == run.optimal2
    return EvalReport(
        v_hat=float(run.value.mean()),
        aa1=float(hit1.mean()),
        aa2=float(hit2.mean()),
        aa=float((hit1 & hit2).mean()),
        v_opt=float(opt.value.mean()),
        v_random=float(rand.value.mean()),
        v_behavior=float(behav.value.mean()),
        se_v_hat=float(run.value.std(ddof=1) / math.sqrt(n_test)) if n_test > 1 else 0.0,
        n_test=n_test,
    )


def _check_regime_features(regime: DynamicRegime, scenario: int) -> None:
    if regime.K != 2:
        raise InvalidArgumentError(f"scenario regimes have 2 stages, got {regime.K}")
    names1, names2 = covariate_names(scenario)
    available = (set(names1), set(names1) | set(names2) | {"A1"})
    for k, tree in enumerate(regime.stage_trees):
        extra = set(tree.feature_names) - available[k]
        if extra:
            raise InvalidArgumentError(
                f"stage {k + 1} tree uses feature(s) {sorted(extra)} unknown to scenario {scenario}"
            )


# -- fitting configuration ---------------------------------------------------


def scenario_fit_config(
    scenario: int,
    ipcw_variant: str = "I",
    induction: str = "D",
    seed: int = 0,
    tree: TreeParams | None = None,
    transform: str | None = None,
) -> FitConfig:
    """Model formulas used for the simulation studies.

    Scenario 1 fits the Q-function on the identity scale, scenario 2 on the
    log scale.  Propensity models include every covariate, which nests the
    true assignment mechanism.
    """
    base, stage2 = covariate_names(scenario)
    hist2 = base + stage2
    if transform is None:
        transform = "identity" if scenario == 1 else "log"
    stages = (
        StageModels(
            DesignSpec(base, base, transform),
            propensity_main=base,
            classification=base,
        ),
        StageModels(
            DesignSpec(hist2, hist2, transform),
            propensity_main=hist2,
            classification=base + ("A1",) + stage2,
        ),
    )
    return FitConfig(
        K=2,
        treatment_sets=(TREATMENTS, TREATMENTS),
        covariate_names=(base, stage2),
        stages=stages,
        ipcw_variant=ipcw_variant,
        induction=induction,
        tree=tree or TreeParams(),
        seed=seed,
    )


# -- benchmark ---------------------------------------------------------------

ROW_KEYS = ("n", "cr", "variant", "induction", "r", "c0")


@dataclass(frozen=True)
class BenchmarkRow:
    scenario: int
    n: int
    cr: int = 10
    variant: str = "I"
    induction: str = "D"
    r: float = 1.0
    c0: float | None = None

    def __post_init__(self):
        if self.c0 is None:
            try:
                object.__setattr__(self, "c0", C0_FOR_RATE[self.scenario][self.cr])
            except KeyError:
                raise InvalidArgumentError(
                    f"no censoring bound known for scenario {self.scenario}, cr={self.cr}; pass c0"
                ) from None
        if self.variant not in ("I", "II"):
            raise InvalidArgumentError(f"variant must be I or II, got {self.variant!r}")
        if self.induction not in ("D", "R"):
            raise InvalidArgumentError(f"induction must be D or R, got {self.induction!r}")


def parse_row_spec(scenario: int, spec: str) -> list[BenchmarkRow]:
    """Parse ``"n=1000,cr=10,variant=I,induction=D,r=1"``; rows separated by ``;``."""
    rows = []
    for chunk in filter(None, (c.strip() for c in spec.split(";"))):
        kwargs: dict = {}
        for item in filter(None, (p.strip() for p in chunk.split(","))):
            key, sep, value = item.partition("=")
            key = key.strip().lower()
            if not sep or key not in ROW_KEYS:
                raise InvalidArgumentError(f"unknown row spec key {key!r} (allowed: {', '.join(ROW_KEYS)})")
            value = value.strip()
            try:
                if key in ("n", "cr"):
                    kwargs[key] = int(value)
                elif key in ("r", "c0"):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value.upper()
            except ValueError:
                raise InvalidArgumentError(f"bad value for {key}: {value!r}") from None
        if "n" not in kwargs:
            raise InvalidArgumentError("row spec needs n=...")
        rows.append(BenchmarkRow(scenario, **kwargs))
    if not rows:
        raise InvalidArgumentError("empty row spec")
    return rows


@dataclass(frozen=True)
class ReplicateResult:
    rep: int
    report: EvalReport | None
    censoring_rate: float | None
    error: str | None = None


@dataclass(frozen=True)
class BenchmarkSummary:
    row: BenchmarkRow
    reps: int
    n_ok: int
    aa1: float
    aa2: float
    aa: float
    v_hat: float
    v_opt: float
    v_random: float
    se_aa1: float
    se_aa2: float
    se_aa: float
    se_v_hat: float
    censoring_rate: float
    failures: tuple[str, ...] = field(default=())
    replicates: tuple[ReplicateResult, ...] = field(default=(), repr=False)

    CSV_FIELDS = (
        "scenario", "n", "CR", "c0", "variant", "induction", "r", "reps", "n_ok",
        "AA1", "AA2", "AA", "V_hat", "V_opt", "V_random",
        "SE_AA1", "SE_AA2", "SE_AA", "SE_V_hat", "observed_CR",
    )

    def csv_row(self) -> dict:
        r = self.row
        return dict(zip(self.CSV_FIELDS, (
            r.scenario, r.n, r.cr, r.c0, r.variant, r.induction, r.r, self.reps, self.n_ok,
            *(round(v, 6) for v in (
                self.aa1, self.aa2, self.aa, self.v_hat, self.v_opt, self.v_random,
                self.se_aa1, self.se_aa2, self.se_aa, self.se_v_hat, self.censoring_rate,
            )),
        )))


@dataclass(frozen=True)
class _Task:
    row: BenchmarkRow
    rep: int
    seed: int
    n_test: int
    tree: TreeParams | None = None


def _replicate(task: _Task) -> ReplicateResult:
    data_ss, fit_ss, eval_ss = np.random.SeedSequence(task.seed, spawn_key=(task.rep,)).spawn(3)
    row = task.row
    cfg = ScenarioConfig(row.scenario, row.n, row.c0, row.r, int(data_ss.generate_state(1)[0]))
    try:
        data = generate(cfg)
        fit_cfg = scenario_fit_config(row.scenario, row.variant, row.induction, int(fit_ss.generate_state(1)[0]), task.tree)
        regime = backward_fit(data, fit_cfg)
        report = evaluate_regime(regime, row.scenario, task.n_test, int(eval_ss.generate_state(1)[0]))
    except CCLearnError as exc:
        return ReplicateResult(task.rep, None, None, f"{type(exc).__name__}: {exc}")
    censoring = 1.0 - float(np.mean([t.event for t in data]))
    return ReplicateResult(task.rep, report, censoring)


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def run_benchmark(
    row: BenchmarkRow,
    reps: int,
    seed: int = 0,
    n_test: int = 10000,
    workers: int | None = None,
    tree: TreeParams | None = None,
) -> BenchmarkSummary:
    """Monte Carlo replicates of simulate -> fit -> evaluate, aggregated."""
    if reps < 1:
        raise InvalidArgumentError("reps must be >= 1")
    tasks = [_Task(row, rep, seed, n_test, tree) for rep in range(reps)]
    results = parallel_map(_replicate, tasks, workers)
    ok = [r for r in results if r.report is not None]
    failures = tuple(f"rep {r.rep}: {r.error}" for r in results if r.report is None)
    for f in failures:
        log.warning("replicate failed: %s", f)

    def col(name):
        return [getattr(r.report, name) for r in ok]

    aa1, se_aa1 = _mean_se(col("aa1"))
    aa2, se_aa2 = _mean_se(col("aa2"))
    aa, se_aa = _mean_se(col("aa"))
    v_hat, se_v = _mean_se(col("v_hat"))
    v_opt, _ = _mean_se(col("v_opt"))
    v_rand, _ = _mean_se(col("v_random"))
    cr, _ = _mean_se([r.censoring_rate for r in ok])
    return BenchmarkSummary(
        row, reps, len(ok), aa1, aa2, aa, v_hat, v_opt, v_rand,
        se_aa1, se_aa2, se_aa, se_v, cr, failures, tuple(results),
    )


def summaries_to_csv(summaries) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BenchmarkSummary.CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for s in summaries:
        writer.writerow(s.csv_row())
    return buf.getvalue()
