"""Backward induction for censored C-learning.

For each stage, from the last to the first, the engine

1. fits the Q-function by IPCW least squares on subjects who reached the
   stage and have a positive censoring weight,
2. fits a softmax propensity model,
3. forms per-subject AIPW pseudo-outcomes for every treatment, turns them
   into a best label and a non-negative cost row,
4. grows a cost-sensitive tree on the expanded data, and
5. propagates the value function by direct maximisation ("D") or by adding
   the estimated regret to the downstream value ("R").

Subjects whose trajectory ended before a stage carry their total observed
time as value and do not enter that stage's models.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Sequence

import numpy as np

from .costtree import CostMatrix, RegimeTree, TreeParams, expand_dataset, fit_cost_sensitive_tree
from .errors import DegenerateFitError, InvalidArgumentError
from .regressors import (
    PROPENSITY_CLIP,
    DesignSpec,
    PropensityModel,
    QModel,
    clip_propensities,
    fit_propensity,
    fit_q_model,
)
from .trajectory import (
    DEFAULT_KM_FLOOR,
    CompletedTrajectory,
    KMCurve,
    Trajectory,
    censoring_curve,
    complete_trajectory,
)

log = logging.getLogger(__name__)

REGIME_FORMAT = "cclearn-regime"
REGIME_VERSION = 1


def treatment_name(k: int) -> str:
    return f"A{k}"


@dataclass(frozen=True)
class StageModels:
    """Model formulas for one stage, by feature name."""

    q: DesignSpec
    propensity_main: tuple[str, ...] = ()
    propensity_interaction: tuple[str, ...] = ()
    classification: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("propensity_main", "propensity_interaction", "classification", "categorical"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.classification:
            raise InvalidArgumentError("each stage needs at least one classification feature")
        stray = set(self.categorical) - set(self.classification)
        if stray:
            raise InvalidArgumentError(f"categorical features {sorted(stray)} are not classification features")

    @property
    def features(self) -> tuple[str, ...]:
        names = self.q.features + self.propensity_main + self.propensity_interaction + self.classification
        return tuple(dict.fromkeys(names))

    def to_dict(self) -> dict:
        return {
            "q": self.q.to_dict(),
            "propensity_main": list(self.propensity_main),
            "propensity_interaction": list(self.propensity_interaction),
            "classification": list(self.classification),
            "categorical": list(self.categorical),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageModels":
        return cls(
            DesignSpec.from_dict(d["q"]),
            tuple(d.get("propensity_main", ())),
            tuple(d.get("propensity_interaction", ())),
            tuple(d["classification"]),
            tuple(d.get("categorical", ())),
        )


@dataclass(frozen=True)
class FitConfig:
    K: int
    treatment_sets: tuple[tuple[int, ...], ...]
    covariate_names: tuple[tuple[str, ...], ...]
    stages: tuple[StageModels, ...]
    ipcw_variant: Literal["I", "II"] = "I"
    induction: Literal["D", "R"] = "D"
    tree: TreeParams = field(default_factory=TreeParams)
    seed: int = 0
    km_floor: float = DEFAULT_KM_FLOOR
    propensity_clip: tuple[float, float] = PROPENSITY_CLIP
    softmax_max_iter: int = 5000
    softmax_tol: float = 1e-6
    elapsed_offset: bool = True

    def __post_init__(self):
        object.__setattr__(self, "treatment_sets", tuple(tuple(sorted(int(a) for a in s)) for s in self.treatment_sets))
        object.__setattr__(self, "covariate_names", tuple(tuple(s) for s in self.covariate_names))
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "propensity_clip", tuple(float(v) for v in self.propensity_clip))
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        for label, seq in (("treatment_sets", self.treatment_sets), ("covariate_names", self.covariate_names), ("stages", self.stages)):
            if len(seq) != self.K:
                raise InvalidArgumentError(f"{label} must have one entry per stage ({self.K})")
        if any(len(s) < 2 or len(set(s)) != len(s) for s in self.treatment_sets):
            raise InvalidArgumentError("each stage needs at least two distinct treatments")
        if self.ipcw_variant not in ("I", "II"):
            raise InvalidArgumentError(f"unknown IPCW variant {self.ipcw_variant!r}")
        if self.induction not in ("D", "R"):
            raise InvalidArgumentError(f"unknown induction method {self.induction!r}")
        seen: set[str] = set()
        for k in range(1, self.K + 1):
            for name in self.covariate_names[k - 1]:
                if name in seen or name.startswith("A") and name[1:].isdigit():
                    raise InvalidArgumentError(f"covariate name {name!r} is duplicated or reserved")
                seen.add(name)
            available = set(self.history_names(k))
            missing = [f for f in self.stages[k - 1].features if f not in available]
            if missing:
                raise InvalidArgumentError(f"stage {k} models use unknown feature(s) {missing}")

    def history_names(self, k: int) -> tuple[str, ...]:
        """Feature names available at stage ``k``: covariates so far and earlier treatments."""
        names: list[str] = []
        for j in range(1, k + 1):
            if j > 1:
                names.append(treatment_name(j - 1))
            names.extend(self.covariate_names[j - 1])
        return tuple(names)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "treatment_sets": [list(s) for s in self.treatment_sets],
            "covariate_names": [list(s) for s in self.covariate_names],
            "stages": [s.to_dict() for s in self.stages],
            "ipcw_variant": self.ipcw_variant,
            "induction": self.induction,
            "tree": self.tree.to_dict(),
            "seed": self.seed,
            "km_floor": self.km_floor,
            "propensity_clip": list(self.propensity_clip),
            "softmax_max_iter": self.softmax_max_iter,
            "softmax_tol": self.softmax_tol,
            "elapsed_offset": self.elapsed_offset,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitConfig":
        return cls(
            K=int(d["K"]),
            treatment_sets=tuple(tuple(s) for s in d["treatment_sets"]),
            covariate_names=tuple(tuple(s) for s in d["covariate_names"]),
            stages=tuple(StageModels.from_dict(s) for s in d["stages"]),
            ipcw_variant=d.get("ipcw_variant", "I"),
            induction=d.get("induction", "D"),
            tree=TreeParams(**d.get("tree", {})),
            seed=int(d.get("seed", 0)),
            km_floor=float(d.get("km_floor", DEFAULT_KM_FLOOR)),
            propensity_clip=tuple(d.get("propensity_clip", PROPENSITY_CLIP)),
            softmax_max_iter=int(d.get("softmax_max_iter", 5000)),
            softmax_tol=float(d.get("softmax_tol", 1e-6)),
            elapsed_offset=bool(d.get("elapsed_offset", True)),
        )


@dataclass
class StageFit:
    q_model: QModel
    propensity: PropensityModel
    cost_matrix: CostMatrix
    value_hat: np.ndarray
    regime_tree: RegimeTree


@dataclass
class DynamicRegime:
    stage_trees: list[RegimeTree]
    config: FitConfig | None = None
    diagnostics: dict = field(default_factory=dict)
    stage_fits: list[StageFit] = field(default_factory=list, repr=False, compare=False)

    @property
    def K(self) -> int:
        return len(self.stage_trees)

    def recommend(self, k: int, history: Mapping[str, object]) -> np.ndarray:
        """Treatments recommended at stage ``k`` (1-based) for a batch of histories."""
        if not 1 <= k <= self.K:
            raise InvalidArgumentError(f"stage {k} outside 1..{self.K}")
        return self.stage_trees[k - 1].predict_history(history)

    def to_dict(self) -> dict:
        return {
            "format": REGIME_FORMAT,
            "version": REGIME_VERSION,
            "config": self.config.to_dict() if self.config is not None else None,
            "stages": [t.to_dict() for t in self.stage_trees],
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DynamicRegime":
        if d.get("format") != REGIME_FORMAT:
            raise InvalidArgumentError("not a regime document")
        config = FitConfig.from_dict(d["config"]) if d.get("config") else None
        return cls([RegimeTree.from_dict(t) for t in d["stages"]], config, dict(d.get("diagnostics", {})))

    @classmethod
    def from_json(cls, text: str) -> "DynamicRegime":
        return cls.from_dict(json.loads(text))


# -- per-stage operations ----------------------------------------------------


def aipw_pseudo_outcomes(observed, q_values, propensities, ipcw, v_next, treatments: Sequence[int]) -> np.ndarray:
    """Per-subject augmented IPW value of each treatment.

    Entry ``(i, s)`` is ``1{A_i=s} w_i V_i / pi_is + (1 - 1{A_i=s}/pi_is) Q_is``
    where ``w_i`` is the subject's censoring weight (0 when censored).
    """
    observed = np.asarray(observed).reshape(-1)
    Q = np.asarray(q_values, dtype=float)
    P = np.asarray(propensities, dtype=float)
    n, m = observed.shape[0], len(treatments)
    if P.ndim != 2 or P.shape[1] != m:
        raise InvalidArgumentError(f"propensities need one column per treatment ({m})")
    if Q.shape != (n, m) or P.shape[0] != n:
        raise InvalidArgumentError("q_values/propensities must be n x m")
    if np.any(P <= 0):
        raise InvalidArgumentError("propensities must be positive")
    w = np.asarray(ipcw, dtype=float).reshape(-1)
    v = np.asarray(v_next, dtype=float).reshape(-1)
    ind = (observed[:, None] == np.asarray(treatments)[None, :]).astype(float)
    if not np.all(ind.sum(axis=1) == 1):
        raise InvalidArgumentError("observed treatment outside the treatment set")
    ratio = ind / P
    return ratio * (w * v)[:, None] + (1.0 - ratio) * Q


def estimate_labels_and_contrasts(
    pseudo,
    treatments: Sequence[int],
    features=None,
    feature_names: Sequence[str] = (),
) -> CostMatrix:
    """Best label = row argmax (ties to the lower label); cost = gap to the row max."""
    pseudo = np.asarray(pseudo, dtype=float)
    if not np.all(np.isfinite(pseudo)):
        raise InvalidArgumentError("pseudo-outcomes must be finite")
    best_col = np.argmax(pseudo, axis=1)
    rows = np.arange(pseudo.shape[0])
    costs = pseudo[rows, best_col][:, None] - pseudo
    labels = np.asarray(treatments)[best_col]
    if features is None:
        features = np.zeros((pseudo.shape[0], 0))
    return CostMatrix(features, costs, labels, tuple(treatments), tuple(feature_names))


def count_label_ties(pseudo) -> int:
    pseudo = np.asarray(pseudo, dtype=float)
    return int(np.count_nonzero((pseudo == pseudo.max(axis=1, keepdims=True)).sum(axis=1) > 1))


def value_d_method(q_model: QModel, histories: Mapping[str, object]) -> np.ndarray:
    return q_model.predict_all(histories).max(axis=1)


def value_r_method(q_model: QModel, histories, observed, best_labels, v_next) -> np.ndarray:
    regret = q_model.predict(histories, best_labels) - q_model.predict(histories, observed)
    return np.asarray(v_next, dtype=float) + regret


# -- data assembly -----------------------------------------------------------


@dataclass
class _Arrays:
    kbar: np.ndarray
    total_time: np.ndarray
    event: np.ndarray
    actions: list[np.ndarray]
    covariates: list[np.ndarray]
    stage_delta: list[np.ndarray] | None
    cum_reward: list[np.ndarray] | None


def _assemble(completed: Sequence[CompletedTrajectory], config: FitConfig) -> _Arrays:
    n, K = len(completed), config.K
    form1 = all(c.has_intermediate_rewards for c in completed)
    covariates = []
    for k in range(K):
        p = len(config.covariate_names[k])
        mat = np.full((n, p), np.nan)
        for i, c in enumerate(completed):
            if c.reached(k + 1):
                x = c.stages[k].covariates
                if len(x) != p:
                    raise InvalidArgumentError(
                        f"subject {i} stage {k + 1} has {len(x)} covariates, expected {p}"
                    )
                mat[i] = x
        covariates.append(mat)
    actions = [np.array([c.stages[k].treatment for c in completed]) for k in range(K)]
    stage_delta = cum_reward = None
    if form1:
        stage_delta = [np.array([c.stages[k].censor_indicator for c in completed]) for k in range(K)]
        rewards = np.array([[s.reward for s in c.stages] for c in completed])
        cum = np.cumsum(rewards, axis=1)
        cum_reward = [cum[:, k] for k in range(K)]
    return _Arrays(
        np.array([c.n_observed for c in completed]),
        np.array([c.total_time for c in completed]),
        np.array([c.event for c in completed]),
        actions,
        covariates,
        stage_delta,
        cum_reward,
    )


def _history(arr: _Arrays, config: FitConfig, k: int, idx: np.ndarray) -> dict[str, np.ndarray]:
    h: dict[str, np.ndarray] = {}
    for j in range(1, k + 1):
        if j > 1:
            h[treatment_name(j - 1)] = arr.actions[j - 2][idx].astype(float)
        for c, name in enumerate(config.covariate_names[j - 1]):
            h[name] = arr.covariates[j - 1][idx, c]
    return h


def stage_ipcw(arr: _Arrays, km: KMCurve, k: int, variant: str) -> tuple[np.ndarray, int]:
    """Censoring weights for every subject at stage ``k`` and the count hitting the KM floor."""
    if variant == "I":
        if arr.stage_delta is None:
            raise InvalidArgumentError("IPCW-I needs intermediate rewards (form-1 data)")
        delta, at = arr.stage_delta[k - 1], arr.cum_reward[k - 1]
    else:
        delta, at = arr.event, arr.total_time
    raw = km.raw(at)
    s = np.maximum(raw, km.floor_value)
    floor_hits = int(np.count_nonzero((delta == 1) & (raw < km.floor_value)))
    return np.where(delta == 1, 1.0 / s, 0.0), floor_hits


# -- orchestration -----------------------------------------------------------


def backward_fit(dataset: Sequence[Trajectory], config: FitConfig) -> DynamicRegime:
    """Estimate a K-stage tree regime from censored trajectories."""
    if not dataset:
        raise InvalidArgumentError("dataset is empty")
    K = config.K
    rng = np.random.default_rng(config.seed)
    completed = [complete_trajectory(t, K, config.treatment_sets, rng) for t in dataset]
    km = censoring_curve(dataset, config.km_floor)
    arr = _assemble(completed, config)

    v_next = arr.total_time.astype(float).copy()
    trees: list[RegimeTree | None] = [None] * K
    fits: list[StageFit | None] = [None] * K
    stage_diag: list[dict | None] = [None] * K
    for k in range(K, 0, -1):
        models = config.stages[k - 1]
        treatments = config.treatment_sets[k - 1]
        idx = np.nonzero(arr.kbar >= k)[0]
        if idx.size == 0:
            raise DegenerateFitError("no subject reached this stage", k)
        H = _history(arr, config, k, idx)
        A = arr.actions[k - 1][idx]
        w_all, floor_hits = stage_ipcw(arr, km, k, config.ipcw_variant)
        w = w_all[idx]
        v = v_next[idx]
        # time already spent before stage k; the Q-model sees only what remains
        offset = np.zeros(idx.size)
        if config.elapsed_offset and k > 1 and arr.cum_reward is not None:
            offset = arr.cum_reward[k - 2][idx]

        fit_rows = w > 0
        width = models.q.width(len(treatments))
        if np.count_nonzero(fit_rows) < width:
            raise DegenerateFitError(
                f"{np.count_nonzero(fit_rows)} uncensored subjects at risk, Q-model needs {width}", k
            )
        q_model = fit_q_model(
            models.q,
            {name: col[fit_rows] for name, col in H.items()},
            A[fit_rows],
            v[fit_rows] - offset[fit_rows],
            w[fit_rows],
            treatments,
            stage=k,
        )
        propensity = fit_propensity(
            H,
            A,
            treatments,
            models.propensity_main,
            models.propensity_interaction,
            stage=k,
            max_iter=config.softmax_max_iter,
            tol=config.softmax_tol,
        )
        q_values = q_model.predict_all(H) + offset[:, None]
        pi, n_clipped = clip_propensities(propensity.predict(H), config.propensity_clip)
        pseudo = aipw_pseudo_outcomes(A, q_values, pi, w, v, treatments)
        features = np.column_stack([H[f] for f in models.classification])
        cm = estimate_labels_and_contrasts(pseudo, treatments, features, models.classification)
        tree = fit_cost_sensitive_tree(expand_dataset(cm), config.tree, models.categorical, stage=k)

        v_k = arr.total_time.astype(float).copy()
        if config.induction == "D":
            v_k[idx] = q_values.max(axis=1)
        else:
            v_k[idx] = value_r_method(q_model, H, A, cm.best_labels, v)
        if not np.all(np.isfinite(v_k)):
            raise DegenerateFitError("non-finite value estimates", k)

        trees[k - 1] = tree
        fits[k - 1] = StageFit(q_model, propensity, cm, v_k, tree)
        stage_diag[k - 1] = {
            "stage": k,
            "n_at_risk": int(idx.size),
            "n_q_fit": int(np.count_nonzero(fit_rows)),
            "label_ties": count_label_ties(pseudo),
            "propensity_truncations": n_clipped,
            "km_floor_hits": floor_hits,
            "softmax_converged": propensity.converged,
            "softmax_iterations": propensity.n_iter,
            "tree_depth": tree.depth,
            "tree_leaves": tree.n_leaves,
            "degenerate_tree": tree.degenerate,
        }
        log.debug("stage %d: %s", k, stage_diag[k - 1])
        v_next = v_k

    diagnostics = {
        "n_subjects": len(dataset),
        "censoring_rate": float(1.0 - arr.event.mean()),
        "stages": stage_diag,
    }
    return DynamicRegime(trees, config, diagnostics, fits)


def replicate_workers() -> int:
    """Worker count for replicate-level parallelism (``CCL_THREADS`` caps it)."""
    cap = os.environ.get("CCL_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = max(1, min(n, int(cap)))
        except ValueError:
            raise InvalidArgumentError(f"CCL_THREADS must be an integer, got {cap!r}") from None
    return n


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Order-preserving map; runs in worker processes when more than one worker is allowed.

    ``fn`` must be picklable and derive all randomness from its argument.
    """
    workers = replicate_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
