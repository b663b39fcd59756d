"""Multi-stage censored survival trajectories.

A subject is followed through at most ``K`` treatment stages.  Each stage
records the covariates collected at its start, the treatment received and,
when intermediate rewards are available (form 1), the time spent in the
stage together with a stage-level censoring indicator.  Form-2 data only
carries the overall observed time and event indicator.

Short trajectories are padded to full length by :func:`complete_trajectory`
so that backward induction can run over a fixed number of stages.  The
censoring distribution is estimated once per dataset with a Kaplan-Meier
curve, and :func:`ipcw_weight` turns it into inverse probability of
censoring weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import InvalidArgumentError

IPCWVariant = Literal["I", "II"]

DEFAULT_KM_FLOOR = 0.05
_SUM_TOL = 1e-9


@dataclass(frozen=True)
class StageRecord:
    """Data observed in one stage: covariates, treatment, reward, censoring."""

    covariates: tuple[float, ...]
    treatment: int
    reward: float | None = None
    censor_indicator: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(float(x) for x in self.covariates))
        object.__setattr__(self, "treatment", int(self.treatment))
        if self.reward is not None:
            reward = float(self.reward)
            if not np.isfinite(reward) or reward < 0:
                raise InvalidArgumentError(f"stage reward must be finite and >= 0, got {self.reward}")
            object.__setattr__(self, "reward", reward)
        if self.censor_indicator is not None:
            if self.censor_indicator not in (0, 1):
                raise InvalidArgumentError("stage censoring indicator must be 0 or 1")
            object.__setattr__(self, "censor_indicator", int(self.censor_indicator))


@dataclass(frozen=True)
class Trajectory:
    """One subject's observed trajectory over ``n_stages`` stages.

    ``total_time`` is the observed time min(T, C) and ``event`` the overall
    indicator I(T <= C).
    """

    stages: tuple[StageRecord, ...]
    total_time: float
    event: int
    has_intermediate_rewards: bool

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "total_time", float(self.total_time))
        object.__setattr__(self, "event", int(self.event))
        if not stages:
            raise InvalidArgumentError("a trajectory needs at least one stage")
        if not np.isfinite(self.total_time) or self.total_time < 0:
            raise InvalidArgumentError("total_time must be finite and >= 0")
        if self.event not in (0, 1):
            raise InvalidArgumentError("event indicator must be 0 or 1")
        if self.has_intermediate_rewards:
            self._check_form1()

    def _check_form1(self):
        rewards = [s.reward for s in self.stages]
        deltas = [s.censor_indicator for s in self.stages]
        if any(r is None for r in rewards) or any(d is None for d in deltas):
            raise InvalidArgumentError("form-1 trajectories need a reward and censoring indicator per stage")
        if abs(sum(rewards) - self.total_time) > _SUM_TOL * max(1.0, self.total_time):
            raise InvalidArgumentError(
                f"stage rewards sum to {sum(rewards)!r}, expected total_time {self.total_time!r}"
            )
        if any(later > earlier for earlier, later in zip(deltas, deltas[1:])):
            raise InvalidArgumentError("stage censoring indicators must be non-increasing")
        if deltas[-1] != self.event:
            raise InvalidArgumentError("overall event indicator must equal the last stage's indicator")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def check_treatments(self, treatment_sets: Sequence[Sequence[int]]) -> None:
        if self.n_stages > len(treatment_sets):
            raise InvalidArgumentError(
                f"trajectory has {self.n_stages} stages but only {len(treatment_sets)} treatment sets"
            )
        for k, (stage, allowed) in enumerate(zip(self.stages, treatment_sets), start=1):
            if stage.treatment not in allowed:
                raise InvalidArgumentError(
                    f"stage {k} treatment {stage.treatment} not in {tuple(allowed)}"
                )


@dataclass(frozen=True)
class CompletedTrajectory:
    """A trajectory padded to exactly ``K`` stages.

    Stages beyond the observed count have empty covariates, zero reward, a
    uniformly drawn treatment and inherit the last observed censoring
    indicator.
    """

    stages: tuple[StageRecord, ...]
    total_time: float
    source: Trajectory = field(repr=False)

    @property
    def n_observed(self) -> int:
        return self.source.n_stages

    @property
    def event(self) -> int:
        return self.source.event

    @property
    def has_intermediate_rewards(self) -> bool:
        return self.source.has_intermediate_rewards

    def reached(self, k: int) -> bool:
        """Whether stage ``k`` (1-based) was actually observed."""
        return k <= self.n_observed

    def cumulative_reward(self, k: int) -> float:
        if not self.has_intermediate_rewards:
            raise InvalidArgumentError("cumulative rewards need form-1 data")
        return float(sum(s.reward for s in self.stages[:k]))


@dataclass(frozen=True)
class KMCurve:
    """Right-continuous step function estimated by the product-limit method.

    ``survival_values[j]`` is the value on ``[jump_times[j], jump_times[j+1])``.
    The raw estimate can reach 0 after the last observation; evaluation
    truncates from below at ``floor_value``.
    """

    jump_times: np.ndarray
    survival_values: np.ndarray
    floor_value: float = DEFAULT_KM_FLOOR

    def __post_init__(self):
        jt = np.array(self.jump_times, dtype=float)
        sv = np.array(self.survival_values, dtype=float)
        if jt.shape != sv.shape or jt.ndim != 1:
            raise InvalidArgumentError("jump_times and survival_values must be equal-length vectors")
        if np.any(np.diff(jt) <= 0):
            raise InvalidArgumentError("jump_times must be strictly increasing")
        if np.any(sv < 0) or np.any(sv > 1) or np.any(np.diff(sv) > 0):
            raise InvalidArgumentError("survival values must be non-increasing within [0, 1]")
        if not 0 <= self.floor_value <= 1:
            raise InvalidArgumentError("floor_value must lie in [0, 1]")
        jt.flags.writeable = False
        sv.flags.writeable = False
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "survival_values", sv)

    def raw(self, t):
        """Untruncated step-function value(s) at ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        values = np.concatenate(([1.0], self.survival_values))
        return values[idx]

    def __call__(self, t):
        return np.maximum(self.raw(t), self.floor_value)


def kaplan_meier(times, events, floor: float = DEFAULT_KM_FLOOR) -> KMCurve:
    """Product-limit estimate of the survival function of the event time.

    ``events[i] == 1`` marks an event at ``times[i]``; when estimating the
    censoring distribution pass ``1 - delta``.  Subjects without an event at
    a tied time remain in the risk set at that time.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if times.ndim != 1 or times.size == 0:
        raise InvalidArgumentError("kaplan_meier needs a non-empty vector of times")
    if events.shape != times.shape:
        raise InvalidArgumentError("times and events must have equal length")
    if not np.all(np.isfinite(times)) or np.any(times < 0):
        raise InvalidArgumentError("times must be finite and non-negative")
    if not np.all(np.isin(events, (0, 1))):
        raise InvalidArgumentError("events must be binary")
    events = events.astype(bool)

    event_times, d = np.unique(times[events], return_counts=True)
    sorted_times = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_times, event_times, side="left")
    survival = np.cumprod(1.0 - d / at_risk)
    return KMCurve(event_times, survival, floor)


def evaluate_km(curve: KMCurve, t: float) -> float:
    if t < 0:
        raise InvalidArgumentError("t must be non-negative")
    return float(curve(t))


def censoring_curve(trajectories: Sequence[Trajectory], floor: float = DEFAULT_KM_FLOOR) -> KMCurve:
    """KM estimate of the censoring survival function S_C from observed data."""
    times = [tr.total_time for tr in trajectories]
    censored = [1 - tr.event for tr in trajectories]
    return kaplan_meier(times, censored, floor)


def complete_trajectory(
    traj: Trajectory,
    K: int,
    treatment_sets: Sequence[Sequence[int]],
    rng: np.random.Generator,
) -> CompletedTrajectory:
    """Pad ``traj`` to ``K`` stages for the auxiliary problem."""
    if K < traj.n_stages:
        raise InvalidArgumentError(f"K={K} is smaller than the observed stage count {traj.n_stages}")
    if len(treatment_sets) < K:
        raise InvalidArgumentError(f"need {K} treatment sets, got {len(treatment_sets)}")
    traj.check_treatments(treatment_sets)

    stages = list(traj.stages)
    if traj.has_intermediate_rewards:
        last_delta = traj.stages[-1].censor_indicator
        reward = 0.0
    else:
        last_delta = None
        reward = 0.0
    for j in range(traj.n_stages, K):
        allowed = tuple(treatment_sets[j])
        action = allowed[int(rng.integers(len(allowed)))]
        stages.append(StageRecord((), action, reward, last_delta))
    return CompletedTrajectory(tuple(stages), traj.total_time, traj)


def ipcw_weight(traj: CompletedTrajectory, k: int, curve: KMCurve, variant: IPCWVariant) -> float:
    """Inverse probability of censoring weight for stage ``k`` (1-based).

    Variant ``"I"`` uses the stage indicator and cumulative reward up to
    stage ``k``; variant ``"II"`` uses the overall indicator and total time.
    """
    if not 1 <= k <= len(traj.stages):
        raise InvalidArgumentError(f"stage {k} out of range")
    if variant == "I":
        if not traj.has_intermediate_rewards:
            raise InvalidArgumentError("IPCW-I needs intermediate rewards (form-1 data)")
        delta = traj.stages[k - 1].censor_indicator
        at = traj.cumulative_reward(k)
    elif variant == "II":
        delta = traj.event
        at = traj.total_time
    else:
        raise InvalidArgumentError(f"unknown IPCW variant {variant!r}")
    if delta == 0:
        return 0.0
    return 1.0 / float(curve(at))
