"""Stage-wise outcome and propensity regressions.

The Q-function at a stage is a linear model in the stage history with a
block of treatment interactions for every non-reference treatment::

    Q(L, a) = b0 + b_main'x_main(L) + sum_{a' != ref} 1{a = a'} (c_a' + d_a''x_int(L))

fitted by inverse-probability-of-censoring weighted least squares, either
on the identity scale or on the log scale (accelerated failure time style).

Propensity scores come from a softmax regression whose per-class linear
predictor is ``gamma_a'[1, x_main] + a * phi_a'x_int`` with the lowest
treatment label as the reference class.

Histories are passed around as mappings from feature name to a column
array (or to a scalar for a single subject).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from .errors import DegenerateFitError, InvalidArgumentError

RIDGE_JITTER = 1e-8
SOFTMAX_L2 = 1e-4
PROPENSITY_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class DesignSpec:
    """Which history features enter the Q-model and on what response scale."""

    main_terms: tuple[str, ...] = ()
    interaction_terms: tuple[str, ...] = ()
    response_transform: Literal["identity", "log"] = "identity"

    def __post_init__(self):
        object.__setattr__(self, "main_terms", tuple(self.main_terms))
        object.__setattr__(self, "interaction_terms", tuple(self.interaction_terms))
        if self.response_transform not in ("identity", "log"):
            raise InvalidArgumentError(f"unknown response transform {self.response_transform!r}")

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.main_terms + self.interaction_terms))

    def width(self, n_treatments: int) -> int:
        return 1 + len(self.main_terms) + (n_treatments - 1) * (1 + len(self.interaction_terms))

    def to_dict(self) -> dict:
        return {
            "main_terms": list(self.main_terms),
            "interaction_terms": list(self.interaction_terms),
            "response_transform": self.response_transform,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DesignSpec":
        return cls(
            tuple(d.get("main_terms", ())),
            tuple(d.get("interaction_terms", ())),
            d.get("response_transform", "identity"),
        )


def _columns(history: Mapping[str, object], names: Sequence[str], n: int | None = None) -> np.ndarray:
    missing = [name for name in names if name not in history]
    if missing:
        raise InvalidArgumentError(f"history lacks feature(s) {missing}")
    if not names:
        if n is None:
            n = _n_rows(history)
        return np.empty((n, 0))
    return np.column_stack([np.asarray(history[name], dtype=float).reshape(-1) for name in names])


def _n_rows(history: Mapping[str, object]) -> int:
    for value in history.values():
        return np.asarray(value).reshape(-1).shape[0]
    return 1


def _transform(y: np.ndarray, how: str) -> np.ndarray:
    if how == "log":
        if np.any(y <= 0):
            raise InvalidArgumentError("log response needs strictly positive outcomes")
        return np.log(y)
    return y


def q_design(
    spec: DesignSpec,
    history: Mapping[str, object],
    actions,
    treatments: Sequence[int],
) -> np.ndarray:
    """Design matrix rows x(L_i, a_i) for the Q-model."""
    actions = np.asarray(actions).reshape(-1)
    n = actions.shape[0]
    main = _columns(history, spec.main_terms, n)
    inter = _columns(history, spec.interaction_terms, n)
    blocks = [np.ones((n, 1)), main]
    for a in treatments[1:]:
        ind = (actions == a).astype(float)[:, None]
        blocks.append(ind)
        blocks.append(ind * inter)
    return np.hstack(blocks)


def fit_weighted_least_squares(design, response, weights) -> np.ndarray:
    """Minimise sum_i w_i (y_i - x_i'b)^2.

    Full-rank problems are solved by least squares on the row-scaled design;
    rank-deficient ones fall back to the normal equations with ``1e-8 * I``
    added to X'WX.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or w.shape != y.shape:
        raise InvalidArgumentError("design, response and weights have inconsistent shapes")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
        raise InvalidArgumentError("non-finite values in weighted least squares inputs")
    if np.any(w < 0):
        raise InvalidArgumentError("weights must be non-negative")
    keep = w > 0
    if not keep.any():
        raise DegenerateFitError("all regression weights are zero")
    X, y, w = X[keep], y[keep], w[keep]
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    if np.linalg.matrix_rank(Xw) == X.shape[1]:
        coef, *_ = np.linalg.lstsq(Xw, y * sw, rcond=None)
        return coef
    gram = Xw.T @ Xw + RIDGE_JITTER * np.eye(X.shape[1])
    return np.linalg.solve(gram, Xw.T @ (y * sw))


@dataclass(frozen=True)
class QModel:
    spec: DesignSpec
    treatments: tuple[int, ...]
    coefficients: np.ndarray
    stage: int = 0

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float)
        if coef.shape != (self.spec.width(len(self.treatments)),):
            raise InvalidArgumentError("coefficient vector does not match the design width")
        coef.flags.writeable = False
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "treatments", tuple(int(a) for a in self.treatments))

    def linear_predictor(self, history: Mapping[str, object], actions) -> np.ndarray:
        return q_design(self.spec, history, actions, self.treatments) @ self.coefficients

    def predict(self, history: Mapping[str, object], actions) -> np.ndarray:
        eta = self.linear_predictor(history, actions)
        return np.exp(eta) if self.spec.response_transform == "log" else eta

    def predict_all(self, history: Mapping[str, object]) -> np.ndarray:
        """n x m matrix of predictions, one column per treatment."""
        n = _n_rows(history)
        return np.column_stack([self.predict(history, np.full(n, a)) for a in self.treatments])


def fit_q_model(
    spec: DesignSpec,
    history: Mapping[str, object],
    actions,
    outcome,
    weights,
    treatments: Sequence[int],
    stage: int = 0,
) -> QModel:
    """IPCW-weighted least squares fit of the stage Q-function."""
    treatments = tuple(sorted(int(a) for a in treatments))
    X = q_design(spec, history, actions, treatments)
    outcome = np.asarray(outcome, dtype=float)
    weights = np.asarray(weights, dtype=float)
    positive = weights > 0
    y = np.zeros_like(outcome)
    y[positive] = _transform(outcome[positive], spec.response_transform)
    coef = fit_weighted_least_squares(X, y, weights)
    return QModel(spec, treatments, coef, stage)


def predict_q(model: QModel, history: Mapping[str, float], treatment: int) -> float:
    if treatment not in model.treatments:
        raise InvalidArgumentError(f"treatment {treatment} not in {model.treatments}")
    row = {name: np.atleast_1d(value) for name, value in history.items()}
    return float(model.predict(row, [treatment])[0])


# -- softmax propensity ------------------------------------------------------


@dataclass(frozen=True)
class PropensityModel:
    """Softmax regression; row ``j`` of ``gamma``/``phi`` belongs to ``treatments[j]``.

    ``gamma`` has an intercept in column 0.  The reference row is all zero.
    """

    treatments: tuple[int, ...]
    main_terms: tuple[str, ...]
    interaction_terms: tuple[str, ...]
    gamma: np.ndarray
    phi: np.ndarray
    stage: int = 0
    converged: bool = True
    n_iter: int = 0
    objective_trace: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def linear_predictors(self, history: Mapping[str, object]) -> np.ndarray:
        n = _n_rows(history)
        x0 = np.hstack([np.ones((n, 1)), _columns(history, self.main_terms, n)])
        x1 = _columns(history, self.interaction_terms, n)
        values = np.asarray(self.treatments, dtype=float)
        return x0 @ self.gamma.T + (x1 @ self.phi.T) * values[None, :]

    def predict(self, history: Mapping[str, object]) -> np.ndarray:
        return _softmax(self.linear_predictors(history))

    def to_dict(self) -> dict:
        return {
            "treatments": list(self.treatments),
            "main_terms": list(self.main_terms),
            "interaction_terms": list(self.interaction_terms),
            "gamma": self.gamma.tolist(),
            "phi": self.phi.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
        }


def _softmax(eta: np.ndarray) -> np.ndarray:
    z = eta - eta.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_objective(theta, x0, x1, y_index, class_values, l2=SOFTMAX_L2):
    """Penalised mean multinomial log-likelihood and its gradient.

    ``theta`` stacks, for each non-reference class, the coefficients on
    ``[x0 | class_value * x1]``; ``x0`` must already carry the intercept in
    column 0, which is left unpenalised.
    """
    n, p0 = x0.shape
    p1 = x1.shape[1]
    m = len(class_values)
    B = theta.reshape(m - 1, p0 + p1)
    eta = np.zeros((n, m))
    eta[:, 1:] = x0 @ B[:, :p0].T + (x1 @ B[:, p0:].T) * class_values[None, 1:]
    zmax = eta.max(axis=1, keepdims=True)
    lse = (zmax[:, 0] + np.log(np.exp(eta - zmax).sum(axis=1)))
    mask = np.ones_like(B)
    mask[:, 0] = 0.0
    value = (eta[np.arange(n), y_index] - lse).mean() - 0.5 * l2 * np.sum((B * mask) ** 2)

    resid = -np.exp(eta - lse[:, None])
    resid[np.arange(n), y_index] += 1.0
    r = resid[:, 1:] / n
    grad = np.empty_like(B)
    grad[:, :p0] = r.T @ x0
    grad[:, p0:] = (r * class_values[None, 1:]).T @ x1
    grad -= l2 * B * mask
    return value, grad.reshape(-1)


def _standardise(x: np.ndarray):
    mu = x.mean(axis=0) if x.shape[0] else np.zeros(x.shape[1])
    sd = x.std(axis=0) if x.shape[0] else np.ones(x.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mu) / sd, mu, sd


def fit_softmax(
    design_main,
    design_inter,
    labels,
    treatments: Sequence[int] | None = None,
    max_iter: int = 5000,
    tol: float = 1e-6,
    l2: float = SOFTMAX_L2,
    main_terms: Sequence[str] = (),
    interaction_terms: Sequence[str] = (),
    stage: int = 0,
) -> PropensityModel:
    """Penalised maximum likelihood softmax regression by gradient ascent.

    Columns are standardised internally; each step starts from a
    Barzilai-Borwein step length and backtracks until the Armijo condition
    holds, so the objective never decreases.  Stops when the gradient
    max-norm drops below ``tol`` or after ``max_iter`` steps.
    """
    labels = np.asarray(labels).astype(int).reshape(-1)
    n = labels.shape[0]
    x_main = np.asarray(design_main, dtype=float).reshape(n, -1)
    x_inter = np.asarray(design_inter, dtype=float).reshape(n, -1)
    if not (np.all(np.isfinite(x_main)) and np.all(np.isfinite(x_inter))):
        raise InvalidArgumentError("non-finite values in the propensity design")
    if treatments is None:
        treatments = np.unique(labels)
    treatments = tuple(sorted(int(a) for a in treatments))
    if len(np.unique(labels)) < 2:
        raise DegenerateFitError("propensity model needs at least two observed treatments", stage)
    lookup = {a: j for j, a in enumerate(treatments)}
    try:
        y_index = np.array([lookup[a] for a in labels])
    except KeyError as exc:
        raise InvalidArgumentError(f"label {exc.args[0]} not among treatments {treatments}") from None
    class_values = np.asarray(treatments, dtype=float)

    z_main, mu0, sd0 = _standardise(x_main)
    z_inter, mu1, sd1 = _standardise(x_inter)
    x0 = np.hstack([np.ones((n, 1)), z_main])
    p0, p1, m = x0.shape[1], z_inter.shape[1], len(treatments)

    theta = np.zeros((m - 1) * (p0 + p1))
    # start the intercepts at the log frequency ratios
    counts = np.bincount(y_index, minlength=m) + 0.5
    B0 = theta.reshape(m - 1, p0 + p1)
    B0[:, 0] = np.log(counts[1:] / counts[0])

    value, grad = softmax_objective(theta, x0, z_inter, y_index, class_values, l2)
    trace = [value]
    step = 1.0
    prev_theta = prev_grad = None
    converged = bool(np.max(np.abs(grad)) < tol)
    it = 0
    while not converged and it < max_iter:
        it += 1
        if prev_theta is not None:
            s, g = theta - prev_theta, grad - prev_grad
            sg = -(s @ g)
            if sg > 0:
                step = float(np.clip((s @ s) / sg, 1e-8, 1e8))
        gnorm2 = grad @ grad
        while True:
            cand = theta + step * grad
            cand_value, cand_grad = softmax_objective(cand, x0, z_inter, y_index, class_values, l2)
            if cand_value >= value + 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-14:
                cand = None
                break
        if cand is None:
            break
        prev_theta, prev_grad = theta, grad
        theta, value, grad = cand, cand_value, cand_grad
        trace.append(value)
        converged = bool(np.max(np.abs(grad)) < tol)

    B = theta.reshape(m - 1, p0 + p1)
    gamma = np.zeros((m, 1 + x_main.shape[1]))
    phi = np.zeros((m, x_inter.shape[1]))
    slopes0 = B[:, 1:p0] / sd0
    slopes1 = B[:, p0:] / sd1
    gamma[1:, 1:] = slopes0
    phi[1:, :] = slopes1
    gamma[1:, 0] = B[:, 0] - slopes0 @ mu0 - class_values[1:] * (slopes1 @ mu1)
    return PropensityModel(
        treatments,
        tuple(main_terms),
        tuple(interaction_terms),
        gamma,
        phi,
        stage,
        converged,
        it,
        tuple(trace),
    )


def fit_propensity(
    history: Mapping[str, object],
    actions,
    treatments: Sequence[int],
    main_terms: Sequence[str] = (),
    interaction_terms: Sequence[str] = (),
    stage: int = 0,
    **kwargs,
) -> PropensityModel:
    actions = np.asarray(actions).reshape(-1)
    n = actions.shape[0]
    return fit_softmax(
        _columns(history, main_terms, n),
        _columns(history, interaction_terms, n),
        actions,
        treatments,
        main_terms=main_terms,
        interaction_terms=interaction_terms,
        stage=stage,
        **kwargs,
    )


def predict_propensity(model: PropensityModel, history: Mapping[str, float]) -> np.ndarray:
    row = {name: np.atleast_1d(value) for name, value in history.items()}
    return model.predict(row)[0]


def clip_propensities(p: np.ndarray, bounds=PROPENSITY_CLIP) -> tuple[np.ndarray, int]:
    """Clip to ``bounds`` and report how many entries moved."""
    lo, hi = bounds
    clipped = np.clip(p, lo, hi)
    return clipped, int(np.count_nonzero(clipped != p))
