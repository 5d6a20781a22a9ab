"""Discrete toy model of view bias: mixture posterior, preference ratio,
regime classification and the coupling term with its log-gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

NORM_TOL = 1e-12
REGIME_LOW = 0.1
REGIME_HIGH = 10.0


class UnsupportedConditioningError(ValueError):
    pass


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be finite and nonnegative")
    if abs(p.sum() - 1.0) > NORM_TOL:
        raise ValueError(f"{name} must sum to 1 (got {p.sum():.15g})")


@dataclass
class DiscreteViewModel:
    views: np.ndarray  # azimuth bin centers, radians
    p_prior: np.ndarray
    epsilon: float
    joint_table: np.ndarray | None = None  # (V, Y, Z) joint over view, object evidence, image state

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float64)
        self.p_prior = np.asarray(self.p_prior, dtype=np.float64)
        if self.views.ndim != 1 or self.views.size == 0 or self.p_prior.shape != self.views.shape:
            raise ValueError("views and p_prior must be nonempty vectors of equal length")
        _check_distribution(self.p_prior, "p_prior")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.joint_table is not None:
            self.joint_table = np.asarray(self.joint_table, dtype=np.float64)
            if self.joint_table.ndim != 3 or self.joint_table.shape[0] != self.views.size:
                raise ValueError("joint_table must have shape (n_views, n_evidence, n_states)")
            _check_distribution(self.joint_table, "joint_table")

    @classmethod
    def uniform_bins(cls, p_prior, epsilon: float, joint_table=None) -> "DiscreteViewModel":
        n = len(p_prior)
        return cls(2 * math.pi * np.arange(n) / n, p_prior, epsilon, joint_table)

    @property
    def v_prior(self) -> int:
        return int(np.argmax(self.p_prior))

    def with_epsilon(self, epsilon: float) -> "DiscreteViewModel":
        return replace(self, epsilon=epsilon)

    def view_index(self, v_star) -> int:
        """Bin index for ``v_star``, given either as an int index or an azimuth."""
        if isinstance(v_star, (int, np.integer)):
            if not 0 <= v_star < self.views.size:
                raise KeyError(f"unknown view bin {v_star}")
            return int(v_star)
        hits = np.flatnonzero(np.isclose(self.views, float(v_star), atol=1e-12))
        if hits.size == 0:
            raise KeyError(f"unknown view azimuth {v_star}")
        return int(hits[0])


def posterior_mixture(model: DiscreteViewModel, v_star) -> np.ndarray:
    """``(1 - eps) * onehot(v*) + eps * p_prior``."""
    k = model.view_index(v_star)
    delta = np.zeros_like(model.p_prior)
    delta[k] = 1.0
    return (1.0 - model.epsilon) * delta + model.epsilon * model.p_prior


def preference_ratio(model: DiscreteViewModel, v_star) -> float:
    """Posterior mass at the most likely prior view relative to the target view."""
    k = model.view_index(v_star)
    eps = model.epsilon
    return eps * model.p_prior[model.v_prior] / ((1.0 - eps) + eps * model.p_prior[k])


def classify_regime(R: float, epsilon: float | None = None, low: float = REGIME_LOW, high: float = REGIME_HIGH) -> str:
    """``target_dominant`` for R <= low, ``prior_dominant`` for R >= high, else ``contaminated``.

    ``epsilon`` is accepted for reporting symmetry; the bands depend on R only.
    """
    if R < 0 or math.isnan(R):
        raise ValueError(f"ratio must be nonnegative, got {R}")
    if not low < high:
        raise ValueError("regime thresholds need low < high")
    if R <= low:
        return "target_dominant"
    if R >= high:
        return "prior_dominant"
    return "contaminated"


def _conditional_form(J: np.ndarray, k: int, y: int, z: int) -> float:
    """p(v*|y,z) / p(v*|z) from slices of the table."""
    slab = J[:, y, z]
    col = J[:, :, z]
    n_yz = slab.sum()
    n_z = col.sum()
    num_z = col[k].sum()
    if n_yz == 0 or n_z == 0 or num_z == 0:
        raise UnsupportedConditioningError("unsupported conditioning: zero-probability event")
    return (slab[k] / n_yz) / (num_z / n_z)


def _joint_form(J: np.ndarray, k: int, y: int, z: int) -> float:
    """``p(v*, y, z) p(z) / (p(y, z) p(v*, z))`` via explicit marginals."""
    V, Y, Z = J.shape
    p_z = math.fsum(J[v, yy, z] for v in range(V) for yy in range(Y))
    p_yz = math.fsum(J[v, y, z] for v in range(V))
    p_vz = math.fsum(J[k, yy, z] for yy in range(Y))
    denom = p_yz * p_vz
    if denom == 0 or p_z == 0:
        raise UnsupportedConditioningError("unsupported conditioning: zero-probability event")
    return J[k, y, z] * p_z / denom


def coupling_C(model: DiscreteViewModel, v_star, evidence_state: tuple = (1, 0), routine: str = "conditional") -> float:
    """``C = p(v*|y, z) / p(v*|z)`` from the model's joint table.

    ``routine`` selects one of two independent marginalizations
    (``"conditional"`` or ``"joint"``); they agree to rounding.
    """
    if model.joint_table is None:
        raise ValueError("model has no joint table")
    k = model.view_index(v_star)
    y, z = evidence_state
    J = model.joint_table
    if not (0 <= y < J.shape[1] and 0 <= z < J.shape[2]):
        raise IndexError(f"evidence state {evidence_state} outside table of shape {J.shape}")
    if routine == "conditional":
        return float(_conditional_form(J, k, y, z))
    if routine == "joint":
        return float(_joint_form(J, k, y, z))
    raise ValueError(f"unknown routine {routine!r}")


def mixture_joint_table(model: DiscreteViewModel, q: float = 0.5) -> np.ndarray:
    """Joint table with one image state, where the object word (y=1, prob ``q``)
    pulls the view toward the prior with weight epsilon and its absence (y=0)
    leaves views uniform."""
    V = model.views.size
    u = np.full(V, 1.0 / V)
    with_obj = (1.0 - model.epsilon) * u + model.epsilon * model.p_prior
    J = np.zeros((V, 2, 1))
    J[:, 1, 0] = q * with_obj
    J[:, 0, 0] = (1.0 - q) * u
    return J / J.sum()


def exp_coupling_family(a: float = 0.3, q: float = 0.5) -> Callable[[float], np.ndarray]:
    """Two-bin tables indexed by ``t >= 0`` whose coupling at ``(v*=0, y=1, z=0)`` is ``exp(-t)``.

    ``p(v*|y=1) = a exp(-t)`` and ``p(v*|y=0)`` compensates so that
    ``p(v*) = a`` for every ``t``. Valid for all ``t >= 0`` when ``a <= 1 - q``.
    """
    if not (0 < a < 1 and 0 < q < 1):
        raise ValueError("a and q must lie in (0, 1)")
    if a > 1 - q:
        raise ValueError("family needs a <= 1 - q")

    def table(t: float) -> np.ndarray:
        p1 = a * math.exp(-t)
        p0 = a * (1.0 - q * math.exp(-t)) / (1.0 - q)
        if not 0.0 <= p0 <= 1.0:
            raise ValueError(f"family parameters give p(v*|y=0) = {p0} at t={t}")
        J = np.zeros((2, 2, 1))
        J[0, 1, 0] = q * p1
        J[1, 1, 0] = q * (1.0 - p1)
        J[0, 0, 0] = (1.0 - q) * p0
        J[1, 0, 0] = (1.0 - q) * (1.0 - p0)
        return J

    return table


@dataclass
class ProbePoint:
    t: float
    C: float
    dlogC: float
    divergent: bool = False


@dataclass
class ProbeReport:
    points: list
    monotone_decreasing: bool
    divergence_points: list

    def as_rows(self) -> list:
        return [(p.t, p.C, p.dlogC, p.divergent) for p in self.points]


def logC_gradient_probe(model: DiscreteViewModel, v_star, path: Callable[[float], np.ndarray], ts: Sequence[float],
                        evidence_state: tuple = (1, 0), h: float = 1e-4) -> ProbeReport:
    """Evaluate C and a central-difference ``d log C / dt`` along a family of joint tables.

    Points where C (or a neighbouring evaluation) vanishes are flagged as
    divergent instead of raising.
    """
    if not h > 0:
        raise ValueError("step h must be positive")

    def C_at(t):
        try:
            return coupling_C(replace(model, joint_table=np.asarray(path(t))), v_star, evidence_state)
        except UnsupportedConditioningError:
            return 0.0

    points, bad = [], []
    for t in ts:
        c = C_at(t)
        cp, cm = C_at(t + h), C_at(t - h)
        if c <= 0 or cp <= 0 or cm <= 0:
            points.append(ProbePoint(float(t), c, -math.inf, True))
            bad.append(float(t))
            continue
        points.append(ProbePoint(float(t), c, (math.log(cp) - math.log(cm)) / (2 * h)))
    finite = [p.C for p in points if not p.divergent]
    mono = all(b < a for a, b in zip(finite, finite[1:]))
    return ProbeReport(points, mono, bad)


def sweep(model: DiscreteViewModel, v_star, epsilons: Sequence[float], evidence_state: tuple = (1, 0),
          low: float = REGIME_LOW, high: float = REGIME_HIGH) -> list:
    """Rows ``(epsilon, R, regime, C)`` over an epsilon grid.

    C comes from the model's joint table when one is given, otherwise from
    :func:`mixture_joint_table` at each epsilon.
    """
    rows = []
    for eps in epsilons:
        m = model.with_epsilon(float(eps))
        R = preference_ratio(m, v_star)
        table = m.joint_table if m.joint_table is not None else mixture_joint_table(m)
        try:
            C = coupling_C(replace(m, joint_table=table), v_star, evidence_state)
        except UnsupportedConditioningError:
            C = float("nan")
        rows.append((float(eps), float(R), classify_regime(R, eps, low, high), C))
    return rows


def model_from_json(doc: dict) -> DiscreteViewModel:
    p_prior = doc["p_prior"]
    views = doc.get("views")
    table = doc.get("joint_table")
    eps = float(doc.get("epsilon", 0.0))
    if views is None:
        return DiscreteViewModel.uniform_bins(p_prior, eps, table)
    return DiscreteViewModel(views, p_prior, eps, table)
