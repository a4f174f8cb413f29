"""Occupancy-measure primitives for finite-horizon MDPs.

Arrays follow one convention throughout the package:

* population / occupancy ``y`` and costs: shape ``(T+1, S, A)``; flattened
  t-major, then state, then action (``y.ravel()`` in C order).
* transition kernel ``P``: shape ``(T, S, S, A)`` with
  ``P[t, dest, src, a]`` the probability of landing in ``dest`` after taking
  ``a`` in ``src`` at time ``t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError

STOCHASTIC_TOL = 1e-9


@dataclass(frozen=True)
class Dimensions:
    T: int
    S: int
    A: int

    def __post_init__(self):
        if self.T < 0 or self.S < 1 or self.A < 1:
            raise ValidationError(f"invalid dimensions {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.T + 1, self.S, self.A)

    @property
    def size(self) -> int:
        return (self.T + 1) * self.S * self.A

    def flat_index(self, t: int, s: int, a: int) -> int:
        return (t * self.S + s) * self.A + a


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Column-stochastic kernel; validated once, never renormalised."""

    P: np.ndarray

    def __post_init__(self):
        P = _frozen(self.P)
        if P.ndim != 4 or P.shape[1] != P.shape[2]:
            raise DimensionError(f"kernel must have shape (T, S, S, A), got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ValidationError("kernel has non-finite entries")
        if P.min(initial=0.0) < -STOCHASTIC_TOL or P.max(initial=0.0) > 1 + STOCHASTIC_TOL:
            raise ValidationError("kernel entries must lie in [0, 1]")
        col = P.sum(axis=1)
        if P.size and np.max(np.abs(col - 1.0)) > STOCHASTIC_TOL:
            t, s, a = np.unravel_index(np.argmax(np.abs(col - 1.0)), col.shape)
            raise ValidationError(
                f"kernel column (t={t}, src={s}, a={a}) sums to {col[t, s, a]!r}, not 1")
        object.__setattr__(self, "P", P)

    @property
    def T(self) -> int:
        return self.P.shape[0]

    @property
    def S(self) -> int:
        return self.P.shape[1]

    @property
    def A(self) -> int:
        return self.P.shape[3]

    @property
    def dims(self) -> Dimensions:
        return Dimensions(self.T, self.S, self.A)


@dataclass(frozen=True, eq=False)
class InitialDistribution:
    p: np.ndarray

    def __post_init__(self):
        p = _frozen(self.p)
        if p.ndim != 1:
            raise DimensionError("initial distribution must be a vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("initial distribution must be finite and nonnegative")
        if p.sum() <= 0:
            raise ValidationError("initial distribution must carry positive mass")
        object.__setattr__(self, "p", p)

    @property
    def mass(self) -> float:
        return float(self.p.sum())


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    max_residual: float
    tol: float

    def __bool__(self):
        return self.feasible


def _as_kernel(P) -> TransitionKernel:
    return P if isinstance(P, TransitionKernel) else TransitionKernel(P)


def _as_initial(p) -> InitialDistribution:
    return p if isinstance(p, InitialDistribution) else InitialDistribution(p)


def _shaped(x, kernel: TransitionKernel, name: str) -> np.ndarray:
    shape = kernel.dims.shape
    arr = np.asarray(x, dtype=float)
    if arr.shape == shape:
        return arr
    if arr.ndim == 1 and arr.size == kernel.dims.size:
        return arr.reshape(shape)
    raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")


def default_tol(mass: float) -> float:
    return 1e-8 * max(1.0, mass)


def propagate(P: TransitionKernel, y_t: np.ndarray, t: int) -> np.ndarray:
    """State masses at ``t+1`` induced by state-action masses ``y_t``."""
    return np.einsum("ijk,jk->i", P.P[t], y_t)


def flow_residuals(y, P, p) -> np.ndarray:
    """Mass-balance residuals, shape ``(T+1, S)``; zero iff ``y`` satisfies the equalities."""
    P, p = _as_kernel(P), _as_initial(p)
    y = _shaped(y, P, "y")
    if p.p.shape[0] != P.S:
        raise DimensionError("initial distribution length does not match the kernel")
    x = y.sum(axis=2)
    res = np.empty_like(x)
    res[0] = x[0] - p.p
    for t in range(P.T):
        res[t + 1] = x[t + 1] - propagate(P, y[t], t)
    return res


def check_feasibility(y, P, p, tol: float | None = None) -> FeasibilityReport:
    """Check membership of ``y`` in the feasible population set Y(P, p).

    Negative entries count toward the residual by their magnitude.
    """
    P, p = _as_kernel(P), _as_initial(p)
    tol = default_tol(p.mass) if tol is None else tol
    res = flow_residuals(y, P, p)
    y = _shaped(y, P, "y")
    worst = max(float(np.max(np.abs(res))), float(max(0.0, -y.min())))
    return FeasibilityReport(worst <= tol, worst, tol)


def rollout_policy(pi, P, p) -> np.ndarray:
    """Occupancy measure generated by the (possibly stochastic) policy ``pi``."""
    P, p = _as_kernel(P), _as_initial(p)
    pi = _shaped(pi, P, "policy")
    if np.any(pi < -1e-12) or np.max(np.abs(pi.sum(axis=2) - 1.0)) > 1e-9:
        raise ValidationError("policy rows must be probability vectors")
    y = np.empty(P.dims.shape)
    x = p.p.copy()
    for t in range(P.T + 1):
        y[t] = x[:, None] * pi[t]
        if t < P.T:
            x = propagate(P, y[t], t)
    return y


def deterministic_policy(actions, A: int) -> np.ndarray:
    """One-hot policy tensor from an integer action table of shape ``(T+1, S)``."""
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros(actions.shape + (A,))
    np.put_along_axis(pi, actions[..., None], 1.0, axis=-1)
    return pi


def q_values(costs, P) -> np.ndarray:
    """Backward-induction Q-values for per-stage costs ``costs``."""
    P = _as_kernel(P)
    c = _shaped(costs, P, "costs")
    if not np.all(np.isfinite(c)):
        raise ValidationError("costs must be finite")
    Q = np.empty_like(c)
    Q[P.T] = c[P.T]
    for t in range(P.T - 1, -1, -1):
        V = Q[t + 1].min(axis=1)
        Q[t] = c[t] + np.einsum("ijk,i->jk", P.P[t], V)
    return Q


def greedy_actions(Q: np.ndarray) -> np.ndarray:
    # np.argmin returns the first minimiser: ties go to the lowest action index.
    return np.argmin(Q, axis=2)


def best_response(costs, P, p, return_policy: bool = False):
    """Minimise ``costs . v`` over Y(P, p) by dynamic programming.

    The minimiser is the rollout of the greedy deterministic policy, so it is
    an extreme point of the polytope.
    """
    P, p = _as_kernel(P), _as_initial(p)
    if p.p.shape[0] != P.S:
        raise DimensionError("initial distribution length does not match the kernel")
    actions = greedy_actions(q_values(costs, P))
    v = np.zeros(P.dims.shape)
    x = p.p.copy()
    rows = np.arange(P.S)
    for t in range(P.T + 1):
        v[t, rows, actions[t]] = x
        if t < P.T:
            x = propagate(P, v[t], t)
    if return_policy:
        return v, actions
    return v


def dp_value(costs, P, p) -> float:
    """Optimal expected cost ``sum_s p_s min_a Q[0, s, a]``."""
    P, p = _as_kernel(P), _as_initial(p)
    Q = q_values(costs, P)
    return float(p.p @ Q[0].min(axis=1))


# -- JSON tensor documents ---------------------------------------------------

def tensor_to_json(array, dims: Dimensions) -> dict:
    return {"dims": {"T": dims.T, "S": dims.S, "A": dims.A},
            "data": [float(v) for v in np.asarray(array, dtype=float).ravel()]}


def tensor_from_json(doc: dict, kernel: bool = False) -> np.ndarray:
    d = doc["dims"]
    dims = Dimensions(int(d["T"]), int(d["S"]), int(d["A"]))
    shape = (dims.T, dims.S, dims.S, dims.A) if kernel else dims.shape
    data = np.asarray(doc["data"], dtype=float)
    if data.size != int(np.prod(shape)):
        raise DimensionError(f"expected {int(np.prod(shape))} values, got {data.size}")
    return data.reshape(shape)


def save_tensor(path, array, dims: Dimensions) -> None:
    Path(path).write_text(json.dumps(tensor_to_json(array, dims)))


def load_tensor(path, kernel: bool = False) -> np.ndarray:
    return tensor_from_json(json.loads(Path(path).read_text()), kernel=kernel)
