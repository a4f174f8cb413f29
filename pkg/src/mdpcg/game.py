"""Congestion costs, the integral potential and the Frank-Wolfe equilibrium solver."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CapabilityError, DimensionError, ValidationError
from .mdp import (Dimensions, InitialDistribution, TransitionKernel, best_response,
                  check_feasibility, q_values, _as_initial, _as_kernel)

NEGATIVE_TOL = 1e-12
SUPPORT_FRACTION = 1e-9

AFFINE = "affine"
OFFSET_LINEAR = "offset_linear"
CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class CostModel:
    """Separable congestion costs ``l_tsa(y_tsa)``.

    ``affine`` and ``offset_linear`` are both ``offset + slope * x``; the second
    name marks models assembled from expected trip costs plus a congestion
    coefficient. ``custom`` wraps an arbitrary vectorised function and has no
    closed-form potential.
    """

    slope: np.ndarray
    offset: np.ndarray
    alpha: float
    family: str = AFFINE
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        slope = np.array(self.slope, dtype=float)
        offset = np.array(self.offset, dtype=float)
        if slope.shape != offset.shape:
            raise DimensionError("slope and offset must share a shape")
        if self.family not in (AFFINE, OFFSET_LINEAR, CUSTOM):
            raise ValidationError(f"unknown cost family {self.family!r}")
        if self.alpha <= 0:
            raise ValidationError("strong-monotonicity constant must be positive")
        if self.family != CUSTOM:
            if not (np.all(np.isfinite(slope)) and np.all(np.isfinite(offset))):
                raise ValidationError("cost coefficients must be finite")
            if slope.min() < self.alpha * (1 - 1e-12):
                raise ValidationError(
                    f"slope {slope.min()!r} is below the declared alpha {self.alpha!r}")
        elif self.func is None:
            raise ValidationError("custom cost models need a function")
        slope.setflags(write=False)
        offset.setflags(write=False)
        object.__setattr__(self, "slope", slope)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def affine(cls, slope, offset, dims: Dimensions | None = None, alpha=None,
               family=AFFINE) -> "CostModel":
        slope = np.asarray(slope, dtype=float)
        offset = np.asarray(offset, dtype=float)
        if dims is not None:
            slope = np.broadcast_to(slope, dims.shape).copy()
            offset = np.broadcast_to(offset, dims.shape).copy()
        alpha = float(slope.min()) if alpha is None else alpha
        return cls(slope, offset, alpha, family)

    @classmethod
    def from_function(cls, func, dims: Dimensions, alpha: float) -> "CostModel":
        zeros = np.zeros(dims.shape)
        return cls(zeros, zeros, alpha, CUSTOM, func)

    @property
    def shape(self):
        return self.slope.shape

    @property
    def is_affine(self) -> bool:
        return self.family in (AFFINE, OFFSET_LINEAR)

    def to_json(self) -> dict:
        if not self.is_affine:
            raise CapabilityError("custom cost models cannot be serialised")
        return {"family": self.family, "alpha": self.alpha, "shape": list(self.shape),
                "slope": self.slope.ravel().tolist(), "offset": self.offset.ravel().tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "CostModel":
        shape = tuple(doc["shape"])
        return cls(np.reshape(doc["slope"], shape), np.reshape(doc["offset"], shape),
                   doc["alpha"], doc.get("family", AFFINE))


def _checked(model: CostModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != model.shape:
        if y.ndim == 1 and y.size == model.slope.size:
            y = y.reshape(model.shape)
        else:
            raise DimensionError(f"y has shape {y.shape}, expected {model.shape}")
    if y.size and y.min() < -NEGATIVE_TOL:
        raise ValidationError(f"population has a negative entry {y.min()!r}")
    return y


def eval_costs(model: CostModel, y) -> np.ndarray:
    y = _checked(model, y)
    if model.family == CUSTOM:
        return np.asarray(model.func(y), dtype=float).reshape(model.shape)
    return model.offset + model.slope * y


def eval_potential(model: CostModel, y) -> float:
    """Sum over coordinates of the integral of each cost from 0 to ``y_tsa``."""
    y = _checked(model, y)
    if not model.is_affine:
        raise CapabilityError(f"no closed-form potential for the {model.family!r} family")
    return float(np.sum(0.5 * model.slope * y * y + model.offset * y))


@dataclass(frozen=True)
class StopRule:
    max_iters: int = 10_000
    eps_target: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be positive")
        if self.eps_target < 0:
            raise ValidationError("eps_target must be nonnegative")


@dataclass(frozen=True, eq=False)
class EquilibriumResult:
    y: np.ndarray
    gap_history: np.ndarray
    iterations: int
    epsilon: float
    converged: bool
    # Convex decomposition of y, kept so pairwise steps can warm start.
    atoms: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        T1, S, A = self.y.shape
        return {"dims": {"T": T1 - 1, "S": S, "A": A},
                "y": self.y.ravel().tolist(),
                "epsilon": self.epsilon,
                "iterations": self.iterations,
                "converged": self.converged,
                "gap_history": self.gap_history.tolist()}


STEP_RULES = ("open_loop", "line_search", "pairwise")


def solve_equilibrium_fw(model: CostModel, P, p, stop: StopRule | None = None, *,
                         toll_offset=None, step_rule: str = "open_loop",
                         init=None, polish: bool = False,
                         polish_every: int = 50) -> EquilibriumResult:
    """Frank-Wolfe on the (optionally tolled) potential over Y(P, p).

    Each linear subproblem is a backward-induction best response. The loop
    stops once the Frank-Wolfe gap ``g . (y - v)`` falls to ``stop.eps_target``;
    by convexity that gap bounds the potential sub-optimality of ``y``.

    ``step_rule``:
      * ``open_loop`` -- eta_j = 2 / (j + 2)
      * ``line_search`` -- exact minimisation along ``v - y`` (affine costs)
      * ``pairwise`` -- moves weight from the worst active vertex to ``v`` with
        exact line search; linear rate on the polytope, used for tight targets

    ``init`` is a feasible starting point or a previous result (whose vertex
    decomposition is reused by the pairwise rule). Without it the solver
    starts from the best response to the zero-load costs.

    With ``polish`` (affine costs), every ``polish_every`` iterations and on
    exit the solver also tries the exact minimiser on the face spanned by the
    current support, keeping it only if its certified gap is smaller. Once the
    support is identified this lands on the equilibrium to rounding error.
    """
    P, p = _as_kernel(P), _as_initial(p)
    stop = stop or StopRule()
    if step_rule not in STEP_RULES:
        raise ValidationError(f"step_rule must be one of {STEP_RULES}")
    if step_rule != "open_loop" and not model.is_affine:
        raise CapabilityError("exact line search needs affine costs")
    dims = P.dims
    if model.shape != dims.shape:
        raise DimensionError("cost model and kernel dimensions differ")
    toll = np.zeros(dims.shape) if toll_offset is None else np.reshape(toll_offset, dims.shape)

    def gradient(y):
        return eval_costs(model, np.maximum(y, 0.0)) + toll

    if isinstance(init, EquilibriumResult):
        if init.atoms is not None and step_rule == "pairwise":
            active = _ActiveSet(init.atoms, init.weights)
        else:
            active = _ActiveSet(init.y.reshape(1, -1), np.ones(1))
    elif init is not None:
        active = _ActiveSet(np.reshape(np.asarray(init, dtype=float), (1, -1)), np.ones(1))
    else:
        v0 = best_response(gradient(np.zeros(dims.shape)), P, p)
        active = _ActiveSet(v0.reshape(1, -1), np.ones(1))
    # Start exactly at a given point; its decomposition only steers pairwise steps.
    if isinstance(init, EquilibriumResult):
        y = np.array(init.y, dtype=float).reshape(dims.shape)
    else:
        y = active.point().reshape(dims.shape)
    slope = model.slope.ravel()

    gaps = []
    best_y, best_gap = y, np.inf
    converged = False
    for j in range(stop.max_iters):
        g = gradient(y)
        v, policy = best_response(g, P, p, return_policy=True)
        gap = max(0.0, float(np.sum(g * (y - v))))  # negative only by rounding
        gaps.append(gap)
        if gap < best_gap:
            best_y, best_gap = y, gap
        if polish and (gap <= stop.eps_target or (j + 1) % polish_every == 0
                       or (j == 0 and init is not None)):
            base = active.point() if step_rule == "pairwise" else y
            cand = _face_polish(model, P, p, toll, base)
            if cand is not None:
                g2 = gradient(cand)
                cgap = max(0.0, float(np.sum(g2 * (cand - best_response(g2, P, p)))))
                if cgap < min(gap, best_gap) and (gap <= stop.eps_target
                                                  or cgap <= stop.eps_target):
                    y, gap = cand, cgap
                    gaps.append(gap)
                    best_y, best_gap = y, gap
                    active = _ActiveSet(y.reshape(1, -1), np.ones(1))
        if gap <= stop.eps_target:
            converged = True
            break
        gf, vf, yf = g.ravel(), v.ravel(), y.ravel()
        if step_rule == "open_loop":
            eta = 2.0 / (j + 2.0)
            y = (1 - eta) * y + eta * v
            continue
        if step_rule == "line_search":
            d = vf - yf
            curv = float(np.sum(slope * d * d))
            eta = 1.0 if curv <= 0 else min(1.0, gap / curv)
            y = (yf + eta * d).reshape(dims.shape)
            continue
        # pairwise: shift weight from the worst active vertex to v
        scores = active.atoms @ gf
        away = int(np.argmax(scores))
        d = vf - active.atoms[away]
        slope_dir = float(scores[away] - gf @ vf)
        curv = float(np.sum(slope * d * d))
        cap = active.weights[away]
        eta = cap if curv <= 0 else min(cap, slope_dir / curv)
        active.shift(away, vf, _vertex_key(v, policy), eta)
        y = (yf + eta * d).reshape(dims.shape)
        if (j + 1) % 1000 == 0:
            # re-anchor to the decomposition so drift cannot accumulate
            y = active.point().reshape(dims.shape)

    if converged:
        y_out, eps = y, gaps[-1]
    else:
        y_out, eps = best_y, best_gap
    if step_rule == "pairwise" and y_out is y:
        atoms, weights = active.atoms.copy(), active.weights.copy()
    else:
        atoms, weights = y_out.reshape(1, -1), np.ones(1)
    return EquilibriumResult(np.array(y_out), np.array(gaps), len(gaps), float(eps), converged,
                             atoms, weights)


class _ActiveSet:
    """Vertices with positive weight in the pairwise decomposition of the iterate.

    Past ``limit`` atoms the lightest half is merged into one pseudo-atom (a
    point of the polytope, so away steps from it stay feasible). Keeps warm
    starts across many outer iterations from growing without bound.
    """

    def __init__(self, atoms, weights, limit: int | None = None):
        atoms = np.asarray(atoms, dtype=float)
        self._buf = atoms.copy()
        self._w = np.asarray(weights, dtype=float).copy()
        self.n = len(self._w)
        self.keys = [None] * self.n
        self.index = {}
        self.limit = max(64, 2 * atoms.shape[1]) if limit is None else limit
        if self.n > self.limit:
            self._compact()

    @property
    def atoms(self) -> np.ndarray:
        return self._buf[: self.n]

    @property
    def weights(self) -> np.ndarray:
        return self._w[: self.n]

    def point(self) -> np.ndarray:
        return self.weights @ self.atoms

    def _add(self, vertex, key) -> int:
        if self.n == len(self._w):
            grow = max(8, self.n)
            self._buf = np.vstack([self._buf, np.empty((grow, self._buf.shape[1]))])
            self._w = np.concatenate([self._w, np.zeros(grow)])
        i = self.n
        self._buf[i] = vertex
        self._w[i] = 0.0
        self.keys.append(key)
        self.index[key] = i
        self.n += 1
        return i

    def _remove(self, i: int) -> None:
        last = self.n - 1
        self.index.pop(self.keys[i], None)
        if i != last:
            self._buf[i] = self._buf[last]
            self._w[i] = self._w[last]
            self.keys[i] = self.keys[last]
            if self.keys[i] is not None:
                self.index[self.keys[i]] = i
        self.keys.pop()
        self.n -= 1

    def shift(self, away: int, vertex, key, eta: float) -> None:
        cap = self._w[away]
        i = self.index.get(key)
        if i is None:
            i = self._add(vertex, key)
        self._w[i] += eta
        self._w[away] -= eta
        if eta >= cap or self._w[away] <= 0:
            self._w[away] = 0.0
            self._remove(away)
        self._w[: self.n] /= self._w[: self.n].sum()
        if self.n > self.limit:
            self._compact()

    def _compact(self) -> None:
        w, atoms = self.weights.copy(), self.atoms.copy()
        order = np.argsort(w, kind="stable")
        light, heavy = order[: self.n - self.limit // 2], order[self.n - self.limit // 2:]
        mass = w[light].sum()
        merged = (w[light] @ atoms[light]) / mass if mass > 0 else atoms[light[0]]
        keys = [self.keys[i] for i in heavy] + [None]
        self._buf = np.vstack([atoms[heavy], merged[None, :]])
        self._w = np.append(w[heavy], mass)
        self.n = len(self._w)
        self.keys = keys
        self.index = {k: i for i, k in enumerate(keys) if k is not None}


def _face_polish(model: CostModel, P: TransitionKernel, p: InitialDistribution, toll, y,
                 rounds: int = 20):
    """Minimise the potential on the face ``{y_i = 0 off the support}`` of Y(P, p).

    Equality-constrained QP solved through its Schur complement; coordinates
    that come out negative are pinned to zero and the solve repeated.
    Returns ``None`` if no nonnegative feasible candidate emerges.
    """
    dims = P.dims
    T, S, A = dims.T, dims.S, dims.A
    n = dims.size
    E = np.zeros(((T + 1) * S, n))
    f = np.zeros((T + 1) * S)
    for t in range(T + 1):
        for s in range(S):
            r = t * S + s
            E[r, r * A:(r + 1) * A] = 1.0
            if t == 0:
                f[r] = p.p[s]
            else:
                E[r, (t - 1) * S * A:t * S * A] -= P.P[t - 1, s].ravel()
    inv_d = 1.0 / model.slope.ravel()
    c = model.offset.ravel() + np.ravel(toll)
    support = np.ravel(y) > 0
    for _ in range(rounds):
        Es = E[:, support]
        K = (Es * inv_d[support]) @ Es.T
        rhs = -(Es @ (inv_d[support] * c[support])) - f
        lam = np.linalg.lstsq(K, rhs, rcond=None)[0]
        ys = -inv_d[support] * (c[support] + Es.T @ lam)
        if ys.min(initial=0.0) >= 0:
            out = np.zeros(n)
            out[support] = ys
            if np.max(np.abs(E @ out - f)) > 1e-10 * max(1.0, p.mass):
                return None
            return out.reshape(dims.shape)
        idx = np.flatnonzero(support)
        support[idx[ys < 0]] = False
        if not support.any():
            return None
    return None


def _vertex_key(v: np.ndarray, policy: np.ndarray) -> bytes:
    # Actions at unreached states do not change the vertex.
    masked = np.where(v.sum(axis=2) > 0, policy, -1)
    return masked.astype(np.int32).tobytes()


def wardrop_violation(model: CostModel, y, P, p, tol: float | None = None, *,
                      toll_offset=None, feas_tol: float | None = None) -> np.ndarray:
    """Largest Q-value excess of any used action, per (t, s).

    An action counts as used when it carries more than ``tol * M`` mass
    (default ``tol = 1e-9``). Exact equilibria report zeros.
    """
    P, p = _as_kernel(P), _as_initial(p)
    y = _checked(model, y)
    report = check_feasibility(y, P, p, feas_tol)
    if not report:
        raise ValidationError(f"population is infeasible (residual {report.max_residual:.3g})")
    c = eval_costs(model, y)
    if toll_offset is not None:
        c = c + np.reshape(toll_offset, c.shape)
    Q = q_values(c, P)
    excess = Q - Q.min(axis=2, keepdims=True)
    used = y > (SUPPORT_FRACTION if tol is None else tol) * p.mass
    return np.where(used, excess, 0.0).max(axis=2)


def save_result(path, result: EquilibriumResult) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json(), fh)
