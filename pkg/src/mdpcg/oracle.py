"""Dense reference solvers used as independent ground truth in tests and diagnostics.

Nothing here touches the Frank-Wolfe code path. Potentials of the supported
cost families are separable quadratics, so the constrained potential problem
is a strictly convex QP; it is solved exactly by the Goldfarb-Idnani dual
active-set method (``quadprog``), which also returns the constraint
multipliers.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import quadprog
from scipy.optimize import linprog

from .errors import CapabilityError, InfeasibleError
from .game import CostModel, eval_potential
from .mdp import rollout_policy, deterministic_policy, _as_initial, _as_kernel

MAX_POLICIES = 10**6


def flow_matrix(P, p) -> tuple[np.ndarray, np.ndarray]:
    """Dense equality system ``E y = f`` describing the mass-balance constraints."""
    P, p = _as_kernel(P), _as_initial(p)
    T, S, A = P.T, P.S, P.A
    n = (T + 1) * S * A
    E = np.zeros(((T + 1) * S, n))
    f = np.zeros((T + 1) * S)
    for t in range(T + 1):
        for s in range(S):
            row = t * S + s
            E[row, (t * S + s) * A:(t * S + s + 1) * A] = 1.0
            if t == 0:
                f[row] = p.p[s]
            else:
                # minus sum_{s', a} P[t-1, s, s', a] y[t-1, s', a]
                E[row, (t - 1) * S * A:t * S * A] -= P.P[t - 1, s].ravel()
    return E, f


def _dense(A) -> np.ndarray:
    return A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=float)


@dataclass(frozen=True, eq=False)
class QPSolution:
    y: np.ndarray
    tau: np.ndarray
    mu: np.ndarray
    value: float
    active_bounds: np.ndarray


def _solve_qp(model: CostModel, P, p, linear=None, A=None, b=None) -> QPSolution:
    """min 1/2 y'Dy + (q + linear)'y  s.t.  Ey = f, Ay <= b, y >= 0."""
    if not model.is_affine:
        raise CapabilityError("the dense oracle needs affine costs")
    E, f = flow_matrix(P, p)
    n = E.shape[1]
    q = model.offset.ravel() + (0.0 if linear is None else np.ravel(linear))
    G = np.diag(model.slope.ravel())
    blocks = [E.T]
    rhs = [f]
    C = 0
    if A is not None:
        A = _dense(A)
        C = A.shape[0]
        blocks.append(-A.T)
        rhs.append(-np.asarray(b, dtype=float))
    blocks.append(np.eye(n))
    rhs.append(np.zeros(n))
    try:
        y, value, _, _, lagr, iact = quadprog.solve_qp(
            G, -q, np.hstack(blocks), np.concatenate(rhs), meq=E.shape[0])
    except ValueError as exc:
        raise InfeasibleError(str(exc)) from exc
    m = E.shape[0]
    mu = -lagr[:m]
    tau = lagr[m:m + C]
    active = np.zeros(n, dtype=bool)
    for i in iact - 1:  # quadprog reports 1-based indices
        if i >= m + C:
            active[i - m - C] = True
    y = np.where(active, 0.0, y)
    return QPSolution(y.reshape(model.shape), tau, mu, float(value), active)


@dataclass(frozen=True, eq=False)
class OracleSolution:
    y: np.ndarray
    tau: np.ndarray
    F: float
    d: float
    kkt_residual: float


def solve_constrained_potential(model: CostModel, cons, P, p, tol: float = 1e-8) -> OracleSolution:
    """Minimise the potential over Y(P, p) intersected with ``A y <= b``.

    Returns the minimiser, the constraint multipliers (the minimum toll), the
    optimal potential, the dual value at the multipliers and a KKT residual.
    Raises ``InfeasibleError`` carrying a Farkas certificate when the
    intersection is empty.
    """
    A, b = cons.A, cons.b
    try:
        sol = _solve_qp(model, P, p, A=A, b=b)
    except InfeasibleError:
        raise InfeasibleError("constraint set does not meet the feasible polytope",
                              certificate=infeasibility_certificate(cons, P, p)) from None
    y, tau = sol.y, np.maximum(sol.tau, 0.0)
    F = eval_potential(model, y)
    d = dual_function_oracle(model, cons, P, p, tau)
    kkt = _kkt_residual(model, cons, P, p, sol)
    if kkt > tol:
        raise CapabilityError(f"oracle KKT residual {kkt:.3g} exceeds {tol:.3g}")
    return OracleSolution(y, tau, F, d, kkt)


def _kkt_residual(model, cons, P, p, sol: QPSolution) -> float:
    E, f = flow_matrix(P, p)
    A = _dense(cons.A)
    y = sol.y.ravel()
    primal = max(np.max(np.abs(E @ y - f)),
                 np.max(np.maximum(A @ y - cons.b, 0.0)),
                 np.max(np.maximum(-y, 0.0)))
    r = model.slope.ravel() * y + model.offset.ravel() + A.T @ sol.tau + E.T @ sol.mu
    dual = max(0.0, -float(r.min()))
    station = float(np.max(np.abs(r[~sol.active_bounds]), initial=0.0))
    comp = abs(float(sol.tau @ (A @ y - cons.b)))
    sign = max(0.0, -float(sol.tau.min(initial=0.0)))
    return float(max(primal, dual, station, comp, sign))


def dual_argmin(model: CostModel, cons, P, p, tau) -> np.ndarray:
    """Exact equilibrium of the game tolled by ``A' tau``."""
    linear = _dense(cons.A).T @ np.asarray(tau, dtype=float)
    return _solve_qp(model, P, p, linear=linear).y


def dual_function_oracle(model: CostModel, cons, P, p, tau) -> float:
    """d(tau) = min over Y(P, p) of F0(y) + tau . (A y - b)."""
    tau = np.asarray(tau, dtype=float)
    y = dual_argmin(model, cons, P, p, tau)
    return eval_potential(model, y) + float(tau @ (_dense(cons.A) @ y.ravel() - cons.b))


class DualOracle:
    """Callable ``tau -> d(tau)`` with the dense matrices built once."""

    def __init__(self, model: CostModel, cons, P, p):
        if not model.is_affine:
            raise CapabilityError("the dense oracle needs affine costs")
        E, f = flow_matrix(P, p)
        self.model = model
        self._A = _dense(cons.A)
        self._b = np.asarray(cons.b, dtype=float)
        n = E.shape[1]
        self._G = np.diag(model.slope.ravel())
        self._C = np.hstack([E.T, np.eye(n)])
        self._rhs = np.concatenate([f, np.zeros(n)])
        self._meq = E.shape[0]
        self.calls = 0

    def argmin(self, tau) -> np.ndarray:
        q = self.model.offset.ravel() + self._A.T @ np.asarray(tau, dtype=float)
        y = quadprog.solve_qp(self._G, -q, self._C, self._rhs, meq=self._meq)[0]
        self.calls += 1
        return np.maximum(y, 0.0)

    def __call__(self, tau) -> float:
        tau = np.asarray(tau, dtype=float)
        y = self.argmin(tau)
        s, q = self.model.slope.ravel(), self.model.offset.ravel()
        return float(np.sum(0.5 * s * y * y + q * y) + tau @ (self._A @ y - self._b))


def infeasibility_certificate(cons, P, p) -> dict:
    """Farkas pair ``(lam, w >= 0)`` with ``E'lam <= A'w`` and ``f.lam > b.w``.

    Any feasible flow y would give ``f.lam = lam'Ey <= w'Ay <= w.b``, so the
    strict inequality proves Y(P, p) and ``A y <= b`` do not intersect.
    """
    E, f = flow_matrix(P, p)
    A = _dense(cons.A)
    n, C = E.shape[1], A.shape[0]
    # min 1's  s.t.  Ey = f,  Ay - s <= b,  y, s >= 0
    res = linprog(np.concatenate([np.zeros(n), np.ones(C)]),
                  A_ub=np.hstack([A, -np.eye(C)]), b_ub=cons.b,
                  A_eq=np.hstack([E, np.zeros((E.shape[0], C))]), b_eq=f,
                  bounds=(0, None), method="highs")
    lam = res.eqlin.marginals
    w = -res.ineqlin.marginals
    return {"lam": lam, "w": w, "violation": float(res.fun),
            "separation": float(f @ lam - cons.b @ w),
            "dual_infeasibility": float(np.max(E.T @ lam - A.T @ w, initial=0.0))}


def enumerate_policies(costs, P, p) -> tuple[float, np.ndarray]:
    """Brute-force minimum of ``costs . y`` over all deterministic policies."""
    P, p = _as_kernel(P), _as_initial(p)
    T1, S, A = P.T + 1, P.S, P.A
    count = A ** (S * T1)
    if count > MAX_POLICIES:
        raise CapabilityError(f"{count} policies exceed the enumeration limit")
    c = np.asarray(costs, dtype=float).reshape(T1, S, A)
    best, best_y = np.inf, None
    for table in itertools.product(range(A), repeat=S * T1):
        y = rollout_policy(deterministic_policy(np.reshape(table, (T1, S)), A), P, p)
        value = float(np.sum(c * y))
        if value < best:
            best, best_y = value, y
    return best, best_y
