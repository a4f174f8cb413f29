"""Affine design constraints and iterative toll synthesis by projected dual ascent."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, ValidationError
from .game import (CostModel, EquilibriumResult, StopRule, eval_costs, eval_potential,
                   solve_equilibrium_fw)

log = logging.getLogger(__name__)


def operator_norm(A, rtol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Largest singular value of ``A`` by power iteration on ``A'A``."""
    n = A.shape[1]
    rng = np.random.default_rng(0)
    v = 1.0 + 0.01 * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= rtol * new:
            lam = new
            break
        lam = new
    return math.sqrt(lam)


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Rows of ``A y <= b`` over flattened populations."""

    A: sp.csr_array
    b: np.ndarray

    def __post_init__(self):
        A = sp.csr_array(self.A, dtype=float)
        b = np.array(self.b, dtype=float).ravel()
        if A.shape[0] < 1:
            raise ValidationError("at least one constraint row is required")
        if A.shape[0] != b.shape[0]:
            raise DimensionError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        if self.norm_A <= 0:
            raise ValidationError("constraint matrix is zero")

    @property
    def C(self) -> int:
        return self.A.shape[0]

    @cached_property
    def norm_A(self) -> float:
        return operator_norm(self.A)

    def residual(self, y) -> np.ndarray:
        return self.A @ np.ravel(y) - self.b

    def violation(self, y) -> np.ndarray:
        return np.maximum(self.residual(y), 0.0)

    def to_triplets(self):
        coo = self.A.tocoo()
        return list(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def save(self, path) -> None:
        """Sparse triplet text file: a header ``C n``, ``row col value`` lines, then ``b``."""
        lines = [f"{self.C} {self.A.shape[1]}"]
        lines += [f"{r} {c} {v!r}" for r, c, v in self.to_triplets()]
        lines.append("b " + " ".join(repr(float(x)) for x in self.b))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ConstraintSet":
        with open(path) as fh:
            rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
        C, n = int(rows[0][0]), int(rows[0][1])
        b_line = next(r for r in rows if r[0] == "b")
        trip = [r for r in rows[1:] if r[0] != "b"]
        r = [int(t[0]) for t in trip]
        c = [int(t[1]) for t in trip]
        v = [float(t[2]) for t in trip]
        A = sp.coo_array((v, (r, c)), shape=(C, n)).tocsr()
        return cls(A, np.array(b_line[1:], dtype=float))


def _check_tau(tau, cons: ConstraintSet) -> np.ndarray:
    tau = np.asarray(tau, dtype=float).ravel()
    if tau.shape != (cons.C,):
        raise DimensionError(f"toll has {tau.size} entries for {cons.C} constraints")
    if np.any(tau < 0):
        raise ValidationError("tolls must be nonnegative")
    return tau


def toll_offset(cons: ConstraintSet, tau, shape=None) -> np.ndarray:
    off = cons.A.T @ _check_tau(tau, cons)
    return off if shape is None else off.reshape(shape)


def augment_costs(model: CostModel, cons: ConstraintSet, tau, y) -> np.ndarray:
    """Tolled costs ``l(y) + A' tau``."""
    return eval_costs(model, y) + toll_offset(cons, tau, model.shape)


def lagrangian(model: CostModel, cons: ConstraintSet, y, tau) -> float:
    tau = _check_tau(tau, cons)
    y = np.asarray(y, dtype=float)
    if y.size != cons.A.shape[1]:
        raise DimensionError("population size does not match the constraint matrix")
    return eval_potential(model, y) + float(tau @ cons.residual(y))


@dataclass(frozen=True, eq=False)
class DualCertificate:
    """Approximate dual value and gradient read off an observed response ``y``."""

    value: float
    gradient: np.ndarray
    y: np.ndarray
    eps: float
    converged: bool
    result: EquilibriumResult = field(repr=False)


def dual_value_and_gradient(model: CostModel, cons: ConstraintSet, P, p, tau, inner_eps: float,
                            *, step_rule: str = "pairwise", max_iters: int = 100_000,
                            init=None, polish: bool = False) -> DualCertificate:
    if inner_eps < 0:
        raise ValidationError("inner_eps must be nonnegative")
    tau = _check_tau(tau, cons)
    res = solve_equilibrium_fw(model, P, p, StopRule(max_iters, inner_eps),
                               toll_offset=toll_offset(cons, tau), step_rule=step_rule,
                               init=init, polish=polish)
    if not res.converged:
        log.warning("inner solve stopped at gap %.3g above target %.3g", res.epsilon, inner_eps)
    return DualCertificate(lagrangian(model, cons, res.y, tau), cons.residual(res.y), res.y,
                           res.epsilon, res.converged, res)


def project_nonneg(v) -> np.ndarray:
    return np.maximum(np.asarray(v, dtype=float), 0.0)


@dataclass(frozen=True)
class EpsSchedule:
    """Inner accuracy per outer iteration: ``const``, ``harmonic`` or ``geom``."""

    kind: str = "const"
    eps0: float = 1e-6
    ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in ("const", "harmonic", "geom"):
            raise ValidationError(f"unknown eps schedule {self.kind!r}")
        if self.eps0 < 0 or not 0 < self.ratio <= 1:
            raise ValidationError("invalid eps schedule parameters")

    def __call__(self, k: int) -> float:
        if self.kind == "const":
            return self.eps0
        if self.kind == "harmonic":
            return self.eps0 / (k + 1)
        return self.eps0 * self.ratio ** k

    @classmethod
    def parse(cls, text: str) -> "EpsSchedule":
        """``const:F``, ``harmonic:F`` or ``geom:F,R``."""
        try:
            kind, _, arg = text.partition(":")
            parts = [float(x) for x in arg.split(",")]
            if kind == "geom":
                return cls(kind, parts[0], parts[1])
            if len(parts) != 1:
                raise ValueError
            return cls(kind, parts[0])
        except (ValueError, IndexError):
            raise ValidationError(f"cannot parse eps schedule {text!r}") from None

    def __str__(self):
        return f"geom:{self.eps0!r},{self.ratio!r}" if self.kind == "geom" else f"{self.kind}:{self.eps0!r}"


def max_step(model: CostModel, cons: ConstraintSet) -> float:
    """Largest step covered by the convergence theorems, ``alpha / (2 ||A||^2)``."""
    return model.alpha / (2.0 * cons.norm_A ** 2)


@dataclass
class TollConfig:
    iters: int = 500
    gamma: float | None = None
    eps: EpsSchedule = field(default_factory=EpsSchedule)
    tau0: np.ndarray | None = None
    step_rule: str = "pairwise"
    warm_start: bool = True
    max_inner_iters: int = 100_000
    # Exact face solve on exit of each inner solve; turns eps targets into ceilings.
    polish: bool = False
    # Experimental: per-iteration step sizes. No convergence guarantee applies.
    gamma_schedule: Callable[[int], float] | None = None


@dataclass
class TollTrajectory:
    """Append-only record of Algorithm-1 iterates.

    ``taus[k]`` is the toll applied at iteration ``k`` (``taus`` has one more
    row than ``ys``), ``ys[k]`` the observed response and ``eps[k]`` its
    certified sub-optimality.
    """

    gamma: float
    alpha: float
    norm_A: float
    taus: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    eps_target: list = field(default_factory=list)
    dual_values: list = field(default_factory=list)
    gradients: list = field(default_factory=list)

    def __len__(self):
        return len(self.ys)

    @property
    def K(self) -> int:
        return len(self.ys)

    @property
    def tau0(self) -> np.ndarray:
        return self.taus[0]

    def tau_array(self) -> np.ndarray:
        return np.asarray(self.taus[: self.K + 1])

    def avg_tau(self) -> np.ndarray:
        """Rows k-1 hold the mean of tau^1..tau^k, for k = 1..K."""
        t = self.tau_array()[1:]
        return np.cumsum(t, axis=0) / np.arange(1, self.K + 1)[:, None]

    def avg_y(self) -> np.ndarray:
        """Rows k-1 hold the mean of y^0..y^(k-1), flattened."""
        y = np.asarray(self.ys).reshape(self.K, -1)
        return np.cumsum(y, axis=0) / np.arange(1, self.K + 1)[:, None]

    def E(self) -> np.ndarray:
        """Accumulated oracle error E^k for k = 1..K."""
        return np.cumsum(self.eps)

    def snapshot(self) -> "TollTrajectory":
        k = self.K
        return TollTrajectory(self.gamma, self.alpha, self.norm_A, self.taus[: k + 1],
                              self.ys[:k], self.eps[:k], self.eps_target[:k],
                              self.dual_values[:k], self.gradients[:k])

    def records(self, cons: ConstraintSet, model: CostModel | None = None):
        """One dict per iteration, the JSON-lines trajectory format."""
        avg_tau, avg_y, E = self.avg_tau(), self.avg_y(), self.E()
        taus = self.tau_array()
        for k in range(self.K):
            y = self.ys[k]
            rec = {"k": k,
                   "tau": taus[k].tolist(),
                   "tau_next": taus[k + 1].tolist(),
                   "eps": self.eps[k],
                   "eps_target": self.eps_target[k],
                   "violation": float(np.linalg.norm(cons.violation(y))),
                   "total_violation": float(cons.violation(y).sum()),
                   "avg_violation": float(np.linalg.norm(cons.violation(avg_y[k]))),
                   "avg_total_violation": float(cons.violation(avg_y[k]).sum()),
                   "avg_tau": avg_tau[k].tolist(),
                   "E": float(E[k]),
                   "dual_value": self.dual_values[k]}
            if model is not None:
                mass = float(np.sum(y[0]))
                ybar = avg_y[k].reshape(y.shape)
                rec["avg_cost"] = float(np.sum(y * eval_costs(model, y))) / mass
                rec["avg_cost_ybar"] = float(np.sum(ybar * eval_costs(model, ybar))) / mass
            yield rec

    def write_jsonl(self, path, cons: ConstraintSet, model: CostModel | None = None) -> None:
        from .io import write_jsonl
        write_jsonl(path, self.records(cons, model))


def synthesize_tolls(model: CostModel, cons: ConstraintSet, P, p,
                     cfg: TollConfig | None = None,
                     callback: Callable[[int, DualCertificate], None] | None = None
                     ) -> TollTrajectory:
    """Projected dual ascent on tolls with approximate equilibrium responses.

    Each outer step observes an ``eps^k``-equilibrium ``y^k`` of the game tolled
    by ``A' tau^k`` and sets ``tau^{k+1} = [tau^k + gamma (A y^k - b)]_+``.
    """
    cfg = cfg or TollConfig()
    bound = max_step(model, cons)
    gamma = bound if cfg.gamma is None else float(cfg.gamma)
    if gamma <= 0:
        raise ValidationError("step size must be positive")
    if gamma > bound * (1 + 1e-12):
        warnings.warn(f"step size {gamma:.6g} exceeds alpha/(2||A||^2) = {bound:.6g}; clamped",
                      stacklevel=2)
        gamma = bound
    if cfg.iters < 1:
        raise ValidationError("iteration count must be positive")
    tau = np.zeros(cons.C) if cfg.tau0 is None else _check_tau(cfg.tau0, cons).copy()
    traj = TollTrajectory(gamma, model.alpha, cons.norm_A, taus=[tau])
    prev = None
    for k in range(cfg.iters):
        target = cfg.eps(k)
        cert = dual_value_and_gradient(model, cons, P, p, tau, target, step_rule=cfg.step_rule,
                                       max_iters=cfg.max_inner_iters,
                                       init=prev if cfg.warm_start else None,
                                       polish=cfg.polish)
        prev = cert.result
        step = gamma if cfg.gamma_schedule is None else float(cfg.gamma_schedule(k))
        tau = project_nonneg(tau + step * cert.gradient)
        traj.ys.append(cert.y)
        traj.eps.append(cert.eps)
        traj.eps_target.append(target)
        traj.dual_values.append(cert.value)
        traj.gradients.append(cert.gradient)
        traj.taus.append(tau)
        if callback is not None:
            callback(k, cert)
    return traj


@dataclass
class ConvergenceReport:
    """Per-k observed quantities and the matching theoretical bounds (k = 1..K)."""

    columns: dict

    def __getitem__(self, key):
        return self.columns[key]

    def to_csv(self, path) -> None:
        from .io import write_csv
        names = list(self.columns)
        rows = zip(*(self.columns[n] for n in names))
        write_csv(path, names, rows)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def convergence_report(traj: TollTrajectory, cons: ConstraintSet, oracle=None,
                       dual: Callable[[np.ndarray], float] | None = None,
                       workers: int = 1) -> ConvergenceReport:
    """Observed series with the bound right-hand sides when an oracle is given.

    ``oracle`` supplies ``tau`` (the minimum toll), ``y`` and ``d``; ``dual``
    evaluates d exactly. Without them only the observed series are emitted.
    """
    K = traj.K
    if K == 0:
        raise ValidationError("trajectory is empty")
    k = np.arange(1, K + 1, dtype=float)
    gamma, alpha = traj.gamma, traj.alpha
    avg_tau, avg_y, E = traj.avg_tau(), traj.avg_y(), traj.E()
    taus = traj.tau_array()
    cols = {"k": k.astype(int),
            "E": E,
            "avg_violation": np.array([np.linalg.norm(cons.violation(v)) for v in avg_y]),
            "avg_total_violation": np.array([cons.violation(v).sum() for v in avg_y]),
            "avg_tau_total": avg_tau.sum(axis=1),
            "tau_norm": np.linalg.norm(taus[1:], axis=1)}
    if oracle is not None:
        ts = np.asarray(oracle.tau, dtype=float)
        ys = np.ravel(oracle.y)
        t0 = np.asarray(traj.tau0, dtype=float)
        n_ts, n_0s, n_0 = np.linalg.norm(ts), np.linalg.norm(t0 - ts), np.linalg.norm(t0)
        root = np.sqrt(gamma * E)
        cols["thm1_rhs"] = (n_0s ** 2 / (2 * gamma) + 2 * E) / k
        cols["cor1_rhs"] = (n_ts + n_0s + 2 * root) / (gamma * k)
        cols["tau_norm_bound"] = n_ts + n_0s + 2 * root
        cols["ybar_dist2"] = np.sum((avg_y - ys) ** 2, axis=1)
        D = np.maximum(0.5 * n_0 ** 2 + 2 * E, n_ts ** 2 + n_ts * n_0s + 2 * root)
        cols["thm2_rhs"] = alpha / (2 * gamma * k) * D
        # Same argument carried through with strong convexity of L(., tau*) and
        # consistent units: ||ybar - y*||^2 <= (2/alpha) (L(ybar, tau*) - L(y*, tau*)).
        D_units = 0.5 * n_0 ** 2 + 2 * gamma * E + n_ts * (n_ts + n_0s + 2 * root)
        cols["thm2_rhs_rederived"] = 2.0 / (alpha * gamma * k) * D_units
        if dual is not None:
            d_bar = np.array(_map(dual, list(avg_tau), workers))
            cols["dual_avg_tau"] = d_bar
            cols["dgap"] = oracle.d - d_bar
    return ConvergenceReport(cols)


def penalized_potential(model: CostModel, cons: ConstraintSet, tau, y) -> float:
    """F0(y) + sum_i tau_i (A_i y - b_i)_+."""
    tau = _check_tau(tau, cons)
    return eval_potential(model, y) + float(tau @ cons.violation(y))


def penalized_subgradient(model: CostModel, cons: ConstraintSet, tau, y) -> np.ndarray:
    """Costs plus ``tau_z A_z`` summed over the currently violated rows ``z``."""
    tau = _check_tau(tau, cons)
    active = cons.residual(y) > 0
    extra = cons.A.T @ np.where(active, tau, 0.0)
    return eval_costs(model, y) + extra.reshape(model.shape)


@dataclass(frozen=True, eq=False)
class ResidueCheck:
    lhs: np.ndarray
    rhs: np.ndarray
    passed: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        return self.rhs - self.lhs

    def __bool__(self):
        return bool(np.all(self.passed))


def residue_inequality_check(traj: TollTrajectory, cons: ConstraintSet, model: CostModel, probe,
                             dual: Callable[[np.ndarray], float], atol: float = 1e-9
                             ) -> ResidueCheck:
    """Per-step check of the one-step residue inequality at ``probe``:

        ||tau^{s+1} - probe||^2 <= ||tau^s - probe||^2
            + 2 gamma (d(tau^{s+1}) - L(y^s, tau^s) + 2 eps^s + g^s . (tau^s - probe))

    with ``g^s = A y^s - b`` and ``d`` evaluated by ``dual``.
    """
    probe = _check_tau(probe, cons)
    bar_alpha = cons.norm_A ** 2 / model.alpha
    if traj.gamma > 1.0 / (2 * bar_alpha) * (1 + 1e-12):
        warnings.warn("step size exceeds 1/(2 alpha_bar); the inequality is not guaranteed",
                      stacklevel=2)
    taus = traj.tau_array()
    lhs, rhs = [], []
    for s in range(traj.K):
        L = lagrangian(model, cons, traj.ys[s], taus[s])
        g = traj.gradients[s]
        lhs.append(float(np.sum((taus[s + 1] - probe) ** 2)))
        rhs.append(float(np.sum((taus[s] - probe) ** 2))
                   + 2 * traj.gamma * (dual(taus[s + 1]) - L + 2 * traj.eps[s]
                                       + float(g @ (taus[s] - probe))))
    lhs, rhs = np.array(lhs), np.array(rhs)
    scale = atol * np.maximum(1.0, np.abs(rhs))
    return ResidueCheck(lhs, rhs, lhs <= rhs + scale)
