"""Compute reference values with independent methods and freeze them to tests/fixtures.

Run once; tests compare the system under test against the frozen numbers.
Nothing here calls the DP or Frank-Wolfe code: policies are enumerated by
plain recursion, scalar splits by grid search, and constrained optima by the
dense QP oracle.
"""
import itertools
import json
from pathlib import Path

import numpy as np

from mdpcg.game import CostModel
from mdpcg.oracle import dual_function_oracle, enumerate_policies, solve_constrained_potential
from mdpcg.scenario import build_capacity_constraints, generate_gridworld
from mdpcg.tolling import ConstraintSet

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "oracles.json"


def chain_instance():
    """2 states, 2 actions, T=3: action 0 stays, action 1 switches state."""
    T, S, A = 3, 2, 2
    P = np.zeros((T, S, S, A))
    for t in range(T):
        for s in range(S):
            P[t, s, s, 0] = 1.0
            P[t, 1 - s, s, 1] = 1.0
    c = np.array([[[1.0, 4.0], [3.0, 0.5]],
                  [[2.0, 0.0], [5.0, 1.0]],
                  [[0.0, 3.0], [1.0, 2.0]],
                  [[6.0, 2.0], [0.0, 7.0]]])
    return P, c


def enumerate_q(P, c):
    """Q[t, s, a] as the cheapest continuation over every deterministic tail policy."""
    T1, S, A = c.shape
    Q = np.empty((T1, S, A))

    def tail_cost(t, dist, table):
        total = 0.0
        for u in range(t, T1):
            acts = table[u - t]
            total += sum(dist[s] * c[u, s, acts[s]] for s in range(S))
            if u < T1 - 1:
                nxt = np.zeros(S)
                for s in range(S):
                    nxt += dist[s] * P[u, :, s, acts[s]]
                dist = nxt
        return total

    for t in range(T1):
        for s in range(S):
            for a in range(A):
                best = np.inf
                if t == T1 - 1:
                    best = c[t, s, a]
                else:
                    dist = P[t, :, s, a]
                    for flat in itertools.product(range(A), repeat=S * (T1 - t - 1)):
                        table = np.reshape(flat, (T1 - t - 1, S))
                        best = min(best, c[t, s, a] + tail_cost(t + 1, dist, table))
                Q[t, s, a] = best
    return Q


def slack(dims):
    """One row that can never bind (mass is 1), so the QP is the unconstrained one."""
    A = np.zeros((1, dims.size))
    A[0, 0] = 1.0
    return ConstraintSet(A, np.array([10.0]))


def random_instance(seed, T, S, A):
    rng = np.random.default_rng(seed)
    P = rng.random((T, S, S, A))
    P /= P.sum(axis=1, keepdims=True)
    p = rng.random(S)
    p /= p.sum()
    return P, p


def scalar_split_grid(cap=0.3, step=1e-4):
    """min x^2/2 + (1-x)^2/2 over x <= cap on a grid; tau from the KKT of the split."""
    xs = np.arange(0.0, 1.0 + step / 2, step)
    xs = xs[xs <= cap + 1e-12]
    F = 0.5 * xs ** 2 + 0.5 * (1 - xs) ** 2
    x = float(xs[np.argmin(F)])
    return x, (1 - x) - x


def main():
    doc = {}

    P, c = chain_instance()
    Q = enumerate_q(P, c)
    doc["chain_q"] = {"P": P.tolist(), "c": c.tolist(), "Q": Q.tolist()}

    P, p = random_instance(7, 3, 3, 2)
    cost = np.random.default_rng(8).normal(size=(4, 3, 2))
    best, y = enumerate_policies(cost, P, p)
    doc["enum_3x3x2"] = {"P": P.tolist(), "p": p.tolist(), "c": cost.tolist(), "best": best}

    P, p = random_instance(11, 1, 2, 2)
    cost = np.random.default_rng(12).normal(size=(2, 2, 2))
    best, _ = enumerate_policies(cost, P, p)
    doc["enum_2x2x2"] = {"P": P.tolist(), "p": p.tolist(), "c": cost.tolist(), "best": best}

    x, tau = scalar_split_grid()
    doc["capacity_split"] = {"y": [x, 1 - x], "tau": tau, "resolution": 1e-4}

    # Unconstrained optimum of random small instances by the dense QP.
    eq = []
    for seed in range(5):
        inst = generate_gridworld(1, 3, 3, seed=100 + seed)
        sol = solve_constrained_potential(inst.model, slack(inst.dims), inst.kernel, inst.initial, tol=1e-9)
        eq.append({"seed": 100 + seed, "rows": 1, "cols": 3, "T": 3, "F": sol.F,
                   "y": sol.y.ravel().tolist()})
    doc["gridworld_equilibria"] = eq

    # Constrained optimum and dual values for a congested 2-state instance.
    inst = generate_gridworld(1, 2, 2, seed=3)
    sol0 = solve_constrained_potential(inst.model, slack(inst.dims), inst.kernel, inst.initial,
                                       tol=1e-9)
    loads = sol0.y.sum(axis=2)
    cap = 0.5 * (loads.max() + loads.mean())
    cons = build_capacity_constraints(cap, inst.dims)
    sol = solve_constrained_potential(inst.model, cons, inst.kernel, inst.initial, tol=1e-9)
    rng = np.random.default_rng(5)
    probes = [rng.uniform(0, 2 * max(sol.tau.max(), 0.1), cons.C) for _ in range(3)]
    doc["congested_2state"] = {
        "seed": 3, "cap": cap, "F": sol.F, "d": sol.d, "tau": sol.tau.tolist(),
        "y": sol.y.ravel().tolist(), "F_unconstrained": sol0.F,
        "residual_unconstrained": (cons.A @ sol0.y.ravel() - cons.b).tolist(),
        "probes": [t.tolist() for t in probes],
        "d_probes": [dual_function_oracle(inst.model, cons, inst.kernel, inst.initial, t)
                     for t in probes]}

    # Two-action scalar game with a constant gap in the offsets: l0(1) = 1 < l1(0) = 10.
    model = CostModel.affine([[[1.0, 1.0]]], [[[0.0, 10.0]]])
    doc["offset_split"] = {"slope": model.slope.ravel().tolist(),
                           "offset": model.offset.ravel().tolist(), "y": [1.0, 0.0]}

    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(doc, indent=1))
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
