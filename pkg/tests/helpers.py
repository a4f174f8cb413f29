"""Random instance builders and hypothesis strategies shared by the tests."""
from hypothesis import strategies as st

from mdpcg.mdp import rollout_policy


def random_kernel(rng, T, S, A, sparse=False):
    P = rng.random((T, S, S, A))
    if sparse:
        P *= rng.random((T, S, S, A)) < 0.5
        P[:, 0] += 1e-3  # keep every column nonzero
    return P / P.sum(axis=1, keepdims=True)


def random_initial(rng, S, mass=1.0):
    p = rng.random(S) + 0.05
    return mass * p / p.sum()


def random_policy(rng, T, S, A):
    pi = rng.random((T + 1, S, A)) ** 3
    return pi / pi.sum(axis=2, keepdims=True)


def random_feasible(rng, P, p):
    T, S, _, A = P.shape
    return rollout_policy(random_policy(rng, T, S, A), P, p)


dims_st = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
seeds = st.integers(0, 2**32 - 1)


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: dict = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:<3} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return ok
