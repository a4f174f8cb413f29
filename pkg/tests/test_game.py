import numpy as np
import pytest
from hypothesis import given

from mdpcg.errors import CapabilityError, DimensionError, ValidationError
from mdpcg.game import (CostModel, StopRule, _ActiveSet, eval_costs, eval_potential,
                        solve_equilibrium_fw, wardrop_violation)
from mdpcg.mdp import Dimensions, check_feasibility, q_values
from mdpcg.oracle import solve_constrained_potential
from mdpcg.scenario import generate_gridworld
from mdpcg.tolling import ConstraintSet

from helpers import dims_st, random_initial, random_kernel, seeds

ONE_STAGE = np.zeros((0, 1, 1, 2))


def never_binding(dims, mass=1.0):
    A = np.zeros((1, dims.size))
    A[0, 0] = 1.0
    return ConstraintSet(A, [10.0 * mass])


def random_model(rng, T, S, A):
    return CostModel.affine(rng.uniform(0.05, 0.5, (T + 1, S, A)),
                            rng.uniform(0, 1, (T + 1, S, A)))


# -- costs and potential ----------------------------------------------------

def test_affine_costs():
    d = Dimensions(1, 2, 2)
    m = CostModel.affine(2.0, 1.0, d)
    np.testing.assert_array_equal(eval_costs(m, np.zeros(d.shape)), 1.0)
    np.testing.assert_array_equal(eval_costs(m, np.full(d.shape, 3.0)), 7.0)


def test_wait_cost_adds_scaled_load():
    d = Dimensions(1, 1, 1)
    offset = np.array([-2.4, 1.3]).reshape(d.shape)
    m = CostModel.affine(np.full(d.shape, 0.1), offset, family="offset_linear")
    y = np.array([4.0, 7.0]).reshape(d.shape)
    np.testing.assert_allclose(eval_costs(m, y) - offset, 0.1 * y, rtol=1e-15)


def test_eval_costs_rejects_negative_population():
    m = CostModel.affine(1.0, 0.0, Dimensions(0, 1, 2))
    eval_costs(m, np.array([[[-1e-13, 1.0]]]))
    with pytest.raises(ValidationError):
        eval_costs(m, np.array([[[-1e-9, 1.0]]]))
    with pytest.raises(DimensionError):
        eval_costs(m, np.zeros((1, 2, 2)))


def test_potential_examples():
    m = CostModel.affine(1.0, 0.0, Dimensions(1, 2, 2))
    y = np.zeros((2, 2, 2))
    assert eval_potential(m, y) == 0.0
    y[1, 0, 1] = 2.0
    assert eval_potential(m, y) == 2.0


def test_potential_custom_family_unsupported():
    d = Dimensions(0, 1, 2)
    m = CostModel.from_function(lambda y: y ** 3 + y, d, alpha=1.0)
    np.testing.assert_allclose(eval_costs(m, np.full(d.shape, 2.0)), 10.0)
    with pytest.raises(CapabilityError):
        eval_potential(m, np.zeros(d.shape))
    with pytest.raises(CapabilityError):
        solve_equilibrium_fw(m, ONE_STAGE, [1.0], step_rule="line_search")


def test_cost_model_validation():
    with pytest.raises(ValidationError):
        CostModel(np.ones(3), np.zeros(3), alpha=2.0)
    with pytest.raises(ValidationError):
        CostModel(np.ones(3), np.zeros(3), alpha=0.0)
    with pytest.raises(DimensionError):
        CostModel(np.ones(3), np.zeros(2), alpha=1.0)
    m = CostModel.affine([0.3, 0.2, 0.7], [0, 0, 0])
    assert m.alpha == 0.2
    assert CostModel.from_json(m.to_json()).alpha == 0.2


def test_potential_gradient_finite_differences(rng):
    m = random_model(rng, 2, 3, 2)
    y = rng.uniform(0.1, 2.0, m.shape)
    h = 1e-5
    grad = np.empty(y.size)
    for i in range(y.size):
        e = np.zeros(y.size)
        e[i] = h
        grad[i] = (eval_potential(m, y.ravel() + e) - eval_potential(m, y.ravel() - e)) / (2 * h)
    np.testing.assert_allclose(grad, eval_costs(m, y).ravel(), rtol=1e-6)


def test_potential_forward_difference_error_is_first_order(rng):
    m = random_model(rng, 1, 2, 2)
    y = rng.uniform(0.1, 2.0, m.shape)
    e = np.zeros(m.shape)
    e[1, 0, 1] = 1.0
    target = eval_costs(m, y)[1, 0, 1]
    errs = [abs((eval_potential(m, y + h * e) - eval_potential(m, y)) / h - target)
            for h in (1e-2, 1e-3)]
    assert errs[1] < errs[0] / 5


@given(dims_st, seeds)
def test_alpha_strong_convexity(dims, seed):
    T, S, A = dims
    rng = np.random.default_rng(seed)
    m = random_model(rng, T, S, A)
    for _ in range(10):
        x, z = rng.uniform(0, 3, m.shape), rng.uniform(0, 3, m.shape)
        lam = rng.uniform()
        lhs = eval_potential(m, lam * x + (1 - lam) * z)
        rhs = (lam * eval_potential(m, x) + (1 - lam) * eval_potential(m, z)
               - 0.5 * m.alpha * lam * (1 - lam) * np.sum((x - z) ** 2))
        assert lhs <= rhs + 1e-10 * (1 + abs(rhs))


# -- Frank-Wolfe ------------------------------------------------------------

# open_loop converges like 1/j, so it gets a looser target.
@pytest.mark.parametrize("rule,eps", [("open_loop", 1e-4), ("line_search", 1e-8),
                                      ("pairwise", 1e-8)])
def test_symmetric_two_action_game(rule, eps):
    m = CostModel.affine([[[1.0, 1.0]]], [[[0.0, 0.0]]])
    res = solve_equilibrium_fw(m, ONE_STAGE, [1.0], StopRule(100_000, eps), step_rule=rule)
    assert res.converged and res.epsilon <= eps
    np.testing.assert_allclose(res.y.ravel(), [0.5, 0.5], atol=1e-4)
    # the Q-gap of the split game is about twice the FW gap
    assert np.all(wardrop_violation(m, res.y, ONE_STAGE, [1.0]) <= 4 * eps)
    assert len(res.gap_history) == res.iterations


def test_symmetric_game_exact_with_polish():
    m = CostModel.affine([[[1.0, 1.0]]], [[[0.0, 0.0]]])
    res = solve_equilibrium_fw(m, ONE_STAGE, [1.0], StopRule(1000, 1e-8), polish=True)
    np.testing.assert_allclose(res.y.ravel(), [0.5, 0.5], atol=1e-12)
    assert np.all(wardrop_violation(m, res.y, ONE_STAGE, [1.0]) <= 1e-8)


def test_offset_game_puts_all_mass_on_cheap_action(oracles):
    ref = oracles["offset_split"]
    m = CostModel.affine(np.reshape(ref["slope"], (1, 1, 2)), np.reshape(ref["offset"], (1, 1, 2)))
    res = solve_equilibrium_fw(m, ONE_STAGE, [1.0], StopRule(100, 1e-10))
    np.testing.assert_allclose(res.y.ravel(), ref["y"], atol=1e-12)
    assert res.epsilon == 0.0


@pytest.mark.parametrize("idx", range(5))
@pytest.mark.parametrize("rule", ["open_loop", "line_search", "pairwise"])
def test_fw_gap_bounds_suboptimality(oracles, idx, rule):
    ref = oracles["gridworld_equilibria"][idx]
    inst = generate_gridworld(ref["rows"], ref["cols"], ref["T"], seed=ref["seed"])
    eps = 1e-5
    res = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(200_000, eps),
                               step_rule=rule)
    assert res.converged and res.epsilon <= eps
    assert check_feasibility(res.y, inst.kernel, inst.initial)
    sub = eval_potential(inst.model, res.y) - ref["F"]
    assert -1e-12 <= sub <= res.epsilon + 1e-12


def test_polished_solution_matches_frozen_optimum(oracles):
    ref = oracles["gridworld_equilibria"][0]
    inst = generate_gridworld(1, 3, 3, seed=ref["seed"])
    res = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(50_000, 1e-10),
                               step_rule="pairwise", polish=True)
    np.testing.assert_allclose(res.y.ravel(), ref["y"], atol=1e-8)
    assert eval_potential(inst.model, res.y) == pytest.approx(ref["F"], abs=1e-10)


def test_nonconvergence_is_flagged_not_raised():
    inst = generate_gridworld(2, 2, 3, seed=1)
    res = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(5, 1e-12))
    assert not res.converged and res.iterations == 5
    assert res.epsilon > 1e-12
    assert check_feasibility(res.y, inst.kernel, inst.initial)


def test_solver_rejects_unknown_step_rule():
    inst = generate_gridworld(1, 2, 1, seed=0)
    with pytest.raises(ValidationError):
        solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, step_rule="newton")
    with pytest.raises(ValidationError):
        StopRule(0, 1e-6)


def test_line_search_descends_tolled_potential(rng):
    inst = generate_gridworld(2, 2, 3, seed=7)
    toll = rng.uniform(0, 0.5, inst.dims.shape)
    values = []
    for iters in range(1, 40):
        res = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(iters, 0.0),
                                   toll_offset=toll, step_rule="line_search")
        values.append(eval_potential(inst.model, res.y) + float(np.sum(toll * res.y)))
    assert np.all(np.diff(values) <= 1e-12)


def test_warm_start_from_previous_result():
    inst = generate_gridworld(2, 2, 4, seed=2)
    first = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(100_000, 1e-4),
                                 step_rule="pairwise")
    again = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(100_000, 1e-4),
                                 step_rule="pairwise", init=first)
    assert again.iterations <= 2
    np.testing.assert_allclose(again.y, first.y, atol=1e-12)


def test_active_set_compaction_preserves_point(rng):
    atoms = rng.random((5, 12))
    w = rng.random(5)
    w /= w.sum()
    act = _ActiveSet(atoms, w, limit=8)
    for i in range(20):
        v = rng.random(12)
        act.shift(int(np.argmax(act.weights)), v, key=bytes([i]), eta=0.3 * act.weights.max())
        assert act.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert len(act.weights) <= 8
        assert np.all(act.weights >= 0)
    np.testing.assert_allclose(act.point(), act.weights @ act.atoms, atol=1e-12)


# -- wardrop_violation --------------------------------------------------------

def test_violation_of_all_mass_on_expensive_action():
    m = CostModel.affine([[[1.0, 1.0]]], [[[0.0, 2.0]]])
    y = np.array([[[0.0, 1.0]]])
    rep = wardrop_violation(m, y, ONE_STAGE, [1.0])
    # Q = (0, 3); the used action is 3 above the best one.
    assert rep.shape == (1, 1) and rep[0, 0] == pytest.approx(3.0)


def test_violation_rejects_infeasible():
    m = CostModel.affine([[[1.0, 1.0]]], [[[0.0, 0.0]]])
    with pytest.raises(ValidationError):
        wardrop_violation(m, np.array([[[0.3, 0.3]]]), ONE_STAGE, [1.0])


def test_violation_shrinks_with_eps_target():
    inst = generate_gridworld(2, 2, 3, seed=11)
    worst = []
    for eps in (1e-2, 1e-4, 1e-6, 1e-8):
        res = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial, StopRule(200_000, eps),
                                   step_rule="pairwise")
        worst.append(wardrop_violation(inst.model, res.y, inst.kernel, inst.initial).max())
    assert worst[-1] < worst[0]
    assert all(b <= a * 1.5 + 1e-12 for a, b in zip(worst, worst[1:]))
    assert worst[-1] <= 1e-3


def test_oracle_optimum_is_wardrop(oracles):
    for ref in oracles["gridworld_equilibria"]:
        inst = generate_gridworld(1, 3, 3, seed=ref["seed"])
        y = np.reshape(ref["y"], inst.dims.shape)
        scale = np.abs(eval_costs(inst.model, y)).max()
        assert wardrop_violation(inst.model, y, inst.kernel, inst.initial).max() <= 1e-6 * scale


@given(dims_st, seeds)
def test_gap_certifies_suboptimality_random(dims, seed):
    T, S, A = dims
    rng = np.random.default_rng(seed)
    P, p = random_kernel(rng, T, S, A), random_initial(rng, S)
    m = random_model(rng, T, S, A)
    res = solve_equilibrium_fw(m, P, p, StopRule(2000, 1e-6), step_rule="line_search")
    star = solve_constrained_potential(m, never_binding(Dimensions(T, S, A)), P, p)
    sub = eval_potential(m, res.y) - star.F
    assert sub >= -1e-10
    assert sub <= res.epsilon + 1e-10


def test_q_values_of_equilibrium_equalise_used_actions(oracles):
    ref = oracles["gridworld_equilibria"][1]
    inst = generate_gridworld(1, 3, 3, seed=ref["seed"])
    y = np.reshape(ref["y"], inst.dims.shape)
    Q = q_values(eval_costs(inst.model, y), inst.kernel.P)
    used = y > 1e-7
    gap = np.where(used, Q - Q.min(axis=2, keepdims=True), 0.0)
    assert gap.max() <= 1e-6
