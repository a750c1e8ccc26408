from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from sobolev_td.diffcore import DimensionError
from sobolev_td.envs import LqrEnv, OutOfBoundsError, Toy1DEnv
from sobolev_td.oracle import (ConvergenceError, GridSolution, LqrOracle, RiccatiSolution,
                               lqr_q_star_batch, lqr_q_star_eval, lqr_quadratic_coefficients, q_star_eval,
                               q_star_grads, riccati_solve, riccati_update, value_iteration_toy)
from sobolev_td.textio import FormatError

GOLDEN = Path(__file__).parent / "golden"


# --------------------------------------------------------------------------
# toy value iteration


def test_gamma0_value_at_right_edge():
    sol = value_iteration_toy(2001, 0.0, 1e-12)
    assert sol.v_star[-1] == pytest.approx(0.2, abs=1e-12)
    assert sol.pi_star[-1] == 1.0


def test_gamma0_value_at_zero():
    sol = value_iteration_toy(21, 0.0, 1e-12)   # grid step 0.1 contains 0.1
    i = np.argmin(np.abs(sol.s_grid))
    assert sol.v_star[i] == pytest.approx(0.01, abs=1e-12)


def test_gamma0_policy_is_clipped_shift():
    sol = value_iteration_toy(21, 0.0, 1e-12)
    np.testing.assert_allclose(sol.pi_star, np.clip(sol.s_grid + 0.1, -1, 1), atol=1e-12)


def test_bellman_residual_at_every_node(toy_solution):
    sol = toy_solution
    assert sol.residual <= 1e-12
    backup = (Toy1DEnv.reward(sol.s_grid[:, None], sol.s_grid[None, :]) + sol.gamma * sol.v_star[None, :]).max(1)
    assert np.abs(backup - sol.v_star).max() <= 1e-12


def test_grid_refinement_stability(toy_solution):
    fine = value_iteration_toy(2001, 0.9, 1e-12)
    assert np.abs(fine.v_star[::2] - toy_solution.v_star).max() <= 1e-3


def test_right_edge_value_is_stationary_reward(toy_solution):
    # staying at s = 1 pays 0.2 forever
    assert toy_solution.v_star[-1] == pytest.approx(0.2 / (1 - 0.9), abs=1e-10)
    assert toy_solution.pi_star[-1] == 1.0


def test_toy_solution_regression_anchors(toy_solution, toy_oracle):
    assert toy_oracle.v_star(-1.0) == pytest.approx(0.670, abs=1e-3)
    assert toy_oracle.v_star(0.0) == pytest.approx(1.532, abs=1e-3)
    assert toy_oracle.policy_star(0.0) == pytest.approx(0.36, abs=2e-3)
    assert toy_oracle.policy_star(0.5) == pytest.approx(0.752, abs=2e-3)
    assert toy_solution.iterations == 248


def test_argmax_ties_go_to_smallest_action():
    # with a constant-in-a reward every action ties; only the tie rule decides
    sol = value_iteration_toy(5, 0.0, 1e-12)
    reward = Toy1DEnv.reward(sol.s_grid[:, None], sol.s_grid[None, :])
    first = sol.s_grid[np.argmax(reward, axis=1)]
    np.testing.assert_array_equal(sol.pi_star, first)


def test_non_convergence_carries_residual():
    with pytest.raises(ConvergenceError) as info:
        value_iteration_toy(101, 0.9, 1e-12, max_iter=3)
    assert info.value.residual > 1e-12
    assert "residual" in str(info.value)


@pytest.mark.parametrize("kwargs", [dict(n_grid=1), dict(gamma=1.0), dict(gamma=-0.1), dict(tol=0.0)])
def test_value_iteration_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        value_iteration_toy(**kwargs)


def test_q_star_gamma0_is_reward():
    sol = value_iteration_toy(101, 0.0, 1e-12)
    rng = np.random.default_rng(0)
    s, a = rng.uniform(-1, 1, (2, 200))
    np.testing.assert_array_equal(q_star_eval(sol, s, a), Toy1DEnv.reward(s, a))


def test_q_star_on_grid_is_bit_exact(toy_solution):
    sol = toy_solution
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.uniform(-1, 1)
        j = rng.integers(0, sol.s_grid.size)
        expected = Toy1DEnv.reward(s, sol.s_grid[j]) + sol.gamma * sol.v_star[j]
        assert q_star_eval(sol, s, sol.s_grid[j]) == expected


def test_bellman_optimality_spot_check(toy_solution):
    sol = toy_solution
    rng = np.random.default_rng(2)
    for i in rng.integers(0, sol.s_grid.size, 50):
        s = np.full(sol.s_grid.size, sol.s_grid[i])
        best = q_star_eval(sol, s, sol.s_grid).max()
        assert abs(best - sol.v_star[i]) <= 2 * sol.residual + 1e-12


def test_q_star_out_of_bounds(toy_solution):
    with pytest.raises(OutOfBoundsError):
        q_star_eval(toy_solution, 0.0, 1.2)
    with pytest.raises(OutOfBoundsError):
        q_star_grads(toy_solution, -1.5, 0.0)


def test_q_star_grads_reward_part_exact():
    sol = value_iteration_toy(101, 0.0, 1e-12)
    gs, ga = q_star_grads(sol, np.array([0.3]), np.array([0.5]))
    assert gs[0] == pytest.approx(0.4, abs=1e-15)
    assert ga[0] == pytest.approx(-0.2, abs=1e-15)


def test_q_star_grad_a_matches_fd_away_from_kinks(toy_solution):
    rng = np.random.default_rng(3)
    s, a = rng.uniform(-0.95, 0.95, (2, 200))
    _, ga = q_star_grads(toy_solution, s, a)
    h = 1e-2
    fd = (q_star_eval(toy_solution, s, a + h) - q_star_eval(toy_solution, s, a - h)) / (2 * h)
    # V* is only piecewise smooth; agreement is at the level of the slope's variation over 2h
    assert np.median(np.abs(ga - fd)) <= 1e-3


def test_grid_solution_round_trip(tmp_path, toy_solution):
    path = tmp_path / "sol.txt"
    toy_solution.save(path)
    back = GridSolution.load(path)
    np.testing.assert_array_equal(back.s_grid, toy_solution.s_grid)
    np.testing.assert_array_equal(back.v_star, toy_solution.v_star)
    np.testing.assert_array_equal(back.pi_star, toy_solution.pi_star)
    assert back.gamma == toy_solution.gamma and back.iterations == toy_solution.iterations


def test_grid_solution_golden():
    golden = GridSolution.load(GOLDEN / "toy_grid_21.txt")
    fresh = value_iteration_toy(21, golden.gamma, 1e-12)
    np.testing.assert_allclose(fresh.v_star, golden.v_star, atol=1e-12)
    np.testing.assert_array_equal(fresh.pi_star, golden.pi_star)


def test_load_rejects_wrong_kind(tmp_path):
    path = tmp_path / "sol.txt"
    value_iteration_toy(5, 0.5, 1e-10).save(path)
    with pytest.raises(FormatError):
        RiccatiSolution.load(path)


# --------------------------------------------------------------------------
# Riccati


def _scalar(A=1.0, B=1.0, q=1.0, r=1.0, gamma=0.9):
    # riccati_solve only needs these attributes, which lets gamma = 1 through
    return SimpleNamespace(A=[[A]], B=[[B]], Qcost=[[q]], Rcost=[[r]], gamma=gamma)


def test_riccati_golden_ratio_undiscounted():
    sol = riccati_solve(_scalar(gamma=1.0))
    assert sol.P[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-10)


@pytest.mark.parametrize("gamma", [0.5, 0.9, 0.99])
def test_riccati_scalar_closed_form(gamma):
    # unit scalar problem: gamma P^2 + (1 - 2 gamma) P - 1 = 0, K = gamma P / (1 + gamma P)
    b = 1 - 2 * gamma
    P = (-b + np.sqrt(b * b + 4 * gamma)) / (2 * gamma)
    sol = riccati_solve(_scalar(gamma=gamma))
    assert sol.P[0, 0] == pytest.approx(P, abs=1e-10)
    assert sol.K[0, 0] == pytest.approx(gamma * P / (1 + gamma * P), abs=1e-10)


def test_riccati_no_control_geometric_series():
    sol = riccati_solve(_scalar(A=0.5, B=0.0, gamma=1.0))
    assert sol.P[0, 0] == pytest.approx(4 / 3, abs=1e-10)
    assert sol.K[0, 0] == 0.0


def test_riccati_zero_cost():
    env = LqrEnv(np.diag([0.5, -0.3]), np.eye(2), np.zeros((2, 2)), 2 * np.eye(2))
    sol = riccati_solve(env)
    assert not sol.P.any() and not sol.K.any()


def test_riccati_fixed_point_and_symmetry():
    rng = np.random.default_rng(5)
    L = rng.normal(size=(3, 3))
    env = LqrEnv(rng.normal(size=(3, 3)) * 0.5, rng.normal(size=(3, 2)), L @ L.T, np.eye(2), gamma=0.9)
    sol = riccati_solve(env, tol=1e-12)
    again = riccati_update(sol.P, env.A, env.B, env.Qcost, env.Rcost, env.gamma)
    assert np.abs(again - sol.P).max() <= 1e-11
    np.testing.assert_array_equal(sol.P, sol.P.T)
    assert np.linalg.eigvalsh(sol.P).min() >= -1e-12


def test_riccati_divergence_detected():
    # uncontrollable unstable mode without discount: P grows without bound
    with pytest.raises(ConvergenceError):
        riccati_solve(_scalar(A=2.0, B=0.0, gamma=1.0))


def test_riccati_max_iter():
    with pytest.raises(ConvergenceError):
        riccati_solve(_scalar(gamma=0.99), tol=1e-15, max_iter=2)


def test_lqr_q_star_origin():
    env = LqrEnv.default()
    q, gs, ga = lqr_q_star_eval(env, riccati_solve(env), [0.0], [0.0])
    assert q == 0.0 and not gs.any() and not ga.any()


def test_lqr_q_star_matches_definition_and_fd():
    rng = np.random.default_rng(6)
    L = rng.normal(size=(2, 2))
    env = LqrEnv(rng.normal(size=(2, 2)) * 0.6, rng.normal(size=(2, 1)), L @ L.T, np.eye(1), gamma=0.9)
    sol = riccati_solve(env)
    h = 1e-5
    for _ in range(20):
        s, a = rng.normal(size=2), rng.normal(size=1)
        q, gs, ga = lqr_q_star_eval(env, sol, s, a)
        sn = env.A @ s + env.B @ a
        assert q == pytest.approx(-(s @ env.Qcost @ s + a @ env.Rcost @ a) - env.gamma * sn @ sol.P @ sn,
                                  abs=1e-12)
        for grad, x, other, first in ((gs, s, a, True), (ga, a, s, False)):
            for i in range(x.size):
                e = np.zeros(x.size)
                e[i] = h
                fp = lqr_q_star_eval(env, sol, *((x + e, other) if first else (other, x + e)))[0]
                fm = lqr_q_star_eval(env, sol, *((x - e, other) if first else (other, x - e)))[0]
                assert grad[i] == pytest.approx((fp - fm) / (2 * h), abs=1e-8 * max(1.0, abs(grad[i])))


def test_lqr_greedy_action_is_minus_ks():
    env = LqrEnv.default()
    sol = riccati_solve(env)
    oracle = LqrOracle(env, sol)
    s = np.random.default_rng(7).normal(size=(50, 1))
    a_star = oracle.policy_star(s)
    np.testing.assert_allclose(oracle.grad_a_star(s, a_star), 0.0, atol=1e-8)
    # maximizer over a dense bracket agrees
    a_grid = np.linspace(-5, 5, 100001)
    for x, a in zip(s[:5, 0], a_star[:5, 0]):
        q = lqr_q_star_batch(env, sol, np.full((a_grid.size, 1), x), a_grid[:, None])[0]
        assert abs(a_grid[q.argmax()] - a) <= 1e-4


def test_lqr_sign_convention():
    env = LqrEnv.default()
    sol = riccati_solve(env)
    oracle = LqrOracle(env, sol)
    assert sol.P[0, 0] > 0
    s = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(oracle.v_star(s), oracle.q_star(s, oracle.policy_star(s)), atol=1e-12)
    assert np.all(oracle.v_star(s) <= 0)


def test_lqr_quadratic_coefficients_reproduce_q_star():
    env = LqrEnv.default()
    sol = riccati_solve(env)
    theta = lqr_quadratic_coefficients(env, sol)
    rng = np.random.default_rng(8)
    s, a = rng.normal(size=(2, 30))
    feats = np.stack([np.ones_like(s), s, a, s * s, s * a, a * a], axis=1)
    np.testing.assert_allclose(feats @ theta, lqr_q_star_batch(env, sol, s, a)[0], atol=1e-12)


def test_lqr_dimension_mismatch():
    env = LqrEnv.default()
    with pytest.raises(DimensionError):
        lqr_q_star_eval(env, riccati_solve(env), [0.0, 1.0], [0.0])


def test_riccati_round_trip_and_golden(tmp_path):
    env = LqrEnv.default()
    sol = riccati_solve(env)
    sol.save(tmp_path / "r.txt")
    back = RiccatiSolution.load(tmp_path / "r.txt")
    np.testing.assert_array_equal(back.P, sol.P)
    np.testing.assert_array_equal(back.K, sol.K)
    golden = RiccatiSolution.load(GOLDEN / "riccati_default.txt")
    np.testing.assert_allclose(sol.P, golden.P, atol=1e-12)
    np.testing.assert_allclose(sol.K, golden.K, atol=1e-12)
