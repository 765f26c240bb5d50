import numpy as np
import pytest
from scipy.linalg import eigh, solve
from scipy.special import beta as beta_function

from volterra_lq import (
    AssumptionError,
    CostData,
    ProblemData,
    assemble_quadratic_form,
    assemble_theta,
    build_grid,
    decompose,
    evaluate_cost,
    solve_open_loop,
    verify_control_relation,
)
from volterra_lq.catalog import get_problem
from volterra_lq.lq import _blockdiag



def test_weighted_adjoint_exact(rs_pipeline):
    pipe = rs_pipeline
    rng = np.random.default_rng(0)
    n, dx, du = pipe.grid.n, pipe.problem.n_state, pipe.problem.n_control
    wx = np.repeat(pipe.omega, dx)
    wu = np.repeat(pipe.omega, du)
    for _ in range(5):
        X = rng.normal(size=n * dx)
        u = rng.normal(size=n * du)
        lhs = X @ (wx * (pipe.theta @ u))
        rhs = ((pipe.theta.T @ (wx * X)) / wu) @ (wu * u)
        assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))
        x_term = rng.normal(size=dx)
        lhs_T = x_term @ (pipe.theta_T @ u)
        rhs_T = ((pipe.theta_T.T @ x_term) / wu) @ (wu * u)
        assert abs(lhs_T - rhs_T) <= 1e-12 * (1 + abs(lhs_T))


def test_zero_control_kernel_gives_zero_theta():
    grid = build_grid(17, 1.0)
    p = ProblemData(A=lambda t, s: np.full(np.broadcast_shapes(np.shape(t), np.shape(s)) + (1, 1), 0.4),
                    B=None, phi=None, beta=0.75, T=1.0)
    dec = decompose(p, grid, None)
    theta, theta_T = assemble_theta(dec, grid)
    assert np.all(theta == 0.0)
    assert np.all(theta_T == 0.0)


def test_control_to_state_norm_bound(rs_pipeline):
    # ||Theta u|| <= K ||u|| with K from the kernel magnitude, the horizon
    # and the resolvent tail constant
    pipe = rs_pipeline
    ops = pipe.dec.ops
    beta, T = pipe.problem.beta, pipe.problem.T
    norm_a = np.abs(ops.A_samples).max() * ops.dx
    norm_b = np.abs(ops.B_samples).max() * max(ops.dx, ops.du)
    from volterra_lq.volterra import _coeff_bound_series

    K_run = _coeff_bound_series(norm_a, beta, T)
    phi_coeff = norm_a + K_run * norm_a**2 * beta_function(beta, beta) * T**beta
    K = norm_b * (T**beta / beta) * (1.0 + phi_coeff * T**beta / beta)
    rng = np.random.default_rng(123)
    wx = np.repeat(pipe.omega, ops.dx)
    wu = np.repeat(pipe.omega, ops.du)
    for _ in range(100):
        u = rng.normal(size=pipe.grid.n * ops.du)
        xu = pipe.theta @ u
        assert np.sqrt(xu @ (wx * xu)) <= K * np.sqrt(u @ (wu * u))


def test_quadratic_form_degenerate_to_control_weight():
    entry = get_problem("zero-cost", 0.75, 1.0)
    grid = build_grid(24, 1.0)
    dec = decompose(entry.problem, grid, None)
    theta, theta_T = assemble_theta(dec, grid)
    dlq = assemble_quadratic_form(theta, theta_T, entry.cost, dec, grid)
    expected = np.repeat(grid.trapezoid_weights(), 1)[:, None] * _blockdiag(
        dlq.cost_samples.R
    )
    assert np.allclose(dlq.lam, expected, rtol=1e-15, atol=0.0)
    assert np.all(dlq.ell1 == 0.0)
    assert dlq.lam0 == 0.0


def test_cost_at_zero_control_is_offset(rs_pipeline):
    pipe = rs_pipeline
    j0 = evaluate_cost(pipe.problem, pipe.cost, np.zeros_like(pipe.u_opt), pipe.grid)
    assert abs(j0 - pipe.dlq.lam0) <= 1e-12 * (1 + abs(j0))


def test_cost_matches_quadratic_form(rs_pipeline):
    pipe = rs_pipeline
    rng = np.random.default_rng(5)
    for _ in range(4):
        u = rng.normal(size=pipe.u_opt.shape)
        jq = evaluate_cost(pipe.problem, pipe.cost, u, pipe.grid)
        jf = float(
            u.ravel() @ pipe.dlq.lam @ u.ravel()
            + 2.0 * pipe.dlq.rhs @ u.ravel()
            + pipe.dlq.lam0
        )
        assert abs(jq - jf) <= 1e-8 * (1 + abs(jf))


def test_cost_requires_beta_above_half():
    entry = get_problem("zero-cost", 0.6, 1.0)
    p = entry.problem
    bad = ProblemData(A=p.A, B=p.B, phi=p.phi, beta=0.45, T=1.0)
    grid = build_grid(9, 1.0)
    with pytest.raises(AssumptionError, match="beta > 1/2"):
        evaluate_cost(bad, entry.cost, np.zeros((9, 1)), grid)


class TestCoercivityValidation:
    def test_rejects_small_R(self, rs_pipeline):
        pipe = rs_pipeline
        cost = CostData(Q=pipe.cost.Q, R=1e-8, delta=1.0)
        with pytest.raises(AssumptionError, match="R\\(t\\) >= delta"):
            assemble_quadratic_form(pipe.theta, pipe.theta_T, cost, pipe.dec, pipe.grid)

    def test_rejects_indefinite_terminal_weight(self, rs_pipeline):
        pipe = rs_pipeline
        cost = CostData(R=1.0, G=-np.eye(pipe.problem.n_state))
        with pytest.raises(AssumptionError, match="G >= 0"):
            assemble_quadratic_form(pipe.theta, pipe.theta_T, cost, pipe.dec, pipe.grid)

    def test_rejects_dominating_cross_weight(self, rs_pipeline):
        pipe = rs_pipeline
        dx, du = pipe.problem.n_state, pipe.problem.n_control
        cost = CostData(Q=None, S=np.ones((du, dx)), R=1.0)
        with pytest.raises(AssumptionError, match="S\\(t\\)"):
            assemble_quadratic_form(pipe.theta, pipe.theta_T, cost, pipe.dec, pipe.grid)

    def test_generalized_eigenvalue_floor(self, rs_pipeline):
        pipe = rs_pipeline
        evals = eigh(pipe.dlq.lam, np.diag(pipe.dlq.wu), eigvals_only=True)
        assert evals[0] >= pipe.dlq.cost_samples.delta * (1.0 - 1e-6)


class TestOpenLoop:
    def test_zero_affine_term_gives_zero_control(self):
        entry = get_problem("zero-cost", 0.75, 1.0)
        grid = build_grid(24, 1.0)
        dec = decompose(entry.problem, grid, None)
        theta, theta_T = assemble_theta(dec, grid)
        dlq = assemble_quadratic_form(theta, theta_T, entry.cost, dec, grid)
        assert np.all(solve_open_loop(dlq) == 0.0)

    def test_perturbations_increase_cost(self, rs_pipeline):
        pipe = rs_pipeline
        j_opt = evaluate_cost(pipe.problem, pipe.cost, pipe.u_opt, pipe.grid)
        rng = np.random.default_rng(17)
        for _ in range(10):
            v = rng.normal(size=pipe.u_opt.shape)
            for eps in (1e-2, -1e-2, 1e-1, -1e-1):
                j = evaluate_cost(pipe.problem, pipe.cost, pipe.u_opt + eps * v, pipe.grid)
                assert j - j_opt >= -1e-10

    def test_central_difference_gradient_vanishes(self, rs_pipeline):
        pipe = rs_pipeline
        rng = np.random.default_rng(21)
        eps = 1e-4
        for _ in range(5):
            v = rng.normal(size=pipe.u_opt.shape)
            jp = evaluate_cost(pipe.problem, pipe.cost, pipe.u_opt + eps * v, pipe.grid)
            jm = evaluate_cost(pipe.problem, pipe.cost, pipe.u_opt - eps * v, pipe.grid)
            vnorm = np.sqrt(np.einsum("i,ic,ic->", pipe.omega, v, v))
            assert abs(jp - jm) / (2 * eps) <= 1e-6 * vnorm

    def test_two_factorizations_agree(self, rs_pipeline):
        pipe = rs_pipeline
        u_cho = pipe.u_opt.ravel()
        u_lu = solve(pipe.dlq.lam, -pipe.dlq.rhs, assume_a="sym")
        assert np.linalg.norm(u_cho - u_lu) <= 1e-10 * np.linalg.norm(u_cho)


class TestControlRelation:
    def test_zero_for_homogeneous_problem(self):
        entry = get_problem("zero-cost", 0.75, 1.0)
        grid = build_grid(24, 1.0)
        dec = decompose(entry.problem, grid, None)
        theta, theta_T = assemble_theta(dec, grid)
        dlq = assemble_quadratic_form(theta, theta_T, entry.cost, dec, grid)
        u = solve_open_loop(dlq)
        assert verify_control_relation(dlq, entry.problem, entry.cost, u, grid) == 0.0

    def test_residual_small_on_random_problem(self, rs_pipeline):
        pipe = rs_pipeline
        res = verify_control_relation(pipe.dlq, pipe.problem, pipe.cost, pipe.u_opt, pipe.grid)
        unorm = float(np.max(np.abs(pipe.u_opt)))
        assert res <= 1e-6 * (1.0 + unorm)

    def test_instantaneous_only_control(self):
        # B = 0, S = 0: the optimizer is -R^(-1) rho pointwise, residual zero
        grid = build_grid(24, 1.0)
        p = ProblemData(A=None, B=None, phi=lambda t: np.cos(t)[:, None], beta=0.75, T=1.0)
        rho = lambda t: np.stack([np.sin(t)], axis=1)  # noqa: E731
        cost = CostData(Q=1.0, R=2.0, rho=rho, G=np.eye(1))
        dec = decompose(p, grid, None)
        theta, theta_T = assemble_theta(dec, grid)
        dlq = assemble_quadratic_form(theta, theta_T, cost, dec, grid)
        u = solve_open_loop(dlq)
        expected = -0.5 * np.sin(grid.nodes)[:, None]
        assert np.allclose(u, expected, atol=1e-13)
        res = verify_control_relation(dlq, p, cost, u, grid)
        assert res <= 1e-13


def test_ill_conditioned_form_warns():
    grid = build_grid(16, 1.0)
    p = ProblemData(A=None, B=None, phi=None, beta=0.75, T=1.0)
    R = lambda t: (1e-10 + 1e3 * t**4)[:, None, None]  # noqa: E731
    cost = CostData(R=R, delta=1e-10)
    dec = decompose(p, grid, None)
    theta, theta_T = assemble_theta(dec, grid)
    with pytest.warns(UserWarning, match="condition number"):
        assemble_quadratic_form(theta, theta_T, cost, dec, grid)

def test_control_relation_with_cross_terms(ct_pipeline):
    pipe = ct_pipeline
    res = verify_control_relation(pipe.dlq, pipe.problem, pipe.cost, pipe.u_opt, pipe.grid)
    assert res <= 1e-6 * (1.0 + float(np.max(np.abs(pipe.u_opt))))
