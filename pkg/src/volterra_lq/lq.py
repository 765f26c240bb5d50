"""Quadratic cost, discrete operators, and the direct open-loop solve.

The cost

    J(u) = int_0^T [ <Q X, X> + 2 <S X, u> + <R u, u> + 2 <q, X> + 2 <rho, u> ] dt
           + <G X(T), X(T)> + 2 <g, X(T)>

becomes, after substituting X = psi + Theta u,

    J(u) = <Lam u, u> + 2 <ell1, u> + lam0,

with Lam = Theta* Q Theta + S Theta + Theta* S* + R + Theta_T* G Theta_T.
All inner products are the trapezoid-weighted products of the grid and all
adjoints are weighted transposes, so the representation reproduces direct
cost evaluation to round-off, and the optimality system Lam u + ell1 = 0
is an exact finite-dimensional statement.  The open-loop control solved
here is the oracle against which the adjoint-equation, causal, and
feedback-gain characterizations are verified.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import AssumptionError, NumericalError
from .grids import Grid
from .volterra import ProblemData, StateDecomposition, StateOperator, sample_trajectory

__all__ = [
    "CostData",
    "SampledCost",
    "DiscreteLQ",
    "assemble_theta",
    "assemble_quadratic_form",
    "evaluate_cost",
    "solve_open_loop",
    "verify_control_relation",
]


def _sample_matrix(f, grid: Grid, d1: int, d2: int) -> np.ndarray:
    """Sample a time-dependent matrix weight, shape (n, d1, d2)."""
    n = grid.n
    if f is None:
        return np.zeros((n, d1, d2))
    if isinstance(f, np.ndarray):
        if f.shape == (d1, d2):
            return np.tile(f.astype(float), (n, 1, 1))
        if f.shape == (n, d1, d2):
            return f.astype(float).copy()
        raise ValueError(f"weight has shape {f.shape}, expected {(d1, d2)} or {(n, d1, d2)}")
    if np.isscalar(f):
        if d1 != d2:
            raise ValueError("scalar weight needs a square block")
        return np.tile(float(f) * np.eye(d1), (n, 1, 1))
    out = np.asarray(f(grid.nodes), dtype=float)
    if out.shape != (n, d1, d2):
        out = np.broadcast_to(out, (n, d1, d2)).copy()
    return out


def _blockdiag(blocks: np.ndarray) -> np.ndarray:
    n, a, b = blocks.shape
    out = np.zeros((n * a, n * b))
    i = np.arange(n)[:, None, None]
    rows = i * a + np.arange(a)[None, :, None]
    cols = i * b + np.arange(b)[None, None, :]
    out[rows, cols] = blocks
    return out


def _apply_blocks(blocks: np.ndarray, traj: np.ndarray) -> np.ndarray:
    return np.einsum("iab,ib->ia", blocks, traj)


@dataclass(frozen=True)
class CostData:
    """Weights of the quadratic cost.

    Q, S, R may be callables of t, constant matrices, scalars, or
    pre-sampled (n, ., .) arrays; q, rho trajectories; G, g terminal
    weights.  delta is the coercivity floor; when omitted it defaults to
    the smallest eigenvalue of R over the grid.
    """

    Q: object = None
    S: object = None
    R: object = None
    q: object = None
    rho: object = None
    G: object = None
    g: object = None
    delta: float | None = None

    def sample(self, grid: Grid, dx: int, du: int) -> "SampledCost":
        Qs = _sample_matrix(self.Q, grid, dx, dx)
        Ss = _sample_matrix(self.S, grid, du, dx)
        Rs = _sample_matrix(self.R, grid, du, du)
        qs = sample_trajectory(self.q, grid, dx)
        rhos = sample_trajectory(self.rho, grid, du)
        G = np.zeros((dx, dx)) if self.G is None else np.asarray(self.G, dtype=float)
        g = np.zeros(dx) if self.g is None else np.asarray(self.g, dtype=float)
        if self.delta is None:
            delta = float(min(np.linalg.eigvalsh(R).min() for R in Rs))
        else:
            delta = float(self.delta)
        return SampledCost(Q=Qs, S=Ss, R=Rs, q=qs, rho=rhos, G=G, g=g, delta=delta)


@dataclass(frozen=True)
class SampledCost:
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    q: np.ndarray
    rho: np.ndarray
    G: np.ndarray
    g: np.ndarray
    delta: float

    @property
    def has_cross_terms(self) -> bool:
        return bool(np.any(self.S != 0.0) or np.any(self.rho != 0.0))

    def R_inverses(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.R)
        except np.linalg.LinAlgError as exc:
            raise AssumptionError("R(t) is not invertible at some node") from exc


def _validate_cost(sc: SampledCost):
    """Check the standard coercivity block: R >= delta, Q - S^T R^-1 S >= 0, G >= 0."""
    tol = 1e-10
    rmin = min(np.linalg.eigvalsh(R).min() for R in sc.R)
    if rmin < sc.delta * (1.0 - 1e-9) - tol:
        raise AssumptionError(
            f"violated: R(t) >= delta I (delta = {sc.delta:.3g}, "
            f"smallest eigenvalue over nodes = {rmin:.3g})"
        )
    if sc.delta <= 0:
        raise AssumptionError("violated: R(t) >= delta I with delta > 0")
    Rinv = sc.R_inverses()
    schur = sc.Q - np.einsum("iax,iab,iby->ixy", sc.S, Rinv, sc.S)
    smin = min(np.linalg.eigvalsh(M).min() for M in schur)
    scale = max(1.0, float(np.max(np.abs(sc.Q))))
    if smin < -tol * scale:
        raise AssumptionError(
            f"violated: Q(t) - S(t)^T R(t)^-1 S(t) >= 0 (smallest eigenvalue {smin:.3g})"
        )
    gmin = np.linalg.eigvalsh(sc.G).min() if sc.G.size else 0.0
    if gmin < -tol * max(1.0, float(np.max(np.abs(sc.G)))):
        raise AssumptionError(f"violated: G >= 0 (smallest eigenvalue {gmin:.3g})")


@dataclass(frozen=True)
class DiscreteLQ:
    """Grid-sampled quadratic problem min <Lam u, u> + 2 <ell1, u> + lam0.

    theta maps flat control samples to flat state samples with quadrature
    weights folded in; theta_T is its terminal block row.  lam is stored
    as the symmetric matrix of the quadratic form in plain coordinates,
    i.e. J(u) = u' lam u + 2 (Wu ell1)' u + lam0 with Wu the repeated
    trapezoid weights; ell1 holds nodal values of the affine term.
    """

    theta: np.ndarray
    theta_T: np.ndarray
    lam: np.ndarray
    ell1: np.ndarray
    lam0: float
    norm_weights: np.ndarray
    cost_samples: SampledCost
    psi: np.ndarray
    psi_T: np.ndarray
    dx: int
    du: int

    @property
    def n(self) -> int:
        return self.norm_weights.size

    @property
    def wu(self) -> np.ndarray:
        return np.repeat(self.norm_weights, self.du)

    @property
    def wx(self) -> np.ndarray:
        return np.repeat(self.norm_weights, self.dx)

    @property
    def rhs(self) -> np.ndarray:
        """Flat right side Wu ell1 of the optimality system lam u = -rhs."""
        return self.wu * self.ell1

    def lam_operator(self) -> np.ndarray:
        """Matrix of the operator u -> Lam u acting on nodal values."""
        return self.lam / self.wu[:, None]

    def control_norm(self, u: np.ndarray) -> float:
        """Weighted L2 norm of a control trajectory (n, du)."""
        return float(np.sqrt(np.einsum("i,ic,ic->", self.norm_weights, u, u)))


def assemble_theta(dec: StateDecomposition, grid: Grid):
    """Control-to-state map and its terminal row, quadrature weights included.

    The adjoints used throughout are weighted transposes of these
    matrices, so <X, Theta u> = <Theta* X, u> holds exactly on the grid.
    """
    ops = dec.ops
    if ops.grid is not grid and not np.array_equal(ops.grid.nodes, grid.nodes):
        raise ValueError("decomposition was built on a different grid")
    theta = ops.theta
    return theta, theta[-ops.dx :, :]


def assemble_quadratic_form(
    theta: np.ndarray,
    theta_T: np.ndarray,
    cost: CostData,
    dec: StateDecomposition,
    grid: Grid,
) -> DiscreteLQ:
    """Assemble (Lam, ell1, lam0) from the state maps and cost weights.

    Raises AssumptionError naming the violated inequality when the
    coercivity block fails.  Warns when Lam is severely ill-conditioned.
    """
    ops = dec.ops
    n, dx, du = ops.n, ops.dx, ops.du
    sc = cost if isinstance(cost, SampledCost) else cost.sample(grid, dx, du)
    _validate_cost(sc)
    omega = grid.trapezoid_weights()
    wx = np.repeat(omega, dx)
    wu = np.repeat(omega, du)
    psi = dec.psi
    psi_flat = psi.ravel()

    Qbd = _blockdiag(sc.Q)
    Rbd = _blockdiag(sc.R)
    Sbd = _blockdiag(sc.S) if sc.has_cross_terms else None
    lam = theta.T @ (wx[:, None] * (Qbd @ theta))
    lam += wu[:, None] * Rbd
    lam += theta_T.T @ sc.G @ theta_T
    if Sbd is not None:
        cross = wu[:, None] * (Sbd @ theta)
        lam += cross + cross.T
    asym = np.max(np.abs(lam - lam.T)) / max(1.0, np.max(np.abs(lam)))
    if asym > 1e-10:
        raise NumericalError(f"assembled quadratic form lost symmetry ({asym:.2e})")
    lam = 0.5 * (lam + lam.T)

    b = theta.T @ (wx * (Qbd @ psi_flat + sc.q.ravel()))
    b += wu * sc.rho.ravel()
    if Sbd is not None:
        b += wu * (Sbd @ psi_flat)
    b += theta_T.T @ (sc.G @ psi[-1] + sc.g)
    ell1 = b / wu

    lam0 = float(
        np.einsum("i,ia,ia->", omega, _apply_blocks(sc.Q, psi), psi)
        + 2.0 * np.einsum("i,ia,ia->", omega, sc.q, psi)
        + psi[-1] @ sc.G @ psi[-1]
        + 2.0 * sc.g @ psi[-1]
    )

    cond = np.linalg.cond(lam)
    if cond > 1e12:
        warnings.warn(
            f"quadratic form condition number {cond:.2e} exceeds 1e12; "
            "solves may lose accuracy",
            stacklevel=2,
        )
    return DiscreteLQ(
        theta=theta,
        theta_T=theta_T,
        lam=lam,
        ell1=ell1,
        lam0=lam0,
        norm_weights=omega,
        cost_samples=sc,
        psi=psi,
        psi_T=psi[-1].copy(),
        dx=dx,
        du=du,
    )


def evaluate_cost(problem: ProblemData, cost: CostData, u, grid: Grid) -> float:
    """Run the state and evaluate the cost by grid quadrature.

    Requires beta > 1/2 (the terminal term needs X(T)).
    """
    problem.require_lq()
    ops = StateOperator(problem, grid)
    sc = cost if isinstance(cost, SampledCost) else cost.sample(grid, ops.dx, ops.du)
    u_s = sample_trajectory(u, grid, ops.du)
    xi = ops.phi.ravel() + ops.WB_flat @ u_s.ravel()
    X = ops.solve(xi).reshape(ops.n, ops.dx)
    omega = ops.omega
    running = (
        np.einsum("i,ia,ia->", omega, _apply_blocks(sc.Q, X), X)
        + 2.0 * np.einsum("i,ia,ia->", omega, _apply_blocks(sc.S, X), u_s)
        + np.einsum("i,ia,ia->", omega, _apply_blocks(sc.R, u_s), u_s)
        + 2.0 * np.einsum("i,ia,ia->", omega, sc.q, X)
        + 2.0 * np.einsum("i,ia,ia->", omega, sc.rho, u_s)
    )
    terminal = X[-1] @ sc.G @ X[-1] + 2.0 * sc.g @ X[-1]
    return float(running + terminal)


def solve_open_loop(dlq: DiscreteLQ) -> np.ndarray:
    """Unique minimizer of the quadratic form, via an SPD solve.

    This is the oracle control: every other characterization is compared
    against it.
    """
    try:
        factor = cho_factor(dlq.lam)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "quadratic form is not positive definite; check the coercivity "
            "assumptions on the cost weights"
        ) from exc
    u = cho_solve(factor, -dlq.rhs)
    return u.reshape(dlq.n, dlq.du)


def verify_control_relation(
    dlq: DiscreteLQ,
    problem: ProblemData,
    cost: CostData,
    u_bar: np.ndarray,
    grid: Grid,
) -> float:
    """Pointwise residual of the expanded optimality relation.

    Reconstructs the right side of the relation the optimizer must satisfy
    (terminal coupling, instantaneous terms, and the backward integral of
    the resolvent-propagated running gradient) through the discrete
    operator algebra, and returns max_i |u_bar(t_i) - RHS(t_i)|.
    """
    ops = StateOperator(problem, grid)
    sc = cost if isinstance(cost, SampledCost) else cost.sample(grid, ops.dx, ops.du)
    u = sample_trajectory(u_bar, grid, ops.du)
    X = (dlq.psi.ravel() + dlq.theta @ u.ravel()).reshape(ops.n, ops.dx)
    z = _apply_blocks(sc.Q, X) + np.einsum("ica,ic->ia", sc.S, u) + sc.q
    zeta = sc.G @ X[-1] + sc.g
    vterm = ops.terminal_unit(zeta)
    # resolvent-propagated gradient: z + Phi'-convolution of z, plus the
    # terminal coupling propagated through the same dual solve
    y = z.ravel() + ops.apply_dual_A(ops.solve_dual(z.ravel()))
    y = y + ops.solve_dual(ops.apply_dual_A(vterm))
    backward = ops.apply_dual_B(y) + ops.apply_dual_B(vterm)
    rhs_flat = backward.reshape(ops.n, ops.du) + np.einsum("ica,ia->ic", sc.S, X) + sc.rho
    Rinv = sc.R_inverses()
    rhs = -np.einsum("iab,ib->ia", Rinv, rhs_flat)
    return float(np.max(np.abs(u - rhs)))
