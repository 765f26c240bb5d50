"""State equation core: resolvent kernel, solver, and control decomposition.

The state equation is the weakly singular linear Volterra equation

    X(t) = phi(t) + int_0^t [A(t,s) X(s) + B(t,s) u(s)] / (t-s)^(1-beta) ds.

Two complementary representations are built here.

1.  A discrete operator layer (`StateOperator`): the product-integration
    weights turn the equation into a block lower-triangular system
    (I - WA) X = xi, solved by forward substitution.  The control-to-state
    map Theta = (I - WA)^(-1) WB and the free response psi are *exact*
    discrete objects; every operator identity used by the optimization
    layers holds to round-off on the grid.

2.  A kernel layer (`FactoredKernel`): the resolvent Phi of the kernel
    A(t,s)/(t-s)^(1-beta), stored in factored form

        Phi(t,s) = A(t,s) (t-s)^(beta-1) + D(t,s),

    built by summing the iterated-kernel series F_1 + F_2 + ... where each
    term is computed by product quadrature with closed-form moments of
    (t-tau)^(beta-1) (tau-s)^(k beta - 1).  Because only the bounded
    coefficient of each term is interpolated, the construction is exact
    (to round-off and series truncation) for constant coefficients, and
    the factorization gives structural access to the diagonal singularity.

The factored kernel feeds diagnostics and cross-checks; the discrete
operator layer feeds the optimization modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.linalg import lu_factor, lu_solve
from scipy.special import betainc, beta as beta_function

from .errors import AssumptionError, NumericalError
from .grids import Grid, build_grid, product_weights

__all__ = [
    "ProblemData",
    "FactoredKernel",
    "StateOperator",
    "StateDecomposition",
    "ContinuityReport",
    "resolvent",
    "solve_state",
    "decompose",
    "check_continuity_at_T",
    "sample_kernel",
    "sample_trajectory",
]


@dataclass(frozen=True)
class ProblemData:
    """Coefficients of the state equation.

    A and B may be vectorized callables (t, s) -> matrix, pre-sampled
    arrays of shape (n, n, d1, d2), or None for a zero coefficient.
    phi may be a vectorized callable t -> vector or an (n, n_state) array.
    LQ solves additionally require beta > 1/2 so that X(T) is defined;
    state-only operations accept any beta in (0, 1).
    """

    A: object
    B: object
    phi: object
    beta: float
    T: float
    n_state: int = 1
    n_control: int = 1

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.n_state < 1 or self.n_control < 1:
            raise ValueError("state and control dimensions must be >= 1")

    def require_lq(self):
        if not self.beta > 0.5:
            raise AssumptionError(
                "this operation needs the state to be continuous at t = T, "
                f"which requires beta > 1/2; got beta = {self.beta}"
            )


def sample_kernel(K, grid: Grid, d1: int, d2: int) -> np.ndarray:
    """Sample a two-variable kernel coefficient at node pairs t_i >= s_j.

    Returns an (n, n, d1, d2) array; entries above the diagonal are zero
    (the kernel acts only on the past).  Accepts callables, pre-sampled
    arrays, or None (zero kernel).
    """
    n = grid.n
    if K is None:
        return np.zeros((n, n, d1, d2))
    if isinstance(K, np.ndarray):
        if K.shape != (n, n, d1, d2):
            raise ValueError(
                f"pre-sampled kernel has shape {K.shape}, expected {(n, n, d1, d2)}"
            )
        out = K.copy()
    else:
        t = grid.nodes[:, None]
        s = grid.nodes[None, :]
        out = np.array(
            np.broadcast_to(np.asarray(K(t, s), dtype=float), (n, n, d1, d2))
        )
    iu = np.triu_indices(n, k=1)
    out[iu] = 0.0
    return out


def sample_trajectory(f, grid: Grid, d: int) -> np.ndarray:
    """Sample a trajectory (callable or array or None) on the grid, shape (n, d)."""
    n = grid.n
    if f is None:
        return np.zeros((n, d))
    if isinstance(f, np.ndarray):
        arr = f.astype(float)
        if arr.shape == (n,) and d == 1:
            arr = arr[:, None]
        if arr.shape != (n, d):
            raise ValueError(f"trajectory has shape {f.shape}, expected {(n, d)}")
        return arr.copy()
    arr = np.asarray(f(grid.nodes), dtype=float)
    if arr.shape == (n,) and d == 1:
        arr = arr[:, None]
    if arr.shape != (n, d):
        arr = np.broadcast_to(arr, (n, d)).copy()
    return np.asarray(arr, dtype=float)


# ---------------------------------------------------------------------------
# factored kernels and the resolvent series
# ---------------------------------------------------------------------------


@dataclass
class FactoredKernel:
    """Kernel K(t,s) = singular_coeff(t,s) (t-s)^(beta-1) + regular_part(t,s).

    Both parts are finite at every sampled off-diagonal point; the
    singular coefficient extends continuously to the diagonal.  The
    `residuals` dict records how well the kernel satisfies its defining
    equation (filled in by `resolvent`).
    """

    singular_coeff: np.ndarray  # (n, n, d1, d2)
    regular_part: np.ndarray  # (n, n, d1, d2)
    beta: float
    coeff_bound: float = np.inf
    residuals: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.singular_coeff.shape[0]

    def eval_offdiag(self, grid: Grid) -> np.ndarray:
        """Kernel values at node pairs i > j; zero on and above the diagonal."""
        n = self.n
        dt = grid.nodes[:, None] - grid.nodes[None, :]
        il = np.tril_indices(n, k=-1)
        fac = np.zeros((n, n))
        fac[il] = dt[il] ** (self.beta - 1.0)
        return self.singular_coeff * fac[:, :, None, None] + np.where(
            (fac != 0.0)[:, :, None, None], self.regular_part, 0.0
        )


def _pair_weight_matrix(grid: Grid, p: float, q: float) -> np.ndarray | None:
    """Uniform-grid hat weights for int (t-s)^(p-1) (s-base)^(q-1), keyed by offset.

    Returns W[d, m] (m = 0..d) such that the integral from s_j to t_{j+d}
    of the doubly singular weight against a hat-interpolated coefficient g
    is sum_m W[d, m] g(s_{j+m}).  None when the grid is not uniform.
    """
    if grid.kind != "uniform":
        return None
    n = grid.n
    h = grid.spacings[0]
    W = np.zeros((n, n))
    Bqp = beta_function(q, p)
    Bq1p = beta_function(q + 1.0, p)
    for d in range(1, n):
        x = np.arange(d + 1) / d
        iq = betainc(q, p, x)
        iq1 = betainc(q + 1.0, p, x)
        dh = d * h
        nu0 = dh ** (p + q - 1.0) * Bqp * np.diff(iq)
        nu1 = dh ** (p + q) * Bq1p * np.diff(iq1)
        lo = np.arange(d) * h
        hi = lo + h
        wl = (hi * nu0 - nu1) / h
        wr = (nu1 - lo * nu0) / h
        W[d, : d + 1] = 0.0
        W[d, :d] += wl
        W[d, 1 : d + 1] += wr
    return W


def _convolve_pair_uniform(Fsamples, Gsamples, W) -> np.ndarray:
    """out[i,j] = sum_m W[i-j, m] F[i, j+m] @ G[j+m, j] on a uniform grid."""
    n, _, d1, dm = Fsamples.shape
    d2 = Gsamples.shape[-1]
    out = np.zeros((n, n, d1, d2))
    sF = Fsamples.strides
    sG = Gsamples.strides
    for d in range(1, n):
        Fd = as_strided(
            Fsamples[d:],
            shape=(d + 1, n - d, d1, dm),
            strides=(sF[1], sF[0] + sF[1], sF[2], sF[3]),
            writeable=False,
        )
        Gd = as_strided(
            Gsamples,
            shape=(d + 1, n - d, dm, d2),
            strides=(sG[0], sG[0] + sG[1], sG[2], sG[3]),
            writeable=False,
        )
        C = np.matmul(Fd, Gd)
        vals = np.tensordot(W[d, : d + 1], C, axes=(0, 0))
        ii = np.arange(n - d)
        out[ii + d, ii] = vals
    return out


def _convolve_pair_general(Fsamples, Gsamples, grid: Grid, p: float, q: float) -> np.ndarray:
    """General-grid version of the doubly singular convolution.

    out[i,j] = int_{s_j}^{t_i} (t-tau)^(p-1) (tau-s_j)^(q-1)
               F(t_i, tau) G(tau, s_j) dtau with hat interpolation in tau.
    """
    nodes = grid.nodes
    n = grid.n
    d1, dm = Fsamples.shape[2:]
    d2 = Gsamples.shape[-1]
    out = np.zeros((n, n, d1, d2))
    Bqp = beta_function(q, p)
    Bq1p = beta_function(q + 1.0, p)
    for j in range(n - 1):
        tt = nodes[j + 1 :, None] - nodes[j]  # (ni, 1)
        tau = nodes[None, j:] - nodes[j]  # (1, nl+1)
        x = np.clip(tau / tt, 0.0, 1.0)
        iq = betainc(q, p, x)
        iq1 = betainc(q + 1.0, p, x)
        nu0 = tt ** (p + q - 1.0) * Bqp * np.diff(iq, axis=1)
        nu1 = tt ** (p + q) * Bq1p * np.diff(iq1, axis=1)
        lo = tau[0, :-1]
        hi = tau[0, 1:]
        h = hi - lo
        wl = (hi * nu0 - nu1) / h
        wr = (nu1 - lo * nu0) / h
        Wnode = np.zeros((n - j - 1, n - j))
        Wnode[:, :-1] += wl
        Wnode[:, 1:] += wr
        C = np.matmul(Fsamples[j + 1 :, j:], Gsamples[None, j:, j])
        out[j + 1 :, j] = np.einsum("il,ilxz->ixz", Wnode, C)
    return out


def _singular_convolution(Fsamples, Gsamples, grid, p, q, W_uniform=None):
    if W_uniform is not None:
        return _convolve_pair_uniform(Fsamples, Gsamples, W_uniform)
    return _convolve_pair_general(Fsamples, Gsamples, grid, p, q)


def _coeff_bound_series(norm_a: float, beta: float, T: float, kmax: int = 200) -> float:
    """Concrete admissible constant K with |D(t,s)| <= |A| K B(b,b) (t-s)^(2b-1).

    Follows from the term-by-term bound |F_k| <= |A|^k (t-s)^(k b - 1)
    prod_j B(b, j b); the Beta-function products decay factorially, so the
    tail series converges for any |A| and T.
    """
    total = 0.0
    fac = 1.0
    for k in range(2, kmax):
        total += fac
        fac *= norm_a * T**beta * beta_function(beta, k * beta)
        if fac < 1e-16 * max(total, 1.0):
            break
    return total


def resolvent(
    problem: ProblemData,
    grid: Grid,
    rtol: float = 1e-13,
    max_levels: int = 120,
    residual_stride: int | None = None,
) -> FactoredKernel:
    """Resolvent kernel of A(t,s)/(t-s)^(1-beta), in factored form.

    Sums the iterated-kernel series with exact product moments for every
    (t-tau)^(beta-1) (tau-s)^(k beta - 1) weight.  The returned kernel also
    carries residuals of its defining Volterra identity and of the
    transposed identity (kernel on the right), both measured by an
    independent quadrature pass over sampled source columns.
    """
    beta = problem.beta
    n = grid.n
    dx = problem.n_state
    Asamp = sample_kernel(problem.A, grid, dx, dx)
    norm_a = float(np.max(np.abs(Asamp))) * dx
    kernel = FactoredKernel(
        singular_coeff=Asamp.copy(),
        regular_part=np.zeros_like(Asamp),
        beta=beta,
        coeff_bound=_coeff_bound_series(norm_a, beta, grid.T),
    )
    if norm_a == 0.0:
        kernel.residuals = {"defining": 0.0, "transposed": 0.0}
        return kernel

    dt = grid.nodes[:, None] - grid.nodes[None, :]
    il = np.tril_indices(n, k=-1)
    G = Asamp.copy()  # coefficient of (t-s)^(k*beta - 1), level k = 1
    D = kernel.regular_part
    diag_idx = np.arange(n)
    scale_ref = 0.0
    for k in range(1, max_levels + 1):
        q = k * beta
        W = _pair_weight_matrix(grid, beta, q)
        F_next = _singular_convolution(Asamp, G, grid, beta, q, W)
        e = (k + 1) * beta - 1.0
        Gnew = np.zeros_like(G)
        Gnew[il] = F_next[il] / dt[il][:, None, None] ** e
        # diagonal limit of the next coefficient
        Gnew[diag_idx, diag_idx] = beta_function(q, beta) * np.einsum(
            "ixy,iyz->ixz", Asamp[diag_idx, diag_idx], G[diag_idx, diag_idx]
        )
        D[il] += F_next[il]
        level_scale = float(np.max(np.abs(F_next)))
        scale_ref = max(scale_ref, level_scale)
        if level_scale <= rtol * max(scale_ref, 1e-300):
            break
        G = Gnew
    else:
        raise NumericalError(
            "resolvent series did not reach the requested tolerance within "
            f"{max_levels} levels; coefficient norm {norm_a:.3g} may be too "
            "large for this horizon"
        )

    kernel.residuals = _resolvent_residuals(kernel, Asamp, grid, residual_stride)
    return kernel


def _resolvent_residuals(kernel, Asamp, grid, stride):
    """Independent quadrature residuals of the two defining identities.

    defining:   D(t,s) = int A(t,tau) Phi(tau,s) (t-tau)^(b-1) dtau
    transposed: D(t,s) = int Phi(t,tau) A(tau,s) (tau-s)^(b-1) dtau
    The regular part of each integrand is re-integrated by plain product
    quadrature (not the level-wise factored form used to build D), so the
    residual exercises a different discretization of the same identity.
    """
    beta = kernel.beta
    n = grid.n
    D = kernel.regular_part
    W_pair = _pair_weight_matrix(grid, beta, beta)
    first = _singular_convolution(Asamp, Asamp, grid, beta, beta, W_pair)
    sw = product_weights(grid, beta).w
    nodes = grid.nodes
    phi_vals = kernel.eval_offdiag(grid)

    if stride is None:
        stride = max(1, (n - 2) // 48)
    cols = np.arange(0, n - 2, stride)
    res_def = 0.0
    res_tr = 0.0
    for j in cols:
        denom = 1.0 + np.abs(phi_vals[:, j]).max(axis=(1, 2))
        ii = np.arange(j + 2, n)
        # defining identity, kernel A on the left
        integrand = np.matmul(Asamp, D[None, :, j])
        quad = np.einsum("it,itxz->ixz", sw, integrand)
        rhs = first[:, j] + quad
        res_def = max(
            res_def,
            float(np.max(np.abs(D[ii, j] - rhs[ii]).max(axis=(1, 2)) / denom[ii])),
        )
        # transposed identity, kernel A on the right; weights carry the
        # (tau - s_j)^(beta-1) factor about the lower endpoint
        lo = nodes[j:-1] - nodes[j]
        hi = nodes[j + 1 :] - nodes[j]
        h = hi - lo
        mu0 = (hi**beta - lo**beta) / beta
        mu1 = (hi ** (beta + 1.0) - lo ** (beta + 1.0)) / (beta + 1.0) - lo * mu0
        wl = mu0 - mu1 / h
        wr = mu1 / h
        segs = np.arange(n - j - 1)[None, :] < (np.arange(n) - j)[:, None]
        Wlow = np.zeros((n, n - j))
        Wlow[:, :-1] += np.where(segs, wl[None, :], 0.0)
        Wlow[:, 1:] += np.where(segs, wr[None, :], 0.0)
        integrand_tr = np.matmul(D[:, j:], Asamp[None, j:, j])
        quad_tr = np.einsum("it,itxz->ixz", Wlow, integrand_tr)
        rhs_tr = first[:, j] + quad_tr
        res_tr = max(
            res_tr,
            float(np.max(np.abs(D[ii, j] - rhs_tr[ii]).max(axis=(1, 2)) / denom[ii])),
        )
    return {"defining": res_def, "transposed": res_tr}


# ---------------------------------------------------------------------------
# discrete operator layer
# ---------------------------------------------------------------------------


class StateOperator:
    """Discrete state equation (I - WA) X = xi and its exact companions.

    WA and WB are the kernel samples folded with the product-integration
    weights.  All adjoints are taken in the trapezoid-weighted inner
    product of the grid, so that <Theta u, X> = <u, Theta* X> holds to
    round-off.  No method mutates problem data; the derived maps theta
    and psi are cached on first access, so touch them before handing the
    operator to concurrent tasks.
    """

    def __init__(self, problem: ProblemData, grid: Grid):
        self.problem = problem
        self.grid = grid
        self.beta = problem.beta
        n = grid.n
        dx = problem.n_state
        du = problem.n_control
        self.n, self.dx, self.du = n, dx, du
        self.omega = grid.trapezoid_weights()
        self.wx = np.repeat(self.omega, dx)
        self.wu = np.repeat(self.omega, du)
        sw = product_weights(grid, problem.beta).w
        Asamp = sample_kernel(problem.A, grid, dx, dx)
        Bsamp = sample_kernel(problem.B, grid, dx, du)
        self.A_samples = Asamp
        self.B_samples = Bsamp
        self.WA = np.einsum("ij,ijxy->ijxy", sw, Asamp)
        self.WB = np.einsum("ij,ijxy->ijxy", sw, Bsamp)
        self.WA_flat = self.WA.transpose(0, 2, 1, 3).reshape(n * dx, n * dx)
        self.WB_flat = self.WB.transpose(0, 2, 1, 3).reshape(n * dx, n * du)
        try:
            self._lu = lu_factor(np.eye(n * dx) - self.WA_flat)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise NumericalError(
                "state stepping matrix is singular; the grid is too coarse "
                "relative to the kernel magnitude"
            ) from exc
        phi = sample_trajectory(problem.phi, grid, dx)
        if not np.all(np.isfinite(phi[0])):
            # free term may blow up at t = 0; carry the first interior sample
            phi = phi.copy()
            phi[0] = phi[1]
        self.phi = phi
        self._theta = None
        self._psi = None

    # -- basic solves -----------------------------------------------------

    def solve(self, v: np.ndarray) -> np.ndarray:
        """(I - WA)^(-1) v for a flat state vector."""
        return lu_solve(self._lu, v)

    def solve_dual(self, v: np.ndarray) -> np.ndarray:
        """(I - WA*)^(-1) v in the weighted inner product (flat state vector)."""
        return lu_solve(self._lu, self.wx * v, trans=1) / self.wx

    def apply_dual_A(self, v: np.ndarray) -> np.ndarray:
        """WA* v, the weighted adjoint of the state kernel action."""
        return (self.WA_flat.T @ (self.wx * v)) / self.wx

    def apply_dual_B(self, v: np.ndarray) -> np.ndarray:
        """WB* v: weighted adjoint of the control kernel action (state -> control)."""
        return (self.WB_flat.T @ (self.wx * v)) / self.wu

    # -- derived objects --------------------------------------------------

    @property
    def theta(self) -> np.ndarray:
        """Control-to-state map (n dx, n du), quadrature weights included."""
        if self._theta is None:
            self._theta = lu_solve(self._lu, self.WB_flat)
        return self._theta

    @property
    def psi(self) -> np.ndarray:
        """Free response (control switched off), shape (n, dx)."""
        if self._psi is None:
            self._psi = self.solve(self.phi.ravel()).reshape(self.n, self.dx)
        return self._psi

    def terminal_unit(self, zeta: np.ndarray) -> np.ndarray:
        """Flat state vector carrying zeta at the last node with unit mass.

        Dual pairing against it reproduces evaluation at t = T:
        <x, terminal_unit(zeta)>_omega = x(T) . zeta.
        """
        v = np.zeros(self.n * self.dx)
        v[-self.dx :] = zeta / self.omega[-1]
        return v


@dataclass(frozen=True)
class StateDecomposition:
    """State split X = psi + (Theta u) with terminal data and kernel views.

    psi is the control-free trajectory; Psi is the factored control kernel
    B(t,s)(t-s)^(beta-1) + int Phi(t,tau) B(tau,s) (tau-s)^(beta-1) dtau,
    available when a resolvent kernel was supplied.  Psi_T_row samples
    Psi(T, s_j); the terminal source node carries no quadrature mass and
    is stored as zero.
    """

    psi: np.ndarray
    psi_T: np.ndarray
    Psi: FactoredKernel | None
    Psi_T_row: np.ndarray | None
    ops: StateOperator


def decompose(problem: ProblemData, grid: Grid, resolvent_kernel: FactoredKernel | None) -> StateDecomposition:
    """Build the control decomposition of the state equation.

    The discrete layer (psi and the operator bundle) is always built; the
    factored kernel Psi is derived from the supplied resolvent and may be
    omitted (None) when only the optimization layers are needed.
    """
    ops = StateOperator(problem, grid)
    psi = ops.psi
    Psi = None
    Psi_T_row = None
    if resolvent_kernel is not None:
        beta = problem.beta
        Bsamp = ops.B_samples
        W_pair = _pair_weight_matrix(grid, beta, beta)
        piece1 = _singular_convolution(
            resolvent_kernel.singular_coeff, Bsamp, grid, beta, beta, W_pair
        )
        piece2 = _lower_singular_convolution(
            resolvent_kernel.regular_part, Bsamp, grid, beta
        )
        Psi = FactoredKernel(
            singular_coeff=Bsamp.copy(),
            regular_part=piece1 + piece2,
            beta=beta,
        )
        n = grid.n
        offs = grid.T - grid.nodes[:-1]
        Psi_T_row = np.zeros((n, problem.n_state, problem.n_control))
        Psi_T_row[:-1] = Bsamp[-1, :-1] * offs[:, None, None] ** (
            beta - 1.0
        ) + Psi.regular_part[-1, :-1]
    return StateDecomposition(
        psi=psi, psi_T=psi[-1].copy(), Psi=Psi, Psi_T_row=Psi_T_row, ops=ops
    )


def _lower_singular_convolution(Dsamples, Gsamples, grid: Grid, beta: float) -> np.ndarray:
    """out[i,j] = int_{s_j}^{t_i} D(t_i,tau) G(tau,s_j) (tau-s_j)^(beta-1) dtau."""
    nodes = grid.nodes
    n = grid.n
    d1 = Dsamples.shape[2]
    d2 = Gsamples.shape[-1]
    out = np.zeros((n, n, d1, d2))
    for j in range(n - 2):
        lo = nodes[j:-1] - nodes[j]
        hi = nodes[j + 1 :] - nodes[j]
        h = hi - lo
        mu0 = (hi**beta - lo**beta) / beta
        mu1 = (hi ** (beta + 1.0) - lo ** (beta + 1.0)) / (beta + 1.0) - lo * mu0
        wl = mu0 - mu1 / h
        wr = mu1 / h
        # row for target t_i uses segments l = 0 .. (i-j-1)
        W = np.zeros((n - j - 1, n - j))
        ii = np.arange(1, n - j)
        seg_mask = np.arange(n - j - 1)[None, :] < ii[:, None]
        W[:, :-1] += np.where(seg_mask, wl[None, :], 0.0)
        W[:, 1:] += np.where(seg_mask, wr[None, :], 0.0)
        C = np.einsum("ilxy,lyz->ilxz", Dsamples[j + 1 :, j:], Gsamples[j:, j])
        out[j + 1 :, j] = np.einsum("il,ilxz->ixz", W, C)
    return out


def solve_state(problem: ProblemData, grid: Grid, xi) -> np.ndarray:
    """Forward time-stepping solve of X = xi + int A X (t-s)^(beta-1) ds.

    xi is a grid trajectory (array or callable).  Returns X with shape
    (n, n_state).  The implicit step inverts only the small diagonal
    block (I - w_ii A(t_i, t_i)), which is nonsingular on any reasonable
    grid; failure signals a grid far too coarse for the kernel magnitude.
    """
    dx = problem.n_state
    xi_s = sample_trajectory(xi, grid, dx)
    if problem.A is None:
        return xi_s.copy()
    sw = product_weights(grid, problem.beta).w
    Asamp = sample_kernel(problem.A, grid, dx, dx)
    n = grid.n
    X = np.zeros((n, dx))
    X[0] = xi_s[0]
    eye = np.eye(dx)
    for i in range(1, n):
        rhs = xi_s[i] + np.einsum("j,jxy,jy->x", sw[i, :i], Asamp[i, :i], X[:i])
        M = eye - sw[i, i] * Asamp[i, i]
        try:
            X[i] = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"implicit step singular at node {i}; grid too coarse for "
                "the kernel magnitude"
            ) from exc
    return X


@dataclass(frozen=True)
class ContinuityReport:
    """Refinement study of |X(t) - X(T)| in shrinking windows at the horizon."""

    grid_sizes: list
    window_widths: list
    tail_deviations: list
    passed: bool


def check_continuity_at_T(
    problem: ProblemData,
    grid: Grid,
    u,
    refinements: int = 3,
    coefficients_continuous: bool = True,
) -> ContinuityReport:
    """Check that the controlled state is continuous at t = T.

    Doubles the grid `refinements` times while halving a probe window at
    the horizon (starting from the last tenth of [0, T]) and records
    max |X(t) - X(T)| over the window, the terminal node excluded.
    Continuity at T means these deviations shrink with the window; the
    check passes when the sequence decreases monotonically.  The caller
    declares that the coefficients satisfy a modulus-of-continuity
    condition near T; without it the check is not meaningful.
    """
    problem.require_lq()
    if not coefficients_continuous:
        raise AssumptionError(
            "continuity check requires coefficients continuous at t = T "
            "(declared by caller)"
        )
    sizes = []
    widths = []
    tails = []
    for k in range(refinements):
        nk = (grid.n - 1) * 2**k + 1
        gk = build_grid(nk, grid.T, grid.kind, grid.exponent or 2.0)
        uk = _resample_control(u, grid, gk, problem.n_control)
        sw = product_weights(gk, problem.beta).w
        Bs = sample_kernel(problem.B, gk, problem.n_state, problem.n_control)
        xi = sample_trajectory(problem.phi, gk, problem.n_state)
        if not np.all(np.isfinite(xi[0])):
            xi[0] = xi[1]
        xi = xi + np.einsum("ij,ijxy,jy->ix", sw, Bs, uk)
        X = solve_state(problem, gk, xi)
        width = 0.1 * grid.T / 2**k
        inside = np.nonzero(gk.nodes >= grid.T - width)[0]
        inside = inside[inside < nk - 1]
        tail = (
            float(np.max(np.linalg.norm(X[inside] - X[-1], axis=1)))
            if inside.size
            else 0.0
        )
        sizes.append(nk)
        widths.append(width)
        tails.append(tail)
    passed = all(tails[i + 1] < tails[i] for i in range(len(tails) - 1))
    return ContinuityReport(
        grid_sizes=sizes, window_widths=widths, tail_deviations=tails, passed=passed
    )


def _resample_control(u, grid_from: Grid, grid_to: Grid, du: int) -> np.ndarray:
    if callable(u):
        return sample_trajectory(u, grid_to, du)
    u_arr = sample_trajectory(u, grid_from, du)
    out = np.empty((grid_to.n, du))
    for c in range(du):
        out[:, c] = np.interp(grid_to.nodes, grid_from.nodes, u_arr[:, c])
    return out
