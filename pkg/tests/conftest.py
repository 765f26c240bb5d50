import numpy as np
import pytest

import volterra_lq as vlq


def rel_l2(omega, a, b):
    """Weighted relative L2 distance of two trajectories."""
    num = np.sqrt(np.einsum("i,ic,ic->", omega, a - b, a - b))
    den = np.sqrt(np.einsum("i,ic,ic->", omega, b, b))
    return float(num / max(den, 1e-30))


class Pipeline:
    """One fully assembled LQ problem, shared across tests."""

    def __init__(self, name, seed, n=48, beta=0.75, T=1.0, with_kernel=False):
        self.entry = vlq.get_problem(name, beta=beta, T=T, seed=seed)
        self.problem = self.entry.problem
        self.cost = self.entry.cost
        self.grid = vlq.build_grid(n, T)
        self.kernel = vlq.resolvent(self.problem, self.grid) if with_kernel else None
        self.dec = vlq.decompose(self.problem, self.grid, self.kernel)
        self.theta, self.theta_T = vlq.assemble_theta(self.dec, self.grid)
        self.dlq = vlq.assemble_quadratic_form(
            self.theta, self.theta_T, self.cost, self.dec, self.grid
        )
        self.omega = self.grid.trapezoid_weights()
        self.u_opt = vlq.solve_open_loop(self.dlq)
        self.x_opt = (self.dec.psi.ravel() + self.theta @ self.u_opt.ravel()).reshape(
            self.grid.n, -1
        )


@pytest.fixture(scope="session")
def rs_pipeline():
    return Pipeline("random-smooth", seed=42)


@pytest.fixture(scope="session")
def rs_pipeline_kernel():
    return Pipeline("random-smooth", seed=42, with_kernel=True)


@pytest.fixture(scope="session")
def ct_pipeline():
    return Pipeline("cross-term", seed=7)
