import numpy as np
import pytest

from blocktr1.diagnostics import build_reference
from blocktr1.integrator import Rk4Dynamics
from blocktr1.model import chain_of_masses
from blocktr1.sqp import run_sqp


@pytest.fixture(scope="session")
def rate_instance():
    """Local-convergence study instance shared by rate/projection tests.

    A moderately stiff three-mass chain whose Gauss-Newton contraction
    rate is clearly nonzero (cheap intermediate cost, heavy terminal
    cost). The returned initial iterate sits at a seeded random
    perturbation of the reference solution, so runs started there stay in
    the asymptotic regime the theory speaks about.
    """
    model = chain_of_masses(
        3, 20, 4.0, spring_d=10.0, rest_length=0.1,
        u_perturb=(-0.6, 0.6, 0.8), t_perturb=1.0, wall_y=-10.0,
        weights=(0.01, 0.05, 5.0))
    dynamics = Rk4Dynamics(model, n_steps=4)
    ref_run = run_sqp(model, dynamics, "exact", tol=1e-13, max_iter=300)
    assert ref_run.converged
    reference = build_reference(model, dynamics, ref_run.iterate, [])
    rng = np.random.default_rng(7)
    it0 = ref_run.iterate.copy()
    delta = 0.05
    it0.X = it0.X + delta * rng.standard_normal(it0.X.shape)
    it0.U = it0.U + delta * rng.standard_normal(it0.U.shape)
    it0.lam = it0.lam + delta * rng.standard_normal(it0.lam.shape)
    return model, dynamics, reference, it0
