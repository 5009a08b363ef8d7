import numpy as np

from krausflow.flow import FlowConfig, flow_ascent
from krausflow.landscape import ControlProblem
from krausflow.sampling import random_rho, random_theta
from krausflow.stiefel import random_stiefel

# tight integrator tolerances so the flow settles on the optimal set itself
# rather than within the default tolerance band around it; the unreachable
# target leaves the small gradient as the only stopping rule
POLISH = FlowConfig(target_value=np.inf, grad_tol=1e-9, rel_tol=1e-10, abs_tol=1e-13, max_steps=20_000)


def optimum(n, d0, rng, e1=1):
    p = ControlProblem(random_rho(n, d0, rng), random_theta(n, e1))
    tr = flow_ascent(random_stiefel(n, rng), p, POLISH)
    assert tr.converged
    return tr.final_point, p


def random_tangent(s, rng):
    from krausflow.stiefel import tangent_project

    shape = s.blocks.shape
    return tangent_project(s, rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
