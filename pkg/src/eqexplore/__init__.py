"""Active data acquisition from an equilibrium policy.

A stabilizing LQR policy keeps the plant near an equilibrium; short bursts of
an exploration control, chosen by the mode insertion gradient of a sampled
KL coverage objective, move the plant towards informative regions.
"""
from .controller import ExplorationController, TaskObjective, quadratic_task, rollout_policy
from .coverage import CoverageState, SearchDomain
from .importance import GpDictionary, RbfKernel
from .ode import TimeGrid, integrate, rk4_step
from .stabilizer import StabilityCertificate, lqr_certificate, solve_care
from .systems import ControlAffineSystem, make_cart_double_pendulum, make_double_integrator, make_quadrotor

__version__ = "0.1.0"
