"""Total-stability analysis for discrete-time nonlinear maps.

Certify a nominal equilibrium with a quadratic contraction certificate,
compute explicit mismatch budgets, locate and check the equilibrium of a
perturbed map, and study integral-action regulation under model mismatch.
"""
__version__ = "0.1.0"

from .bounds import (GlobalLyapunovCertificate, TotalStabilityBounds, assemble_bounds,
                     delta1, delta2, delta4, prop1_delta)
from .dynamics import PlantModel, SystemMap, VectorFn, build_extended, simulate
from .equilibrium import (basin_check, find_fixed_point, uniqueness_annulus,
                          verify_invariance, verify_local_contraction)
from .expr import compile_map, differentiate, parse_expr, to_string
from .lyapunov import (ContractionCertificate, LyapunovFunction, QuadraticForm,
                       RadialPiecewiseV, default_decay, find_epsilon, radial_components,
                       solve_stein)
from .regulation import (ForwardingController, GeneralizedIntegrator, forwarding_control,
                         prop2_budget, prop3_budget, simulate_regulation, solve_M_linear,
                         solve_M_numeric)
from .sets import CompactSetSampler
