"""pontrylab: penalty reduction and optimality certificates for optimal control.

The package represents Pontryagin-form problems with state and endpoint
constraints, reduces them to unconstrained penalized functionals, minimizes
those functionals, and certifies candidate processes against the first-order
maximum principle and a second-order necessary condition for strong minima.
"""

from .expr import parse_expr, to_source, evaluate, grad, hessian

__version__ = "0.1.0"
