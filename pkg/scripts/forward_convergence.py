"""Forward solver walkthrough: second-order convergence on a problem with a series solution.

The scalar equation x_st = x with unit boundary data on the unit square has the
closed form x(s, t) = sum_k (s t)^k / (k!)^2.  Halving the grid spacing should
cut the error at the far corner by about four.
"""

import math

from goursat.forward import solve_state
from goursat.geometry import build_domain
from goursat.problem import builtin_problem

exact = sum(1.0 / math.factorial(k) ** 2 for k in range(30))
bp = builtin_problem("linear_scalar")
previous = None
for cells in (8, 16, 32, 64, 128):
    dom = build_domain(bp.arcs, (), 1.0 / cells)
    err = abs(solve_state(dom, bp.problem).x[-1, -1, 0] - exact)
    ratio = f"{previous / err:6.3f}" if previous else "   -  "
    print(f"h = 1/{cells:<4d} error at (1,1) = {err:.3e}  ratio {ratio}")
    previous = err
