"""Adjoint gradient, projected-gradient optimization and the pointwise extremum test.

The gradient built from the multi-sheet co-state is compared with central finite
differences, then a box-constrained tracking problem is solved and the optimal
control is checked against the lattice-minimization characterization.
"""

import numpy as np

from goursat import optimize as op
from goursat.forward import solve_state
from goursat.geometry import build_domain
from goursat.problem import builtin_problem


def setup(name, h):
    bp = builtin_problem(name)
    dom = build_domain(bp.arcs, bp.extra_vertices, h)
    S, T = dom.grid.mesh()
    return dom, bp, bp.u0(S, T)


for name in ("lq_rectangle", "quarter_disk_arc", "staircase_vertex"):
    dom, bp, u = setup(name, 1 / 64)
    rep = op.gradient_check(dom, bp.problem, u, count=5, seed=0, eps=1e-4)
    print(f"{name:18s} adjoint vs finite differences: max relative error {rep['max_relative_error']:.2e}")

dom, bp, u0 = setup("lq_target", 1 / 32)
trace = op.projected_gradient(dom, bp.problem, u0, tol=1e-6)
print(f"lq_target: converged={trace.converged} after {len(trace.iterates) - 1} steps")
rep = op.check_extremum(dom, bp.problem, trace.state, trace.costate, trace.u, sample_count=200, lattice=11)
print(f"extremum check: {rep['violations']} violations over {rep['samples']} sample nodes")
for eps in (0.04, 0.02, 0.01):
    dJ, pred = op.needle_increment(dom, bp.problem, trace.u, (0.5, 0.5), np.array([2.0]), eps)
    print(f"needle radius {eps:.2f}: measured {dJ:.4e}  predicted {pred:.4e}")
