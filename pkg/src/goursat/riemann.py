"""Riemann function families of the linearized state equation.

The forward family R(., .; base) solves, in its first argument pair,
R_st = f_x R + f_p R_s + f_q R_t with R = I at the base and the
characteristic conditions R_s = f_q R on the base row, R_t = f_p R on the
base column.  The adjoint family Z = R(target; ., .) solves, in its second
pair, the formally adjoint equation with Z = I at the target.  Boundary
ODEs are integrated with the implicit trapezoid rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import Region, StateSolution, VolterraSystem, linearization, picard_solve, extend_control
from .geometry import Domain
from .problem import ControlProblem, total_derivative


@dataclass
class RiemannFamily:
    base: tuple  # node indices of the base (forward) or target (adjoint)
    orientation: str  # forward or adjoint
    values: np.ndarray  # (ns, nt, n, n), zero off the support
    d_s: np.ndarray
    d_t: np.ndarray
    support: np.ndarray
    iterations: int


def _step_forward(Ck, Ck1, h, R):
    """R_{k+1} from dR/dx = C R by the implicit trapezoid rule."""
    n = R.shape[-1]
    eye = np.eye(n)
    return np.linalg.solve(eye - 0.5 * h * Ck1, (eye + 0.5 * h * Ck) @ R)


def _step_backward_right(Ck, Ck1, h, Z):
    """Z_k from dZ/dx = -Z C given Z_{k+1} (implicit trapezoid)."""
    n = Z.shape[-1]
    eye = np.eye(n)
    rhs = Z @ (eye + 0.5 * h * Ck1)
    return np.linalg.solve((eye - 0.5 * h * Ck).T, rhs.T).T


def line_propagator(coef_line, nodes, start):
    """R along a grid line from index start upward with dR/dx = coef R, R(start) = I."""
    n = coef_line.shape[-1]
    out = np.zeros((len(nodes), n, n))
    out[start] = np.eye(n)
    for k in range(start, len(nodes) - 1):
        out[k + 1] = _step_forward(coef_line[k], coef_line[k + 1], nodes[k + 1] - nodes[k], out[k])
    return out


class _Cache:
    """Per-state memo of linearization fields."""

    def __init__(self):
        self.key = None
        self.coef = None


_cache = _Cache()


def _coefficients(dom, spec, state):
    key = (id(dom), id(spec), id(state))
    if _cache.key != key:
        coef = linearization(dom, spec, state)
        s, t = dom.grid.s_nodes, dom.grid.t_nodes
        known = dom.grid.inside | dom.grid.ghost
        coef["A_adj"] = (coef["x"] - total_derivative(coef["p"], s, 0, known)
                         - total_derivative(coef["q"], t, 1, known))
        _cache.key, _cache.coef = key, coef
    return _cache.coef


def riemann_forward(dom: Domain, spec: ControlProblem, state: StateSolution, base, tol=1e-12, max_iter=300):
    """Forward family over {first pair >= base} inside the domain."""
    i0, j0 = base if isinstance(base[0], (int, np.integer)) else dom.grid.node_index(base)
    coef = _coefficients(dom, spec, state)
    A, B, C = coef["x"], coef["p"], coef["q"]
    ns, nt = dom.grid.shape
    n = spec.n
    s, t = dom.grid.s_nodes, dom.grid.t_nodes
    inside = dom.grid.inside
    reg = Region(dom, i0, ns - 1, j0, nt - 1, "forward")
    valid = inside[i0:, j0:]
    row = line_propagator(C[i0:, j0], s[i0:], 0)
    col = line_propagator(B[i0, j0:], t[j0:], 0)
    eye = np.eye(n)
    R0 = row[:, None] + col[None, :] - eye
    P0 = np.broadcast_to(np.einsum("iab,ibc->iac", C[i0:, j0], row)[:, None], R0.shape).copy()
    Q0 = np.broadcast_to(np.einsum("jab,jbc->jac", B[i0, j0:], col)[None, :], R0.shape).copy()
    Av, Bv, Cv = A[i0:, j0:][valid], B[i0:, j0:][valid], C[i0:, j0:][valid]

    def kernel(Rv, Pv, Qv):
        return Av @ Rv + Bv @ Pv + Cv @ Qv

    res = picard_solve(VolterraSystem(reg, kernel, (R0, P0, Q0), valid, None, spec.dynamics.lipschitz_hint),
                       tol, max_iter)
    support = np.zeros((ns, nt), bool)
    support[i0:, j0:] = valid
    stencil = dom.ghost_stencil(support)
    out = []
    for v in (res.psi, res.P, res.Q):
        full = np.zeros((ns, nt, n, n))
        full[i0:, j0:] = v
        out.append(dom.fill_ghosts(full, stencil=stencil, valid=support))
    return RiemannFamily((i0, j0), "forward", out[0], out[1], out[2], support, res.iterations)


def riemann_adjoint(dom: Domain, spec: ControlProblem, state: StateSolution, target, tol=1e-12, max_iter=300):
    """Adjoint family Z(sigma, tau) = R(target; sigma, tau) on [0, s0] x [0, t0]."""
    i0, j0 = target if isinstance(target[0], (int, np.integer)) else dom.grid.node_index(target)
    coef = _coefficients(dom, spec, state)
    B, C, Aadj = coef["p"], coef["q"], coef["A_adj"]
    n = spec.n
    s, t = dom.grid.s_nodes, dom.grid.t_nodes
    ns, nt = dom.grid.shape
    reg = Region(dom, 0, i0, 0, j0, "backward")
    eye = np.eye(n)
    row = np.zeros((i0 + 1, n, n))
    row[i0] = eye
    for k in range(i0 - 1, -1, -1):
        row[k] = _step_backward_right(C[k, j0], C[k + 1, j0], s[k + 1] - s[k], row[k + 1])
    col = np.zeros((j0 + 1, n, n))
    col[j0] = eye
    for k in range(j0 - 1, -1, -1):
        col[k] = _step_backward_right(B[i0, k], B[i0, k + 1], t[k + 1] - t[k], col[k + 1])
    Z0 = row[:, None] + col[None, :] - eye
    P0 = np.broadcast_to(-np.einsum("iab,ibc->iac", row, C[:i0 + 1, j0])[:, None], Z0.shape).copy()
    Q0 = np.broadcast_to(-np.einsum("jab,jbc->jac", col, B[i0, :j0 + 1])[None, :], Z0.shape).copy()
    valid = np.ones((i0 + 1, j0 + 1), bool)
    Av, Bv, Cv = Aadj[:i0 + 1, :j0 + 1][valid], B[:i0 + 1, :j0 + 1][valid], C[:i0 + 1, :j0 + 1][valid]

    def kernel(Zv, Pv, Qv):
        return Zv @ Av - Pv @ Bv - Qv @ Cv

    res = picard_solve(VolterraSystem(reg, kernel, (Z0, P0, Q0), valid, None, spec.dynamics.lipschitz_hint),
                       tol, max_iter)
    support = np.zeros((ns, nt), bool)
    support[:i0 + 1, :j0 + 1] = True
    out = []
    for v in (res.psi, res.P, res.Q):
        full = np.zeros((ns, nt, n, n))
        full[:i0 + 1, :j0 + 1] = v
        out.append(full)
    return RiemannFamily((i0, j0), "adjoint", out[0], out[1], out[2], support, res.iterations)


def aux_costates(dom: Domain, spec: ControlProblem, state: StateSolution, target):
    """rho1(tau) = R(s0, tau; s0, t0) for tau >= t0 and rho2(sigma) = R(sigma, t0; s0, t0)
    for sigma >= s0, returned on the grid lines through the target."""
    i0, j0 = target if isinstance(target[0], (int, np.integer)) else dom.grid.node_index(target)
    coef = _coefficients(dom, spec, state)
    inside = dom.grid.inside
    s, t = dom.grid.s_nodes, dom.grid.t_nodes
    jt = j0 + int(inside[i0, j0:].sum()) - 1
    it = i0 + int(inside[i0:, j0].sum()) - 1
    rho1 = line_propagator(coef["p"][i0, j0:jt + 1], t[j0:jt + 1], 0)
    rho2 = line_propagator(coef["q"][i0:it + 1, j0], s[i0:it + 1], 0)
    return (t[j0:jt + 1], rho1), (s[i0:it + 1], rho2)


def variation_via_riemann(dom: Domain, spec: ControlProblem, state: StateSolution, du, target):
    """delta x(target) = integral over W(target) of Z f_u du."""
    i0, j0 = target if isinstance(target[0], (int, np.integer)) else dom.grid.node_index(target)
    fam = riemann_adjoint(dom, spec, state, (i0, j0))
    coef = _coefficients(dom, spec, state)
    du = extend_control(dom, np.asarray(du, float))
    integrand = np.einsum("...ab,...bc,...c->...a", fam.values, coef["u"], du)[:i0 + 1, :j0 + 1]
    reg = Region(dom, 0, i0, 0, j0, "backward")
    return reg.cells(integrand).sum(axis=(0, 1))
