"""Picard iteration for two-dimensional Volterra systems and the state solve.

A Volterra system on a logically rectangular region of the grid reads

    psi = psi0 + area integral of g,  P = P0 +- column integral of g,
    Q = Q0 +- row integral of g,      g = kernel(psi, P, Q),

where the integrals run from the origin corner (forward direction) or
towards the far corner (backward direction).  The state equation, the
Riemann families and every co-state block are instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractionViolated, NaNEncountered, NoConvergence
from .geometry import Domain, GhostStencil, LL, LR, UL, UR
from .io import fmt, write_csv
from .problem import ControlProblem


@dataclass
class WeightedNorm:
    """Sup norm damped by exp(-rho (|s - s_ref| + |t - t_ref|))."""

    rho: float
    corner: tuple = (0.0, 0.0)


def weighted_norm(values, wn: WeightedNorm, s_nodes, t_nodes, valid=None) -> float:
    """max over nodes and components of weight * |value|."""
    v = np.abs(np.asarray(values, float))
    if v.ndim > 2:
        v = v.reshape(v.shape[:2] + (-1,)).max(axis=2)
    w = np.exp(-wn.rho * (np.abs(np.asarray(s_nodes)[:, None] - wn.corner[0])
                          + np.abs(np.asarray(t_nodes)[None, :] - wn.corner[1])))
    prod = w * v
    if valid is not None:
        prod = np.where(valid, prod, 0.0)
    return float(prod.max()) if prod.size else 0.0


def triple_norm(psi, P, Q, wn, s_nodes, t_nodes, valid=None):
    """Sum of the weighted norms of the three components."""
    return sum(weighted_norm(v, wn, s_nodes, t_nodes, valid) for v in (psi, P, Q))


def contraction_factor(lipschitz, rho, width, height):
    """L (1 - e^{-rho a})(1 - e^{-rho b}) / rho^2 for the psi component."""
    return lipschitz * (1 - math.exp(-rho * width)) * (1 - math.exp(-rho * height)) / rho ** 2


def choose_rho(lipschitz, width, height):
    """Smallest power of two giving a contraction factor <= 1/2; 8 without a hint."""
    if lipschitz is None:
        return 8.0
    rho = 1.0
    for _ in range(40):
        if contraction_factor(lipschitz, rho, width, height) <= 0.5:
            return rho
        rho *= 2
    return rho


class Region:
    """Quadrature on the node box [i0, i1] x [j0, j1] of a domain grid."""

    def __init__(self, dom: Domain, i0, i1, j0, j1, direction="forward"):
        self.dom = dom
        self.i0, self.i1, self.j0, self.j1 = i0, i1, j0, j1
        self.direction = direction
        self.s = dom.grid.s_nodes[i0:i1 + 1]
        self.t = dom.grid.t_nodes[j0:j1 + 1]
        self.cw = dom.cell_w[:, i0:i1, j0:j1]
        self.col_lo = dom.col_w[0][i0:i1 + 1, j0:j1]
        self.col_hi = dom.col_w[1][i0:i1 + 1, j0:j1]
        self.row_lo = dom.row_w[0][i0:i1, j0:j1 + 1]
        self.row_hi = dom.row_w[1][i0:i1, j0:j1 + 1]

    @property
    def shape(self):
        return (self.i1 - self.i0 + 1, self.j1 - self.j0 + 1)

    def local_stencil(self, st: GhostStencil) -> GhostStencil:
        keep = ((st.gi >= self.i0) & (st.gi <= self.i1) & (st.gj >= self.j0) & (st.gj <= self.j1))
        return GhostStencil(st.gi[keep] - self.i0, st.gj[keep] - self.j0,
                            st.src_i[keep] - self.i0, st.src_j[keep] - self.j0, st.coef[keep])

    def _ex(self, v):
        return (slice(None), slice(None)) + (None,) * (np.ndim(v) - 2)

    def cells(self, v):
        ex = self._ex(v)
        w = self.cw
        return (w[LL][ex] * v[:-1, :-1] + w[LR][ex] * v[1:, :-1]
                + w[UL][ex] * v[:-1, 1:] + w[UR][ex] * v[1:, 1:])

    def col_segments(self, v):
        ex = self._ex(v)
        return self.col_lo[ex] * v[:, :-1] + self.col_hi[ex] * v[:, 1:]

    def row_segments(self, v):
        ex = self._ex(v)
        return self.row_lo[ex] * v[:-1, :] + self.row_hi[ex] * v[1:, :]

    def integrals(self, v):
        """(area, column, row) integrals in the region's direction."""
        out_a = np.zeros_like(v)
        out_c = np.zeros_like(v)
        out_r = np.zeros_like(v)
        c = self.cells(v)
        cs = self.col_segments(v)
        rs = self.row_segments(v)
        if self.direction == "forward":
            out_a[1:, 1:] = c.cumsum(0).cumsum(1)
            out_c[:, 1:] = cs.cumsum(1)
            out_r[1:, :] = rs.cumsum(0)
        else:
            out_a[:-1, :-1] = c[::-1, ::-1].cumsum(0).cumsum(1)[::-1, ::-1]
            out_c[:, :-1] = cs[:, ::-1].cumsum(1)[:, ::-1]
            out_r[:-1, :] = rs[::-1].cumsum(0)[::-1]
        return out_a, out_c, out_r


@dataclass
class VolterraSystem:
    """Region, kernel on valid nodes, seed fields and direction."""

    region: Region
    kernel: Callable
    seed: tuple
    valid: np.ndarray
    ghost: Optional[GhostStencil] = None
    lipschitz_hint: Optional[float] = None

    @property
    def direction(self):
        return self.region.direction


@dataclass
class PicardResult:
    psi: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    iterations: int
    residual_history: list
    weighted_history: list
    ratio_history: list
    psi_ratio_history: list
    rho: float

    def __iter__(self):
        return iter((self.psi, self.P, self.Q))


def picard_solve(system: VolterraSystem, tol=1e-10, max_iter=200, rho=None,
                 check_contraction=False) -> PicardResult:
    """Successive approximations until the sup-norm update falls below tol."""
    reg = system.region
    valid = system.valid
    psi0, P0, Q0 = (np.asarray(v, float) for v in system.seed)
    if rho is None:
        rho = choose_rho(system.lipschitz_hint, reg.s[-1] - reg.s[0], reg.t[-1] - reg.t[0])
    corner = (reg.s[0], reg.t[0]) if system.direction == "forward" else (reg.s[-1], reg.t[-1])
    wn = WeightedNorm(rho, corner)
    sign = 1.0 if system.direction == "forward" else -1.0
    psi, P, Q = psi0.copy(), P0.copy(), Q0.copy()
    hist, whist, ratios, pratios = [], [], [], []
    prev_w = prev_pw = None
    g = np.zeros_like(psi0)
    for it in range(1, max_iter + 1):
        g[...] = 0.0
        g[valid] = system.kernel(psi[valid], P[valid], Q[valid])
        if system.ghost is not None:
            system.ghost.apply(g, out=g)
        area, col, row = reg.integrals(g)
        new_psi = psi0 + area
        new_P = P0 + sign * col
        new_Q = Q0 + sign * row
        d_psi, d_P, d_Q = new_psi - psi, new_P - P, new_Q - Q
        sup = max(float(np.abs(d[valid]).max()) if d[valid].size else 0.0 for d in (d_psi, d_P, d_Q))
        if not np.isfinite(sup):
            raise NaNEncountered(f"non-finite iterate at iteration {it}")
        w_psi = weighted_norm(d_psi, wn, reg.s, reg.t, valid)
        w_all = w_psi + weighted_norm(d_P, wn, reg.s, reg.t, valid) + weighted_norm(d_Q, wn, reg.s, reg.t, valid)
        if prev_w is not None and prev_w > 1e-300:
            ratios.append(w_all / prev_w)
            pratios.append(w_psi / prev_pw if prev_pw > 1e-300 else 0.0)
            if check_contraction and pratios[-1] > 1.0 and w_psi > 1e3 * tol:
                raise ContractionViolated(f"weighted ratio {pratios[-1]:.3g} > 1 at rho={rho}")
        prev_w, prev_pw = w_all, w_psi
        hist.append(sup)
        whist.append(w_all)
        psi, P, Q = new_psi, new_P, new_Q
        if sup < tol:
            return PicardResult(psi, P, Q, it, hist, whist, ratios, pratios, rho)
    raise NoConvergence(f"Picard iteration did not reach tol={tol} in {max_iter} iterations "
                        f"(last update {hist[-1]:.3e})")


def write_residual_csv(path, result: PicardResult):
    rows = [(k + 1, fmt(a), fmt(b)) for k, (a, b) in enumerate(zip(result.residual_history, result.weighted_history))]
    return write_csv(path, ["iteration", "sup_residual", "weighted_residual"], rows)


# ---------------------------------------------------------------------------
# state equation
# ---------------------------------------------------------------------------


@dataclass
class StateSolution:
    """State and derivatives on the grid (ghost nodes filled, other outside nodes 0)."""

    x: np.ndarray
    x_s: np.ndarray
    x_t: np.ndarray
    x_st: np.ndarray
    u: np.ndarray
    iterations: int
    residual_history: list
    weighted_history: list = field(default_factory=list)
    picard: Optional[PicardResult] = None


def full_region(dom: Domain, direction="forward"):
    ns, nt = dom.grid.shape
    return Region(dom, 0, ns - 1, 0, nt - 1, direction)


def extend_control(dom: Domain, u):
    """Control at inside nodes with ghost values extrapolated."""
    return dom.fill_ghosts(np.asarray(u, float))


def solve_state(dom: Domain, spec: ControlProblem, boundary=None, u=None, tol=1e-12, max_iter=300) -> StateSolution:
    """Forward Goursat solve x_st = f on the domain by Picard iteration."""
    boundary = spec.boundary if boundary is None else boundary
    n, m = spec.n, spec.m
    s, t = dom.grid.s_nodes, dom.grid.t_nodes
    S, T = dom.grid.mesh()
    if u is None:
        u = np.zeros(S.shape + (m,))
    u = np.asarray(u, float)
    if u.shape != S.shape + (m,):
        raise ValueError(f"control must have shape {S.shape + (m,)}")
    u = extend_control(dom, u)
    x1, x2, x0, d1, d2 = boundary.values(s, t, n)
    psi0 = x1[:, None, :] + x2[None, :, :] - x0
    P0 = np.broadcast_to(d1[:, None, :], psi0.shape).copy()
    Q0 = np.broadcast_to(d2[None, :, :], psi0.shape).copy()
    valid = dom.grid.inside
    Sv, Tv, Uv = S[valid], T[valid], u[valid]
    dyn = spec.dynamics

    def kernel(xv, pv, qv):
        return dyn.value(Sv, Tv, xv, pv, qv, Uv)

    system = VolterraSystem(full_region(dom), kernel, (psi0, P0, Q0), valid, None, dyn.lipschitz_hint)
    res = picard_solve(system, tol, max_iter)
    xst = np.zeros_like(psi0)
    xst[valid] = kernel(res.psi[valid], res.P[valid], res.Q[valid])
    fill = dom.fill_ghosts
    return StateSolution(fill(res.psi), fill(res.P), fill(res.Q), fill(xst), u,
                         res.iterations, res.residual_history, res.weighted_history, res)


def linearization(dom: Domain, spec: ControlProblem, state: StateSolution):
    """Coefficient fields f_x, f_p, f_q, f_u on the grid (zero outside, ghosts filled)."""
    S, T = dom.grid.mesh()
    valid = dom.grid.inside
    args = (S[valid], T[valid], state.x[valid], state.x_s[valid], state.x_t[valid], state.u[valid])
    out = {}
    for name in ("x", "p", "q", "u"):
        cols = spec.m if name == "u" else spec.n
        arr = np.zeros(S.shape + (spec.n, cols))
        arr[valid] = spec.dynamics.partial(name, *args)
        out[name] = dom.fill_ghosts(arr)
    return out


def state_variation(dom: Domain, spec: ControlProblem, base: StateSolution, u, du, tol=1e-12, max_iter=300):
    """Linearized state response: dx_st = f_x dx + f_p dx_s + f_q dx_t + f_u du, zero data."""
    coef = linearization(dom, spec, base)
    valid = dom.grid.inside
    du = extend_control(dom, np.asarray(du, float))
    A, B, C = coef["x"][valid], coef["p"][valid], coef["q"][valid]
    forcing = np.einsum("kij,kj->ki", coef["u"][valid], du[valid])

    def kernel(xv, pv, qv):
        return (np.einsum("kij,kj->ki", A, xv) + np.einsum("kij,kj->ki", B, pv)
                + np.einsum("kij,kj->ki", C, qv) + forcing)

    zero = np.zeros(dom.grid.shape + (spec.n,))
    system = VolterraSystem(full_region(dom), kernel, (zero, zero.copy(), zero.copy()), valid, None,
                            spec.dynamics.lipschitz_hint)
    res = picard_solve(system, tol, max_iter)
    return dom.fill_ghosts(res.psi)
