"""Co-state: direct quadrature oracle and the zone-by-zone sweep.

The co-state is a row covector psi with

    psi(P) = area integral over E(P) of F R(., P) + arc integral over gamma(P)
             of F1 R(., P) + sum over vertices P_r with P in W(P_r) of F0_r R(P_r, P)

where F = Phi_x - D_s Phi_p - D_t Phi_q, F1 = n1 Phi_p + n2 Phi_q + Phi1_x -
D_mu Phi1_eta on the curve and F0_r = Phi0_x(P_r) - V_r.  V_r is the jump of
Phi1_eta at the vertex (outgoing arc minus incoming arc).

The sweep solves one Goursat problem per block: curvilinear triangles carry
psi = 0 on their oblique arc, rectangles take data from flat-part ODEs or
from neighbouring blocks plus the jump across the vertex line between them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MissingVertexLimit,
    OnForeignVertexLine,
    TargetOnVertexLine,
    ZoneOrderViolation,
)
from .forward import Region, StateSolution, VolterraSystem, extend_control, linearization, picard_solve
from .geometry import TOL_GEOM, Domain
from .io import fmt, write_csv
from .problem import ControlProblem, total_derivative
from .riemann import riemann_forward

VR_MODES = ("tangential_jump", "zero")


@dataclass
class FTerms:
    F: np.ndarray  # (ns, nt, n)
    F1: np.ndarray  # (K, n) on arc nodes
    F0: np.ndarray  # (N + 2, n) per vertex
    Phi1_eta: np.ndarray  # (K, n)
    Vr: np.ndarray  # (N + 2, n)
    Vr_mode: str = "tangential_jump"


@dataclass
class CostateSolution:
    """Per-block co-state sheets.  blocks[b] = (psi, psi_s, psi_t) on the block's
    node box; nodes on a vertex line carry one value per adjacent block."""

    blocks: dict
    meta: dict
    vertex_limits: dict
    fterms: FTerms
    coef: dict = field(default_factory=dict)

    def value(self, dom: Domain, node, block=None):
        i, j = node
        for b, (psi, _, _) in self.blocks.items():
            blk = dom.blocks[b]
            if block is not None and b != block:
                continue
            if blk.i0 <= i <= blk.i1 and blk.j0 <= j <= blk.j1 and dom.grid.inside[i, j]:
                return psi[i - blk.i0, j - blk.j0]
        raise KeyError(f"node {node} not in block {block}")

    def block_containing(self, dom: Domain, point):
        """Block whose open interior contains point."""
        for b in self.blocks:
            blk = dom.blocks[b]
            s0, s1 = dom.grid.s_nodes[blk.i0], dom.grid.s_nodes[blk.i1]
            t0, t1 = dom.grid.t_nodes[blk.j0], dom.grid.t_nodes[blk.j1]
            if s0 < point[0] < s1 and t0 < point[1] < t1:
                return b
        raise KeyError(f"{tuple(point)} lies on a vertex line or outside")


# ---------------------------------------------------------------------------
# F terms
# ---------------------------------------------------------------------------


def _state_at_nodes(dom, state):
    return state.x, state.x_s, state.x_t, state.u


def compute_F_terms(dom: Domain, spec: ControlProblem, state: StateSolution, u=None,
                    vr_mode="tangential_jump") -> FTerms:
    """Volume, arc and vertex coefficients of the cost variation."""
    if vr_mode not in VR_MODES:
        raise ValueError(f"Vr_mode must be one of {VR_MODES}")
    S, T = dom.grid.mesh()
    valid = dom.grid.inside
    x, p, q, uu = state.x, state.x_s, state.x_t, state.u if u is None else extend_control(dom, u)
    args = (S[valid], T[valid], x[valid], p[valid], q[valid], uu[valid])
    fields = {}
    for name in ("x", "p", "q"):
        arr = np.zeros(S.shape + (spec.n,))
        arr[valid] = spec.Phi_partial(name, *args)
        fields[name] = dom.fill_ghosts(arr)
    known = dom.grid.inside | dom.grid.ghost
    F = fields["x"] - total_derivative(fields["p"], dom.grid.s_nodes, 0, known) \
        - total_derivative(fields["q"], dom.grid.t_nodes, 1, known)
    F = dom.fill_ghosts(F)
    # arc terms
    an = dom.arc_nodes
    xs, ps, qs, us = (an.sample(v) for v in (x, p, q, uu))
    n1, n2 = an.normal[:, 0], an.normal[:, 1]
    eta = -n2[:, None] * ps + n1[:, None] * qs
    sa, ta = an.pos[:, 0], an.pos[:, 1]
    phi_p = spec.Phi_partial("p", sa, ta, xs, ps, qs, us)
    phi_q = spec.Phi_partial("q", sa, ta, xs, ps, qs, us)
    arc_idx = an.arc.astype(float)
    phi1_x = spec.Phi1_partial("x", sa, ta, xs, eta, arc_idx)
    phi1_eta = spec.Phi1_partial("eta", sa, ta, xs, eta, arc_idx)
    d_mu = np.zeros_like(phi1_eta)
    for sl in an.slices:
        mu = an.mu[sl]
        if len(mu) >= 3:
            d_mu[sl] = np.gradient(phi1_eta[sl], mu, axis=0, edge_order=2)
        elif len(mu) == 2 and mu[1] > mu[0]:
            d_mu[sl] = (phi1_eta[sl][1] - phi1_eta[sl][0]) / (mu[1] - mu[0])
    F1 = n1[:, None] * phi_p + n2[:, None] * phi_q + phi1_x - d_mu
    # vertex terms
    verts = dom.vertices
    nv = len(verts)
    Vr = np.zeros((nv, spec.n))
    if vr_mode == "tangential_jump":
        for r in range(1, nv - 1):
            incoming = an.slices[r - 1].stop - 1
            outgoing = an.slices[r].start
            Vr[r] = phi1_eta[outgoing] - phi1_eta[incoming]
    xv = np.array([x[dom.grid.node_index(v)] for v in verts])
    F0 = spec.Phi0_x(verts[:, 0], verts[:, 1], xv) - Vr
    return FTerms(F, F1, F0, phi1_eta, Vr, vr_mode)


# ---------------------------------------------------------------------------
# oracle by quadrature
# ---------------------------------------------------------------------------


def _check_regular(dom: Domain, node):
    s = dom.grid.s_nodes[node[0]]
    t = dom.grid.t_nodes[node[1]]
    if np.any(np.abs(dom.s_levels - s) <= TOL_GEOM) or np.any(np.abs(dom.t_levels - t) <= TOL_GEOM):
        raise TargetOnVertexLine(f"target {(s, t)} lies on a coordinate line through a vertex")
    if not dom.grid.inside[node] or dom.grid.mask[node] != 1:
        raise TargetOnVertexLine(f"target {(s, t)} is not an interior node")


def costate_by_quadrature(dom: Domain, spec: ControlProblem, state: StateSolution, u=None, target=None,
                          fterms: FTerms | None = None):
    """Co-state at an interior grid node of the regular part by direct quadrature."""
    node = target if isinstance(target[0], (int, np.integer)) else dom.grid.node_index(target)
    _check_regular(dom, node)
    ft = compute_F_terms(dom, spec, state, u) if fterms is None else fterms
    fam = riemann_forward(dom, spec, state, node)
    i0, j0 = node
    FR = np.einsum("...i,...ij->...j", ft.F, fam.values)
    stencil = dom.ghost_stencil(fam.support)
    FR = dom.fill_ghosts(FR, stencil=stencil, valid=fam.support)
    area = dom.cell_integrals(FR)[i0:, j0:].sum(axis=(0, 1))
    k0, k1 = dom.arc_span((dom.grid.s_nodes[i0], dom.grid.t_nodes[j0]))
    R_arc = dom.arc_nodes.sample(fam.values)
    arc = dom.arc_integral_values(np.einsum("ki,kij->kj", ft.F1, R_arc), k0, k1)
    s0, t0 = dom.grid.s_nodes[i0], dom.grid.t_nodes[j0]
    vert = np.zeros(spec.n)
    for r, v in enumerate(dom.vertices):
        if v[0] > s0 and v[1] > t0:
            vert += ft.F0[r] @ fam.values[dom.grid.node_index(v)]
    return area + arc + vert


# ---------------------------------------------------------------------------
# boundary-line recursions
# ---------------------------------------------------------------------------


def _steps(coef_line, nodes):
    """Trapezoid propagator steps S_k over [x_k, x_{k+1}] for dR/dx = coef R."""
    n = coef_line.shape[-1]
    eye = np.eye(n)
    h = np.diff(nodes)[:, None, None]
    lhs = eye - 0.5 * h * coef_line[1:]
    rhs = eye + 0.5 * h * coef_line[:-1]
    return np.linalg.solve(lhs, rhs)


def _downward_sum(contrib, steps, start, stop):
    """Y(k) = c_k + Y(k+1) S_k for k = stop..start; returns Y(start)."""
    y = contrib.get(stop, 0.0) * 1.0
    for k in range(stop - 1, start - 1, -1):
        y = contrib.get(k, 0.0) + y @ steps[k]
    return y


class _Lines:
    """Boundary data needed by vertex limits, flat ODEs and jumps."""

    def __init__(self, dom: Domain, spec: ControlProblem, state: StateSolution, ft: FTerms, coef):
        self.dom, self.spec, self.state, self.ft, self.coef = dom, spec, state, ft, coef
        self._limits = {}

    def col_steps(self, i):
        return _steps(self.coef["p"][i], self.dom.grid.t_nodes)

    def row_steps(self, j):
        return _steps(self.coef["q"][:, j], self.dom.grid.s_nodes)

    def _arc_contrib(self, k, axis, contrib):
        """Trapezoid weights of F1 along flat arc k accumulated into contrib."""
        an = self.dom.arc_nodes
        sl = an.slices[k]
        idx = np.arange(sl.start, sl.stop)
        coord = an.pos[idx, 1] if axis == "t" else an.pos[idx, 0]
        grid_idx = an.j0[idx] if axis == "t" else an.i0[idx]
        for a, b, ga, gb in zip(idx[:-1], idx[1:], grid_idx[:-1], grid_idx[1:]):
            w = 0.5 * abs(coord[b - sl.start] - coord[a - sl.start])
            contrib[ga] = contrib.get(ga, 0.0) + w * self.ft.F1[a]
            contrib[gb] = contrib.get(gb, 0.0) + w * self.ft.F1[b]

    def limits(self, r):
        """(W3, W2, W4) limits at vertex r."""
        if r in self._limits:
            return self._limits[r]
        dom, ft = self.dom, self.ft
        nv = len(dom.vertices)
        if not 0 <= r < nv:
            raise MissingVertexLimit(f"no vertex with index {r}")
        i, j = dom.grid.node_index(dom.vertices[r])
        arcs = dom.arcs
        # vertical chain following the vertex
        contrib, k, top = {}, r, j
        while k < len(arcs) and arcs[k].kind == "flat_t":
            self._arc_contrib(k, "t", contrib)
            end = dom.grid.node_index(dom.vertices[k + 1])[1]
            contrib[end] = contrib.get(end, 0.0) + ft.F0[k + 1]
            top = end
            k += 1
        W2 = _downward_sum(contrib, self.col_steps(i), j, top) if top > j else np.zeros(self.spec.n)
        # horizontal chain preceding the vertex
        contrib, k, right = {}, r - 1, i
        while k >= 0 and arcs[k].kind == "flat_s":
            self._arc_contrib(k, "s", contrib)
            start = dom.grid.node_index(dom.vertices[k])[0]
            contrib[start] = contrib.get(start, 0.0) + ft.F0[k]
            right = start
            k -= 1
        W4 = _downward_sum(contrib, self.row_steps(j), i, right) if right > i else np.zeros(self.spec.n)
        W2 = np.asarray(W2, float) + np.zeros(self.spec.n)
        W4 = np.asarray(W4, float) + np.zeros(self.spec.n)
        out = (W2 + W4 + ft.F0[r], W2, W4)
        self._limits[r] = out
        return out

    def jump_profile(self, kind, level_idx):
        """Jump Omega and its derivative along the interior part of a vertex line.

        kind 'S': horizontal line t = t[level_idx]; returns arrays over i.
        kind 'T': vertical line s = s[level_idx]; returns arrays over j."""
        dom, n = self.dom, self.spec.n
        verts = dom.vertices
        if kind == "S":
            tl = dom.grid.t_nodes[level_idx]
            rs = [r for r in range(len(verts)) if abs(verts[r, 1] - tl) <= TOL_GEOM]
            r_e = max(rs)  # leftmost boundary point at this height
            ie = dom.grid.node_index(verts[r_e])[0]
            W3, W2, W4 = self.limits(r_e)
            lam = W4 + self.ft.F0[r_e]
            steps = self.row_steps(level_idx)
            C = self.coef["q"][:, level_idx]
            om = np.zeros((ie + 1, n))
            om[ie] = lam
            for i in range(ie - 1, -1, -1):
                om[i] = om[i + 1] @ steps[i]
            return om, -np.einsum("ki,kij->kj", om, C[:ie + 1])
        sl = dom.grid.s_nodes[level_idx]
        rs = [r for r in range(len(verts)) if abs(verts[r, 0] - sl) <= TOL_GEOM]
        r_b = min(rs)  # lowest boundary point on this vertical line
        jb = dom.grid.node_index(verts[r_b])[1]
        W3, W2, W4 = self.limits(r_b)
        lam = W2 + self.ft.F0[r_b]
        steps = self.col_steps(level_idx)
        B = self.coef["p"][level_idx]
        om = np.zeros((jb + 1, n))
        om[jb] = lam
        for j in range(jb - 1, -1, -1):
            om[j] = om[j + 1] @ steps[j]
        return om, -np.einsum("ki,kij->kj", om, B[:jb + 1])

    def flat_ode(self, k):
        """psi and its grid-axis derivative along flat arc k (nodes in ccw order)."""
        dom, ft = self.dom, self.ft
        arc = dom.arcs[k]
        an = dom.arc_nodes
        sl = an.slices[k]
        F1 = ft.F1[sl]
        n = self.spec.n
        eye = np.eye(n)
        if arc.kind == "flat_t":
            i = an.i0[sl.start]
            js = an.j0[sl]
            t = dom.grid.t_nodes
            B = self.coef["p"][i, js]
            psi = np.zeros((len(js), n))
            psi[-1] = self.limits(k + 1)[0]
            r_next = -F1[-1] - psi[-1] @ B[-1]
            for m in range(len(js) - 2, -1, -1):
                h = t[js[m + 1]] - t[js[m]]
                rhs = psi[m + 1] - 0.5 * h * r_next + 0.5 * h * F1[m]
                psi[m] = np.linalg.solve((eye - 0.5 * h * B[m]).T, rhs)
                r_next = -F1[m] - psi[m] @ B[m]
            deriv = -F1 - np.einsum("ki,kij->kj", psi, B)
            return (np.full(len(js), i), js), psi, deriv
        if arc.kind == "flat_s":
            j = an.j0[sl.start]
            is_ = an.i0[sl]  # descending s
            s = dom.grid.s_nodes
            C = self.coef["q"][is_, j]
            psi = np.zeros((len(is_), n))
            psi[-1] = self.limits(k + 1)[2]
            r_prev = -F1[-1] - psi[-1] @ C[-1]
            for m in range(len(is_) - 2, -1, -1):
                h = s[is_[m]] - s[is_[m + 1]]
                rhs = psi[m + 1] + 0.5 * h * r_prev - 0.5 * h * F1[m]
                psi[m] = np.linalg.solve((eye + 0.5 * h * C[m]).T, rhs)
                r_prev = -F1[m] - psi[m] @ C[m]
            deriv = -F1 - np.einsum("ki,kij->kj", psi, C)
            return (is_, np.full(len(is_), j)), psi, deriv
        raise ValueError("flat_part_ode needs a flat arc")


def _coef_fields(dom, spec, state):
    coef = linearization(dom, spec, state)
    known = dom.grid.inside | dom.grid.ghost
    coef["A_adj"] = coef["x"] - total_derivative(coef["p"], dom.grid.s_nodes, 0, known) \
        - total_derivative(coef["q"], dom.grid.t_nodes, 1, known)
    return coef


def _lines(dom, spec, state, u, fterms=None):
    ft = compute_F_terms(dom, spec, state, u) if fterms is None else fterms
    return _Lines(dom, spec, state, ft, _coef_fields(dom, spec, state))


def flat_part_ode(dom: Domain, spec: ControlProblem, state: StateSolution, u=None, segment=0, fterms=None):
    """Co-state along flat arc `segment`: (grid indices, psi, derivative along the grid axis)."""
    return _lines(dom, spec, state, u, fterms).flat_ode(segment)


def vertex_limits(dom: Domain, spec: ControlProblem, state: StateSolution, u=None, vertex=0, fterms=None):
    """Limits of the co-state at a vertex from the lower-left, upper-left and lower-right quadrants."""
    r = vertex if isinstance(vertex, (int, np.integer)) else \
        int(np.argmin(np.hypot(*(dom.vertices - np.asarray(vertex, float)).T)))
    return _lines(dom, spec, state, u, fterms).limits(r)


def jump_conditions(dom: Domain, spec: ControlProblem, state: StateSolution, u=None, line=("S", 0.0),
                    point=None, fterms=None):
    """Jump psi(lower/left side) - psi(upper/right side) across a vertex line at a point.

    line = ('S', t_level) for a horizontal line or ('T', s_level) for a vertical one."""
    kind, level = line
    grid = dom.grid
    if kind == "S":
        if not np.any(np.abs(dom.t_levels - level) <= TOL_GEOM) or abs(point[1] - level) > TOL_GEOM:
            raise OnForeignVertexLine(f"{tuple(point)} is not on a horizontal vertex line at t={level}")
        j = grid.node_index((0.0, level))[1]
        om, _ = _lines(dom, spec, state, u, fterms).jump_profile("S", j)
        i = grid.node_index(point)[0]
        if i >= len(om):
            raise OnForeignVertexLine(f"{tuple(point)} is beyond the interior part of the line")
        return om[i]
    if kind == "T":
        if not np.any(np.abs(dom.s_levels - level) <= TOL_GEOM) or abs(point[0] - level) > TOL_GEOM:
            raise OnForeignVertexLine(f"{tuple(point)} is not on a vertical vertex line at s={level}")
        i = grid.node_index((level, 0.0))[0]
        om, _ = _lines(dom, spec, state, u, fterms).jump_profile("T", i)
        j = grid.node_index(point)[1]
        if j >= len(om):
            raise OnForeignVertexLine(f"{tuple(point)} is beyond the interior part of the line")
        return om[j]
    raise ValueError("line kind must be 'S' or 'T'")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _kernel_factory(coef, block_slice, valid, F):
    Av = coef["A_adj"][block_slice][valid]
    Bv = coef["p"][block_slice][valid]
    Cv = coef["q"][block_slice][valid]
    Fv = F[block_slice][valid]

    def kernel(psi, P, Q):
        return (Fv + np.einsum("ki,kij->kj", psi, Av) - np.einsum("ki,kij->kj", P, Bv)
                - np.einsum("ki,kij->kj", Q, Cv))

    return kernel


def _triangle_seed(dom: Domain, blk, ft: FTerms, n):
    an = dom.arc_nodes
    k = blk.arc
    sl = an.slices[k]
    dmu = np.diff(an.mu[sl])
    F1 = ft.F1[sl]
    cum = np.zeros((sl.stop - sl.start, n))
    cum[1:] = np.cumsum(0.5 * dmu[:, None] * (F1[1:] + F1[:-1]), axis=0)
    ni, nj = blk.i1 - blk.i0 + 1, blk.j1 - blk.j0 + 1
    col_idx = np.array([an.col_node[(k, i)] - sl.start for i in range(blk.i0, blk.i1 + 1)])
    row_idx = np.array([an.row_node[(k, j)] - sl.start for j in range(blk.j0, blk.j1 + 1)])
    psi0 = cum[col_idx][:, None, :] - cum[row_idx][None, :, :]
    n1 = an.normal[sl][:, 0]
    n2 = an.normal[sl][:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ps = -F1[col_idx] / n2[col_idx][:, None]
        qt = -F1[row_idx] / n1[row_idx][:, None]
    ps = _repair(ps)
    qt = _repair(qt)
    P0 = np.broadcast_to(ps[:, None, :], (ni, nj, n)).copy()
    Q0 = np.broadcast_to(qt[None, :, :], (ni, nj, n)).copy()
    return psi0, P0, Q0


def _repair(v):
    """Replace non-finite entries (zero normal component at an arc end) by the nearest finite one."""
    bad = ~np.isfinite(v).all(axis=-1) | (np.abs(v).max(axis=-1) > 1e12)
    if bad.any() and (~bad).any():
        good = np.nonzero(~bad)[0]
        for k in np.nonzero(bad)[0]:
            v[k] = v[good[np.argmin(np.abs(good - k))]]
    return v


def sweep_costate(dom: Domain, spec: ControlProblem, state: StateSolution, u=None, fterms=None,
                  tol=1e-12, max_iter=300) -> CostateSolution:
    """Zone-ordered solve of the co-state on every block of the domain."""
    ft = compute_F_terms(dom, spec, state, u) if fterms is None else fterms
    coef = _coef_fields(dom, spec, state)
    lines = _Lines(dom, spec, state, ft, coef)
    n = spec.n
    inside = dom.grid.inside
    order = sorted((b for b in dom.blocks if b.kind != "out"), key=lambda b: (b.zone, b.index))
    by_corner = {(b.i0, b.j0): b for b in dom.blocks if b.kind != "out"}
    solved, meta = {}, {}
    flat_cache = {}
    for blk in order:
        bsl = (slice(blk.i0, blk.i1 + 1), slice(blk.j0, blk.j1 + 1))
        valid = inside[bsl]
        kernel = _kernel_factory(coef, bsl, valid, ft.F)
        reg = Region(dom, blk.i0, blk.i1, blk.j0, blk.j1, "backward")
        if blk.kind == "tri":
            seed = _triangle_seed(dom, blk, ft, n)
            ghost = reg.local_stencil(dom.ghosts)
            mismatch = 0.0
        else:
            top, top_d = _edge(dom, lines, solved, by_corner, blk, "top", flat_cache)
            right, right_d = _edge(dom, lines, solved, by_corner, blk, "right", flat_cache)
            mismatch = float(np.abs(top[-1] - right[-1]).max())
            psi0 = top[:, None, :] + right[None, :, :] - top[-1]
            P0 = np.broadcast_to(top_d[:, None, :], psi0.shape).copy()
            Q0 = np.broadcast_to(right_d[None, :, :], psi0.shape).copy()
            seed = (psi0, P0, Q0)
            ghost = None
        res = picard_solve(VolterraSystem(reg, kernel, seed, valid, ghost, spec.dynamics.lipschitz_hint),
                           tol, max_iter)
        out = []
        for v in (res.psi, res.P, res.Q):
            v = np.where(valid[..., None], v, 0.0)
            if ghost is not None:
                ghost.apply(v, out=v)
            out.append(v)
        solved[blk.index] = tuple(out)
        meta[blk.index] = {"label": blk.label, "zone": blk.zone, "iterations": res.iterations,
                           "corner_mismatch": mismatch}
    limits = {r: lines.limits(r) for r in range(1, len(dom.vertices) - 1)}
    return CostateSolution(solved, meta, limits, ft, coef)


def _edge(dom, lines, solved, by_corner, blk, side, flat_cache):
    """Co-state and its derivative along the top (over i) or right (over j) edge of a block."""
    if side == "top":
        nb = by_corner.get((blk.i0, blk.j1))
        if nb is not None:
            if nb.index not in solved:
                raise ZoneOrderViolation(f"{nb.label} needed by {blk.label} is not solved yet")
            psi, P, _ = solved[nb.index]
            om, dom_ = lines.jump_profile("S", blk.j1)
            rng = slice(blk.i0, blk.i1 + 1)
            return psi[:, 0] + om[rng], P[:, 0] + dom_[rng]
        k = _flat_arc(dom, "flat_s", blk, side)
        if k not in flat_cache:
            flat_cache[k] = lines.flat_ode(k)
        (idx_i, _), psi, d = flat_cache[k]
        order = np.argsort(idx_i)
        idx_i, psi, d = idx_i[order], psi[order], d[order]
        sel = (idx_i >= blk.i0) & (idx_i <= blk.i1)
        return psi[sel], d[sel]
    nb = by_corner.get((blk.i1, blk.j0))
    if nb is not None:
        if nb.index not in solved:
            raise ZoneOrderViolation(f"{nb.label} needed by {blk.label} is not solved yet")
        psi, _, Q = solved[nb.index]
        om, dom_ = lines.jump_profile("T", blk.i1)
        rng = slice(blk.j0, blk.j1 + 1)
        return psi[0, :] + om[rng], Q[0, :] + dom_[rng]
    k = _flat_arc(dom, "flat_t", blk, side)
    if k not in flat_cache:
        flat_cache[k] = lines.flat_ode(k)
    (_, idx_j), psi, d = flat_cache[k]
    sel = (idx_j >= blk.j0) & (idx_j <= blk.j1)
    return psi[sel], d[sel]


def _flat_arc(dom, kind, blk, side):
    s, t = dom.grid.s_nodes, dom.grid.t_nodes
    for k, arc in enumerate(dom.arcs):
        if arc.kind != kind:
            continue
        (s0, t0), (s1, t1) = arc.endpoints
        if kind == "flat_s" and abs(t0 - t[blk.j1]) <= TOL_GEOM and s1 <= s[blk.i0] + TOL_GEOM \
                and s0 >= s[blk.i1] - TOL_GEOM:
            return k
        if kind == "flat_t" and abs(s0 - s[blk.i1]) <= TOL_GEOM and t0 <= t[blk.j0] + TOL_GEOM \
                and t1 >= t[blk.j1] - TOL_GEOM:
            return k
    raise MissingVertexLimit(f"no flat arc bounds {blk.label} on its {side} side")


# ---------------------------------------------------------------------------
# diagnostics and export
# ---------------------------------------------------------------------------


def _hamiltonian_residual(dom, spec, state, coef, ft, psi, bsl, full_cells):
    """Cell-centred residual of psi_st = H_x - D_s H_p - D_t H_q on one sheet."""
    S, T = dom.grid.mesh()
    args = (S[bsl], T[bsl], state.x[bsl], state.x_s[bsl], state.x_t[bsl], state.u[bsl])
    Hx = spec.Phi_partial("x", *args) + np.einsum("...i,...ij->...j", psi, coef["x"][bsl])
    Hp = spec.Phi_partial("p", *args) + np.einsum("...i,...ij->...j", psi, coef["p"][bsl])
    Hq = spec.Phi_partial("q", *args) + np.einsum("...i,...ij->...j", psi, coef["q"][bsl])
    s, t = S[bsl][:, 0], T[bsl][0]
    hs = np.diff(s)[:, None, None]
    ht = np.diff(t)[None, :, None]
    psi_st = (psi[1:, 1:] - psi[1:, :-1] - psi[:-1, 1:] + psi[:-1, :-1]) / (hs * ht)
    hx = 0.25 * (Hx[1:, 1:] + Hx[1:, :-1] + Hx[:-1, 1:] + Hx[:-1, :-1])
    dhp = (Hp[1:, 1:] + Hp[1:, :-1] - Hp[:-1, 1:] - Hp[:-1, :-1]) / (2 * hs)
    dhq = (Hq[1:, 1:] + Hq[:-1, 1:] - Hq[1:, :-1] - Hq[:-1, :-1]) / (2 * ht)
    res = np.abs(psi_st - (hx - dhp - dhq)).max(axis=-1)
    res = np.where(full_cells, res, 0.0)
    area = (hs * ht)[..., 0]
    return res, area


def verify_hamiltonian_pde(dom: Domain, spec: ControlProblem, state: StateSolution, costate: CostateSolution,
                           u=None, merge_sheets=False):
    """Finite-difference residual of the Hamiltonian equation on full cells.

    With merge_sheets=True every node takes the value of the last block
    containing it, so cells next to a vertex line mix sheets (negative control)."""
    coef, ft = costate.coef, costate.fterms
    inside = dom.grid.inside
    report = {"blocks": {}}
    sup, l2 = 0.0, 0.0
    if merge_sheets:
        merged = np.zeros(dom.grid.shape + (spec.n,))
        for b, (psi, _, _) in sorted(costate.blocks.items()):
            blk = dom.blocks[b]
            bsl = (slice(blk.i0, blk.i1 + 1), slice(blk.j0, blk.j1 + 1))
            merged[bsl] = np.where(inside[bsl][..., None], psi, merged[bsl])
        full = inside[1:, 1:]
        res, area = _hamiltonian_residual(dom, spec, state, coef, ft, merged, (slice(None), slice(None)), full)
        return {"sup": float(res.max()), "l2": float(np.sqrt((res ** 2 * area).sum())), "residual": res}
    for b, (psi, _, _) in costate.blocks.items():
        blk = dom.blocks[b]
        bsl = (slice(blk.i0, blk.i1 + 1), slice(blk.j0, blk.j1 + 1))
        full = inside[bsl][1:, 1:]
        res, area = _hamiltonian_residual(dom, spec, state, coef, ft, psi, bsl, full)
        bsup = float(res.max()) if res.size else 0.0
        bl2 = float((res ** 2 * area).sum())
        report["blocks"][blk.label] = {"sup": bsup, "l2": float(np.sqrt(bl2))}
        sup = max(sup, bsup)
        l2 += bl2
    report["sup"] = sup
    report["l2"] = float(np.sqrt(l2))
    return report


def write_costate_csv(path, dom: Domain, costate: CostateSolution):
    """Columns: s, t, region id, sheet, psi components."""
    rows = []
    n = None
    for b in sorted(costate.blocks):
        psi = costate.blocks[b][0]
        n = psi.shape[-1]
        blk = dom.blocks[b]
        for i in range(blk.i0, blk.i1 + 1):
            for j in range(blk.j0, blk.j1 + 1):
                if dom.grid.inside[i, j]:
                    v = psi[i - blk.i0, j - blk.j0]
                    rows.append([fmt(dom.grid.s_nodes[i]), fmt(dom.grid.t_nodes[j]), blk.label, b]
                                + [fmt(x) for x in v])
    header = ["s", "t", "region", "sheet"] + [f"psi_{k}" for k in range(n or 0)]
    return write_csv(path, header, rows)


def regular_checkpoints(dom: Domain, count, seed=0):
    """Random interior grid nodes of the regular part (off every vertex line)."""
    grid = dom.grid
    ok = grid.inside & (grid.mask == 1)
    S, T = grid.mesh()
    for lv in dom.s_levels:
        ok &= np.abs(S - lv) > TOL_GEOM
    for lv in dom.t_levels:
        ok &= np.abs(T - lv) > TOL_GEOM
    cand = np.argwhere(ok)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(cand), size=min(count, len(cand)), replace=False))
    return [tuple(int(k) for k in cand[p]) for p in pick]


def compare_sweep_quadrature(dom: Domain, spec: ControlProblem, state: StateSolution, u=None, count=20, seed=0,
                             costate: CostateSolution | None = None):
    """Sweep co-state against the quadrature oracle at random regular checkpoints.

    max_relative_error is max |sweep - quadrature| over the checkpoints divided
    by max |quadrature| over the same set.  The pointwise ratio is reported as
    well; it is ill-conditioned next to oblique arcs, where psi vanishes."""
    ft = compute_F_terms(dom, spec, state, u)
    cs = sweep_costate(dom, spec, state, u, ft) if costate is None else costate
    rows = []
    for node in regular_checkpoints(dom, count, seed):
        q = costate_by_quadrature(dom, spec, state, u, node, ft)
        sw = cs.value(dom, node)
        scale = np.where(np.abs(q) > 0, np.abs(q), 1.0)
        rows.append({"node": node, "s": float(dom.grid.s_nodes[node[0]]), "t": float(dom.grid.t_nodes[node[1]]),
                     "sweep": sw.tolist(), "quadrature": q.tolist(),
                     "absolute_error": float(np.max(np.abs(sw - q))),
                     "relative_error": float(np.max(np.abs(sw - q) / scale))})
    worst_abs = max((r["absolute_error"] for r in rows), default=0.0)
    size = max((float(np.max(np.abs(r["quadrature"]))) for r in rows), default=0.0)
    return {"checkpoints": rows, "max_absolute_error": worst_abs, "scale": size,
            "max_relative_error": worst_abs / size if size > 0 else worst_abs,
            "max_pointwise_relative_error": max((r["relative_error"] for r in rows), default=0.0),
            "seed": seed, "count": len(rows)}
