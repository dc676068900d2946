"""Domains bounded by a non-increasing curve, tensor grids and quadrature.

The domain G lies in the quadrant s >= 0, t >= 0 and is bounded by the two
axes and a curve running counterclockwise from (a, 0) to (0, b) along which
s never increases and t never decreases.  G is therefore a lower set: with a
point it contains every point below and to the left of it.

The grid is a tensor product of node lists containing every vertex
coordinate.  Vertex coordinate lines cut the bounding box into blocks; each
block is a full rectangle inside G, a curvilinear triangle cut by one oblique
arc, or lies outside G.  All quadrature is expressed through fixed weight
arrays on that grid:

* cell weights: the integral over the part of cell (i, j) inside G of the
  bilinear interpolant of the four corner values;
* segment weights: the integral along grid lines clipped at the curve.

Nodes outside G that are corners of cut cells ("ghost" nodes) carry values
extrapolated from inside nodes of the same block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import PchipInterpolator

from .errors import (
    AtVertex,
    DisconnectedCurve,
    NonMonotoneBoundary,
    NotOnBoundary,
    OutsideDomain,
)

TOL_GEOM = 1e-10

LL, LR, UL, UR = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# parametric curves
# ---------------------------------------------------------------------------


class Curve:
    """Parametric curve c(lam), lam in [0, 1], with derivative."""

    def point(self, lam):
        raise NotImplementedError

    def tangent(self, lam):
        raise NotImplementedError


class SegmentCurve(Curve):
    def __init__(self, start, end):
        self.start = np.asarray(start, float)
        self.end = np.asarray(end, float)

    def point(self, lam):
        lam = np.asarray(lam, float)
        return self.start + np.multiply.outer(lam, self.end - self.start)

    def tangent(self, lam):
        lam = np.asarray(lam, float)
        return np.broadcast_to(self.end - self.start, lam.shape + (2,)).copy()


class CircleCurve(Curve):
    def __init__(self, center, radius, start_angle, end_angle):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.a0 = float(start_angle)
        self.a1 = float(end_angle)

    def point(self, lam):
        ang = self.a0 + np.asarray(lam, float) * (self.a1 - self.a0)
        return self.center + self.radius * np.stack([np.cos(ang), np.sin(ang)], -1)

    def tangent(self, lam):
        ang = self.a0 + np.asarray(lam, float) * (self.a1 - self.a0)
        d = (self.a1 - self.a0) * self.radius
        return d * np.stack([-np.sin(ang), np.cos(ang)], -1)


class GraphCurve(Curve):
    """t = theta2(s) traversed from s_start down to s_end."""

    def __init__(self, theta2, s_start, s_end, dtheta2=None):
        self.theta2 = theta2
        self.dtheta2 = dtheta2
        self.s0 = float(s_start)
        self.s1 = float(s_end)

    def point(self, lam):
        s = self.s0 + np.asarray(lam, float) * (self.s1 - self.s0)
        return np.stack([s, np.asarray(self.theta2(s), float) + 0 * s], -1)

    def tangent(self, lam):
        s = self.s0 + np.asarray(lam, float) * (self.s1 - self.s0)
        if self.dtheta2 is not None:
            dt = np.asarray(self.dtheta2(s), float) + 0 * s
        else:
            hstep = 1e-6 * max(1.0, abs(self.s0 - self.s1))
            lo = np.clip(s - hstep, min(self.s0, self.s1), max(self.s0, self.s1))
            hi = np.clip(s + hstep, min(self.s0, self.s1), max(self.s0, self.s1))
            dt = (np.asarray(self.theta2(hi)) - np.asarray(self.theta2(lo))) / (hi - lo)
        ds = self.s1 - self.s0
        return np.stack([ds + 0 * s, dt * ds], -1)


class TabulatedCurve(Curve):
    """Monotone piecewise-cubic curve through sample points."""

    def __init__(self, points):
        pts = np.asarray(points, float)
        chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        lam = chord / chord[-1]
        self._cs = PchipInterpolator(lam, pts[:, 0])
        self._ct = PchipInterpolator(lam, pts[:, 1])

    def point(self, lam):
        lam = np.asarray(lam, float)
        return np.stack([self._cs(lam), self._ct(lam)], -1)

    def tangent(self, lam):
        lam = np.asarray(lam, float)
        return np.stack([self._cs(lam, 1), self._ct(lam, 1)], -1)


# named closed-form curves usable from configuration files
NAMED_CURVES: dict[str, Callable[..., Curve]] = {}


def _register_named_curves():
    NAMED_CURVES["quarter_circle"] = lambda radius=1.0: CircleCurve((0, 0), radius, 0.0, math.pi / 2)
    NAMED_CURVES["ellipse"] = lambda a=1.0, b=1.0: _EllipseCurve(a, b)


class _EllipseCurve(Curve):
    def __init__(self, a, b):
        self.a, self.b = float(a), float(b)

    def point(self, lam):
        ang = np.asarray(lam, float) * math.pi / 2
        return np.stack([self.a * np.cos(ang), self.b * np.sin(ang)], -1)

    def tangent(self, lam):
        ang = np.asarray(lam, float) * math.pi / 2
        return (math.pi / 2) * np.stack([-self.a * np.sin(ang), self.b * np.cos(ang)], -1)


_register_named_curves()


def curve_from_spec(spec) -> Curve:
    """Build a curve from a dict description or pass a Curve through."""
    if isinstance(spec, Curve):
        return spec
    kind = spec.get("kind")
    if kind == "segment":
        return SegmentCurve(spec["start"], spec["end"])
    if kind == "circle":
        return CircleCurve(spec.get("center", (0.0, 0.0)), spec["radius"],
                           spec["start_angle"], spec["end_angle"])
    if kind == "graph":
        return GraphCurve(spec["theta2"], spec["s_start"], spec["s_end"], spec.get("dtheta2"))
    if kind == "tabulated":
        return TabulatedCurve(spec["points"])
    if kind == "named":
        name = spec["name"]
        if name not in NAMED_CURVES:
            raise ValueError(f"unknown curve id {name!r}")
        return NAMED_CURVES[name](**spec.get("params", {}))
    raise ValueError(f"unknown arc kind {kind!r}")


# ---------------------------------------------------------------------------
# boundary arcs
# ---------------------------------------------------------------------------


def _brentq_monotone(fun, lo, hi):
    flo, fhi = fun(lo), fun(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if flo * fhi > 0:
        return lo if abs(flo) < abs(fhi) else hi
    return optimize.brentq(fun, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


@dataclass
class BoundaryArc:
    """Portion lam in [lam0, lam1] of a curve, traversed counterclockwise."""

    curve: Curve
    lam0: float
    lam1: float
    kind: str = "oblique"  # flat_s, flat_t or oblique
    mu_start: float = 0.0
    length: float = 0.0

    @property
    def endpoints(self):
        return (self.point(self.lam0), self.point(self.lam1))

    @property
    def mu_range(self):
        return (self.mu_start, self.mu_start + self.length)

    def point(self, lam):
        return np.asarray(self.curve.point(lam), float)

    def tangent(self, lam):
        return np.asarray(self.curve.tangent(lam), float)

    def normal(self, lam):
        tan = self.tangent(lam)
        nrm = np.hypot(tan[..., 0], tan[..., 1])
        return np.stack([tan[..., 1], -tan[..., 0]], -1) / nrm[..., None]

    def speed(self, lam):
        tan = self.tangent(lam)
        return np.hypot(tan[..., 0], tan[..., 1])

    def compute_length(self):
        val, _ = integrate.quad(lambda x: float(self.speed(x)), self.lam0, self.lam1,
                                limit=200, epsabs=1e-13, epsrel=1e-12)
        return val

    def lam_at_s(self, sigma):
        return _brentq_monotone(lambda x: float(self.point(x)[0]) - sigma, self.lam0, self.lam1)

    def lam_at_t(self, tau):
        return _brentq_monotone(lambda x: float(self.point(x)[1]) - tau, self.lam0, self.lam1)

    def theta2(self, sigma):
        """t-coordinate of the arc above abscissa sigma."""
        if self.kind == "flat_t":
            raise ValueError("vertical arc is not a graph over s")
        sig = np.atleast_1d(np.asarray(sigma, float))
        out = np.array([self.point(self.lam_at_s(x))[1] for x in sig])
        return out if np.ndim(sigma) else float(out[0])

    def theta1(self, tau):
        """s-coordinate of the arc at ordinate tau."""
        if self.kind == "flat_s":
            raise ValueError("horizontal arc is not a graph over t")
        tt = np.atleast_1d(np.asarray(tau, float))
        out = np.array([self.point(self.lam_at_t(x))[0] for x in tt])
        return out if np.ndim(tau) else float(out[0])

    def lam_at_mu(self, mu_local):
        if mu_local <= 0:
            return self.lam0
        if mu_local >= self.length:
            return self.lam1

        def fun(x):
            val, _ = integrate.quad(lambda y: float(self.speed(y)), self.lam0, x, limit=200)
            return val - mu_local

        return optimize.brentq(fun, self.lam0, self.lam1, xtol=1e-14)


# ---------------------------------------------------------------------------
# grid and blocks
# ---------------------------------------------------------------------------


@dataclass
class Grid:
    """Tensor grid.  mask codes: 0 outside, 1 interior, 2 on an oblique arc,
    3 on a flat boundary part or an axis."""

    s_nodes: np.ndarray
    t_nodes: np.ndarray
    mask: np.ndarray
    inside: np.ndarray
    ghost: np.ndarray

    @property
    def shape(self):
        return (len(self.s_nodes), len(self.t_nodes))

    def mesh(self):
        return np.meshgrid(self.s_nodes, self.t_nodes, indexing="ij")

    def node_index(self, point, tol=1e-9):
        i = int(np.argmin(np.abs(self.s_nodes - point[0])))
        j = int(np.argmin(np.abs(self.t_nodes - point[1])))
        if abs(self.s_nodes[i] - point[0]) > tol or abs(self.t_nodes[j] - point[1]) > tol:
            raise ValueError(f"point {tuple(point)} is not a grid node")
        return i, j


@dataclass
class Block:
    """Sub-rectangle between consecutive vertex levels (node ranges inclusive)."""

    index: int
    i0: int
    i1: int
    j0: int
    j1: int
    kind: str  # rect, tri, out
    arc: int = -1
    pj: int = -1  # staircase index j (t-range [t_j, t_{j+1}])
    pk: int = -1  # staircase index k (s-range [s_{k+1}, s_k])

    @property
    def zone(self):
        return self.pk - self.pj

    @property
    def label(self):
        if self.kind == "tri":
            return f"D_{self.pj}"
        return f"Q_{self.pj},{self.pk}"


@dataclass
class ArcNodes:
    """Quadrature nodes on the curve in counterclockwise order.

    Values at node k are (1 - theta) * v[i0, j0] + theta * v[i1, j1].
    A vertex shared by two arcs appears twice (once per arc)."""

    pos: np.ndarray
    arc: np.ndarray
    normal: np.ndarray
    i0: np.ndarray
    j0: np.ndarray
    i1: np.ndarray
    j1: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    slices: list
    col_node: dict = field(default_factory=dict)  # (arc, i) -> node index
    row_node: dict = field(default_factory=dict)  # (arc, j) -> node index

    def __len__(self):
        return len(self.pos)

    def sample(self, grid_field):
        v = np.asarray(grid_field)
        th = self.theta.reshape((-1,) + (1,) * (v.ndim - 2))
        return (1 - th) * v[self.i0, self.j0] + th * v[self.i1, self.j1]

    def seg_lengths(self):
        return np.diff(self.mu)


@dataclass
class GhostStencil:
    """Ghost node g gets sum_k coef[g, k] * v[src_i[g, k], src_j[g, k]]."""

    gi: np.ndarray
    gj: np.ndarray
    src_i: np.ndarray
    src_j: np.ndarray
    coef: np.ndarray

    def apply(self, v, out=None):
        v = np.array(v, copy=True) if out is None else out
        if len(self.gi) == 0:
            return v
        cshape = self.coef.shape + (1,) * (v.ndim - 2)
        vals = (self.coef.reshape(cshape) * v[self.src_i, self.src_j]).sum(axis=1)
        v[self.gi, self.gj] = vals
        return v

    def transpose_add(self, w):
        """Move weights sitting on ghost nodes onto their source nodes."""
        w = np.array(w, copy=True)
        if len(self.gi) == 0:
            return w
        wg = w[self.gi, self.gj].copy()
        w[self.gi, self.gj] = 0.0
        cshape = self.coef.shape + (1,) * (w.ndim - 2)
        contrib = self.coef.reshape(cshape) * wg[:, None]
        np.add.at(w, (self.src_i, self.src_j), contrib)
        return w


@dataclass
class Zones:
    triangles: list
    rectangles: list
    zone_of: dict


@dataclass
class VertexSets:
    point: tuple
    T_set: list
    S_set: list
    L_s: tuple | None
    L_t: tuple | None

    @property
    def V_set(self):
        return self.T_set + self.S_set + [self.point]

    @property
    def L_set(self):
        return [seg for seg in (self.L_s, self.L_t) if seg is not None] + [self.point]


class Domain:
    """Immutable domain with grid, blocks, quadrature weights and arc nodes."""

    def __init__(self, arcs, h_max, refine_s=(), refine_t=(), s_nodes=None, t_nodes=None):
        self.arcs: list[BoundaryArc] = arcs
        verts = [arcs[0].endpoints[0]] + [arc.endpoints[1] for arc in arcs]
        self.vertices = np.array(verts, float)
        self.a = float(self.vertices[0, 0])
        self.b = float(self.vertices[-1, 1])
        self.h_max = float(h_max)
        mu = 0.0
        for arc in arcs:
            arc.mu_start = mu
            arc.length = arc.compute_length()
            mu += arc.length
        self.total_length = mu
        self.s_levels = _unique_levels(self.vertices[:, 0])
        self.t_levels = _unique_levels(self.vertices[:, 1])
        s = _build_nodes(self.s_levels, h_max, refine_s) if s_nodes is None else _merge_nodes(s_nodes, self.s_levels)
        t = _build_nodes(self.t_levels, h_max, refine_t) if t_nodes is None else _merge_nodes(t_nodes, self.t_levels)
        self._build_grid(s, t)
        self._build_blocks()
        self._build_weights()
        self.ghosts = self.ghost_stencil(self.grid.inside)
        self.grid.ghost[self.ghosts.gi, self.ghosts.gj] = True
        self._build_arc_nodes()

    # -- boundary envelope -------------------------------------------------

    def top(self, sigma):
        """Largest t with (sigma, t) on the curve (sigma in [0, a])."""
        best = -np.inf
        for arc in self.arcs:
            (s0, t0), (s1, t1) = arc.endpoints
            if not (min(s0, s1) - TOL_GEOM <= sigma <= max(s0, s1) + TOL_GEOM):
                continue
            if arc.kind == "flat_t":
                cand = max(t0, t1)
            elif arc.kind == "flat_s":
                cand = t0
            else:
                cand = arc.theta2(min(max(sigma, s1), s0))
            best = max(best, cand)
        if best == -np.inf:
            raise OutsideDomain(f"abscissa {sigma} outside [0, {self.a}]")
        return float(best)

    def right(self, tau):
        """Largest s with (s, tau) on the curve (tau in [0, b])."""
        best = -np.inf
        for arc in self.arcs:
            (s0, t0), (s1, t1) = arc.endpoints
            if not (min(t0, t1) - TOL_GEOM <= tau <= max(t0, t1) + TOL_GEOM):
                continue
            if arc.kind == "flat_s":
                cand = max(s0, s1)
            elif arc.kind == "flat_t":
                cand = s0
            else:
                cand = arc.theta1(min(max(tau, t0), t1))
            best = max(best, cand)
        if best == -np.inf:
            raise OutsideDomain(f"ordinate {tau} outside [0, {self.b}]")
        return float(best)

    def contains(self, point, tol=TOL_GEOM):
        s, t = float(point[0]), float(point[1])
        if s < -tol or t < -tol or s > self.a + tol or t > self.b + tol:
            return False
        return t <= self.top(min(max(s, 0.0), self.a)) + tol

    # -- construction helpers ---------------------------------------------

    def _build_grid(self, s, t):
        self.top_col = np.array([self.top(x) for x in s])
        self.right_row = np.array([self.right(y) for y in t])
        inside = t[None, :] <= self.top_col[:, None] + TOL_GEOM
        mask = np.where(inside, 1, 0)
        on_top = np.abs(t[None, :] - self.top_col[:, None]) <= TOL_GEOM
        on_right = np.abs(s[:, None] - self.right_row[None, :]) <= TOL_GEOM
        on_curve = inside & (on_top | on_right)
        mask[on_curve] = 2
        # flat parts and axes
        for arc in self.arcs:
            if arc.kind == "oblique":
                continue
            (s0, t0), (s1, t1) = arc.endpoints
            sel = ((s[:, None] >= min(s0, s1) - TOL_GEOM) & (s[:, None] <= max(s0, s1) + TOL_GEOM)
                   & (t[None, :] >= min(t0, t1) - TOL_GEOM) & (t[None, :] <= max(t0, t1) + TOL_GEOM))
            mask[sel & inside] = 3
        mask[0, :][inside[0, :]] = 3
        mask[:, 0][inside[:, 0]] = 3
        self.grid = Grid(s, t, mask, inside, np.zeros_like(inside))

    def _build_blocks(self):
        s, t = self.grid.s_nodes, self.grid.t_nodes
        si = [int(np.argmin(np.abs(s - lv))) for lv in self.s_levels]
        tj = [int(np.argmin(np.abs(t - lv))) for lv in self.t_levels]
        self.s_level_idx, self.t_level_idx = si, tj
        blocks = []
        self.block_of_cell = -np.ones((len(s) - 1, len(t) - 1), int)
        verts = self.vertices
        for a in range(len(si) - 1):
            for b in range(len(tj) - 1):
                smid = 0.5 * (self.s_levels[a] + self.s_levels[a + 1])
                tmid = 0.5 * (self.t_levels[b] + self.t_levels[b + 1])
                if not self.contains((smid, tmid), tol=0.0):
                    kind, arc_id = "out", -1
                elif self.contains((self.s_levels[a + 1], self.t_levels[b + 1])):
                    kind, arc_id = "rect", -1
                else:
                    kind, arc_id = "tri", self._arc_between((self.s_levels[a + 1], self.t_levels[b]),
                                                             (self.s_levels[a], self.t_levels[b + 1]))
                # staircase indices: last vertex at the block's lower t level / right s level
                pj = max(r for r in range(len(verts)) if abs(verts[r, 1] - self.t_levels[b]) <= TOL_GEOM) \
                    if kind != "out" else -1
                pk = max(r for r in range(len(verts)) if abs(verts[r, 0] - self.s_levels[a + 1]) <= TOL_GEOM) \
                    if kind != "out" else -1
                blk = Block(len(blocks), si[a], si[a + 1], tj[b], tj[b + 1], kind, arc_id, pj, pk)
                blocks.append(blk)
                self.block_of_cell[si[a]:si[a + 1], tj[b]:tj[b + 1]] = blk.index
        self.blocks = blocks

    def _arc_between(self, p_start, p_end):
        for k, arc in enumerate(self.arcs):
            e0, e1 = arc.endpoints
            if np.allclose(e0, p_start, atol=1e-9) and np.allclose(e1, p_end, atol=1e-9):
                return k
        raise NonMonotoneBoundary("cut block without a single oblique arc between its corners")

    def _build_weights(self):
        s, t = self.grid.s_nodes, self.grid.t_nodes
        ns, nt = len(s), len(t)
        ds, dt = np.diff(s), np.diff(t)
        inside = self.grid.inside
        w = np.zeros((4, ns - 1, nt - 1))
        full = inside[1:, 1:]  # upper-right corner inside => whole cell inside
        area = np.outer(ds, dt)
        for c in range(4):
            w[c] = np.where(full, area / 4, 0.0)
        # column segments along t and row segments along s
        col_lo = np.zeros((ns, nt - 1))
        col_hi = np.zeros((ns, nt - 1))
        both = inside[:, 1:]
        col_lo[both] = np.broadcast_to(dt / 2, (ns, nt - 1))[both]
        col_hi[both] = np.broadcast_to(dt / 2, (ns, nt - 1))[both]
        row_lo = np.zeros((ns - 1, nt))
        row_hi = np.zeros((ns - 1, nt))
        bothr = inside[1:, :]
        row_lo[bothr] = np.broadcast_to(ds[:, None] / 2, (ns - 1, nt))[bothr]
        row_hi[bothr] = np.broadcast_to(ds[:, None] / 2, (ns - 1, nt))[bothr]
        self.cut_cells = []
        for blk in self.blocks:
            if blk.kind != "tri":
                continue
            arc = self.arcs[blk.arc]
            for i in range(blk.i0, blk.i1):
                for j in range(blk.j0, blk.j1):
                    if not inside[i, j] or inside[i + 1, j + 1]:
                        continue
                    w[:, i, j] = _cut_cell_weights(arc, s[i], s[i + 1], t[j], t[j + 1],
                                                   inside[i, j], inside[i + 1, j], inside[i, j + 1])
                    self.cut_cells.append((i, j, blk.index))
            # partial column segments (node j inside, j+1 outside)
            for i in range(blk.i0, blk.i1 + 1):
                for j in range(blk.j0, blk.j1):
                    if inside[i, j] and not inside[i, j + 1]:
                        tau = arc.theta2(min(max(s[i], self.s_levels_at(blk, 0)), self.s_levels_at(blk, 1)))
                        length = min(max(tau - t[j], 0.0), dt[j])
                        th = length / dt[j]
                        col_lo[i, j] = length * (2 - th) / 2
                        col_hi[i, j] = length * th / 2
            for j in range(blk.j0, blk.j1 + 1):
                for i in range(blk.i0, blk.i1):
                    if inside[i, j] and not inside[i + 1, j]:
                        sig = arc.theta1(min(max(t[j], t[blk.j0]), t[blk.j1]))
                        length = min(max(sig - s[i], 0.0), ds[i])
                        th = length / ds[i]
                        row_lo[i, j] = length * (2 - th) / 2
                        row_hi[i, j] = length * th / 2
        self.cell_w = w
        self.col_w = (col_lo, col_hi)
        self.row_w = (row_lo, row_hi)

    def s_levels_at(self, blk, which):
        return self.grid.s_nodes[blk.i0] if which == 0 else self.grid.s_nodes[blk.i1]

    def ghost_stencil(self, valid, region=None) -> GhostStencil:
        """Extrapolation stencil for outside corners of cut cells whose lower-left
        corner is valid.  Sources stay inside the cut cell's block and the valid set."""
        s, t = self.grid.s_nodes, self.grid.t_nodes
        inside = self.grid.inside
        ghosts = {}
        for (i, j, bidx) in self.cut_cells:
            if not valid[i, j]:
                continue
            for (gi, gj) in ((i + 1, j), (i, j + 1), (i + 1, j + 1)):
                if not inside[gi, gj]:
                    ghosts[(gi, gj)] = bidx
        gi_l, gj_l, si_l, sj_l, cf_l = [], [], [], [], []
        for (gi, gj), bidx in sorted(ghosts.items()):
            blk = self.blocks[bidx]
            stencils = []
            if gj - 2 >= blk.j0 and valid[gi, gj - 1] and valid[gi, gj - 2]:
                r = (t[gj] - t[gj - 1]) / (t[gj - 1] - t[gj - 2])
                stencils.append([((gi, gj - 1), 1 + r), ((gi, gj - 2), -r)])
            if gi - 2 >= blk.i0 and valid[gi - 1, gj] and valid[gi - 2, gj]:
                r = (s[gi] - s[gi - 1]) / (s[gi - 1] - s[gi - 2])
                stencils.append([((gi - 1, gj), 1 + r), ((gi - 2, gj), -r)])
            if not stencils:
                for nb in ((gi, gj - 1), (gi - 1, gj)):
                    if nb[0] >= blk.i0 and nb[1] >= blk.j0 and valid[nb]:
                        stencils.append([(nb, 1.0)])
            if not stencils and gi - 1 >= blk.i0 and gj - 1 >= blk.j0 and valid[gi - 1, gj - 1]:
                # diagonal: first-order Taylor from the lower-left node
                base = (gi - 1, gj - 1)
                st = [(base, 1.0)]
                if gi - 2 >= blk.i0 and valid[gi - 2, gj - 1]:
                    r = (s[gi] - s[gi - 1]) / (s[gi - 1] - s[gi - 2])
                    st = [(base, st[0][1] + r), ((gi - 2, gj - 1), -r)]
                if gj - 2 >= blk.j0 and valid[gi - 1, gj - 2]:
                    r = (t[gj] - t[gj - 1]) / (t[gj - 1] - t[gj - 2])
                    st = [(base, st[0][1] + r)] + st[1:] + [((gi - 1, gj - 2), -r)]
                stencils.append(st)
            entries = []
            for st in stencils:
                entries += [(nd, c / len(stencils)) for nd, c in st]
            entries += [((gi, gj), 0.0)] * (4 - len(entries))
            gi_l.append(gi)
            gj_l.append(gj)
            si_l.append([e[0][0] for e in entries])
            sj_l.append([e[0][1] for e in entries])
            cf_l.append([e[1] for e in entries])
        return GhostStencil(np.array(gi_l, int), np.array(gj_l, int),
                            np.array(si_l, int).reshape(-1, 4), np.array(sj_l, int).reshape(-1, 4),
                            np.array(cf_l, float).reshape(-1, 4))

    def _build_arc_nodes(self):
        s, t = self.grid.s_nodes, self.grid.t_nodes
        pos, arc_ids, normals, i0s, j0s, i1s, j1s, ths = [], [], [], [], [], [], [], []
        slices = []
        col_node, row_node = {}, {}
        for k, arc in enumerate(self.arcs):
            start = len(pos)
            (sa, ta), (sb, tb) = arc.endpoints
            entries = []  # (s, t, i0, j0, i1, j1, theta, normal, col, row)
            if arc.kind == "flat_t":
                i = _idx(s, sa)
                for j in range(_idx(t, ta), _idx(t, tb) + 1):
                    entries.append((s[i], t[j], i, j, i, j, 0.0, (1.0, 0.0), None, j))
            elif arc.kind == "flat_s":
                j = _idx(t, ta)
                for i in range(_idx(s, sa), _idx(s, sb) - 1, -1):
                    entries.append((s[i], t[j], i, j, i, j, 0.0, (0.0, 1.0), i, None))
            else:
                ia, ib = _idx(s, sa), _idx(s, sb)
                ja, jb = _idx(t, ta), _idx(t, tb)
                raw = [(sa, ta, ia, ja, ia, ja, 0.0, tuple(arc.normal(arc.lam0)), ia, ja)]
                for i in range(ib + 1, ia):
                    lam = arc.lam_at_s(s[i])
                    tau = float(arc.point(lam)[1])
                    m = int(np.searchsorted(t, tau + 1e-12) - 1)
                    if abs(t[m] - tau) <= 1e-12:
                        rec = (s[i], t[m], i, m, i, m, 0.0)
                    else:
                        rec = (s[i], tau, i, m, i, m + 1, (tau - t[m]) / (t[m + 1] - t[m]))
                    raw.append(rec + (tuple(arc.normal(lam)), i, None))
                for j in range(ja + 1, jb):
                    lam = arc.lam_at_t(t[j])
                    sig = float(arc.point(lam)[0])
                    m = int(np.searchsorted(s, sig + 1e-12) - 1)
                    if abs(s[m] - sig) <= 1e-12:
                        rec = (s[m], t[j], m, j, m, j, 0.0)
                    else:
                        rec = (sig, t[j], m, j, m + 1, j, (sig - s[m]) / (s[m + 1] - s[m]))
                    raw.append(rec + (tuple(arc.normal(lam)), None, j))
                raw.append((sb, tb, ib, jb, ib, jb, 0.0, tuple(arc.normal(arc.lam1)), ib, jb))
                raw.sort(key=lambda e: (-e[0], e[1]))
                for e in raw:
                    if entries and math.hypot(e[0] - entries[-1][0], e[1] - entries[-1][1]) <= 1e-12:
                        prev = entries[-1]
                        entries[-1] = prev[:8] + (prev[8] if prev[8] is not None else e[8],
                                                  prev[9] if prev[9] is not None else e[9])
                        continue
                    entries.append(e)
            for e in entries:
                idx = len(pos)
                pos.append((e[0], e[1]))
                arc_ids.append(k)
                i0s.append(e[2]); j0s.append(e[3]); i1s.append(e[4]); j1s.append(e[5])
                ths.append(e[6])
                normals.append(e[7])
                if e[8] is not None:
                    col_node[(k, e[8])] = idx
                if e[9] is not None:
                    row_node[(k, e[9])] = idx
            slices.append(slice(start, len(pos)))
        pos = np.array(pos, float)
        mu = np.zeros(len(pos))
        arc_arr = np.array(arc_ids, int)
        for k in range(1, len(pos)):
            step = math.hypot(*(pos[k] - pos[k - 1])) if arc_arr[k] == arc_arr[k - 1] else 0.0
            mu[k] = mu[k - 1] + step
        self.arc_nodes = ArcNodes(pos, arc_arr, np.array(normals, float), np.array(i0s, int),
                                  np.array(j0s, int), np.array(i1s, int), np.array(j1s, int),
                                  np.array(ths, float), mu, slices, col_node, row_node)

    # -- quadrature primitives --------------------------------------------

    def fill_ghosts(self, v, stencil=None, valid=None):
        """Zero values at invalid nodes, then extrapolate ghost values."""
        st = self.ghosts if stencil is None else stencil
        ok = self.grid.inside if valid is None else valid
        v = np.where(ok.reshape(ok.shape + (1,) * (np.ndim(v) - 2)), v, 0.0)
        return st.apply(v, out=v)

    def cell_integrals(self, v):
        """Integral over the in-domain part of each cell (ghosts must be filled)."""
        w = self.cell_w
        ex = (slice(None), slice(None)) + (None,) * (np.ndim(v) - 2)
        return (w[LL][ex] * v[:-1, :-1] + w[LR][ex] * v[1:, :-1]
                + w[UL][ex] * v[:-1, 1:] + w[UR][ex] * v[1:, 1:])

    def col_segments(self, v):
        lo, hi = self.col_w
        ex = (slice(None), slice(None)) + (None,) * (np.ndim(v) - 2)
        return lo[ex] * v[:, :-1] + hi[ex] * v[:, 1:]

    def row_segments(self, v):
        lo, hi = self.row_w
        ex = (slice(None), slice(None)) + (None,) * (np.ndim(v) - 2)
        return lo[ex] * v[:-1, :] + hi[ex] * v[1:, :]

    def node_weights(self):
        """Lumped nodal weights on inside nodes: sum_n W[n] v[n] = integral of v."""
        ns, nt = self.grid.shape
        w = np.zeros((ns, nt))
        cw = self.cell_w
        w[:-1, :-1] += cw[LL]
        w[1:, :-1] += cw[LR]
        w[:-1, 1:] += cw[UL]
        w[1:, 1:] += cw[UR]
        return self.ghosts.transpose_add(w)

    def integrate_area(self, v):
        return self.cell_integrals(self.fill_ghosts(v)).sum(axis=(0, 1))

    def arc_integral_values(self, vals, start=0, stop=None):
        """Trapezoid rule in arc length over arc nodes start..stop (inclusive)."""
        stop = len(self.arc_nodes) - 1 if stop is None else stop
        if stop <= start:
            return 0.0 * np.asarray(vals)[0]
        dmu = np.diff(self.arc_nodes.mu[start:stop + 1])
        v = np.asarray(vals)[start:stop + 1]
        ex = (slice(None),) + (None,) * (v.ndim - 1)
        return (0.5 * dmu[ex] * (v[1:] + v[:-1])).sum(axis=0)

    def arc_span(self, target):
        """Indices of the first and last arc nodes of the sub-arc between A_t and B_s
        ((0, -1) when the sub-arc holds no node, e.g. for a target on the curve)."""
        pos = self.arc_nodes.pos
        sel = np.nonzero((pos[:, 0] >= target[0] - TOL_GEOM) & (pos[:, 1] >= target[1] - TOL_GEOM))[0]
        if len(sel) == 0:
            if not self.contains(target):
                raise OutsideDomain(f"target {tuple(target)} outside the domain")
            return 0, -1
        return int(sel[0]), int(sel[-1])

    # -- export ------------------------------------------------------------

    def to_json(self, n_samples=64):
        arcs = []
        for arc in self.arcs:
            lam = np.linspace(arc.lam0, arc.lam1, n_samples)
            arcs.append({"kind": arc.kind, "mu_range": list(arc.mu_range),
                         "samples": arc.point(lam).tolist()})
        return json.dumps({"a": self.a, "b": self.b, "vertices": self.vertices.tolist(),
                           "total_length": self.total_length, "arcs": arcs,
                           "s_nodes": self.grid.s_nodes.tolist(),
                           "t_nodes": self.grid.t_nodes.tolist()})


def _idx(nodes, x):
    return int(np.argmin(np.abs(nodes - x)))


def _unique_levels(vals):
    out = []
    for v in np.sort(vals):
        if not out or v - out[-1] > TOL_GEOM:
            out.append(float(v))
    return np.array(out)


def _build_nodes(levels, h_max, refine=()):
    breaks = set(levels.tolist())
    for lo, hi, _ in refine:
        for x in (lo, hi):
            if levels[0] < x < levels[-1]:
                breaks.add(float(x))
    breaks = _unique_levels(np.array(sorted(breaks)))
    nodes = [breaks[0]]
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        mid = 0.5 * (lo + hi)
        h = h_max
        for rlo, rhi, rh in refine:
            if rlo <= mid <= rhi:
                h = min(h, rh)
        n = max(1, int(math.ceil((hi - lo) / h - 1e-9)))
        nodes.extend(np.linspace(lo, hi, n + 1)[1:].tolist())
    return np.array(nodes)


def _merge_nodes(nodes, levels):
    return _unique_levels(np.concatenate([np.asarray(nodes, float), levels]))


def _cut_cell_weights(arc, s0, s1, t0, t1, in_ll, in_lr, in_ul):
    """Integrals of the four bilinear shape functions over the cell part inside G."""
    corners = [(s0, t0), (s1, t0), (s1, t1), (s0, t1)]
    inside = [in_ll, in_lr, False, in_ul]
    poly = []
    for k in range(4):
        p, q = corners[k], corners[(k + 1) % 4]
        if inside[k]:
            poly.append(p)
        if inside[k] != inside[(k + 1) % 4]:
            if p[1] == q[1]:  # horizontal edge
                x = arc.theta1(p[1])
                poly.append((min(max(x, s0), s1), p[1]))
            else:
                y = arc.theta2(p[0])
                poly.append((p[0], min(max(y, t0), t1)))
    hs, ht = s1 - s0, t1 - t0

    def shapes(pt):
        xi = (pt[0] - s0) / hs
        eta = (pt[1] - t0) / ht
        return np.array([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])

    out = np.zeros(4)
    p0 = np.array(poly[0])
    for k in range(1, len(poly) - 1):
        p1, p2 = np.array(poly[k]), np.array(poly[k + 1])
        area = 0.5 * abs((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
        mids = [(p0 + p1) / 2, (p1 + p2) / 2, (p2 + p0) / 2]
        out += area * sum(shapes(m) for m in mids) / 3
    return out


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _classify(arc: BoundaryArc):
    lam = np.linspace(arc.lam0, arc.lam1, 65)
    pts = arc.point(lam)
    ds = np.ptp(pts[:, 0])
    dt = np.ptp(pts[:, 1])
    if ds <= TOL_GEOM:
        return "flat_t"
    if dt <= TOL_GEOM:
        return "flat_s"
    tan = arc.tangent(0.5 * (lam[1:] + lam[:-1]))
    if np.any(np.abs(tan[1:-1, 0]) <= 1e-12) or np.any(np.abs(tan[1:-1, 1]) <= 1e-12):
        raise NonMonotoneBoundary("oblique arc contains a flat part; split it at a vertex")
    return "oblique"


def _check_monotone(arc: BoundaryArc):
    lam = np.linspace(arc.lam0, arc.lam1, 257)
    pts = arc.point(lam)
    if np.any(np.diff(pts[:, 0]) > 1e-12) or np.any(np.diff(pts[:, 1]) < -1e-12):
        raise NonMonotoneBoundary("curve must have non-increasing s and non-decreasing t")


def build_domain(arc_specs: Sequence, extra_vertices: Sequence = (), h_max: float = 1 / 32,
                 *, refine_s=(), refine_t=(), s_nodes=None, t_nodes=None) -> Domain:
    """Assemble a Domain from arc descriptions ordered counterclockwise.

    refine_s / refine_t are lists of (lo, hi, h) intervals meshed with spacing h.
    """
    curves = [curve_from_spec(sp) for sp in arc_specs]
    arcs = [BoundaryArc(c, 0.0, 1.0) for c in curves]
    for arc in arcs:
        _check_monotone(arc)
    for prev, nxt in zip(arcs[:-1], arcs[1:]):
        if np.hypot(*(prev.endpoints[1] - nxt.endpoints[0])) > TOL_GEOM * 100:
            raise DisconnectedCurve(f"arc ends at {prev.endpoints[1]} but next starts at {nxt.endpoints[0]}")
    first, last = arcs[0].endpoints[0], arcs[-1].endpoints[1]
    if abs(first[1]) > TOL_GEOM or abs(last[0]) > TOL_GEOM:
        raise DisconnectedCurve("curve must run from a point on the s-axis to a point on the t-axis")
    for v in extra_vertices:
        v = np.asarray(v, float)
        for k, arc in enumerate(arcs):
            (s0, t0), (s1, t1) = arc.endpoints
            if not (s1 - TOL_GEOM <= v[0] <= s0 + TOL_GEOM and t0 - TOL_GEOM <= v[1] <= t1 + TOL_GEOM):
                continue
            lam = arc.lam_at_s(v[0]) if abs(s0 - s1) > TOL_GEOM else arc.lam_at_t(v[1])
            if np.hypot(*(arc.point(lam) - v)) > 1e-8:
                continue
            if min(abs(lam - arc.lam0), abs(lam - arc.lam1)) < 1e-12:
                break
            arcs[k:k + 1] = [BoundaryArc(arc.curve, arc.lam0, lam), BoundaryArc(arc.curve, lam, arc.lam1)]
            break
        else:
            raise NotOnBoundary(f"extra vertex {tuple(v)} is not on the curve")
    for arc in arcs:
        arc.kind = _classify(arc)
    return Domain(arcs, h_max, refine_s, refine_t, s_nodes, t_nodes)


def rectangle_arcs(a=1.0, b=1.0):
    return [{"kind": "segment", "start": (a, 0.0), "end": (a, b)},
            {"kind": "segment", "start": (a, b), "end": (0.0, b)}]


def quarter_disk_arcs(radius=1.0):
    return [{"kind": "circle", "center": (0.0, 0.0), "radius": radius,
             "start_angle": 0.0, "end_angle": math.pi / 2}]


def staircase_arcs(points=((2, 0), (2, 1), (1, 1), (1, 2), (0, 2))):
    pts = [tuple(map(float, p)) for p in points]
    return [{"kind": "segment", "start": p, "end": q} for p, q in zip(pts[:-1], pts[1:])]


def corner_points(dom: Domain, point):
    """(A_t, B_s): curve points on the horizontal and vertical lines through point."""
    s, t = float(point[0]), float(point[1])
    if not dom.contains((s, t)):
        raise OutsideDomain(f"{(s, t)} is outside the domain")
    return (dom.right(t), t), (s, dom.top(s))


def _locate_mu(dom: Domain, mu):
    for k, arc in enumerate(dom.arcs):
        lo, hi = arc.mu_range
        if lo - TOL_GEOM <= mu <= hi + TOL_GEOM:
            if abs(mu - lo) <= 1e-9 or abs(mu - hi) <= 1e-9:
                raise AtVertex(f"arc length {mu} is a vertex parameter")
            return k, arc.lam_at_mu(mu - lo)
    raise NotOnBoundary(f"arc length {mu} outside [0, {dom.total_length}]")


def outward_normal(dom: Domain, mu: float):
    """Unit outward normal at arc-length parameter mu (not at a vertex)."""
    k, lam = _locate_mu(dom, mu)
    n = dom.arcs[k].normal(lam)
    return float(n[0]), float(n[1])


def point_at(dom: Domain, mu: float):
    k, lam = _locate_mu(dom, mu)
    p = dom.arcs[k].point(lam)
    return float(p[0]), float(p[1])


def directional_derivatives(phi_s, phi_t, n):
    """Tangential, normal and conjugate-normal derivatives."""
    n1, n2 = n
    return (-n2 * phi_s + n1 * phi_t, n1 * phi_s + n2 * phi_t, n2 * phi_s + n1 * phi_t)


def zone_decomposition(dom: Domain) -> Zones:
    """Triangles D_j and rectangles Q_{j,k} with zone index k - j."""
    triangles, rectangles, zone_of = [], [], {}
    verts = dom.vertices
    for j, arc in enumerate(dom.arcs):
        blk = next((b for b in dom.blocks if b.kind == "tri" and b.arc == j), None)
        rec = {"j": j, "arc": j, "corner": (float(verts[j + 1, 0]), float(verts[j, 1])),
               "degenerate": arc.kind != "oblique", "block": None if blk is None else blk.index}
        triangles.append(rec)
        zone_of[f"D_{j}"] = 0
    for blk in dom.blocks:
        if blk.kind != "rect":
            continue
        j, k = blk.pj, blk.pk
        corners = [(float(verts[k + 1, 0]), float(verts[j, 1])), (float(verts[k, 0]), float(verts[j, 1])),
                   (float(verts[k, 0]), float(verts[j + 1, 1])), (float(verts[k + 1, 0]), float(verts[j + 1, 1]))]
        rectangles.append({"j": j, "k": k, "corners": corners, "block": blk.index})
        zone_of[f"Q_{j},{k}"] = k - j
    return Zones(triangles, rectangles, zone_of)


def _values_on_grid(dom: Domain, fld, valid=None, stencil=None):
    s, t = dom.grid.mesh()
    if callable(fld):
        v = np.asarray(fld(s, t), float) + 0 * s
        ok = dom.grid.inside | dom.grid.ghost if valid is None else valid
        return np.where(ok, v, 0.0)
    return dom.fill_ghosts(np.asarray(fld, float), stencil=stencil, valid=valid)


def integrate_E(dom: Domain, fld, target) -> float:
    """Integral over E(target) = {(sigma, tau) in G: sigma >= s, tau >= t}.

    fld is a callable phi(sigma, tau) or an array of nodal values."""
    if not dom.contains(target):
        raise OutsideDomain(f"{tuple(target)} is outside the domain")
    i, j = dom.grid.node_index(target)
    v = _values_on_grid(dom, fld)
    return float(dom.cell_integrals(v)[i:, j:].sum())


def integrate_arc(dom: Domain, fld, target) -> float:
    """Arc-length integral over the sub-arc of the curve between A_t and B_s.

    fld is a callable phi(sigma, tau) or an array of nodal grid values."""
    if not dom.contains(target):
        raise OutsideDomain(f"{tuple(target)} is outside the domain")
    k0, k1 = dom.arc_span(target)
    if callable(fld):
        pos = dom.arc_nodes.pos
        vals = np.asarray(fld(pos[:, 0], pos[:, 1]), float) + 0 * pos[:, 0]
    else:
        vals = dom.arc_nodes.sample(dom.fill_ghosts(np.asarray(fld, float)))
    return float(dom.arc_integral_values(vals, k0, k1))


def locate_boundary_point(dom: Domain, point):
    """(arc index, vertex index or None) for a point on the curve."""
    p = np.asarray(point, float)
    for r, v in enumerate(dom.vertices):
        if np.hypot(*(v - p)) <= 1e-9:
            return (max(r - 1, 0) if r > 0 else 0), r
    for k, arc in enumerate(dom.arcs):
        (s0, t0), (s1, t1) = arc.endpoints
        if not (s1 - 1e-9 <= p[0] <= s0 + 1e-9 and t0 - 1e-9 <= p[1] <= t1 + 1e-9):
            continue
        lam = arc.lam_at_s(p[0]) if abs(s0 - s1) > TOL_GEOM else arc.lam_at_t(p[1])
        if np.hypot(*(arc.point(lam) - p)) <= 1e-8:
            return k, None
    raise NotOnBoundary(f"{tuple(point)} is not on the curve")


def vertex_sets(dom: Domain, point) -> VertexSets:
    """Vertex collections T, S and flat segments L_s, L_t attached to a curve point.

    L_s: maximal horizontal run of the curve preceding the point and ending at it.
    L_t: maximal vertical run following the point and starting at it."""
    p = tuple(float(x) for x in point)
    k, r = locate_boundary_point(dom, p)
    verts = dom.vertices
    arcs = dom.arcs
    # arcs before / after the point
    if r is not None:
        before, after = r - 1, r
    else:
        before, after = k, k
    L_s, S_set = None, []
    q = before
    while q >= 0 and arcs[q].kind == "flat_s":
        q -= 1
    if q < before:
        start = tuple(map(float, arcs[q + 1].endpoints[0]))
        L_s = (start, p)
        S_set = [tuple(map(float, verts[m])) for m in range(q + 1, (r if r is not None else k + 1))
                 if tuple(map(float, verts[m])) != p]
    L_t, T_set = None, []
    q = after
    while q < len(arcs) and arcs[q].kind == "flat_t":
        q += 1
    if q > after:
        end = tuple(map(float, arcs[q - 1].endpoints[1]))
        L_t = (p, end)
        T_set = [tuple(map(float, verts[m])) for m in range(after + 1, q + 1)
                 if tuple(map(float, verts[m])) != p]
    return VertexSets(p, T_set, S_set, L_s, L_t)
