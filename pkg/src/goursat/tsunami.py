"""Rotating-basin tsunami model in characteristic coordinates and its inverse problem.

The radial velocity v(r, t) obeys a second-order hyperbolic equation forced by
the bottom-motion quantity u = d^2 gamma / dr dt.  In characteristic
coordinates (s, t') the observation rectangle becomes the diamond
|s + t'| <= A, |s - t'| <= A and the equation takes Goursat form

    v_{s t'} = 1/2 (v_{t'} - v_s) sqrt(gc) h'/sqrt(h) + (gc h''/4 + omega^2) v + (gc/4) u.

The diamond is split into four quadrants, each reflected onto the triangle
sigma, tau >= 0, sigma + tau <= A, and solved with the single-domain tools.
Data v = 0 is prescribed on both characteristic axes.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline, RegularGridInterpolator, griddata

from .adjoint import sweep_costate
from .errors import CompatibilityViolated, ConfigInvalid, DepthNonPositive
from .forward import solve_state
from .geometry import Domain, build_domain
from .io import fmt, write_csv, write_json
from .optimize import cost, gradient, projected_descent
from .problem import ControlBox, ControlProblem, CostIntegrands, Dynamics, zero_boundary

TOL_MAP = 1e-10
QUADRANT_SIGNS = {1: (1, 1), 2: (-1, 1), 3: (-1, -1), 4: (1, -1)}


# ---------------------------------------------------------------------------
# model and characteristic map
# ---------------------------------------------------------------------------


@dataclass
class DepthProfile:
    kind: str
    params: dict
    h: object
    dh: object
    d2h: object


def depth_profile(kind: str, **params) -> DepthProfile:
    """Depth h(r) with analytic first and second derivatives."""
    if kind == "constant":
        h0 = float(params.get("h0", 1.0))
        return DepthProfile(kind, {"h0": h0}, lambda r: h0 + 0 * np.asarray(r, float),
                            lambda r: 0 * np.asarray(r, float), lambda r: 0 * np.asarray(r, float))
    if kind == "linear":
        h0, slope = float(params.get("h0", 1.0)), float(params.get("slope", 0.0))
        return DepthProfile(kind, {"h0": h0, "slope": slope}, lambda r: h0 + slope * np.asarray(r, float),
                            lambda r: slope + 0 * np.asarray(r, float), lambda r: 0 * np.asarray(r, float))
    if kind == "quadratic":
        h0, slope, curv = (float(params.get(k, d)) for k, d in (("h0", 1.0), ("slope", 0.0), ("curvature", 0.0)))
        return DepthProfile(kind, {"h0": h0, "slope": slope, "curvature": curv},
                            lambda r: h0 + slope * np.asarray(r, float) + curv * np.asarray(r, float) ** 2,
                            lambda r: slope + 2 * curv * np.asarray(r, float),
                            lambda r: 2 * curv + 0 * np.asarray(r, float))
    raise ConfigInvalid(f"unknown depth profile {kind!r}")


@dataclass
class BasinModel:
    omega: float
    g: float
    c: float
    depth: DepthProfile
    r_range: tuple
    t_range: tuple

    @property
    def wave_speed(self):
        return float(np.sqrt(self.g * self.c))

    def check_depth(self, samples=2001):
        r = np.linspace(*self.r_range, samples)
        hmin = float(np.min(self.depth.h(r)))
        r0 = np.linspace(min(0.0, self.r_range[0]), max(0.0, self.r_range[1]), samples)
        if hmin <= 0 or float(np.min(self.depth.h(r0))) <= 0:
            raise DepthNonPositive(f"depth must stay positive on the radial range (min {hmin:.3g})")


@dataclass
class CharacteristicMap:
    s0: float
    t0p: float
    A: float
    beta: object
    beta_inv: object
    wave_speed: float
    fourth_residual: float

    def to_char(self, r, t):
        b = self.beta(np.asarray(r, float)) / self.wave_speed
        return self.s0 + np.asarray(t, float) + b, self.t0p + np.asarray(t, float) - b

    def from_char(self, s, tp):
        s, tp = np.asarray(s, float), np.asarray(tp, float)
        t = 0.5 * (s + tp - self.s0 - self.t0p)
        r = self.beta_inv(0.5 * self.wave_speed * (s - tp - self.s0 + self.t0p))
        return r, t


class _Beta:
    """beta(r) = int_0^r h^{-1/2} as a Hermite spline through adaptive-quadrature values."""

    def __init__(self, depth: DepthProfile, lo, hi, n=1025):
        lo, hi = min(lo, 0.0), max(hi, 0.0)
        r = np.unique(np.concatenate([np.linspace(lo, hi, n), [0.0]]))
        dens = lambda x: 1.0 / np.sqrt(float(depth.h(x)))  # noqa: E731
        pieces = np.array([quad(dens, a, b, epsabs=1e-14, epsrel=1e-13)[0] for a, b in zip(r[:-1], r[1:])])
        vals = np.concatenate([[0.0], np.cumsum(pieces)])
        vals -= vals[np.searchsorted(r, 0.0)]
        self.r = r
        self.spline = CubicHermiteSpline(r, vals, 1.0 / np.sqrt(depth.h(r)))
        self.deriv = self.spline.derivative()
        self.lo, self.hi = r[0], r[-1]

    def __call__(self, r):
        return self.spline(np.asarray(r, float))

    def inverse(self, b):
        """Bracketed Newton iteration (beta is strictly increasing)."""
        b = np.asarray(b, float)
        lo = np.full(b.shape, self.lo)
        hi = np.full(b.shape, self.hi)
        x = np.interp(b, self.spline(self.r), self.r)
        for _ in range(60):
            fx = self.spline(x) - b
            lo = np.where(fx < 0, x, lo)
            hi = np.where(fx > 0, x, hi)
            step = fx / self.deriv(x)
            x_new = x - step
            out = (x_new <= lo) | (x_new >= hi)
            x_new = np.where(out, 0.5 * (lo + hi), x_new)
            if np.all(np.abs(x_new - x) <= 1e-15 * np.maximum(1.0, np.abs(x))):
                x = x_new
                break
            x = x_new
        return x


def build_characteristic_map(model: BasinModel, tol=1e-8) -> CharacteristicMap:
    """Characteristic coordinates and the diamond half-width A."""
    model.check_depth()
    r1, r2 = model.r_range
    t1, t2 = model.t_range
    beta = _Beta(model.depth, r1, r2)
    cs = model.wave_speed
    gap = float(beta(r2) - beta(r1) - cs * (t2 - t1))
    if abs(gap) > tol * max(1.0, abs(cs * (t2 - t1))):
        raise CompatibilityViolated(f"beta(r2) - beta(r1) differs from sqrt(gc)(t2 - t1) by {gap:.3g}")
    # first three equations: A = a + 2 t2 = b + 2 beta(r2)/cs = -a - 2 t1 with a = s0 + t0', b = s0 - t0'
    a = -(t1 + t2)
    A = t2 - t1
    b = A - 2 * float(beta(r2)) / cs
    fourth = -b - 2 * float(beta(r1)) / cs - A
    return CharacteristicMap(0.5 * (a + b), 0.5 * (a - b), A, beta, beta.inverse, cs, fourth)


def coefficient_fields(model: BasinModel, cmap: CharacteristicMap, s, tp):
    """Coefficients (half_drift, zeroth, forcing) of the characteristic-form equation."""
    r, _ = cmap.from_char(s, tp)
    d = model.depth
    half_drift = 0.5 * model.wave_speed * d.dh(r) / np.sqrt(d.h(r))
    zeroth = model.g * model.c * d.d2h(r) / 4 + model.omega ** 2
    forcing = model.g * model.c / 4
    return half_drift, zeroth + 0 * half_drift, forcing + 0 * half_drift


def goursat_dynamics(model: BasinModel, cmap: CharacteristicMap, signs=(1, 1)) -> Dynamics:
    """Scalar Goursat right-hand side, reflected by signs = (sign_s, sign_t')."""
    ss, st = signs
    prod = ss * st

    def coef(sig, tau):
        return coefficient_fields(model, cmap, ss * np.asarray(sig, float), st * np.asarray(tau, float))

    def f(sig, tau, x, p, q, u):
        a, b, c = coef(sig, tau)
        val = a * (st * q[..., 0] - ss * p[..., 0]) + b * x[..., 0] + c * u[..., 0]
        return (prod * val)[..., None]

    def jac(which):
        def fn(sig, tau, x, p, q, u):
            a, b, c = coef(sig, tau)
            val = {"x": b, "p": -ss * a, "q": st * a, "u": c}[which]
            return (prod * val)[..., None, None]
        return fn

    lip = None
    return Dynamics(1, 1, f, jac("x"), jac("p"), jac("q"), jac("u"), lip)


# ---------------------------------------------------------------------------
# diamond grid and quadrant decomposition
# ---------------------------------------------------------------------------


@dataclass
class DiamondGrid:
    A: float
    cells: int  # per quadrant side

    @property
    def nodes(self):
        return np.linspace(-self.A, self.A, 2 * self.cells + 1)

    @property
    def quadrant_nodes(self):
        return np.linspace(0.0, self.A, self.cells + 1)

    def mesh(self):
        return np.meshgrid(self.nodes, self.nodes, indexing="ij")

    @property
    def inside(self):
        S, T = self.mesh()
        return np.abs(S) + np.abs(T) <= self.A * (1 + 1e-12)

    def quadrant_index(self, signs):
        """Diamond indices of the reflected quadrant grid nodes."""
        n = self.cells
        k = np.arange(n + 1)
        I = n + signs[0] * k
        J = n + signs[1] * k
        return np.meshgrid(I, J, indexing="ij")


@dataclass
class QuadrantSet:
    grid: DiamondGrid
    domain: Domain
    dynamics: dict  # quadrant id -> Dynamics

    def split(self, field):
        """Diamond field (N, N, ...) -> {quadrant: reflected field on the quadrant grid}."""
        out = {}
        for qid, sg in QUADRANT_SIGNS.items():
            I, J = self.grid.quadrant_index(sg)
            out[qid] = np.where(self.domain.grid.inside.reshape(I.shape + (1,) * (np.ndim(field) - 2)),
                                field[I, J], 0.0)
        return out

    def merge(self, fields):
        """Quadrant fields -> diamond field (shared axis nodes take the last writer; they agree)."""
        shape = next(iter(fields.values())).shape[2:]
        n = len(self.grid.nodes)
        out = np.zeros((n, n) + shape)
        for qid in sorted(fields):
            I, J = self.grid.quadrant_index(QUADRANT_SIGNS[qid])
            ins = self.domain.grid.inside
            out[I[ins], J[ins]] = fields[qid][ins]
        return out

    def merge_weighted(self, grads, weights):
        """Quadrant gradients with nodal weights -> diamond gradient and weights."""
        m = next(iter(grads.values())).shape[-1]
        n = len(self.grid.nodes)
        num = np.zeros((n, n, m))
        W = np.zeros((n, n))
        for qid in sorted(grads):
            I, J = self.grid.quadrant_index(QUADRANT_SIGNS[qid])
            np.add.at(num, (I, J), weights[qid][..., None] * grads[qid])
            np.add.at(W, (I, J), weights[qid])
        with np.errstate(invalid="ignore", divide="ignore"):
            G = np.where((np.abs(W) > 0)[..., None], num / W[..., None], 0.0)
        G[~self.grid.inside] = 0.0
        return G, W

    def weights(self):
        w = self.domain.node_weights()
        _, W = self.merge_weighted({q: np.zeros(w.shape + (1,)) for q in QUADRANT_SIGNS},
                                   {q: w for q in QUADRANT_SIGNS})
        return W


def quadrant_decompose(model: BasinModel, cmap: CharacteristicMap, cells=64) -> QuadrantSet:
    """Four reflected right triangles sigma + tau <= A sharing one grid."""
    grid = DiamondGrid(cmap.A, cells)
    nodes = grid.quadrant_nodes
    A = cmap.A
    dom = build_domain([{"kind": "segment", "start": (A, 0.0), "end": (0.0, A)}], (), A / cells,
                       s_nodes=nodes, t_nodes=nodes)
    dyn = {qid: goursat_dynamics(model, cmap, sg) for qid, sg in QUADRANT_SIGNS.items()}
    return QuadrantSet(grid, dom, dyn)


# ---------------------------------------------------------------------------
# forward, observations and cost
# ---------------------------------------------------------------------------


def _interp(nodes, values):
    return RegularGridInterpolator((nodes, nodes), values, bounds_error=False, fill_value=0.0)


def quadrant_problem(quads: QuadrantSet, qid, obs_q=None, lam=0.0) -> ControlProblem:
    """Goursat problem on one reflected quadrant with the tracking cost."""
    nodes = quads.grid.quadrant_nodes
    if obs_q is None:
        costs = CostIntegrands()
    else:
        look = _interp(nodes, obs_q[..., 0])

        def target(s, t):
            return look(np.stack([np.ravel(s), np.ravel(t)], -1)).reshape(np.shape(s))

        costs = CostIntegrands(
            Phi=lambda s, t, x, p, q, u: (x[..., 0] - target(s, t)) ** 2 + lam * u[..., 0] ** 2,
            Phi_x=lambda s, t, x, p, q, u: 2 * (x - target(s, t)[..., None]),
            Phi_p=lambda s, t, x, p, q, u: np.zeros_like(x),
            Phi_q=lambda s, t, x, p, q, u: np.zeros_like(x),
            Phi_u=lambda s, t, x, p, q, u: 2 * lam * u,
        )
    box = ControlBox(np.array([-np.inf]), np.array([np.inf]))
    return ControlProblem(quads.dynamics[qid], costs, box, zero_boundary(1), f"tsunami_q{qid}")


def _map_quadrants(fn, workers):
    ids = sorted(QUADRANT_SIGNS)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return dict(zip(ids, ex.map(fn, ids)))
    return {q: fn(q) for q in ids}


def forward_diamond(quads: QuadrantSet, u_diamond, workers=1):
    """State v on the diamond for a control on the diamond."""
    parts = quads.split(u_diamond)

    def run(q):
        return solve_state(quads.domain, quadrant_problem(quads, q), u=parts[q]).x

    return quads.merge(_map_quadrants(run, workers))


def evaluate_diamond(quads: QuadrantSet, obs, lam, u_diamond, need_gradient=True, workers=1):
    """Cost (sum over quadrants) and the diamond gradient with its weights."""
    parts = quads.split(u_diamond)
    obs_parts = quads.split(obs)

    def run(q):
        spec = quadrant_problem(quads, q, obs_parts[q], lam)
        st = solve_state(quads.domain, spec, u=parts[q])
        J = cost(quads.domain, spec, st)
        if not need_gradient:
            return J, None, None, st
        cs = sweep_costate(quads.domain, spec, st, parts[q])
        G, W = gradient(quads.domain, spec, st, cs)
        return J, G, W, st

    res = _map_quadrants(run, workers)
    J = sum(res[q][0].total for q in sorted(res))
    if not need_gradient:
        return J, None, None, res
    G, W = quads.merge_weighted({q: res[q][1] for q in res}, {q: res[q][2] for q in res})
    return J, G, W, res


@dataclass
class ObservationSet:
    v_obs: np.ndarray  # on the diamond grid
    noise_level: float
    seed: int | None = None
    sigma: float = 0.0

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.v_obs).tobytes()).hexdigest()


def control_profile(kind="gaussian", **params):
    """Smooth test controls on the characteristic plane."""
    if kind == "gaussian":
        amp = float(params.get("amplitude", 1.0))
        cs, ct = params.get("center", (0.0, 0.0))
        width = float(params.get("width", 0.25))
        return lambda s, t: (amp * np.exp(-((s - cs) ** 2 + (t - ct) ** 2) / (2 * width ** 2)))[..., None]
    if kind == "dipole":
        amp = float(params.get("amplitude", 1.0))
        width = float(params.get("width", 0.3))
        return lambda s, t: (amp * s / width * np.exp(-(s ** 2 + t ** 2) / (2 * width ** 2)))[..., None]
    if kind == "zero":
        return lambda s, t: np.zeros(np.shape(s) + (1,))
    raise ConfigInvalid(f"unknown control profile {kind!r}")


def diamond_field(quads: QuadrantSet, fun):
    S, T = quads.grid.mesh()
    return np.where(quads.grid.inside[..., None], fun(S, T), 0.0)


def synth_observations(model: BasinModel, cmap: CharacteristicMap, quads: QuadrantSet, u_true, noise=0.0,
                       seed=0, workers=1) -> ObservationSet:
    """Forward solve with u_true and add seeded Gaussian noise (sigma = noise * max|v|)."""
    u = diamond_field(quads, u_true) if callable(u_true) else np.asarray(u_true, float)
    v = forward_diamond(quads, u, workers)
    sigma = float(noise * np.abs(v).max()) if noise > 0 else 0.0
    if sigma > 0:
        rng = np.random.default_rng(seed)
        v = v + np.where(quads.grid.inside[..., None], rng.normal(0.0, sigma, v.shape), 0.0)
    return ObservationSet(v, float(noise), seed, sigma)


@dataclass
class InverseTrace:
    iterates: list
    converged: bool
    lam: float
    breakdown: dict = field(default_factory=dict)

    def write_csv(self, path):
        rows = [(k, fmt(J), fmt(g), fmt(a), fmt(f)) for k, (J, g, a, f) in enumerate(self.iterates)]
        return write_csv(path, ["iter", "J", "grad_norm", "step", "active_fraction"], rows)


def inverse_solve(model: BasinModel, cmap: CharacteristicMap, quads: QuadrantSet, obs: ObservationSet, lam,
                  tol=1e-8, max_iter=300, method="cg", u0=None, workers=1):
    """Minimize sum over the diamond of |v - v_obs|^2 + lam |u|^2.

    method 'cg' exploits that the cost is quadratic in u (linear dynamics) and
    runs conjugate gradients in the weighted inner product; 'bb' and 'armijo'
    use the generic projected descent.  tol is relative to the initial
    gradient norm for 'cg' and absolute (sup norm) otherwise."""
    if lam <= 0:
        raise ConfigInvalid("regularization parameter must be positive")
    if method not in ("cg", "bb", "armijo"):
        raise ConfigInvalid(f"unknown inverse method {method!r}")
    mask = quads.grid.inside
    u0 = np.zeros(mask.shape + (1,)) if u0 is None else np.asarray(u0, float)
    box = ControlBox(np.array([-np.inf]), np.array([np.inf]))

    def evaluate(u):
        return evaluate_diamond(quads, obs.v_obs, lam, u, True, workers)

    if method == "cg":
        iterates, u, converged = _conjugate_gradients(evaluate, u0, mask, tol, max_iter)
    else:
        def value(u):
            return evaluate_diamond(quads, obs.v_obs, lam, u, False, workers)[0]

        out = projected_descent(evaluate, value, u0, box, mask, tol, max_iter, method)
        iterates, u, converged = out.iterates, out.u, out.converged
    misfit, reg = misfit_breakdown(quads, obs, lam, u, workers)
    trace = InverseTrace(iterates, converged, lam,
                         {"misfit": misfit, "regularization": reg, "total": misfit + reg,
                          "iterations": len(iterates) - 1, "converged": converged, "method": method})
    return u, trace


def _conjugate_gradients(evaluate, u0, mask, tol, max_iter):
    """CG for a quadratic cost given its weighted gradient; Hessian products by differencing."""
    ex = mask[..., None]
    zero = np.zeros_like(u0)
    _, G_zero, W, _ = evaluate(zero)
    Wpos = np.maximum(W, 0.0)

    def dot(a, b):
        return float(np.einsum("ij,ijk,ijk->", Wpos, a, b))

    def hess(p):
        return np.where(ex, evaluate(p)[1] - G_zero, 0.0)

    u = np.where(ex, u0, 0.0)
    J, G, _, _ = evaluate(u)
    r =-np.where(ex, G, 0.0)
    p = r.copy()
    rr = dot(r, r)
    r0 = np.sqrt(rr)
    iterates = [(float(J), float(np.abs(r[mask]).max()), 0.0, 0.0)]
    converged = r0 == 0.0
    for _ in range(max_iter):
        if converged:
            break
        Hp = hess(p)
        curv = dot(p, Hp)
        if curv <= 0:
            break
        alpha = rr / curv
        u = u + alpha * p
        # exact update of a quadratic: J(u + a p) = J + a <G, p> - ... with G = -r
        J = J - alpha * dot(r, p) + 0.5 * alpha ** 2 * curv
        r_new = r - alpha * Hp
        rr_new = dot(r_new, r_new)
        iterates.append((float(J), float(np.abs(r_new[mask]).max()), float(alpha), 0.0))
        p = r_new + (rr_new / rr) * p
        r, rr = r_new, rr_new
        converged = np.sqrt(rr) <= tol * r0
    return iterates, u, bool(converged)


def misfit_breakdown(quads: QuadrantSet, obs: ObservationSet, lam, u, workers=1):
    W = quads.weights()
    v = forward_diamond(quads, u, workers)
    misfit = float(np.einsum("ij,ij->", W, (v - obs.v_obs)[..., 0] ** 2))
    reg = float(lam * np.einsum("ij,ij->", W, u[..., 0] ** 2))
    return misfit, reg


def relative_l2_error(quads: QuadrantSet, u_est, u_true):
    W = quads.weights()
    diff = np.einsum("ij,ij->", W, (u_est - u_true)[..., 0] ** 2)
    ref = np.einsum("ij,ij->", W, u_true[..., 0] ** 2)
    return float(np.sqrt(diff / ref))


def first_order_residual(model: BasinModel, fields, r, t, step, form="operative"):
    """Residuals of the first-order radial system for callables v, w, y, gamma_t (r, t).

    form 'operative' places the bottom forcing in the elevation equation with
    c d/dr (h v), the variant from which the second-order equation follows;
    form 'literal' places it in the momentum equation with c d/dr (h dv/dr)."""
    v, w, y, gam_t = (fields[k] for k in ("v", "w", "y", "gamma_t"))
    d = model.depth
    r, t = np.asarray(r, float), np.asarray(t, float)

    def dt(f):
        return (f(r, t + step) - f(r, t - step)) / (2 * step)

    def dr(f):
        return (f(r + step, t) - f(r - step, t)) / (2 * step)

    if form == "operative":
        flux = lambda rr, tt: d.h(rr) * v(rr, tt)  # noqa: E731
        momentum = dt(v) - 2 * model.omega * w(r, t) + model.g * dr(y)
        elevation = dt(y) + model.c * dr(flux) + gam_t(r, t)
    elif form == "literal":
        flux = lambda rr, tt: d.h(rr) * (v(rr + step, tt) - v(rr - step, tt)) / (2 * step)  # noqa: E731
        momentum = dt(v) - 2 * model.omega * w(r, t) + model.g * dr(y) + gam_t(r, t)
        elevation = dt(y) + model.c * dr(flux)
    else:
        raise ValueError("form must be 'operative' or 'literal'")
    rotation = dt(w) + 2 * model.omega * v(r, t)
    return np.array([np.abs(momentum).max(), np.abs(rotation).max(), np.abs(elevation).max()])


def second_order_residual(model: BasinModel, v, gamma_t, r, t, step):
    """Residual of v_tt + 4 omega^2 v - gc (h v)_rr - g gamma_rt by central differences."""
    d = model.depth
    r, t = np.asarray(r, float), np.asarray(t, float)
    vtt = (v(r, t + step) - 2 * v(r, t) + v(r, t - step)) / step ** 2
    hv = lambda rr: d.h(rr) * v(rr, t)  # noqa: E731
    hv_rr = (hv(r + step) - 2 * hv(r) + hv(r - step)) / step ** 2
    gam_rt = (gamma_t(r + step, t) - gamma_t(r - step, t)) / (2 * step)
    res = vtt + 4 * model.omega ** 2 * v(r, t) - model.g * model.c * hv_rr - model.g * gam_rt
    return float(np.abs(res).max())


def characteristic_residual(model: BasinModel, cmap: CharacteristicMap, v_fun, step):
    """Residual of the characteristic-form equation for u built from a smooth v(r, t)
    through the second-order equation, at interior probe points of the diamond.

    O(step^2) when both forms agree; a direct change of variables gives
    -omega^2 v + (g/4) u for constant depth, so the residual is O(1) when
    omega != 0 or c != 1."""
    A = cmap.A
    pts = np.linspace(-0.5 * A, 0.5 * A, 7)
    S, T = np.meshgrid(pts, 0.5 * pts, indexing="ij")
    S, T = S.ravel(), T.ravel()

    def v_char(s, tp):
        return v_fun(*cmap.from_char(s, tp))

    r, t = cmap.from_char(S, T)
    d = model.depth
    h = step
    vtt = (v_fun(r, t + h) - 2 * v_fun(r, t) + v_fun(r, t - h)) / h ** 2
    hv = lambda rr: d.h(rr) * v_fun(rr, t)  # noqa: E731
    hv_rr = (hv(r + h) - 2 * hv(r) + hv(r - h)) / h ** 2
    u = (vtt + 4 * model.omega ** 2 * v_fun(r, t) - model.g * model.c * hv_rr) / model.g
    v_mixed = (v_char(S + h, T + h) - v_char(S + h, T - h) - v_char(S - h, T + h) + v_char(S - h, T - h)) / (4 * h * h)
    v_s = (v_char(S + h, T) - v_char(S - h, T)) / (2 * h)
    v_t = (v_char(S, T + h) - v_char(S, T - h)) / (2 * h)
    a, b, c = coefficient_fields(model, cmap, S, T)
    rhs = a * (v_t - v_s) + b * v_char(S, T) + c * u
    return float(np.abs(v_mixed - rhs).max())


# ---------------------------------------------------------------------------
# ingestion and export
# ---------------------------------------------------------------------------


def read_observations_csv(path, cmap: CharacteristicMap, quads: QuadrantSet) -> ObservationSet:
    """Observation file with header 'r,t,v' (physical grid) or 's,tp,v' (characteristic grid).

    Tensor-grid values are resampled bilinearly onto the diamond nodes,
    scattered values by piecewise-linear interpolation on their triangulation."""
    path = Path(path)
    lines = path.read_text().strip().splitlines()
    header = [h.strip() for h in lines[0].split(",")]
    try:
        data = np.array([[float(x) for x in ln.split(",")[:3]] for ln in lines[1:]], float)
    except ValueError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    if header[:3] == ["r", "t", "v"]:
        physical = True
    elif header[:3] == ["s", "tp", "v"]:
        physical = False
    else:
        raise ConfigInvalid(f"{path}: header must be 'r,t,v' or 's,tp,v'")
    S, T = quads.grid.mesh()
    X, Y = cmap.from_char(S, T) if physical else (S, T)
    a_nodes, b_nodes = np.unique(data[:, 0]), np.unique(data[:, 1])
    if len(a_nodes) * len(b_nodes) == len(data):
        table = np.full((len(a_nodes), len(b_nodes)), np.nan)
        table[np.searchsorted(a_nodes, data[:, 0]), np.searchsorted(b_nodes, data[:, 1])] = data[:, 2]
        interp = RegularGridInterpolator((a_nodes, b_nodes), table, bounds_error=False, fill_value=None)
        v = interp(np.stack([X.ravel(), Y.ravel()], -1)).reshape(S.shape)
    else:
        v = griddata(data[:, :2], data[:, 2], (X, Y), method="linear", fill_value=0.0)
    v = np.where(quads.grid.inside, v, 0.0)[..., None]
    return ObservationSet(v, 0.0, None, 0.0)


def write_observations_csv(path, quads: QuadrantSet, obs: ObservationSet):
    S, T = quads.grid.mesh()
    ins = quads.grid.inside
    rows = [(fmt(s), fmt(t), fmt(v)) for s, t, v in zip(S[ins], T[ins], obs.v_obs[ins][:, 0])]
    return write_csv(path, ["s", "tp", "v"], rows)


def write_u_csv(path, quads: QuadrantSet, cmap: CharacteristicMap, u, u_true=None):
    """Estimated control on the diamond with physical coordinates."""
    S, T = quads.grid.mesh()
    ins = quads.grid.inside
    R, Tp = cmap.from_char(S, T)
    header = ["s", "tp", "r", "t", "u"] + (["u_true"] if u_true is not None else [])
    rows = []
    for idx in zip(*np.nonzero(ins)):
        row = [fmt(S[idx]), fmt(T[idx]), fmt(R[idx]), fmt(Tp[idx]), fmt(u[idx][0])]
        if u_true is not None:
            row.append(fmt(u_true[idx][0]))
        rows.append(row)
    return write_csv(path, header, rows)


def write_misfit_json(path, breakdown, extra=None):
    obj = dict(breakdown)
    if extra:
        obj.update(extra)
    return write_json(path, obj)


def write_lambda_sweep_csv(path, rows):
    """rows: (lambda, relative error or None, misfit, regularization, iterations).

    The error column is omitted when no reference control is known."""
    with_err = any(r[1] is not None for r in rows)
    out = []
    for lam, err, mis, reg, it in rows:
        out.append([fmt(lam)] + ([fmt(err)] if with_err else []) + [fmt(mis), fmt(reg), int(it)])
    header = ["lambda"] + (["relative_l2_error"] if with_err else []) + ["misfit", "regularization", "iterations"]
    return write_csv(path, header, out)


def twin_experiment(model: BasinModel, u_true_fun, lambdas, cells=64, noise=0.0, seed=0, tol=1e-8,
                    max_iter=300, method="cg", workers=1):
    """Synthetic observations from u_true followed by one inverse solve per lambda."""
    cmap = build_characteristic_map(model)
    quads = quadrant_decompose(model, cmap, cells)
    u_true = diamond_field(quads, u_true_fun)
    obs = synth_observations(model, cmap, quads, u_true, noise, seed, workers)
    inner = 1 if len(lambdas) > 1 else workers

    def one(lam):
        u_est, trace = inverse_solve(model, cmap, quads, obs, lam, tol, max_iter, method, workers=inner)
        return {"lambda": lam, "u": u_est, "trace": trace, "relative_error": relative_l2_error(quads, u_est, u_true)}

    # lambdas are independent; results keep the input order
    if workers > 1 and len(lambdas) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(lambdas))) as ex:
            results = list(ex.map(one, lambdas))
    else:
        results = [one(lam) for lam in lambdas]
    return {"map": cmap, "quads": quads, "u_true": u_true, "obs": obs, "results": results}
