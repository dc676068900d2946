"""Dynamics, cost integrands, Hamiltonian and a library of built-in problems.

Array conventions: s, t have a common leading shape S; x, p, q, psi have
shape S + (n,); u has shape S + (m,).  Jacobians have shape S + (rows, cols)
with rows indexing the function component.  Any omitted partial derivative
is replaced by a central finite difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch

FD_STEP = 1e-6


def _fd_jacobian(fun, args, slot, step=FD_STEP):
    """d fun / d args[slot] by central differences; output S + out_shape + (k,)."""
    base = np.asarray(args[slot], float)
    k = base.shape[-1]
    cols = []
    for c in range(k):
        h = step * np.maximum(1.0, np.abs(base[..., c]))
        up = list(args)
        dn = list(args)
        xu = base.copy()
        xd = base.copy()
        xu[..., c] += h
        xd[..., c] -= h
        up[slot] = xu
        dn[slot] = xd
        fu = np.asarray(fun(*up), float)
        fd = np.asarray(fun(*dn), float)
        hh = (2 * h).reshape(h.shape + (1,) * (fu.ndim - h.ndim))
        cols.append((fu - fd) / hh)
    return np.stack(cols, axis=-1)


@dataclass
class Dynamics:
    """Right-hand side of x_st = f(s, t, x, p, q, u)."""

    n: int
    m: int
    f: Callable
    f_x: Optional[Callable] = None
    f_p: Optional[Callable] = None
    f_q: Optional[Callable] = None
    f_u: Optional[Callable] = None
    lipschitz_hint: Optional[float] = None

    def value(self, s, t, x, p, q, u):
        return np.asarray(self.f(s, t, x, p, q, u), float) + np.zeros(np.shape(x))

    def partial(self, name, s, t, x, p, q, u):
        fn = getattr(self, "f_" + name)
        shape = np.shape(s) + (self.n, self.n if name != "u" else self.m)
        if fn is not None:
            return np.asarray(fn(s, t, x, p, q, u), float) + np.zeros(shape)
        slot = {"x": 2, "p": 3, "q": 4, "u": 5}[name]
        return _fd_jacobian(self.f, [s, t, x, p, q, u], slot)


def _zero(*args):
    return 0.0


@dataclass
class CostIntegrands:
    """Area integrand Phi, arc integrand Phi1 (eta is the slot of the tangential
    derivative x_mu) and vertex cost Phi0.  When arcwise is true Phi1 and its
    partials receive the arc index as a sixth argument."""

    Phi: Optional[Callable] = None
    Phi_x: Optional[Callable] = None
    Phi_p: Optional[Callable] = None
    Phi_q: Optional[Callable] = None
    Phi_u: Optional[Callable] = None
    Phi1: Optional[Callable] = None
    Phi1_x: Optional[Callable] = None
    Phi1_eta: Optional[Callable] = None
    Phi0: Optional[Callable] = None
    Phi0_x: Optional[Callable] = None
    arcwise: bool = False


@dataclass
class ControlBox:
    lower: np.ndarray
    upper: np.ndarray

    def project(self, u):
        return np.clip(u, self.lower, self.upper)


@dataclass
class BoundaryData:
    """x(s, 0) = x1(s), x(0, t) = x2(t), x(0, 0) = x0; derivatives optional."""

    x1: Callable
    x2: Callable
    x0: np.ndarray
    dx1: Optional[Callable] = None
    dx2: Optional[Callable] = None

    def values(self, s_nodes, t_nodes, n):
        x1 = np.asarray(self.x1(s_nodes), float).reshape(len(s_nodes), n)
        x2 = np.asarray(self.x2(t_nodes), float).reshape(len(t_nodes), n)
        x0 = np.asarray(self.x0, float).reshape(n)
        d1 = self._deriv(self.x1, self.dx1, s_nodes, n)
        d2 = self._deriv(self.x2, self.dx2, t_nodes, n)
        return x1, x2, x0, d1, d2

    @staticmethod
    def _deriv(fun, dfun, nodes, n):
        if dfun is not None:
            return np.asarray(dfun(nodes), float).reshape(len(nodes), n)
        h = 1e-6
        return ((np.asarray(fun(nodes + h), float) - np.asarray(fun(nodes - h), float)) / (2 * h)).reshape(len(nodes), n)


def zero_boundary(n):
    return BoundaryData(lambda s: np.zeros((np.size(s), n)), lambda t: np.zeros((np.size(t), n)),
                        np.zeros(n), lambda s: np.zeros((np.size(s), n)), lambda t: np.zeros((np.size(t), n)))


@dataclass
class ControlProblem:
    """Dynamics plus costs, control bounds and boundary data."""

    dynamics: Dynamics
    costs: CostIntegrands
    box: ControlBox
    boundary: BoundaryData
    name: str = ""

    @property
    def n(self):
        return self.dynamics.n

    @property
    def m(self):
        return self.dynamics.m

    # -- cost pieces with zero / finite-difference fallbacks ---------------

    def Phi(self, s, t, x, p, q, u):
        c = self.costs
        if c.Phi is None:
            return np.zeros(np.shape(s))
        return np.asarray(c.Phi(s, t, x, p, q, u), float) + np.zeros(np.shape(s))

    def Phi_partial(self, name, s, t, x, p, q, u):
        c = self.costs
        size = self.m if name == "u" else self.n
        shape = np.shape(s) + (size,)
        if c.Phi is None:
            return np.zeros(shape)
        fn = getattr(c, "Phi_" + name)
        if fn is not None:
            return np.asarray(fn(s, t, x, p, q, u), float) + np.zeros(shape)
        slot = {"x": 2, "p": 3, "q": 4, "u": 5}[name]
        return _fd_jacobian(lambda *a: self.Phi(*a), [s, t, x, p, q, u], slot)

    def _phi1_args(self, s, t, x, eta, arc):
        return (s, t, x, eta, arc) if self.costs.arcwise else (s, t, x, eta)

    def Phi1(self, s, t, x, eta, arc=None):
        c = self.costs
        if c.Phi1 is None:
            return np.zeros(np.shape(s))
        return np.asarray(c.Phi1(*self._phi1_args(s, t, x, eta, arc)), float) + np.zeros(np.shape(s))

    def Phi1_partial(self, name, s, t, x, eta, arc=None):
        c = self.costs
        shape = np.shape(s) + (self.n,)
        if c.Phi1 is None:
            return np.zeros(shape)
        fn = getattr(c, "Phi1_" + name)
        if fn is not None:
            return np.asarray(fn(*self._phi1_args(s, t, x, eta, arc)), float) + np.zeros(shape)
        slot = {"x": 2, "eta": 3}[name]
        return _fd_jacobian(lambda a0, a1, a2, a3: self.Phi1(a0, a1, a2, a3, arc), [s, t, x, eta], slot)

    def Phi0(self, s, t, x):
        c = self.costs
        if c.Phi0 is None:
            return np.zeros(np.shape(s))
        return np.asarray(c.Phi0(s, t, x), float) + np.zeros(np.shape(s))

    def Phi0_x(self, s, t, x):
        c = self.costs
        shape = np.shape(s) + (self.n,)
        if c.Phi0 is None:
            return np.zeros(shape)
        if c.Phi0_x is not None:
            return np.asarray(c.Phi0_x(s, t, x), float) + np.zeros(shape)
        return _fd_jacobian(lambda a, b, y: self.Phi0(a, b, y), [s, t, x], 2)


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------


def _covec_times(psi, mat):
    """Row covector times matrix over leading dims."""
    return np.einsum("...i,...ij->...j", psi, mat)


def hamiltonian(spec: ControlProblem, s, t, x, p, q, psi, u):
    """H = Phi + psi . f."""
    x, p, q, psi, u = (np.asarray(v, float) for v in (x, p, q, psi, u))
    if psi.shape[-1] != spec.n or u.shape[-1] != spec.m:
        raise DimensionMismatch("co-state or control has the wrong dimension")
    return spec.Phi(s, t, x, p, q, u) + np.einsum("...i,...i->...", psi, spec.dynamics.value(s, t, x, p, q, u))


def hamiltonian_partials(spec: ControlProblem, s, t, x, p, q, psi, u):
    """(H_x, H_p, H_q, H_u); each is Phi_* + psi f_*."""
    out = []
    for name in ("x", "p", "q", "u"):
        out.append(spec.Phi_partial(name, s, t, x, p, q, u)
                   + _covec_times(np.asarray(psi, float), spec.dynamics.partial(name, s, t, x, p, q, u)))
    return tuple(out)


def aux_hamiltonians(spec: ControlProblem, s, t, x, p, q, u, rho1, rho2):
    """h1 = rho1 f and h2 = rho2 f (rho has its free index first)."""
    f = spec.dynamics.value(s, t, x, p, q, u)
    return (np.einsum("...ik,...k->...i", np.asarray(rho1, float), f),
            np.einsum("...ik,...k->...i", np.asarray(rho2, float), f))


def total_derivative(values, nodes, axis, valid=None):
    """Total derivative of a composite grid field along one grid axis.

    The composite field (for example Phi_p evaluated on the state) is
    differentiated by second-order finite differences, which equals the
    chain-rule expansion up to O(h^2).  With a `valid` node mask the stencil
    becomes one-sided wherever a neighbour is not valid."""
    v = np.moveaxis(np.asarray(values, float), axis, 0)
    x = np.asarray(nodes, float)
    if valid is None:
        return np.moveaxis(np.gradient(v, x, axis=0, edge_order=2), 0, axis)
    ok = np.moveaxis(np.asarray(valid, bool), axis, 0)
    ok = ok.reshape(ok.shape + (1,) * (v.ndim - ok.ndim))
    n = len(x)
    out = np.zeros_like(v)
    for i in range(n):
        fwd1 = i + 1 < n
        res = np.zeros_like(v[i])
        done = np.zeros(ok[i].shape, bool)
        if 1 <= i < n - 1:
            h1, h2 = x[i] - x[i - 1], x[i + 1] - x[i]
            m = ok[i - 1] & ok[i + 1]
            val = (-h2 / (h1 * (h1 + h2)) * v[i - 1] + (h2 - h1) / (h1 * h2) * v[i]
                   + h1 / (h2 * (h1 + h2)) * v[i + 1])
            res = np.where(m & ~done, val, res)
            done |= m
        if i + 2 < n:
            c, d = x[i + 1] - x[i], x[i + 2] - x[i + 1]
            m = ok[i + 1] & ok[i + 2]
            val = (-(2 * c + d) / (c * (c + d)) * v[i] + (c + d) / (c * d) * v[i + 1]
                   - c / (d * (c + d)) * v[i + 2])
            res = np.where(m & ~done, val, res)
            done |= m
        if i >= 2:
            a, b = x[i] - x[i - 1], x[i - 1] - x[i - 2]
            m = ok[i - 1] & ok[i - 2]
            val = (a / (b * (a + b)) * v[i - 2] - (a + b) / (a * b) * v[i - 1]
                   + (2 * a + b) / (a * (a + b)) * v[i])
            res = np.where(m & ~done, val, res)
            done |= m
        if fwd1:
            m = ok[i + 1]
            res = np.where(m & ~done, (v[i + 1] - v[i]) / (x[i + 1] - x[i]), res)
            done |= m
        if i >= 1:
            m = ok[i - 1]
            res = np.where(m & ~done, (v[i] - v[i - 1]) / (x[i] - x[i - 1]), res)
        out[i] = res
    return np.moveaxis(out, 0, axis)


def check_partials(spec: ControlProblem, n_probes=100, seed=0, step=FD_STEP):
    """Max relative discrepancy between supplied partials and central differences."""
    rng = np.random.default_rng(seed)
    n, m = spec.n, spec.m
    s = rng.uniform(0, 1, n_probes)
    t = rng.uniform(0, 1, n_probes)
    x, p, q = (rng.normal(size=(n_probes, n)) for _ in range(3))
    u = rng.normal(size=(n_probes, m))
    args = [s, t, x, p, q, u]
    worst = 0.0
    for name, slot in (("x", 2), ("p", 3), ("q", 4), ("u", 5)):
        ana = spec.dynamics.partial(name, *args)
        num = _fd_jacobian(spec.dynamics.value, args, slot, step)
        worst = max(worst, _rel(ana, num))
        ana = spec.Phi_partial(name, *args)
        num = _fd_jacobian(spec.Phi, args, slot, step)
        worst = max(worst, _rel(ana, num))
    return worst


def _rel(a, b):
    scale = np.maximum(1.0, np.abs(b))
    return float(np.max(np.abs(a - b) / scale))


# ---------------------------------------------------------------------------
# built-in problems
# ---------------------------------------------------------------------------


@dataclass
class BuiltinProblem:
    """Problem bundled with its domain description and a default control."""

    name: str
    arcs: list
    extra_vertices: list
    problem: ControlProblem
    u0: Callable
    description: str = ""
    notes: dict = field(default_factory=dict)


def _scalar_linear_dynamics(cx, cp, cq, cu=1.0):
    def f(s, t, x, p, q, u):
        return cx * x + cp * p + cq * q + cu * u

    def const(val, cols):
        return lambda s, t, *a: np.full(np.shape(s) + (1, cols), val)

    lip = abs(cx) + abs(cp) + abs(cq)
    return Dynamics(1, 1, f, const(cx, 1), const(cp, 1), const(cq, 1), const(cu, 1), lipschitz_hint=lip)


def _unit_box(lo=-10.0, hi=10.0):
    return ControlBox(np.array([lo]), np.array([hi]))


def _smooth_u0(s, t):
    return (0.3 + 0.2 * np.sin(2 * s + 1) * np.cos(1.5 * t))[..., None]


def _scalar_boundary(x1, x2, dx1, dx2):
    return BoundaryData(lambda s: np.asarray(x1(s))[..., None], lambda t: np.asarray(x2(t))[..., None],
                        np.array([float(x1(np.array(0.0)))]),
                        lambda s: np.asarray(dx1(s))[..., None], lambda t: np.asarray(dx2(t))[..., None])


def _quadratic_costs(x_ref=0.0, weight_u=0.1, u_ref=0.0):
    def Phi(s, t, x, p, q, u):
        return 0.5 * (x[..., 0] - x_ref) ** 2 + 0.5 * weight_u * (u[..., 0] - u_ref) ** 2

    return CostIntegrands(
        Phi=Phi,
        Phi_x=lambda s, t, x, p, q, u: x - x_ref,
        Phi_p=lambda s, t, x, p, q, u: np.zeros_like(x),
        Phi_q=lambda s, t, x, p, q, u: np.zeros_like(x),
        Phi_u=lambda s, t, x, p, q, u: weight_u * (u - u_ref),
    )


def builtin_problem(name: str) -> BuiltinProblem:
    """Named problems used by tests, scripts and the command line."""
    from .geometry import quarter_disk_arcs, rectangle_arcs, staircase_arcs

    if name == "linear_scalar":
        # x_st = x with corner data 1: x = sum (st)^k / (k!)^2
        dyn = _scalar_linear_dynamics(1.0, 0.0, 0.0, 0.0)
        bd = _scalar_boundary(lambda s: 1 + 0 * s, lambda t: 1 + 0 * t, lambda s: 0 * s, lambda t: 0 * t)
        prob = ControlProblem(dyn, CostIntegrands(), _unit_box(), bd, name)
        return BuiltinProblem(name, rectangle_arcs(), [], prob, lambda s, t: np.zeros(np.shape(s) + (1,)),
                              "x_st = x on the unit square, x = 1 on the axes")
    if name == "lq_rectangle":
        dyn = _scalar_linear_dynamics(0.5, 0.3, 0.2)
        bd = _scalar_boundary(lambda s: 0.2 * s, lambda t: 0.1 * t, lambda s: 0.2 + 0 * s, lambda t: 0.1 + 0 * t)
        prob = ControlProblem(dyn, _quadratic_costs(1.0, 0.1), _unit_box(), bd, name)
        return BuiltinProblem(name, rectangle_arcs(), [], prob, _smooth_u0,
                              "scalar linear-quadratic problem on the unit square with p, q coupling")
    if name == "lq_target":
        # optimum u = 1 with x = st and zero co-state
        lam = 0.1

        def f(s, t, x, p, q, u):
            return u

        dyn = Dynamics(1, 1, f, lambda s, t, *a: np.zeros(np.shape(s) + (1, 1)),
                       lambda s, t, *a: np.zeros(np.shape(s) + (1, 1)),
                       lambda s, t, *a: np.zeros(np.shape(s) + (1, 1)),
                       lambda s, t, *a: np.ones(np.shape(s) + (1, 1)), lipschitz_hint=0.0)
        costs = CostIntegrands(
            Phi=lambda s, t, x, p, q, u: (x[..., 0] - s * t) ** 2 + lam * (u[..., 0] - 1) ** 2,
            Phi_x=lambda s, t, x, p, q, u: 2 * (x - (s * t)[..., None]),
            Phi_p=lambda s, t, x, p, q, u: np.zeros_like(x),
            Phi_q=lambda s, t, x, p, q, u: np.zeros_like(x),
            Phi_u=lambda s, t, x, p, q, u: 2 * lam * (u - 1),
        )
        prob = ControlProblem(dyn, costs, ControlBox(np.array([-2.0]), np.array([3.0])), zero_boundary(1), name)
        return BuiltinProblem(name, rectangle_arcs(), [], prob, lambda s, t: np.zeros(np.shape(s) + (1,)),
                              "tracking problem on the unit square with optimum u = 1",
                              {"lambda": lam, "u_opt": 1.0})
    if name == "lq_quarter_disk":
        dyn = _scalar_linear_dynamics(0.5, 0.0, 0.0)
        bd = _scalar_boundary(lambda s: 0.2 * s, lambda t: 0.1 * t, lambda s: 0.2 + 0 * s, lambda t: 0.1 + 0 * t)
        prob = ControlProblem(dyn, _quadratic_costs(0.5, 0.5), _unit_box(), bd, name)
        return BuiltinProblem(name, quarter_disk_arcs(), [], prob, _smooth_u0,
                              "scalar linear-quadratic problem on the quarter disk")
    if name == "quarter_disk_arc":
        dyn = _scalar_linear_dynamics(0.5, 0.0, 0.0)
        bd = _scalar_boundary(lambda s: 0.2 * s, lambda t: 0.1 * t, lambda s: 0.2 + 0 * s, lambda t: 0.1 + 0 * t)
        costs = _quadratic_costs(0.0, 0.2)
        costs.Phi1 = lambda s, t, x, eta: 0.5 * x[..., 0] ** 2 + 0.1 * eta[..., 0] * x[..., 0]
        costs.Phi1_x = lambda s, t, x, eta: x + 0.1 * eta
        costs.Phi1_eta = lambda s, t, x, eta: 0.1 * x
        prob = ControlProblem(dyn, costs, _unit_box(), bd, name)
        return BuiltinProblem(name, quarter_disk_arcs(), [], prob, _smooth_u0,
                              "quarter disk with an arc cost depending on x and its tangential derivative")
    if name == "staircase_vertex":
        dyn = _scalar_linear_dynamics(0.3, 0.2, 0.1)
        bd = _scalar_boundary(lambda s: 0.1 * s, lambda t: 0.05 * t, lambda s: 0.1 + 0 * s, lambda t: 0.05 + 0 * t)
        costs = _quadratic_costs(0.0, 0.2)
        target = 0.5
        at_vertex = lambda s, t: (np.abs(s - 1) < 1e-9) & (np.abs(t - 1) < 1e-9)
        costs.Phi0 = lambda s, t, x: np.where(at_vertex(s, t), (x[..., 0] - target) ** 2, 0.0)
        costs.Phi0_x = lambda s, t, x: np.where(at_vertex(s, t)[..., None], 2 * (x - target), 0.0)
        prob = ControlProblem(dyn, costs, _unit_box(), bd, name)
        return BuiltinProblem(name, staircase_arcs(), [], prob, _smooth_u0,
                              "staircase domain with a vertex cost at (1, 1)")
    if name == "staircase_tangential":
        # arc cost quadratic in the tangential derivative: Phi1_eta jumps at the vertices
        dyn = _scalar_linear_dynamics(0.3, 0.2, 0.1)
        bd = _scalar_boundary(lambda s: 0.1 * s, lambda t: 0.05 * t, lambda s: 0.1 + 0 * s, lambda t: 0.05 + 0 * t)
        costs = _quadratic_costs(0.0, 0.2)
        costs.Phi1 = lambda s, t, x, eta: 0.5 * x[..., 0] ** 2 + 0.2 * eta[..., 0] ** 2
        costs.Phi1_x = lambda s, t, x, eta: x
        costs.Phi1_eta = lambda s, t, x, eta: 0.4 * eta
        prob = ControlProblem(dyn, costs, _unit_box(), bd, name)
        return BuiltinProblem(name, staircase_arcs(), [], prob, _smooth_u0,
                              "staircase domain with an arc cost on the tangential derivative")
    if name == "rectangle_analytic":
        # f = u and costs linear in x: closed-form co-state
        c_area, alpha, beta, gamma, delta, kappa = 0.7, 0.4, 0.3, -0.2, 0.5, 1.1

        def f(s, t, x, p, q, u):
            return u

        z = lambda s, t, *a: np.zeros(np.shape(s) + (1, 1))
        dyn = Dynamics(1, 1, f, z, z, z, lambda s, t, *a: np.ones(np.shape(s) + (1, 1)), lipschitz_hint=0.0)

        def phi1(s, t, x, eta, arc):
            # arc 0: side s = a, F2 = gamma x + delta q; arc 1: side t = b, F1 = alpha x + beta p
            return np.where(arc == 0, gamma * x[..., 0] + delta * eta[..., 0], alpha * x[..., 0] - beta * eta[..., 0])

        costs = CostIntegrands(
            Phi=lambda s, t, x, p, q, u: c_area * x[..., 0] + 0.5 * u[..., 0] ** 2,
            Phi_x=lambda s, t, x, p, q, u: np.full(np.shape(x), c_area),
            Phi_p=lambda s, t, x, p, q, u: np.zeros_like(x),
            Phi_q=lambda s, t, x, p, q, u: np.zeros_like(x),
            Phi_u=lambda s, t, x, p, q, u: u,
            Phi1=phi1,
            Phi1_x=lambda s, t, x, eta, arc: np.where(np.asarray(arc)[..., None] == 0, gamma, alpha) + 0 * x,
            Phi1_eta=lambda s, t, x, eta, arc: np.where(np.asarray(arc)[..., None] == 0, delta, -beta) + 0 * x,
            Phi0=lambda s, t, x: np.where((np.abs(s - 1) < 1e-9) & (np.abs(t - 1) < 1e-9), kappa * x[..., 0], 0.0),
            Phi0_x=lambda s, t, x: np.where(((np.abs(s - 1) < 1e-9) & (np.abs(t - 1) < 1e-9))[..., None], kappa, 0.0) + 0 * x,
            arcwise=True,
        )
        prob = ControlProblem(dyn, costs, _unit_box(), zero_boundary(1), name)
        return BuiltinProblem(name, rectangle_arcs(), [], prob, _smooth_u0,
                              "unit square with uncoupled dynamics and linear costs",
                              {"c": c_area, "alpha": alpha, "beta": beta, "gamma": gamma,
                               "delta": delta, "kappa": kappa})
    raise KeyError(f"unknown problem id {name!r}")


BUILTIN_PROBLEMS = ("linear_scalar", "lq_rectangle", "lq_target", "lq_quarter_disk",
                    "quarter_disk_arc", "staircase_vertex", "staircase_tangential", "rectangle_analytic")
