import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goursat.errors import NoConvergence
from goursat.forward import (
    VolterraSystem,
    WeightedNorm,
    contraction_factor,
    full_region,
    picard_solve,
    solve_state,
    state_variation,
    weighted_norm,
)
from goursat.geometry import build_domain, quarter_disk_arcs, rectangle_arcs
from goursat.problem import (
    BoundaryData,
    ControlBox,
    ControlProblem,
    CostIntegrands,
    Dynamics,
    builtin_problem,
    zero_boundary,
)


def series(z, c=1.0, terms=30):
    return sum(c ** k * z ** k / math.factorial(k) ** 2 for k in range(terms))


def spec_of(f, boundary=None, n=1):
    box = ControlBox(-np.inf * np.ones(1), np.inf * np.ones(1))
    return ControlProblem(Dynamics(n, 1, f), CostIntegrands(), box, boundary or zero_boundary(n))


def test_zero_dynamics_superposes_boundary_data():
    bd = BoundaryData(lambda s: 1 + np.sin(s), lambda t: 1 + t ** 2, np.array([1.0]),
                      lambda s: np.cos(s), lambda t: 2 * t)
    dom = build_domain(quarter_disk_arcs(), (), 1 / 16)
    st_ = solve_state(dom, spec_of(lambda s, t, x, p, q, u: 0 * x, bd))
    S, T = dom.grid.mesh()
    ins = dom.grid.inside
    assert np.allclose(st_.x[ins][:, 0], (1 + np.sin(S) + 1 + T ** 2 - 1)[ins], atol=1e-14)
    assert st_.iterations <= 2


def test_unit_control_gives_product():
    dom = build_domain(rectangle_arcs(), (), 1 / 32)
    S, T = dom.grid.mesh()
    st_ = solve_state(dom, spec_of(lambda s, t, x, p, q, u: u), u=np.ones(S.shape + (1,)))
    assert np.allclose(st_.x[..., 0], S * T, atol=1e-12)
    assert np.allclose(st_.x_s[..., 0], T, atol=1e-12)
    assert np.allclose(st_.x_t[..., 0], S, atol=1e-12)


def test_series_oracle_at_corner():
    bp = builtin_problem("linear_scalar")
    dom = build_domain(bp.arcs, (), 1 / 256)
    st_ = solve_state(dom, bp.problem)
    assert abs(st_.x[-1, -1, 0] - series(1.0)) < 1e-6


def test_boundary_data_exact_on_axes():
    bp = builtin_problem("lq_quarter_disk")
    dom = build_domain(bp.arcs, bp.extra_vertices, 1 / 16)
    S, T = dom.grid.mesh()
    st_ = solve_state(dom, bp.problem, u=bp.u0(S, T))
    x1, x2, *_ = bp.problem.boundary.values(dom.grid.s_nodes, dom.grid.t_nodes, 1)
    ins = dom.grid.inside
    assert np.allclose(st_.x[ins[:, 0], 0], x1[ins[:, 0]], atol=1e-14)
    assert np.allclose(st_.x[0, ins[0, :]], x2[ins[0, :]], atol=1e-14)


def test_derivatives_consistent_with_differences():
    bp = builtin_problem("lq_rectangle")
    errs = []
    for h in (1 / 16, 1 / 32):
        dom = build_domain(bp.arcs, (), h)
        S, T = dom.grid.mesh()
        st_ = solve_state(dom, bp.problem, u=bp.u0(S, T))
        x = st_.x[..., 0]
        ds = (x[2:, 1:-1] - x[:-2, 1:-1]) / (2 * h)
        mixed = (x[2:, 2:] - x[2:, :-2] - x[:-2, 2:] + x[:-2, :-2]) / (4 * h * h)
        errs.append((np.abs(ds - st_.x_s[1:-1, 1:-1, 0]).max(), np.abs(mixed - st_.x_st[1:-1, 1:-1, 0]).max()))
    for k in range(2):
        assert errs[1][k] < errs[0][k] / 3


def test_curvilinear_restriction_equals_rectangle_solve():
    bp = builtin_problem("lq_quarter_disk")
    h = 1 / 32
    dom = build_domain(bp.arcs, bp.extra_vertices, h)
    S, T = dom.grid.mesh()
    st_ = solve_state(dom, bp.problem, u=bp.u0(S, T))
    i, j = dom.grid.node_index((0.5, 0.5))
    box = build_domain(rectangle_arcs(0.5, 0.5), (), h)
    Sb, Tb = box.grid.mesh()
    st_box = solve_state(box, bp.problem, u=bp.u0(Sb, Tb))
    assert np.allclose(st_.x[:i + 1, :j + 1], st_box.x, atol=1e-12)


def test_picard_zero_kernel_returns_seed():
    dom = build_domain(rectangle_arcs(), (), 1 / 8)
    shape = dom.grid.shape + (1,)
    seed = (np.full(shape, 2.0), np.zeros(shape), np.zeros(shape))
    res = picard_solve(VolterraSystem(full_region(dom), lambda a, b, c: 0 * a, seed, dom.grid.inside))
    assert res.iterations == 1 and np.allclose(res.psi, 2.0)


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_picard_linear_kernel_series(c):
    dom = build_domain(rectangle_arcs(), (), 1 / 64)
    shape = dom.grid.shape + (1,)
    seed = (np.ones(shape), np.zeros(shape), np.zeros(shape))
    res = picard_solve(VolterraSystem(full_region(dom, "backward"), lambda a, b, q: c * a, seed,
                                      dom.grid.inside, lipschitz_hint=c), tol=1e-13)
    S, T = dom.grid.mesh()
    assert np.abs(res.psi[..., 0] - series((1 - S) * (1 - T), c)).max() < 5e-5 * c


@pytest.mark.parametrize("L", [0.5, 2.0, 8.0])
def test_picard_ratio_below_contraction_bound(L):
    dom = build_domain(rectangle_arcs(), (), 1 / 32)
    shape = dom.grid.shape + (1,)
    seed = (np.ones(shape), np.zeros(shape), np.zeros(shape))
    res = picard_solve(VolterraSystem(full_region(dom), lambda a, b, q: L * a, seed, dom.grid.inside,
                                      lipschitz_hint=L), tol=1e-12)
    bound = contraction_factor(L, res.rho, 1, 1)
    assert max(res.psi_ratio_history) <= bound + 0.05


def test_picard_no_convergence_raises():
    dom = build_domain(rectangle_arcs(), (), 1 / 8)
    shape = dom.grid.shape + (1,)
    seed = (np.ones(shape), np.zeros(shape), np.zeros(shape))
    with pytest.raises(NoConvergence):
        picard_solve(VolterraSystem(full_region(dom), lambda a, b, q: 50 * a, seed, dom.grid.inside),
                     max_iter=3)


def test_weighted_norm_examples():
    s = np.linspace(0, 1, 11)
    t = np.linspace(0, 1, 11)
    f = np.zeros((11, 11))
    f[3, 4] = -3
    assert weighted_norm(f, WeightedNorm(0.0), s, t) == 3
    corner = WeightedNorm(2.0, (1.0, 1.0))
    assert weighted_norm(np.ones((11, 11)), corner, s, t) == pytest.approx(1.0)
    spike = np.zeros((11, 11))
    spike[0, 0] = 1
    assert weighted_norm(spike, WeightedNorm(1.0, (1.0, 1.0)), s, t) == pytest.approx(np.exp(-2))


def test_state_variation_examples():
    dom = build_domain(rectangle_arcs(), (), 1 / 16)
    S, T = dom.grid.mesh()
    spec = spec_of(lambda s, t, x, p, q, u: u)
    u = np.zeros(S.shape + (1,))
    base = solve_state(dom, spec, u=u)
    assert np.allclose(state_variation(dom, spec, base, u, np.zeros_like(u)), 0)
    assert np.allclose(state_variation(dom, spec, base, u, np.ones_like(u))[..., 0], S * T, atol=1e-12)


def test_state_variation_matches_difference_quotient():
    bp = builtin_problem("lq_quarter_disk")
    dom = build_domain(bp.arcs, bp.extra_vertices, 1 / 16)
    S, T = dom.grid.mesh()
    u = bp.u0(S, T)
    du = np.sin(2 * S + T)[..., None]
    base = solve_state(dom, bp.problem, u=u)
    dx = state_variation(dom, bp.problem, base, u, du)
    eps = 1e-6
    fd = (solve_state(dom, bp.problem, u=u + eps * du).x - base.x) / eps
    ins = dom.grid.inside
    assert np.abs(dx[ins] - fd[ins]).max() < 1e-5


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_contraction_factor_decreases_with_rho(L, rho):
    assert contraction_factor(L, 2 * rho, 1, 1) < contraction_factor(L, rho, 1, 1)
