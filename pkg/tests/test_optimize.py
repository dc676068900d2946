import numpy as np
import pytest

from goursat import optimize as op
from goursat.adjoint import sweep_costate
from goursat.errors import DimensionMismatch, DiskOutsideRegularPart
from goursat.forward import solve_state
from goursat.geometry import build_domain, quarter_disk_arcs
from goursat.problem import ControlBox, ControlProblem, CostIntegrands, Dynamics, zero_boundary

from conftest import setup_builtin

ZERO = lambda s, t, *a: np.zeros(np.shape(s) + (1, 1))
ONE = lambda s, t, *a: np.ones(np.shape(s) + (1, 1))


def uncoupled(costs, box=(-1.0, 1.0)):
    dyn = Dynamics(1, 1, lambda s, t, x, p, q, u: u, ZERO, ZERO, ZERO, ONE, lipschitz_hint=0.0)
    return ControlProblem(dyn, costs, ControlBox(np.array([box[0]]), np.array([box[1]])), zero_boundary(1))


def test_zero_costs(quarter_disk):
    spec = uncoupled(CostIntegrands())
    st_ = solve_state(quarter_disk, spec)
    assert op.cost(quarter_disk, spec, st_).as_dict() == {"area_term": 0.0, "arc_term": 0.0,
                                                          "vertex_term": 0.0, "total": 0.0}
    G, W = op.gradient(quarter_disk, spec, st_, sweep_costate(quarter_disk, spec, st_))
    assert np.all(G == 0)


def test_cost_area_and_arc_length():
    gaps = []
    for h in (1 / 16, 1 / 32):
        dom = build_domain(quarter_disk_arcs(), (), h)
        spec = uncoupled(CostIntegrands(Phi=lambda s, t, x, p, q, u: np.ones(np.shape(s)),
                                        Phi1=lambda s, t, x, eta: np.ones(np.shape(s))))
        c = op.cost(dom, spec, solve_state(dom, spec))
        gaps.append((abs(c.area_term - np.pi / 4), abs(c.arc_term - np.pi / 2)))
        assert gaps[-1][0] < 0.5 * h * h and gaps[-1][1] < 0.5 * h * h


def test_gradient_pointwise_formula():
    lam = 0.3
    costs = CostIntegrands(Phi=lambda s, t, x, p, q, u: 0.5 * x[..., 0] ** 2 + lam * u[..., 0] ** 2,
                           Phi_x=lambda s, t, x, p, q, u: x, Phi_u=lambda s, t, x, p, q, u: 2 * lam * u,
                           Phi_p=lambda s, t, x, p, q, u: np.zeros_like(x),
                           Phi_q=lambda s, t, x, p, q, u: np.zeros_like(x))
    spec = uncoupled(costs)
    dom = build_domain(quarter_disk_arcs(), (), 1 / 16)
    S, T = dom.grid.mesh()
    u = np.sin(S + T)[..., None]
    st_ = solve_state(dom, spec, u=u)
    cs = sweep_costate(dom, spec, st_, u)
    G, W = op.gradient(dom, spec, st_, cs)
    psi = np.zeros(S.shape)
    for b, (p, _, _) in cs.blocks.items():
        blk = dom.blocks[b]
        psi[blk.i0:blk.i1 + 1, blk.j0:blk.j1 + 1] = p[..., 0]
    ins = dom.grid.inside
    assert np.allclose(G[ins][:, 0], 2 * lam * u[ins][:, 0] + psi[ins], atol=1e-12)
    with pytest.raises(DimensionMismatch):
        op.gradient(dom, spec, st_, cs, u=np.zeros(S.shape + (2,)))


def test_fd_cost_derivative_cases():
    dom, bp, u, st_ = setup_builtin("lq_target", 1 / 16)
    assert op.fd_cost_derivative(dom, bp.problem, u, np.zeros_like(u)) == 0.0
    # quadratic in u: central differences are exact up to rounding
    S, T = dom.grid.mesh()
    du = np.cos(S * T)[..., None]
    a = op.fd_cost_derivative(dom, bp.problem, u, du, eps=1e-2)
    b = op.fd_cost_derivative(dom, bp.problem, u, du, eps=1e-4)
    assert abs(a - b) < 1e-9 * max(1.0, abs(a))


@pytest.mark.parametrize("name", ["lq_rectangle", "quarter_disk_arc", "staircase_vertex", "staircase_tangential"])
def test_gradient_matches_finite_differences(name):
    dom, bp, u, st_ = setup_builtin(name, 1 / 32)
    rep = op.gradient_check(dom, bp.problem, u, count=4, seed=1)
    assert rep["max_relative_error"] < 1e-2


def test_tangential_jump_mode_beats_zero_mode():
    dom, bp, u, st_ = setup_builtin("staircase_tangential", 1 / 32)
    kept = op.gradient_check(dom, bp.problem, u, count=3, seed=2)["max_relative_error"]
    dropped = op.gradient_check(dom, bp.problem, u, count=3, seed=2, vr_mode="zero")["max_relative_error"]
    assert kept < dropped / 5


def test_projected_gradient_zero_costs_stops_immediately():
    dom = build_domain(quarter_disk_arcs(), (), 1 / 8)
    S, T = dom.grid.mesh()
    u0 = (0.2 * S)[..., None]
    tr = op.projected_gradient(dom, uncoupled(CostIntegrands()), u0)
    assert tr.converged and len(tr.iterates) == 1
    assert np.allclose(tr.u[dom.grid.inside], u0[dom.grid.inside])


def test_projected_gradient_tracking_problem():
    dom, bp, u0, _ = setup_builtin("lq_target", 1 / 16)
    tr = op.projected_gradient(dom, bp.problem, u0, tol=1e-6)
    J = [it[0] for it in tr.iterates]
    assert tr.converged and tr.iterates[-1][1] < 1e-6
    assert all(b <= a for a, b in zip(J, J[1:]))
    S, T = dom.grid.mesh()
    assert np.abs(tr.state.x[dom.grid.inside][:, 0] - (S * T)[dom.grid.inside]).max() < 1e-5


def test_projected_gradient_clamps_at_active_bound():
    dom, bp, u0, _ = setup_builtin("lq_target", 1 / 16)
    box = ControlBox(np.array([-2.0]), np.array([0.5]))
    tr = op.projected_gradient(dom, bp.problem, u0, box=box, tol=1e-6)
    ins = dom.grid.inside
    assert tr.converged and np.allclose(tr.u[ins], 0.5)
    G, _ = op.gradient(dom, bp.problem, tr.state, tr.costate)
    # -H_u points outward (towards larger u) wherever the bound is active
    assert np.all(G[ins] <= 1e-12)
    assert tr.iterates[-1][3] == 1.0


def test_extremum_report_and_negative_control():
    dom, bp, u0, _ = setup_builtin("lq_target", 1 / 16)
    tr = op.projected_gradient(dom, bp.problem, u0, tol=1e-6)
    good = op.check_extremum(dom, bp.problem, tr.state, tr.costate, tr.u, 50, 11)
    assert good["violations"] == 0 and good["lattice_values"] == 11
    st0 = solve_state(dom, bp.problem, u=u0)
    bad = op.check_extremum(dom, bp.problem, st0, sweep_costate(dom, bp.problem, st0, u0), u0, 50, 11)
    assert bad["violations"] > 0


def test_needle_trivial_variation_and_order():
    dom, bp, u0, _ = setup_builtin("lq_target", 1 / 32)
    tr = op.projected_gradient(dom, bp.problem, u0, tol=1e-6)
    dJ, pred = op.needle_increment(dom, bp.problem, tr.u, (0.5, 0.5), np.array([1.0]), 0.04)
    assert abs(dJ) < 0.04 ** 3 and abs(pred) < 1e-10
    errs = []
    for eps in (0.04, 0.02, 0.01):
        dJ, pred = op.needle_increment(dom, bp.problem, tr.u, (0.5, 0.5), np.array([2.0]), eps)
        assert dJ >= 0
        errs.append(abs(dJ - pred) / (np.pi * eps ** 2))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1)


def test_needle_rejects_disk_near_boundary():
    dom, bp, u0, _ = setup_builtin("lq_target", 1 / 16)
    with pytest.raises(DiskOutsideRegularPart):
        op.needle_increment(dom, bp.problem, u0, (0.95, 0.5), np.array([1.0]), 0.04)


def test_needle_profile_shape():
    eps = 0.02
    r = np.array([0.0, eps / 2, eps, 2 * eps])
    assert np.allclose(op.needle_profile(r, eps), [1, 1, 0, 0])
