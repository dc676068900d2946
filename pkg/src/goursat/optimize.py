"""Cost, gradient, projected-gradient descent and extremum-principle checks."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import binary_erosion

from .adjoint import CostateSolution, sweep_costate
from .errors import DimensionMismatch, DiskOutsideRegularPart, LineSearchFailed
from .forward import StateSolution, extend_control, solve_state
from .geometry import TOL_GEOM, Domain
from .io import fmt, write_csv, write_json
from .problem import ControlBox, ControlProblem, hamiltonian

ARMIJO_C = 1e-4
NEEDLE_SCALE = 0.0566  # ramp width w = eps^3 / NEEDLE_SCALE^2


@dataclass
class CostBreakdown:
    area_term: float
    arc_term: float
    vertex_term: float

    @property
    def total(self):
        return self.area_term + self.arc_term + self.vertex_term

    def as_dict(self):
        return {"area_term": self.area_term, "arc_term": self.arc_term,
                "vertex_term": self.vertex_term, "total": self.total}


@dataclass
class OptimizationTrace:
    iterates: list  # (J, projected-gradient sup-norm, step, active fraction)
    u: np.ndarray
    state: StateSolution
    costate: CostateSolution
    converged: bool
    extremum: dict = field(default_factory=dict)

    def write_csv(self, path):
        rows = [(k, fmt(J), fmt(g), fmt(a), fmt(f)) for k, (J, g, a, f) in enumerate(self.iterates)]
        return write_csv(path, ["iter", "J", "grad_norm", "step", "active_fraction"], rows)


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


def cost(dom: Domain, spec: ControlProblem, state: StateSolution, u=None) -> CostBreakdown:
    """Area, arc and vertex parts of the cost at the solved state."""
    uu = state.u if u is None else extend_control(dom, u)
    S, T = dom.grid.mesh()
    valid = dom.grid.inside
    phi = np.zeros(S.shape)
    phi[valid] = spec.Phi(S[valid], T[valid], state.x[valid], state.x_s[valid], state.x_t[valid], uu[valid])
    area = float(dom.cell_integrals(dom.fill_ghosts(phi)).sum())
    an = dom.arc_nodes
    xs, ps, qs = an.sample(state.x), an.sample(state.x_s), an.sample(state.x_t)
    n1, n2 = an.normal[:, :1], an.normal[:, 1:]
    eta = -n2 * ps + n1 * qs
    phi1 = spec.Phi1(an.pos[:, 0], an.pos[:, 1], xs, eta, an.arc.astype(float))
    arc = float(dom.arc_integral_values(phi1))
    verts = dom.vertices
    xv = np.array([state.x[dom.grid.node_index(v)] for v in verts])
    vertex = float(spec.Phi0(verts[:, 0], verts[:, 1], xv).sum())
    return CostBreakdown(area, arc, vertex)


def solve_and_cost(dom: Domain, spec: ControlProblem, u):
    state = solve_state(dom, spec, u=u)
    return state, cost(dom, spec, state)


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------


def _block_node_weights(dom: Domain):
    """Lumped nodal quadrature weights of each block (ghost weights pulled back)."""
    from .geometry import LL, LR, UL, UR

    ns, nt = dom.grid.shape
    out = {}
    cw = dom.cell_w
    for blk in dom.blocks:
        if blk.kind == "out":
            continue
        mask = dom.block_of_cell == blk.index
        w = np.zeros((ns, nt))
        w[:-1, :-1] += np.where(mask, cw[LL], 0.0)
        w[1:, :-1] += np.where(mask, cw[LR], 0.0)
        w[:-1, 1:] += np.where(mask, cw[UL], 0.0)
        w[1:, 1:] += np.where(mask, cw[UR], 0.0)
        out[blk.index] = dom.ghosts.transpose_add(w)
    return out


def _weights_cache(dom):
    if not hasattr(dom, "_block_weights"):
        dom._block_weights = _block_node_weights(dom)
    return dom._block_weights


def hamiltonian_u_sheets(dom: Domain, spec: ControlProblem, state: StateSolution, costate: CostateSolution):
    """H_u = Phi_u + psi f_u on each block's node box: {block: (ns, nt, m) zero off the box}."""
    S, T = dom.grid.mesh()
    valid = dom.grid.inside
    args = (S[valid], T[valid], state.x[valid], state.x_s[valid], state.x_t[valid], state.u[valid])
    phi_u = np.zeros(S.shape + (spec.m,))
    f_u = np.zeros(S.shape + (spec.n, spec.m))
    phi_u[valid] = spec.Phi_partial("u", *args)
    f_u[valid] = spec.dynamics.partial("u", *args)
    out = {}
    for b, (psi, _, _) in costate.blocks.items():
        blk = dom.blocks[b]
        bsl = (slice(blk.i0, blk.i1 + 1), slice(blk.j0, blk.j1 + 1))
        h = np.zeros(S.shape + (spec.m,))
        h[bsl] = phi_u[bsl] + np.einsum("...i,...ij->...j", psi, f_u[bsl])
        h[~valid] = 0.0
        out[b] = h
    return out


def gradient(dom: Domain, spec: ControlProblem, state: StateSolution, costate: CostateSolution, u=None):
    """Nodal H_u; on vertex lines the sheets are averaged with their quadrature weights.

    Returns (G, W) with sum over nodes of W G du equal to the first variation of J."""
    if u is not None and np.shape(u)[-1] != spec.m:
        raise DimensionMismatch(f"control has {np.shape(u)[-1]} components, expected {spec.m}")
    weights = _weights_cache(dom)
    sheets = hamiltonian_u_sheets(dom, spec, state, costate)
    ns, nt = dom.grid.shape
    num = np.zeros((ns, nt, spec.m))
    W = np.zeros((ns, nt))
    plain = np.zeros((ns, nt, spec.m))
    count = np.zeros((ns, nt))
    for b, h in sheets.items():
        blk = dom.blocks[b]
        num += weights[b][..., None] * h
        W += weights[b]
        box = np.zeros((ns, nt), bool)
        box[blk.i0:blk.i1 + 1, blk.j0:blk.j1 + 1] = True
        plain += np.where(box[..., None], h, 0.0)
        count += box
    scale = max(dom.grid.s_nodes[1] - dom.grid.s_nodes[0], 1e-300) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        G = np.where((np.abs(W) > 1e-12 * scale)[..., None], num / W[..., None],
                     plain / np.maximum(count, 1)[..., None])
    G[~dom.grid.inside] = 0.0
    return G, W


def directional_derivative(dom: Domain, spec: ControlProblem, state: StateSolution, costate: CostateSolution, du):
    """First variation of J along du from the co-state."""
    G, W = gradient(dom, spec, state, costate)
    du = np.asarray(du, float)
    return float(np.einsum("ij,ijk,ijk->", W, G, np.where(dom.grid.inside[..., None], du, 0.0)))


def fd_cost_derivative(dom: Domain, spec: ControlProblem, u, du, eps=1e-4):
    """Central difference (J(u + eps du) - J(u - eps du)) / (2 eps) with full re-solves."""
    u = np.asarray(u, float)
    du = np.asarray(du, float)
    if not np.any(du[dom.grid.inside]):
        return 0.0
    jp = solve_and_cost(dom, spec, u + eps * du)[1].total
    jm = solve_and_cost(dom, spec, u - eps * du)[1].total
    return (jp - jm) / (2 * eps)


def smooth_directions(dom: Domain, m, count, seed=0):
    """Random low-frequency trigonometric fields used as test directions."""
    rng = np.random.default_rng(seed)
    S, T = dom.grid.mesh()
    out = []
    for _ in range(count):
        du = np.zeros(S.shape + (m,))
        for c in range(m):
            for _k in range(3):
                a, b = rng.uniform(0.5, 3.0, 2)
                ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
                du[..., c] += rng.normal() * np.cos(a * S + ph1) * np.cos(b * T + ph2)
        out.append(du)
    return out


def gradient_check(dom: Domain, spec: ControlProblem, u, count=10, seed=0, eps=1e-4, floor_fraction=0.1,
                   workers=1, vr_mode="tangential_jump"):
    """Keystone comparison of the co-state first variation with central differences.

    The relative error is |adjoint - fd| / max(|fd|, floor) with floor =
    floor_fraction * ||H_u|| ||du|| (weighted L2 norms), which guards against
    directions nearly orthogonal to the gradient."""
    from .adjoint import compute_F_terms

    u = np.asarray(u, float)
    state = solve_state(dom, spec, u=u)
    ft = compute_F_terms(dom, spec, state, u, vr_mode=vr_mode)
    cs = sweep_costate(dom, spec, state, u, fterms=ft)
    G, W = gradient(dom, spec, state, cs)
    Wabs = np.abs(W)
    g_norm = float(np.sqrt(np.einsum("ij,ijk,ijk->", Wabs, G, G)))
    dirs = smooth_directions(dom, spec.m, count, seed)
    adj = [float(np.einsum("ij,ijk,ijk->", W, G, np.where(dom.grid.inside[..., None], du, 0.0))) for du in dirs]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        fd = list(ex.map(lambda du: fd_cost_derivative(dom, spec, u, du, eps), dirs))
    floors = [floor_fraction * g_norm * float(np.sqrt(np.einsum("ij,ijk,ijk->", Wabs, du, du))) + 1e-300
              for du in dirs]
    rel = [abs(a - f) / max(abs(f), fl) for a, f, fl in zip(adj, fd, floors)]
    raw = [abs(a - f) / max(abs(f), 1e-300) for a, f in zip(adj, fd)]
    return {"adjoint": adj, "fd": fd, "floor": floors, "relative_error": rel, "raw_relative_error": raw,
            "max_relative_error": max(rel), "vr_mode": vr_mode, "eps": eps, "count": count, "seed": seed}


# ---------------------------------------------------------------------------
# descent
# ---------------------------------------------------------------------------


def _state_costate(dom, spec, u):
    state = solve_state(dom, spec, u=u)
    cs = sweep_costate(dom, spec, state, u)
    return state, cs


@dataclass
class DescentResult:
    iterates: list
    u: np.ndarray
    payload: object
    converged: bool


def projected_descent(evaluate, value, u0, box: ControlBox, mask, tol=1e-6, max_iter=200, step="armijo",
                      max_halvings=60) -> DescentResult:
    """Projected gradient loop on a nodal control field.

    evaluate(u) -> (J, G, W, payload) with the nodal gradient G and weights W;
    value(u) -> J.  Trial steps start from 1/|G|_sup (doubled after each
    accepted step) or from the Barzilai-Borwein length when step == 'bb'."""
    if step not in ("armijo", "bb"):
        raise ValueError("step must be 'armijo' or 'bb'")
    ex = mask[..., None]
    u = np.where(ex, box.project(np.asarray(u0, float)), 0.0)
    J, G, W, payload = evaluate(u)
    Wpos = np.maximum(W, 0.0)
    iterates = []
    prev_alpha = None
    prev = None
    converged = False
    for it in range(max_iter + 1):
        pg = u - np.where(ex, box.project(u - G), 0.0)
        pg_norm = float(np.abs(pg[mask]).max()) if mask.any() else 0.0
        iterates.append((J, pg_norm, prev_alpha or 0.0, _active_fraction(u, box, mask)))
        if pg_norm < tol:
            converged = True
            break
        if it == max_iter:
            break
        alpha = 1.0 / max(float(np.abs(G[mask]).max()), 1e-300)
        if prev_alpha is not None:
            alpha = max(alpha, 2 * prev_alpha)
        if step == "bb" and prev is not None:
            du, dg = u - prev[0], G - prev[1]
            curv = float(np.einsum("ij,ijk,ijk->", Wpos, du, dg))
            if curv > 0:
                alpha = float(np.einsum("ij,ijk,ijk->", Wpos, du, du)) / curv
        for _ in range(max_halvings):
            trial = np.where(ex, box.project(u - alpha * G), 0.0)
            J_t = value(trial)
            decrease = float(np.einsum("ij,ijk,ijk->", Wpos, G, trial - u))
            if J_t <= J + ARMIJO_C * decrease:
                break
            alpha *= 0.5
        else:
            raise LineSearchFailed(f"Armijo backtracking failed at iteration {it} (J={J:.6g})")
        prev = (u, G)
        u = trial
        J, G, W, payload = evaluate(u)
        Wpos = np.maximum(W, 0.0)
        prev_alpha = alpha
    return DescentResult(iterates, u, payload, converged)


def projected_gradient(dom: Domain, spec: ControlProblem, u0, box: ControlBox | None = None, tol=1e-6,
                       max_iter=200, step="armijo") -> OptimizationTrace:
    """Projected steepest descent with Armijo backtracking on the cost."""
    box = spec.box if box is None else box

    def evaluate(u):
        state, cs = _state_costate(dom, spec, u)
        G, W = gradient(dom, spec, state, cs)
        return cost(dom, spec, state).total, G, W, (state, cs)

    def value(u):
        return cost(dom, spec, solve_state(dom, spec, u=u)).total

    res = projected_descent(evaluate, value, u0, box, dom.grid.inside, tol, max_iter, step)
    state, cs = res.payload
    return OptimizationTrace(res.iterates, res.u, state, cs, res.converged)


def _active_fraction(u, box, inside):
    lo, hi = np.asarray(box.lower, float), np.asarray(box.upper, float)
    at = (np.abs(u - lo) <= 1e-12) | (np.abs(u - hi) <= 1e-12)
    return float(at[inside].any(axis=-1).mean()) if inside.any() else 0.0


# ---------------------------------------------------------------------------
# extremum principle
# ---------------------------------------------------------------------------


def regular_interior_nodes(dom: Domain, margin=1):
    """Interior nodes at least `margin` nodes away from vertex lines and the curve."""
    grid = dom.grid
    ok = binary_erosion(grid.inside & (grid.mask == 1), iterations=margin, border_value=0)
    for i in dom.s_level_idx:
        ok[max(0, i - margin):i + margin + 1, :] = False
    for j in dom.t_level_idx:
        ok[:, max(0, j - margin):j + margin + 1] = False
    return np.argwhere(ok)


def check_extremum(dom: Domain, spec: ControlProblem, state: StateSolution, costate: CostateSolution, u=None,
                   sample_count=200, lattice=11, seed=0, tol=1e-6):
    """Sample regular interior points and test H(u*) <= H(u1) + tol * scale over a lattice of u1."""
    u = state.u if u is None else np.asarray(u, float)
    nodes = regular_interior_nodes(dom)
    rng = np.random.default_rng(seed)
    pick = nodes[rng.choice(len(nodes), size=min(sample_count, len(nodes)), replace=False)]
    axes = [np.linspace(lo, hi, lattice) for lo, hi in zip(spec.box.lower, spec.box.upper)]
    cand = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, spec.m)
    s_nodes, t_nodes = dom.grid.s_nodes, dom.grid.t_nodes
    violations = []
    worst = 0.0
    for i, j in pick:
        b = costate.block_containing(dom, (s_nodes[i], t_nodes[j]))
        psi = costate.value(dom, (i, j), b)
        k = len(cand)
        args = (np.full(k, s_nodes[i]), np.full(k, t_nodes[j]), np.repeat(state.x[i, j][None], k, 0),
                np.repeat(state.x_s[i, j][None], k, 0), np.repeat(state.x_t[i, j][None], k, 0),
                np.repeat(psi[None], k, 0))
        h_star = float(hamiltonian(spec, *(v[:1] for v in args), u[i, j][None])[0])
        h_cand = hamiltonian(spec, *args, cand)
        scale = max(1.0, abs(h_star))
        gap = h_star - h_cand.min()
        worst = max(worst, gap / scale)
        if gap > tol * scale:
            violations.append({"s": float(s_nodes[i]), "t": float(t_nodes[j]), "gap": float(gap),
                               "u_star": u[i, j].tolist(), "u_best": cand[int(np.argmin(h_cand))].tolist()})
    return {"samples": int(len(pick)), "lattice_values": int(len(cand)), "tol": tol,
            "violations": len(violations), "worst_relative_gap": worst, "details": violations[:20],
            "seed": seed}


def write_extremum_report(path, report):
    return write_json(path, report)


# ---------------------------------------------------------------------------
# needle variations
# ---------------------------------------------------------------------------


def _as_callable(dom, u):
    if callable(u):
        return u
    u = np.asarray(u, float)
    interp = RegularGridInterpolator((dom.grid.s_nodes, dom.grid.t_nodes), extend_control(dom, u),
                                     bounds_error=False, fill_value=None)

    def f(S, T):
        pts = np.stack([np.ravel(S), np.ravel(T)], axis=-1)
        return interp(pts).reshape(np.shape(S) + (u.shape[-1],))

    return f


def needle_profile(radius, eps):
    """1 on the plateau r <= eps - w, linear to 0 at r = eps."""
    w = min(eps, eps ** 3 / NEEDLE_SCALE ** 2)
    return np.clip((eps - radius) / w, 0.0, 1.0)


def needle_increment(dom: Domain, spec: ControlProblem, u, center, u1, eps, points_per_ramp=4, workers=1):
    """Cost increment of a disk-supported variation and its first-order prediction.

    Returns (delta_J, predicted) with predicted = pi eps^2 [H(u1) - H(u*)] at the centre."""
    c = np.asarray(center, float)
    for lvl in dom.s_levels:
        if abs(c[0] - lvl) < 2 * eps:
            raise DiskOutsideRegularPart(f"disk around {tuple(c)} meets the vertex line s={lvl}")
    for lvl in dom.t_levels:
        if abs(c[1] - lvl) < 2 * eps:
            raise DiskOutsideRegularPart(f"disk around {tuple(c)} meets the vertex line t={lvl}")
    ang = np.linspace(0, 2 * np.pi, 65)
    ring = c[None] + 2 * eps * np.stack([np.cos(ang), np.sin(ang)], -1)
    if not all(dom.contains(p) for p in ring):
        raise DiskOutsideRegularPart(f"disk of radius {2 * eps} around {tuple(c)} leaves the domain")
    ufun = _as_callable(dom, u)
    w = min(eps, eps ** 3 / NEEDLE_SCALE ** 2)
    h_loc = min(dom.h_max, w / points_per_ramp, eps / 8)
    refine_s = [(c[0] - eps, c[0] + eps, h_loc)]
    refine_t = [(c[1] - eps, c[1] + eps, h_loc)]
    fine = Domain(dom.arcs, dom.h_max, refine_s, refine_t)
    S, T = fine.grid.mesh()
    base_u = np.where(fine.grid.inside[..., None], ufun(S, T), 0.0)
    u_c = ufun(np.array([c[0]]), np.array([c[1]]))[0]
    delta = np.asarray(u1, float) - u_c
    prof = needle_profile(np.hypot(S - c[0], T - c[1]), eps)
    var_u = base_u + prof[..., None] * delta
    with ThreadPoolExecutor(max_workers=max(1, min(2, workers))) as ex:
        fb = ex.submit(solve_and_cost, fine, spec, base_u)
        fv = ex.submit(solve_and_cost, fine, spec, var_u)
        (st0, J0), (_, J1) = fb.result(), fv.result()
    cs = sweep_costate(fine, spec, st0, base_u)
    node = fine.grid.node_index(c) if _on_grid(fine, c) else _nearest(fine, c)
    b = cs.block_containing(fine, (fine.grid.s_nodes[node[0]], fine.grid.t_nodes[node[1]]))
    psi = cs.value(fine, node, b)
    sc, tc = np.array([fine.grid.s_nodes[node[0]]]), np.array([fine.grid.t_nodes[node[1]]])
    xs = tuple(v[node][None] for v in (st0.x, st0.x_s, st0.x_t))
    H1 = hamiltonian(spec, sc, tc, *xs, psi[None], (u_c + delta)[None])[0]
    H0 = hamiltonian(spec, sc, tc, *xs, psi[None], u_c[None])[0]
    return float(J1.total - J0.total), float(np.pi * eps ** 2 * (H1 - H0))


def _on_grid(dom, c):
    s, t = dom.grid.s_nodes, dom.grid.t_nodes
    return np.min(np.abs(s - c[0])) <= TOL_GEOM and np.min(np.abs(t - c[1])) <= TOL_GEOM


def _nearest(dom, c):
    return (int(np.argmin(np.abs(dom.grid.s_nodes - c[0]))), int(np.argmin(np.abs(dom.grid.t_nodes - c[1]))))
