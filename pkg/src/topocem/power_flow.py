"""AC (Newton-Raphson, polar form) and DC load flow on a busbar topology."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ContractViolation
from .grid_topology import ElectricalGraph, GridModel, Topology, detect_islands, electrical_graph

TOLERANCE = 1e-8
MAX_ITER = 20
# Below this node count dense LU beats sparse factorisation by a wide margin.
DENSE_LIMIT = 64
SQRT3 = np.sqrt(3.0)


@dataclass
class InjectionSet:
    load_p: np.ndarray  # MW
    load_q: np.ndarray  # MVAr
    gen_p: np.ndarray  # MW, slack entry ignored
    gen_v: np.ndarray  # per-unit setpoints

    def __post_init__(self):
        for name in ("load_p", "load_q", "gen_p", "gen_v"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.gen_v <= 0):
            raise ContractViolation("generator voltage setpoints must be positive")

    @classmethod
    def nominal(cls, grid: GridModel) -> "InjectionSet":
        return cls([ld.p_mw for ld in grid.loads], [ld.q_mvar for ld in grid.loads],
                   [g.p_mw for g in grid.generators], [g.v_pu for g in grid.generators])

    def scaled(self, factor: float) -> "InjectionSet":
        return InjectionSet(self.load_p * factor, self.load_q * factor,
                            self.gen_p * factor, self.gen_v.copy())


@dataclass
class PowerFlowSolution:
    graph: ElectricalGraph
    vm: np.ndarray  # per node, pu; 0 on de-energised nodes
    va: np.ndarray  # per node, rad
    p_or: np.ndarray
    q_or: np.ndarray
    p_ex: np.ndarray
    q_ex: np.ndarray
    a_or: np.ndarray  # A
    a_ex: np.ndarray
    v_or: np.ndarray  # kV
    v_ex: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    gen_v: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    load_v: np.ndarray
    line_in_service: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float = field(default=np.inf)

    @property
    def losses_mw(self) -> float:
        return float(np.sum(self.p_or + self.p_ex))


def _branch_arrays(grid: GridModel):
    r = np.array([ln.r for ln in grid.lines])
    x = np.array([ln.x for ln in grid.lines])
    b = np.array([ln.b for ln in grid.lines])
    return 1.0 / (r + 1j * x), 0.5j * b, x


def build_admittance(grid: GridModel, topology: Topology, graph: ElectricalGraph | None = None):
    """Nodal admittance matrix over electrical nodes (pi line model, pu)."""
    if graph is None:
        graph = electrical_graph(grid, topology)
    ys, ysh, _ = _branch_arrays(grid)
    on = topology.line_in_service
    f, t = graph.line_nodes[on, 0], graph.line_nodes[on, 1]
    y, yh = ys[on], ysh[on]
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([f, t, t, f])
    vals = np.concatenate([y + yh, y + yh, -y, -y])
    n = graph.n_nodes
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)


def power_mismatch(Y, V, sbus, pv, pq):
    """Mismatch vector [dP(pv+pq), dQ(pq)] in pu."""
    mis = V * np.conj(Y @ V) - sbus
    pvpq = np.r_[pv, pq]
    return np.r_[mis[pvpq].real, mis[pq].imag]


def jacobian(Y, V, pv, pq):
    """Polar-form Jacobian d[P(pvpq), Q(pq)] / d[Va(pvpq), Vm(pq)]."""
    ibus = Y @ V
    vnorm = V / np.abs(V)
    if sp.issparse(Y):
        dv = sp.diags(V)
        dvn = sp.diags(vnorm)
        di = sp.diags(ibus)
        ds_dvm = dv @ (Y @ dvn).conj() + di.conj() @ dvn
        ds_dva = 1j * dv @ (di - Y @ dv).conj()
        pvpq = np.r_[pv, pq]
        j11 = ds_dva[pvpq][:, pvpq].real
        j12 = ds_dvm[pvpq][:, pq].real
        j21 = ds_dva[pq][:, pvpq].imag
        j22 = ds_dvm[pq][:, pq].imag
        return sp.bmat([[j11, j12], [j21, j22]], format="csc")
    ds_dvm = V[:, None] * np.conj(Y * vnorm[None, :])
    ds_dvm[np.diag_indices_from(ds_dvm)] += np.conj(ibus) * vnorm
    ds_dva = -1j * V[:, None] * np.conj(Y * V[None, :])
    ds_dva[np.diag_indices_from(ds_dva)] += 1j * V * np.conj(ibus)
    pvpq = np.r_[pv, pq]
    return np.block([
        [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
        [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
    ])


class PreparedNetwork:
    """Topology-dependent data reused across injections (admittance, bus types)."""

    def __init__(self, grid: GridModel, topology: Topology, graph: ElectricalGraph | None = None):
        graph = graph if graph is not None else electrical_graph(grid, topology)
        self.graph = graph
        self.on = topology.line_in_service.copy()
        self.islanded = detect_islands(graph)
        self.ys, self.ysh, self.x = _branch_arrays(grid)
        self.Y_sparse = build_admittance(grid, topology, graph)
        if self.islanded:
            return
        slack_node = graph.gen_node[grid.slack_gen]
        live = np.flatnonzero(graph.component == graph.component[slack_node])
        local = np.full(graph.n_nodes, -1, dtype=np.intp)
        local[live] = np.arange(live.size)
        n = live.size
        self.live, self.local, self.n = live, local, n

        self.c_load = np.zeros((n, grid.n_load))
        self.c_load[local[graph.load_node], np.arange(grid.n_load)] = 1.0
        non_slack = np.arange(grid.n_gen) != grid.slack_gen
        self.c_gen = np.zeros((n, grid.n_gen))
        self.c_gen[local[graph.gen_node[non_slack]], np.flatnonzero(non_slack)] = 1.0

        # the first generator on a node sets its voltage
        first = {}
        for g in range(grid.n_gen):
            first.setdefault(int(local[graph.gen_node[g]]), g)
        self.vset_nodes = np.array(list(first), dtype=np.intp)
        self.vset_gens = np.array(list(first.values()), dtype=np.intp)
        self.ref = int(local[slack_node])
        self.pv = np.array(sorted(k for k in first if k != self.ref), dtype=np.intp)
        self.pq = np.setdiff1d(np.arange(n), np.r_[self.pv, self.ref]).astype(np.intp)
        self.pvpq = np.r_[self.pv, self.pq]
        idx = np.r_[self.pvpq, n + self.pq]
        self.jac_ix = np.ix_(idx, idx)

        Ys = self.Y_sparse[live][:, live]
        self.Y = Ys.toarray() if n <= DENSE_LIMIT else Ys.tocsr()
        self.dense = n <= DENSE_LIMIT

    def sbus(self, grid: GridModel, inj: InjectionSet) -> np.ndarray:
        return (self.c_gen @ inj.gen_p - self.c_load @ (inj.load_p + 1j * inj.load_q)) / grid.base_mva

    def start_vm(self, inj: InjectionSet) -> np.ndarray:
        vm = np.ones(self.n)
        vm[self.vset_nodes] = inj.gen_v[self.vset_gens]
        return vm


def _mismatch(net: PreparedNetwork, V, sbus):
    ibus = net.Y @ V
    mis = V * np.conj(ibus) - sbus
    return np.concatenate([mis.real[net.pvpq], mis.imag[net.pq]]), ibus


def _dense_jacobian(net: PreparedNetwork, V, ibus):
    n = net.n
    Y = net.Y
    vnorm = V / np.abs(V)
    ds_dvm = V[:, None] * np.conj(Y * vnorm[None, :])
    ds_dva = -1j * V[:, None] * np.conj(Y * V[None, :])
    diag = np.arange(n)
    ds_dvm[diag, diag] += np.conj(ibus) * vnorm
    ds_dva[diag, diag] += 1j * V * np.conj(ibus)
    full = np.empty((2 * n, 2 * n))
    full[:n, :n] = ds_dva.real
    full[:n, n:] = ds_dvm.real
    full[n:, :n] = ds_dva.imag
    full[n:, n:] = ds_dvm.imag
    return full[net.jac_ix]


def _newton(net: PreparedNetwork, sbus, vm, va, tol, max_iter):
    V = vm * np.exp(1j * va)
    npvpq = net.pvpq.size
    err = np.inf
    for it in range(max_iter + 1):
        F, ibus = _mismatch(net, V, sbus)
        err = float(np.max(np.abs(F))) if F.size else 0.0
        if not np.isfinite(err):
            return V, False, it, err
        if err <= tol:
            return V, True, it, err
        if it == max_iter:
            break
        try:
            if net.dense:
                dx = np.linalg.solve(_dense_jacobian(net, V, ibus), -F)
            else:
                dx = splu(jacobian(net.Y, V, net.pv, net.pq)).solve(-F)
        except (np.linalg.LinAlgError, RuntimeError):
            return V, False, it, err
        if not np.all(np.isfinite(dx)):
            return V, False, it, err
        va = np.angle(V)
        vm = np.abs(V)
        va[net.pvpq] += dx[:npvpq]
        vm[net.pq] += dx[npvpq:]
        V = vm * np.exp(1j * va)
    return V, False, max_iter, err


def _failed(grid, graph, on, inj) -> PowerFlowSolution:
    z_line = np.zeros(grid.n_line)
    return PowerFlowSolution(
        graph, np.zeros(graph.n_nodes), np.zeros(graph.n_nodes),
        z_line, z_line.copy(), z_line.copy(), z_line.copy(), z_line.copy(), z_line.copy(),
        z_line.copy(), z_line.copy(), np.zeros(grid.n_gen), np.zeros(grid.n_gen),
        np.zeros(grid.n_gen), inj.load_p.copy(), inj.load_q.copy(), np.zeros(grid.n_load),
        on.copy(), False, 0)


def solve_power_flow(grid: GridModel, topology: Topology, injections: InjectionSet,
                     mode: str = "ac", tol: float = TOLERANCE, max_iter: int = MAX_ITER,
                     v0: np.ndarray | None = None, cache: dict | None = None) -> PowerFlowSolution:
    """Load flow for one snapshot.

    Non-convergence, a singular Jacobian or stranded loads/generators yield a
    solution with ``converged=False`` rather than an exception. ``v0`` is an
    optional complex warm start over all electrical nodes. ``cache`` maps
    topology keys to prepared networks and may be shared between calls.
    """
    net = prepare_network(grid, topology, cache)
    if net.islanded:
        return _failed(grid, net.graph, net.on, injections)
    sbus = net.sbus(grid, injections)
    if mode == "dc":
        V, ok, iters, err = _solve_dc(grid, net, sbus)
    elif mode == "ac":
        vm0 = net.start_vm(injections)
        va0 = np.zeros(net.n)
        if v0 is not None:
            vm0[net.pq] = np.abs(v0[net.live])[net.pq]
            va0 = np.angle(v0[net.live])
        V, ok, iters, err = _newton(net, sbus, vm0, va0, tol, max_iter)
    else:
        raise ContractViolation(f"unknown solver mode {mode!r}")
    if not ok:
        sol = _failed(grid, net.graph, net.on, injections)
        sol.iterations, sol.max_mismatch = iters, err
        return sol
    Vfull = np.zeros(net.graph.n_nodes, dtype=complex)
    Vfull[net.live] = V
    return _post_process(grid, net, injections, Vfull, mode, iters, err)


def prepare_network(grid: GridModel, topology: Topology, cache: dict | None = None) -> PreparedNetwork:
    if cache is None:
        return PreparedNetwork(grid, topology)
    key = topology.assignment.tobytes() + topology.line_in_service.tobytes()
    net = cache.get(key)
    if net is None:
        if len(cache) > 256:
            cache.clear()
        net = cache[key] = PreparedNetwork(grid, topology)
    return net


def _solve_dc(grid, net: PreparedNetwork, sbus):
    x = net.x
    g = net.graph
    on = net.on
    f = net.local[g.line_nodes[on, 0]]
    t = net.local[g.line_nodes[on, 1]]
    bx = 1.0 / x[on]
    n = net.n
    B = np.zeros((n, n))
    np.add.at(B, (f, f), bx)
    np.add.at(B, (t, t), bx)
    np.add.at(B, (f, t), -bx)
    np.add.at(B, (t, f), -bx)
    keep = np.setdiff1d(np.arange(n), [net.ref])
    theta = np.zeros(n)
    try:
        theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], sbus.real[keep])
    except np.linalg.LinAlgError:
        return None, False, 0, np.inf
    return np.exp(1j * theta), True, 1, 0.0


def _post_process(grid, net: PreparedNetwork, inj, V, mode, iters, err) -> PowerFlowSolution:
    graph = net.graph
    base = grid.base_mva
    kv = np.asarray(grid.sub_kv)
    on = net.on
    ys, ysh, x = net.ys, net.ysh, net.x
    fn = np.where(on, graph.line_nodes[:, 0], 0)
    tn = np.where(on, graph.line_nodes[:, 1], 0)
    Vf, Vt = V[fn], V[tn]
    kv_f = kv[grid.line_ends[:, 0]]
    kv_t = kv[grid.line_ends[:, 1]]
    mask = on.astype(float)
    if mode == "dc":
        p = (np.angle(Vf) - np.angle(Vt)) / x * base * mask
        sf, st = p + 0j, -p + 0j
        a_or = np.abs(p) / (SQRT3 * kv_f) * 1e3
        a_ex = np.abs(p) / (SQRT3 * kv_t) * 1e3
        s_calc = np.zeros(graph.n_nodes, dtype=complex)
        np.add.at(s_calc, fn, sf)
        np.add.at(s_calc, tn, st)
    else:
        i_f = (ys + ysh) * Vf - ys * Vt
        i_t = (ys + ysh) * Vt - ys * Vf
        sf = Vf * np.conj(i_f) * base * mask
        st = Vt * np.conj(i_t) * base * mask
        a_or = np.abs(i_f) * base / (SQRT3 * kv_f) * 1e3
        a_ex = np.abs(i_t) * base / (SQRT3 * kv_t) * 1e3
        s_calc = np.zeros(graph.n_nodes, dtype=complex)
        s_calc[net.live] = V[net.live] * np.conj(net.Y @ V[net.live]) * base
    vm = np.abs(V)
    node_kv = kv[graph.node_substation]

    # slack takes the residual; reactive output is shared evenly between
    # generators on a voltage-controlled node
    s_load = np.zeros(graph.n_nodes, dtype=complex)
    np.add.at(s_load, graph.load_node, inj.load_p + 1j * inj.load_q)
    gen_total = s_calc + s_load
    gen_p = inj.gen_p.copy()
    slack = grid.slack_gen
    sn = graph.gen_node[slack]
    others = [g for g in range(grid.n_gen) if g != slack and graph.gen_node[g] == sn]
    gen_p[slack] = gen_total[sn].real - sum(gen_p[g] for g in others)
    gen_q = np.zeros(grid.n_gen)
    if mode == "ac":
        counts = np.bincount(graph.gen_node, minlength=graph.n_nodes)
        gen_q = gen_total[graph.gen_node].imag / counts[graph.gen_node]

    return PowerFlowSolution(
        graph=graph, vm=vm, va=np.angle(V),
        p_or=sf.real, q_or=sf.imag, p_ex=st.real, q_ex=st.imag,
        a_or=a_or * mask, a_ex=a_ex * mask,
        v_or=np.abs(Vf) * kv_f * mask, v_ex=np.abs(Vt) * kv_t * mask,
        gen_p=gen_p, gen_q=gen_q, gen_v=vm[graph.gen_node] * node_kv[graph.gen_node],
        load_p=inj.load_p.copy(), load_q=inj.load_q.copy(),
        load_v=vm[graph.load_node] * node_kv[graph.load_node],
        line_in_service=on.copy(), converged=True, iterations=iters, max_mismatch=err,
    )


def compute_loadings(solution: PowerFlowSolution, grid: GridModel) -> np.ndarray:
    """Per-line loading: worst end current over that end's thermal rating."""
    if not solution.converged:
        raise ContractViolation("loadings requested for a non-converged load flow")
    lim = grid.limits_a
    rho = np.maximum(solution.a_or / lim[:, 0], solution.a_ex / lim[:, 1])
    return np.where(solution.line_in_service, rho, 0.0)


def dump_solution_csv(solution: PowerFlowSolution, grid: GridModel, path) -> None:
    rho = compute_loadings(solution, grid) if solution.converged else np.zeros(grid.n_line)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "Vm", "Va"])
        for k in range(solution.graph.n_nodes):
            w.writerow([k, repr(float(solution.vm[k])), repr(float(solution.va[k]))])
        w.writerow(["line", "P", "Q", "I", "rho"])
        for ln in range(grid.n_line):
            w.writerow([ln, repr(float(solution.p_or[ln])), repr(float(solution.q_or[ln])),
                        repr(float(max(solution.a_or[ln], solution.a_ex[ln]))),
                        repr(float(rho[ln]))])


def solve_power_flow_series(grid: GridModel, topology: Topology, load_p, load_q, gen_p, gen_v,
                            tol: float = TOLERANCE, max_iter: int = MAX_ITER):
    """Vectorised AC load flow over many snapshots sharing one topology.

    Returns ``(loadings, converged)`` with shapes (T, n_line) and (T,).
    Used for scenario screening where the topology is frozen.
    """
    load_p, load_q = np.atleast_2d(load_p), np.atleast_2d(load_q)
    gen_p, gen_v = np.atleast_2d(gen_p), np.atleast_2d(gen_v)
    T = load_p.shape[0]
    net = PreparedNetwork(grid, topology)
    if net.islanded:
        return np.zeros((T, grid.n_line)), np.zeros(T, dtype=bool)
    graph, live, n, pv, pq = net.graph, net.live, net.n, net.pv, net.pq
    Y = net.Y_sparse[live][:, live].toarray()
    base = grid.base_mva
    sbus = (gen_p @ net.c_gen.T - (load_p + 1j * load_q) @ net.c_load.T) / base
    vm = np.ones((T, n))
    vm[:, net.vset_nodes] = gen_v[:, net.vset_gens]
    va = np.zeros((T, n))
    pvpq = np.r_[pv, pq]
    npvpq = pvpq.size
    converged = np.zeros(T, dtype=bool)
    active = np.arange(T)
    for it in range(max_iter + 1):
        V = vm[active] * np.exp(1j * va[active])
        ibus = V @ Y.T
        mis = V * np.conj(ibus) - sbus[active]
        F = np.concatenate([mis[:, pvpq].real, mis[:, pq].imag], axis=1)
        err = np.max(np.abs(F), axis=1) if F.shape[1] else np.zeros(len(active))
        done = err <= tol
        converged[active[done]] = True
        keep = ~done & np.isfinite(err)
        active, V, ibus, F = active[keep], V[keep], ibus[keep], F[keep]
        if active.size == 0 or it == max_iter:
            break
        vnorm = V / np.abs(V)
        ds_dvm = V[:, :, None] * np.conj(Y[None] * vnorm[:, None, :])
        ds_dva = -1j * V[:, :, None] * np.conj(Y[None] * V[:, None, :])
        di = np.arange(n)
        ds_dvm[:, di, di] += np.conj(ibus) * vnorm
        ds_dva[:, di, di] += 1j * V * np.conj(ibus)
        J = np.concatenate([
            np.concatenate([ds_dva[:, pvpq][:, :, pvpq].real, ds_dvm[:, pvpq][:, :, pq].real], axis=2),
            np.concatenate([ds_dva[:, pq][:, :, pvpq].imag, ds_dvm[:, pq][:, :, pq].imag], axis=2),
        ], axis=1)
        try:
            dx = np.linalg.solve(J, -F[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            break
        va[active[:, None], pvpq[None, :]] += dx[:, :npvpq]
        vm[active[:, None], pq[None, :]] += dx[:, npvpq:]

    V = vm * np.exp(1j * va)
    Vn = np.zeros((T, graph.n_nodes), dtype=complex)
    Vn[:, live] = V
    ys, ysh, _ = _branch_arrays(grid)
    on = topology.line_in_service
    fn = np.where(on, graph.line_nodes[:, 0], 0)
    tn = np.where(on, graph.line_nodes[:, 1], 0)
    Vf, Vt = Vn[:, fn], Vn[:, tn]
    kv = np.asarray(grid.sub_kv)
    i_f = np.abs((ys + ysh) * Vf - ys * Vt) * base / (SQRT3 * kv[grid.line_ends[:, 0]]) * 1e3
    i_t = np.abs((ys + ysh) * Vt - ys * Vf) * base / (SQRT3 * kv[grid.line_ends[:, 1]]) * 1e3
    lim = grid.limits_a
    rho = np.maximum(i_f / lim[:, 0], i_t / lim[:, 1]) * on
    rho[~converged] = 0.0
    return rho, converged
