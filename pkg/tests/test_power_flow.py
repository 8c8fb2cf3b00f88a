import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import assume, given, settings, strategies as st

from conftest import grid_doc, grid_variant
from reference_flow import reference_flow
from topocem import power_flow
from topocem.errors import ContractViolation
from topocem.grid_topology import Topology, apply_action, electrical_graph, grid_from_dict
from topocem.power_flow import (InjectionSet, build_admittance, compute_loadings,
                                dump_solution_csv, jacobian, power_mismatch, solve_power_flow,
                                solve_power_flow_series)


def two_bus(r=0.0, x=0.1, b=0.0):
    return grid_from_dict({
        "schema_version": 1, "name": "two-bus",
        "bases": {"mva": 100.0, "kv": {"transmission": 138.0}},
        "substations": [{"id": 0, "level": "transmission"}, {"id": 1, "level": "transmission"}],
        "lines": [{"from": 0, "to": 1, "r_pu": r, "x_pu": x, "b_pu": b, "limit_a": 1000}],
        "loads": [{"substation": 1, "p_mw": 100.0, "q_mvar": 0.0}],
        "generators": [{"substation": 0, "type": "thermal", "slack": True, "v_pu": 1.0}],
    })


def nominal(grid):
    return InjectionSet.nominal(grid)


def random_topology(grid, catalog, picks):
    topo = Topology.base(grid)
    cd = np.zeros(grid.n_sub, dtype=int)
    for k in picks:
        cd[:] = 0
        topo, _ = apply_action(grid, topo, catalog[k], cd)
    return topo


def test_two_bus_admittance():
    g = two_bus(r=0.02, x=0.1)
    Y = build_admittance(g, Topology.base(g)).toarray()
    y = 1 / complex(0.02, 0.1)
    assert Y[0, 1] == pytest.approx(-y) and Y[1, 0] == pytest.approx(-y)
    assert Y[0, 0] == pytest.approx(y)


def test_two_bus_dc():
    g = two_bus()
    sol = solve_power_flow(g, Topology.base(g), nominal(g), mode="dc")
    assert sol.converged
    assert sol.va[1] == pytest.approx(-0.1, abs=1e-12)
    assert sol.p_or[0] == pytest.approx(100.0, abs=1e-9)


def test_admittance_row_sums_are_shunts(grid):
    Y = build_admittance(grid, Topology.base(grid)).toarray()
    shunt = np.zeros(14, dtype=complex)
    for ln in grid.lines:
        shunt[[ln.from_sub, ln.to_sub]] += 0.5j * ln.b
    np.testing.assert_allclose(Y.sum(axis=1), shunt, atol=1e-12)
    assert (np.abs(Y - Y.T) < 1e-12).all()


def test_admittance_grows_with_split(grid, catalog):
    topo = random_topology(grid, catalog, [95])
    assert build_admittance(grid, topo).shape == (15, 15)
    assert build_admittance(grid, Topology.base(grid)).shape == (14, 14)


def test_admittance_all_lines_out_is_diagonal(grid):
    topo = Topology.base(grid)
    topo.line_in_service[:] = False
    Y = build_admittance(grid, topo).toarray()
    assert np.count_nonzero(Y - np.diag(np.diag(Y))) == 0


def test_base_case_matches_reference(grid):
    inj = nominal(grid)
    sol = solve_power_flow(grid, Topology.base(grid), inj)
    assert sol.converged and sol.iterations <= 10
    V_ref, flows = reference_flow(grid_doc(), inj.load_p, inj.load_q, inj.gen_p, inj.gen_v)
    V = sol.vm * np.exp(1j * sol.va)
    assert np.abs(V - V_ref).max() < 1e-6
    s_or = (sol.p_or + 1j * sol.q_or) / grid.base_mva
    s_ex = (sol.p_ex + 1j * sol.q_ex) / grid.base_mva
    assert np.abs(s_or - flows[:, 0]).max() < 1e-6
    assert np.abs(s_ex - flows[:, 1]).max() < 1e-6


def test_mismatch_below_tolerance(grid):
    sol = solve_power_flow(grid, Topology.base(grid), nominal(grid))
    assert sol.max_mismatch <= 1e-8


def test_zero_injection_trivial_fixed_point():
    g = grid_variant(charging=False, setpoints=1.0)
    z = InjectionSet(np.zeros(11), np.zeros(11), np.zeros(5), np.ones(5))
    sol = solve_power_flow(g, Topology.base(g), z)
    assert sol.converged and sol.iterations <= 1
    np.testing.assert_allclose(sol.vm, 1.0)
    np.testing.assert_allclose(sol.va, 0.0)
    for arr in (sol.p_or, sol.q_or, sol.a_or, sol.a_ex):
        assert np.abs(arr).max() == 0.0
    assert (compute_loadings(sol, g) == 0).all()


def test_scaling_loads_to_zero_gives_zero_flows():
    g = grid_variant(charging=False, setpoints=1.0)
    inj = nominal(g).scaled(0.0)
    inj.gen_v[:] = 1.0
    sol = solve_power_flow(g, Topology.base(g), inj)
    assert np.abs(sol.p_or).max() < 1e-9 and np.abs(sol.q_or).max() < 1e-9


def test_line_current_consistency(grid):
    sol = solve_power_flow(grid, Topology.base(grid), nominal(grid))
    s_or = np.hypot(sol.p_or, sol.q_or)
    s_ex = np.hypot(sol.p_ex, sol.q_ex)
    np.testing.assert_allclose(sol.a_or, s_or / (np.sqrt(3) * sol.v_or) * 1e3, rtol=1e-10)
    np.testing.assert_allclose(sol.a_ex, s_ex / (np.sqrt(3) * sol.v_ex) * 1e3, rtol=1e-10)


def test_split_with_empty_busbar_is_unsplit(grid):
    base = solve_power_flow(grid, Topology.base(grid), nominal(grid))
    topo = Topology.base(grid)
    topo.assignment[grid.substations[3].positions] = 2
    moved = solve_power_flow(grid, topo, nominal(grid))
    np.testing.assert_allclose(moved.p_or, base.p_or, atol=1e-12)
    np.testing.assert_allclose(moved.q_ex, base.q_ex, atol=1e-12)


def test_islanded_topology_not_converged(grid):
    topo = Topology.base(grid)
    topo.line_in_service[[11, 14]] = False
    sol = solve_power_flow(grid, topo, nominal(grid))
    assert not sol.converged
    with pytest.raises(ContractViolation):
        compute_loadings(sol, grid)


def test_non_convergence_reported(grid):
    sol = solve_power_flow(grid, Topology.base(grid), nominal(grid).scaled(8.0))
    assert not sol.converged


def test_unknown_mode(grid):
    with pytest.raises(ContractViolation):
        solve_power_flow(grid, Topology.base(grid), nominal(grid), mode="hvdc")


def test_loading_examples(grid):
    sol = solve_power_flow(grid, Topology.base(grid), nominal(grid))
    a = np.zeros(20)
    a[9], a[18] = 760.0, 1000.0
    fake = dataclasses.replace(sol, a_or=a.copy(), a_ex=a.copy())
    rho = compute_loadings(fake, grid)
    assert rho[9] == pytest.approx(1.0) and rho[18] == pytest.approx(0.5)


def test_loading_zero_for_out_of_service(grid):
    topo = Topology.base(grid)
    topo.line_in_service[0] = False
    sol = solve_power_flow(grid, topo, nominal(grid))
    rho = compute_loadings(sol, grid)
    assert rho[0] == 0 and sol.a_or[0] == 0 and sol.p_or[0] == 0
    assert (rho >= 0).all()


def test_transformer_limit_scaled_to_low_voltage_side(grid):
    lim = grid.limits_a
    assert lim[17, 0] == 380
    assert lim[17, 1] == pytest.approx(380 * 138 / 20)


def test_sparse_path_matches_dense(grid, catalog, monkeypatch):
    topo = random_topology(grid, catalog, [95, 40])
    dense = solve_power_flow(grid, topo, nominal(grid))
    monkeypatch.setattr(power_flow, "DENSE_LIMIT", 0)
    sparse = solve_power_flow(grid, topo, nominal(grid))
    np.testing.assert_allclose(sparse.vm, dense.vm, atol=1e-10)
    np.testing.assert_allclose(sparse.a_or, dense.a_or, rtol=1e-9)


def test_warm_start(grid):
    topo = Topology.base(grid)
    cold = solve_power_flow(grid, topo, nominal(grid))
    warm = solve_power_flow(grid, topo, nominal(grid), v0=cold.vm * np.exp(1j * cold.va))
    assert warm.iterations <= 1
    np.testing.assert_allclose(warm.vm, cold.vm, atol=1e-9)


def test_series_matches_single(grid, catalog):
    topo = random_topology(grid, catalog, [65])
    inj = nominal(grid)
    scales = np.array([0.6, 0.9, 1.1])
    lp = inj.load_p * scales[:, None]
    lq = inj.load_q * scales[:, None]
    gp = inj.gen_p * scales[:, None]
    gv = np.tile(inj.gen_v, (3, 1))
    rho, ok = solve_power_flow_series(grid, topo, lp, lq, gp, gv)
    assert ok.all()
    for t in range(3):
        sol = solve_power_flow(grid, topo, InjectionSet(lp[t], lq[t], gp[t], gv[t]))
        np.testing.assert_allclose(rho[t], compute_loadings(sol, grid), atol=1e-10)


def test_dump_csv(grid, tmp_path):
    sol = solve_power_flow(grid, Topology.base(grid), nominal(grid))
    path = tmp_path / "sol.csv"
    dump_solution_csv(sol, grid, path)
    text = path.read_text().splitlines()
    assert text[0] == "node,Vm,Va" and "line,P,Q,I,rho" in text


def _bus_types(grid, topo):
    g = electrical_graph(grid, topo)
    gen_nodes = set(g.gen_node.tolist())
    ref = g.gen_node[grid.slack_gen]
    pv = np.array(sorted(gen_nodes - {ref}))
    pq = np.array(sorted(set(range(g.n_nodes)) - gen_nodes))
    return pv, pq


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 111), max_size=3), st.integers(0, 2 ** 32 - 1))
def test_jacobian_matches_finite_differences(grid, catalog, picks, seed):
    topo = random_topology(grid, catalog, picks)
    assume(electrical_graph(grid, topo).n_components == 1)
    rng = np.random.default_rng(seed)
    Y = build_admittance(grid, topo)
    n = Y.shape[0]
    pv, pq = _bus_types(grid, topo)
    vm = rng.uniform(0.9, 1.1, n)
    va = rng.uniform(-0.3, 0.3, n)
    sbus = rng.normal(size=n) + 1j * rng.normal(size=n)
    pvpq = np.r_[pv, pq]

    def f(x):
        a, m = va.copy(), vm.copy()
        a[pvpq] = x[:pvpq.size]
        m[pq] = x[pvpq.size:]
        return power_mismatch(Y, m * np.exp(1j * a), sbus, pv, pq)

    x0 = np.r_[va[pvpq], vm[pq]]
    h = 1e-6
    fd = np.empty((x0.size, x0.size))
    for k in range(x0.size):
        e = np.zeros_like(x0)
        e[k] = h
        fd[:, k] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    V = vm * np.exp(1j * va)
    J_sparse = jacobian(Y, V, pv, pq).toarray()
    J_dense = jacobian(Y.toarray(), V, pv, pq)
    scale = np.abs(fd).max()
    assert np.abs(J_dense - fd).max() <= 1e-5 * scale
    np.testing.assert_allclose(J_sparse, J_dense, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 111), max_size=3),
       st.lists(st.floats(0.3, 1.3), min_size=11, max_size=11),
       st.floats(0.0, 1.0))
def test_power_conservation(grid, catalog, picks, load_scale, gen_scale):
    topo = random_topology(grid, catalog, picks)
    inj = nominal(grid)
    load_p = inj.load_p * np.array(load_scale)
    gen_p = inj.gen_p.copy()
    gen_p[0] *= gen_scale
    gen_p[2] = 30 * gen_scale
    sol = solve_power_flow(grid, topo, InjectionSet(load_p, inj.load_q * np.array(load_scale),
                                                    gen_p, inj.gen_v))
    assume(sol.converged)
    base = grid.base_mva
    balance = (sol.gen_p.sum() - sol.load_p.sum() - sol.losses_mw) / base
    assert abs(balance) < 1e-6
    assert sp.issparse(build_admittance(grid, topo))
