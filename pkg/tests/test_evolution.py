import math

import numpy as np
import pytest
import scipy.sparse.linalg as spl

from esfem_ocp.evolution import (
    DgFunction,
    SnapshotCache,
    SolveError,
    TimeGrid,
    adjoint_stability,
    apply_adjoint_operator,
    apply_state_operator,
    apply_terminal_adjoint,
    apply_terminal_operator,
    discrete_inner,
    divergence_remainder,
    dg_loads,
    integrated_divergence_mass,
    negative_divergence,
    read_dg_csv,
    solve_state,
    solve_state_rescaled,
    state_stability,
    terminal_inner,
    write_dg_csv,
)
from esfem_ocp.geometry import AnalyticSphereStretch, StaticIdentity, snapshot, sphere_mesh
from esfem_ocp.surface_fem import assemble_mass, assemble_stiffness


@pytest.fixture(scope="module")
def moving():
    return SnapshotCache(sphere_mesh(3), AnalyticSphereStretch(), TimeGrid(20, 1.0))


def reference_forward(mesh, flow, grid, y0, loads, lam=0.0):
    """Plain sparse march (M_n + k A_n) y^n = M_{n-1} y^{n-1} + F^n."""
    t = grid.nodes
    y, out = y0, []
    for n in range(1, grid.N + 1):
        prev = assemble_mass(snapshot(mesh, flow, t[n - 1]))
        snap = snapshot(mesh, flow, t[n])
        A = (assemble_mass(snap) + grid.k * assemble_stiffness(snap, lam)).tocsc()
        y = spl.spsolve(A, prev @ y + loads[n - 1])
        out.append(y)
    return np.array(out)


def reference_backward(mesh, flow, grid, zT, loads):
    t = grid.nodes
    z, out = zT, []
    for n in range(grid.N, 0, -1):
        snap = snapshot(mesh, flow, t[n])
        M = assemble_mass(snap)
        A = (M + grid.k * assemble_stiffness(snap)).tocsc()
        z = spl.spsolve(A, M @ z + loads[n - 1])
        out.append(z)
    return np.array(out[::-1])


def test_time_grid():
    g = TimeGrid(4, 2.0)
    assert g.k == 0.5
    assert np.allclose(g.nodes, [0, 0.5, 1, 1.5, 2])
    assert TimeGrid.from_mesh_size(0.5, 1.0).N == 80
    with pytest.raises(ValueError):
        TimeGrid(0, 1.0)


def test_forward_matches_plain_march(moving):
    rng = np.random.default_rng(0)
    y0 = rng.standard_normal(moving.m)
    loads = rng.standard_normal((moving.grid.N, moving.m))
    got = moving.forward(y0, loads)
    ref = reference_forward(moving.mesh, moving.flow, moving.grid, y0, loads)
    assert np.allclose(got, ref, rtol=1e-11, atol=1e-12)


def test_backward_matches_plain_march(moving):
    rng = np.random.default_rng(1)
    zT = rng.standard_normal(moving.m)
    loads = rng.standard_normal((moving.grid.N, moving.m))
    got = moving.backward(zT, loads)
    ref = reference_backward(moving.mesh, moving.flow, moving.grid, zT, loads)
    assert np.allclose(got, ref, rtol=1e-11, atol=1e-12)


def test_forward_with_lambda():
    mesh, flow, grid = sphere_mesh(2), AnalyticSphereStretch(), TimeGrid(6, 1.0)
    cache = SnapshotCache(mesh, flow, grid, lam=0.7)
    rng = np.random.default_rng(2)
    y0, loads = rng.standard_normal(mesh.n_vertices), rng.standard_normal((6, mesh.n_vertices))
    assert np.allclose(cache.forward(y0, loads), reference_forward(mesh, flow, grid, y0, loads, 0.7), rtol=1e-11, atol=1e-12)


def test_load_shape_is_checked(moving):
    with pytest.raises(ValueError):
        moving.forward(np.zeros(moving.m), np.zeros((3, moving.m)))


def test_mass_apply_matches_matrices(moving):
    rng = np.random.default_rng(3)
    v = rng.standard_normal((moving.grid.N, moving.m))
    batched = moving.mass_apply(v)
    for n in (1, 7, moving.grid.N):
        assert np.allclose(batched[n - 1], moving.mass(n) @ v[n - 1], atol=1e-14)


def test_dg_arithmetic(moving):
    f = DgFunction.zeros(moving.grid, moving.mesh)
    g = f + 1.0 * DgFunction(moving.grid, moving.mesh, np.ones((moving.grid.N, moving.m)))
    assert np.all((g - f).slabs == 1.0)
    assert np.all((-g).slabs == -1.0)
    assert discrete_inner(g, g, moving) == pytest.approx(moving.k * moving.areas[1:].sum())


def test_state_adjointness(moving):
    rng = np.random.default_rng(4)
    for _ in range(5):
        u = rng.standard_normal((moving.grid.N, moving.m))
        g = rng.standard_normal((moving.grid.N, moving.m))
        lhs = discrete_inner(apply_state_operator(u, moving), g, moving)
        rhs = discrete_inner(u, apply_adjoint_operator(g, moving), moving)
        assert abs(lhs - rhs) <= 1e-12 * math.sqrt(discrete_inner(u, u, moving) * discrete_inner(g, g, moving))


def test_terminal_adjointness(moving):
    rng = np.random.default_rng(5)
    for _ in range(5):
        u = rng.standard_normal((moving.grid.N, moving.m))
        zT = rng.standard_normal(moving.m)
        lhs = terminal_inner(apply_terminal_operator(u, moving), zT, moving)
        rhs = discrete_inner(u, apply_terminal_adjoint(zT, moving), moving)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_mass_is_conserved_without_source(moving):
    y0 = moving.mesh.vertices[:, 2] + 2.0
    y = moving.forward(y0, np.zeros((moving.grid.N, moving.m)))
    totals = moving.mass_apply(np.vstack([y0[None], y]), times=slice(0, None)).sum(axis=1)
    assert np.max(np.abs(totals - totals[0])) <= 1e-12 * abs(totals[0])


def test_constant_source_recursion():
    # on the static sphere a constant solution obeys (1 + k lam) c_n = c_{n-1} + k f
    mesh, grid, lam, f = sphere_mesh(3), TimeGrid(15, 1.0), 0.5, 1.3
    cache = SnapshotCache(mesh, StaticIdentity(), grid, lam=lam)
    y = solve_state(cache, np.full(mesh.n_vertices, 0.2), dg_loads(np.full((grid.N, mesh.n_vertices), f), cache)).slabs
    c = 0.2
    for n in range(grid.N):
        c = (c + grid.k * f) / (1 + grid.k * lam)
        assert np.max(np.abs(y[n] - c)) <= 1e-12 * abs(c)


def test_heat_decay_of_first_harmonic():
    # y = exp(-2t) z on the unit sphere: the discrete decay factor approaches 1/(1 + 2k)
    mesh, grid = sphere_mesh(5), TimeGrid(10, 0.5)
    cache = SnapshotCache(mesh, StaticIdentity(), grid)
    z = mesh.vertices[:, 2]
    y = cache.forward(z, np.zeros((10, mesh.n_vertices)))
    factor = (y[-1] @ z) / (y[-2] @ z)
    assert factor == pytest.approx(1 / (1 + 2 * grid.k), rel=3e-3)


def test_rescaled_solve_is_close():
    mesh, grid = sphere_mesh(2), TimeGrid(200, 1.0)
    rng = np.random.default_rng(6)
    y0, loads = rng.standard_normal(mesh.n_vertices), 0.01 * rng.standard_normal((200, mesh.n_vertices))
    plain = SnapshotCache(mesh, AnalyticSphereStretch(), grid).forward(y0, loads)
    shifted = solve_state_rescaled(mesh, AnalyticSphereStretch(), grid, y0, loads, 0.0, 1.0).slabs
    assert np.max(np.abs(plain - shifted)) < 0.05 * np.max(np.abs(plain))


def test_divergence_remainder_is_small():
    mesh, grid = sphere_mesh(2), TimeGrid(40, 1.0)
    cache = SnapshotCache(mesh, AnalyticSphereStretch(), grid)
    # the integrated divergence mass approximates the change of the mass matrix
    change = cache.mass(10) - cache.mass(9)
    integ = integrated_divergence_mass(mesh, cache.flow, grid.nodes[9], grid.nodes[10])
    assert abs(change - integ).max() < 1e-4 * abs(change).max() + 1e-7
    R = divergence_remainder(cache, 10)
    assert abs(R).max() < 0.5
    lam = negative_divergence(cache.flow)(cache.snapshots[3])
    assert lam.shape == (mesh.n_triangles,)


def test_non_spd_step_is_reported():
    mesh, grid = sphere_mesh(1), TimeGrid(2, 1.0)
    with pytest.raises(SolveError):
        SnapshotCache(mesh, StaticIdentity(), grid, lam=-1e3)


def test_stability_functionals_bounded_in_k():
    mesh, flow = sphere_mesh(3), AnalyticSphereStretch()

    def field(x, t):
        return x[:, 0] * math.cos(2 * math.pi * t) + x[:, 2] ** 2

    prev = None
    for N in (10, 20, 40):
        c = SnapshotCache(mesh, flow, TimeGrid(N, 1.0))
        g = np.stack([field(c.vertices[n], c.grid.nodes[n]) for n in range(1, N + 1)])
        z = c.backward(np.zeros(c.m), dg_loads(g, c))
        a = adjoint_stability(c, z)
        s = state_stability(c, c.forward(mesh.vertices[:, 1], dg_loads(g, c)), mesh.vertices[:, 1], g)
        vals = np.array([a["max_energy"], a["jumps"], a["h1"], s["ratio"]])
        if prev is not None:
            assert np.all(vals <= 1.5 * prev)
        prev = vals


def test_dg_csv_round_trip(tmp_path, moving):
    rng = np.random.default_rng(7)
    f = DgFunction(moving.grid, moving.mesh, rng.standard_normal((moving.grid.N, moving.m)))
    write_dg_csv(tmp_path / "f.csv", f)
    header, slabs = read_dg_csv(tmp_path / "f.csv")
    assert int(header["N"]) == moving.grid.N
    assert np.array_equal(slabs, f.slabs)
