"""Implicit Euler / piecewise-constant DG time stepping on an evolving mesh.

State scheme, for n = 1..N:

    (M(t_n) + k A(t_n)) y^n = M(t_{n-1}) y^{n-1} + F^n

Backward (adjoint) scheme, for n = N..1, with z^{N+1} the terminal data:

    (M(t_n) + k A(t_n) + k R_n) z^n = M(t_n) z^{n+1} + G^n

Coefficient vectors are attached to vertices, so a slab value is carried
along the vertex trajectories. With zero initial/terminal data the two
schemes are exactly adjoint in the discrete product k * sum_n f^n . M(t_n) g^n.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
import scipy.sparse as sp

from .geometry import FlowMap, MeshSnapshot, TriSurfaceMesh, make_snapshot, snapshot, snapshot_divergence
from .linalg import FactorizationError, SharedPatternFactorizer
from .surface_fem import (
    REF_MASS,
    element_mass,
    element_stiffness,
    element_weighted_mass,
    mesh_pattern,
)


class SolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    N: int
    T: float = 1.0

    def __post_init__(self):
        if self.N < 1 or not self.T > 0:
            raise ValueError("need N >= 1 and T > 0")

    @property
    def k(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return self.T * np.arange(self.N + 1) / self.N

    @classmethod
    def from_mesh_size(cls, H: float, T: float = 1.0, factor: float = 20.0) -> "TimeGrid":
        """Equidistant grid with k <= H^2 / factor landing exactly on T."""
        return cls(int(np.ceil(factor * T / H**2 - 1e-9)), T)


@dataclass(eq=False)
class DgFunction:
    """Piecewise constant in time: ``slabs[n-1]`` holds the nodal values on I_n."""

    grid: TimeGrid
    mesh: TriSurfaceMesh
    slabs: np.ndarray

    def __post_init__(self):
        self.slabs = np.asarray(self.slabs, dtype=float)
        if self.slabs.shape != (self.grid.N, self.mesh.n_vertices):
            raise ValueError(f"slab array has shape {self.slabs.shape}, expected {(self.grid.N, self.mesh.n_vertices)}")

    @classmethod
    def zeros(cls, grid, mesh):
        return cls(grid, mesh, np.zeros((grid.N, mesh.n_vertices)))

    def _wrap(self, slabs):
        return DgFunction(self.grid, self.mesh, slabs)

    def __add__(self, other):
        return self._wrap(self.slabs + _slabs(other))

    def __sub__(self, other):
        return self._wrap(self.slabs - _slabs(other))

    def __mul__(self, c: float):
        return self._wrap(self.slabs * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self._wrap(-self.slabs)

    def copy(self):
        return self._wrap(self.slabs.copy())


def _slabs(f):
    return f.slabs if isinstance(f, DgFunction) else np.asarray(f, dtype=float)


# ----------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _mass_apply(tris, areas, v, out):
    out[:] = 0.0
    for f in range(tris.shape[0]):
        i, j, l = tris[f, 0], tris[f, 1], tris[f, 2]
        c = areas[f] / 12.0
        s = v[i] + v[j] + v[l]
        out[i] += c * (v[i] + s)
        out[j] += c * (v[j] + s)
        out[l] += c * (v[l] + s)


@numba.njit(cache=True)
def _ldl_solve_inplace(indptr, indices, data, d, perm, b, work, out):
    n = d.shape[0]
    for i in range(n):
        work[i] = b[perm[i]]
    for j in range(n):
        xj = work[j]
        if xj != 0.0:
            for q in range(indptr[j], indptr[j + 1]):
                work[indices[q]] -= data[q] * xj
    for i in range(n):
        work[i] /= d[i]
    for j in range(n - 1, -1, -1):
        s = work[j]
        for q in range(indptr[j], indptr[j + 1]):
            s -= data[q] * work[indices[q]]
        work[j] = s
    for i in range(n):
        out[perm[i]] = work[i]


@numba.njit(cache=True)
def _forward_sweep(tris, areas, indptr, indices, ldata, dvals, perm, y0, loads, out):
    N, m = loads.shape
    rhs = np.empty(m)
    work = np.empty(m)
    prev = y0.copy()
    for n in range(N):
        _mass_apply(tris, areas[n], prev, rhs)
        for i in range(m):
            rhs[i] += loads[n, i]
        _ldl_solve_inplace(indptr, indices, ldata[n], dvals[n], perm, rhs, work, out[n])
        prev[:] = out[n]


@numba.njit(cache=True)
def _backward_sweep(tris, areas, indptr, indices, ldata, dvals, perm, zT, loads, out):
    N, m = loads.shape
    rhs = np.empty(m)
    work = np.empty(m)
    nxt = zT.copy()
    for n in range(N - 1, -1, -1):
        # mass at t_n (= areas[n + 1]) applied to z^{n+1}
        _mass_apply(tris, areas[n + 1], nxt, rhs)
        for i in range(m):
            rhs[i] += loads[n, i]
        _ldl_solve_inplace(indptr, indices, ldata[n], dvals[n], perm, rhs, work, out[n])
        nxt[:] = out[n]


# ----------------------------------------------------------------------------
# cache of snapshots and factorizations


LambdaSpec = "float | Callable[[MeshSnapshot], np.ndarray]"


class SnapshotCache:
    """Snapshots, areas and factorized step matrices at all grid times.

    ``lam`` is a constant or a callable mapping a snapshot to per-vertex or
    per-element values. ``remainder`` optionally maps (cache, n) to a sparse
    symmetric matrix R_n added as k R_n to the step matrix of slab n.
    Immutable once built.
    """

    def __init__(
        self,
        mesh: TriSurfaceMesh,
        flow: FlowMap,
        grid: TimeGrid,
        lam=0.0,
        remainder: Callable[["SnapshotCache", int], sp.spmatrix] | None = None,
    ):
        self.mesh = mesh
        self.flow = flow
        self.grid = grid
        self.lam = lam
        self.tris = np.ascontiguousarray(mesh.triangles, dtype=np.int64)
        times = grid.nodes
        self.vertices = np.stack([flow.position(mesh.vertices, t) for t in times])
        self.snapshots = [make_snapshot(mesh, self.vertices[n], times[n]) for n in range(grid.N + 1)]
        self.areas = np.ascontiguousarray(np.stack([s.areas for s in self.snapshots]))
        pattern = mesh_pattern(mesh)
        factorizer = SharedPatternFactorizer()
        k = grid.k
        ldata, dvals = [], []
        for n in range(1, grid.N + 1):
            snap = self.snapshots[n]
            vals = element_mass(snap.areas) + k * self._stiffness_values(snap)
            matrix = pattern.assemble(vals)
            if remainder is not None:
                extra = sp.csr_matrix(remainder(self, n))
                matrix = sp.csr_matrix(matrix + k * extra)
                matrix = _on_pattern(matrix, pattern)
            try:
                fac = factorizer.factorize(matrix)
            except FactorizationError as exc:
                raise SolveError(f"step matrix of slab {n} (t={snap.t:.6g}) could not be factorized: {exc}") from exc
            ldata.append(fac.data)
            dvals.append(fac.d)
        self._pattern = fac.pattern
        self._ldata = np.ascontiguousarray(np.stack(ldata))
        self._dvals = np.ascontiguousarray(np.stack(dvals))

    def _stiffness_values(self, snap: MeshSnapshot) -> np.ndarray:
        vals = element_stiffness(snap.moved_vertices, snap.triangles)
        lam = self.lam
        if callable(lam):
            lam = np.asarray(lam(snap), dtype=float)
            kind = "vertex" if lam.shape == (snap.n_vertices,) else "element"
            return vals + element_weighted_mass(snap.areas, snap.triangles, kind, lam)
        if lam != 0.0:
            return vals + lam * element_mass(snap.areas)
        return vals

    @property
    def k(self) -> float:
        return self.grid.k

    @property
    def m(self) -> int:
        return self.mesh.n_vertices

    # matrices at grid times (assembled on demand)
    def mass(self, n: int) -> sp.csr_matrix:
        return mesh_pattern(self.mesh).assemble(element_mass(self.areas[n]))

    def stiffness(self, n: int, lam=None) -> sp.csr_matrix:
        """Laplace stiffness at t_n plus lambda mass (the cache's lambda unless given)."""
        snap = self.snapshots[n]
        if lam is None:
            return mesh_pattern(self.mesh).assemble(self._stiffness_values(snap))
        vals = element_stiffness(snap.moved_vertices, snap.triangles) + lam * element_mass(snap.areas)
        return mesh_pattern(self.mesh).assemble(vals)

    def mass_apply(self, v: np.ndarray, times: slice | np.ndarray = slice(1, None)) -> np.ndarray:
        """Batched M(t_n) v^n for slabs v (B, m) and the matching rows of grid times."""
        v = np.asarray(v, dtype=float)
        areas = self.areas[times]
        vt = v[:, self.tris]
        loc = areas[:, :, None] / 12.0 * (vt + vt.sum(axis=2, keepdims=True))
        B = v.shape[0]
        idx = (np.arange(B)[:, None, None] * self.m + self.tris[None]).ravel()
        return np.bincount(idx, weights=loc.ravel(), minlength=B * self.m).reshape(B, self.m)

    def step_solve(self, n: int, b: np.ndarray) -> np.ndarray:
        """Solve with the step matrix of slab n (1-based)."""
        indptr, indices, perm = self._pattern
        out = np.empty(self.m)
        _ldl_solve_inplace(indptr, indices, self._ldata[n - 1], self._dvals[n - 1], perm, np.ascontiguousarray(b, dtype=float), np.empty(self.m), out)
        return out

    def forward(self, y0: np.ndarray, loads: np.ndarray) -> np.ndarray:
        loads = np.ascontiguousarray(loads, dtype=float)
        if loads.shape != (self.grid.N, self.m):
            raise ValueError("loads must have shape (N, m)")
        out = np.empty_like(loads)
        indptr, indices, perm = self._pattern
        _forward_sweep(self.tris, self.areas, indptr, indices, self._ldata, self._dvals, perm, np.ascontiguousarray(y0, dtype=float), loads, out)
        return out

    def backward(self, zT: np.ndarray, loads: np.ndarray) -> np.ndarray:
        loads = np.ascontiguousarray(loads, dtype=float)
        if loads.shape != (self.grid.N, self.m):
            raise ValueError("loads must have shape (N, m)")
        out = np.empty_like(loads)
        indptr, indices, perm = self._pattern
        _backward_sweep(self.tris, self.areas, indptr, indices, self._ldata, self._dvals, perm, np.ascontiguousarray(zT, dtype=float), loads, out)
        return out


def _on_pattern(matrix: sp.csr_matrix, pattern) -> sp.csr_matrix:
    """Re-express a matrix on the mesh pattern (entries outside it must vanish)."""
    coo = matrix.tocoo()
    key = coo.row.astype(np.int64) * pattern.n + coo.col
    ref = np.repeat(np.arange(pattern.n), np.diff(pattern.indptr)) * pattern.n + pattern.indices
    pos = np.searchsorted(ref, key)
    pos = np.clip(pos, 0, len(ref) - 1)
    ok = ref[pos] == key
    if np.any(~ok & (coo.data != 0)):
        raise SolveError("remainder matrix has entries outside the mesh pattern")
    data = np.bincount(pos[ok], weights=coo.data[ok], minlength=pattern.nnz)
    return sp.csr_matrix((data, pattern.indices.copy(), pattern.indptr.copy()), shape=matrix.shape)


# ----------------------------------------------------------------------------
# schemes and operators


def solve_state(cache: SnapshotCache, y0: np.ndarray, loads: np.ndarray) -> DgFunction:
    """March the state scheme from y^0 = y0 with per-slab load vectors F^n."""
    return DgFunction(cache.grid, cache.mesh, cache.forward(y0, loads))


def solve_adjoint(cache: SnapshotCache, zT: np.ndarray, loads: np.ndarray) -> DgFunction:
    """March the backward scheme from z^{N+1} = zT with per-slab loads G^n.

    The remainder R_n, if any, is part of the cache's step matrices.
    """
    return DgFunction(cache.grid, cache.mesh, cache.backward(zT, loads))


def dg_loads(u, cache: SnapshotCache) -> np.ndarray:
    """Exact slab loads k M(t_n) u^n of a piecewise-constant function."""
    return cache.k * cache.mass_apply(_slabs(u))


def discrete_inner(f, g, cache: SnapshotCache) -> float:
    """k * sum_n f^n . M(t_n) g^n."""
    fs, gs = _slabs(f), _slabs(g)
    return float(cache.k * np.sum(fs * cache.mass_apply(gs)))


def discrete_norm(f, cache: SnapshotCache) -> float:
    return np.sqrt(max(discrete_inner(f, f, cache), 0.0))


def apply_state_operator(u, cache: SnapshotCache) -> DgFunction:
    """Solution with zero initial value driven by a piecewise-constant source."""
    return solve_state(cache, np.zeros(cache.m), dg_loads(u, cache))


def apply_adjoint_operator(r, cache: SnapshotCache) -> DgFunction:
    """Adjoint of apply_state_operator in the discrete space-time product (z^{N+1} = 0)."""
    return solve_adjoint(cache, np.zeros(cache.m), dg_loads(r, cache))


def apply_terminal_operator(u, cache: SnapshotCache) -> np.ndarray:
    """Final value y^N of the state with zero initial value."""
    return cache.forward(np.zeros(cache.m), dg_loads(u, cache))[-1]


def apply_terminal_adjoint(zT: np.ndarray, cache: SnapshotCache) -> DgFunction:
    """Backward pure-Laplace scheme started from z^{N+1} = zT without source.

    Satisfies <apply_terminal_operator(u), zT>_{L2(t=T)} = <u, result>_{h,k}
    when ``cache`` carries lambda = 0 and no remainder.
    """
    return solve_adjoint(cache, zT, np.zeros((cache.grid.N, cache.m)))


def terminal_inner(y: np.ndarray, z: np.ndarray, cache: SnapshotCache) -> float:
    return float(y @ cache.mass_apply(np.asarray(z)[None], times=slice(-1, None))[0])


def _energy(cache: SnapshotCache, n: int, v: np.ndarray) -> float:
    return float(v @ (cache.stiffness(n) @ v))


def state_stability(cache: SnapshotCache, y: np.ndarray, y0: np.ndarray, f) -> dict:
    """Terms of the discrete energy estimate for a state y (N, m) with source f.

    ``f`` is the piecewise-constant source whose loads drove the march.
    ``ratio`` is (|y^N|^2 + k sum a(t_n; y^n, y^n)) / (|y0|^2 + |f|_{h,k}^2).
    """
    N = cache.grid.N
    final = float(y[-1] @ cache.mass_apply(y[-1:], times=slice(N, N + 1))[0])
    energy = cache.k * sum(_energy(cache, n, y[n - 1]) for n in range(1, N + 1))
    initial = float(y0 @ cache.mass_apply(np.asarray(y0)[None], times=slice(0, 1))[0])
    data = discrete_inner(f, f, cache)
    return {"final": final, "energy": energy, "ratio": (final + energy) / (initial + data)}


def adjoint_stability(cache: SnapshotCache, z: np.ndarray) -> dict:
    """max_n a(t_n; z^n, z^n), (1/k) sum |z^{n+1} - z^n|^2 and k sum |z^n|_{H1}^2 for z (N, m), z^{N+1} = 0."""
    N = cache.grid.N
    energies = np.array([_energy(cache, n, z[n - 1]) for n in range(1, N + 1)])
    jumps = np.vstack([z[1:] - z[:-1], -z[-1:]])
    jump_sq = float(np.sum(jumps * cache.mass_apply(jumps)))
    l2 = float(np.sum(z * cache.mass_apply(z)))
    return {"max_energy": float(energies.max()), "jumps": jump_sq / cache.k, "h1": cache.k * (float(energies.sum()) + l2)}


# ----------------------------------------------------------------------------
# divergence of the discrete velocity


def divergence_mass(mesh: TriSurfaceMesh, flow: FlowMap, t: float) -> sp.csr_matrix:
    """D(t)_ij = integral over Gamma_h(t) of div V_h phi_i phi_j (elementwise constant divergence)."""
    snap = snapshot(mesh, flow, t)
    div = snapshot_divergence(snap, flow)
    return mesh_pattern(mesh).assemble((snap.areas * div)[:, None, None] * REF_MASS)


def integrated_divergence_mass(mesh: TriSurfaceMesh, flow: FlowMap, t_lo: float, t_hi: float) -> sp.csr_matrix:
    """Two-point Gauss approximation of the time integral of D(t) over (t_lo, t_hi).

    For transported hat functions this approximates M(t_hi) - M(t_lo).
    """
    k = t_hi - t_lo
    g = 0.5 / np.sqrt(3.0)
    out = None
    for tg in (t_lo + (0.5 - g) * k, t_lo + (0.5 + g) * k):
        d = 0.5 * k * divergence_mass(mesh, flow, tg)
        out = d if out is None else out + d
    return out


def divergence_remainder(cache: SnapshotCache, n: int) -> sp.csr_matrix:
    """r_n as a matrix: (1/k) * (time integral of D over I_n) - D(t_n)."""
    t = cache.grid.nodes
    integ = integrated_divergence_mass(cache.mesh, cache.flow, t[n - 1], t[n])
    return integ / cache.k - divergence_mass(cache.mesh, cache.flow, t[n])


def negative_divergence(flow: FlowMap) -> Callable[[MeshSnapshot], np.ndarray]:
    """lambda = -div V_h as per-element values."""

    def lam(snap: MeshSnapshot):
        return -snapshot_divergence(snap, flow)

    return lam


# ----------------------------------------------------------------------------
# exponential rescaling


def solve_state_rescaled(mesh, flow, grid: TimeGrid, y0, loads, lam: float, shift: float) -> DgFunction:
    """State solve with lambda replaced by lambda + shift.

    Solves for w = exp(-shift t) y with data scaled by exp(-shift t_n) and
    returns y^n = exp(shift t_n) w^n. Agrees with the unshifted solve up to O(k).
    """
    cache = SnapshotCache(mesh, flow, grid, lam=lam + shift)
    t = grid.nodes[1:]
    w = cache.forward(y0, np.asarray(loads) * np.exp(-shift * t)[:, None])
    return DgFunction(grid, mesh, w * np.exp(shift * t)[:, None])


# ----------------------------------------------------------------------------
# export


def write_dg_csv(path, f: DgFunction, level: int | None = None) -> None:
    """CSV with columns slab, vertex, coefficient, preceded by a commented header."""
    N, m = f.slabs.shape
    with open(path, "w") as fh:
        fh.write(f"# N={N} T={f.grid.T!r} m_h={m} level={f.mesh.level if level is None else level}\n")
        fh.write("slab,vertex,coefficient\n")
        for n in range(N):
            for j in range(m):
                fh.write(f"{n + 1},{j},{f.slabs[n, j]:.17g}\n")


def read_dg_csv(path):
    header = {}
    rows = []
    with open(path) as fh:
        first = fh.readline().lstrip("# ").split()
        for item in first:
            key, val = item.split("=")
            header[key] = val
        fh.readline()
        for ln in fh:
            n, j, c = ln.split(",")
            rows.append((int(n), int(j), float(c)))
    N, m = int(header["N"]), int(header["m_h"])
    slabs = np.zeros((N, m))
    for n, j, c in rows:
        slabs[n - 1, j] = c
    return header, slabs
