"""Triangulated spheres, longest-edge refinement and moving vertex flows."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TWO_PI = 2.0 * np.pi


class DegenerateTriangleError(ValueError):
    """Raised when a (deformed) triangle has (nearly) vanishing area."""


# ----------------------------------------------------------------------------
# meshes


@dataclass(frozen=True, eq=False)
class TriSurfaceMesh:
    """Closed triangulated surface with vertices on the unit sphere.

    ``vertices`` is (m, 3), ``triangles`` is (F, 3) with outward orientation.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    level: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, lexicographically ordered."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_triangles


def build_macro_sphere() -> TriSurfaceMesh:
    """Cube inscribed in the unit sphere, each face cut into two right triangles.

    The top and bottom face diagonals join (1,-1,.) and (-1,1,.) so that the
    plane {x + y = 0} is a union of mesh edges.
    """
    corners = np.array(
        [
            [-1, -1, -1],
            [1, -1, -1],
            [1, 1, -1],
            [-1, 1, -1],
            [-1, -1, 1],
            [1, -1, 1],
            [1, 1, 1],
            [-1, 1, 1],
        ],
        dtype=float,
    )
    vertices = corners / np.sqrt(3.0)
    triangles = np.array(
        [
            # z = -1 (normal -z), diagonal 1-3
            [0, 3, 1],
            [1, 3, 2],
            # z = +1 (normal +z), diagonal 5-7
            [4, 5, 7],
            [5, 6, 7],
            # y = -1 (normal -y)
            [0, 1, 5],
            [0, 5, 4],
            # y = +1 (normal +y)
            [3, 7, 6],
            [3, 6, 2],
            # x = -1 (normal -x)
            [0, 4, 7],
            [0, 7, 3],
            # x = +1 (normal +x)
            [1, 2, 6],
            [1, 6, 5],
        ],
        dtype=np.int64,
    )
    return TriSurfaceMesh(vertices, triangles, level=0)


def _edge_lengths(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Length of the edge opposite each corner, shape (F, 3)."""
    p = vertices[triangles]
    return np.stack(
        [
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
        ],
        axis=1,
    )


def _longest_edge(vertices: np.ndarray, tri, rtol: float = 1e-12) -> tuple[int, int]:
    """Longest edge of one triangle as a sorted vertex pair.

    Lengths equal up to ``rtol`` are ties, broken by the lowest index pair.
    """
    best = None
    best_len = -1.0
    for i in range(3):
        a, b = sorted((int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])))
        length = float(np.linalg.norm(vertices[a] - vertices[b]))
        if best is None or length > best_len * (1 + rtol):
            best, best_len = (a, b), length
        elif length >= best_len * (1 - rtol) and (a, b) < best:
            best, best_len = (a, b), max(length, best_len)
    return best


def refine_longest_edge(mesh: TriSurfaceMesh) -> TriSurfaceMesh:
    """One global sweep of longest-edge bisection.

    Every triangle gets its longest edge marked; marks are closed so that a
    triangle with any marked edge also has its longest edge marked. Each
    triangle is then bisected across its longest edge first and the children
    are bisected across the remaining marked edges, so no hanging node is
    left. Midpoints are projected radially onto the unit sphere.
    """
    verts = mesh.vertices
    tris = [tuple(int(i) for i in t) for t in mesh.triangles]
    longest = [_longest_edge(verts, t) for t in tris]

    marked = set(longest)
    edge_tris: dict[tuple[int, int], list[int]] = {}
    for ti, t in enumerate(tris):
        for i in range(3):
            e = tuple(sorted((t[i], t[(i + 1) % 3])))
            edge_tris.setdefault(e, []).append(ti)
    queue = list(marked)
    while queue:
        e = queue.pop()
        for ti in edge_tris[e]:
            le = longest[ti]
            if le not in marked:
                marked.add(le)
                queue.append(le)

    new_index = {}
    new_points = []
    m = len(verts)
    for e in sorted(marked):
        mid = 0.5 * (verts[e[0]] + verts[e[1]])
        new_points.append(mid / np.linalg.norm(mid))
        new_index[e] = m
        m += 1
    all_verts = np.vstack([verts, np.array(new_points)]) if new_points else verts.copy()

    out = []

    def split(t, edge):
        # rotate so that the edge to split is (t[1], t[2])
        for r in range(3):
            tt = t[r:] + t[:r]
            if tuple(sorted((tt[1], tt[2]))) == edge:
                break
        mid = new_index[edge]
        return (tt[0], tt[1], mid), (tt[0], mid, tt[2])

    def bisect(t, first):
        pending = [tuple(sorted((t[i], t[(i + 1) % 3]))) for i in range(3)]
        pending = [e for e in pending if e in marked]
        if not pending:
            out.append(t)
            return
        edge = first if first in pending else pending[0]
        for child in split(t, edge):
            bisect(child, None)

    for ti, t in enumerate(tris):
        bisect(t, longest[ti])

    return TriSurfaceMesh(all_verts, np.array(out, dtype=np.int64), level=mesh.level + 1)


def sphere_mesh(level: int) -> TriSurfaceMesh:
    """Macro cube refined ``level`` times."""
    mesh = build_macro_sphere()
    for _ in range(level):
        mesh = refine_longest_edge(mesh)
    return mesh


def max_edge_length(mesh: TriSurfaceMesh, vertices: np.ndarray | None = None) -> float:
    v = mesh.vertices if vertices is None else vertices
    return float(_edge_lengths(v, mesh.triangles).max())


def triangle_angles(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Interior angles in degrees, shape (F, 3)."""
    p = vertices[triangles]
    ang = np.empty(triangles.shape)
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        w = p[:, (i + 2) % 3] - p[:, i]
        c = np.einsum("ij,ij->i", u, w) / (np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1))
        ang[:, i] = np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))
    return ang


# ----------------------------------------------------------------------------
# flows


def rho(t):
    """Stretch factor exp(sin(2 pi t) / 2) of the sphere-family flow."""
    return np.exp(0.5 * np.sin(TWO_PI * t))


def rho_dot(t):
    return np.pi * np.cos(TWO_PI * t) * rho(t)


class FlowMap:
    """Time-dependent map moving reference points x in R^3."""

    horizon: float = 1.0

    def position(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        """Velocity at time ``t`` of the trajectory through reference point ``x``."""
        raise NotImplementedError

    def transport(self, points: np.ndarray, s: float, t: float) -> np.ndarray:
        """Map points of the time-s surface to the time-t surface, if available."""
        raise NotImplementedError


@dataclass(frozen=True)
class StaticIdentity(FlowMap):
    horizon: float = 1.0

    def position(self, x, t):
        return np.array(x, dtype=float, copy=True)

    def velocity(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def transport(self, points, s, t):
        return np.array(points, dtype=float, copy=True)


@dataclass(frozen=True)
class AnalyticSphereStretch(FlowMap):
    """(x, y, z) -> (x, y, z / rho(t)^power) with rho(t) = exp(sin(2 pi t)/2); power 2 by default."""

    horizon: float = 1.0
    power: float = 2.0

    def position(self, x, t):
        x = np.array(x, dtype=float, copy=True)
        x[..., 2] /= rho(t) ** self.power
        return x

    def velocity(self, x, t):
        x = np.asarray(x, dtype=float)
        v = np.zeros_like(x)
        r = rho(t)
        v[..., 2] = -self.power * x[..., 2] * rho_dot(t) / r ** (self.power + 1)
        return v

    def transport(self, points, s, t):
        # the flow is linear in space, so it maps flat triangles onto flat triangles
        p = np.array(points, dtype=float, copy=True)
        p[..., 2] *= (rho(s) / rho(t)) ** self.power
        return p


@dataclass(frozen=True)
class OdeVelocityField(FlowMap):
    """Flow generated by dX/dt = V(X, t), integrated with classical RK4.

    ``substep`` is the maximal RK4 step; use k/4 for a time grid of step k.
    """

    field: Callable[[np.ndarray, float], np.ndarray]
    horizon: float = 1.0
    substep: float = 1e-3

    def _integrate(self, x, s, t):
        x = np.array(x, dtype=float, copy=True)
        if t == s:
            return x
        n = max(1, int(np.ceil(abs(t - s) / self.substep - 1e-12)))
        h = (t - s) / n
        f = self.field
        tau = s
        for _ in range(n):
            k1 = f(x, tau)
            k2 = f(x + 0.5 * h * k1, tau + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, tau + 0.5 * h)
            k4 = f(x + h * k3, tau + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            tau = tau + h
        return x

    def position(self, x, t):
        return self._integrate(x, 0.0, t)

    def velocity(self, x, t):
        return self.field(self.position(x, t), t)

    def transport(self, points, s, t):
        return self._integrate(points, s, t)


# ----------------------------------------------------------------------------
# snapshots


@dataclass(frozen=True, eq=False)
class MeshSnapshot:
    base: TriSurfaceMesh
    t: float
    moved_vertices: np.ndarray
    areas: np.ndarray = field(repr=False)
    normals: np.ndarray = field(repr=False)

    @property
    def triangles(self) -> np.ndarray:
        return self.base.triangles

    @property
    def n_vertices(self) -> int:
        return self.base.n_vertices

    def total_area(self) -> float:
        return float(self.areas.sum())


def triangle_geometry(vertices: np.ndarray, triangles: np.ndarray):
    """Areas (F,) and unit normals (F, 3) of flat triangles."""
    p = vertices[triangles]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    twice = np.linalg.norm(cr, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = cr / twice[:, None]
    return 0.5 * twice, normals


def make_snapshot(mesh: TriSurfaceMesh, moved: np.ndarray, t: float, min_area: float = 1e-14):
    moved = np.ascontiguousarray(moved, dtype=float)
    areas, normals = triangle_geometry(moved, mesh.triangles)
    bad = np.flatnonzero(~(areas > min_area))
    if bad.size:
        raise DegenerateTriangleError(
            f"{bad.size} triangle(s) degenerate at t={t:g}, e.g. index {bad[0]} with area {areas[bad[0]]:.3e}"
        )
    for a in (moved, areas, normals):
        a.setflags(write=False)
    return MeshSnapshot(mesh, float(t), moved, areas, normals)


def snapshot(mesh: TriSurfaceMesh, flow: FlowMap, t: float) -> MeshSnapshot:
    """Deformed triangulation with every vertex moved along the flow to time t."""
    if t < -1e-14 or t > flow.horizon + 1e-12:
        raise ValueError(f"time {t} outside [0, {flow.horizon}]")
    return make_snapshot(mesh, flow.position(mesh.vertices, t), t)


def hat_gradients(vertices: np.ndarray, triangles: np.ndarray):
    """Areas (F,) and tangential gradients of the three hat functions (F, 3, 3)."""
    p = vertices[triangles]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    twice = np.linalg.norm(cr, axis=1)
    if np.any(~(twice > 2e-14)):
        raise DegenerateTriangleError("degenerate triangle in gradient computation")
    n = cr / twice[:, None]
    grads = np.empty(p.shape)
    for i in range(3):
        e = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
        grads[:, i] = np.cross(n, e) / twice[:, None]
    return 0.5 * twice, grads


def element_frame(snap: MeshSnapshot, tri_index: int):
    """Area and the constant surface gradients of the three hat functions of one triangle."""
    tri = snap.triangles[tri_index : tri_index + 1]
    area, grads = hat_gradients(snap.moved_vertices, tri)
    return float(area[0]), grads[0]


def element_divergence(vertices: np.ndarray, velocities: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Elementwise tangential divergence of the piecewise-linear velocity interpolant."""
    _, grads = hat_gradients(vertices, triangles)
    return np.einsum("fij,fij->f", grads, velocities[triangles])


def snapshot_divergence(snap: MeshSnapshot, flow: FlowMap) -> np.ndarray:
    vel = flow.velocity(snap.base.vertices, snap.t)
    return element_divergence(snap.moved_vertices, vel, snap.triangles)


# ----------------------------------------------------------------------------
# export


def write_off(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(vertices)} {len(triangles)} 0\n")
        for x in vertices:
            fh.write(f"{x[0]:.17g} {x[1]:.17g} {x[2]:.17g}\n")
        for t in triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def read_off(path):
    with open(path) as fh:
        tokens = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    if tokens[0] != ["OFF"]:
        raise ValueError("not an OFF file")
    nv, nf = int(tokens[1][0]), int(tokens[1][1])
    v = np.array([[float(c) for c in row] for row in tokens[2 : 2 + nv]])
    f = np.array([[int(c) for c in row[1:4]] for row in tokens[2 + nv : 2 + nv + nf]], dtype=np.int64)
    return v, f
