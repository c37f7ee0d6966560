"""Convergence studies on the stretched sphere.

Example one: box-constrained distributed tracking with a known solution.
Example two: unconstrained terminal tracking of a target that is singular on
the plane x + y = 0; the error is estimated against the solution two levels
finer.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .control import (
    UNBOUNDED,
    ControlProblemSpec,
    Distributed,
    ProjectedControl,
    ReducedProblem,
    Terminal,
    control_inner,
    control_loads,
    optimality_residual,
    solve_semismooth_newton,
    solve_terminal,
)
from .evolution import DgFunction, SnapshotCache, TimeGrid
from .geometry import AnalyticSphereStretch, FlowMap, max_edge_length, rho, sphere_mesh
from .surface_fem import GAUSS7_POINTS, GAUSS7_WEIGHTS, LOWER, UPPER, cut_pieces, plane_singular_rule

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# example data


@dataclass(frozen=True)
class ExampleOneData:
    """Data of the box-constrained example with exact control P(z sin 2 pi t).

    ``formula="derived"`` builds the desired-state offset from the adjoint
    equation -dp/dt - Lap p = S u - y_d on the ellipsoid traced by the flow
    z / rho^power. ``formula="printed"`` is an alternative closed form kept for
    comparison; it matches the derived one for power 1/2 up to its overall sign.
    """

    alpha: float = 1.0
    lo: float = -0.5
    hi: float = 0.5
    T: float = 1.0
    power: float = 2.0
    formula: str = "derived"
    corrupt: bool = False

    def __post_init__(self):
        if self.formula not in ("derived", "printed"):
            raise ValueError(f"unknown formula {self.formula!r}")

    def flow(self) -> AnalyticSphereStretch:
        return AnalyticSphereStretch(self.T, self.power)

    def control(self, x: np.ndarray, t: float) -> np.ndarray:
        """Exact optimal control P(z sin 2 pi t)."""
        return np.clip(x[..., 2] * math.sin(2 * math.pi * t), self.lo, self.hi)

    def desired_offset(self, x: np.ndarray, t: float) -> np.ndarray:
        """The part of the desired state not produced by the exact control."""
        if self.formula == "printed":
            return self._printed(x, t)
        s, c = math.sin(2 * math.pi * t), math.cos(2 * math.pi * t)
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        # material derivative of z sin(2 pi t) along z(t) = z0 rho^-power
        dz = (2 * math.pi - self.power * math.pi * s) * c
        if self.corrupt:
            dz = -dz
        # Laplace-Beltrami of z on x^2 + y^2 + q z^2 = 1
        q = rho(t) ** (2 * self.power)
        den = X * X + Y * Y + q * q * Z * Z
        lap = -q / den * ((q + 1.0) - Z * Z * q * q * (q - 1.0) / den)
        return -self.alpha * (dz + s * lap) * Z

    def _printed(self, x, t):
        r = rho(t)
        s, c = math.sin(2 * math.pi * t), math.cos(2 * math.pi * t)
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        den = X * X + Y * Y + r * r * Z * Z
        first = (0.5 * math.pi * s - 2 * math.pi) * c
        if self.corrupt:
            first = -first
        val = first + s * r / den * (r + 1.0 - Z * Z * (r**3 - r**2) / den)
        return -self.alpha * val * Z


@dataclass(frozen=True)
class ExampleTwoData:
    alpha: float = 1.0
    T: float = 1.0
    exponent: float = 0.45

    def target(self, x: np.ndarray, t: float) -> np.ndarray:
        """|x + y|^(-0.45); the modulus makes the target real on both sides of the plane."""
        s = np.abs(x[..., 0] + x[..., 1])
        with np.errstate(divide="ignore"):
            return s ** (-self.exponent)


PLANE_NORMAL = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)


# ----------------------------------------------------------------------------
# records


@dataclass
class LevelResult:
    level: int
    m_h: int
    N: int
    H: float
    k: float
    err_l2: float
    err_inf: float = float("nan")
    iterations: int = 0
    wall_seconds: float = 0.0


@dataclass
class ConvergenceRecord:
    q: int
    rows: list[LevelResult] = field(default_factory=list)

    def eoc_l2(self) -> list[float]:
        return compute_eoc([r.err_l2 for r in self.rows], [r.H for r in self.rows], self.q)

    def eoc_inf(self) -> list[float]:
        return compute_eoc([r.err_inf for r in self.rows], [r.H for r in self.rows], self.q)

    def row(self, level: int) -> LevelResult:
        for r in self.rows:
            if r.level == level:
                return r
        raise KeyError(level)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "m_h", "N", "H", "k", "ERR_L2", "EOC_L2", "ERR_inf", "EOC_inf", "newton_iters", "wall_seconds"])
        for r, e2, ei in zip(self.rows, self.eoc_l2(), self.eoc_inf()):
            w.writerow([r.level, r.m_h, r.N, _g(r.H), _g(r.k), _g(r.err_l2), _g(e2), _g(r.err_inf), _g(ei), r.iterations, f"{r.wall_seconds:.3f}"])
        return buf.getvalue()

    def to_gnuplot(self) -> str:
        lines = ["# level H ERR_L2 EOC_L2 ERR_inf EOC_inf"]
        for r, e2, ei in zip(self.rows, self.eoc_l2(), self.eoc_inf()):
            lines.append(f"{r.level} {_g(r.H)} {_g(r.err_l2)} {_g(e2)} {_g(r.err_inf)} {_g(ei)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [f"{'R':>2} {'m_h':>6} {'N':>6} {'H':>8} {'ERR_L2':>10} {'EOC_L2':>7} {'ERR_inf':>10} {'EOC_inf':>7} {'iters':>5}"]
        for r, e2, ei in zip(self.rows, self.eoc_l2(), self.eoc_inf()):
            lines.append(
                f"{r.level:>2} {r.m_h:>6} {r.N:>6} {r.H:>8.4f} {r.err_l2:>10.3e} {e2:>7.3f} {r.err_inf:>10.3e} {ei:>7.3f} {r.iterations:>5}"
            )
        return "\n".join(lines)


def _g(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.17g}"


def compute_eoc(errors, Hs, q: int = 2) -> list[float]:
    """ln(ERR_i / ERR_{i-q}) / ln(H_i / H_{i-q}); NaN where i < q."""
    errors = np.asarray(errors, dtype=float)
    Hs = np.asarray(Hs, dtype=float)
    out = [float("nan")] * len(errors)
    for i in range(q, len(errors)):
        out[i] = float(np.log(errors[i] / errors[i - q]) / np.log(Hs[i] / Hs[i - q]))
    return out


# ----------------------------------------------------------------------------
# example one


def slab_mean_nodal(mesh, flow: FlowMap, grid: TimeGrid, f, n_time: int = 2) -> np.ndarray:
    """Per-slab time means of f along the vertex trajectories, shape (N, m)."""
    xg, wg = np.polynomial.legendre.leggauss(n_time)
    t = grid.nodes
    out = np.zeros((grid.N, mesh.n_vertices))
    for n in range(grid.N):
        for x, w in zip(xg, wg):
            tg = t[n] + 0.5 * grid.k * (x + 1.0)
            out[n] += 0.5 * w * f(flow.position(mesh.vertices, tg), tg)
    return out


def example_one_setup(level: int, data: ExampleOneData | None = None, cache: SnapshotCache | None = None):
    """Problem of example one on level ``level`` and the sampled exact control.

    The desired state is the analytic offset plus the discrete state of the
    sampled exact control, so the discrete optimum approximates it to O(h^2 + k).
    """
    data = ExampleOneData() if data is None else data
    mesh = sphere_mesh(level)
    flow = data.flow()
    grid = TimeGrid.from_mesh_size(max_edge_length(mesh), data.T)
    if cache is None:
        cache = SnapshotCache(mesh, flow, grid)
    sampled = slab_mean_nodal(mesh, flow, grid, lambda x, t: x[..., 2] * math.sin(2 * math.pi * t))
    exact = ProjectedControl(DgFunction(grid, mesh, -data.alpha * sampled), data.alpha, (data.lo, data.hi))
    y_exact = cache.forward(np.zeros(cache.m), control_loads(exact, cache))
    spec = ControlProblemSpec(
        data.alpha, (data.lo, data.hi), Distributed(field=data.desired_offset, dg=DgFunction(grid, mesh, y_exact)), mesh, flow, grid
    )
    return ReducedProblem(spec, cache), exact


def control_errors(u: ProjectedControl, problem: ReducedProblem, exact_field, sample="left", inf_sample=0.5, n_time: int = 2):
    """Relative |u - u_exact|_{h,k} and relative vertex maximum error.

    Space integrals run over the cut sub-triangles of u with the 7-point rule,
    weighted by the triangle areas at t_n. ``sample`` picks where u_exact is
    taken in time on each slab: "gauss" integrates over the slab with
    Gauss-Legendre, a number s in [0, 1] samples at t_{n-1} + s k, and "left"
    is s = 0. The maximum error compares vertex values at t_{n-1} + inf_sample k.
    """
    c = problem.cache
    grid, mesh, flow = c.grid, c.mesh, c.flow
    a, b = u.bounds
    w_all = u.w()
    if sample == "gauss":
        xg, wg = np.polynomial.legendre.leggauss(n_time)
        offsets, weights = 0.5 * (xg + 1.0), 0.5 * wg
    else:
        offsets, weights = np.array([0.0 if sample == "left" else float(sample)]), np.array([1.0])
    ref = mesh.vertices
    err_sq = norm_sq = 0.0
    vmax_err = vmax_ref = 0.0
    for n in range(grid.N):
        w = w_all[n][c.tris]
        pieces = cut_pieces(w, a, b)
        # quadrature points in parent barycentric coordinates: (S, 7, 3)
        qb = np.einsum("qj,sjd->sqd", GAUSS7_POINTS, pieces.bary)
        uh = np.einsum("sqd,sd->sq", qb, w[pieces.parent])
        lab = pieces.label[:, None]
        uh = np.where(lab == LOWER, a, np.where(lab == UPPER, b, uh))
        x0 = np.einsum("sqd,sdk->sqk", qb, ref[c.tris[pieces.parent]]).reshape(-1, 3)
        weight = (c.areas[n + 1][pieces.parent] * pieces.area_ratio)[:, None] * GAUSS7_WEIGHTS[None]
        t0 = grid.nodes[n]
        for off, wt in zip(offsets, weights):
            tg = t0 + off * grid.k
            ue = exact_field(flow.position(x0, tg), tg).reshape(uh.shape)
            err_sq += grid.k * wt * float(np.sum(weight * (uh - ue) ** 2))
            norm_sq += grid.k * wt * float(np.sum(weight * ue**2))
        tm = t0 + (0.0 if inf_sample == "left" else float(inf_sample)) * grid.k
        ue_v = exact_field(flow.position(ref, tm), tm)
        vmax_err = max(vmax_err, float(np.max(np.abs(np.clip(w_all[n], a, b) - ue_v))))
        vmax_ref = max(vmax_ref, float(np.max(np.abs(ue_v))))
    return math.sqrt(err_sq / norm_sq), vmax_err / vmax_ref


def verify_exactness_example_one(level: int, data: ExampleOneData | None = None) -> float:
    """Relative optimality residual of the sampled exact control."""
    problem, exact = example_one_setup(level, data)
    res = optimality_residual(exact, problem)
    nrm = math.sqrt(max(control_inner(exact, exact, problem.cache), 0.0))
    return res / nrm


def run_example_one(levels, q: int = 2, tol: float = 1e-9, data: ExampleOneData | None = None, sample="left") -> ConvergenceRecord:
    """Solve example one on each level by semi-smooth Newton and record errors and EOCs."""
    data = ExampleOneData() if data is None else data
    record = ConvergenceRecord(q)
    for level in levels:
        start = time.perf_counter()
        try:
            problem, _ = example_one_setup(level, data)
            u, report = solve_semismooth_newton(problem, tol=tol)
        except Exception as exc:
            raise RuntimeError(f"example one failed on level {level}: {exc}") from exc
        err2, errinf = control_errors(u, problem, data.control, sample=sample)
        c = problem.cache
        row = LevelResult(level, c.m, c.grid.N, max_edge_length(c.mesh), c.grid.k, err2, errinf, report.iterations, time.perf_counter() - start)
        log.info("example one level %d: ERR_L2 %.3e ERR_inf %.3e (%d iterations, %.1f s)", level, err2, errinf, report.iterations, row.wall_seconds)
        record.rows.append(row)
    return record


# ----------------------------------------------------------------------------
# example two


@dataclass
class TerminalSolution:
    """What the inter-grid comparison needs from a solved level."""

    level: int
    mesh: object
    grid: TimeGrid
    areas: np.ndarray
    control: np.ndarray
    iterations: int
    wall_seconds: float


def solve_example_two(level: int, data: ExampleTwoData | None = None, tol: float = 1e-10) -> TerminalSolution:
    data = ExampleTwoData() if data is None else data
    start = time.perf_counter()
    mesh = sphere_mesh(level)
    flow = AnalyticSphereStretch(data.T)
    grid = TimeGrid.from_mesh_size(max_edge_length(mesh), data.T)
    spec = ControlProblemSpec(
        data.alpha,
        UNBOUNDED,
        Terminal(data.target, rule=lambda snap: plane_singular_rule(snap, PLANE_NORMAL, data.exponent)),
        mesh,
        flow,
        grid,
    )
    problem = ReducedProblem(spec)
    u, report = solve_terminal(problem, tol=tol)
    return TerminalSolution(
        level, mesh, grid, problem.cache.areas.copy(), u.nodal(), report.iterations, time.perf_counter() - start
    )


class ProjectionError(RuntimeError):
    pass


def radial_inverse_lift(points: np.ndarray, mesh, candidates: int = 8, tol: float = 1e-10):
    """Points of a flat triangle mesh lying on the rays through ``points``.

    On the reference sphere the normal lift is radial, so this inverts the
    lift of ``mesh``. Returns (triangle index, barycentric coordinates).
    Raises ProjectionError when no candidate triangle contains the ray hit
    within ``tol``.
    """
    verts, tris = mesh.vertices, mesh.triangles
    centroids = verts[tris].mean(axis=1)
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    d = points / np.linalg.norm(points, axis=1, keepdims=True)
    kk = min(candidates, tris.shape[0])
    _, cand = cKDTree(centroids).query(d, k=kk)
    cand = cand.reshape(d.shape[0], kk)
    best_viol = np.full(d.shape[0], np.inf)
    best_t = np.zeros(d.shape[0], dtype=np.int64)
    best_b = np.zeros((d.shape[0], 3))
    for j in range(kk):
        t = cand[:, j]
        tv = verts[tris[t]]
        a = tv[:, 0]
        # a + v (b - a) + w (c - a) = s d
        mat = np.stack([tv[:, 1] - a, tv[:, 2] - a, -d], axis=2)
        # rays parallel to a candidate's plane cannot hit it
        ok = np.abs(np.linalg.det(mat)) > 1e-14
        vws = np.zeros((d.shape[0], 3))
        vws[ok] = np.linalg.solve(mat[ok], -a[ok][:, :, None])[:, :, 0]
        bc = np.stack([1.0 - vws[:, 0] - vws[:, 1], vws[:, 0], vws[:, 1]], axis=1)
        viol = np.maximum(-bc.min(axis=1), 0.0)
        viol[(vws[:, 2] <= 0) | ~ok] = np.inf
        better = viol < best_viol
        best_viol[better], best_t[better], best_b[better] = viol[better], t[better], bc[better]
    if np.max(best_viol) > tol:
        raise ProjectionError(f"radial lift missed every candidate triangle by {np.max(best_viol):.2e}")
    return best_t, best_b


def intergrid_error(coarse: TerminalSolution, fine: TerminalSolution) -> float:
    """Relative |u_coarse^l - u_fine| / |u_fine| in the fine space-time product.

    Fine quadrature points (7-point rule) are matched with the coarse points
    on the same ray through the origin, i.e. with equal lift to the reference
    sphere; since the flow is linear in space the coarse barycentric
    coordinates hold at all times.
    Overlaps of fine and coarse slabs are integrated exactly.
    """
    fm, cm = fine.mesh, coarse.mesh
    pts = np.einsum("qj,fjk->fqk", GAUSS7_POINTS, fm.vertices[fm.triangles]).reshape(-1, 3)
    tri, bary = radial_inverse_lift(pts, cm)
    nq = pts.shape[0]
    rows = np.repeat(np.arange(nq), 3)
    P_coarse = sp.csr_matrix((bary.ravel(), (rows, cm.triangles[tri].ravel())), shape=(nq, cm.n_vertices))
    fine_bary = np.broadcast_to(GAUSS7_POINTS, (fm.n_triangles, 7, 3)).reshape(-1, 3)
    fine_cols = np.repeat(fm.triangles, 7, axis=0)
    P_fine = sp.csr_matrix((fine_bary.ravel(), (rows, fine_cols.ravel())), shape=(nq, fm.n_vertices))

    tf, tc = fine.grid.nodes, coarse.grid.nodes
    breaks = np.union1d(tf, tc)
    err_sq = norm_sq = 0.0
    cached_n, uf, w = -1, None, None
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        length = hi - lo
        if length <= 1e-15:
            continue
        mid = 0.5 * (lo + hi)
        n = min(int(np.searchsorted(tf, mid)) - 1, fine.grid.N - 1)
        m = min(int(np.searchsorted(tc, mid)) - 1, coarse.grid.N - 1)
        if n != cached_n:
            uf = P_fine @ fine.control[n]
            w = (fine.areas[n + 1][:, None] * GAUSS7_WEIGHTS[None]).ravel()
            cached_n = n
        uc = P_coarse @ coarse.control[m]
        err_sq += length * float(np.sum(w * (uf - uc) ** 2))
        norm_sq += length * float(np.sum(w * uf**2))
    return math.sqrt(err_sq / norm_sq)


def run_example_two(levels, q: int = 2, gap: int = 2, data: ExampleTwoData | None = None, tol: float = 1e-10) -> ConvergenceRecord:
    """Estimate errors of example two against the solution ``gap`` levels finer."""
    levels = list(levels)
    solutions: dict[int, TerminalSolution] = {}

    def get(level):
        if level not in solutions:
            try:
                solutions[level] = solve_example_two(level, data, tol)
            except Exception as exc:
                raise RuntimeError(f"example two failed on level {level}: {exc}") from exc
            s = solutions[level]
            log.info("example two level %d solved: %d CG iterations, %.1f s", level, s.iterations, s.wall_seconds)
        return solutions[level]

    record = ConvergenceRecord(q)
    for level in levels:
        coarse, fine = get(level), get(level + gap)
        err = intergrid_error(coarse, fine)
        record.rows.append(
            LevelResult(level, coarse.mesh.n_vertices, coarse.grid.N, max_edge_length(coarse.mesh), coarse.grid.k, err, float("nan"), coarse.iterations, coarse.wall_seconds)
        )
        log.info("example two level %d: ERR_L2 %.4f", level, err)
        for old in [k for k in solutions if k <= level]:
            del solutions[old]
    return record
