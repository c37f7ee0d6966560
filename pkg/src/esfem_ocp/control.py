"""Variationally discretized control-constrained problems on evolving surfaces.

The control is never discretized on its own: an iterate is represented by a
piecewise-constant adjoint-like field p and the control is the pointwise box
projection u = P_[a,b](-p / alpha), integrated exactly on cut triangles.

Distributed tracking:  min 1/2 |S u - y_d|^2_{h,k} + alpha/2 |u|^2_{h,k}
Terminal tracking:     min 1/2 |S_T u - y_T|^2_{L2(t=T)} + alpha/2 |u|^2_{h,k}
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spl

from .evolution import DgFunction, SnapshotCache, TimeGrid, discrete_inner, dg_loads
from .geometry import FlowMap, TriSurfaceMesh
from .surface_fem import (
    INACTIVE,
    REF_MASS,
    classify,
    element_inactive_mass,
    element_pair_integral,
    element_projected_loads,
    gauss7_rule,
    load_vector,
    quadrature_points,
)

log = logging.getLogger(__name__)

UNBOUNDED = (-np.inf, np.inf)


class ConvergenceError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# problem description


@dataclass
class Distributed:
    """Desired state y_d = field + dg; ``field(x, t)`` analytic, ``dg`` piecewise constant."""

    field: Callable | None = None
    dg: DgFunction | None = None


@dataclass
class Terminal:
    """Desired final state, given as a field y_T(x, t) or as nodal coefficients on Gamma_h(T).

    ``rule`` optionally builds the quadrature rule on the final snapshot
    (needed for singular targets).
    """

    target: Callable | np.ndarray
    rule: Callable | None = None


@dataclass
class ControlProblemSpec:
    alpha: float
    bounds: tuple[float, float]
    variant: Distributed | Terminal
    mesh: TriSurfaceMesh
    flow: FlowMap
    grid: TimeGrid

    def __post_init__(self):
        a, b = self.bounds
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not a <= b:
            raise ValueError("bounds must satisfy a <= b")
        self.bounds = (float(a), float(b))


@dataclass(eq=False)
class ProjectedControl:
    """u = P_[a,b](-p / alpha) slab by slab; ``p`` is a DgFunction."""

    p: DgFunction
    alpha: float
    bounds: tuple[float, float]

    def w(self) -> np.ndarray:
        return -self.p.slabs / self.alpha

    def nodal(self) -> np.ndarray:
        """Control values at the vertices, slab by slab."""
        return np.clip(self.w(), *self.bounds)

    @classmethod
    def from_dg(cls, u: DgFunction) -> "ProjectedControl":
        """Unconstrained representation of a piecewise-constant control."""
        return cls(-1.0 * u, 1.0, UNBOUNDED)


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = np.inf
    objective: float = np.nan
    converged: bool = False
    active_fractions: np.ndarray | None = None
    history: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(rec) for rec in self.history) + "\n"

    def to_csv(self) -> str:
        if not self.history:
            return ""
        keys = list(self.history[0].keys())
        lines = [",".join(keys)]
        for rec in self.history:
            lines.append(",".join(_fmt(rec.get(k)) for k in keys))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# ----------------------------------------------------------------------------
# exact integrals of projected controls over all slabs


def _slab_tri_values(cache: SnapshotCache, slabs: np.ndarray) -> np.ndarray:
    """Per-(slab, triangle) vertex values, flattened to (N*F, 3)."""
    return slabs[:, cache.tris].reshape(-1, 3)


def _scatter(cache: SnapshotCache, elem: np.ndarray) -> np.ndarray:
    """Sum per-(slab, triangle, corner) values into (N, m) nodal vectors."""
    N = cache.grid.N
    idx = (np.arange(N)[:, None, None] * cache.m + cache.tris[None]).ravel()
    return np.bincount(idx, weights=elem.ravel(), minlength=N * cache.m).reshape(N, cache.m)


def control_loads(u, cache: SnapshotCache) -> np.ndarray:
    """Slab loads k * integral of u phi_i over Gamma_h(t_n) for a (projected) control."""
    if isinstance(u, DgFunction):
        return dg_loads(u, cache)
    a, b = u.bounds
    elem = element_projected_loads(_slab_tri_values(cache, u.w()), a, b)
    elem *= cache.areas[1:].reshape(-1)[:, None]
    return cache.k * _scatter(cache, elem.reshape(cache.grid.N, -1, 3))


def _as_projected(u):
    return ProjectedControl.from_dg(u) if isinstance(u, DgFunction) else u


def control_pair(u, v, cache: SnapshotCache, kernel) -> float:
    """k * sum_n integral over Gamma_h(t_n) of kernel(u^n, v^n) for (projected) controls."""
    u, v = _as_projected(u), _as_projected(v)
    vals = element_pair_integral(
        _slab_tri_values(cache, u.w()), _slab_tri_values(cache, v.w()), u.bounds, v.bounds, kernel
    )
    return float(cache.k * np.sum(vals * cache.areas[1:].reshape(-1)))


def control_inner(u, v, cache: SnapshotCache) -> float:
    return control_pair(u, v, cache, lambda x, y: x * y)


def control_distance(u, v, cache: SnapshotCache) -> float:
    """|u - v|_{h,k} computed from the squared difference (no cancellation)."""
    return np.sqrt(max(control_pair(u, v, cache, lambda x, y: (x - y) ** 2), 0.0))


def active_fractions(u: ProjectedControl, cache: SnapshotCache) -> np.ndarray:
    """Area fraction of the active set per slab."""
    a, b = u.bounds
    w = _slab_tri_values(cache, u.w())
    cls, cut, mats = element_inactive_mass(w, a, b)
    frac = np.where(cls == INACTIVE, 1.0, 0.0)
    frac[cut] = mats.sum(axis=(1, 2))
    area = cache.areas[1:].reshape(-1)
    N = cache.grid.N
    act = 1.0 - (frac * area).reshape(N, -1).sum(axis=1) / cache.areas[1:].sum(axis=1)
    return act


# ----------------------------------------------------------------------------
# reduced problem


class ReducedProblem:
    """Precomputed data and operators of a control problem.

    ``adjoint_of(u)`` returns p(u) = S^*(S u - y_d) (distributed) or
    S_T^*(S_T u - y_T) (terminal) as a DgFunction.
    """

    def __init__(self, spec: ControlProblemSpec, cache: SnapshotCache | None = None):
        self.spec = spec
        self.alpha = spec.alpha
        self.bounds = spec.bounds
        self.cache = SnapshotCache(spec.mesh, spec.flow, spec.grid) if cache is None else cache
        c = self.cache
        N, m = spec.grid.N, spec.mesh.n_vertices
        variant = spec.variant
        self.terminal = isinstance(variant, Terminal)
        if self.terminal:
            snapT = c.snapshots[-1]
            target = variant.target
            if callable(target):
                rule = variant.rule(snapT) if variant.rule is not None else gauss7_rule(snapT.triangles.shape[0])
                pts = quadrature_points(snapT.moved_vertices, snapT.triangles, rule.bary)
                vals = np.asarray(target(pts.reshape(-1, 3), snapT.t), dtype=float).reshape(pts.shape[:2])
                if not np.all(np.isfinite(vals)):
                    raise FloatingPointError("terminal target is not finite at a quadrature point")
                self.target_load = load_vector(snapT, vals, rule)
                self.target_norm_sq = float(np.sum(snapT.areas[:, None] * rule.weights * vals**2))
                self.target_coeffs = _mass_solve(c, N, self.target_load)
            else:
                coeffs = np.asarray(target, dtype=float)
                self.target_coeffs = coeffs
                self.target_load = c.mass_apply(coeffs[None], times=slice(N, N + 1))[0]
                self.target_norm_sq = float(coeffs @ self.target_load)
        else:
            loads = np.zeros((N, m))
            norm_sq = 0.0
            if variant.field is not None:
                fl, fn = field_loads_and_norm(variant.field, c)
                loads += fl
                norm_sq += fn
                if variant.dg is not None:
                    norm_sq += 2.0 * float(np.sum(fl * variant.dg.slabs))
            if variant.dg is not None:
                loads += dg_loads(variant.dg, c)
                norm_sq += discrete_inner(variant.dg, variant.dg, c)
            self.data_loads = loads
            self.data_norm_sq = norm_sq
        self.sweeps = 0

    # -- operators
    def state(self, u) -> np.ndarray:
        """Forward solve; returns state slabs (N, m)."""
        self.sweeps += 1
        return self.cache.forward(np.zeros(self.cache.m), control_loads(u, self.cache))

    def _adjoint_from_state(self, y: np.ndarray, homogeneous: bool = False) -> np.ndarray:
        c = self.cache
        self.sweeps += 1
        if self.terminal:
            zT = y[-1] if homogeneous else y[-1] - self.target_coeffs
            return c.backward(zT, np.zeros_like(y))
        g = c.k * c.mass_apply(y)
        if not homogeneous:
            g = g - self.data_loads
        return c.backward(np.zeros(c.m), g)

    def adjoint_of(self, u) -> DgFunction:
        y = self.state(u)
        return DgFunction(self.cache.grid, self.cache.mesh, self._adjoint_from_state(y))

    def hessian_part(self, loads: np.ndarray) -> np.ndarray:
        """S^* S applied to a control given by its slab loads (no data)."""
        self.sweeps += 1
        y = self.cache.forward(np.zeros(self.cache.m), loads)
        return self._adjoint_from_state(y, homogeneous=True)

    def misfit_sq(self, y: np.ndarray) -> float:
        c = self.cache
        if self.terminal:
            yT = y[-1]
            my = c.mass_apply(yT[None], times=slice(-1, None))[0]
            return float(yT @ my - 2.0 * yT @ self.target_load + self.target_norm_sq)
        return float(c.k * np.sum(y * c.mass_apply(y)) - 2.0 * np.sum(y * self.data_loads) + self.data_norm_sq)

    def objective(self, u) -> float:
        y = self.state(u)
        return 0.5 * self.misfit_sq(y) + 0.5 * self.alpha * control_inner(u, u, self.cache)

    def project(self, p: DgFunction) -> ProjectedControl:
        return ProjectedControl(p, self.alpha, self.bounds)

    def residual(self, u) -> float:
        """|u - P(-p(u)/alpha)|_{h,k}."""
        p = self.adjoint_of(u)
        return control_distance(u, self.project(p), self.cache)


def _mass_solve(cache: SnapshotCache, n: int, b: np.ndarray) -> np.ndarray:
    import scipy.sparse as sp

    lu = spl.splu(sp.csc_matrix(cache.mass(n)), permc_spec="MMD_AT_PLUS_A")
    return lu.solve(b)


def field_loads_and_norm(f, cache: SnapshotCache, n_time: int = 2):
    """Slab-mean loads of an analytic field and its squared |.|_{h,k} norm (same quadrature)."""
    grid = cache.grid
    t = grid.nodes
    loads = np.zeros((grid.N, cache.m))
    norm_sq = 0.0
    rule = gauss7_rule(cache.mesh.n_triangles)
    xg, wg = np.polynomial.legendre.leggauss(n_time)
    for n in range(1, grid.N + 1):
        snap = cache.snapshots[n]
        total = np.zeros((cache.mesh.n_triangles, 7))
        sq = 0.0
        for x, w in zip(xg, wg):
            tg = t[n - 1] + 0.5 * grid.k * (x + 1.0)
            pts = quadrature_points(cache.flow.position(cache.mesh.vertices, tg), cache.tris, rule.bary)
            vals = np.asarray(f(pts.reshape(-1, 3), tg), dtype=float).reshape(pts.shape[:2])
            total += 0.5 * grid.k * w * vals
            sq += 0.5 * grid.k * w * float(np.sum(snap.areas[:, None] * rule.weights * vals**2))
        loads[n - 1] = load_vector(snap, total, rule)
        norm_sq += sq
    return loads, norm_sq


def evaluate_objective(u, problem: ReducedProblem) -> float:
    return problem.objective(u)


def optimality_residual(u, problem: ReducedProblem) -> float:
    return problem.residual(u)


# ----------------------------------------------------------------------------
# solvers


def _inactive_mass_apply(problem: ReducedProblem, w_tri: np.ndarray, q: np.ndarray) -> np.ndarray:
    """k * M_I(t_n) q^n with M_I the mass matrix restricted to the frozen inactive set."""
    c = problem.cache
    N = c.grid.N
    cls, cut, mats = w_tri
    qt = q[:, c.tris].reshape(-1, 3)
    out = np.zeros_like(qt)
    full = cls == INACTIVE
    out[full] = qt[full] @ REF_MASS
    if cut.size:
        out[cut] = np.einsum("cij,cj->ci", mats, qt[cut])
    out *= c.areas[1:].reshape(-1)[:, None]
    return c.k * _scatter(c, out.reshape(N, -1, 3))


def _active_loads(problem: ReducedProblem, w: np.ndarray):
    """Slab loads of the control equal to a / b on the active sets and 0 elsewhere.

    Also returns the frozen inactive-mass data used by the Newton operator.
    """
    c = problem.cache
    a, b = problem.bounds
    wt = w[:, c.tris].reshape(-1, 3)
    full = element_projected_loads(wt, a, b)
    # subtract the inactive part, which is the exact integral of w over the inactive set
    cls, cut, mats = element_inactive_mass(wt, a, b)
    inact = np.zeros_like(wt)
    sel = cls == INACTIVE
    inact[sel] = wt[sel] @ REF_MASS
    if cut.size:
        inact[cut] = np.einsum("cij,cj->ci", mats, wt[cut])
    elem = (full - inact) * c.areas[1:].reshape(-1)[:, None]
    return c.k * _scatter(c, elem.reshape(c.grid.N, -1, 3)), (cls, cut, mats)


def _record(report: SolveReport, it: int, res: float, J: float, act: np.ndarray, **extra):
    rec = {"iteration": it, "residual": float(res), "objective": float(J), "active_fraction": float(np.mean(act))}
    rec.update(extra)
    report.history.append(rec)
    log.info("iter %d residual %.3e J %.10g active %.4f", it, res, J, np.mean(act))


def solve_semismooth_newton(
    problem: ReducedProblem,
    tol: float = 1e-9,
    max_iter: int = 30,
    p0: DgFunction | None = None,
    forcing: float = 0.1,
) -> tuple[ProjectedControl, SolveReport]:
    """Semi-smooth Newton (primal-dual active set) iteration in the adjoint variable.

    With the active/inactive decomposition of -p/alpha frozen, the Newton step
    solves (I + (1/alpha) S^*S chi_I) p_new = S^*(S u_A - y_d) by GMRES, where
    u_A carries the bound values on the active sets.
    """
    c = problem.cache
    N, m = c.grid.N, c.m
    alpha = problem.alpha
    report = SolveReport()
    a, b = problem.bounds
    if a == b:
        # degenerate admissible set: u is the constant a
        p = DgFunction(c.grid, c.mesh, np.full((N, m), -alpha * a))
        u = problem.project(p)
        report.residual = 0.0
        report.objective = problem.objective(u)
        report.converged = True
        report.active_fractions = np.ones(N)
        _record(report, 0, 0.0, report.objective, report.active_fractions)
        return u, report

    p = DgFunction.zeros(c.grid, c.mesh) if p0 is None else p0.copy()
    prev_pattern = None
    for it in range(max_iter + 1):
        u = problem.project(p)
        y = problem.state(u)
        p_of_u = DgFunction(c.grid, c.mesh, problem._adjoint_from_state(y))
        res = control_distance(u, problem.project(p_of_u), c)
        J = 0.5 * problem.misfit_sq(y) + 0.5 * alpha * control_inner(u, u, c)
        act = active_fractions(u, c)
        pattern = classify(u.w()[:, c.tris].reshape(-1, 3), a, b)
        repeated = prev_pattern is not None and np.array_equal(pattern, prev_pattern)
        _record(report, it, res, J, act, sets_repeated=bool(repeated))
        report.iterations, report.residual, report.objective = it, res, J
        report.active_fractions = act
        if res <= tol:
            report.converged = True
            return u, report
        if it == max_iter:
            break
        prev_pattern = pattern
        w = u.w()
        rhs_loads, frozen = _active_loads(problem, w)
        rhs = problem.hessian_part(rhs_loads)
        if not problem.terminal:
            rhs = rhs - c.backward(np.zeros(m), problem.data_loads)
        else:
            rhs = rhs - c.backward(problem.target_coeffs, np.zeros((N, m)))

        def matvec(x, frozen=frozen):
            q = x.reshape(N, m)
            return (q + problem.hessian_part(_inactive_mass_apply(problem, frozen, q)) / alpha).ravel()

        op = spl.LinearOperator((N * m, N * m), matvec=matvec, dtype=float)
        # inexact Newton: reduce the linear residual at the current iterate by eta,
        # with eta shrinking as that residual does
        rhs_vec = rhs.ravel()
        bnorm = np.linalg.norm(rhs_vec)
        r0 = np.linalg.norm(rhs_vec - matvec(p.slabs.ravel()))
        eta = min(forcing, r0 / max(bnorm, 1e-300))
        atol = max(eta * r0, 1e-15 * bnorm)
        sol, info = spl.gmres(op, rhs_vec, x0=p.slabs.ravel(), rtol=0.0, atol=atol, restart=60, maxiter=20)
        if info < 0:
            raise ConvergenceError(f"GMRES breakdown in Newton iteration {it}")
        p = DgFunction(c.grid, c.mesh, sol.reshape(N, m))
    raise ConvergenceError(f"semi-smooth Newton did not reach {tol:g} in {max_iter} iterations (residual {report.residual:.3e})")


def solve_fixed_point(
    problem: ReducedProblem,
    damping: float = 1.0,
    tol: float = 1e-9,
    max_iter: int = 500,
) -> tuple[ProjectedControl, SolveReport]:
    """Damped fixed-point iteration p <- (1 - theta) p + theta p(P(-p/alpha)).

    The projection is applied exactly at every step; contraction needs
    theta < 2 alpha / (alpha + |S|^2) roughly.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    c = problem.cache
    report = SolveReport()
    p = DgFunction.zeros(c.grid, c.mesh)
    for it in range(max_iter + 1):
        u = problem.project(p)
        y = problem.state(u)
        p_new = DgFunction(c.grid, c.mesh, problem._adjoint_from_state(y))
        res = control_distance(u, problem.project(p_new), c)
        J = 0.5 * problem.misfit_sq(y) + 0.5 * problem.alpha * control_inner(u, u, c)
        act = active_fractions(u, c)
        _record(report, it, res, J, act)
        report.iterations, report.residual, report.objective, report.active_fractions = it, res, J, act
        if res <= tol:
            report.converged = True
            return u, report
        p = (1.0 - damping) * p + damping * p_new
    raise ConvergenceError(f"fixed-point iteration did not reach {tol:g} in {max_iter} iterations (residual {report.residual:.3e})")


def conjugate_gradient(apply, rhs: DgFunction, inner, x0: DgFunction | None = None, tol: float = 1e-10, max_iter: int = 500):
    """CG for a self-adjoint positive operator in the product ``inner``.

    Returns (x, history) with per-iteration residual norms and the quadratic
    functional 1/2 <Ax, x> - <b, x>, which decreases monotonically.
    """
    x = rhs * 0.0 if x0 is None else x0.copy()
    r = rhs - apply(x) if x0 is not None else rhs.copy()
    d = r.copy()
    rr = inner(r, r)
    bnorm = np.sqrt(inner(rhs, rhs))
    history = []

    def quad(xx, rr_):
        # 1/2 <Ax,x> - <b,x> = -1/2 <b + r, x> with r = b - Ax
        return -0.5 * inner(rhs + rr_, xx) + 0.0

    history.append({"iteration": 0, "residual": float(np.sqrt(rr)), "functional": float(quad(x, r))})
    if bnorm == 0.0:
        return x, history
    for it in range(1, max_iter + 1):
        Ad = apply(d)
        dAd = inner(d, Ad)
        step = rr / dAd
        x = x + step * d
        r = r - step * Ad
        rr_new = inner(r, r)
        history.append({"iteration": it, "residual": float(np.sqrt(rr_new)), "functional": float(quad(x, r))})
        if np.sqrt(rr_new) <= tol * bnorm:
            return x, history
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise ConvergenceError(f"CG did not converge in {max_iter} iterations")


def solve_unconstrained_cg(problem: ReducedProblem, tol: float = 1e-10, max_iter: int = 500):
    """Solve (alpha I + S^*S) u = -S^*(-y_d) for unconstrained bounds by CG in <.,.>_{h,k}."""
    c = problem.cache
    N, m = c.grid.N, c.m
    if problem.terminal:
        rhs_slabs = c.backward(problem.target_coeffs, np.zeros((N, m)))
    else:
        rhs_slabs = c.backward(np.zeros(m), problem.data_loads)
    rhs = DgFunction(c.grid, c.mesh, rhs_slabs)

    def apply(u: DgFunction):
        return DgFunction(c.grid, c.mesh, problem.alpha * u.slabs + problem.hessian_part(dg_loads(u, c)))

    def inner(f, g):
        return discrete_inner(f, g, c)

    u, hist = conjugate_gradient(apply, rhs, inner, tol=tol, max_iter=max_iter)
    report = SolveReport(iterations=len(hist) - 1, history=hist)
    ctrl = ProjectedControl(-problem.alpha * u, problem.alpha, UNBOUNDED)
    report.residual = problem.residual(ctrl)
    report.objective = problem.objective(ctrl)
    report.converged = True
    report.active_fractions = np.zeros(N)
    return ctrl, report


def solve_terminal(problem: ReducedProblem, tol: float = 1e-10, max_iter: int = 500):
    """Terminal problem: CG when unconstrained, semi-smooth Newton otherwise."""
    if not problem.terminal:
        raise ValueError("solve_terminal needs a terminal-tracking problem")
    if problem.bounds == UNBOUNDED:
        return solve_unconstrained_cg(problem, tol=tol, max_iter=max_iter)
    return solve_semismooth_newton(problem, tol=tol)
