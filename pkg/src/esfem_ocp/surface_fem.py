"""P1 finite elements on triangulated surfaces.

Assembly of mass and stiffness matrices on a shared vertex-adjacency pattern,
data loads, L2 projection and exact integration of box-projected
piecewise-linear functions via cut triangles.

Cut geometry is handled in barycentric coordinates of the parent triangle:
a linear function is determined by its three vertex values, so clipping a
triangle against level sets never needs the embedding in R^3.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.special import roots_jacobi, roots_legendre

from .geometry import FlowMap, MeshSnapshot, TriSurfaceMesh, hat_gradients, snapshot

LEVEL_TOL = 1e-12

# 7-point degree-5 rule on the triangle (barycentric points, weights summing to 1)
_A1, _B1 = 0.059715871789769820, 0.470142064105115090
_A2, _B2 = 0.797426985353087322, 0.101286507323456339
_W0, _W1, _W2 = 0.225, 0.132394152788506181, 0.125939180544827153
GAUSS7_POINTS = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
GAUSS7_WEIGHTS = np.array([_W0, _W1, _W1, _W1, _W2, _W2, _W2])

# edge midpoints: exact for quadratics
MIDPOINTS = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])

# reference P1 mass on a triangle of unit area
REF_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


def _cubic_tensor():
    """c[i, j, l] = (1/|T|) * integral of phi_i phi_j phi_l over T."""
    fact = [1, 1, 2, 6]
    c = np.empty((3, 3, 3))
    for i in range(3):
        for j in range(3):
            for l in range(3):
                n = np.bincount([i, j, l], minlength=3)
                c[i, j, l] = 2.0 * np.prod([fact[v] for v in n]) / 120.0
    return c


CUBIC = _cubic_tensor()


# ----------------------------------------------------------------------------
# sparse pattern and assembly


class MeshPattern:
    """CSR pattern of the vertex adjacency (with diagonal) of a mesh.

    ``scatter`` maps each entry of the (F, 3, 3) element matrices to its CSR
    slot so that assembly reduces to one ``bincount``.
    """

    def __init__(self, mesh: TriSurfaceMesh):
        t = mesh.triangles
        m = mesh.n_vertices
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        key = rows * m + cols
        uniq, inv = np.unique(key, return_inverse=True)
        self.n = m
        self.indices = (uniq % m).astype(np.int64)
        self.indptr = np.searchsorted(uniq // m, np.arange(m + 1)).astype(np.int64)
        self.scatter = inv.reshape(t.shape[0], 3, 3)
        self.nnz = uniq.shape[0]

    def assemble(self, element_values: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.scatter.ravel(), weights=element_values.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


_PATTERNS: dict[int, tuple[TriSurfaceMesh, MeshPattern]] = {}


def mesh_pattern(mesh: TriSurfaceMesh) -> MeshPattern:
    hit = _PATTERNS.get(id(mesh))
    if hit is None or hit[0] is not mesh:
        hit = (mesh, MeshPattern(mesh))
        _PATTERNS[id(mesh)] = hit
    return hit[1]


def element_mass(areas: np.ndarray) -> np.ndarray:
    return areas[:, None, None] * REF_MASS


def element_stiffness(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    areas, grads = hat_gradients(vertices, triangles)
    return areas[:, None, None] * np.einsum("fia,fja->fij", grads, grads)


def _lambda_at_vertices(snap: MeshSnapshot, lam):
    """Return ('const', c), ('vertex', (m,)) or ('element', (F,)) representation of lambda."""
    if lam is None:
        return "const", 0.0
    if callable(lam):
        return "vertex", np.asarray(lam(snap.moved_vertices, snap.t), dtype=float)
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0:
        return "const", float(lam)
    if lam.shape == (snap.n_vertices,):
        return "vertex", lam
    if lam.shape == (snap.triangles.shape[0],):
        return "element", lam
    raise ValueError("lambda must be a constant, per-vertex, per-element array or callable")


def element_weighted_mass(areas: np.ndarray, triangles: np.ndarray, kind: str, lam) -> np.ndarray:
    if kind == "const":
        return lam * element_mass(areas)
    if kind == "element":
        return (areas * lam)[:, None, None] * REF_MASS
    lv = lam[triangles]
    return areas[:, None, None] * np.einsum("ijl,fl->fij", CUBIC, lv)


def assemble_mass(snap: MeshSnapshot) -> sp.csr_matrix:
    """Exact P1 mass matrix of the flat triangulation."""
    return mesh_pattern(snap.base).assemble(element_mass(snap.areas))


def assemble_stiffness(snap: MeshSnapshot, lam=0.0) -> sp.csr_matrix:
    """Laplace-Beltrami stiffness plus the lambda-weighted mass.

    ``lam`` may be a constant, per-vertex values (integrated exactly as a
    linear function), per-element constants, or a callable ``lam(x, t)``
    evaluated at the moved vertices.
    """
    vals = element_stiffness(snap.moved_vertices, snap.triangles)
    kind, lv = _lambda_at_vertices(snap, lam)
    if not (kind == "const" and lv == 0.0):
        vals = vals + element_weighted_mass(snap.areas, snap.triangles, kind, lv)
    return mesh_pattern(snap.base).assemble(vals)


def export_matrix_market(path, matrix) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), symmetry="symmetric")


# ----------------------------------------------------------------------------
# quadrature and data


@dataclass(frozen=True)
class TriangleRule:
    """Per-triangle quadrature: barycentric points (F, Q, 3), weights (F, Q) summing to 1 per triangle."""

    bary: np.ndarray
    weights: np.ndarray


def gauss7_rule(n_triangles: int) -> TriangleRule:
    return TriangleRule(
        np.broadcast_to(GAUSS7_POINTS, (n_triangles, 7, 3)),
        np.broadcast_to(GAUSS7_WEIGHTS, (n_triangles, 7)),
    )


def plane_singular_rule(snap: MeshSnapshot, normal, exponent: float, order: int = 8, tol: float = 1e-12) -> TriangleRule:
    """Quadrature for integrands behaving like |normal . x|^(-exponent) near a plane.

    The plane must be resolved by mesh edges. Triangles with an edge on the
    plane use collapsed coordinates with Gauss-Jacobi weights absorbing the
    singular factor; triangles touching it in one vertex likewise. Integrands
    are evaluated at interior nodes only, and the returned weights already
    contain the compensating factor, so ``sum(w * g(x))`` is the mean of g.
    Other triangles get a collapsed Gauss-Legendre product rule.
    """
    normal = np.asarray(normal, dtype=float)
    tris = snap.triangles
    s = snap.moved_vertices[tris] @ normal
    on = np.abs(s) <= tol
    n_on = on.sum(axis=1)
    if np.any((s.max(axis=1) > tol) & (s.min(axis=1) < -tol)):
        raise ValueError("singular plane crosses a triangle interior")
    q = order
    F = tris.shape[0]
    bary = np.empty((F, q * q, 3))
    weights = np.empty((F, q * q))

    xs, ws = roots_legendre(q)
    sig = 0.5 * (xs + 1.0)
    wsig = 0.5 * ws

    def product(tau, wtau, apex_first):
        # apex_first: lambda_apex = 1 - tau, others tau*sigma, tau*(1 - sigma); Jacobian tau is in wtau
        T, S = np.meshgrid(tau, sig, indexing="ij")
        W = np.outer(wtau, wsig)
        la = 1.0 - T
        lb = T * S
        lc = T * (1.0 - S)
        return np.stack([la, lb, lc], axis=-1).reshape(-1, 3), 2.0 * W.ravel()

    # regular: weight tau on [0, 1]
    xj, wj = roots_jacobi(q, 0.0, 1.0)  # weight (1+x)
    tau_r, w_r = 0.5 * (xj + 1.0), wj / 4.0
    reg_b, reg_w = product(tau_r, w_r, True)
    # edge-singular: g ~ (1 - tau)^(-p) where the apex carries lambda = 1 - tau
    # integrate with weight tau * (1 - tau)^(-p); compensate with (1 - tau)^p
    xj, wj = roots_jacobi(q, -exponent, 1.0)
    tau_e = 0.5 * (xj + 1.0)
    w_e = wj / 2.0 ** (2.0 - exponent) * (1.0 - tau_e) ** exponent
    edge_b, edge_w = product(tau_e, w_e, True)
    # vertex-singular: apex on the plane, g ~ tau^(-p); weight tau^(1-p)
    xj, wj = roots_jacobi(q, 0.0, 1.0 - exponent)
    tau_v = 0.5 * (xj + 1.0)
    w_v = wj / 2.0 ** (2.0 - exponent) * tau_v**exponent
    vert_b, vert_w = product(tau_v, w_v, True)

    for f in range(F):
        if n_on[f] == 0:
            b, w, apex = reg_b, reg_w, 0
        elif n_on[f] == 2:
            apex = int(np.flatnonzero(~on[f])[0])
            b, w = edge_b, edge_w
        elif n_on[f] == 1:
            apex = int(np.flatnonzero(on[f])[0])
            b, w = vert_b, vert_w
        else:
            raise ValueError("triangle lies inside the singular plane")
        order_idx = [apex, (apex + 1) % 3, (apex + 2) % 3]
        bb = np.empty_like(b)
        bb[:, order_idx] = b
        bary[f] = bb
        weights[f] = w
    return TriangleRule(bary, weights)


def quadrature_points(vertices: np.ndarray, triangles: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Points (F, Q, 3) from barycentric coordinates (F or 1, Q, 3)."""
    return np.einsum("fqi,fid->fqd", np.broadcast_to(bary, (triangles.shape[0],) + bary.shape[-2:]), vertices[triangles])


def load_vector(snap: MeshSnapshot, values: np.ndarray, rule: TriangleRule) -> np.ndarray:
    """b_i = integral of g * phi_i, given g at the rule's points (F, Q)."""
    contrib = snap.areas[:, None] * np.einsum("fq,fq,fqi->fi", rule.weights, values, rule.bary)
    return np.bincount(snap.triangles.ravel(), weights=contrib.ravel(), minlength=snap.n_vertices)


def _evaluate(g, points, t):
    vals = np.asarray(g(points.reshape(-1, 3), t), dtype=float)
    vals = np.broadcast_to(vals, (points.shape[0] * points.shape[1],))
    return vals.reshape(points.shape[:2])


def slab_mean_load(mesh: TriSurfaceMesh, flow: FlowMap, f, t_lo: float, t_hi: float, n_time: int = 2, snap_hi: MeshSnapshot | None = None) -> np.ndarray:
    """F_i = integral over (t_lo, t_hi] of <f(., t) pulled back to the t_hi surface, phi_i>.

    Gauss-Legendre in time with ``n_time`` nodes; in space the 7-point rule on
    the snapshot at ``t_hi``. A spatial quadrature point is followed along the
    discrete flow (fixed barycentric coordinates on the moving triangle).
    """
    snap_hi = snapshot(mesh, flow, t_hi) if snap_hi is None else snap_hi
    rule = gauss7_rule(mesh.n_triangles)
    xg, wg = roots_legendre(n_time)
    k = t_hi - t_lo
    total = np.zeros((mesh.n_triangles, 7))
    for x, w in zip(xg, wg):
        tg = t_lo + 0.5 * k * (x + 1.0)
        pts = quadrature_points(flow.position(mesh.vertices, tg), mesh.triangles, rule.bary)
        total += 0.5 * k * w * _evaluate(f, pts, tg)
    return load_vector(snap_hi, total, rule)


def mass_solve(snap: MeshSnapshot, b: np.ndarray) -> np.ndarray:
    lu = spl.splu(sp.csc_matrix(assemble_mass(snap)), permc_spec="MMD_AT_PLUS_A")
    return lu.solve(np.asarray(b, dtype=float))


def l2_project(snap: MeshSnapshot, g, rule: TriangleRule | None = None) -> np.ndarray:
    """Coefficients of the L2 projection of g(x, t) onto the P1 space of the snapshot."""
    rule = gauss7_rule(snap.triangles.shape[0]) if rule is None else rule
    pts = quadrature_points(snap.moved_vertices, snap.triangles, rule.bary)
    vals = _evaluate(g, pts, snap.t)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("integrand is not finite at a quadrature point")
    return mass_solve(snap, load_vector(snap, vals, rule))


# ----------------------------------------------------------------------------
# box projection and cut triangles

LOWER, INACTIVE, UPPER, CUT = -1, 0, 1, 2


def project_box(v, a: float, b: float):
    return np.clip(v, a, b)


def classify(w: np.ndarray, a: float, b: float, tol: float = LEVEL_TOL) -> np.ndarray:
    """Per-triangle class from vertex values w (n, 3) of the unprojected function.

    Values within ``tol`` of a bound count as lying on it; a triangle that
    only touches a bound is inactive.
    """
    lo = w <= a + tol
    hi = w >= b - tol
    inside = ~(w < a - tol) & ~(w > b + tol)
    cls = np.full(w.shape[0], CUT, dtype=np.int8)
    cls[inside.all(axis=1)] = INACTIVE
    cls[lo.all(axis=1) & ~inside.all(axis=1)] = LOWER
    cls[hi.all(axis=1) & ~inside.all(axis=1)] = UPPER
    return cls


def _clip(poly: np.ndarray, count: np.ndarray, d: np.ndarray):
    """Clip convex polygons (barycentric vertices) against {x : x . d >= 0}.

    poly (n, V, 3), count (n,), d (n, 3). Returns (poly', count') with V + 1 slots.
    """
    n, V, _ = poly.shape
    j = np.arange(V)
    valid = j[None, :] < count[:, None]
    cnt = np.maximum(count, 1)
    nxt = (j[None, :] + 1) % cnt[:, None]
    dv = np.einsum("nvi,ni->nv", poly, d)
    dn = np.take_along_axis(dv, nxt, axis=1)
    pn = np.take_along_axis(poly, nxt[:, :, None], axis=1)
    ins = dv >= 0.0
    insn = dn >= 0.0
    cross = valid & (ins != insn)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(cross, dv / (dv - dn), 0.0)
    inter = poly + s[:, :, None] * (pn - poly)
    slots = np.stack([poly, inter], axis=2).reshape(n, 2 * V, 3)
    keep = np.stack([valid & ins, cross], axis=2).reshape(n, 2 * V)
    order = np.argsort(~keep, axis=1, kind="stable")[:, : V + 1]
    out = np.take_along_axis(slots, order[:, :, None], axis=1)
    return out, keep.sum(axis=1)


def _region_halfplanes(w: np.ndarray, cls: int, a: float, b: float):
    """Affine functions (as vertex values) whose nonnegativity defines a class region."""
    one = np.ones_like(w)
    if cls == LOWER:
        return [a * one - w]
    if cls == UPPER:
        return [w - b * one]
    out = []
    if np.isfinite(a):
        out.append(w - a * one)
    if np.isfinite(b):
        out.append(b * one - w)
    return out


def _fan(poly: np.ndarray, count: np.ndarray, parent: np.ndarray):
    """Triangulate convex polygons by fans; drop zero-area pieces."""
    n, V, _ = poly.shape
    tris, owners = [], []
    for i in range(V - 2):
        sel = count >= i + 3
        if not np.any(sel):
            break
        t = np.stack([poly[sel, 0], poly[sel, i + 1], poly[sel, i + 2]], axis=1)
        tris.append(t)
        owners.append(parent[sel])
    if not tris:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64), np.zeros(0)
    tris = np.concatenate(tris)
    owners = np.concatenate(owners)
    e1 = tris[:, 1, 1:] - tris[:, 0, 1:]
    e2 = tris[:, 2, 1:] - tris[:, 0, 1:]
    ratio = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    keep = ratio > 0.0
    return tris[keep], owners[keep], ratio[keep]


def _clip_classes(ws, bounds, classes):
    """Sub-triangles of the region where function i lies in class classes[i], for all i.

    ws: list of (n, 3) vertex values; returns (bary (S,3,3), parent (S,), area ratio (S,)).
    """
    n = ws[0].shape[0]
    poly = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    count = np.full(n, 3)
    for w, (a, b), c in zip(ws, bounds, classes):
        if c == LOWER and not np.isfinite(a) or c == UPPER and not np.isfinite(b):
            return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64), np.zeros(0)
        for d in _region_halfplanes(w, c, a, b):
            poly, count = _clip(poly, count, d)
    return _fan(poly, count, np.arange(n))


@dataclass(frozen=True)
class CutRegion:
    """Decomposition of triangles into classified sub-triangles.

    ``parent`` indexes the triangle, ``bary`` holds barycentric vertex
    coordinates (S, 3, 3) in the parent, ``label`` is LOWER/INACTIVE/UPPER and
    ``area_ratio`` the sub-triangle area over the parent area.
    """

    parent: np.ndarray
    bary: np.ndarray
    label: np.ndarray
    area_ratio: np.ndarray


def cut_pieces(w: np.ndarray, a: float, b: float) -> CutRegion:
    """Classified sub-triangles for per-triangle vertex values w (n, 3) of -p/alpha."""
    cls = classify(w, a, b)
    whole = np.flatnonzero(cls != CUT)
    parents = [whole]
    barys = [np.broadcast_to(np.eye(3), (whole.size, 3, 3))]
    labels = [cls[whole].astype(np.int8)]
    ratios = [np.ones(whole.size)]
    cut = np.flatnonzero(cls == CUT)
    if cut.size:
        wc = w[cut]
        for c in (LOWER, INACTIVE, UPPER):
            bary, par, ratio = _clip_classes([wc], [(a, b)], [c])
            parents.append(cut[par])
            barys.append(bary)
            labels.append(np.full(par.size, c, dtype=np.int8))
            ratios.append(ratio)
    parent = np.concatenate(parents)
    order = np.argsort(parent, kind="stable")
    return CutRegion(
        parent[order],
        np.concatenate(barys)[order],
        np.concatenate(labels)[order],
        np.concatenate(ratios)[order],
    )


def cut_decompose(snap: MeshSnapshot, p: np.ndarray, alpha: float, bounds) -> CutRegion:
    """Split every triangle along the level sets {-p/alpha = a} and {-p/alpha = b}."""
    a, b = bounds
    w = -np.asarray(p, dtype=float)[snap.triangles] / alpha
    return cut_pieces(w, a, b)


def _piece_values(bary: np.ndarray, w: np.ndarray, c: int, a: float, b: float):
    """Values of the projected function at barycentric points (S, K, 3) on pieces of class c."""
    if c == LOWER:
        return np.full(bary.shape[:2], a)
    if c == UPPER:
        return np.full(bary.shape[:2], b)
    return np.einsum("ski,si->sk", bary, w)


def _midpoints_of(tris: np.ndarray) -> np.ndarray:
    """Barycentric (in the parent) coordinates of edge midpoints of sub-triangles."""
    return np.einsum("ej,sjd->sed", MIDPOINTS, tris)


def element_projected_loads(w: np.ndarray, a: float, b: float) -> np.ndarray:
    """(1/|T|) * integral over T of P_[a,b](w) phi_i for vertex values w (n, 3)."""
    cls = classify(w, a, b)
    out = np.zeros(w.shape)
    sel = cls == INACTIVE
    out[sel] = w[sel] @ REF_MASS
    if np.isfinite(a):
        out[cls == LOWER] = a / 3.0
    if np.isfinite(b):
        out[cls == UPPER] = b / 3.0
    cut = np.flatnonzero(cls == CUT)
    if cut.size:
        wc = w[cut]
        acc = np.zeros((cut.size, 3))
        for c in (LOWER, INACTIVE, UPPER):
            tris, par, ratio = _clip_classes([wc], [(a, b)], [c])
            if par.size == 0:
                continue
            mids = _midpoints_of(tris)
            vals = _piece_values(mids, wc[par], c, a, b)
            contrib = ratio[:, None] * np.einsum("se,sei->si", vals, mids) / 3.0
            np.add.at(acc, par, contrib)
        out[cut] = acc
    return out


def element_inactive_mass(w: np.ndarray, a: float, b: float):
    """Mass matrices restricted to the inactive set, per unit parent area.

    Returns (cls, cut_index, cut_mats) where fully inactive triangles use
    REF_MASS, fully active ones zero, and cut triangles ``cut_mats`` (c, 3, 3).
    """
    cls = classify(w, a, b)
    cut = np.flatnonzero(cls == CUT)
    mats = np.zeros((cut.size, 3, 3))
    if cut.size:
        tris, par, ratio = _clip_classes([w[cut]], [(a, b)], [INACTIVE])
        mids = _midpoints_of(tris)
        np.add.at(mats, par, ratio[:, None, None] * np.einsum("sei,sej->sij", mids, mids) / 3.0)
    return cls, cut, mats


def _class_vertex_values(w: np.ndarray, c: np.ndarray, a: float, b: float) -> np.ndarray:
    return np.where((c == LOWER)[:, None], a, np.where((c == UPPER)[:, None], b, w))


def element_pair_integral(w1, w2, bounds1, bounds2, kernel) -> np.ndarray:
    """(1/|T|) * integral over T of kernel(P1(w1), P2(w2)) on the union cut.

    ``kernel`` must be a polynomial of total degree <= 2 in its arguments;
    it is integrated exactly by the edge-midpoint rule on every piece where
    both projections are linear.
    """
    (a1, b1), (a2, b2) = bounds1, bounds2
    c1 = classify(w1, a1, b1)
    c2 = classify(w2, a2, b2)
    out = np.zeros(w1.shape[0])
    simple = np.flatnonzero((c1 != CUT) & (c2 != CUT))
    if simple.size:
        with np.errstate(invalid="ignore"):
            v1 = _class_vertex_values(w1[simple], c1[simple], a1, b1)
            v2 = _class_vertex_values(w2[simple], c2[simple], a2, b2)
        m1 = v1 @ MIDPOINTS.T
        m2 = v2 @ MIDPOINTS.T
        out[simple] = kernel(m1, m2).sum(axis=1) / 3.0
    cut = np.flatnonzero((c1 == CUT) | (c2 == CUT))
    if cut.size:
        wa, wb = w1[cut], w2[cut]
        acc = np.zeros(cut.size)
        ca_all, cb_all = c1[cut], c2[cut]
        for ca in (LOWER, INACTIVE, UPPER):
            for cb in (LOWER, INACTIVE, UPPER):
                rows = np.flatnonzero(((ca_all == ca) | (ca_all == CUT)) & ((cb_all == cb) | (cb_all == CUT)))
                if rows.size == 0:
                    continue
                tris, par, ratio = _clip_classes([wa[rows], wb[rows]], [(a1, b1), (a2, b2)], [ca, cb])
                if par.size == 0:
                    continue
                mids = _midpoints_of(tris)
                va = _piece_values(mids, wa[rows][par], ca, a1, b1)
                vb = _piece_values(mids, wb[rows][par], cb, a2, b2)
                np.add.at(acc, rows[par], ratio * kernel(va, vb).sum(axis=1) / 3.0)
        out[cut] = acc
    return out


def element_projected_product(w1: np.ndarray, w2: np.ndarray, a: float, b: float) -> np.ndarray:
    """(1/|T|) * integral over T of P(w1) * P(w2), exact on the union cut."""
    return element_pair_integral(w1, w2, (a, b), (a, b), lambda x, y: x * y)


def integrate_projected(snap: MeshSnapshot, p: np.ndarray, alpha: float, bounds, test=None):
    """Exact integrals of P_[a,b](-p/alpha) against the hat functions.

    With ``test`` None the load vector (m,) is returned; with a nodal vector
    the scalar integral of the product with that P1 function.
    """
    a, b = bounds
    w = -np.asarray(p, dtype=float)[snap.triangles] / alpha
    loads = element_projected_loads(w, a, b) * snap.areas[:, None]
    vec = np.bincount(snap.triangles.ravel(), weights=loads.ravel(), minlength=snap.n_vertices)
    if test is None:
        return vec
    return float(vec @ np.asarray(test, dtype=float))
