"""Reference-element polynomial bases and quadrature.

Provides Gauss rules on the reference segment [0,1] and the reference
triangle {x,y >= 0, x+y <= 1}, scalar P_k bases (Lagrange and per-cell
orthonormal), orthonormal Legendre bases on facets, and vector BDM_k
bases defined through facet-normal moments.  The BDM construction works
directly on physical triangles (batched over all cells of a mesh), which
makes normal continuity a pure dof identification and avoids any
orientation bookkeeping for the Piola transform.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_QUAD_DEGREE = 20


@dataclass(frozen=True)
class QuadratureRule:
    """Points/weights on a reference element.

    points: (n,) parameters in [0,1] for segments, (n,2) coordinates for
    triangles.  weights sum to the reference measure (1 resp. 1/2).
    """

    element: str
    degree: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def npoints(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def segment_rule(degree):
    """Gauss-Legendre rule on [0,1] exact for polynomials of `degree`."""
    if not 0 <= degree <= MAX_QUAD_DEGREE:
        raise ValueError(f"unsupported segment quadrature degree {degree}")
    n = max(1, (degree + 2) // 2)
    x, w = roots_legendre(n)
    pts = 0.5 * (x + 1.0)
    wts = 0.5 * w
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule("seg", degree, pts, wts)


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Collapsed-coordinate Gauss rule on the reference triangle.

    Tensorizes Gauss-Legendre in the collapsed direction with
    Gauss-Jacobi(1,0), which absorbs the Duffy Jacobian; exact for total
    degree `degree`.
    """
    if not 0 <= degree <= MAX_QUAD_DEGREE:
        raise ValueError(f"unsupported triangle quadrature degree {degree}")
    n = max(1, (degree + 2) // 2)
    xa, wa = roots_legendre(n)
    a = 0.5 * (xa + 1.0)
    wa = 0.5 * wa
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    b = 0.5 * (xb + 1.0)
    wb = 0.25 * wb
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = np.column_stack([(A * (1.0 - B)).ravel(), B.ravel()])
    wts = np.outer(wa, wb).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule("tri", degree, pts, wts)


def quadrature(element, degree):
    """Quadrature rule for `element` in {"tri","seg"} exact at `degree`."""
    if element == "tri":
        return triangle_rule(degree)
    if element == "seg":
        return segment_rule(degree)
    raise ValueError(f"unknown element {element!r}")


# ---------------------------------------------------------------------------
# monomials


@lru_cache(maxsize=None)
def pk_exponents(k):
    """Exponent pairs (a,b) of the scalar monomial basis of P_k, graded."""
    return tuple((d - b, b) for d in range(k + 1) for b in range(d + 1))


def pk_dim(k):
    return (k + 1) * (k + 2) // 2


def eval_monomials(k, x, y, center=(0.0, 0.0), scale=1.0):
    """Scaled monomials ((x-cx)/s)^a ((y-cy)/s)^b with gradients.

    Returns (vals, grads) of shapes (..., nm) and (..., nm, 2) where the
    leading shape is that of x.  `center`/`scale` may be arrays that
    broadcast against x (per-cell centering keeps Vandermonde systems
    well conditioned down to h ~ 1e-3).
    """
    exps = pk_exponents(k)
    cx, cy = center
    X = (np.asarray(x) - cx) / scale
    Y = (np.asarray(y) - cy) / scale
    nm = len(exps)
    vals = np.empty(X.shape + (nm,))
    grads = np.empty(X.shape + (nm, 2))
    # power tables up to k
    xp = np.stack([X**p for p in range(k + 1)], axis=-1)
    yp = np.stack([Y**p for p in range(k + 1)], axis=-1)
    inv_s = 1.0 / np.asarray(scale)
    for j, (a, b) in enumerate(exps):
        vals[..., j] = xp[..., a] * yp[..., b]
        grads[..., j, 0] = (a * xp[..., a - 1] * yp[..., b] if a > 0 else 0.0) * inv_s
        grads[..., j, 1] = (b * xp[..., a] * yp[..., b - 1] if b > 0 else 0.0) * inv_s
    return vals, grads


# ---------------------------------------------------------------------------
# scalar Lagrange basis on the reference triangle

REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@lru_cache(maxsize=None)
def _lagrange_coeffs(k):
    if k not in (0, 1, 2, 3):
        raise ValueError(f"unsupported scalar order k={k}")
    if k == 0:
        return np.array([[1.0]]), np.array([[1.0 / 3.0, 1.0 / 3.0]])
    nodes = []
    for a, b in pk_exponents(k):
        nodes.append((a / k, b / k))
    nodes = np.array(nodes)
    vals, _ = eval_monomials(k, nodes[:, 0], nodes[:, 1])
    coeffs = np.linalg.inv(vals)  # column i = coefficients of basis i
    return coeffs, nodes


def eval_scalar_basis(k, points):
    """Lagrange P_k basis on the reference triangle at `points` (n,2).

    Returns (values, gradients) with shapes (ndof, n) and (ndof, n, 2).
    The nodal realization forms a partition of unity.
    """
    coeffs, _ = _lagrange_coeffs(k)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if k == 0:
        n = pts.shape[0]
        return np.ones((1, n)), np.zeros((1, n, 2))
    vals, grads = eval_monomials(k, pts[:, 0], pts[:, 1])
    basis_vals = np.einsum("qm,mi->iq", vals, coeffs)
    basis_grads = np.einsum("qmd,mi->iqd", grads, coeffs)
    return basis_vals, basis_grads


def lagrange_nodes(k):
    """Equidistant interpolation nodes matching eval_scalar_basis."""
    return _lagrange_coeffs(k)[1]


# ---------------------------------------------------------------------------
# orthonormal Legendre on [0,1] (facet bases)


def legendre01(k, s):
    """Orthonormal shifted Legendre values, shape (k+1, ...).

    Orthonormal with respect to the unit parameter measure on [0,1]:
    int_0^1 q_m q_n ds = delta_mn.
    """
    s = np.asarray(s, dtype=float)
    t = 2.0 * s - 1.0
    out = np.empty((k + 1,) + s.shape)
    pprev = np.ones_like(t)
    out[0] = pprev
    if k >= 1:
        p = t
        out[1] = np.sqrt(3.0) * p
        for m in range(2, k + 1):
            pnext = ((2 * m - 1) * t * p - (m - 1) * pprev) / m
            out[m] = np.sqrt(2 * m + 1.0) * pnext
            pprev, p = p, pnext
    return out


# ---------------------------------------------------------------------------
# BDM_k dual bases on (batches of) physical triangles


def bdm_dim(k):
    """dim BDM_k on a triangle = 2 dim P_k (full vector polynomial space)."""
    return (k + 1) * (k + 2)


def bdm_facet_dofs(k):
    return 3 * (k + 1)


def _vector_monomials(k, x, y, center, scale):
    """Vector monomial tables: values (...,2m,2), divergences (...,2m)."""
    vals, grads = eval_monomials(k, x, y, center, scale)
    nm = vals.shape[-1]
    shape = vals.shape[:-1]
    vv = np.zeros(shape + (2 * nm, 2))
    dv = np.zeros(shape + (2 * nm,))
    vv[..., :nm, 0] = vals
    vv[..., nm:, 1] = vals
    dv[..., :nm] = grads[..., 0]
    dv[..., nm:] = grads[..., 1]
    return vv, dv


def _vector_monomial_grads(k, x, y, center, scale):
    """Gradients of the vector monomials, shape (..., 2m, 2, 2).

    grad[..., j, d, e] = d(m_j)_d / dx_e.
    """
    vals, grads = eval_monomials(k, x, y, center, scale)
    nm = vals.shape[-1]
    gg = np.zeros(vals.shape[:-1] + (2 * nm, 2, 2))
    gg[..., :nm, 0, :] = grads
    gg[..., nm:, 1, :] = grads
    return gg


def _interior_test_fields(k, x, y, verts, center, scale):
    """Interior moment fields for BDM_k: grad P_{k-1} and curl(bubble P_{k-2}).

    verts: (..., 3, 2) triangle vertices; x,y: (..., nq) physical points.
    Returns (..., nq, n_int, 2); n_int = (k+1)(k-1).
    """
    lead = x.shape[:-1]
    nq = x.shape[-1]
    n_int = (k + 1) * (k - 1)
    out = np.zeros(lead + (nq, n_int, 2))
    if k < 2:
        return out
    pos = 0
    # gradients of scaled monomials, skipping the constant
    _, grads = eval_monomials(k - 1, x, y, center, scale)
    ng = pk_dim(k - 1) - 1
    out[..., pos : pos + ng, :] = grads[..., 1:, :]
    pos += ng
    # curl(bubble * m) with bubble = product of barycentric coordinates
    lam, glam = barycentric(verts, x, y)
    bub = lam[..., 0] * lam[..., 1] * lam[..., 2]
    g0, g1, g2 = (glam[..., None, i, :] for i in range(3))
    gbub = (
        (lam[..., 1] * lam[..., 2])[..., None] * g0
        + (lam[..., 0] * lam[..., 2])[..., None] * g1
        + (lam[..., 0] * lam[..., 1])[..., None] * g2
    )
    mvals, mgrads = eval_monomials(k - 2, x, y, center, scale)
    nb = pk_dim(k - 2)
    # curl(b q) = (d_y(bq), -d_x(bq))
    dby = bub[..., None] * mgrads[..., 1] + mvals * gbub[..., None, 1]
    dbx = bub[..., None] * mgrads[..., 0] + mvals * gbub[..., None, 0]
    out[..., pos : pos + nb, 0] = dby
    out[..., pos : pos + nb, 1] = -dbx
    return out


def barycentric(verts, x, y):
    """Barycentric coordinates and their (constant) gradients.

    verts: (..., 3, 2); x, y: (..., nq).  Returns lam (..., nq, 3) and
    glam (..., 3, 2).
    """
    v = np.asarray(verts, dtype=float)
    e1 = v[..., 1, :] - v[..., 0, :]
    e2 = v[..., 2, :] - v[..., 0, :]
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    dx = x - v[..., None, 0, 0]
    dy = y - v[..., None, 0, 1]
    l1 = (e2[..., None, 1] * dx - e2[..., None, 0] * dy) / det[..., None]
    l2 = (-e1[..., None, 1] * dx + e1[..., None, 0] * dy) / det[..., None]
    lam = np.stack([1.0 - l1 - l2, l1, l2], axis=-1)
    glam = np.empty(v.shape[:-2] + (3, 2))
    glam[..., 1, 0] = e2[..., 1] / det
    glam[..., 1, 1] = -e2[..., 0] / det
    glam[..., 2, 0] = -e1[..., 1] / det
    glam[..., 2, 1] = e1[..., 0] / det
    glam[..., 0, :] = -glam[..., 1, :] - glam[..., 2, :]
    return lam, glam


def bdm_coefficients(k, verts, facet_endpoints, facet_normals):
    """Monomial coefficients of the BDM_k dual basis on physical triangles.

    verts: (nc,3,2).  facet_endpoints: (nc,3,2,2), the start/end points
    of the three local facets in the *global* facet parameterization;
    facet_normals (nc,3,2) the global facet normals.

    Local dof order: facet 0 moments 0..k, facet 1, facet 2, interior.
    Facet moments are taken against orthonormal Legendre polynomials in
    the global facet parameter and the fixed global normal, so two cells
    sharing a facet see the same functional and normal continuity
    becomes identification of coefficients.

    Returns coeffs (nc, ndof_mono, ndof) with ndof = (k+1)(k+2).
    """
    if k not in (1, 2, 3):
        raise ValueError(f"unsupported BDM order k={k}")
    verts = np.asarray(verts, dtype=float)
    nc = verts.shape[0]
    ndof = bdm_dim(k)
    center = (verts[:, :, 0].mean(axis=1)[:, None], verts[:, :, 1].mean(axis=1)[:, None])
    scale = cell_diameters(verts)[:, None]

    seg = segment_rule(2 * k + 2)
    nqf = seg.npoints
    leg = legendre01(k, seg.points)  # (k+1, nqf)

    p0 = facet_endpoints[:, :, 0]
    p1 = facet_endpoints[:, :, 1]
    facet_points = p0[:, :, None, :] + seg.points[None, None, :, None] * (
        (p1 - p0)[:, :, None, :]
    )
    facet_lengths = np.linalg.norm(p1 - p0, axis=-1)

    D = np.zeros((nc, ndof, ndof))
    fx = facet_points[..., 0].reshape(nc, 3 * nqf)
    fy = facet_points[..., 1].reshape(nc, 3 * nqf)
    mv, _ = _vector_monomials(k, fx, fy, center, scale)
    mv = mv.reshape(nc, 3, nqf, ndof, 2)
    row = 0
    for loc in range(3):
        vn = np.einsum("cqjd,cd->cqj", mv[:, loc], facet_normals[:, loc])
        mom = np.einsum("q,mq,cqj->cmj", seg.weights, leg, vn)
        mom *= facet_lengths[:, loc, None, None]
        D[:, row : row + k + 1, :] = mom
        row += k + 1
    if k >= 2:
        tri = triangle_rule(2 * k + 2)
        xq = verts[:, 0, None, :] + np.einsum(
            "qd,cde->cqe",
            tri.points,
            np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=1),
        )
        areas = 2.0 * np.abs(cell_areas(verts))
        w_phys = tri.weights[None, :] * areas[:, None]
        mvq, _ = _vector_monomials(k, xq[..., 0], xq[..., 1], center, scale)
        tst = _interior_test_fields(k, xq[..., 0], xq[..., 1], verts, center, scale)
        D[:, row:, :] = np.einsum("cq,cqid,cqjd->cij", w_phys, tst, mvq)
    return np.linalg.solve(D, np.broadcast_to(np.eye(ndof), (nc, ndof, ndof)).copy())


def cell_areas(verts):
    v = np.asarray(verts, dtype=float)
    e1 = v[..., 1, :] - v[..., 0, :]
    e2 = v[..., 2, :] - v[..., 0, :]
    return 0.5 * (e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])


def cell_diameters(verts):
    v = np.asarray(verts, dtype=float)
    d01 = np.linalg.norm(v[..., 0, :] - v[..., 1, :], axis=-1)
    d12 = np.linalg.norm(v[..., 1, :] - v[..., 2, :], axis=-1)
    d20 = np.linalg.norm(v[..., 2, :] - v[..., 0, :], axis=-1)
    return np.maximum(np.maximum(d01, d12), d20)


@dataclass(frozen=True)
class ReferenceBasis:
    """Evaluated basis tables on the reference triangle."""

    kind: str
    k: int
    values: np.ndarray  # scalar: (ndof, n); vector: (ndof, n, 2)
    gradients: np.ndarray | None = None  # scalar only
    divergences: np.ndarray | None = None  # vector only
    normal_trace_coeffs: np.ndarray | None = None  # (3, k+1, ndof)
    piola: dict | None = None

    @property
    def ndof(self):
        return self.values.shape[0]


def eval_bdm_basis(k, points):
    """BDM_k basis of the reference triangle at `points` (n,2).

    Dofs are facet-normal moments against orthonormal Legendre
    polynomials (facets ordered opposite vertex 0,1,2, parameterized
    from the lower to the higher local vertex index) followed by
    interior moments.  Returns a ReferenceBasis with values,
    divergences, the delta-property coefficients of the normal traces,
    and Piola metadata for mapping to physical cells.
    """
    if k not in (1, 2, 3):
        raise ValueError(f"unsupported BDM order k={k}")
    verts = REF_VERTS[None]
    fverts = [(1, 2), (0, 2), (0, 1)]  # local facets, lower->higher vertex
    fends = np.empty((1, 3, 2, 2))
    fnrm = np.empty((1, 3, 2))
    for loc, (a, b) in enumerate(fverts):
        pa, pb = REF_VERTS[a], REF_VERTS[b]
        fends[0, loc, 0] = pa
        fends[0, loc, 1] = pb
        tang = (pb - pa) / np.linalg.norm(pb - pa)
        nrm = np.array([tang[1], -tang[0]])
        mid = 0.5 * (pa + pb)
        if np.dot(nrm, mid - REF_VERTS.mean(axis=0)) < 0:
            nrm = -nrm
        fnrm[0, loc] = nrm
    coeffs = bdm_coefficients(k, verts, fends, fnrm)[0]
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    center = (np.array([[1.0 / 3.0]]), np.array([[1.0 / 3.0]]))
    scale = cell_diameters(verts)[:, None]
    mv, md = _vector_monomials(k, pts[None, :, 0], pts[None, :, 1], center, scale)
    vals = np.einsum("ji,qjd->iqd", coeffs, mv[0])
    divs = np.einsum("ji,qj->iq", coeffs, md[0])
    ntc = np.zeros((3, k + 1, bdm_dim(k)))
    for loc in range(3):
        for m in range(k + 1):
            ntc[loc, m, loc * (k + 1) + m] = 1.0
    piola = {
        "map": "contravariant",
        "vector": "v(x) = J vhat(xhat) / det J",
        "divergence": "div v(x) = div vhat(xhat) / det J",
        "reference_vertices": REF_VERTS.copy(),
        "facet_vertices": fverts,
    }
    return ReferenceBasis(
        kind="BDM_k-tri", k=k, values=vals, divergences=divs,
        normal_trace_coeffs=ntc, piola=piola,
    )


def piola_map(jac, det, ref_values, ref_divergences=None):
    """Contravariant Piola transform of reference vector fields.

    jac: (2,2) cell Jacobian, det its determinant.  ref_values
    (ndof,n,2) maps to physical values; divergences scale by 1/det.
    """
    vals = np.einsum("de,iqe->iqd", np.asarray(jac) / det, ref_values)
    if ref_divergences is None:
        return vals
    return vals, ref_divergences / det


def orthonormal_scalar_coeffs(k, verts):
    """Per-cell L2-orthonormal P_k coefficients in scaled monomials.

    verts: (nc,3,2).  Returns (nc, nm, nm); column i holds the monomial
    coefficients of the i-th orthonormal function.  The first function
    is the constant 1/sqrt(|T|).
    """
    verts = np.asarray(verts, dtype=float)
    nc = verts.shape[0]
    center = (verts[:, :, 0].mean(axis=1)[:, None], verts[:, :, 1].mean(axis=1)[:, None])
    scale = cell_diameters(verts)[:, None]
    tri = triangle_rule(2 * k + 2)
    emap = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=1)
    xq = verts[:, 0, None, :] + np.einsum("qd,cde->cqe", tri.points, emap)
    areas = 2.0 * np.abs(cell_areas(verts))
    w = tri.weights[None, :] * areas[:, None]
    mv, _ = eval_monomials(k, xq[..., 0], xq[..., 1], center, scale)
    gram = np.einsum("cq,cqi,cqj->cij", w, mv, mv)
    L = np.linalg.cholesky(gram)
    nm = gram.shape[1]
    inv = np.linalg.solve(L, np.broadcast_to(np.eye(nm), (nc, nm, nm)).copy())
    return np.transpose(inv, (0, 2, 1))  # columns = basis functions
