"""Global finite element spaces and dof management for both variants.

The velocity pair is (V, Vhat):

* ``hdiv-hdg``: V is the BDM_k space with facet-normal moments shared
  between neighbours (normal continuity by identification) and homo-
  geneous/Dirichlet normal data imposed directly on the boundary facet
  dofs.  Vhat carries one tangential scalar per Legendre mode per facet
  (vhat . n_F = 0 holds structurally).
* ``full-hdg``: V is the broken vector P_k space (monomial basis per
  cell, no coupling); Vhat carries full vectors on facets.

Q is the broken P_{k-1} space in a per-cell L2-orthonormal basis, so
its mass matrix is the identity and Euclidean coefficient norms are L2
dual norms.

A Discretization bundles the spaces with the quadrature tables used by
assembly and error evaluation; it is immutable after construction.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import polybasis as pb
from .mesh import mesh_to_text

VARIANTS = ("hdiv-hdg", "full-hdg")


@dataclass(frozen=True)
class FeSpace:
    kind: str
    k: int
    ndof: int
    ndof_local: int
    constrained: np.ndarray  # global dof ids fixed by boundary data


class Discretization:
    """Spaces plus cached basis/quadrature tables for one (mesh, k, variant)."""

    def __init__(self, mesh, k, variant):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if k not in (1, 2, 3):
            raise ValueError(f"unsupported order k={k}")
        self.mesh = mesh
        self.k = k
        self.variant = variant
        self.quad_degree = 2 * k + 4

        nc, nf = mesh.num_cells, mesh.num_facets
        self.nloc_u = (k + 1) * (k + 2)
        self.nloc_q = k * (k + 1) // 2
        self.nfloc_hat = (k + 1) if variant == "hdiv-hdg" else 2 * (k + 1)

        verts = mesh.cell_vertices()
        self._center = (
            verts[:, :, 0].mean(axis=1)[:, None],
            verts[:, :, 1].mean(axis=1)[:, None],
        )
        self._scale = mesh.cell_diameter[:, None]

        # dof maps
        if variant == "hdiv-hdg":
            nfm = k + 1
            n_int = (k + 1) * (k - 1)
            self.nV = nf * nfm + nc * n_int
            fdofs = (mesh.cell_facets[:, :, None] * nfm + np.arange(nfm)).reshape(nc, -1)
            idofs = nf * nfm + (np.arange(nc)[:, None] * n_int + np.arange(n_int))
            self.cell_dofs_V = np.concatenate([fdofs, idofs.reshape(nc, -1)], axis=1)
            bdry_V = (
                mesh.boundary_facets[:, None] * nfm + np.arange(nfm)
            ).ravel()
        else:
            self.nV = nc * self.nloc_u
            self.cell_dofs_V = np.arange(self.nV).reshape(nc, self.nloc_u)
            bdry_V = np.empty(0, dtype=np.int64)

        self.facet_dofs_hat = (
            np.arange(nf)[:, None] * self.nfloc_hat + np.arange(self.nfloc_hat)
        )
        self.nVhat = nf * self.nfloc_hat
        self.cell_dofs_hat = self.facet_dofs_hat[mesh.cell_facets].reshape(nc, -1)
        bdry_hat = self.facet_dofs_hat[mesh.boundary_facets].ravel()

        self.cell_dofs_Q = np.arange(nc * self.nloc_q).reshape(nc, self.nloc_q)
        self.nQ = nc * self.nloc_q
        self.nvel = self.nV + self.nVhat

        self.V = FeSpace(
            "bdm" if variant == "hdiv-hdg" else "dg_vector",
            k, self.nV, self.nloc_u, np.sort(bdry_V),
        )
        self.Vhat = FeSpace(
            "facet_tangential" if variant == "hdiv-hdg" else "facet_vector",
            k, self.nVhat, self.nfloc_hat, np.sort(bdry_hat),
        )
        self.Q = FeSpace("dg_scalar", k - 1, self.nQ, self.nloc_q,
                         np.empty(0, dtype=np.int64))

        # constrained dofs in the combined velocity vector [V; Vhat]
        self.constrained_vel = np.concatenate([bdry_V, self.nV + bdry_hat])
        free = np.ones(self.nvel, dtype=bool)
        free[self.constrained_vel] = False
        self.free_vel = np.flatnonzero(free)

        # basis coefficient matrices
        if variant == "hdiv-hdg":
            ends = mesh.vertices[mesh.facets[mesh.cell_facets]]  # (nc,3,2,2)
            nrm = mesh.facet_normal[mesh.cell_facets]
            self.u_coeffs = pb.bdm_coefficients(k, verts, ends, nrm)
        else:
            self.u_coeffs = None
        self.q_coeffs = pb.orthonormal_scalar_coeffs(k - 1, verts)

        # cell quadrature tables
        tri = pb.triangle_rule(self.quad_degree)
        emap = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=1)
        self.cell_qp = verts[:, 0, None, :] + np.einsum("qd,cde->cqe", tri.points, emap)
        self.cell_qw = tri.weights[None, :] * (2.0 * mesh.cell_area)[:, None]
        self.u_vals, self.u_divs = self.u_basis(
            np.arange(nc), self.cell_qp[..., 0], self.cell_qp[..., 1], divs=True
        )
        self.q_vals, self.q_grads = self.q_basis(
            np.arange(nc), self.cell_qp[..., 0], self.cell_qp[..., 1], grads=True
        )

        # facet quadrature tables (global parameterization)
        seg = pb.segment_rule(self.quad_degree)
        self.seg = seg
        p0 = mesh.vertices[mesh.facets[:, 0]]
        p1 = mesh.vertices[mesh.facets[:, 1]]
        self.facet_qp = p0[:, None, :] + seg.points[None, :, None] * (p1 - p0)[:, None, :]
        self.facet_qw = seg.weights[None, :] * mesh.facet_length[:, None]
        self.leg = pb.legendre01(k, seg.points)  # (k+1, nqf)

        # scalar traces from both sides; right side zero on the boundary
        nqf = seg.npoints
        self.q_trace = np.zeros((nf, 2, nqf, self.nloc_q))
        for side in range(2):
            cells = mesh.facet_cells[:, side]
            ok = np.flatnonzero(cells >= 0)
            self.q_trace[ok, side] = self.q_basis(
                cells[ok], self.facet_qp[ok, :, 0], self.facet_qp[ok, :, 1]
            )
        # normal trace of the left cell's velocity basis (the transport flux
        # carrier for the hdiv variant)
        left = mesh.facet_cells[:, 0]
        uv = self.u_basis(left, self.facet_qp[..., 0], self.facet_qp[..., 1])
        self.un_trace = np.einsum("fqid,fd->fqi", uv, mesh.facet_normal)

        # integrals of the Q basis functions (mass functional)
        self.q_intvec = np.einsum("cq,cqi->ci", self.cell_qw, self.q_vals).ravel()

    # -- basis evaluation -------------------------------------------------

    def u_basis(self, cells, x, y, grads=False, divs=False):
        """Velocity basis of `cells` at points (len(cells), npts)."""
        center = (self._center[0][cells], self._center[1][cells])
        scale = self._scale[cells]
        mv, md = pb._vector_monomials(self.k, x, y, center, scale)
        if self.u_coeffs is not None:
            C = self.u_coeffs[cells]
            vals = np.einsum("cji,cqjd->cqid", C, mv)
        else:
            vals = mv
        out = [vals]
        if grads:
            gg = pb._vector_monomial_grads(self.k, x, y, center, scale)
            if self.u_coeffs is not None:
                gg = np.einsum("cji,cqjde->cqide", self.u_coeffs[cells], gg)
            out.append(gg)
        if divs:
            if self.u_coeffs is not None:
                dv = np.einsum("cji,cqj->cqi", self.u_coeffs[cells], md)
            else:
                dv = md
            out.append(dv)
        return out[0] if len(out) == 1 else tuple(out)

    def q_basis(self, cells, x, y, grads=False):
        center = (self._center[0][cells], self._center[1][cells])
        scale = self._scale[cells]
        mv, mg = pb.eval_monomials(self.k - 1, x, y, center, scale)
        C = self.q_coeffs[cells]
        vals = np.einsum("cji,cqj->cqi", C, mv)
        if not grads:
            return vals
        return vals, np.einsum("cji,cqjd->cqid", C, mg)

    # -- field evaluation --------------------------------------------------

    def velocity_at_cell_qps(self, u):
        return np.einsum("cqid,ci->cqd", self.u_vals, u[self.cell_dofs_V])

    def velocity_div_at_cell_qps(self, u):
        return np.einsum("cqi,ci->cq", self.u_divs, u[self.cell_dofs_V])

    def density_at_cell_qps(self, rho):
        return np.einsum("cqi,ci->cq", self.q_vals, rho[self.cell_dofs_Q])

    def density_cell_means(self, rho):
        return (
            np.einsum("cq,cqi,ci->c", self.cell_qw, self.q_vals, rho[self.cell_dofs_Q])
            / self.mesh.cell_area
        )

    def flux_normal_at_facet_qps(self, u, uhat):
        """Single-valued transport flux w . n_F at facet quadrature points.

        hdiv: the BDM normal trace (from the left cell); full: the facet
        velocity uhat . n_F, with constrained boundary dofs taken at
        their stored values.
        """
        if self.variant == "hdiv-hdg":
            left = self.mesh.facet_cells[:, 0]
            return np.einsum("fqi,fi->fq", self.un_trace, u[self.cell_dofs_V[left]])
        ch = uhat[self.facet_dofs_hat]  # (nf, 2(k+1)): x block then y block
        k1 = self.k + 1
        cn = (
            ch[:, :k1] * self.mesh.facet_normal[:, [0]]
            + ch[:, k1:] * self.mesh.facet_normal[:, [1]]
        )
        return np.einsum("mq,fm->fq", self.leg, cn)

    def uhat_at_facet_qps(self, uhat):
        """Facet velocity (nf, nqf, 2)."""
        ch = uhat[self.facet_dofs_hat]
        if self.variant == "hdiv-hdg":
            tan = self.mesh.facet_tangent()
            return np.einsum("mq,fm,fd->fqd", self.leg, ch, tan)
        k1 = self.k + 1
        return np.stack(
            [
                np.einsum("mq,fm->fq", self.leg, ch[:, :k1]),
                np.einsum("mq,fm->fq", self.leg, ch[:, k1:]),
            ],
            axis=-1,
        )


def build_spaces(mesh, k, variant):
    """Spaces and cached tables for one mesh/order/variant combination."""
    return Discretization(mesh, k, variant)


# ---------------------------------------------------------------------------
# interpolation / projection


def interpolate_velocity(disc, u_fn):
    """Interpolate a smooth field into (V, Vhat).

    u_fn(x, y) -> (..., 2).  For the hdiv variant this is the BDM
    facet/interior moment interpolation (exact on vector P_k); for the
    full variant a per-cell L2 projection.  The facet part is the
    tangential (resp. full) L2 projection of the trace.
    """
    mesh, k = disc.mesh, disc.k
    u = np.zeros(disc.nV)
    seg = disc.seg
    ufq = u_fn(disc.facet_qp[..., 0], disc.facet_qp[..., 1])
    if disc.variant == "hdiv-hdg":
        un = np.einsum("fqd,fd->fq", ufq, mesh.facet_normal)
        fm = np.einsum("q,mq,fq->fm", seg.weights, disc.leg, un) * mesh.facet_length[:, None]
        nfm = k + 1
        u[: mesh.num_facets * nfm] = fm.ravel()
        if k >= 2:
            verts = mesh.cell_vertices()
            tst = pb._interior_test_fields(
                k, disc.cell_qp[..., 0], disc.cell_qp[..., 1], verts,
                disc._center, disc._scale,
            )
            ucq = u_fn(disc.cell_qp[..., 0], disc.cell_qp[..., 1])
            moments = np.einsum("cq,cqid,cqd->ci", disc.cell_qw, tst, ucq)
            u[mesh.num_facets * nfm :] = moments.ravel()
    else:
        ucq = u_fn(disc.cell_qp[..., 0], disc.cell_qp[..., 1])
        gram = np.einsum("cq,cqid,cqjd->cij", disc.cell_qw, disc.u_vals, disc.u_vals)
        rhs = np.einsum("cq,cqid,cqd->ci", disc.cell_qw, disc.u_vals, ucq)
        u = np.linalg.solve(gram, rhs[:, :, None])[:, :, 0].ravel()

    uhat = np.zeros(disc.nVhat)
    if disc.variant == "hdiv-hdg":
        tan = mesh.facet_tangent()
        ut = np.einsum("fqd,fd->fq", ufq, tan)
        uhat[:] = np.einsum("q,mq,fq->fm", seg.weights, disc.leg, ut).ravel()
    else:
        mom = np.einsum("q,mq,fqd->fdm", seg.weights, disc.leg, ufq)
        uhat[:] = mom.reshape(mesh.num_facets, -1).ravel()
    return u, uhat


def l2_project_density(disc, q_fn):
    """L2 projection onto Q; reproduces P_{k-1} exactly."""
    qv = q_fn(disc.cell_qp[..., 0], disc.cell_qp[..., 1])
    return np.einsum("cq,cqi,cq->ci", disc.cell_qw, disc.q_vals, qv).ravel()


def dirichlet_velocity(disc, u_fn):
    """Values of the constrained velocity dofs for boundary data u_fn.

    Returns a full-length combined velocity vector that is zero on free
    dofs and holds the boundary data moments on constrained dofs.
    """
    out = np.zeros(disc.nvel)
    if len(disc.constrained_vel) == 0 or u_fn is None:
        return out
    mesh, k = disc.mesh, disc.k
    bf = mesh.boundary_facets
    seg = disc.seg
    ufq = u_fn(disc.facet_qp[bf, :, 0], disc.facet_qp[bf, :, 1])
    if disc.variant == "hdiv-hdg":
        un = np.einsum("fqd,fd->fq", ufq, mesh.facet_normal[bf])
        fm = (
            np.einsum("q,mq,fq->fm", seg.weights, disc.leg, un)
            * mesh.facet_length[bf, None]
        )
        nfm = k + 1
        out[(bf[:, None] * nfm + np.arange(nfm)).ravel()] = fm.ravel()
        tan = mesh.facet_tangent()[bf]
        ut = np.einsum("fqd,fd->fq", ufq, tan)
        tm = np.einsum("q,mq,fq->fm", seg.weights, disc.leg, ut)
        out[disc.nV + disc.facet_dofs_hat[bf].ravel()] = tm.ravel()
    else:
        mom = np.einsum("q,mq,fqd->fdm", seg.weights, disc.leg, ufq)
        out[disc.nV + disc.facet_dofs_hat[bf].ravel()] = mom.reshape(len(bf), -1).ravel()
    return out


# ---------------------------------------------------------------------------
# discrete states


@dataclass
class DiscreteState:
    u: np.ndarray
    uhat: np.ndarray
    rho: np.ndarray
    variant: str
    k: int
    iterations: int = 0
    residual_history: list = field(default_factory=list)

    @property
    def vel(self):
        return np.concatenate([self.u, self.uhat])

    def check(self, disc):
        assert len(self.u) == disc.nV and len(self.uhat) == disc.nVhat
        assert len(self.rho) == disc.nQ
        assert np.all(np.isfinite(self.rho))


def mesh_hash(mesh):
    return hashlib.sha256(mesh_to_text(mesh).encode()).hexdigest()


def save_state(state, disc, path):
    """Binary vector dump plus a JSON sidecar describing the layout."""
    vec = np.concatenate([state.u, state.uhat, state.rho])
    vec.astype("<f8").tofile(str(path) + ".vec")
    meta = {
        "format": "grstokes-state v1",
        "variant": state.variant,
        "k": state.k,
        "mesh_hash": mesh_hash(disc.mesh),
        "sizes": {"u": len(state.u), "uhat": len(state.uhat), "rho": len(state.rho)},
        "spaces": {"V": disc.V.kind, "Vhat": disc.Vhat.kind, "Q": disc.Q.kind},
        "iterations": state.iterations,
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_state(disc, path):
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    if meta["mesh_hash"] != mesh_hash(disc.mesh):
        raise ValueError("state was saved for a different mesh")
    if meta["variant"] != disc.variant or meta["k"] != disc.k:
        raise ValueError("state was saved for a different discretization")
    vec = np.fromfile(str(path) + ".vec", dtype="<f8")
    s = meta["sizes"]
    u = vec[: s["u"]]
    uhat = vec[s["u"] : s["u"] + s["uhat"]]
    rho = vec[s["u"] + s["uhat"] :]
    state = DiscreteState(u, uhat, rho, meta["variant"], meta["k"],
                          iterations=meta.get("iterations", 0))
    state.check(disc)
    return state
