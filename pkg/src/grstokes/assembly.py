"""Assembly of the discrete forms for both scheme variants.

Velocity operators act on the combined coefficient vector [V; Vhat].
The diffusion form is assembled without the viscosity factor (the
solver scales by nu, which lets one factorization serve a viscosity
sweep); the divergence form is assembled without the equation-of-state
constant (pressure p = c_M rho is applied where the form is used).

Element and facet loops run chunked over cells; triplets are
accumulated in a fixed order and compressed once, so assembly is
bit-reproducible.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps


@dataclass(frozen=True)
class FormCoefficients:
    nu: float
    c_M: float
    alpha: float = 10.0
    k: int = 1

    def __post_init__(self):
        if not (self.nu > 0 and self.c_M > 0 and self.alpha > 0):
            raise ValueError("need nu > 0, c_M > 0, alpha > 0")


@dataclass
class SparseOperator:
    matrix: sps.csr_matrix
    row_space: str
    col_space: str
    symmetric: bool = False

    def __post_init__(self):
        if self.symmetric:
            asym = abs(self.matrix - self.matrix.T).max()
            if asym >= 1e-12:
                raise AssertionError(f"operator tagged symmetric but |A-A^T| = {asym}")

    @property
    def shape(self):
        return self.matrix.shape


def dump_coordinate(op, path_or_file):
    """Debug dump: one 'row col value' line per stored entry."""
    own = isinstance(path_or_file, (str, bytes))
    f = open(path_or_file, "w") if own else path_or_file
    try:
        coo = op.matrix.tocoo()
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{r} {c} {v:.17g}\n")
    finally:
        if own:
            f.close()


_CHUNK = 2048


def _cellfacet_tables(disc, cells, grads):
    """Velocity traces on the three facets of each cell.

    Returns (vals, grads_or_None) with vals (ncc, 3, nqf, nloc, 2) and
    grads (ncc, 3, nqf, nloc, 2, 2), evaluated at the global facet
    quadrature points.
    """
    fq = disc.facet_qp[disc.mesh.cell_facets[cells]]  # (ncc,3,nqf,2)
    ncc = len(cells)
    nqf = fq.shape[2]
    x = fq[..., 0].reshape(ncc, 3 * nqf)
    y = fq[..., 1].reshape(ncc, 3 * nqf)
    if grads:
        v, g = disc.u_basis(cells, x, y, grads=True)
        return (
            v.reshape(ncc, 3, nqf, -1, 2),
            g.reshape(ncc, 3, nqf, -1, 2, 2),
        )
    v = disc.u_basis(cells, x, y)
    return v.reshape(ncc, 3, nqf, -1, 2), None


def _hat_trace_blocks(disc, cells):
    """Facet-space basis on the three facets of each cell.

    Returns (ncc, 3, nqf, nhat_loc, 2) where nhat_loc = 3 * nfloc; the
    entries of facet ell live in columns [ell*nfloc, (ell+1)*nfloc).
    """
    mesh = disc.mesh
    nfloc = disc.nfloc_hat
    nqf = disc.leg.shape[1]
    ncc = len(cells)
    out = np.zeros((ncc, 3, nqf, 3 * nfloc, 2))
    cf = mesh.cell_facets[cells]
    if disc.variant == "hdiv-hdg":
        tan = mesh.facet_tangent()[cf]  # (ncc,3,2)
        for ell in range(3):
            block = np.einsum("mq,cd->cqmd", disc.leg, tan[:, ell])
            out[:, ell, :, ell * nfloc : (ell + 1) * nfloc, :] = block
    else:
        k1 = disc.k + 1
        for ell in range(3):
            out[:, ell, :, ell * nfloc : ell * nfloc + k1, 0] = disc.leg.T[None]
            out[:, ell, :, ell * nfloc + k1 : (ell + 1) * nfloc, 1] = disc.leg.T[None]
    return out


def _difference_table(disc, cells, uval_f, hat_f):
    """(vhat - v) traces, tangentially projected for the hdiv variant.

    Returns (ncc, 3, nqf, ndl, 2) over the combined local dofs
    [V-local; Vhat-local of the 3 facets].
    """
    ncc, _, nqf, nloc, _ = uval_f.shape
    nhat = hat_f.shape[3]
    D = np.empty((ncc, 3, nqf, nloc + nhat, 2))
    if disc.variant == "hdiv-hdg":
        nf_ = disc.mesh.facet_normal[disc.mesh.cell_facets[cells]]  # (ncc,3,2)
        vn = np.einsum("clqid,cld->clqi", uval_f, nf_)
        vt = uval_f - vn[..., None] * nf_[:, :, None, None, :]
        D[..., :nloc, :] = -vt
    else:
        D[..., :nloc, :] = -uval_f
    D[..., nloc:, :] = hat_f
    return D


def _local_velocity_dofs(disc, cells):
    return np.concatenate(
        [disc.cell_dofs_V[cells], disc.nV + disc.cell_dofs_hat[cells]], axis=1
    )


def _scatter(blocks, gdofs, rows, cols, vals):
    r = np.broadcast_to(gdofs[:, :, None], blocks.shape).ravel()
    c = np.broadcast_to(gdofs[:, None, :], blocks.shape).ravel()
    rows.append(r)
    cols.append(c)
    vals.append(blocks.ravel())


def assemble_diffusion(disc, coeffs, include_consistency=True, penalty=None):
    """Symmetric interior-penalty HDG diffusion form (unit viscosity).

    Tangential jumps for the hdiv variant, full jumps for full-hdg;
    penalty alpha k^2 / h_F.  With include_consistency=False and a
    custom `penalty(cells)` this doubles as the Gram matrix of the
    discrete H1 norm.
    """
    mesh = disc.mesh
    k = disc.k
    nvel = disc.nvel
    rows, cols, vals = [], [], []
    for start in range(0, mesh.num_cells, _CHUNK):
        cells = np.arange(start, min(start + _CHUNK, mesh.num_cells))
        gdofs = _local_velocity_dofs(disc, cells)
        ndl = gdofs.shape[1]
        nloc = disc.nloc_u

        # volume grad-grad
        _, gg = disc.u_basis(
            cells, disc.cell_qp[cells, :, 0], disc.cell_qp[cells, :, 1], grads=True
        )
        blocks = np.zeros((len(cells), ndl, ndl))
        blocks[:, :nloc, :nloc] = np.einsum(
            "cq,cqide,cqjde->cij", disc.cell_qw[cells], gg, gg
        )

        uval_f, ugrad_f = _cellfacet_tables(disc, cells, grads=True)
        hat_f = _hat_trace_blocks(disc, cells)
        D = _difference_table(disc, cells, uval_f, hat_f)
        cf = mesh.cell_facets[cells]
        sign = disc.mesh.cell_facet_sign[cells]
        n_out = mesh.facet_normal[cf] * sign[:, :, None]
        fw = disc.facet_qw[cf]  # (ncc,3,nqf)
        if penalty is None:
            pen = coeffs.alpha * k * k / mesh.facet_length[cf]
        else:
            pen = penalty(cells)
        gn = np.zeros_like(D)
        gn[..., :nloc, :] = np.einsum("clqide,cle->clqid", ugrad_f, n_out)
        if include_consistency:
            cons = np.einsum("clq,clqjd,clqid->cij", fw, gn, D)
            blocks += cons + np.transpose(cons, (0, 2, 1))
        blocks += np.einsum("clq,cl,clqid,clqjd->cij", fw, pen, D, D)
        _scatter(blocks, gdofs, rows, cols, vals)

    A = sps.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nvel, nvel),
    ).tocsr()
    A = 0.5 * (A + A.T)  # scrub BLAS-order roundoff; the form is symmetric
    return SparseOperator(A.tocsr(), "velocity", "velocity", symmetric=True)


def hdg_norm_matrix(disc):
    """Gram matrix of the discrete H1 norm on (V, Vhat)."""
    mesh = disc.mesh

    def pen(cells):
        return np.broadcast_to(
            (1.0 / mesh.cell_diameter[cells])[:, None], (len(cells), 3)
        )

    op = assemble_diffusion(
        disc, FormCoefficients(1.0, 1.0, 1.0, disc.k),
        include_consistency=False, penalty=pen,
    )
    return SparseOperator(op.matrix, "velocity", "velocity", symmetric=True)


def assemble_divergence(disc):
    """Pressure-divergence coupling; rows Q, columns [V; Vhat].

    hdiv: b(q, v) = -(q, div v) exactly.  full-hdg adds the facet
    normal-jump terms pairing q with (v - vhat) . n.
    """
    mesh = disc.mesh
    rows, cols, vals = [], [], []
    for start in range(0, mesh.num_cells, _CHUNK):
        cells = np.arange(start, min(start + _CHUNK, mesh.num_cells))
        qrow = disc.cell_dofs_Q[cells]
        vol = -np.einsum(
            "cq,cqi,cqj->cij", disc.cell_qw[cells], disc.q_vals[cells],
            disc.u_divs[cells],
        )
        gv = disc.cell_dofs_V[cells]
        rows.append(np.broadcast_to(qrow[:, :, None], vol.shape).ravel())
        cols.append(np.broadcast_to(gv[:, None, :], vol.shape).ravel())
        vals.append(vol.ravel())
        if disc.variant == "full-hdg":
            uval_f, _ = _cellfacet_tables(disc, cells, grads=False)
            hat_f = _hat_trace_blocks(disc, cells)
            cf = mesh.cell_facets[cells]
            sign = mesh.cell_facet_sign[cells]
            n_out = mesh.facet_normal[cf] * sign[:, :, None]
            fw = disc.facet_qw[cf]
            # trace of this cell's own Q basis on its facets
            side = (sign < 0).astype(int)  # left cell is side 0
            qtr = disc.q_trace[cf, side]  # (ncc,3,nqf,nloc_q)
            fb_v = np.einsum("clq,clqjd,cld,clqi->cij", fw, uval_f, n_out, qtr)
            fb_h = -np.einsum("clq,clqjd,cld,clqi->cij", fw, hat_f, n_out, qtr)
            gh = disc.nV + disc.cell_dofs_hat[cells]
            rows.append(np.broadcast_to(qrow[:, :, None], fb_v.shape).ravel())
            cols.append(np.broadcast_to(gv[:, None, :], fb_v.shape).ravel())
            vals.append(fb_v.ravel())
            rows.append(np.broadcast_to(qrow[:, :, None], fb_h.shape).ravel())
            cols.append(np.broadcast_to(gh[:, None, :], fb_h.shape).ravel())
            vals.append(fb_h.ravel())
    B = sps.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(disc.nQ, disc.nvel),
    ).tocsr()
    return SparseOperator(B, "density", "velocity")


def assemble_gravity(disc, g_fn):
    """G[v_i, q_j] = (g, q_j v_i); rows [V; Vhat] (Vhat rows vanish)."""
    mesh = disc.mesh
    rows, cols, vals = [], [], []
    gq = g_fn(disc.cell_qp[..., 0], disc.cell_qp[..., 1])
    for start in range(0, mesh.num_cells, _CHUNK):
        cells = np.arange(start, min(start + _CHUNK, mesh.num_cells))
        blk = np.einsum(
            "cq,cqd,cqid,cqj->cij", disc.cell_qw[cells], gq[cells],
            disc.u_vals[cells], disc.q_vals[cells],
        )
        gv = disc.cell_dofs_V[cells]
        qc = disc.cell_dofs_Q[cells]
        rows.append(np.broadcast_to(gv[:, :, None], blk.shape).ravel())
        cols.append(np.broadcast_to(qc[:, None, :], blk.shape).ravel())
        vals.append(blk.ravel())
    G = sps.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(disc.nvel, disc.nQ),
    ).tocsr()
    return SparseOperator(G, "velocity", "density")


def assemble_load(disc, f_fn):
    """Load vector (f, v) on the combined velocity dofs."""
    out = np.zeros(disc.nvel)
    if f_fn is None:
        return out
    fq = f_fn(disc.cell_qp[..., 0], disc.cell_qp[..., 1])
    contrib = np.einsum("cq,cqd,cqid->ci", disc.cell_qw, fq, disc.u_vals)
    np.add.at(out, disc.cell_dofs_V, contrib)
    return out


class TransportAssembler:
    """Per-iteration assembly of the upwinded continuity form.

    The matrix C[i, j] = c_h(phi_j, u, phi_i) depends on the velocity
    through the cell values and the single-valued facet flux; the
    geometric index structure is precomputed once.
    """

    def __init__(self, disc):
        self.disc = disc
        mesh = disc.mesh
        self.interior = mesh.interior_facets
        self.bdry = mesh.boundary_facets
        self.left_i = mesh.facet_cells[self.interior, 0]
        self.right_i = mesh.facet_cells[self.interior, 1]
        self.left_b = mesh.facet_cells[self.bdry, 0]

    def facet_flux(self, u, uhat):
        """wn (nf, nqf) at facet qps and the mean fluxes s_F (nf,)."""
        disc = self.disc
        wn = disc.flux_normal_at_facet_qps(u, uhat)
        s = np.einsum("fq,fq->f", disc.facet_qw, wn)
        return wn, s

    def __call__(self, u, uhat, return_inflow_mask=False):
        disc = self.disc
        mesh = disc.mesh
        nq = disc.nloc_q
        wn, s = self.facet_flux(u, uhat)

        rows, cols, vals = [], [], []
        # volume: -(rho u, grad lambda)
        uq = disc.velocity_at_cell_qps(u)
        vol = -np.einsum(
            "cq,cqd,cqid,cqj->cij", disc.cell_qw, uq, disc.q_grads, disc.q_vals
        )
        qd = disc.cell_dofs_Q
        rows.append(np.broadcast_to(qd[:, :, None], vol.shape).ravel())
        cols.append(np.broadcast_to(qd[:, None, :], vol.shape).ravel())
        vals.append(vol.ravel())

        # interior facets: upwind trace against tests from both sides
        fi = self.interior
        up_side = (s[fi] < 0).astype(int)  # 0 = left, 1 = right
        up_cell = np.where(up_side == 0, self.left_i, self.right_i)
        tr_up = disc.q_trace[fi, up_side]  # (nfi, nqf, nq)
        wfl = disc.facet_qw[fi] * wn[fi]
        for side, cells_t, sgn in ((0, self.left_i, 1.0), (1, self.right_i, -1.0)):
            tst = disc.q_trace[fi, side]
            blk = sgn * np.einsum("fq,fqi,fqj->fij", wfl, tst, tr_up)
            rows.append(np.broadcast_to(qd[cells_t][:, :, None], blk.shape).ravel())
            cols.append(np.broadcast_to(qd[up_cell][:, None, :], blk.shape).ravel())
            vals.append(blk.ravel())

        # boundary facets: outflow keeps the interior trace; inflow is data
        fb = self.bdry
        out_mask = s[fb] >= 0.0
        fo = fb[out_mask]
        if len(fo):
            cells_t = mesh.facet_cells[fo, 0]
            tst = disc.q_trace[fo, 0]
            wfl = disc.facet_qw[fo] * wn[fo]
            blk = np.einsum("fq,fqi,fqj->fij", wfl, tst, tst)
            rows.append(np.broadcast_to(qd[cells_t][:, :, None], blk.shape).ravel())
            cols.append(np.broadcast_to(qd[cells_t][:, None, :], blk.shape).ravel())
            vals.append(blk.ravel())

        C = sps.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(disc.nQ, disc.nQ),
        ).tocsr()
        if return_inflow_mask:
            return C, fb[~out_mask]
        return C


def assemble_upwind_transport(disc, u, uhat):
    """One-shot transport matrix; see TransportAssembler for sweeps."""
    op = TransportAssembler(disc)(u, uhat)
    return SparseOperator(op, "density", "density")


def assemble_inflow(disc, rho_dirichlet, u, uhat):
    """Inflow boundary contribution -sum_F int_F (w.n) rho_D lambda.

    Inflow facets are the boundary facets with negative mean flux; on
    the rest of the boundary the upwind value is the interior trace and
    no data enters.  Returns a Q-sized right-hand-side vector.
    """
    out = np.zeros(disc.nQ)
    if rho_dirichlet is None:
        return out
    ta = TransportAssembler(disc)
    wn, s = ta.facet_flux(u, uhat)
    fb = ta.bdry[s[ta.bdry] < 0.0]
    if len(fb) == 0:
        return out
    cells = disc.mesh.facet_cells[fb, 0]
    rhod = rho_dirichlet(disc.facet_qp[fb, :, 0], disc.facet_qp[fb, :, 1])
    contrib = -np.einsum(
        "fq,fq,fq,fqi->fi", disc.facet_qw[fb], wn[fb], rhod, disc.q_trace[fb, 0]
    )
    np.add.at(out, disc.cell_dofs_Q[cells], contrib)
    return out
