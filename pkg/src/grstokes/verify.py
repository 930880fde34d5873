"""Independent small-instance oracles for the structural claims.

Each check builds its own quantities with plain dense/loop evaluations
(no reuse of the production assembly kernels where a dual route is the
point), runs on seeded randomized instances, and reports the worst
violation even when passing.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import assembly as asm
from . import solver as slv
from .mesh import build_unit_square, jitter_mesh, make_mesh
from .spaces import build_spaces, interpolate_velocity, l2_project_density


@dataclass
class PropertyResult:
    name: str
    instance: str
    passed: bool
    violation: float

    def row(self):
        return [self.name, self.instance, int(self.passed), f"{self.violation:.6e}"]


def _small_mesh(seed, n=2):
    """Jittered structured mesh with 6*n^2 cells."""
    base = _structured(n)
    return jitter_mesh(base, amount=0.2, seed=seed)


def _structured(n):
    verts = []
    cells = []
    idx = {}

    def vid(x, y):
        key = (round(x, 12), round(y, 12))
        if key not in idx:
            idx[key] = len(verts)
            verts.append((x, y))
        return idx[key]

    h = 1.0 / n
    for i in range(n):
        for j in range(n):
            x0, y0 = i * h, j * h
            a = vid(x0, y0)
            b = vid(x0 + h, y0)
            c = vid(x0 + h, y0 + h)
            d = vid(x0, y0 + h)
            g = vid(x0 + h / 2, y0 + h / 2)
            mr = vid(x0 + h, y0 + h / 2)
            ml = vid(x0, y0 + h / 2)
            for tri in ((a, b, g), (b, mr, g), (mr, c, g), (c, d, g), (d, ml, g), (ml, a, g)):
                cells.append(tri)
    return make_mesh(np.array(verts), np.array(cells))


def _random_velocity(disc, rng):
    """Random normal-continuous velocity with zero boundary flux."""
    u = rng.standard_normal(disc.nV)
    uhat = rng.standard_normal(disc.nVhat)
    vel = np.concatenate([u, uhat])
    vel[disc.constrained_vel] = 0.0
    return vel[: disc.nV], vel[disc.nV :]


def _facet_mean_fluxes(disc, u):
    """Per-facet integral of u . n_F, straight quadrature loop."""
    mesh = disc.mesh
    s = np.zeros(mesh.num_facets)
    for f in range(mesh.num_facets):
        left = mesh.facet_cells[f, 0]
        vals = disc.u_basis(
            np.array([left]), disc.facet_qp[None, f, :, 0], disc.facet_qp[None, f, :, 1]
        )[0]
        un = vals @ mesh.facet_normal[f]
        coeff = u[disc.cell_dofs_V[left]]
        s[f] = float(disc.facet_qw[f] @ (un @ coeff))
    return s


def check_upwind_identity(mesh_seed, k=1, phi="s2", nu_dummy=None):
    """Two-sided evaluation of the upwind dissipation identity.

    For piecewise-constant densities and phi(s) = s^2 the facet
    intermediate value drops out and the identity is exact; for
    phi = s log s only the sign of the left-hand side is asserted.
    """
    assert k == 1
    rng = np.random.default_rng(mesh_seed)
    mesh = _small_mesh(mesh_seed)
    disc = build_spaces(mesh, 1, "hdiv-hdg")
    u, uhat = _random_velocity(disc, rng)
    rho_cells = rng.uniform(0.1, 2.0, mesh.num_cells)

    if phi == "s2":
        phi_f = lambda s: s**2
        phi_p = lambda s: 2.0 * s
        ddphi = 2.0
    elif phi == "slogs":
        phi_f = lambda s: s * np.log(s)
        phi_p = lambda s: np.log(s) + 1.0
        ddphi = None
    else:
        raise ValueError(phi)

    s = _facet_mean_fluxes(disc, u)
    lhs = 0.0
    rhs = 0.0
    for f in range(mesh.num_facets):
        cl, cr = mesh.facet_cells[f]
        rl = rho_cells[cl]
        rr = rho_cells[cr] if cr >= 0 else 0.0
        up = rl if s[f] >= 0 else rr
        # sum over the adjacent cells of int_F u.n (rho_up phi'(rho_T)
        #                                          - rho_T phi'(rho_T) + phi(rho_T))
        lhs += s[f] * (up * phi_p(rl) - rl * phi_p(rl) + phi_f(rl))
        if cr >= 0:
            lhs -= s[f] * (up * phi_p(rr) - rr * phi_p(rr) + phi_f(rr))
            jump = rl - rr
        else:
            jump = rl
        if ddphi is not None:
            rhs += 0.5 * ddphi * abs(s[f]) * jump**2
    if ddphi is None:
        viol = max(0.0, -lhs)
        passed = viol <= 1e-12
        return PropertyResult("upwind-identity-slogs", f"seed={mesh_seed}", passed, viol)
    scale = max(abs(lhs), abs(rhs), 1.0)
    viol = abs(lhs - rhs) / scale
    passed = viol <= 1e-12 and rhs >= -1e-14
    return PropertyResult("upwind-identity-s2", f"seed={mesh_seed}", passed, viol)


def check_m_matrix(mesh_seed, velocity_seed, tau=0.1):
    """Dense inverse of the k=1 density system is entrywise nonnegative."""
    rng = np.random.default_rng(velocity_seed)
    mesh = _small_mesh(mesh_seed)
    if mesh.num_cells > 64:
        raise ValueError("dense oracle restricted to meshes with <= 64 cells")
    disc = build_spaces(mesh, 1, "hdiv-hdg")
    u, uhat = _random_velocity(disc, rng)
    C = asm.assemble_upwind_transport(disc, u, uhat).matrix.toarray()
    # work in the indicator basis: rescale the orthonormal constants
    scal = np.sqrt(mesh.cell_area)
    Cind = C * scal[None, :] / scal[:, None]
    diag = np.diag(Cind)
    off = Cind - np.diag(diag)
    sys = np.diag(mesh.cell_area) / tau + Cind
    inv = np.linalg.inv(sys)
    viol = max(
        float(max(0.0, -diag.min())),
        float(max(0.0, off.max())),
        float(max(0.0, -inv.min())),
    )
    passed = viol <= 1e-14
    return PropertyResult(
        "m-matrix", f"mesh={mesh_seed},vel={velocity_seed},tau={tau}", passed, viol
    )


def check_gradient_robustness(k, variant, q_fn=None, grad_q_fn=None, nu=1e-6,
                              mesh_level=0):
    """Gradient forces move the hdiv velocity by machine noise only.

    Solves with f = grad(q), g = 0.  hdiv: |u_h| <= 1e-9 |grad q| and
    the density recovers the projected potential up to a constant;
    full-hdg: the velocity must be measurably nonzero (the scheme is
    not gradient-robust), asserted at small viscosity.
    """
    if q_fn is None:
        q_fn = lambda x, y: (x**2 + y**2) / 10.0
        grad_q_fn = lambda x, y: np.stack([2 * x / 10.0, 2 * y / 10.0], axis=-1)
    mesh = build_unit_square(mesh_level)
    disc = build_spaces(mesh, k, variant)
    prob = slv.ProblemSpec(nu=nu, c_M=1.0, M=1.0, f=grad_q_fn,
                           name=f"gradq-{variant}")
    config = slv.SolverConfig(max_iters=20000)
    state, rep = slv.solve_fixed_point(prob, mesh, config, k=k, variant=variant,
                                       disc=disc)
    xq, yq = disc.cell_qp[..., 0], disc.cell_qp[..., 1]
    gq = grad_q_fn(xq, yq)
    norm_gq = float(np.sqrt(np.einsum("cq,cqd,cqd->", disc.cell_qw, gq, gq)))
    uh = disc.velocity_at_cell_qps(state.u)
    norm_u = float(np.sqrt(np.einsum("cq,cqd,cqd->", disc.cell_qw, uh, uh)))
    if variant == "hdiv-hdg":
        # density must match Pi_Q(q)/c_M up to the mass-fixing constant
        qproj = l2_project_density(disc, q_fn)
        diff = state.rho - qproj  # constant shift remains
        const = (disc.q_intvec @ diff) / mesh.area
        resid = diff - const * disc.q_intvec * 0  # shift handled via means below
        mean_shift = disc.density_cell_means(diff)
        dev = mean_shift - mean_shift.mean()
        rho_dev = float(np.abs(dev).max()) if k == 1 else float(
            np.sqrt(np.einsum("cq,cq,cq->", disc.cell_qw,
                    disc.density_at_cell_qps(diff) - mean_shift.mean(),
                    disc.density_at_cell_qps(diff) - mean_shift.mean()))
        )
        viol = max(norm_u / norm_gq, 0.0)
        passed = rep.converged and norm_u <= 1e-9 * norm_gq and rho_dev <= 1e-8
        return PropertyResult(
            "gradient-robustness-hdiv",
            f"k={k},nu={nu},rho_dev={rho_dev:.2e}", passed, viol,
        )
    passed = rep.converged and norm_u > 1e-8
    return PropertyResult(
        "gradient-robustness-full", f"k={k},nu={nu}", passed, norm_u
    )


def check_divfree_orthogonality(mesh_seed, k, q_fn=None, grad_q_fn=None):
    """Discretely divergence-free fields are orthogonal to gradients.

    Random kernel vectors of the assembled divergence operator (free
    velocity dofs, dense nullspace) are tested against grad(q).
    """
    if grad_q_fn is None:
        grad_q_fn = lambda x, y: np.stack([2 * x * y, x**2], axis=-1)  # q = x^2 y
    rng = np.random.default_rng(mesh_seed)
    mesh = _small_mesh(mesh_seed)
    disc = build_spaces(mesh, k, "hdiv-hdg")
    B = asm.assemble_divergence(disc).matrix
    Bf = B[:, disc.free_vel].toarray()
    # orthonormal basis of ker(B) on the free dofs
    _, sv, VT = np.linalg.svd(Bf)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    null = VT[rank:].T  # (nfree, dim kernel)
    if null.shape[1] == 0:
        return PropertyResult("divfree-orthogonality", f"seed={mesh_seed}", False,
                              np.inf)
    coeffs = null @ rng.standard_normal(null.shape[1])
    vel = np.zeros(disc.nvel)
    vel[disc.free_vel] = coeffs
    u = vel[: disc.nV]
    scale = float(np.linalg.norm(u)) or 1.0
    xq, yq = disc.cell_qp[..., 0], disc.cell_qp[..., 1]
    gq = grad_q_fn(xq, yq)
    uh = disc.velocity_at_cell_qps(u)
    integral = float(np.einsum("cq,cqd,cqd->", disc.cell_qw, gq, uh))
    viol = abs(integral) / scale
    return PropertyResult(
        "divfree-orthogonality", f"seed={mesh_seed},k={k}", viol <= 1e-11, viol
    )


def run_suite(seed=0, instances=50, with_robustness=True):
    """All randomized checks; returns the list of PropertyResults."""
    results = []
    for i in range(instances):
        results.append(check_upwind_identity(seed + i, phi="s2"))
    for i in range(instances):
        results.append(check_upwind_identity(seed + 1000 + i, phi="slogs"))
    for i in range(instances):
        results.append(check_m_matrix(seed + i, seed + 500 + i, tau=0.05 + 0.01 * (i % 7)))
    for i in range(instances):
        results.append(check_divfree_orthogonality(seed + i, k=1 + i % 3))
    if with_robustness:
        results.append(check_gradient_robustness(1, "hdiv-hdg"))
        results.append(check_gradient_robustness(2, "hdiv-hdg"))
        results.append(check_gradient_robustness(2, "full-hdg"))
    return results


def results_to_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["property", "instance", "passed", "violation"])
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()
