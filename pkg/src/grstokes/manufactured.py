"""Closed-form benchmark cases, error norms, and convergence tables.

Three families:

* vortex: unit square, density in hydrostatic balance with the gradient
  field (0, -y^2), velocity the density-weighted curl of a polynomial
  stream function; right-hand side either split (g gravity, f viscous)
  or moved entirely into g.
* mountain: atmosphere at rest over the two-Gaussian mountain profile,
  exact velocity zero; forcing either as gravity g or as the admissible
  gradient force f = rho grad(Psi).
* nonhydro: rigid rotation u = (-y, x) against an exponential density,
  mimicking a non-hydrostatic balanced state of the Navier-Stokes
  system with g = grad(x^2+y^2)/2; inflow boundary data for the
  density.

Normalization constants are computed once per (case, c_M) by adaptive
quadrature and cached.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import dblquad, quad

from .mesh import build_mountain, build_unit_square, mountain_height
from .solver import ProblemSpec

_NORMALIZATION_CACHE = {}


def _c_omega_square(c_M):
    key = ("square", c_M)
    if key not in _NORMALIZATION_CACHE:
        val, err = quad(lambda y: math.exp(-(y**3) / (3.0 * c_M)), 0.0, 1.0,
                        epsabs=1e-14, epsrel=1e-13)
        _NORMALIZATION_CACHE[key] = val
    return _NORMALIZATION_CACHE[key]


def _c_omega_mountain(c_M):
    key = ("mountain", c_M)
    if key not in _NORMALIZATION_CACHE:
        val, err = dblquad(
            lambda y, x: math.exp(-(y**3) / (3.0 * c_M)),
            0.0, 1.0, lambda x: mountain_height(x), lambda x: 1.0,
            epsabs=1e-12, epsrel=1e-12,
        )
        _NORMALIZATION_CACHE[key] = val
    return _NORMALIZATION_CACHE[key]


def _rho0_nonhydro(c_M):
    key = ("nonhydro", c_M)
    if key not in _NORMALIZATION_CACHE:
        ix, _ = quad(lambda t: math.exp(t**2 / (2.0 * c_M)), 0.0, 1.0,
                     epsabs=1e-14, epsrel=1e-13)
        _NORMALIZATION_CACHE[key] = 1.0 / (ix * ix)
    return _NORMALIZATION_CACHE[key]


@dataclass
class BenchmarkCase:
    case_id: str
    rhs_mode: str
    problem: ProblemSpec
    domain: str  # "square" | "mountain"
    u_exact: object
    grad_u_exact: object
    laplace_u_exact: object
    rho_exact: object
    grad_rho_exact: object

    def mesh_for_level(self, level, h0=0.3, h_loc=0.01):
        if self.domain == "square":
            return build_unit_square(level)
        return build_mountain(h0 / 2**level, h_loc)

    def div_rho_u(self, x, y):
        """Closed-form div(rho u) = grad(rho).u + rho div(u)."""
        gr = self.grad_rho_exact(x, y)
        u = self.u_exact(x, y)
        gu = self.grad_u_exact(x, y)
        rho = self.rho_exact(x, y)
        return np.einsum("...d,...d->...", gr, u) + rho * (
            gu[..., 0, 0] + gu[..., 1, 1]
        )

    def momentum_residual(self, x, y):
        """Strong residual -nu lap(u) + grad p(rho) - rho g - f."""
        pr = self.problem
        res = -pr.nu * self.laplace_u_exact(x, y)
        res = res + pr.c_M * self.grad_rho_exact(x, y)
        rho = self.rho_exact(x, y)
        if pr.g is not None:
            res = res - rho[..., None] * pr.g(x, y)
        if pr.f is not None:
            res = res - pr.f(x, y)
        return res


def _zeta_factors(x, y):
    X = x**2 * (1 - x) ** 2
    Xp = 2 * x - 6 * x**2 + 4 * x**3
    Xpp = 2 - 12 * x + 12 * x**2
    Xppp = -12 + 24 * x
    Y = y**2 * (1 - y) ** 2
    Yp = 2 * y - 6 * y**2 + 4 * y**3
    Ypp = 2 - 12 * y + 12 * y**2
    Yppp = -12 + 24 * y
    return X, Xp, Xpp, Xppp, Y, Yp, Ypp, Yppp


def case_vortex(nu, c_M, rhs_mode="split"):
    """Unit-square vortex with hydrostatic density, mass M = 1.

    rhs_mode "split": g = grad(Psi), f = -nu lap(u); "all-g": the
    viscous part is folded into g (g = grad(Psi) - nu lap(u)/rho, f=0).
    """
    if rhs_mode not in ("split", "all-g"):
        raise ValueError(f"unknown rhs_mode {rhs_mode!r}")
    c_omega = _c_omega_square(c_M)

    def rho(x, y):
        return np.exp(-(np.asarray(y) ** 3) / (3 * c_M)) / c_omega

    def grad_rho(x, y):
        r = rho(x, y)
        return np.stack([np.zeros_like(r), -np.asarray(y) ** 2 / c_M * r], axis=-1)

    def w_funcs(y):
        w = c_omega * np.exp(np.asarray(y) ** 3 / (3 * c_M))
        wp = w * y**2 / c_M
        wpp = w * (y**4 / c_M**2 + 2 * y / c_M)
        return w, wp, wpp

    def u(x, y):
        X, Xp, _, _, Y, Yp, _, _ = _zeta_factors(np.asarray(x), np.asarray(y))
        w, _, _ = w_funcs(np.asarray(y))
        return 100.0 * np.stack([-X * Yp * w, Xp * Y * w], axis=-1)

    def grad_u(x, y):
        X, Xp, Xpp, _, Y, Yp, Ypp, _ = _zeta_factors(np.asarray(x), np.asarray(y))
        w, wp, _ = w_funcs(np.asarray(y))
        g = np.empty(np.broadcast(x, y).shape + (2, 2))
        g[..., 0, 0] = -Xp * Yp * w
        g[..., 0, 1] = -X * (Ypp * w + Yp * wp)
        g[..., 1, 0] = Xpp * Y * w
        g[..., 1, 1] = Xp * (Yp * w + Y * wp)
        return 100.0 * g

    def lap_u(x, y):
        X, Xp, Xpp, Xppp, Y, Yp, Ypp, Yppp = _zeta_factors(
            np.asarray(x), np.asarray(y)
        )
        w, wp, wpp = w_funcs(np.asarray(y))
        l1 = -(Xpp * Yp * w + X * (Yppp * w + 2 * Ypp * wp + Yp * wpp))
        l2 = Xppp * Y * w + Xp * (Ypp * w + 2 * Yp * wp + Y * wpp)
        return 100.0 * np.stack([l1, l2], axis=-1)

    def grad_psi(x, y):
        y = np.asarray(y)
        return np.stack([np.zeros_like(y, dtype=float), -(y**2)], axis=-1)

    if rhs_mode == "split":
        g_fn = grad_psi
        f_fn = lambda x, y: -nu * lap_u(x, y)
    else:
        def g_fn(x, y):
            return grad_psi(x, y) - nu * lap_u(x, y) / rho(x, y)[..., None]
        f_fn = None

    prob = ProblemSpec(nu=nu, c_M=c_M, M=1.0, g=g_fn, f=f_fn,
                       name=f"vortex-{rhs_mode}")
    return BenchmarkCase("vortex", rhs_mode, prob, "square",
                         u, grad_u, lap_u, rho, grad_rho)


def case_mountain(nu, c_M, rhs_mode="gravity"):
    """Atmosphere at rest over the mountain profile; exact u = 0.

    rhs_mode "gravity": g = grad(Psi) = (0, -y^2), f = 0.  "all-f":
    g = 0 and f = rho grad(Psi), an admissible gradient force that a
    gradient-robust scheme balances to machine precision.
    """
    if rhs_mode not in ("gravity", "all-f"):
        raise ValueError(f"unknown rhs_mode {rhs_mode!r}")
    c_omega = _c_omega_mountain(c_M)

    def rho(x, y):
        return np.exp(-(np.asarray(y) ** 3) / (3 * c_M)) / c_omega

    def grad_rho(x, y):
        r = rho(x, y)
        return np.stack([np.zeros_like(r), -np.asarray(y) ** 2 / c_M * r], axis=-1)

    zero2 = lambda x, y: np.zeros(np.broadcast(x, y).shape + (2,))

    def grad_psi(x, y):
        y = np.asarray(y)
        return np.stack([np.zeros_like(y, dtype=float), -(y**2)], axis=-1)

    if rhs_mode == "gravity":
        g_fn, f_fn = grad_psi, None
    else:
        g_fn = None
        f_fn = lambda x, y: rho(x, y)[..., None] * grad_psi(x, y)

    prob = ProblemSpec(nu=nu, c_M=c_M, M=1.0, g=g_fn, f=f_fn,
                       name=f"mountain-{rhs_mode}")
    return BenchmarkCase(
        "mountain", rhs_mode, prob, "mountain",
        zero2,
        lambda x, y: np.zeros(np.broadcast(x, y).shape + (2, 2)),
        zero2, rho, grad_rho,
    )


def case_nonhydro(nu, c_M):
    """Rigid rotation balanced by an exponential density on the square.

    The convection term of the Navier-Stokes momentum balance is
    mimicked by g = grad(x^2 + y^2)/2; the exact velocity (-y, x) is
    prescribed as Dirichlet data and the exact density (normalized to
    unit mass) feeds the inflow boundary term.
    """
    rho0 = _rho0_nonhydro(c_M)

    def rho(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return rho0 * np.exp((x**2 + y**2) / (2 * c_M))

    def grad_rho(x, y):
        r = rho(x, y)
        return np.stack([np.asarray(x) * r / c_M, np.asarray(y) * r / c_M], axis=-1)

    def u(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return np.stack([-y, x], axis=-1).astype(float)

    def grad_u(x, y):
        g = np.zeros(np.broadcast(x, y).shape + (2, 2))
        g[..., 0, 1] = -1.0
        g[..., 1, 0] = 1.0
        return g

    zero2 = lambda x, y: np.zeros(np.broadcast(x, y).shape + (2,))

    def g_fn(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return np.stack([x, y], axis=-1).astype(float)

    prob = ProblemSpec(nu=nu, c_M=c_M, M=1.0, g=g_fn, f=None,
                       u_dirichlet=u, rho_inflow=rho, name="nonhydro")
    return BenchmarkCase("nonhydro", "gravity", prob, "square",
                         u, grad_u, zero2, rho, grad_rho)


def get_case(case_id, nu, c_M, rhs_mode=None):
    if case_id == "vortex":
        return case_vortex(nu, c_M, rhs_mode or "split")
    if case_id == "vortex-allg":
        return case_vortex(nu, c_M, "all-g")
    if case_id == "mountain":
        return case_mountain(nu, c_M, rhs_mode or "gravity")
    if case_id == "mountain-allf":
        return case_mountain(nu, c_M, "all-f")
    if case_id == "nonhydro":
        return case_nonhydro(nu, c_M)
    raise ValueError(f"unknown case {case_id!r}")


CASE_IDS = ("vortex", "vortex-allg", "mountain", "mountain-allf", "nonhydro")


# ---------------------------------------------------------------------------
# error norms


@dataclass
class ErrorReport:
    h_max: float
    ndof_velocity: int
    ndof_density: int
    err_u_l2: float
    err_u_h1: float
    err_rho_l2: float
    level: int = -1
    iterations: int = 0
    converged: bool = True

    def as_row(self):
        return [
            self.level, self.h_max, self.ndof_velocity, self.ndof_density,
            self.err_u_l2, self.err_u_h1, self.err_rho_l2,
            int(self.converged), self.iterations,
        ]

    ROW_HEADER = [
        "level", "h_max", "ndof_velocity", "ndof_density",
        "err_u_l2", "err_u_h1", "err_rho_l2", "converged", "iterations",
    ]


def compute_errors(state, case, disc, level=-1):
    """L2 and discrete H1 errors against the exact fields.

    The discrete H1 error sums the broken gradient error and the
    h_T-weighted facet differences between the volume trace and the
    facet unknown (tangential for the hdiv variant, full for full-hdg);
    the exact field cancels from the facet part because its trace is
    single-valued.
    """
    mesh = disc.mesh
    xq, yq = disc.cell_qp[..., 0], disc.cell_qp[..., 1]
    u_ex = case.u_exact(xq, yq)
    uh = disc.velocity_at_cell_qps(state.u)
    diff = uh - u_ex
    err_u_l2 = np.einsum("cq,cqd,cqd->", disc.cell_qw, diff, diff)

    gu_ex = case.grad_u_exact(xq, yq)
    err_h1 = 0.0
    chunk = 2048
    for start in range(0, mesh.num_cells, chunk):
        cells = np.arange(start, min(start + chunk, mesh.num_cells))
        _, gg = disc.u_basis(cells, xq[cells], yq[cells], grads=True)
        gh = np.einsum("cqide,ci->cqde", gg, state.u[disc.cell_dofs_V[cells]])
        gd = gh - gu_ex[cells]
        err_h1 += np.einsum("cq,cqde,cqde->", disc.cell_qw[cells], gd, gd)

    # facet differences (u_h - uhat_h) per cell boundary
    uhat_f = disc.uhat_at_facet_qps(state.uhat)  # (nf, nqf, 2)
    for side in (0, 1):
        cells = mesh.facet_cells[:, side]
        sel = np.flatnonzero(cells >= 0)
        tr = disc.u_basis(
            cells[sel], disc.facet_qp[sel, :, 0], disc.facet_qp[sel, :, 1]
        )
        utr = np.einsum("fqid,fi->fqd", tr, state.u[disc.cell_dofs_V[cells[sel]]])
        d = utr - uhat_f[sel]
        if disc.variant == "hdiv-hdg":
            nrm = mesh.facet_normal[sel]
            dn = np.einsum("fqd,fd->fq", d, nrm)
            d = d - dn[..., None] * nrm[:, None, :]
        w = disc.facet_qw[sel] / mesh.cell_diameter[cells[sel]][:, None]
        err_h1 += np.einsum("fq,fqd,fqd->", w, d, d)

    rho_ex = case.rho_exact(xq, yq)
    rho_h = disc.density_at_cell_qps(state.rho)
    err_rho = np.einsum("cq,cq,cq->", disc.cell_qw, rho_h - rho_ex, rho_h - rho_ex)

    return ErrorReport(
        h_max=mesh.h_max,
        ndof_velocity=disc.nvel,
        ndof_density=disc.nQ,
        err_u_l2=float(np.sqrt(err_u_l2)),
        err_u_h1=float(np.sqrt(err_h1 + err_u_l2)),
        err_rho_l2=float(np.sqrt(err_rho)),
        level=level,
        iterations=state.iterations,
    )


def eoc(e_coarse, e_fine, h_coarse, h_fine):
    if e_coarse <= 0 or e_fine <= 0:
        return float("nan")
    return math.log(e_coarse / e_fine) / math.log(h_coarse / h_fine)


def eoc_table(reports):
    """Per-quantity experimental orders between consecutive levels.

    Returns (header, rows); rows are CSV-serializable, EOC columns are
    NaN on the first level.
    """
    if len(reports) < 2:
        raise ValueError("need at least two levels for an EOC table")
    header = ErrorReport.ROW_HEADER + ["eoc_u_l2", "eoc_u_h1", "eoc_rho_l2"]
    rows = []
    for i, r in enumerate(reports):
        row = r.as_row()
        if i == 0:
            row += [float("nan")] * 3
        else:
            p = reports[i - 1]
            row += [
                eoc(p.err_u_l2, r.err_u_l2, p.h_max, r.h_max),
                eoc(p.err_u_h1, r.err_u_h1, p.h_max, r.h_max),
                eoc(p.err_rho_l2, r.err_rho_l2, p.h_max, r.h_max),
            ]
        rows.append(row)
    return header, rows


def table_to_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12e}"
    return v
