"""2D simplicial meshes with globally oriented facets.

Meshes are immutable after construction.  Facets are stored with their
vertex pair sorted ascending, which fixes a global parameterization
(from the lower to the higher vertex id); the facet normal n_F is the
outward normal of the "left" cell (the adjacent cell with the lower
cell id) and points into the right cell, outward on the boundary.  The
jump of a quantity q across a facet is q_left - q_right.
"""

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, cKDTree


class MeshError(Exception):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 3) positively oriented
    facets: np.ndarray  # (nf, 2) sorted vertex pairs
    facet_cells: np.ndarray  # (nf, 2), right = -1 on boundary
    facet_normal: np.ndarray  # (nf, 2) unit, left -> right
    facet_length: np.ndarray  # (nf,)
    cell_facets: np.ndarray  # (nc, 3) facet id opposite local vertex i
    cell_facet_sign: np.ndarray  # (nc, 3) +1 if cell is the left cell
    boundary_facets: np.ndarray  # (nbf,) facet ids
    boundary_marker: dict  # facet id -> str
    cell_area: np.ndarray  # (nc,)
    cell_diameter: np.ndarray  # (nc,)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_cells(self):
        return len(self.cells)

    @property
    def num_facets(self):
        return len(self.facets)

    @property
    def h_max(self):
        return float(self.cell_diameter.max())

    @property
    def area(self):
        return float(self.cell_area.sum())

    @property
    def interior_facets(self):
        return np.flatnonzero(self.facet_cells[:, 1] >= 0)

    def cell_vertices(self, cell_ids=slice(None)):
        return self.vertices[self.cells[cell_ids]]

    def facet_midpoints(self):
        return 0.5 * (self.vertices[self.facets[:, 0]] + self.vertices[self.facets[:, 1]])

    def facet_tangent(self):
        """Unit tangent in the global parameterization (lower->higher id)."""
        d = self.vertices[self.facets[:, 1]] - self.vertices[self.facets[:, 0]]
        return d / np.linalg.norm(d, axis=1)[:, None]

    def quasi_uniformity(self):
        """Ratio max h_T / min h_T."""
        return float(self.cell_diameter.max() / self.cell_diameter.min())

    def min_angle(self):
        v = self.cell_vertices()
        angles = []
        for i in range(3):
            a = v[:, (i + 1) % 3] - v[:, i]
            b = v[:, (i + 2) % 3] - v[:, i]
            cosang = np.einsum("cd,cd->c", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return float(np.min(angles))


def facet_geometry(mesh, facet_id):
    """(n_F, h_F, midpoint, adjacent cell ids) of one facet."""
    if not 0 <= facet_id < mesh.num_facets:
        raise IndexError(f"facet id {facet_id} out of range")
    cells = tuple(int(c) for c in mesh.facet_cells[facet_id] if c >= 0)
    mid = 0.5 * (
        mesh.vertices[mesh.facets[facet_id, 0]] + mesh.vertices[mesh.facets[facet_id, 1]]
    )
    return mesh.facet_normal[facet_id], float(mesh.facet_length[facet_id]), mid, cells


def make_mesh(vertices, cells, markers=None, default_marker="wall"):
    """Build a Mesh from vertex coordinates and cell connectivity.

    Cells are reoriented to positive signed area.  `markers` may be a
    callable mapping boundary facet midpoints (n,2) to a list of labels,
    or a dict {(vmin, vmax): label}; unmatched facets get
    `default_marker`.
    """
    vertices = np.ascontiguousarray(vertices, dtype=float)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    v = vertices[cells]
    sgn = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (
        v[:, 1, 1] - v[:, 0, 1]
    ) * (v[:, 2, 0] - v[:, 0, 0])
    flip = sgn < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    v = vertices[cells]
    area = 0.5 * np.abs(
        (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    )
    if np.any(area <= 0):
        raise MeshError("degenerate cell with zero area")

    # facet connectivity: local facet i is opposite local vertex i
    raw = np.concatenate(
        [cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=0
    )
    raw_sorted = np.sort(raw, axis=1)
    facets, inverse = np.unique(raw_sorted, axis=0, return_inverse=True)
    nf = len(facets)
    nc = len(cells)
    cell_facets = inverse.reshape(3, nc).T.copy()

    facet_cells = np.full((nf, 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    cell_of_entry = np.tile(np.arange(nc), 3)[order]
    fids = inverse[order]
    first = np.ones(len(fids), dtype=bool)
    first[1:] = fids[1:] != fids[:-1]
    facet_cells[fids[first], 0] = cell_of_entry[first]
    second = ~first
    facet_cells[fids[second], 1] = cell_of_entry[second]
    both = facet_cells[:, 1] >= 0
    lo = np.minimum(facet_cells[both, 0], facet_cells[both, 1])
    hi = np.maximum(facet_cells[both, 0], facet_cells[both, 1])
    facet_cells[both, 0] = lo
    facet_cells[both, 1] = hi
    counts = np.bincount(inverse, minlength=nf)
    if np.any(counts > 2):
        raise MeshError("facet shared by more than two cells")

    # normal = outward normal of the left cell
    tang = vertices[facets[:, 1]] - vertices[facets[:, 0]]
    facet_length = np.linalg.norm(tang, axis=1)
    tang = tang / facet_length[:, None]
    normal = np.column_stack([tang[:, 1], -tang[:, 0]])
    left = facet_cells[:, 0]
    centroids = vertices[cells].mean(axis=1)
    mids = 0.5 * (vertices[facets[:, 0]] + vertices[facets[:, 1]])
    outward = np.einsum("fd,fd->f", normal, mids - centroids[left]) > 0
    normal[~outward] *= -1.0

    sign = np.where(facet_cells[cell_facets, 0] == np.arange(nc)[:, None], 1, -1).astype(
        np.int8
    )

    boundary = np.flatnonzero(counts == 1)
    marker = {}
    if callable(markers):
        labels = markers(mids[boundary])
        marker = {int(f): str(m) for f, m in zip(boundary, labels)}
    elif isinstance(markers, dict):
        for f in boundary:
            key = (int(facets[f, 0]), int(facets[f, 1]))
            marker[int(f)] = str(markers.get(key, default_marker))
    else:
        marker = {int(f): default_marker for f in boundary}

    diam = np.maximum(
        np.maximum(
            np.linalg.norm(v[:, 0] - v[:, 1], axis=1),
            np.linalg.norm(v[:, 1] - v[:, 2], axis=1),
        ),
        np.linalg.norm(v[:, 2] - v[:, 0], axis=1),
    )

    for arr in (vertices, cells, facets, facet_cells, normal, facet_length,
                cell_facets, sign, boundary, area, diam):
        arr.setflags(write=False)
    return Mesh(
        vertices=vertices, cells=cells, facets=facets, facet_cells=facet_cells,
        facet_normal=normal, facet_length=facet_length, cell_facets=cell_facets,
        cell_facet_sign=sign, boundary_facets=boundary, boundary_marker=marker,
        cell_area=area, cell_diameter=diam,
    )


def build_unit_square(n_refine=0):
    """Structured mesh of (0,1)^2 with 96 cells at level 0.

    A 4x4 grid of squares, each fanned into six triangles around its
    midpoint (through the two lateral edge midpoints), giving right
    isoceles cells with a 45 degree minimal angle; red refinement
    quadruples the count per level.
    """
    if n_refine < 0:
        raise ValueError("n_refine must be >= 0")
    n = 4
    pts = {}
    verts = []

    def vid(x, y):
        key = (round(x, 12), round(y, 12))
        if key not in pts:
            pts[key] = len(verts)
            verts.append((x, y))
        return pts[key]

    cells = []
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
    mesh = make_mesh(np.array(verts), np.array(cells))
    for _ in range(n_refine):
        mesh = uniform_refine(mesh)
    return mesh


def uniform_refine(mesh):
    """Red refinement: every cell split into four similar children.

    Boundary markers are inherited from the parent facet; vertices are
    never re-projected onto any analytic boundary curve.
    """
    nv = mesh.num_vertices
    midpoints = mesh.facet_midpoints()
    vertices = np.vstack([mesh.vertices, midpoints])
    c = mesh.cells
    # midpoint vertex of the facet opposite local vertex i
    m = mesh.cell_facets + nv
    children = np.concatenate(
        [
            np.column_stack([c[:, 0], m[:, 2], m[:, 1]]),
            np.column_stack([c[:, 1], m[:, 0], m[:, 2]]),
            np.column_stack([c[:, 2], m[:, 1], m[:, 0]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ],
        axis=0,
    )
    # child boundary facet = (old vertex, midpoint of parent facet)
    parent_markers = {}
    for f, lab in mesh.boundary_marker.items():
        a, b = mesh.facets[f]
        mid = nv + f
        for key in ((min(a, mid), max(a, mid)), (min(b, mid), max(b, mid))):
            parent_markers[(int(key[0]), int(key[1]))] = lab
    return make_mesh(vertices, children, markers=parent_markers)


# ---------------------------------------------------------------------------
# mountain domain


def mountain_height(x):
    """Two-Gaussian mountain profile evaluated at the horizontal coordinate."""
    x = np.asarray(x, dtype=float)
    return 0.3 * np.exp(-((x - 0.4) ** 2) / 0.08**2) + 0.2 * np.exp(
        -((x - 0.6) ** 2) / 0.1**2
    )


def _mountain_slope(x):
    x = np.asarray(x, dtype=float)
    return 0.3 * np.exp(-((x - 0.4) ** 2) / 0.08**2) * (-2.0 * (x - 0.4) / 0.08**2) + (
        0.2 * np.exp(-((x - 0.6) ** 2) / 0.1**2) * (-2.0 * (x - 0.6) / 0.1**2)
    )


def _sample_mountain_curve(spacing):
    """Points on y = M(x), 0 <= x <= 1, equispaced in arclength."""
    xs = np.linspace(0.0, 1.0, 4001)
    ds = np.sqrt(1.0 + _mountain_slope(xs) ** 2)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(xs))])
    total = s[-1]
    nseg = max(int(np.ceil(total / spacing)), 1)
    starget = np.linspace(0.0, total, nseg + 1)
    xc = np.interp(starget, s, xs)
    return np.column_stack([xc, mountain_height(xc)])


def _graded_segment(a, b, h0, h1, ratio=1.25):
    """1D nodes from a to b starting at spacing h0, grading toward h1."""
    steps = [0.0]
    h = h0
    while steps[-1] + h < abs(b - a):
        steps.append(steps[-1] + h)
        h = min(h * ratio, h1)
    pts = np.array(steps) / (steps[-1] + h) * abs(b - a)
    pts = np.append(pts, abs(b - a))
    return a + np.sign(b - a) * pts


def build_mountain(h_max, h_loc):
    """Graded Delaunay mesh of {0 < x < 1, M(x) < y < 1}.

    The mountain curve is sampled at arclength spacing min(h_loc,
    h_max); the interior grades to h_max.  Generation retries with
    stronger smoothing until the minimal angle reaches 20 degrees.
    """
    if not 0 < h_loc <= h_max:
        raise ValueError("need 0 < h_loc <= h_max")
    h_curve = min(h_loc, h_max)
    curve = _sample_mountain_curve(h_curve)
    if len(curve) - 1 < 8:
        raise MeshError("h too coarse: fewer than 8 segments on the mountain curve")

    for attempt in range(4):
        n_smooth = 12 + 8 * attempt
        seed_shift = 0.07 * attempt
        mesh = _mountain_attempt(curve, h_curve, h_max, n_smooth, seed_shift)
        if mesh is not None and mesh.min_angle() >= 20.0:
            return mesh
    raise MeshError("mountain mesh generation failed to reach 20 degree quality")


def _mountain_attempt(curve, h_curve, h_max, n_smooth, seed_shift):
    grade = 0.35
    y0l, y0r = curve[0, 1], curve[-1, 1]
    left = _graded_segment(y0l, 1.0, h_curve, h_max)[1:]
    right = _graded_segment(y0r, 1.0, h_curve, h_max)[1:]
    ntop = max(int(np.ceil(1.0 / h_max)), 1)
    top = np.linspace(0.0, 1.0, ntop + 1)[1:-1]
    boundary = np.vstack(
        [
            curve,
            np.column_stack([np.ones_like(right), right]),
            np.column_stack([top[::-1], np.ones_like(top)]),
            np.column_stack([np.zeros_like(left), left[::-1]]),
        ]
    )
    nb = len(boundary)
    tree = cKDTree(curve)

    def size_of(p):
        d, _ = tree.query(p)
        return np.clip(h_curve + grade * d, h_curve, h_max)

    # graded hexagonal candidate lattices, one per size octave
    cand = []
    s = h_max
    while True:
        nx = int(np.ceil(1.0 / s)) + 2
        ny = int(np.ceil(1.0 / (s * np.sqrt(3) / 2))) + 2
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        px = (ii + 0.5 * (jj % 2) + seed_shift) * s
        py = (jj * np.sqrt(3) / 2 + seed_shift) * s
        p = np.column_stack([px.ravel(), py.ravel()])
        sz = size_of(p)
        band = (sz >= 0.75 * s) & (sz < 1.5 * s)
        cand.append(p[band])
        if s <= 1.5 * h_curve:
            break
        s *= 0.5
    pts = np.vstack(cand)
    inside = (
        (pts[:, 0] > 0.0)
        & (pts[:, 0] < 1.0)
        & (pts[:, 1] < 1.0)
        & (pts[:, 1] > mountain_height(pts[:, 0]))
    )
    pts = pts[inside]
    # keep clear of the boundary and of finer candidates
    sz = size_of(pts)
    btree = cKDTree(boundary)
    d, _ = btree.query(pts)
    pts = pts[d > 0.55 * sz]
    pts = _thin_points(pts, size_of)

    points = np.vstack([boundary, pts])
    for it in range(n_smooth):
        tri = Delaunay(points)
        cells = _kept_cells(tri, points)
        if len(cells) == 0:
            return None
        points = _smooth(points, cells, nb, omega=0.6)
        points[nb:, 0] = np.clip(points[nb:, 0], 1e-9, 1 - 1e-9)
        low = mountain_height(points[nb:, 0]) + 0.25 * h_curve
        points[nb:, 1] = np.clip(points[nb:, 1], low, 1 - 1e-9)
    tri = Delaunay(points)
    cells = _kept_cells(tri, points)
    if not _curve_conforming(cells, nb, len(curve)):
        return None

    def markers(mids):
        labs = []
        for x, y in mids:
            if y <= mountain_height(x) + 0.02:
                labs.append("mountain")
            else:
                labs.append("wall")
        return labs

    return make_mesh(points, cells, markers=markers)


def _kept_cells(tri, points):
    cells = tri.simplices
    cen = points[cells].mean(axis=1)
    keep = cen[:, 1] > mountain_height(cen[:, 0])
    v = points[cells]
    area = 0.5 * np.abs(
        (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    )
    keep &= area > 1e-14
    return cells[keep]


def _curve_conforming(cells, nb, ncurve):
    edges = set()
    for tri in cells:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges.add((min(tri[a], tri[b]), max(tri[a], tri[b])))
    for i in range(ncurve - 1):
        if (i, i + 1) not in edges:
            return False
    # the whole outer boundary is consecutive in the point list
    for i in range(ncurve - 1, nb - 1):
        if (i, i + 1) not in edges:
            return False
    return (0, nb - 1) in edges


def _smooth(points, cells, nb, omega):
    n = len(points)
    acc = np.zeros((n, 2))
    cnt = np.zeros(n)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        np.add.at(acc, cells[:, a], points[cells[:, b]])
        np.add.at(cnt, cells[:, a], 1.0)
        np.add.at(acc, cells[:, b], points[cells[:, a]])
        np.add.at(cnt, cells[:, b], 1.0)
    target = acc / np.maximum(cnt, 1.0)[:, None]
    out = points.copy()
    out[nb:] = (1 - omega) * points[nb:] + omega * target[nb:]
    return out


def _thin_points(pts, size_of, factor=0.8):
    """Greedy removal of points closer than factor*size to a kept point."""
    if len(pts) == 0:
        return pts
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    pts = pts[order]
    sz = size_of(pts)
    tree = cKDTree(pts)
    keep = np.ones(len(pts), dtype=bool)
    for i in range(len(pts)):
        if not keep[i]:
            continue
        for j in tree.query_ball_point(pts[i], factor * sz[i]):
            if j != i and keep[j] and j > i:
                keep[j] = False
    return pts[keep]


def jitter_mesh(mesh, amount=0.2, seed=0):
    """Perturb interior vertices by at most `amount` * local h.

    Used by the randomized property harnesses; retries draws that would
    invert a cell.
    """
    rng = np.random.default_rng(seed)
    verts = mesh.vertices.copy()
    on_boundary = np.zeros(mesh.num_vertices, dtype=bool)
    for f in mesh.boundary_facets:
        on_boundary[mesh.facets[f]] = True
    hloc = np.full(mesh.num_vertices, np.inf)
    for i in range(3):
        np.minimum.at(hloc, mesh.cells[:, i], mesh.cell_diameter)
    free = np.flatnonzero(~on_boundary)
    for _ in range(50):
        trial = verts.copy()
        trial[free] += (rng.uniform(-1, 1, (len(free), 2))) * (
            amount * hloc[free][:, None]
        )
        v = trial[mesh.cells]
        sgn = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (
            v[:, 1, 1] - v[:, 0, 1]
        ) * (v[:, 2, 0] - v[:, 0, 0])
        if np.all(sgn > 1e-12):
            markers = {
                (int(mesh.facets[f, 0]), int(mesh.facets[f, 1])): lab
                for f, lab in mesh.boundary_marker.items()
            }
            return make_mesh(trial, mesh.cells.copy(), markers=markers)
        amount *= 0.7
    raise MeshError("could not jitter mesh without inverting cells")


# ---------------------------------------------------------------------------
# text format


def write_mesh(mesh, path_or_file):
    """Plain-text format, round-trips bit-exactly at 17 significant digits."""
    own = isinstance(path_or_file, (str, bytes))
    f = open(path_or_file, "w") if own else path_or_file
    try:
        f.write("grstokes-mesh v1\n")
        f.write(f"{mesh.num_vertices} {mesh.num_cells} {len(mesh.boundary_facets)}\n")
        for x, y in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g}\n")
        for a, b, c in mesh.cells:
            f.write(f"{a} {b} {c}\n")
        for fid in mesh.boundary_facets:
            a, b = mesh.facets[fid]
            f.write(f"{a} {b} {mesh.boundary_marker[int(fid)]}\n")
    finally:
        if own:
            f.close()


def read_mesh(path_or_file):
    own = isinstance(path_or_file, (str, bytes))
    f = open(path_or_file, "r") if own else path_or_file
    try:
        header = f.readline().strip()
        if header != "grstokes-mesh v1":
            raise MeshError(f"bad mesh header {header!r}")
        nv, nc, nbf = (int(t) for t in f.readline().split())
        verts = np.array(
            [[float(t) for t in f.readline().split()] for _ in range(nv)]
        )
        cells = np.array(
            [[int(t) for t in f.readline().split()] for _ in range(nc)]
        )
        markers = {}
        for _ in range(nbf):
            a, b, lab = f.readline().split()
            a, b = int(a), int(b)
            markers[(min(a, b), max(a, b))] = lab
        return make_mesh(verts, cells, markers=markers)
    finally:
        if own:
            f.close()


def mesh_to_text(mesh):
    buf = io.StringIO()
    write_mesh(mesh, buf)
    return buf.getvalue()
