"""Grid geometry: translation-invariant nodal sets on convex 2D domains.

Interior nodes live on the lattice ``{h * B @ (i, j) : (i, j) integer}``
intersected with the open domain; boundary nodes are intersections of the
lattice lines with the domain boundary plus an arc-length-h sampling of it,
so their spacing is of order h on every edge.  Each interior node carries
the measure of its cell (the basis parallelogram clipped by the domain).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import LatticeMismatch, NodeNotInterior, NoInteriorNodes

_EPS = 1e-12


def _polygon_area(vertices: np.ndarray) -> float:
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(vertices: np.ndarray, normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Clip a convex polygon by half-planes ``n . x <= b`` (Sutherland-Hodgman)."""
    poly = np.asarray(vertices, float)
    for n, b in zip(normals, offsets):
        if len(poly) == 0:
            break
        s = poly @ n - b
        keep = []
        m = len(poly)
        for i in range(m):
            j = (i + 1) % m
            si, sj = s[i], s[j]
            if si <= _EPS * max(1.0, abs(b)):
                keep.append(poly[i])
            if (si < 0 < sj) or (sj < 0 < si):
                t = si / (si - sj)
                keep.append(poly[i] + t * (poly[j] - poly[i]))
        poly = np.asarray(keep) if keep else np.zeros((0, 2))
    return poly


class ConvexPolygon:
    """Convex domain given by its CCW vertex list (equivalently half-planes)."""

    def __init__(self, vertices):
        v = np.asarray(vertices, float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise ValueError("need at least three 2D vertices")
        if _polygon_area(v) <= 0:
            raise ValueError("domain has empty interior")
        # enforce CCW orientation
        x, y = v[:, 0], v[:, 1]
        if np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) < 0:
            v = v[::-1]
        self.vertices = v
        edges = np.roll(v, -1, axis=0) - v
        # outward normals for CCW polygons
        self.normals = np.column_stack([edges[:, 1], -edges[:, 0]])
        self.normals /= np.linalg.norm(self.normals, axis=1)[:, None]
        self.offsets = np.einsum("ij,ij->i", self.normals, v)

    @property
    def area(self) -> float:
        return _polygon_area(self.vertices)

    @property
    def perimeter(self) -> float:
        d = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.linalg.norm(d, axis=1).sum())

    def bounding_box(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return lo, hi

    def signed_distance(self, points) -> np.ndarray:
        """max_i (n_i . x - b_i); negative inside, zero on the boundary."""
        p = np.atleast_2d(np.asarray(points, float))
        return (p @ self.normals.T - self.offsets).max(axis=1)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        return self.signed_distance(points) <= tol

    def exit_length(self, z, y) -> float:
        """Largest t >= 0 with z + s*y in the closed domain for all s in [0, t]."""
        z = np.asarray(z, float)
        y = np.asarray(y, float)
        num = self.offsets - self.normals @ z
        den = self.normals @ y
        with np.errstate(divide="ignore"):
            t = np.where(den > _EPS, num / np.maximum(den, _EPS), np.inf)
        return float(t.min())

    def clip(self, polygon: np.ndarray) -> np.ndarray:
        return clip_convex(polygon, self.normals, self.offsets)

    def boundary_points(self, spacing: float) -> np.ndarray:
        """Arc-length sampling of the boundary with step <= spacing, vertices included."""
        pts = []
        v = self.vertices
        for i in range(len(v)):
            a, b = v[i], v[(i + 1) % len(v)]
            length = np.linalg.norm(b - a)
            n = max(1, int(np.ceil(length / spacing - 1e-12)))
            for k in range(n):
                pts.append(a + (b - a) * (k / n))
        return np.asarray(pts)


class Box(ConvexPolygon):
    """Axis-aligned box [xmin, xmax] x [ymin, ymax]."""

    def __init__(self, xmin, xmax, ymin, ymax):
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("degenerate box")
        super().__init__([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])
        self.xmin, self.xmax, self.ymin, self.ymax = float(xmin), float(xmax), float(ymin), float(ymax)

    def divisible_by(self, h: float) -> bool:
        """True when every side is an integer multiple of h and corners sit on the lattice."""
        for a in (self.xmin, self.xmax, self.ymin, self.ymax):
            if abs(a / h - round(a / h)) > 1e-9:
                return False
        return True


@dataclass(frozen=True)
class Stencil:
    """Full set of integer directions with 0 < |y|_inf <= size."""

    size: int
    directions: tuple

    def __len__(self):
        return len(self.directions)

    def __contains__(self, y):
        return tuple(y) in self.directions


def enumerate_stencil(m: int) -> Stencil:
    """All integer directions y != 0 with |y|_inf <= m; cardinality (2m+1)^2 - 1."""
    if m < 1:
        raise ValueError("stencil size must be >= 1")
    dirs = tuple(
        (a, b)
        for a in range(-m, m + 1)
        for b in range(-m, m + 1)
        if (a, b) != (0, 0)
    )
    return Stencil(size=m, directions=dirs)


@dataclass(frozen=True)
class Superbasis:
    """Zero-sum integer triple (y0, y1, y2) with |det(y1, y2)| = 1."""

    y0: tuple
    y1: tuple
    y2: tuple

    def __iter__(self):
        return iter((self.y0, self.y1, self.y2))

    def directions(self):
        return (np.array(self.y0), np.array(self.y1), np.array(self.y2))


def canonical_superbasis(triple) -> Superbasis:
    """Canonical representative under permutations and the global sign flip.

    The representative is the lexicographically smallest flattened tuple
    among all 12 equivalent orderings; deterministic enumeration keeps the
    min-selection of the nonlinear schemes reproducible.
    """
    ys = [tuple(int(c) for c in y) for y in triple]
    best = None
    import itertools

    for sign in (1, -1):
        for perm in itertools.permutations(range(3)):
            cand = tuple(tuple(sign * c for c in ys[p]) for p in perm)
            flat = sum(cand, ())
            if best is None or flat < best[0]:
                best = (flat, cand)
    c = best[1]
    return Superbasis(c[0], c[1], c[2])


def enumerate_superbases(m: int) -> list:
    """All superbases within the stencil bound m, deduplicated canonically."""
    if m < 1:
        raise ValueError("stencil bound must be >= 1")
    seen = {}
    rng = range(-m, m + 1)
    for a in rng:
        for b in rng:
            if (a, b) == (0, 0):
                continue
            for c in rng:
                for d in rng:
                    if (c, d) == (0, 0):
                        continue
                    if abs(a * d - b * c) != 1:
                        continue
                    y0 = (-a - c, -b - d)
                    if y0 == (0, 0) or abs(y0[0]) > m or abs(y0[1]) > m:
                        continue
                    sb = canonical_superbasis((y0, (a, b), (c, d)))
                    seen[(sb.y0, sb.y1, sb.y2)] = sb
    return sorted(seen.values(), key=lambda s: (s.y0, s.y1, s.y2))


class Lattice:
    """Nodal set of a 2D convex domain: interior lattice nodes plus boundary samples.

    Nodes are indexed with all interior nodes first (0 .. n_interior-1) and
    boundary nodes after them.  Interior nodes carry integer lattice
    coordinates and a clipped cell measure; boundary nodes only carry their
    position on the domain boundary.
    """

    def __init__(self, domain, h, basis, points, n_interior, int_coords, cell_measures):
        self.domain = domain
        self.h = float(h)
        self.basis = np.asarray(basis, float)
        self.points = np.asarray(points, float)
        self.n_interior = int(n_interior)
        self.int_coords = np.asarray(int_coords, int)
        self.cell_measures = np.asarray(cell_measures, float)
        self._coord_map = {
            (int(i), int(j)): idx for idx, (i, j) in enumerate(self.int_coords)
        }
        # lattice points that happen to be boundary nodes also get coordinates
        binv = np.linalg.inv(self.basis)
        for idx in range(self.n_interior, len(self.points)):
            c = binv @ self.points[idx] / self.h
            ci, cj = round(c[0]), round(c[1])
            if abs(c[0] - ci) < 1e-9 and abs(c[1] - cj) < 1e-9:
                self._coord_map.setdefault((ci, cj), idx)
        # shape regularity and default margin radius (lambda = Lambda)
        cell = (self.basis @ np.array([[-0.5, 0.5, 0.5, -0.5], [-0.5, -0.5, 0.5, 0.5]])).T
        self.cell_inradius_unit = _inradius(cell)
        self.sigma = 1.0 / self.cell_inradius_unit
        self.margin_radius_default = self.margin_radius(1.0, 1.0)

    # -- basic queries ---------------------------------------------------
    @property
    def n_boundary(self) -> int:
        return len(self.points) - self.n_interior

    @property
    def n_nodes(self) -> int:
        return len(self.points)

    def is_interior(self, idx: int) -> bool:
        return 0 <= idx < self.n_interior

    def interior_points(self) -> np.ndarray:
        return self.points[: self.n_interior]

    def boundary_points(self) -> np.ndarray:
        return self.points[self.n_interior :]

    def margin_radius(self, lam: float, Lam: float) -> float:
        """R-bar = (Lambda/lambda) * sigma^2 * |sum_j e~_j|^2 (a node count, not a length)."""
        s = self.basis[:, 0] + self.basis[:, 1]
        return (Lam / lam) * self.sigma**2 * float(s @ s)

    def node_at(self, coords):
        """Node index at integer lattice coordinates, or -1."""
        return self._coord_map.get((int(coords[0]), int(coords[1])), -1)

    def interior_margin_mask(self, rbar: float | None = None) -> np.ndarray:
        """Interior nodes with dist(z, boundary) >= rbar * h."""
        if rbar is None:
            rbar = self.margin_radius_default
        d = -self.domain.signed_distance(self.interior_points())
        return d >= rbar * self.h - 1e-12 * self.h

    # -- stepping --------------------------------------------------------
    def step(self, idx: int, y):
        """Walk from interior node ``idx`` along the integer direction ``y``.

        Returns ``("node", j)`` when z + h*y is a node, otherwise
        ``("clip", k, exit_point)`` where 0 < k <= h is the exit parameter
        with z + k*y on the domain boundary.
        """
        if not self.is_interior(idx):
            raise NodeNotInterior(f"node {idx} is not interior")
        ci, cj = self.int_coords[idx]
        j = self.node_at((ci + y[0], cj + y[1]))
        if j >= 0:
            return ("node", j)
        z = self.points[idx]
        ydir = self.basis @ np.asarray(y, float)
        k = self.domain.exit_length(z, ydir)
        k = min(k, self.h)
        return ("clip", k, z + k * ydir)

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "x", "y", "kind", "cell_measure"])
            for i, (x, y) in enumerate(self.points):
                kind = "I" if i < self.n_interior else "B"
                meas = self.cell_measures[i] if i < self.n_interior else 0.0
                w.writerow([i, repr(float(x)), repr(float(y)), kind, repr(float(meas))])

    # -- alternative constructor for hand-built nodal sets ---------------
    @classmethod
    def from_points(cls, interior_pts, boundary_pts, h, cell_measures=None, domain=None):
        """Build a lattice from explicit node lists (testing / custom OP setups)."""
        interior_pts = np.atleast_2d(np.asarray(interior_pts, float))
        boundary_pts = np.atleast_2d(np.asarray(boundary_pts, float))
        pts = np.vstack([interior_pts, boundary_pts])
        if domain is None:
            hull_pts = boundary_pts if len(boundary_pts) >= 3 else pts
            from scipy.spatial import ConvexHull

            hull = ConvexHull(hull_pts)
            domain = ConvexPolygon(hull_pts[hull.vertices])
        coords = np.round(interior_pts / h).astype(int)
        if cell_measures is None:
            cell_measures = np.full(len(interior_pts), h * h)
        return cls(domain, h, np.eye(2), pts, len(interior_pts), coords, cell_measures)


def _inradius(polygon: np.ndarray) -> float:
    """Inradius of a convex polygon about its centroid direction-minimum."""
    c = polygon.mean(axis=0)
    edges = np.roll(polygon, -1, axis=0) - polygon
    normals = np.column_stack([edges[:, 1], -edges[:, 0]])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    d = np.einsum("ij,ij->i", normals, polygon - c)
    return float(np.abs(d).min())


def build_lattice(domain, h: float, basis=None) -> Lattice:
    """Construct the nodal set, classify nodes, and compute cell measures.

    Parameters
    ----------
    domain : Box or ConvexPolygon
    h : float
        Lattice spacing (> 0).
    basis : (2, 2) array, optional
        Columns are the lattice basis vectors; defaults to the identity.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    basis = np.eye(2) if basis is None else np.asarray(basis, float)
    if abs(np.linalg.det(basis)) < 1e-14:
        raise ValueError("degenerate basis")

    lo, hi = domain.bounding_box()
    binv = np.linalg.inv(basis)
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    cc = corners @ binv.T / h
    imin, jmin = np.floor(cc.min(axis=0)).astype(int) - 1
    imax, jmax = np.ceil(cc.max(axis=0)).astype(int) + 1

    ii, jj = np.meshgrid(np.arange(imin, imax + 1), np.arange(jmin, jmax + 1), indexing="ij")
    coords = np.column_stack([ii.ravel(), jj.ravel()])
    pts = coords @ basis.T * h

    sd = domain.signed_distance(pts)
    tol = _EPS * max(h, 1.0)
    interior_mask = sd < -tol
    interior_pts = pts[interior_mask]
    interior_coords = coords[interior_mask]
    if len(interior_pts) == 0:
        raise NoInteriorNodes(f"no interior nodes for h={h}")

    # boundary nodes: lattice-line intersections with the domain boundary ...
    bpts = [pts[np.abs(sd) <= tol]]
    verts = domain.vertices
    nv = len(verts)
    for e in range(nv):
        a, b = verts[e], verts[(e + 1) % nv]
        for axis in (0, 1):
            # lattice lines are {h*B@(t, j)} (axis 0 varies) and {h*B@(i, t)}
            ca, cb = (binv @ a) / h, (binv @ b) / h
            other = 1 - axis
            lo_c, hi_c = sorted((ca[other], cb[other]))
            for k in range(int(np.ceil(lo_c - 1e-9)), int(np.floor(hi_c + 1e-9)) + 1):
                denom = cb[other] - ca[other]
                if abs(denom) < 1e-14:
                    continue
                t = (k - ca[other]) / denom
                if -1e-12 <= t <= 1 + 1e-12:
                    bpts.append((a + t * (b - a))[None, :])
    # ... plus an arc-length-h sampling of the boundary
    bpts.append(domain.boundary_points(h))
    bpts = np.vstack([p for p in bpts if len(p)])

    # deduplicate boundary points
    key = np.round(bpts / (1e-9 * h)).astype(np.int64)
    _, unique_idx = np.unique(key, axis=0, return_index=True)
    bpts = bpts[np.sort(unique_idx)]

    # cell measures: basis parallelogram clipped by the domain
    cell0 = (basis @ np.array([[-0.5, 0.5, 0.5, -0.5], [-0.5, -0.5, 0.5, 0.5]])).T * h
    full_area = abs(np.linalg.det(basis)) * h * h
    measures = np.empty(len(interior_pts))
    inner = -sd[interior_mask] > h * np.linalg.norm(basis, ord=2)  # cell cannot touch the boundary
    measures[inner] = full_area
    for i in np.flatnonzero(~inner):
        clipped = domain.clip(cell0 + interior_pts[i])
        measures[i] = _polygon_area(clipped)

    points = np.vstack([interior_pts, bpts])
    return Lattice(domain, h, basis, points, len(interior_pts), interior_coords, measures)


def shortened_step(lattice: Lattice, idx: int, y, h_nominal: float | None = None):
    """Two-sided step lengths (k_plus, k_minus) along +-y, clipped at the boundary."""
    if not lattice.is_interior(idx):
        raise NodeNotInterior(f"node {idx} is not interior")
    h = lattice.h if h_nominal is None else float(h_nominal)
    y = np.asarray(y, float)
    if not np.any(y):
        raise ValueError("direction must be nonzero")
    z = lattice.points[idx]
    ydir = lattice.basis @ y
    kp = min(h, lattice.domain.exit_length(z, ydir))
    km = min(h, lattice.domain.exit_length(z, -ydir))
    return kp, km


class NodalFunction:
    """Real values attached to the nodes of a lattice (interior first)."""

    def __init__(self, lattice: Lattice, values):
        values = np.asarray(values, float)
        if values.shape != (lattice.n_nodes,):
            raise ValueError(
                f"expected {lattice.n_nodes} values, got {values.shape}"
            )
        self.lattice = lattice
        self.values = values

    @classmethod
    def from_callable(cls, lattice: Lattice, fn) -> "NodalFunction":
        pts = lattice.points
        return cls(lattice, np.asarray([fn(p) for p in pts], float))

    @classmethod
    def zeros(cls, lattice: Lattice) -> "NodalFunction":
        return cls(lattice, np.zeros(lattice.n_nodes))

    def copy(self) -> "NodalFunction":
        return NodalFunction(self.lattice, self.values.copy())

    @property
    def interior(self) -> np.ndarray:
        return self.values[: self.lattice.n_interior]

    @property
    def boundary(self) -> np.ndarray:
        return self.values[self.lattice.n_interior :]

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max()) if len(self.values) else 0.0

    def _check(self, other):
        if isinstance(other, NodalFunction):
            if other.lattice is not self.lattice:
                raise LatticeMismatch("nodal functions live on different lattices")
            return other.values
        return other

    def __add__(self, other):
        return NodalFunction(self.lattice, self.values + self._check(other))

    def __sub__(self, other):
        return NodalFunction(self.lattice, self.values - self._check(other))

    def __mul__(self, scalar):
        return NodalFunction(self.lattice, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return NodalFunction(self.lattice, -self.values)

    def dump_csv(self, path, column: str = "u") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "x", "y", column])
            for i, (x, y) in enumerate(self.lattice.points):
                w.writerow([i, repr(float(x)), repr(float(y)), repr(float(self.values[i]))])
