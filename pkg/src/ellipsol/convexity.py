"""Discrete convex geometry in 2D.

Two independent routes to the same objects are kept deliberately:

* an envelope route -- the lower convex hull of the lifted points
  (x, y, v(x, y)) gives the discrete convex envelope, its induced
  triangulation, and subdifferential polygons as convex hulls of incident
  facet gradients;
* a half-plane route -- the subdifferential at z is clipped directly from
  {p : p.(x_j - z) <= v_j - v(z)}, with adaptive local windows verified
  against the full node set (fast enough to sit inside nonlinear solvers).

They cross-validate each other in the test suite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _geometry
from .errors import BoundaryNotNonnegative, DegenerateHull, NodeNotInterior
from .lattice import Lattice, NodalFunction

_TOL = 1e-12


# ---------------------------------------------------------------------------
# envelope route
# ---------------------------------------------------------------------------
@dataclass
class DiscreteConvexEnvelope:
    """Lower convex hull of a nodal function.

    triangles[t] are node indices of the t-th facet, gradients[t] its affine
    gradient; envelope_values holds the envelope evaluated at every node.
    """

    function: NodalFunction
    triangles: np.ndarray
    gradients: np.ndarray
    envelope_values: np.ndarray
    on_envelope: np.ndarray

    def value(self, points) -> np.ndarray:
        """Evaluate the envelope: max over facet planes (convex PWL = max of pieces)."""
        pts = np.atleast_2d(np.asarray(points, float))
        nodes = self.function.lattice.points
        vals = self.function.values
        v0 = self.triangles[:, 0]
        anchor = nodes[v0]
        const = vals[v0] if len(self.triangles) else np.zeros(0)
        out = np.full(len(pts), -np.inf)
        for t in range(len(self.triangles)):
            plane = const[t] + (pts - anchor[t]) @ self.gradients[t]
            np.maximum(out, plane, out=out)
        return out

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_id", "v0", "v1", "v2", "gx", "gy"])
            for t, (tri, g) in enumerate(zip(self.triangles, self.gradients)):
                w.writerow([t, tri[0], tri[1], tri[2], repr(float(g[0])), repr(float(g[1]))])


def lower_envelope(v_h: NodalFunction) -> DiscreteConvexEnvelope:
    """Discrete convex envelope: sup of affine functions below v_h at the nodes."""
    lat = v_h.lattice
    pts = lat.points
    vals = v_h.values
    scale = max(1.0, float(np.ptp(vals)))

    # planar (affine) data has a degenerate lifted hull; handle it directly
    A = np.column_stack([pts, np.ones(len(pts))])
    coef, res, rank, _ = np.linalg.lstsq(A, vals, rcond=None)
    if rank < 3:
        raise DegenerateHull("nodes are collinear")
    if np.abs(A @ coef - vals).max() <= 1e-13 * scale:
        tris = _any_triangulation(pts)
        grads = np.tile(coef[:2], (len(tris), 1))
        return DiscreteConvexEnvelope(v_h, tris, grads, vals.copy(), np.ones(len(pts), bool))

    lifted = np.column_stack([pts, vals])
    try:
        hull = ConvexHull(lifted, qhull_options="Qt")
    except QhullError as exc:  # pragma: no cover - guarded by the affine branch
        raise DegenerateHull(str(exc)) from exc

    lower = hull.equations[:, 2] < -1e-12
    tris = hull.simplices[lower]
    eqs = hull.equations[lower]
    # plane: nx x + ny y + nz v + off = 0, nz < 0  =>  grad = (-nx/nz, -ny/nz)
    grads = -eqs[:, :2] / eqs[:, 2:3]
    # deterministic facet order
    order = np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))
    tris = tris[order]
    grads = grads[order]

    env = DiscreteConvexEnvelope(v_h, tris, grads, vals.copy(), np.ones(len(pts), bool))
    env_vals = env.value(pts)
    env_vals = np.minimum(env_vals, vals)  # envelope never exceeds the data
    env.envelope_values = env_vals
    env.on_envelope = vals - env_vals <= _TOL * scale
    return env


def _any_triangulation(pts: np.ndarray) -> np.ndarray:
    from scipy.spatial import Delaunay

    try:
        return Delaunay(pts).simplices.copy()
    except QhullError as exc:
        raise DegenerateHull(str(exc)) from exc


@dataclass
class SubdifferentialCell:
    """Convex polygon of supporting-plane slopes at a node, CCW, with its area."""

    node: int
    vertices: np.ndarray
    area: float
    exceeds_margin: bool = False

    def contains(self, p, tol: float = 1e-12) -> bool:
        if len(self.vertices) == 0:
            return False
        v = self.vertices
        n = len(v)
        for i in range(n):
            a, b = v[i], v[(i + 1) % n]
            e = b - a
            if (p[0] - a[0]) * e[1] - (p[1] - a[1]) * e[0] > tol:
                return False
        return True

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex_id", "gx", "gy"])
            for i, (gx, gy) in enumerate(self.vertices):
                w.writerow([i, repr(float(gx)), repr(float(gy))])


def _hull2d(points: np.ndarray) -> tuple[np.ndarray, float]:
    """CCW hull and area of a 2D point cloud; handles rank-deficient clouds."""
    if len(points) == 0:
        return np.zeros((0, 2)), 0.0
    scale = max(1.0, float(np.abs(points).max()))
    uniq = np.unique(np.round(points / (1e-12 * scale)), axis=0) * (1e-12 * scale)
    if len(uniq) == 1:
        return uniq.astype(float), 0.0
    if len(uniq) == 2 or np.linalg.matrix_rank(uniq - uniq[0], tol=1e-10 * scale) < 2:
        lo = uniq[np.lexsort((uniq[:, 1], uniq[:, 0]))]
        return np.vstack([lo[0], lo[-1]]), 0.0
    hull = ConvexHull(points)
    verts = points[hull.vertices]
    return verts, float(hull.volume)  # 2D "volume" is the area


def subdifferential(v_h: NodalFunction, node: int, envelope: DiscreteConvexEnvelope | None = None) -> SubdifferentialCell:
    """Nodal subdifferential as the hull of incident envelope-facet gradients.

    Empty (area 0, no vertices) when the node is not on the envelope: no
    supporting plane touches there.
    """
    lat = v_h.lattice
    if not lat.is_interior(node):
        raise NodeNotInterior(f"node {node} is not interior")
    env = lower_envelope(v_h) if envelope is None else envelope
    scale = max(1.0, float(np.ptp(v_h.values)))
    if v_h.values[node] - env.envelope_values[node] > _TOL * scale:
        return SubdifferentialCell(node, np.zeros((0, 2)), 0.0)

    z = lat.points[node]
    incident = np.any(env.triangles == node, axis=1)
    if not np.any(incident):
        # on a facet but not a hull vertex: locate containing facets geometrically
        incident = _facets_containing(env, lat.points, z)
    grads = env.gradients[incident]
    verts, area = _hull2d(grads)
    flag = _support_exceeds_margin(lat, env, node, incident)
    return SubdifferentialCell(node, verts, area, exceeds_margin=flag)


def _facets_containing(env: DiscreteConvexEnvelope, pts: np.ndarray, z: np.ndarray) -> np.ndarray:
    tris = env.triangles
    mask = np.zeros(len(tris), bool)
    for t, tri in enumerate(tris):
        a, b, c = pts[tri[0]], pts[tri[1]], pts[tri[2]]
        m = np.column_stack([b - a, c - a])
        det = np.linalg.det(m)
        if abs(det) < 1e-15:
            continue
        lam = np.linalg.solve(m, z - a)
        if lam[0] >= -1e-10 and lam[1] >= -1e-10 and lam.sum() <= 1 + 1e-10:
            mask[t] = True
    return mask


def _support_exceeds_margin(lat: Lattice, env: DiscreteConvexEnvelope, node: int, incident) -> bool:
    """Flag nodes whose adjacent set leaves the ball B_{Rbar h} (not an error)."""
    tri = env.triangles[incident]
    if len(tri) == 0:
        return False
    support = np.unique(tri.ravel())
    d = np.linalg.norm(lat.points[support] - lat.points[node], axis=1)
    return bool((d > lat.margin_radius_default * lat.h + 1e-12).any())


@dataclass
class ContactSet:
    """Interior nodes where the function touches its envelope."""

    nodes: np.ndarray
    envelope: DiscreteConvexEnvelope = field(repr=False, default=None)

    def __contains__(self, idx):
        return idx in set(self.nodes.tolist())

    def __len__(self):
        return len(self.nodes)


def contact_set(v_h: NodalFunction, envelope: DiscreteConvexEnvelope | None = None) -> ContactSet:
    """Interior nodes z with Gamma_h(v_h)(z) = v_h(z) (tolerance 1e-12, scaled)."""
    env = lower_envelope(v_h) if envelope is None else envelope
    ni = v_h.lattice.n_interior
    nodes = np.flatnonzero(env.on_envelope[:ni])
    return ContactSet(nodes, env)


def is_convex_nodal(v_h: NodalFunction, tol: float = 1e-9) -> bool:
    """True when every interior node admits a supporting plane."""
    env = lower_envelope(v_h)
    ni = v_h.lattice.n_interior
    scale = max(1.0, float(np.ptp(v_h.values)))
    return bool(np.all(v_h.values[:ni] - env.envelope_values[:ni] <= tol * scale))


def alexandrov_bound(v_h: NodalFunction):
    """Both sides of the discrete Alexandrov estimate, constant left symbolic.

    Returns (lhs, rhs_raw) with lhs = sup of the negative part and
    rhs_raw = (sum of subdifferential measures of the envelope of -v^- over
    the contact set)^(1/2); the caller compares lhs <= C*R*rhs_raw.
    """
    lat = v_h.lattice
    if np.any(v_h.boundary < -_TOL * max(1.0, float(np.ptp(v_h.values)))):
        raise BoundaryNotNonnegative("data must be nonnegative on boundary nodes")
    lhs = float(max(0.0, -v_h.values.min()))
    if lhs == 0.0:
        return 0.0, 0.0
    w = NodalFunction(lat, np.minimum(v_h.values, 0.0))
    env = lower_envelope(w)
    contact = contact_set(w, env)
    total = 0.0
    for z in contact.nodes:
        if w.values[z] < 0.0:
            total += subdifferential(w, int(z), env).area
    return lhs, float(total ** 0.5)


# ---------------------------------------------------------------------------
# half-plane route (exact measures with adaptive windows)
# ---------------------------------------------------------------------------
class MeasureWorkspace:
    """Exact nodal subdifferential measures for a fixed set of target nodes.

    Candidate constraints start as an interior lattice window plus every
    boundary node; ``verify`` checks the computed polygons against the full
    node set and grows the candidate lists where a far constraint cuts.
    """

    def __init__(self, lattice: Lattice, targets=None, window: int = 3, active_mask=None):
        self.lattice = lattice
        self.targets = (
            np.arange(lattice.n_interior) if targets is None else np.asarray(targets, int)
        )
        if active_mask is None:
            active_mask = np.ones(lattice.n_nodes, bool)
        self.active_mask = np.asarray(active_mask, bool)
        self._build_candidates(window)

    def _build_candidates(self, window: int):
        lat = self.lattice
        boundary = np.arange(lat.n_interior, lat.n_nodes)
        cands = []
        offsets = [
            (a, b)
            for a in range(-window, window + 1)
            for b in range(-window, window + 1)
            if (a, b) != (0, 0)
        ]
        for t in self.targets:
            ci, cj = lat.int_coords[t]
            local = [lat.node_at((ci + a, cj + b)) for a, b in offsets]
            local = [ix for ix in local if ix >= 0 and ix != t and self.active_mask[ix]]
            cands.append(np.unique(np.concatenate([np.asarray(local, int), boundary])))
        self._cands = cands
        self._rebuild_csr()

    def _rebuild_csr(self):
        ptr = np.zeros(len(self._cands) + 1, np.int64)
        for i, c in enumerate(self._cands):
            ptr[i + 1] = ptr[i] + len(c)
        idx = np.concatenate(self._cands) if self._cands else np.zeros(0, np.int64)
        self._cand_idx = idx.astype(np.int64)
        self._cand_ptr = ptr

    def _big(self, values: np.ndarray) -> float:
        return 16.0 * (float(np.ptp(values)) / self.lattice.h + 1.0)

    def measures(self, values: np.ndarray, want_edges: bool = False):
        """Measures (and optional Jacobian edge data) from the candidate lists."""
        big = self._big(values)
        for _ in range(4):
            out = _geometry.measures_and_edges(
                self.lattice.points,
                values,
                self.targets.astype(np.int64),
                self._cand_idx,
                self._cand_ptr,
                big,
                want_edges,
            )
            if not out[1].any():
                break
            big *= 16.0
        areas, flags, edge_node, edge_sens, edge_ptr, verts, vptr = out
        self._last_polygons = (verts, vptr)
        if want_edges:
            return areas, (edge_node, edge_sens, edge_ptr)
        return areas

    def verify(self, values: np.ndarray, grow: bool = True) -> int:
        """Check last polygons against all nodes; grow candidate lists on failure.

        Returns the number of (target, node) violations found.
        """
        verts, vptr = self._last_polygons
        scale = max(1.0, float(np.ptp(values)))
        vi, vj = _geometry.violations(
            self.lattice.points,
            values,
            self.targets.astype(np.int64),
            verts,
            vptr,
            1e-11 * scale,
            self.active_mask,
        )
        if len(vi) and grow:
            for i, j in zip(vi, vj):
                self._cands[i] = np.unique(np.append(self._cands[i], j))
            self._rebuild_csr()
        return len(vi)

    def exact_measures(self, values: np.ndarray, want_edges: bool = False, max_rounds: int = 12):
        """Measures verified against the full node set (grows windows as needed)."""
        for _ in range(max_rounds):
            out = self.measures(values, want_edges)
            if self.verify(values) == 0:
                return out
        raise RuntimeError("measure verification failed to stabilize")

    def measure_at(self, values: np.ndarray, target_pos: int, trial_value: float) -> float:
        """Measure of targets[target_pos] with its value replaced by trial_value."""
        t = int(self.targets[target_pos])
        area, _ = _geometry.measure_at_value(
            self.lattice.points,
            values,
            t,
            self._cands[target_pos].astype(np.int64),
            trial_value,
            self._big(values),
        )
        return float(area)

    def support_at(self, values: np.ndarray, target_pos: int) -> float:
        """Lower-hull value of the candidate nodes at the target's position."""
        t = int(self.targets[target_pos])
        return float(
            _geometry.support_value(
                self.lattice.points, values, t, self._cands[target_pos].astype(np.int64)
            )
        )


def nodal_measures(v_h: NodalFunction, targets=None) -> np.ndarray:
    """Exact subdifferential measures |del v_h(z)| for the given interior nodes."""
    ws = MeasureWorkspace(v_h.lattice, targets)
    return ws.exact_measures(v_h.values)
