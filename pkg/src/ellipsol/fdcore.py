"""Positive-type finite difference operators for A(x) : D^2 u.

A second-order operator with SPD coefficient A is realized on the lattice as
L_h u(z) = sum_y a_y(z) * d2_{y,h} u(z) with nonnegative stencil weights
a_y >= 0 obtained from a rank-one decomposition A = sum_y a_y y (x) y.
Nonnegative weights make the scheme monotone; an orthogonal direction pair
with weights bounded below makes it positive type, which yields discrete
comparison and ABP stability for the ensuing M-matrix systems.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import nnls

from .errors import (
    LatticeMismatch,
    NodeNotInterior,
    RequiresInterpolant,
    SingularSystem,
    StencilExhausted,
)
from .lattice import Lattice, NodalFunction, shortened_step

_DEC_TOL = 1e-10


def second_difference(u, z, y, h, lattice: Lattice | None = None, boundary=None) -> float:
    """Central second difference d2_{y,h} u(z) = [u(z+hy) - 2u(z) + u(z-hy)] / h^2.

    ``u`` may be a callable (then ``z`` is a point and the formula is applied
    verbatim) or a NodalFunction (then ``z`` is an interior node index and
    steps are shortened at the domain boundary with the weighted two-sided
    formula).  Boundary exits at non-node points need ``boundary`` (Dirichlet
    data callable); otherwise RequiresInterpolant is raised.
    """
    y = np.asarray(y, float)
    if callable(u):
        z = np.asarray(z, float)
        return (u(z + h * y) - 2.0 * u(z) + u(z - h * y)) / h**2

    if not isinstance(u, NodalFunction):
        raise TypeError("u must be a callable or a NodalFunction")
    lat = u.lattice if lattice is None else lattice
    idx = int(z)
    if not lat.is_interior(idx):
        raise NodeNotInterior(f"node {idx} is not interior")

    kp, km = shortened_step(lat, idx, y, h)

    def value_at(sign, k):
        p = lat.points[idx] + sign * k * (lat.basis @ y)
        j = _node_near(lat, p)
        if j >= 0:
            return u.values[j]
        if boundary is not None and k < h - 1e-14 * h:
            return boundary(p)  # exit point on the domain boundary
        raise RequiresInterpolant("off-lattice evaluation of a nodal function")

    up = value_at(+1, kp)
    um = value_at(-1, km)
    uz = u.values[idx]
    return (2.0 / (kp + km)) * ((up - uz) / kp + (um - uz) / km)


def _node_near(lat: Lattice, p, tol=None) -> int:
    tol = 1e-9 * lat.h if tol is None else tol
    d = np.abs(lat.points - p).max(axis=1)
    j = int(np.argmin(d))
    return j if d[j] <= tol else -1


# ---------------------------------------------------------------------------
# SPD decomposition
# ---------------------------------------------------------------------------
@dataclass
class SpdDecomposition:
    """Nonnegative rank-one stencil decomposition A = sum_y a_y y (x) y."""

    directions: tuple
    weights: np.ndarray
    m: int
    lambda0h: float

    def tensor(self) -> np.ndarray:
        A = np.zeros((2, 2))
        for y, w in zip(self.directions, self.weights):
            v = np.asarray(y, float)
            A += w * np.outer(v, v)
        return A

    def residual(self, A) -> float:
        return float(np.linalg.norm(self.tensor() - A) / max(np.linalg.norm(A), 1e-300))


def _primitive_directions(m: int):
    out = []
    for a in range(-m, m + 1):
        for b in range(-m, m + 1):
            if (a, b) == (0, 0):
                continue
            if math.gcd(abs(a), abs(b)) != 1:
                continue
            if a < 0 or (a == 0 and b < 0):
                continue
            out.append((a, b))
    return out


def _orthogonal_pair_bound(directions, weights) -> float:
    """Best lower bound over orthogonal direction pairs carrying positive weight."""
    best = 0.0
    n = len(directions)
    for i in range(n):
        if weights[i] <= 0:
            continue
        yi = directions[i]
        for j in range(i + 1, n):
            if weights[j] <= 0:
                continue
            yj = directions[j]
            if yi[0] * yj[0] + yi[1] * yj[1] == 0:
                best = max(best, min(weights[i], weights[j]))
    return best


def _splitting_from_pair(A: np.ndarray, y1) -> dict | None:
    """Diagonally-dominant splitting in the orthogonal frame (y1, y1-perp)."""
    y1 = np.asarray(y1, int)
    y2 = np.array([-y1[1], y1[0]])
    n2 = float(y1 @ y1)
    u1 = y1 / math.sqrt(n2)
    u2 = y2 / math.sqrt(n2)
    a11 = float(u1 @ A @ u1)
    a22 = float(u2 @ A @ u2)
    a12 = float(u1 @ A @ u2)
    if min(a11, a22) - abs(a12) <= 0:
        return None
    weights = {}
    weights[tuple(y1)] = (a11 - abs(a12)) / n2
    weights[tuple(y2)] = (a22 - abs(a12)) / n2
    cross = tuple(y1 + y2) if a12 >= 0 else tuple(y1 - y2)
    if abs(a12) > 0:
        weights[cross] = weights.get(cross, 0.0) + abs(a12) / n2
    return weights


def decompose_spd(A, m_max: int = 6) -> SpdDecomposition:
    """Nonnegative stencil decomposition of a symmetric positive definite matrix.

    Two-stage strategy: (i) approximate the eigenframe by an orthogonal
    integer pair and apply the explicit diagonally-dominant splitting;
    (ii) otherwise a nonnegative least-squares fit over all primitive stencil
    directions, with a small multiple of the identity pinned to the axes so
    the result stays of positive type.  The stencil bound grows up to m_max.
    """
    A = np.asarray(A, float)
    if A.shape != (2, 2) or abs(A[0, 1] - A[1, 0]) > 1e-12 * max(1, np.abs(A).max()):
        raise ValueError("A must be symmetric 2x2")
    evals, evecs = np.linalg.eigh(A)
    if evals[0] <= 0:
        raise ValueError("A must be positive definite (uniform ellipticity required)")
    lam = float(evals[0])
    normA = float(np.linalg.norm(A))

    best_residual = np.inf
    for m in range(1, m_max + 1):
        prims = _primitive_directions(m)
        # stage (i): angular approximations of the first eigenvector, best first;
        # the cross directions y1 +- y2 must stay inside the stencil too
        phi = evecs[:, 0]
        cands = []
        for y in prims:
            v = np.asarray(y, float)
            ang = abs(abs(v @ phi) / np.linalg.norm(v) - 1.0)
            if max(abs(y[0] - y[1]), abs(y[0] + y[1])) <= m:
                cands.append((ang, y))
        cands.sort(key=lambda t: t[0])
        for _, y in cands:
            w = _splitting_from_pair(A, y)
            if w is None:
                continue
            dirs = tuple(w.keys())
            wts = np.array([w[d] for d in dirs])
            dec = SpdDecomposition(dirs, wts, max(max(abs(a), abs(b)) for a, b in dirs), 0.0)
            if dec.residual(A) <= _DEC_TOL:
                dec.lambda0h = _orthogonal_pair_bound(dirs, wts)
                if dec.lambda0h > 0:
                    return dec
        # stage (ii): NNLS over all primitive directions within the stencil
        cols = prims
        G = np.array([[y[0] ** 2, y[1] ** 2, math.sqrt(2) * y[0] * y[1]] for y in cols]).T
        for eps in (lam / (2 * 2 * m * m), 0.0):
            target = A - eps * np.eye(2)
            b = np.array([target[0, 0], target[1, 1], math.sqrt(2) * target[0, 1]])
            w, rn = nnls(G, b)
            dirs = list(cols)
            wts = w.copy()
            for axis in ((1, 0), (0, 1)):
                k = dirs.index(axis)
                wts[k] += eps
            keep = wts > 1e-15 * normA
            dirs = tuple(d for d, k in zip(dirs, keep) if k)
            wts = wts[keep]
            dec = SpdDecomposition(
                dirs,
                wts,
                max((max(abs(a), abs(b)) for a, b in dirs), default=1),
                0.0,
            )
            res = dec.residual(A)
            best_residual = min(best_residual, res)
            if res <= _DEC_TOL:
                dec.lambda0h = _orthogonal_pair_bound(dirs, wts)
                if dec.lambda0h > 0:
                    return dec
    raise StencilExhausted(
        f"no positive-type decomposition within |y|_inf <= {m_max}",
        residual=best_residual,
    )


# ---------------------------------------------------------------------------
# operator assembly
# ---------------------------------------------------------------------------
class PositiveLinearOperator:
    """L_h u(z) = sum_y a_y(z) d2_{y,h} u(z) with a_y >= 0, plus data f, g.

    Interior rows are kept in three pieces: coupling to interior unknowns
    (A_int), coupling to boundary node values (B_bnd), and contributions of
    boundary exits at non-node points, already multiplied by g (c_exit).
    """

    def __init__(self, lattice, directions, weight_table, A_int, B_bnd, c_exit, f_int, g_fn, g_nodal):
        self.lattice = lattice
        self.directions = directions
        self.weight_table = weight_table
        self.A_int = A_int.tocsr()
        self.B_bnd = B_bnd.tocsr()
        self.c_exit = c_exit
        self.f_int = f_int
        self.g_fn = g_fn
        self.g_nodal = g_nodal

    def interior_apply(self, u_int: np.ndarray, u_bnd: np.ndarray | None = None) -> np.ndarray:
        """L_h u on interior nodes; boundary values default to g."""
        ub = self.g_nodal if u_bnd is None else u_bnd
        return self.A_int @ u_int + self.B_bnd @ ub + self.c_exit

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "y1", "y2", "weight"])
            for i in range(self.lattice.n_interior):
                for (y1, y2), a in zip(self.directions, self.weight_table[i]):
                    if a != 0.0:
                        w.writerow([i, y1, y2, repr(float(a))])


def assemble_linear(A_field, f, g, lattice: Lattice, m_max: int = 6) -> PositiveLinearOperator:
    """Assemble the positive-type operator for A(z) : D^2 with data (f, g).

    ``A_field`` is a constant 2x2 matrix or a callable z -> matrix; ``f`` and
    ``g`` are callables (or constants).  Near the boundary, stencil legs are
    shortened to the domain boundary and the Dirichlet data g is evaluated at
    the exit points (exact for smooth g).
    """
    ni = lattice.n_interior
    f_fn = f if callable(f) else (lambda p, c=float(f): c)
    g_fn = g if callable(g) else (lambda p, c=float(g): c)

    constant = not callable(A_field)
    cache: dict = {}

    def decomposition_at(i):
        if constant:
            key = "const"
            mat = np.asarray(A_field, float)
        else:
            mat = np.asarray(A_field(lattice.points[i]), float)
            key = tuple(np.round(mat, 12).ravel())
        dec = cache.get(key)
        if dec is None:
            try:
                dec = decompose_spd(mat, m_max)
            except StencilExhausted as exc:
                raise StencilExhausted(str(exc), residual=exc.residual, node=i) from exc
            cache[key] = dec
        return dec

    decs = [decomposition_at(i) for i in range(ni)]
    dir_index: dict = {}
    for dec in decs:
        for y in dec.directions:
            dir_index.setdefault(y, len(dir_index))
    directions = list(dir_index.keys())
    weight_table = np.zeros((ni, len(directions)))
    for i, dec in enumerate(decs):
        for y, w in zip(dec.directions, dec.weights):
            weight_table[i, dir_index[y]] = w

    h = lattice.h
    rows_a, cols_a, vals_a = [], [], []
    rows_b, cols_b, vals_b = [], [], []
    c_exit = np.zeros(ni)

    def add(i, j, v):
        if j < ni:
            rows_a.append(i)
            cols_a.append(j)
            vals_a.append(v)
        else:
            rows_b.append(i)
            cols_b.append(j - ni)
            vals_b.append(v)

    for i in range(ni):
        for y, w in zip(directions, weight_table[i]):
            if w == 0.0:
                continue
            res_p = lattice.step(i, y)
            res_m = lattice.step(i, (-y[0], -y[1]))
            if res_p[0] == "node" and res_m[0] == "node":
                coef = w / (h * h)
                add(i, res_p[1], coef)
                add(i, res_m[1], coef)
                add(i, i, -2.0 * coef)
            else:
                kp = h if res_p[0] == "node" else res_p[1]
                km = h if res_m[0] == "node" else res_m[1]
                cp = 2.0 * w / ((kp + km) * kp)
                cm = 2.0 * w / ((kp + km) * km)
                if res_p[0] == "node":
                    add(i, res_p[1], cp)
                else:
                    c_exit[i] += cp * g_fn(res_p[2])
                if res_m[0] == "node":
                    add(i, res_m[1], cm)
                else:
                    c_exit[i] += cm * g_fn(res_m[2])
                add(i, i, -(cp + cm))

    A_int = sp.coo_matrix((vals_a, (rows_a, cols_a)), shape=(ni, ni))
    B_bnd = sp.coo_matrix((vals_b, (rows_b, cols_b)), shape=(ni, lattice.n_boundary))
    f_int = np.array([f_fn(p) for p in lattice.interior_points()], float)
    g_nodal = np.array([g_fn(p) for p in lattice.boundary_points()], float)
    return PositiveLinearOperator(
        lattice, directions, weight_table, A_int, B_bnd, c_exit, f_int, g_fn, g_nodal
    )


def apply(op: PositiveLinearOperator, u_h: NodalFunction) -> NodalFunction:
    """Residual L_h u - f on interior nodes; u - g on boundary nodes."""
    if u_h.lattice is not op.lattice:
        raise LatticeMismatch("operator and function lattices differ")
    ni = op.lattice.n_interior
    out = np.empty(op.lattice.n_nodes)
    out[:ni] = op.interior_apply(u_h.interior, u_h.boundary) - op.f_int
    out[ni:] = u_h.boundary - op.g_nodal
    return NodalFunction(op.lattice, out)


def solve_monotone_linear(op: PositiveLinearOperator) -> NodalFunction:
    """Solve L_h u = f in the interior with u = g on the boundary nodes."""
    ni = op.lattice.n_interior
    rhs = op.f_int - op.B_bnd @ op.g_nodal - op.c_exit
    try:
        lu = spla.splu(op.A_int.tocsc())
        x = lu.solve(rhs)
    except RuntimeError as exc:  # pragma: no cover - unreachable for positive type
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("linear solve produced non-finite values")
    scale = float(np.abs(op.f_int).max(initial=0.0) + np.abs(op.g_nodal).max(initial=0.0) + 1.0)
    for _ in range(2):  # iterative refinement down to the contract tolerance
        r = op.A_int @ x - rhs
        if np.abs(r).max(initial=0.0) <= 1e-12 * scale:
            break
        x = x - lu.solve(r)
    values = np.concatenate([x, op.g_nodal])
    return NodalFunction(op.lattice, values)


@dataclass
class PositiveTypeReport:
    """Outcome of the nonnegativity / discrete-ellipticity check."""

    ok: bool
    min_weight: float
    worst_node: int
    lambda0h_min: float
    messages: list

    def __bool__(self):
        return self.ok


def check_positive_type(op: PositiveLinearOperator, tol: float = 0.0) -> PositiveTypeReport:
    """Verify a_y(z) >= 0 everywhere and a positive orthogonal pair per node."""
    wt = op.weight_table
    msgs = []
    min_w = float(wt.min()) if wt.size else 0.0
    worst = int(np.unravel_index(np.argmin(wt), wt.shape)[0]) if wt.size else -1
    ok = min_w >= -abs(tol)
    if not ok:
        msgs.append(f"negative stencil weight {min_w:.3e} at node {worst}")
    lam_min = np.inf
    for i in range(wt.shape[0]):
        lam = _orthogonal_pair_bound(op.directions, wt[i])
        lam_min = min(lam_min, lam)
        if lam <= 0:
            ok = False
            msgs.append(f"no positive orthogonal pair at node {i}")
            break
    return PositiveTypeReport(ok, min_w, worst, float(lam_min), msgs)
