"""Three Monge-Ampere discretizations and their nonlinear solvers.

* OP: the subdifferential (Alexandrov) scheme |del u_h(z_i)| = f_i, solved by
  damped semismooth Newton on the measure map (nodes with zero mass are
  eliminated and recovered from the envelope), with the classical monotone
  Gauss-Seidel relaxation available as ``method="gauss-seidel"``.
* BCM: the superbasis scheme min_y gamma(D+_{y0}, D+_{y1}, D+_{y2}) = f,
  solved by semismooth Newton (per-node policy = argmin superbasis and
  active gamma branch) or nodewise bisection sweeps.
* FJ: the semi-Lagrangian HJB reformulation with rotated-eigenframe controls
  of unit trace, solved by Howard's policy iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import ConvexHull

from . import bellman, convexity
from .errors import (
    EmptyControlSet,
    NoConvergence,
    NoConvexSubsolution,
    SingularSystem,
)
from .lattice import Lattice, NodalFunction, enumerate_superbases

log = logging.getLogger("ellipsol")


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------
class MAProblem:
    """det(D^2 u) = f with Dirichlet data g, posed through per-node masses.

    masses[i] = integral of f over the cell of interior node i; point masses
    are assigned directly to nodes.  ``g`` must be callable (it is evaluated
    at boundary exit points of wide stencils).
    """

    def __init__(self, lattice: Lattice, g, density=None, masses=None, point_masses=None,
                 quadrature: str = "centroid"):
        self.lattice = lattice
        self.g_fn = g if callable(g) else (lambda p, c=float(g): c)
        self.density_fn = density
        ni = lattice.n_interior
        if masses is not None:
            f_i = np.asarray(masses, float).copy()
        elif density is not None:
            f_i = self._quadrature_masses(density, quadrature)
        else:
            f_i = np.zeros(ni)
        if point_masses:
            for node, mass in point_masses:
                f_i[int(node)] += float(mass)
        if np.any(f_i < 0):
            raise ValueError("masses must be nonnegative")
        if not np.all(np.isfinite(f_i)):
            raise ValueError("masses must be finite")
        self.masses = f_i
        self.g_nodal = np.array([self.g_fn(p) for p in lattice.boundary_points()], float)

    def _quadrature_masses(self, density, quadrature: str) -> np.ndarray:
        lat = self.lattice
        pts = lat.interior_points()
        if quadrature == "centroid":
            vals = np.array([density(p) for p in pts], float)
            return vals * lat.cell_measures
        if quadrature == "subgrid":
            # 3x3 midpoint refinement of the (unclipped) cell
            f_i = np.zeros(lat.n_interior)
            offs = (np.arange(3) - 1.0) / 3.0 * lat.h
            for i, z in enumerate(pts):
                acc = 0.0
                for ax in offs:
                    for ay in offs:
                        acc += density(z + np.array([ax, ay]))
                f_i[i] = acc / 9.0 * lat.cell_measures[i]
            return f_i
        raise ValueError(f"unknown quadrature '{quadrature}'")

    def density_at_nodes(self) -> np.ndarray:
        """Pointwise density at interior nodes (masses / cell measure fallback)."""
        if self.density_fn is not None:
            return np.array([self.density_fn(p) for p in self.lattice.interior_points()], float)
        return self.masses / self.lattice.cell_measures

    def scale(self) -> float:
        return 1.0 + float(np.abs(self.masses).max(initial=0.0)) / min(
            1.0, float(self.lattice.cell_measures.min())
        )


def _check_convex_extendable(problem: MAProblem) -> None:
    """Boundary data must lie on the lower hull of its own lifted graph."""
    lat = problem.lattice
    pts = lat.boundary_points()
    vals = problem.g_nodal
    if len(pts) < 3:
        return
    scale = max(1.0, float(np.ptp(vals)))
    lifted = np.column_stack([pts, vals])
    try:
        hull = ConvexHull(lifted, qhull_options="Qt")
    except Exception:
        return  # affine data: trivially extendable
    lower = hull.equations[:, 2] < -1e-12
    if not lower.any():
        return
    eqs = hull.equations[lower]
    env = np.full(len(pts), -np.inf)
    for nx, ny, nz, off in eqs:
        env = np.maximum(env, (-off - nx * pts[:, 0] - ny * pts[:, 1]) / nz)
    if np.any(vals - env > 1e-9 * scale):
        raise NoConvexSubsolution("boundary data admits no convex extension")


# ---------------------------------------------------------------------------
# OP scheme
# ---------------------------------------------------------------------------
def op_residual(problem: MAProblem, u_h: NodalFunction) -> NodalFunction:
    """|del u_h(z_i)| - f_i on interior nodes, u - g on boundary nodes."""
    lat = problem.lattice
    ws = convexity.MeasureWorkspace(lat)
    areas = ws.exact_measures(u_h.values)
    out = np.empty(lat.n_nodes)
    out[: lat.n_interior] = areas - problem.masses
    out[lat.n_interior :] = u_h.boundary - problem.g_nodal
    return NodalFunction(lat, out)


def _paraboloid_init(problem: MAProblem, ws, positive, values) -> np.ndarray:
    """Steep convex paraboloid K(|x|^2 - R^2) + min g with K doubled until
    every positive-mass node holds more measure than its target."""
    lat = problem.lattice
    bpts = lat.boundary_points()
    R2 = float((bpts**2).sum(axis=1).max())
    gmin = float(problem.g_nodal.min())
    r2 = (lat.interior_points() ** 2).sum(axis=1)
    K = 0.5
    for _ in range(70):
        values[: lat.n_interior] = K * (r2 - R2) + gmin
        areas = ws.measures(values)
        if np.all(areas > problem.masses[positive]):
            return values
        K *= 2.0
    raise NoConvexSubsolution("could not find a convex strict subsolution")


def _envelope_extend(lat: Lattice, values: np.ndarray, active: np.ndarray, targets: np.ndarray) -> None:
    """Replace values at ``targets`` by the lower hull of the active nodes."""
    pts = lat.points[active]
    vals = values[active]
    lifted = np.column_stack([pts, vals])
    hull = ConvexHull(lifted, qhull_options="Qt")
    lower = hull.equations[:, 2] < -1e-12
    eqs = hull.equations[lower]
    q = lat.points[targets]
    env = np.full(len(targets), -np.inf)
    for nx, ny, nz, off in eqs:
        env = np.maximum(env, (-off - nx * q[:, 0] - ny * q[:, 1]) / nz)
    values[targets] = env


def op_solve(
    problem: MAProblem,
    x0: NodalFunction | None = None,
    method: str = "newton",
    rtol: float = 1e-8,
    max_newton: int = 200,
    max_sweeps: int = 10**5,
) -> NodalFunction:
    """Solve the subdifferential scheme |del u_h(z_i)| = f_i, u = g on the boundary.

    Newton mode: damped semismooth Newton on the measure map over the
    positive-mass nodes (edge lengths of the subdifferential polygons give
    the generalized Jacobian), zero-mass nodes recovered from the envelope.
    Gauss-Seidel mode: nodewise monotone bisection sweeps.
    """
    lat = problem.lattice
    _check_convex_extendable(problem)
    ni = lat.n_interior
    masses = problem.masses
    positive = np.flatnonzero(masses > 0)
    zero = np.flatnonzero(masses <= 0)
    tol_i = rtol * np.maximum(masses[positive], lat.h**2)

    active = np.ones(lat.n_nodes, bool)
    active[zero] = False  # zero-mass nodes ride the envelope afterwards

    values = np.empty(lat.n_nodes)
    values[ni:] = problem.g_nodal

    if len(positive) == 0:
        if len(zero):
            _envelope_extend(lat, values, active, zero)
        return NodalFunction(lat, values)

    ws = convexity.MeasureWorkspace(lat, targets=positive, window=3, active_mask=active)

    if x0 is not None:
        values[:ni] = x0.interior
        areas = ws.measures(values)
        if not np.all(areas > 0):
            _paraboloid_init(problem, ws, positive, values)
    else:
        _paraboloid_init(problem, ws, positive, values)

    if method == "gauss-seidel":
        _op_gauss_seidel(problem, ws, positive, zero, values, tol_i, max_sweeps, active)
        return NodalFunction(lat, values)
    if method != "newton":
        raise ValueError(f"unknown method '{method}'")

    pos_of = np.full(lat.n_nodes, -1, np.int64)
    pos_of[positive] = np.arange(len(positive))
    n = len(positive)
    it = 0
    while it < max_newton:
        it += 1
        areas, (enode, esens, eptr) = ws.measures(values, want_edges=True)
        r = areas - masses[positive]
        if np.all(np.abs(r) <= tol_i):
            if ws.verify(values) == 0:
                break
            continue  # grew candidates; recompute
        counts = np.diff(eptr)
        rows_all = np.repeat(np.arange(n), counts)
        diag = np.zeros(n)
        np.subtract.at(diag, rows_all, esens)
        cols_all = pos_of[enode]
        keep = cols_all >= 0
        J = (
            sp.coo_matrix(
                (esens[keep], (rows_all[keep], cols_all[keep])), shape=(n, n)
            ).tocsc()
            + sp.diags(diag)
        )
        try:
            delta = spla.spsolve(J.tocsc(), -r)
        except Exception:
            delta = None
        stepped = False
        if delta is not None and np.all(np.isfinite(delta)):
            rn0 = float(np.abs(r / np.maximum(tol_i, 1e-300)).max())
            tau = 1.0
            for _ in range(16):
                trial = values.copy()
                trial[positive] += tau * delta
                areas_t = ws.measures(trial)
                ok_pos = np.all(areas_t > 0)
                rn1 = float(
                    np.abs((areas_t - masses[positive]) / np.maximum(tol_i, 1e-300)).max()
                )
                if ok_pos and rn1 < rn0:
                    values = trial
                    stepped = True
                    break
                tau *= 0.5
        if not stepped:
            # fall back to a monotone relaxation sweep, then retry Newton
            _op_sweep_once(problem, ws, positive, values)
    else:
        raise NoConvergence(f"OP Newton cap {max_newton} reached")

    if len(zero):
        _envelope_extend(lat, values, active, zero)
    log.debug("op_solve: %d Newton iterations, %d positive-mass nodes", it, n)
    return NodalFunction(lat, values)


def _bisect_node(ws, values, pos, target, lo, hi, tol):
    """Monotone bisection: measure at node is strictly decreasing in its value."""
    a_lo = ws.measure_at(values, pos, lo)
    if a_lo < target:
        # widen downward until enough measure is available
        span = max(hi - lo, 1.0)
        for _ in range(60):
            lo -= span
            span *= 2.0
            if ws.measure_at(values, pos, lo) >= target:
                break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ws.measure_at(values, pos, mid) >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    return lo


def _op_sweep_once(problem, ws, positive, values):
    lat = problem.lattice
    masses = problem.masses
    for pos in range(len(positive)):
        i = positive[pos]
        target = masses[i]
        hull_val = ws.support_at(values, pos)
        values[i] = _bisect_node(
            ws, values, pos, target, values[i], hull_val, 1e-13 * (abs(hull_val) + 1.0)
        )


def _op_gauss_seidel(problem, ws, positive, zero, values, tol_i, max_sweeps, active):
    lat = problem.lattice
    for sweep in range(max_sweeps):
        old = values[positive].copy()
        _op_sweep_once(problem, ws, positive, values)
        change = float(np.abs(values[positive] - old).max(initial=0.0))
        if change <= 1e-10:
            areas = ws.measures(values)
            if np.all(np.abs(areas - problem.masses[positive]) <= tol_i) and ws.verify(values) == 0:
                if len(zero):
                    _envelope_extend(lat, values, active, zero)
                return
    raise NoConvergence(f"OP Gauss-Seidel cap {max_sweeps} reached")


# ---------------------------------------------------------------------------
# BCM scheme
# ---------------------------------------------------------------------------
def bcm_gamma(d0: float, d1: float, d2: float) -> float:
    """Branch formula: product when one argument dominates the other two."""
    if d0 >= d1 + d2:
        return d1 * d2
    if d1 >= d2 + d0:
        return d2 * d0
    if d2 >= d0 + d1:
        return d0 * d1
    return 0.5 * (d0 * d1 + d1 * d2 + d0 * d2) - 0.25 * (d0 * d0 + d1 * d1 + d2 * d2)


def _gamma_vec(D: np.ndarray) -> np.ndarray:
    """Vectorized gamma over rows of D (shape (..., 3))."""
    d0, d1, d2 = D[..., 0], D[..., 1], D[..., 2]
    g1 = 0.5 * (d0 * d1 + d1 * d2 + d0 * d2) - 0.25 * (d0**2 + d1**2 + d2**2)
    out = np.where(d0 >= d1 + d2, d1 * d2, g1)
    out = np.where(d1 >= d2 + d0, d2 * d0, out)
    out = np.where(d2 >= d0 + d1, d0 * d1, out)
    return out


@dataclass
class _DirTable:
    """Per-direction second-difference data over interior nodes."""

    idx_p: np.ndarray
    idx_m: np.ndarray
    g_p: np.ndarray
    g_m: np.ndarray
    c_p: np.ndarray
    c_m: np.ndarray


def _direction_table(lat: Lattice, y, g_fn) -> _DirTable:
    ni = lat.n_interior
    idx_p = np.full(ni, -1, np.int64)
    idx_m = np.full(ni, -1, np.int64)
    g_p = np.zeros(ni)
    g_m = np.zeros(ni)
    kp = np.full(ni, lat.h)
    km = np.full(ni, lat.h)
    for i in range(ni):
        rp = lat.step(i, y)
        rm = lat.step(i, (-y[0], -y[1]))
        if rp[0] == "node":
            idx_p[i] = rp[1]
        else:
            kp[i] = max(rp[1], 1e-12 * lat.h)
            g_p[i] = g_fn(rp[2])
        if rm[0] == "node":
            idx_m[i] = rm[1]
        else:
            km[i] = max(rm[1], 1e-12 * lat.h)
            g_m[i] = g_fn(rm[2])
    c_p = 2.0 / ((kp + km) * kp)
    c_m = 2.0 / ((kp + km) * km)
    return _DirTable(idx_p, idx_m, g_p, g_m, c_p, c_m)


class BcmOperator:
    """Precomputed superbasis second-difference tables for one lattice."""

    def __init__(self, problem: MAProblem, m: int = 1):
        self.problem = problem
        self.lattice = problem.lattice
        self.superbases = enumerate_superbases(m)
        dirs = {}
        for sb in self.superbases:
            for y in sb:
                dirs.setdefault(tuple(y), None)
        self.directions = list(dirs.keys())
        self._dir_pos = {y: k for k, y in enumerate(self.directions)}
        self.tables = [
            _direction_table(self.lattice, y, problem.g_fn) for y in self.directions
        ]
        self.sb_dir = np.array(
            [[self._dir_pos[tuple(y)] for y in sb] for sb in self.superbases], int
        )
        self.density = problem.density_at_nodes()

    def second_differences(self, u: np.ndarray) -> np.ndarray:
        """d2[k, i] for every direction k and interior node i."""
        ni = self.lattice.n_interior
        out = np.empty((len(self.directions), ni))
        uz = u[:ni]
        for k, tb in enumerate(self.tables):
            up = np.where(tb.idx_p >= 0, u[np.maximum(tb.idx_p, 0)], tb.g_p)
            um = np.where(tb.idx_m >= 0, u[np.maximum(tb.idx_m, 0)], tb.g_m)
            out[k] = tb.c_p * (up - uz) + tb.c_m * (um - uz)
        return out

    def residual_interior(self, u: np.ndarray):
        """min over superbases of gamma(clamped triple) - density, plus argmin data."""
        d2 = self.second_differences(u)
        clamped = np.maximum(d2, 0.0)
        triples = clamped[self.sb_dir, :]  # (n_sb, 3, ni)
        gam = _gamma_vec(np.moveaxis(triples, 1, -1))  # (n_sb, ni)
        best = gam.argmin(axis=0)
        res = gam[best, np.arange(gam.shape[1])] - self.density
        return res, best, d2, clamped


def bcm_residual(problem: MAProblem, u_h: NodalFunction, m: int = 1,
                 operator: BcmOperator | None = None) -> NodalFunction:
    """min_y gamma(D+ triple) - f(z) on interior nodes; u - g on the boundary."""
    op = BcmOperator(problem, m) if operator is None else operator
    res, _, _, _ = op.residual_interior(u_h.values)
    lat = problem.lattice
    out = np.empty(lat.n_nodes)
    out[: lat.n_interior] = res
    out[lat.n_interior :] = u_h.boundary - problem.g_nodal
    return NodalFunction(lat, out)


def bcm_solve(
    problem: MAProblem,
    m: int = 1,
    method: str = "newton",
    rtol: float = 1e-8,
    x0: NodalFunction | None = None,
    max_newton: int = 400,
    max_sweeps: int = 10**5,
) -> NodalFunction:
    """Solve the superbasis scheme min_y gamma(D+ triples) = f(z).

    Newton mode is a semismooth iteration: per node the argmin superbasis and
    active gamma branch select a positive-type linearization (an M-matrix
    after negation); damping retries with halved steps on residual growth.
    Gauss-Seidel mode is the nodewise monotone bisection of the scheme.
    """
    lat = problem.lattice
    op = BcmOperator(problem, m)
    ni = lat.n_interior
    scale = 1.0 + float(np.abs(op.density).max(initial=0.0))
    tol = rtol * scale

    values = np.empty(lat.n_nodes)
    values[ni:] = problem.g_nodal
    if x0 is not None:
        values[:ni] = x0.interior
    else:
        bpts = lat.boundary_points()
        R2 = float((bpts**2).sum(axis=1).max())
        r2 = (lat.interior_points() ** 2).sum(axis=1)
        K = 0.5 + float(np.sqrt(op.density.max(initial=0.0)))
        values[:ni] = K * (r2 - R2) + float(problem.g_nodal.min())

    if method == "gauss-seidel":
        return _bcm_gauss_seidel(problem, op, values, tol, max_sweeps)
    if method != "newton":
        raise ValueError(f"unknown method '{method}'")

    eps_w = 1e-8
    res, best, d2, clamped = op.residual_interior(values)
    rn0 = float(np.abs(res).max())
    for it in range(max_newton):
        if rn0 <= tol:
            break
        rows, cols, vals_j = [], [], []
        diag = np.zeros(ni)
        # assemble the selected linearization row by row (vectorized per direction)
        sel = op.sb_dir[best]  # (ni, 3)
        t0 = clamped[sel[:, 0], np.arange(ni)]
        t1 = clamped[sel[:, 1], np.arange(ni)]
        t2 = clamped[sel[:, 2], np.arange(ni)]
        w = np.empty((ni, 3))
        prod0 = t0 >= t1 + t2
        prod1 = t1 >= t2 + t0
        prod2 = t2 >= t0 + t1
        g1 = ~(prod0 | prod1 | prod2)
        w[:, 0] = np.where(prod0, 0.0, np.where(prod1, t2, np.where(prod2, t1, 0.0)))
        w[:, 1] = np.where(prod0, t2, np.where(prod1, 0.0, np.where(prod2, t0, 0.0)))
        w[:, 2] = np.where(prod0, t1, np.where(prod1, t0, np.where(prod2, 0.0, 0.0)))
        w[g1, 0] = 0.5 * (t1[g1] + t2[g1] - t0[g1])
        w[g1, 1] = 0.5 * (t2[g1] + t0[g1] - t1[g1])
        w[g1, 2] = 0.5 * (t0[g1] + t1[g1] - t2[g1])
        # clamp chain rule and degenerate-row regularization
        act = np.empty((ni, 3))
        for c in range(3):
            act[:, c] = d2[sel[:, c], np.arange(ni)] >= 0.0
        w = np.maximum(w * act, 0.0)
        dead = w.sum(axis=1) <= eps_w * scale
        w[dead] = eps_w * scale  # keep the M-matrix irreducible where gamma flattens
        idx = np.arange(ni)
        for c in range(3):
            kdir = sel[:, c]
            wc = w[:, c]
            for k in range(len(op.directions)):
                tb = op.tables[k]
                mask = kdir == k
                if not mask.any():
                    continue
                ii = idx[mask]
                wci = wc[mask]
                diag[ii] -= wci * (tb.c_p[ii] + tb.c_m[ii])
                pj = tb.idx_p[ii]
                ok = (pj >= 0) & (pj < ni)
                rows.extend(ii[ok])
                cols.extend(pj[ok])
                vals_j.extend(wci[ok] * tb.c_p[ii][ok])
                mj = tb.idx_m[ii]
                ok = (mj >= 0) & (mj < ni)
                rows.extend(ii[ok])
                cols.extend(mj[ok])
                vals_j.extend(wci[ok] * tb.c_m[ii][ok])
        J = sp.coo_matrix((vals_j, (rows, cols)), shape=(ni, ni)).tocsc() + sp.diags(diag)
        try:
            delta = spla.spsolve(J, -res)
        except Exception as exc:
            raise SingularSystem(str(exc)) from exc
        tau = 1.0
        stepped = False
        for _ in range(20):
            trial = values.copy()
            trial[:ni] += tau * delta
            res_t, best_t, d2_t, clamped_t = op.residual_interior(trial)
            rn1 = float(np.abs(res_t).max())
            if rn1 < rn0 or rn1 <= tol:
                values, res, best, d2, clamped, rn0 = trial, res_t, best_t, d2_t, clamped_t, rn1
                stepped = True
                break
            tau *= 0.5
        if not stepped:
            values = _bcm_sweep_once(problem, op, values)
            res, best, d2, clamped = op.residual_interior(values)
            rn0 = float(np.abs(res).max())
    else:
        raise NoConvergence(f"BCM Newton cap {max_newton} reached")
    return NodalFunction(lat, values)


def _bcm_node_residual(op: BcmOperator, values, i: int, trial: float) -> float:
    old = values[i]
    values[i] = trial
    d2 = np.empty(3)
    best = np.inf
    for sb_pos in range(op.sb_dir.shape[0]):
        for c in range(3):
            tb = op.tables[op.sb_dir[sb_pos, c]]
            up = values[tb.idx_p[i]] if tb.idx_p[i] >= 0 else tb.g_p[i]
            um = values[tb.idx_m[i]] if tb.idx_m[i] >= 0 else tb.g_m[i]
            d2[c] = tb.c_p[i] * (up - trial) + tb.c_m[i] * (um - trial)
        g = bcm_gamma(max(d2[0], 0.0), max(d2[1], 0.0), max(d2[2], 0.0))
        if g < best:
            best = g
    values[i] = old
    return best - op.density[i]


def _bcm_sweep_once(problem: MAProblem, op: BcmOperator, values: np.ndarray) -> np.ndarray:
    """One Gauss-Seidel sweep: per node, bisection on the monotone scalar map."""
    lat = problem.lattice
    ni = lat.n_interior
    h = lat.h
    for i in range(ni):
        lo = values[i]
        r_lo = _bcm_node_residual(op, values, i, lo)
        span = h * h
        if r_lo < 0.0:
            for _ in range(80):
                lo -= span
                span *= 2
                if _bcm_node_residual(op, values, i, lo) >= 0.0:
                    break
        hi = values[i]
        span = h * h
        if _bcm_node_residual(op, values, i, hi) > 0.0:
            for _ in range(80):
                hi += span
                span *= 2
                if _bcm_node_residual(op, values, i, hi) <= 0.0:
                    break
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if _bcm_node_residual(op, values, i, mid) >= 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-14 * (1.0 + abs(mid)):
                break
        values[i] = 0.5 * (lo + hi)
    return values


def _bcm_gauss_seidel(problem, op, values, tol, max_sweeps) -> NodalFunction:
    lat = problem.lattice
    for sweep in range(max_sweeps):
        old = values[: lat.n_interior].copy()
        values = _bcm_sweep_once(problem, op, values)
        change = float(np.abs(values[: lat.n_interior] - old).max(initial=0.0))
        if change <= 1e-10:
            res, _, _, _ = op.residual_interior(values)
            if np.abs(res).max() <= tol:
                return NodalFunction(lat, values)
    raise NoConvergence(f"BCM Gauss-Seidel cap {max_sweeps} reached")


# ---------------------------------------------------------------------------
# FJ scheme (semi-Lagrangian HJB reformulation)
# ---------------------------------------------------------------------------
@dataclass
class FjControlSet:
    """Rotated-eigenframe SPD controls of unit trace: B = Y diag(l, 1-l) Y^T."""

    n_theta: int = 16
    n_lambda: int = 16
    controls: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_theta < 1 or self.n_lambda < 2:
            raise EmptyControlSet("need n_theta >= 1 and n_lambda >= 2")
        seen = set()
        for j in range(self.n_theta):
            th = j * math.pi / self.n_theta
            c, s = math.cos(th), math.sin(th)
            for lam1 in np.linspace(0.0, 1.0, self.n_lambda):
                lam2 = 1.0 - lam1
                B = np.array(
                    [
                        [lam1 * c * c + lam2 * s * s, (lam1 - lam2) * c * s],
                        [(lam1 - lam2) * c * s, lam1 * s * s + lam2 * c * c],
                    ]
                )
                key = tuple(np.round(B, 13).ravel())
                if key not in seen:
                    seen.add(key)
                    self.controls.append((th, float(lam1), float(lam2)))
        if not any(abs(l1 - 0.5) < 1e-13 and abs(l2 - 0.5) < 1e-13 for _, l1, l2 in self.controls):
            self.controls.append((0.0, 0.5, 0.5))

    def matrices(self):
        out = []
        for th, l1, l2 in self.controls:
            c, s = math.cos(th), math.sin(th)
            Y = np.array([[c, -s], [s, c]])
            out.append(Y @ np.diag([l1, l2]) @ Y.T)
        return out


def _fj_grid(lat: Lattice):
    """Tensor-grid node map for a divisible box lattice."""
    dom = lat.domain
    if not hasattr(dom, "xmin") or not dom.divisible_by(lat.h):
        raise ValueError("FJ scheme requires a box domain divisible by h")
    h = lat.h
    nx = int(round((dom.xmax - dom.xmin) / h)) + 1
    ny = int(round((dom.ymax - dom.ymin) / h)) + 1
    grid = np.full((nx, ny), -1, np.int64)
    for idx, (x, y) in enumerate(lat.points):
        i = round((x - dom.xmin) / h)
        j = round((y - dom.ymin) / h)
        if abs(x - (dom.xmin + i * h)) <= 1e-9 * h and abs(y - (dom.ymin + j * h)) <= 1e-9 * h:
            if 0 <= i < nx and 0 <= j < ny:
                grid[i, j] = idx
    if (grid < 0).any():
        raise ValueError("lattice does not form a full tensor grid")
    return grid, nx, ny


def _interp_weights(lat: Lattice, grid, nx, ny, p):
    """Bilinear weights of the grid nodes around point p (inside the box)."""
    dom = lat.domain
    h = lat.h
    fx = (p[0] - dom.xmin) / h
    fy = (p[1] - dom.ymin) / h
    i = min(max(int(math.floor(fx)), 0), nx - 2)
    j = min(max(int(math.floor(fy)), 0), ny - 2)
    ax = min(max(fx - i, 0.0), 1.0)
    ay = min(max(fy - j, 0.0), 1.0)
    out = []
    for (di, dj, w) in (
        (0, 0, (1 - ax) * (1 - ay)),
        (1, 0, ax * (1 - ay)),
        (0, 1, (1 - ax) * ay),
        (1, 1, ax * ay),
    ):
        if w != 0.0:
            out.append((grid[i + di, j + dj], w))
    return out


class FjOperator:
    """Per-control sparse semi-Lagrangian operators over a box lattice."""

    def __init__(self, problem: MAProblem, k: float, control_set: FjControlSet):
        if not control_set.controls:
            raise EmptyControlSet("empty FJ control set")
        lat = problem.lattice
        if k <= 0 or lat.h > k + 1e-12:
            raise ValueError("need relaxation scale k > 0 with h <= k")
        self.problem = problem
        self.lattice = lat
        self.k = float(k)
        self.control_set = control_set
        grid, nx, ny = _fj_grid(lat)
        ni = lat.n_interior
        f_vals = problem.density_at_nodes()
        if np.any(f_vals < 0):
            raise ValueError("FJ needs f >= 0")
        self.L = []  # per control: sparse (ni, n_nodes) operator + exit constant
        self.c = []  # per control: f^{1/2} * sqrt(l1 l2)
        dom = lat.domain
        for th, l1, l2 in control_set.controls:
            cth, sth = math.cos(th), math.sin(th)
            ys = [np.array([cth, sth]), np.array([-sth, cth])]
            lams = [l1, l2]
            rows, cols, vals = [], [], []
            const = np.zeros(ni)
            for i in range(ni):
                z = lat.points[i]
                acc_center = 0.0
                for y, lam in zip(ys, lams):
                    if lam == 0.0:
                        continue
                    kp = min(self.k, dom.exit_length(z, y))
                    km = min(self.k, dom.exit_length(z, -y))
                    cp = 2.0 / ((kp + km) * kp)
                    cm = 2.0 / ((kp + km) * km)
                    w = 0.5 * lam  # (1/d) * lambda_i
                    for sign, kk, cc in ((+1, kp, cp), (-1, km, cm)):
                        p = z + sign * kk * y
                        if kk < self.k - 1e-12 * self.k:
                            const[i] += w * cc * problem.g_fn(p)
                        else:
                            for node, wt in _interp_weights(lat, grid, nx, ny, p):
                                rows.append(i)
                                cols.append(node)
                                vals.append(w * cc * wt)
                    acc_center += w * (cp + cm)
                rows.append(i)
                cols.append(i)
                vals.append(-acc_center)
            L = sp.coo_matrix((vals, (rows, cols)), shape=(ni, lat.n_nodes)).tocsr()
            self.L.append((L, const))
            self.c.append(np.sqrt(f_vals) * math.sqrt(l1 * l2))

    def residual(self, u: np.ndarray) -> np.ndarray:
        """max over controls of [-(1/d) sum lam_i d2_{y_i,k} u + f^{1/d} det(D)^{1/d}]."""
        ni = self.lattice.n_interior
        out = np.full(ni, -np.inf)
        for (L, const), c in zip(self.L, self.c):
            np.maximum(out, -(L @ u + const) + c, out=out)
        return out

    def bellman_system(self) -> bellman.BellmanSystem:
        ni = self.lattice.n_interior
        Ks, fs = [], []
        g = self.problem.g_nodal
        for (L, const), c in zip(self.L, self.c):
            L_ii = L[:, :ni]
            L_ib = L[:, ni:]
            Ks.append((-L_ii).tocsr())
            fs.append(np.asarray(L_ib @ g).ravel() + const - c)
        return bellman.BellmanSystem.from_matrices(
            Ks, fs, 1, lattice=self.lattice, g_nodal=g
        )


def fj_residual(problem: MAProblem, u_h: NodalFunction, k: float,
                control_set: FjControlSet, operator: FjOperator | None = None) -> NodalFunction:
    """Semi-Lagrangian HJB residual of the MA reformulation; u - g on the boundary."""
    op = FjOperator(problem, k, control_set) if operator is None else operator
    lat = problem.lattice
    out = np.empty(lat.n_nodes)
    out[: lat.n_interior] = op.residual(u_h.values)
    out[lat.n_interior :] = u_h.boundary - problem.g_nodal
    return NodalFunction(lat, out)


def fj_solve(problem: MAProblem, k: float | None = None,
             control_set: FjControlSet | None = None, tol: float = 1e-10):
    """Solve the FJ discretization by Howard's policy iteration.

    Default relaxation scale k = sqrt(h) (so h/k -> 0 under refinement) and
    the default 16 x 16 control grid.
    """
    if control_set is None:
        control_set = FjControlSet()
    if k is None:
        k = math.sqrt(problem.lattice.h)
    op = FjOperator(problem, k, control_set)
    system = op.bellman_system()
    result = bellman.howard_solve(system, tol=tol)
    u = NodalFunction(
        problem.lattice, np.concatenate([result.x, problem.g_nodal])
    )
    return u, result
