"""Low-level polygon kernels for nodal subdifferentials.

The subdifferential of a nodal function at a node z is the convex polygon
{p : p.(x_j - z) <= v_j - v(z) over all nodes x_j}; everything here reduces
to clipping a large box by those half-planes.  The kernels are numba-jitted
because the Monge-Ampere solvers evaluate millions of small clips.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MAX_VERTS = 512


@njit(cache=True)
def clip_halfplanes(dirs, offs, big):
    """Intersect {p : p . dirs[k] <= offs[k]} starting from the box [-big, big]^2.

    Constraints are processed in order of increasing offs/|dirs| so that the
    tight planes clip first and the intermediate polygon stays small.
    Returns (verts, nv, hit_box); ``hit_box`` flags a result still touching
    the artificial starting box (caller should retry with a larger box).
    """
    n = dirs.shape[0]
    ratio = np.empty(n)
    for k in range(n):
        dlen = (dirs[k, 0] ** 2 + dirs[k, 1] ** 2) ** 0.5
        ratio[k] = offs[k] / dlen if dlen > 0 else 1e300
    order = np.argsort(ratio)

    verts = np.empty((MAX_VERTS, 2))
    verts[0, 0] = -big
    verts[0, 1] = -big
    verts[1, 0] = big
    verts[1, 1] = -big
    verts[2, 0] = big
    verts[2, 1] = big
    verts[3, 0] = -big
    verts[3, 1] = big
    nv = 4

    new_verts = np.empty((MAX_VERTS, 2))
    s = np.empty(MAX_VERTS)

    for kk in range(n):
        k = order[kk]
        if nv == 0:
            break
        dx = dirs[k, 0]
        dy = dirs[k, 1]
        c = offs[k]
        tol = 1e-14 * (abs(c) + 1.0)
        inside_all = True
        outside_all = True
        for i in range(nv):
            s[i] = verts[i, 0] * dx + verts[i, 1] * dy - c
            if s[i] > tol:
                inside_all = False
            if s[i] < -tol:
                outside_all = False
        if inside_all:
            continue
        if outside_all:
            return verts, 0, False
        m = 0
        for i in range(nv):
            j = i + 1 if i + 1 < nv else 0
            si = s[i]
            sj = s[j]
            if si <= tol:
                if m >= MAX_VERTS:
                    return verts, 0, True
                new_verts[m, 0] = verts[i, 0]
                new_verts[m, 1] = verts[i, 1]
                m += 1
            if (si < -tol and sj > tol) or (si > tol and sj < -tol):
                if m >= MAX_VERTS:
                    return verts, 0, True
                t = si / (si - sj)
                new_verts[m, 0] = verts[i, 0] + t * (verts[j, 0] - verts[i, 0])
                new_verts[m, 1] = verts[i, 1] + t * (verts[j, 1] - verts[i, 1])
                m += 1
        nv = m
        for i in range(nv):
            verts[i, 0] = new_verts[i, 0]
            verts[i, 1] = new_verts[i, 1]
        if nv < 3:
            return verts, 0, False

    hit_box = False
    for i in range(nv):
        if abs(verts[i, 0]) >= big * (1 - 1e-9) or abs(verts[i, 1]) >= big * (1 - 1e-9):
            hit_box = True
            break
    return verts, nv, hit_box


@njit(cache=True)
def polygon_area(verts, nv):
    if nv < 3:
        return 0.0
    a = 0.0
    for i in range(nv):
        j = i + 1 if i + 1 < nv else 0
        a += verts[i, 0] * verts[j, 1] - verts[j, 0] * verts[i, 1]
    return 0.5 * abs(a)


@njit(cache=True)
def _edge_constraints(verts, nv, dirs, offs, scale):
    """Match each polygon edge to the constraint whose line carries it.

    Returns (edge_k, edge_len, ne): per edge the constraint index (or -1 for
    an edge of the starting box) and the edge length.
    """
    edge_k = np.full(nv, -1, np.int64)
    edge_len = np.zeros(nv)
    for e in range(nv):
        f = e + 1 if e + 1 < nv else 0
        ex = verts[f, 0] - verts[e, 0]
        ey = verts[f, 1] - verts[e, 1]
        elen = (ex * ex + ey * ey) ** 0.5
        edge_len[e] = elen
        if elen <= 0.0:
            continue
        mx = 0.5 * (verts[e, 0] + verts[f, 0])
        my = 0.5 * (verts[e, 1] + verts[f, 1])
        best = -1
        best_gap = 1e300
        for k in range(dirs.shape[0]):
            dlen = (dirs[k, 0] ** 2 + dirs[k, 1] ** 2) ** 0.5
            if dlen <= 0.0:
                continue
            gap = abs(mx * dirs[k, 0] + my * dirs[k, 1] - offs[k]) / dlen
            # the edge direction must be orthogonal to the constraint normal
            cross = abs(ex * dirs[k, 0] + ey * dirs[k, 1]) / (elen * dlen)
            if gap < best_gap and gap <= 1e-9 * scale and cross <= 1e-9:
                best_gap = gap
                best = k
        edge_k[e] = best
    return edge_k, edge_len, nv


@njit(cache=True)
def measures_and_edges(points, values, targets, cand_idx, cand_ptr, big, want_edges):
    """Subdifferential measures (and edge sensitivities) for a batch of nodes.

    For target t = targets[i], constraints come from the node list
    cand_idx[cand_ptr[i]:cand_ptr[i+1]].  When ``want_edges``, the kernel also
    reports, per polygon edge, the supporting candidate node j and
    d(area)/d(value at j) = edge_length / |x_j - z|.

    Returns (areas, flags, edge_node, edge_sens, edge_ptr, verts_flat, verts_ptr).
    """
    nt = len(targets)
    areas = np.zeros(nt)
    flags = np.zeros(nt, np.bool_)
    maxc = 0
    for i in range(nt):
        c = cand_ptr[i + 1] - cand_ptr[i]
        if c > maxc:
            maxc = c
    dirs = np.empty((maxc, 2))
    offs = np.empty(maxc)
    cids = np.empty(maxc, np.int64)

    edge_node = np.empty(64 * nt + 64, np.int64)
    edge_sens = np.empty(64 * nt + 64)
    edge_ptr = np.zeros(nt + 1, np.int64)
    verts_flat = np.empty((24 * nt + 24, 2))
    verts_ptr = np.zeros(nt + 1, np.int64)

    epos = 0
    vpos = 0
    for i in range(nt):
        t = targets[i]
        zx = points[t, 0]
        zy = points[t, 1]
        vz = values[t]
        n = 0
        scale = 1.0
        for k in range(cand_ptr[i], cand_ptr[i + 1]):
            j = cand_idx[k]
            if j == t:
                continue
            dx = points[j, 0] - zx
            dy = points[j, 1] - zy
            if dx == 0.0 and dy == 0.0:
                continue
            dirs[n, 0] = dx
            dirs[n, 1] = dy
            offs[n] = values[j] - vz
            cids[n] = j
            if abs(offs[n]) > scale:
                scale = abs(offs[n])
            n += 1
        verts, nv, hit = clip_halfplanes(dirs[:n], offs[:n], big)
        areas[i] = polygon_area(verts, nv)
        flags[i] = hit
        if nv >= 3:
            for e in range(nv):
                if vpos < verts_flat.shape[0]:
                    verts_flat[vpos, 0] = verts[e, 0]
                    verts_flat[vpos, 1] = verts[e, 1]
                    vpos += 1
                else:
                    flags[i] = True
        verts_ptr[i + 1] = vpos
        if want_edges and nv >= 3:
            edge_k, edge_len, ne = _edge_constraints(verts, nv, dirs[:n], offs[:n], scale)
            for e in range(ne):
                k = edge_k[e]
                if k < 0 or edge_len[e] <= 0.0:
                    continue
                dlen = (dirs[k, 0] ** 2 + dirs[k, 1] ** 2) ** 0.5
                if epos < edge_node.shape[0]:
                    edge_node[epos] = cids[k]
                    edge_sens[epos] = edge_len[e] / dlen
                    epos += 1
                else:
                    flags[i] = True
        edge_ptr[i + 1] = epos
    return areas, flags, edge_node[:epos], edge_sens[:epos], edge_ptr, verts_flat[:vpos], verts_ptr


@njit(cache=True)
def measure_at_value(points, values, t, cand_idx, trial_value, big):
    """Measure at node t with its own value replaced by ``trial_value``."""
    zx = points[t, 0]
    zy = points[t, 1]
    n = 0
    m = len(cand_idx)
    dirs = np.empty((m, 2))
    offs = np.empty(m)
    for k in range(m):
        j = cand_idx[k]
        if j == t:
            continue
        dx = points[j, 0] - zx
        dy = points[j, 1] - zy
        if dx == 0.0 and dy == 0.0:
            continue
        dirs[n, 0] = dx
        dirs[n, 1] = dy
        offs[n] = values[j] - trial_value
        n += 1
    verts, nv, hit = clip_halfplanes(dirs[:n], offs[:n], big)
    return polygon_area(verts, nv), hit


@njit(cache=True)
def support_value(points, values, t, cand_idx):
    """Value of the lower convex hull of the other candidate nodes at x_t.

    Equivalently the largest trial value of v(t) for which the
    subdifferential at t is still nonempty (binary search on emptiness).
    """
    m = len(cand_idx)
    lo = 1e300
    hi = -1e300
    for k in range(m):
        j = cand_idx[k]
        if j == t:
            continue
        if values[j] < lo:
            lo = values[j]
        if values[j] > hi:
            hi = values[j]
    span = hi - lo + 1.0
    lo = lo - span
    hi = hi + span
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        # a nonempty polygon (even of measure zero) means a supporting plane exists
        if _nonempty(points, values, t, cand_idx, mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * span:
            break
    return lo


@njit(cache=True)
def _nonempty(points, values, t, cand_idx, trial_value, big=1e6):
    zx = points[t, 0]
    zy = points[t, 1]
    m = len(cand_idx)
    dirs = np.empty((m, 2))
    offs = np.empty(m)
    n = 0
    for k in range(m):
        j = cand_idx[k]
        if j == t:
            continue
        dx = points[j, 0] - zx
        dy = points[j, 1] - zy
        if dx == 0.0 and dy == 0.0:
            continue
        dirs[n, 0] = dx
        dirs[n, 1] = dy
        offs[n] = values[j] - trial_value
        n += 1
    verts, nv, hit = clip_halfplanes(dirs[:n], offs[:n], big)
    return nv >= 3


@njit(cache=True)
def violations(points, values, targets, verts_flat, verts_ptr, tol, allowed):
    """Node constraints that cut an already-computed polygon.

    Reports pairs (i, j): constraint of node j (with allowed[j]) is violated
    by the polygon of targets[i] by more than tol.  Used to verify
    window-local subdifferential computations against the full node set.
    """
    out_i = []
    out_j = []
    n_nodes = points.shape[0]
    for i in range(len(targets)):
        t = targets[i]
        a = verts_ptr[i]
        b = verts_ptr[i + 1]
        if b - a < 3:
            continue
        zx = points[t, 0]
        zy = points[t, 1]
        vz = values[t]
        for j in range(n_nodes):
            if j == t or not allowed[j]:
                continue
            dx = points[j, 0] - zx
            dy = points[j, 1] - zy
            c = values[j] - vz
            worst = -1e300
            for p in range(a, b):
                s = verts_flat[p, 0] * dx + verts_flat[p, 1] * dy - c
                if s > worst:
                    worst = s
            if worst > tol:
                out_i.append(i)
                out_j.append(j)
    res_i = np.empty(len(out_i), np.int64)
    res_j = np.empty(len(out_j), np.int64)
    for k in range(len(out_i)):
        res_i[k] = out_i[k]
        res_j[k] = out_j[k]
    return res_i, res_j
