"""Compiled inner loops: exact batched k-NN on a uniform grid."""
from __future__ import annotations

import numba as nb
import numpy as np

_TARGET_PER_CELL = 16.0
_MAX_CELLS_PER_AXIS = 64
# cell-boundary distances are shrunk by this fraction of a cell to absorb rounding
_SLACK = 1e-9


@nb.njit(cache=True, nogil=True, error_model="numpy")
def _insert(best_d, best_i, d, i, k):
    # keep (d, i) lexicographically sorted; caller checked it beats slot k-1
    j = k - 1
    while j > 0 and (best_d[j - 1] > d or (best_d[j - 1] == d and best_i[j - 1] > i)):
        best_d[j] = best_d[j - 1]
        best_i[j] = best_i[j - 1]
        j -= 1
    best_d[j] = d
    best_i[j] = i


@nb.njit(cache=True, nogil=True, error_model="numpy")
def _knn_one(pts, queries, k, out_i, out_d):
    n = pts.shape[0]
    lo = np.empty(3)
    hi = np.empty(3)
    for a in range(3):
        lo[a] = pts[0, a]
        hi[a] = pts[0, a]
    for p in range(n):
        for a in range(3):
            v = pts[p, a]
            if v < lo[a]:
                lo[a] = v
            if v > hi[a]:
                hi[a] = v
    ext = 0.0
    for a in range(3):
        ext = max(ext, hi[a] - lo[a])
    if ext <= 0.0:
        ext = 1.0
    # cubic cells holding ~_TARGET_PER_CELL points on average over the bounding box
    vol = 1.0
    for a in range(3):
        vol *= max(hi[a] - lo[a], ext * 1e-3)
    h = (vol * _TARGET_PER_CELL / n) ** (1.0 / 3.0)
    dims = np.empty(3, np.int64)
    for a in range(3):
        dims[a] = min(_MAX_CELLS_PER_AXIS, max(1, int((hi[a] - lo[a]) / h) + 1))
    hs = np.empty(3)
    for a in range(3):
        hs[a] = max(hi[a] - lo[a], ext * 1e-9) / dims[a]
    ncell = dims[0] * dims[1] * dims[2]
    cell_of = np.empty(n, np.int64)
    counts = np.zeros(ncell + 1, np.int64)
    for p in range(n):
        c = 0
        for a in range(3):
            ci = int((pts[p, a] - lo[a]) / hs[a])
            ci = min(max(ci, 0), dims[a] - 1)
            c = c * dims[a] + ci
        cell_of[p] = c
        counts[c + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    order = np.empty(n, np.int64)
    fill = counts[:-1].copy()
    for p in range(n):
        c = cell_of[p]
        order[fill[c]] = p
        fill[c] += 1
    best_d = np.empty(k)
    best_i = np.empty(k, np.int64)
    c0 = np.empty(3, np.int64)
    outside = np.empty(3)
    for m in range(queries.shape[0]):
        qx, qy, qz = queries[m, 0], queries[m, 1], queries[m, 2]
        for a in range(3):
            ci = int(np.floor((queries[m, a] - lo[a]) / hs[a]))
            c0[a] = min(max(ci, 0), dims[a] - 1)
        for j in range(k):
            best_d[j] = np.inf
            best_i[j] = n
        found = 0
        r = 0
        while True:
            # visit cells at Chebyshev distance exactly r from c0
            for ix in range(max(0, c0[0] - r), min(dims[0] - 1, c0[0] + r) + 1):
                ex = ix == c0[0] - r or ix == c0[0] + r
                for iy in range(max(0, c0[1] - r), min(dims[1] - 1, c0[1] + r) + 1):
                    if ex or iy == c0[1] - r or iy == c0[1] + r:
                        z_lo = max(0, c0[2] - r)
                        z_hi = min(dims[2] - 1, c0[2] + r)
                        z_step = 1
                    else:
                        # interior column: only the two end cells are on the shell
                        z_lo = c0[2] - r
                        z_hi = c0[2] + r
                        z_step = max(2 * r, 1)
                    for iz in range(z_lo, z_hi + 1, z_step):
                        if iz < 0 or iz >= dims[2]:
                            continue
                        c = (ix * dims[1] + iy) * dims[2] + iz
                        if counts[c] == counts[c + 1]:
                            continue
                        gap = 0.0
                        for a, ia in ((0, ix), (1, iy), (2, iz)):
                            g = max(lo[a] + ia * hs[a] - queries[m, a], queries[m, a] - lo[a] - (ia + 1) * hs[a])
                            g = max(g - _SLACK * hs[a], 0.0)
                            gap += g * g
                        if gap > best_d[k - 1]:
                            continue
                        for s in range(counts[c], counts[c + 1]):
                            p = order[s]
                            dx = qx - pts[p, 0]
                            dy = qy - pts[p, 1]
                            dz = qz - pts[p, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best_d[k - 1] or (d == best_d[k - 1] and p < best_i[k - 1]):
                                _insert(best_d, best_i, d, p, k)
                                found += 1
            # every unvisited point lies beyond one of the faces of the visited
            # block, and inside the grid's bounding box
            for a in range(3):
                qa = queries[m, a]
                g = max(max(lo[a] - qa, qa - lo[a] - dims[a] * hs[a]) - _SLACK * hs[a], 0.0)
                outside[a] = g * g
            tot_out = outside[0] + outside[1] + outside[2]
            bound = np.inf
            for a in range(3):
                qa = queries[m, a]
                rest = tot_out - outside[a]
                if c0[a] - r > 0:
                    g = max(qa - (lo[a] + (c0[a] - r) * hs[a]) - _SLACK * hs[a], 0.0)
                    bound = min(bound, g * g + rest)
                if c0[a] + r + 1 < dims[a]:
                    g = max(lo[a] + (c0[a] + r + 1) * hs[a] - qa - _SLACK * hs[a], 0.0)
                    bound = min(bound, g * g + rest)
            if bound == np.inf:
                break
            if found >= k and best_d[k - 1] < bound:
                break
            r += 1
        for j in range(k):
            out_i[m, j] = best_i[j]
            out_d[m, j] = best_d[j]


@nb.njit(cache=True, nogil=True, error_model="numpy")
def knn_batch(pts, queries, k, out_i, out_d):
    """Exact k-NN of ``queries[h]`` among ``pts[h]`` for every batch item ``h``.

    Ties are broken by the smaller point index; results are sorted by
    squared distance.  ``out_i``/``out_d`` have shape (H, M, k).
    """
    for h in range(pts.shape[0]):
        _knn_one(pts[h], queries[h], k, out_i[h], out_d[h])


def knn(pts: np.ndarray, queries: np.ndarray, k: int):
    """Batched exact k-NN; ``pts`` (H, N, 3), ``queries`` (H, M, 3)."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    h, m = queries.shape[:2]
    out_i = np.empty((h, m, k), np.int64)
    out_d = np.empty((h, m, k))
    knn_batch(pts, queries, k, out_i, out_d)
    return out_i, out_d


@nb.njit(cache=True, nogil=True, error_model="numpy")
def _code_regularizers_one(code, mean, bases, faces, face_p, face_m, lap_mean, lap_bases, w_normal, w_laplacian,
                           with_grad, grad, verts, nrm, norms, e1s, e2s, g_n, g_v):
    nv = mean.shape[0]
    nk = code.shape[0]
    val = 0.0
    if w_normal != 0.0:
        verts[:, :] = mean
        for kk in range(nk):
            ck = code[kk]
            for v in range(nv):
                for d in range(3):
                    verts[v, d] += ck * bases[kk, v, d]
        nf = faces.shape[0]
        for f in range(nf):
            a0, a1, a2 = faces[f, 0], faces[f, 1], faces[f, 2]
            for d in range(3):
                e1s[f, d] = verts[a1, d] - verts[a0, d]
                e2s[f, d] = verts[a2, d] - verts[a0, d]
            cx = e1s[f, 1] * e2s[f, 2] - e1s[f, 2] * e2s[f, 1]
            cy = e1s[f, 2] * e2s[f, 0] - e1s[f, 0] * e2s[f, 2]
            cz = e1s[f, 0] * e2s[f, 1] - e1s[f, 1] * e2s[f, 0]
            nn = np.sqrt(cx * cx + cy * cy + cz * cz)
            norms[f] = nn
            inv = 1.0 / max(nn, 1e-300)
            nrm[f, 0] = cx * inv
            nrm[f, 1] = cy * inv
            nrm[f, 2] = cz * inv
        ne = face_p.shape[0]
        acc = 0.0
        for e in range(ne):
            fp, fm = face_p[e], face_m[e]
            acc += 1.0 - (nrm[fp, 0] * nrm[fm, 0] + nrm[fp, 1] * nrm[fm, 1] + nrm[fp, 2] * nrm[fm, 2])
        val += w_normal * acc / ne
        if with_grad:
            g_n[:, :] = 0.0
            g_v[:, :] = 0.0
            sc = w_normal / ne
            for e in range(ne):
                fp, fm = face_p[e], face_m[e]
                for d in range(3):
                    g_n[fp, d] -= sc * nrm[fm, d]
                    g_n[fm, d] -= sc * nrm[fp, d]
            for f in range(nf):
                proj = g_n[f, 0] * nrm[f, 0] + g_n[f, 1] * nrm[f, 1] + g_n[f, 2] * nrm[f, 2]
                inv = 1.0 / max(norms[f], 1e-300)
                gx = (g_n[f, 0] - proj * nrm[f, 0]) * inv
                gy = (g_n[f, 1] - proj * nrm[f, 1]) * inv
                gz = (g_n[f, 2] - proj * nrm[f, 2]) * inv
                # d/dv1 = e2 x g_a, d/dv2 = g_a x e1, d/dv0 = -(both)
                ax, ay, az = e2s[f, 0], e2s[f, 1], e2s[f, 2]
                v1x = ay * gz - az * gy
                v1y = az * gx - ax * gz
                v1z = ax * gy - ay * gx
                bx, by, bz = e1s[f, 0], e1s[f, 1], e1s[f, 2]
                v2x = gy * bz - gz * by
                v2y = gz * bx - gx * bz
                v2z = gx * by - gy * bx
                a0, a1, a2 = faces[f, 0], faces[f, 1], faces[f, 2]
                g_v[a1, 0] += v1x
                g_v[a1, 1] += v1y
                g_v[a1, 2] += v1z
                g_v[a2, 0] += v2x
                g_v[a2, 1] += v2y
                g_v[a2, 2] += v2z
                g_v[a0, 0] -= v1x + v2x
                g_v[a0, 1] -= v1y + v2y
                g_v[a0, 2] -= v1z + v2z
            for kk in range(nk):
                s = 0.0
                for v in range(nv):
                    s += g_v[v, 0] * bases[kk, v, 0] + g_v[v, 1] * bases[kk, v, 1] + g_v[v, 2] * bases[kk, v, 2]
                grad[kk] += s
    if w_laplacian != 0.0:
        sc = w_laplacian / nv
        verts[:, :] = lap_mean
        for kk in range(nk):
            ck = code[kk]
            for v in range(nv):
                for d in range(3):
                    verts[v, d] += ck * lap_bases[kk, v, d]
        acc = 0.0
        for v in range(nv):
            nn = np.sqrt(verts[v, 0] ** 2 + verts[v, 1] ** 2 + verts[v, 2] ** 2)
            acc += nn
            if nn >= 1e-12:
                for d in range(3):
                    verts[v, d] /= nn
            else:
                for d in range(3):
                    verts[v, d] = 0.0
        val += sc * acc
        if with_grad:
            for kk in range(nk):
                s = 0.0
                for v in range(nv):
                    s += verts[v, 0] * lap_bases[kk, v, 0] + verts[v, 1] * lap_bases[kk, v, 1] + verts[v, 2] * lap_bases[kk, v, 2]
                grad[kk] += sc * s
    return val


@nb.njit(cache=True, nogil=True, error_model="numpy")
def code_regularizers(codes, mean, bases, faces, face_p, face_m, lap_mean, lap_bases, w_normal, w_laplacian,
                      with_grad, out_val, out_grad):
    """Weighted normal-consistency plus Laplacian loss of ``mean + codes @ bases``.

    Values go to ``out_val`` (H,), code gradients to ``out_grad`` (H, K).
    ``lap_mean``/``lap_bases`` are the uniform Laplacian applied to the mean
    and to each basis (the Laplacian term is linear in the code before the norm).
    """
    nv = mean.shape[0]
    nf = faces.shape[0]
    verts = np.empty((nv, 3))
    nrm = np.empty((nf, 3))
    norms = np.empty(nf)
    e1s = np.empty((nf, 3))
    e2s = np.empty((nf, 3))
    g_n = np.empty((nf, 3))
    g_v = np.empty((nv, 3))
    for h in range(codes.shape[0]):
        out_grad[h, :] = 0.0
        out_val[h] = _code_regularizers_one(codes[h], mean, bases, faces, face_p, face_m, lap_mean, lap_bases,
                                            w_normal, w_laplacian, with_grad, out_grad[h], verts, nrm, norms, e1s,
                                            e2s, g_n, g_v)
