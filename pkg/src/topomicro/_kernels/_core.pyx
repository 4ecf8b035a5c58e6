# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled hot loops. Every function here has a line-for-line twin in
``_pure.py``; the two must agree exactly on every input."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libcpp.vector cimport vector

cnp.import_array()

ctypedef cnp.int64_t i64
ctypedef cnp.int32_t i32


# ---------------------------------------------------------------- EDT

cdef void _fh_line(double* f, Py_ssize_t n, Py_ssize_t stride,
                   double* g, Py_ssize_t* v, double* z) noexcept nogil:
    cdef Py_ssize_t q, k = 0
    cdef double s
    for q in range(n):
        g[q] = f[q * stride]
    # Lower envelope of parabolas; infinite samples never enter the hull.
    k = -1
    for q in range(n):
        if g[q] == INFINITY:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -INFINITY
            z[1] = INFINITY
            continue
        s = ((g[q] + q * q) - (g[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((g[q] + q * q) - (g[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = INFINITY
    if k < 0:
        return
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        f[q * stride] = (q - v[k]) * (q - v[k]) + g[v[k]]


def sq_edt(cnp.uint8_t[:, :, ::1] mask):
    """Squared distance (voxel units) from every ``mask`` voxel to the
    nearest zero voxel; zero voxels get 0, and +inf if no zero exists."""
    cdef Py_ssize_t nz = mask.shape[0], ny = mask.shape[1], nx = mask.shape[2]
    out_arr = np.empty((nz, ny, nx), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, m = max(nx, max(ny, nz))
    for i in range(nz):
        for j in range(ny):
            for k in range(nx):
                out[i, j, k] = INFINITY if mask[i, j, k] else 0.0
    if nz * ny * nx == 0:
        return out_arr
    g_arr = np.empty(m, dtype=np.float64)
    z_arr = np.empty(m + 1, dtype=np.float64)
    v_arr = np.empty(m, dtype=np.intp)
    cdef double[::1] g = g_arr
    cdef double[::1] zb = z_arr
    cdef Py_ssize_t[::1] v = v_arr
    cdef double* base = &out[0, 0, 0]
    with nogil:
        for i in range(nz):
            for j in range(ny):
                _fh_line(base + (i * ny + j) * nx, nx, 1, &g[0], &v[0], &zb[0])
        for i in range(nz):
            for k in range(nx):
                _fh_line(base + i * ny * nx + k, ny, nx, &g[0], &v[0], &zb[0])
        for j in range(ny):
            for k in range(nx):
                _fh_line(base + j * nx + k, nz, ny * nx, &g[0], &v[0], &zb[0])
    return out_arr


# ---------------------------------------------------------- union-find

cdef inline i64 _find(i64* parent, i64 x) noexcept nogil:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def label6(cnp.uint8_t[:, :, ::1] mask):
    """6-connected component labels (1..n in scan order of first voxel)."""
    cdef Py_ssize_t nz = mask.shape[0], ny = mask.shape[1], nx = mask.shape[2]
    cdef i64 n = nz * ny * nx
    parent_arr = np.arange(n, dtype=np.int64)
    labels_arr = np.zeros((nz, ny, nx), dtype=np.int32)
    cdef i64[::1] parent = parent_arr
    cdef i32[:, :, ::1] labels = labels_arr
    cdef Py_ssize_t i, j, k
    cdef i64 idx, a, b
    cdef i32 count = 0
    cdef i64* p = &parent[0] if n > 0 else NULL
    with nogil:
        for i in range(nz):
            for j in range(ny):
                for k in range(nx):
                    if not mask[i, j, k]:
                        continue
                    idx = (i * ny + j) * nx + k
                    if k > 0 and mask[i, j, k - 1]:
                        a = _find(p, idx); b = _find(p, idx - 1)
                        if a != b:
                            if a < b: p[b] = a
                            else: p[a] = b
                    if j > 0 and mask[i, j - 1, k]:
                        a = _find(p, idx); b = _find(p, idx - nx)
                        if a != b:
                            if a < b: p[b] = a
                            else: p[a] = b
                    if i > 0 and mask[i - 1, j, k]:
                        a = _find(p, idx); b = _find(p, idx - nx * ny)
                        if a != b:
                            if a < b: p[b] = a
                            else: p[a] = b
        # roots are always the smallest index of their set, so a root is
        # visited before any other member in scan order
        for i in range(nz):
            for j in range(ny):
                for k in range(nx):
                    if not mask[i, j, k]:
                        continue
                    idx = (i * ny + j) * nx + k
                    a = _find(p, idx)
                    if a == idx:
                        count += 1
                        labels[i, j, k] = count
                    else:
                        labels[i, j, k] = labels[a // (nx * ny), (a // nx) % ny, a % nx]
    return labels_arr, int(count)


# ------------------------------------------------------- priority flood

cdef inline bint _beats(i32 a, i32 ca, i32 b, i32 cb, double* mpri, i64* msize) noexcept nogil:
    # candidate label a (ca neighbours) against b (cb neighbours)
    if ca != cb:
        return ca > cb
    if mpri[a] != mpri[b]:
        return mpri[a] > mpri[b]
    if msize[a] != msize[b]:
        return msize[a] > msize[b]
    return a < b


cdef i32 _vote(i64 idx, i32* lab, cnp.uint8_t* m, Py_ssize_t nz, Py_ssize_t ny,
               Py_ssize_t nx, double* mpri, i64* msize) noexcept nogil:
    cdef i32 labs[26]
    cdef i32 cnts[26]
    cdef int nl = 0, t
    cdef Py_ssize_t i = idx // (nx * ny), j = (idx // nx) % ny, k = idx % nx
    cdef Py_ssize_t a, b, c
    cdef i32 l, best = 0, bestc = 0
    for a in range(i - 1, i + 2):
        if a < 0 or a >= nz:
            continue
        for b in range(j - 1, j + 2):
            if b < 0 or b >= ny:
                continue
            for c in range(k - 1, k + 2):
                if c < 0 or c >= nx:
                    continue
                l = lab[(a * ny + b) * nx + c]
                if l <= 0:
                    continue
                for t in range(nl):
                    if labs[t] == l:
                        cnts[t] += 1
                        break
                else:
                    labs[nl] = l
                    cnts[nl] = 1
                    nl += 1
    for t in range(nl):
        if best == 0 or _beats(labs[t], cnts[t], best, bestc, mpri, msize):
            best = labs[t]
            bestc = cnts[t]
    return best


def flood(double[:, :, ::1] priority, i32[:, :, ::1] markers,
          cnp.uint8_t[:, :, ::1] mask):
    """Immersion watershed from ``markers`` over ``mask`` (26-connectivity).

    Priority levels are flooded from the highest down. Within a level the
    unlabelled voxels are claimed in breadth-first layers; every voxel of a
    layer is decided only from labels fixed before that layer, by majority
    among its labelled neighbours, then higher marker priority, then larger
    marker, then smaller label id. Voxels a level cannot reach are carried
    to the next level; voxels no marker can reach stay 0.
    """
    cdef Py_ssize_t nz = mask.shape[0], ny = mask.shape[1], nx = mask.shape[2]
    cdef i64 n = nz * ny * nx
    labels_arr = np.ascontiguousarray(np.where(np.asarray(mask) != 0, np.asarray(markers), 0),
                                      dtype=np.int32)
    cdef i32[::1] lab = labels_arr.reshape(-1)
    cdef cnp.uint8_t[::1] m = np.asarray(mask).reshape(-1)
    cdef double[::1] pr = np.asarray(priority).reshape(-1)
    nlab = int(labels_arr.max()) + 1 if n else 1
    flat_lab = labels_arr.reshape(-1)
    mpri_arr = np.full(nlab, -np.inf)
    np.maximum.at(mpri_arr, flat_lab, np.asarray(priority).reshape(-1))
    cdef double[::1] mpri = mpri_arr
    cdef i64[::1] msize = np.bincount(flat_lab, minlength=nlab).astype(np.int64)
    todo = np.flatnonzero((flat_lab == 0) & (np.asarray(mask).reshape(-1) != 0))
    cdef i64[::1] order = todo[np.argsort(-np.asarray(priority).reshape(-1)[todo], kind="stable")]
    cdef cnp.uint8_t[::1] pending = np.zeros(n, dtype=np.uint8)
    cdef i64[::1] stamp = np.full(n, -1, dtype=np.int64)
    cdef vector[i64] work, frontier, nxt
    cdef vector[i32] votes
    cdef Py_ssize_t pos = 0, total = order.shape[0], t, s
    cdef i64 idx, layer = 0, nb
    cdef Py_ssize_t i, j, k, a, b, c
    cdef double level
    with nogil:
        while pos < total or work.size() > 0:
            if pos < total:
                level = pr[order[pos]]
                while pos < total and pr[order[pos]] == level:
                    work.push_back(order[pos])
                    pending[order[pos]] = 1
                    pos += 1
            frontier.clear()
            for t in range(<Py_ssize_t>work.size()):
                if _vote(work[t], &lab[0], &m[0], nz, ny, nx, &mpri[0], &msize[0]) > 0:
                    frontier.push_back(work[t])
            if frontier.size() == 0 and pos >= total:
                break
            while frontier.size() > 0:
                layer += 1
                votes.clear()
                for t in range(<Py_ssize_t>frontier.size()):
                    votes.push_back(_vote(frontier[t], &lab[0], &m[0], nz, ny, nx, &mpri[0], &msize[0]))
                for t in range(<Py_ssize_t>frontier.size()):
                    lab[frontier[t]] = votes[t]
                    pending[frontier[t]] = 0
                nxt.clear()
                for t in range(<Py_ssize_t>frontier.size()):
                    idx = frontier[t]
                    i = idx // (nx * ny)
                    j = (idx // nx) % ny
                    k = idx % nx
                    for a in range(i - 1, i + 2):
                        if a < 0 or a >= nz:
                            continue
                        for b in range(j - 1, j + 2):
                            if b < 0 or b >= ny:
                                continue
                            for c in range(k - 1, k + 2):
                                if c < 0 or c >= nx:
                                    continue
                                nb = (a * ny + b) * nx + c
                                if pending[nb] and lab[nb] == 0 and stamp[nb] != layer:
                                    stamp[nb] = layer
                                    nxt.push_back(nb)
                frontier.swap(nxt)
            # keep the voxels this level could not reach
            s = 0
            for t in range(<Py_ssize_t>work.size()):
                if pending[work[t]]:
                    work[s] = work[t]
                    s += 1
            work.resize(s)
    return labels_arr


# --------------------------------------------------- cubical persistence

cdef inline i64 _find_rep(i64* parent, i64 x) noexcept nogil:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


cdef void _xor_into(vector[i64]& col, vector[i64]& other,
                    vector[i64]& tmp) noexcept nogil:
    # symmetric difference of two ascending vectors
    tmp.clear()
    cdef size_t a = 0, b = 0, na = col.size(), nb = other.size()
    while a < na and b < nb:
        if col[a] < other[b]:
            tmp.push_back(col[a]); a += 1
        elif other[b] < col[a]:
            tmp.push_back(other[b]); b += 1
        else:
            a += 1; b += 1
    while a < na:
        tmp.push_back(col[a]); a += 1
    while b < nb:
        tmp.push_back(other[b]); b += 1
    col.swap(tmp)


def cubical_pairs(shape, i64[::1] order):
    """Persistence pairing of a T-constructed cubical complex.

    ``shape`` is the cell-grid shape (2nz+1, 2ny+1, 2nx+1) and ``order``
    lists every cell index in filtration order. Returns a list of three
    (m, 2) int64 arrays of (birth cell, death cell) for degrees 0, 1, 2,
    zero-persistence pairs included, essential classes omitted.
    """
    cdef i64 s0 = shape[0], s1 = shape[1], s2 = shape[2]
    cdef i64 n = s0 * s1 * s2
    cdef i64 st[3]
    st[0] = s1 * s2; st[1] = s2; st[2] = 1
    rank_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] rank = rank_arr
    cdef i64 r, c, x, y, a, b, ra, rb, ax, cz, cy, cx
    cdef i64 coord[3]
    cdef int nodd, odd_axis, even_axis
    for r in range(n):
        rank[order[r]] = r

    parent_arr = np.arange(n + 1, dtype=np.int64)
    cdef i64[::1] parent = parent_arr
    cdef i64* p = &parent[0]
    # birth rank (H0) / representative rank (H2) per UF root
    key_arr = np.empty(n + 1, dtype=np.int64)
    cdef i64[::1] key = key_arr
    cleared_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] cleared = cleared_arr

    cdef vector[i64] p0, p1, p2

    with nogil:
        # H0: vertices and edges, ascending
        for r in range(n):
            key[order[r]] = r
        for r in range(n):
            c = order[r]
            cz = c // st[0]; cy = (c // s2) % s1; cx = c % s2
            nodd = (cz & 1) + (cy & 1) + (cx & 1)
            if nodd != 1:
                continue
            if cz & 1: ax = st[0]
            elif cy & 1: ax = st[1]
            else: ax = st[2]
            a = _find_rep(p, c - ax)
            b = _find_rep(p, c + ax)
            if a == b:
                continue
            if key[a] < key[b]:
                a, b = b, a
            # a is the younger component
            p0.push_back(order[key[a]])
            p0.push_back(c)
            p[a] = b

        # H2: faces descending over the dual graph; n is the exterior
        for r in range(n + 1):
            p[r] = r
        key[n] = n
        for r in range(n):
            key[order[r]] = r
        for r in range(n - 1, -1, -1):
            c = order[r]
            coord[0] = c // st[0]; coord[1] = (c // s2) % s1; coord[2] = c % s2
            nodd = (coord[0] & 1) + (coord[1] & 1) + (coord[2] & 1)
            if nodd != 2:
                continue
            even_axis = 0
            while coord[even_axis] & 1:
                even_axis += 1
            if coord[even_axis] == 0:
                a = n
            else:
                a = c - st[even_axis]
            if coord[even_axis] == shape_at(s0, s1, s2, even_axis) - 1:
                b = n
            else:
                b = c + st[even_axis]
            a = _find_rep(p, a)
            b = _find_rep(p, b)
            if a == b:
                continue
            if key[a] > key[b]:
                a, b = b, a
            # a holds the younger (earlier-filled) void
            p2.push_back(c)
            p2.push_back(order[key[a]])
            cleared[c] = 1
            p[a] = b

    # H1: reduce face columns over edges, ascending, skipping cleared
    cdef vector[vector[i64]] store
    store.resize(n)
    pivot_arr = np.full(n, -1, dtype=np.int64)
    cdef i64[::1] pivot = pivot_arr
    cdef vector[i64] col, tmp
    cdef i64 low, other
    with nogil:
        for r in range(n):
            c = order[r]
            coord[0] = c // st[0]; coord[1] = (c // s2) % s1; coord[2] = c % s2
            nodd = (coord[0] & 1) + (coord[1] & 1) + (coord[2] & 1)
            if nodd != 2 or cleared[c]:
                continue
            col.clear()
            for ax in range(3):
                if coord[ax] & 1:
                    col.push_back(rank[c - st[ax]])
                    col.push_back(rank[c + st[ax]])
            _sort4(col)
            while col.size() > 0:
                low = col[col.size() - 1]
                other = pivot[low]
                if other < 0:
                    break
                _xor_into(col, store[other], tmp)
            if col.size() == 0:
                continue
            low = col[col.size() - 1]
            pivot[low] = r
            store[r].swap(col)
            p1.push_back(order[low])
            p1.push_back(c)

    return [_to_pairs(p0), _to_pairs(p1), _to_pairs(p2)]


cdef object _to_pairs(vector[i64]& vec):
    arr = np.empty(vec.size(), dtype=np.int64)
    cdef i64[::1] view = arr
    cdef size_t i
    for i in range(vec.size()):
        view[i] = vec[i]
    return arr.reshape(-1, 2)


cdef inline i64 shape_at(i64 s0, i64 s1, i64 s2, int axis) noexcept nogil:
    if axis == 0:
        return s0
    if axis == 1:
        return s1
    return s2


cdef inline void _sort4(vector[i64]& v) noexcept nogil:
    cdef size_t i, j
    cdef i64 t
    for i in range(1, v.size()):
        t = v[i]
        j = i
        while j > 0 and v[j - 1] > t:
            v[j] = v[j - 1]
            j -= 1
        v[j] = t
