"""Pure-Python twins of the compiled kernels in ``_core.pyx``.

Used when the extension is not built or ``TOPOMICRO_PURE=1`` is set.
Same algorithms, same tie-breaking, same outputs; only slower.
"""
from __future__ import annotations

import math

import numpy as np


def _fh_line(f: list) -> list:
    n = len(f)
    v = [0] * n
    z = [0.0] * (n + 1)
    k = -1
    for q in range(n):
        if f[q] == math.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -math.inf
            z[1] = math.inf
            continue
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf
    if k < 0:
        return f
    out = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        out[q] = (q - v[k]) * (q - v[k]) + f[v[k]]
    return out


def sq_edt(mask: np.ndarray) -> np.ndarray:
    out = np.where(mask.astype(bool), math.inf, 0.0)
    for axis in (2, 1, 0):
        moved = np.moveaxis(out, axis, -1)
        for idx in np.ndindex(moved.shape[:-1]):
            moved[idx] = _fh_line(moved[idx].tolist())
    return out


def label6(mask: np.ndarray):
    m = mask.astype(bool)
    nz, ny, nx = m.shape
    parent = list(range(m.size))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        a, b = find(a), find(b)
        if a != b:
            if a < b:
                parent[b] = a
            else:
                parent[a] = b

    for i in range(nz):
        for j in range(ny):
            for k in range(nx):
                if not m[i, j, k]:
                    continue
                idx = (i * ny + j) * nx + k
                if k > 0 and m[i, j, k - 1]:
                    union(idx, idx - 1)
                if j > 0 and m[i, j - 1, k]:
                    union(idx, idx - nx)
                if i > 0 and m[i - 1, j, k]:
                    union(idx, idx - nx * ny)
    labels = np.zeros(m.shape, dtype=np.int32)
    flat = labels.reshape(-1)
    count = 0
    for idx in np.flatnonzero(m.reshape(-1)):
        root = find(int(idx))
        if root == idx:
            count += 1
            flat[idx] = count
        else:
            flat[idx] = flat[root]
    return labels, count


def _vote(idx, lab, m, shape, mpri, msize):
    nz, ny, nx = shape
    i, j, k = idx // (nx * ny), (idx // nx) % ny, idx % nx
    counts = {}
    for a in range(max(i - 1, 0), min(i + 2, nz)):
        for b in range(max(j - 1, 0), min(j + 2, ny)):
            for c in range(max(k - 1, 0), min(k + 2, nx)):
                lb = int(lab[(a * ny + b) * nx + c])
                if lb > 0:
                    counts[lb] = counts.get(lb, 0) + 1
    if not counts:
        return 0
    # majority, then higher marker priority, larger marker, smaller id
    return max(counts, key=lambda lb: (counts[lb], mpri[lb], msize[lb], -lb))


def flood(priority: np.ndarray, markers: np.ndarray, mask: np.ndarray) -> np.ndarray:
    shape = mask.shape
    nz, ny, nx = shape
    m_arr = np.asarray(mask).reshape(-1) != 0
    labels = np.where(np.asarray(mask) != 0, np.asarray(markers), 0).astype(np.int32)
    lab = labels.reshape(-1)
    pr = np.asarray(priority, dtype=np.float64).reshape(-1)
    nlab = int(labels.max()) + 1 if labels.size else 1
    mpri_arr = np.full(nlab, -np.inf)
    np.maximum.at(mpri_arr, lab, pr)
    mpri = mpri_arr.tolist()
    msize = np.bincount(lab, minlength=nlab).tolist()
    todo = np.flatnonzero((lab == 0) & m_arr)
    order = todo[np.argsort(-pr[todo], kind="stable")].tolist()
    pending = set()
    work = []
    pos = 0
    while pos < len(order) or work:
        if pos < len(order):
            level = pr[order[pos]]
            while pos < len(order) and pr[order[pos]] == level:
                work.append(order[pos])
                pending.add(order[pos])
                pos += 1
        frontier = [v for v in work if _vote(v, lab, m_arr, shape, mpri, msize) > 0]
        if not frontier and pos >= len(order):
            break
        while frontier:
            votes = [_vote(v, lab, m_arr, shape, mpri, msize) for v in frontier]
            for v, lb in zip(frontier, votes):
                lab[v] = lb
                pending.discard(v)
            nxt = []
            seen = set()
            for v in frontier:
                i, j, k = v // (nx * ny), (v // nx) % ny, v % nx
                for a in range(max(i - 1, 0), min(i + 2, nz)):
                    for b in range(max(j - 1, 0), min(j + 2, ny)):
                        for c in range(max(k - 1, 0), min(k + 2, nx)):
                            nb = (a * ny + b) * nx + c
                            if nb in pending and lab[nb] == 0 and nb not in seen:
                                seen.add(nb)
                                nxt.append(nb)
            frontier = nxt
        work = [v for v in work if v in pending]
    return labels


def cubical_pairs(shape, order: np.ndarray):
    s0, s1, s2 = (int(s) for s in shape)
    n = s0 * s1 * s2
    st = (s1 * s2, s2, 1)
    order = [int(c) for c in order]
    rank = [0] * n
    for r, c in enumerate(order):
        rank[c] = r

    def coords(c):
        return (c // st[0], (c // s2) % s1, c % s2)

    parent = list(range(n + 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    key = rank + [n]
    p0, p1, p2 = [], [], []
    for r, c in enumerate(order):
        co = coords(c)
        if sum(x & 1 for x in co) != 1:
            continue
        ax = st[[x & 1 for x in co].index(1)]
        a, b = find(c - ax), find(c + ax)
        if a == b:
            continue
        if key[a] < key[b]:
            a, b = b, a
        p0.append((order[key[a]], c))
        parent[a] = b

    parent = list(range(n + 1))
    key = rank + [n]
    cleared = set()
    for r in range(n - 1, -1, -1):
        c = order[r]
        co = coords(c)
        if sum(x & 1 for x in co) != 2:
            continue
        e = [x & 1 for x in co].index(0)
        a = n if co[e] == 0 else c - st[e]
        b = n if co[e] == shape[e] - 1 else c + st[e]
        a, b = find(a), find(b)
        if a == b:
            continue
        if key[a] > key[b]:
            a, b = b, a
        p2.append((c, order[key[a]]))
        cleared.add(c)
        parent[a] = b

    pivot = {}
    store = {}
    for r, c in enumerate(order):
        co = coords(c)
        if sum(x & 1 for x in co) != 2 or c in cleared:
            continue
        col = set()
        for ax in range(3):
            if co[ax] & 1:
                col.add(rank[c - st[ax]])
                col.add(rank[c + st[ax]])
        while col:
            low = max(col)
            other = pivot.get(low)
            if other is None:
                break
            col ^= store[other]
        if not col:
            continue
        low = max(col)
        pivot[low] = r
        store[r] = col
        p1.append((order[low], c))

    return [np.array(p, dtype=np.int64).reshape(-1, 2) for p in (p0, p1, p2)]
