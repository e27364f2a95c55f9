"""Cubical complex kernels (numba).

Cells live on the combinatorial grid of shape ``2 * n + 1`` per axis; a
cell's dimension is the number of odd coordinates and voxel ``(i, j, k)``
is the 3-cell ``(2i+1, 2j+1, 2k+1)``.
"""
from __future__ import annotations

import numpy as np
from numba import njit
from numba.typed import List


def cell_values(S):
    """Filtration value and creator voxel of every cell.

    A cell's value is the largest intensity among the voxels it bounds
    (super-level sets add a cell together with its first voxel).  Ties go
    to the smallest linear voxel index.  Returns ``(value, creator, dim)``
    over the full combinatorial grid, ``creator`` as linear voxel indices.
    """
    S = np.ascontiguousarray(S, dtype=np.float64)
    value, creator = _cell_values(S)
    G = value.shape
    parity = [np.arange(g) % 2 for g in G]
    dim = parity[0][:, None, None] + parity[1][None, :, None] + parity[2][None, None, :]
    return value, creator, dim


@njit(cache=True)
def _cell_values(S):
    n0, n1, n2 = S.shape
    G0, G1, G2 = 2 * n0 + 1, 2 * n1 + 1, 2 * n2 + 1
    value = np.empty((G0, G1, G2))
    creator = np.empty((G0, G1, G2), dtype=np.int64)
    for a in range(G0):
        ia0 = (a - 1) // 2
        ia1 = a // 2 if a % 2 == 0 else (a - 1) // 2
        for b in range(G1):
            ib0 = (b - 1) // 2
            ib1 = b // 2 if b % 2 == 0 else (b - 1) // 2
            for c in range(G2):
                ic0 = (c - 1) // 2
                ic1 = c // 2 if c % 2 == 0 else (c - 1) // 2
                best = -np.inf
                who = -1
                # voxel indices visited in increasing linear order, so the
                # first maximum wins ties
                for i in range(ia0, ia1 + 1):
                    if i < 0 or i >= n0:
                        continue
                    for j in range(ib0, ib1 + 1):
                        if j < 0 or j >= n1:
                            continue
                        for k in range(ic0, ic1 + 1):
                            if k < 0 or k >= n2:
                                continue
                            v = S[i, j, k]
                            if v > best:
                                best = v
                                who = (i * n1 + j) * n2 + k
                value[a, b, c] = best
                creator[a, b, c] = who
    return value, creator


@njit(cache=True)
def _faces(lin, G0, G1, G2, out):
    a = lin // (G1 * G2)
    b = (lin // G2) % G1
    c = lin % G2
    k = 0
    if a % 2 == 1:
        out[k] = lin - G1 * G2
        out[k + 1] = lin + G1 * G2
        k += 2
    if b % 2 == 1:
        out[k] = lin - G2
        out[k + 1] = lin + G2
        k += 2
    if c % 2 == 1:
        out[k] = lin - 1
        out[k + 1] = lin + 1
        k += 2
    return k


@njit(cache=True)
def _symdiff_into(x, nx, y, out):
    """Sorted symmetric difference of ``x[:nx]`` and ``y`` written to ``out``."""
    i = 0
    j = 0
    k = 0
    ny = len(y)
    while i < nx and j < ny:
        if x[i] < y[j]:
            out[k] = x[i]
            i += 1
            k += 1
        elif x[i] > y[j]:
            out[k] = y[j]
            j += 1
            k += 1
        else:
            i += 1
            j += 1
    while i < nx:
        out[k] = x[i]
        i += 1
        k += 1
    while j < ny:
        out[k] = y[j]
        j += 1
        k += 1
    return k


@njit(cache=True)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit(cache=True)
def _top_pairs_dual(cells, dims, order_of, n_inc, G0, G1, G2,
                    cleared, is_low, negative, births, deaths):
    """Void pairs from a union-find on voxels joined through 2-cells.

    2-cells are visited in reverse filtration order over the full grid
    (excluded cells come last in the filtration); a face that merges two
    voxel groups is paired with the younger group's root.  The region
    beyond the grid is one node that never dies.  Faces killed only by
    excluded voxels are essential voids.
    """
    n_all = len(cells)
    outside = n_all
    parent = np.arange(n_all + 1)
    S12 = G1 * G2
    for pos in range(n_all - 1, -1, -1):
        if dims[pos] != 2:
            continue
        lin = cells[pos]
        a = lin // S12
        b = (lin // G2) % G1
        c = lin % G2
        if a % 2 == 0:
            step, coord, g = S12, a, G0
        elif b % 2 == 0:
            step, coord, g = G2, b, G1
        else:
            step, coord, g = 1, c, G2
        u = outside if coord == 0 else order_of[lin - step]
        v = outside if coord == g - 1 else order_of[lin + step]
        ru = _find(parent, u)
        rv = _find(parent, v)
        if ru == rv:
            continue
        # the root is the group's last-entering voxel (born first in reverse)
        young = min(ru, rv)
        parent[young] = max(ru, rv)
        if pos >= n_inc:
            continue
        cleared[pos] = True
        if young < n_inc:
            is_low[pos] = True
            negative[young] = True
            births.append(pos)
            deaths.append(young)


@njit(cache=True)
def reduce_filtration(cells, dims, order_of, G0, G1, G2, union_find_dim0,
                      n_inc=-1, dual_top=False):
    """Persistence pairs of a filtered cubical complex.

    ``cells`` lists linear cell indices in filtration order, ``dims``
    their dimensions and ``order_of`` maps a linear cell index back to its
    position.  Only the first ``n_inc`` cells belong to the filtered
    complex (all of them when negative).  Boundaries are reduced from the
    top dimension down with clearing.  Dimension 0 optionally uses a
    union-find on the same order; ``dual_top`` replaces the voxel column
    reduction by a union-find on the dual graph and then needs every grid
    cell in ``cells``.  Both shortcuts yield identical pairs.

    Returns ``(birth, death, essential)`` as filtration positions; the
    pair's homological dimension is ``dims[birth]``.
    """
    if n_inc < 0:
        n_inc = len(cells)
    n = n_inc
    pivot_owner = np.full(n, -1, dtype=np.int64)  # low -> owning column
    cleared = np.zeros(n, dtype=np.bool_)
    is_low = np.zeros(n, dtype=np.bool_)
    negative = np.zeros(n, dtype=np.bool_)
    # reduced columns are stored back to back in one growing buffer
    buf = np.empty(max(16, 6 * n), dtype=np.int64)
    buf_used = 0
    col_start = np.zeros(n, dtype=np.int64)
    col_len = np.zeros(n, dtype=np.int64)
    work = np.empty(64, dtype=np.int64)
    tmp = np.empty(64, dtype=np.int64)
    births = List()
    deaths = List()
    faces = np.empty(6, dtype=np.int64)

    if dual_top:
        _top_pairs_dual(cells, dims, order_of, n_inc, G0, G1, G2,
                        cleared, is_low, negative, births, deaths)
    top = 2 if dual_top else 3
    lowest = 0 if not union_find_dim0 else 1
    for d in range(top, lowest, -1):
        for col in range(n):
            if dims[col] != d or cleared[col]:
                continue
            k = _faces(cells[col], G0, G1, G2, faces)
            for q in range(k):
                work[q] = order_of[faces[q]]
            work[:k].sort()
            nw = k
            while nw > 0:
                owner = pivot_owner[work[nw - 1]]
                if owner < 0:
                    break
                other = buf[col_start[owner]:col_start[owner] + col_len[owner]]
                if nw + len(other) > len(tmp):
                    size = 2 * (nw + len(other))
                    tmp = np.empty(size, dtype=np.int64)
                    grown = np.empty(size, dtype=np.int64)
                    grown[:nw] = work[:nw]
                    work = grown
                nw = _symdiff_into(work, nw, other, tmp)
                work, tmp = tmp, work
            if nw > 0:
                low = work[nw - 1]
                if buf_used + nw > len(buf):
                    grown = np.empty(2 * (buf_used + nw), dtype=np.int64)
                    grown[:buf_used] = buf[:buf_used]
                    buf = grown
                buf[buf_used:buf_used + nw] = work[:nw]
                col_start[col] = buf_used
                col_len[col] = nw
                buf_used += nw
                pivot_owner[low] = col
                is_low[low] = True
                negative[col] = True
                cleared[low] = True
                births.append(low)
                deaths.append(col)

    if union_find_dim0:
        parent = np.arange(n)
        for col in range(n):
            if dims[col] != 1:
                continue
            _faces(cells[col], G0, G1, G2, faces)
            u = _find(parent, order_of[faces[0]])
            v = _find(parent, order_of[faces[1]])
            if u == v:
                continue
            # roots are the oldest vertex of their component; the younger dies
            young = max(u, v)
            old = min(u, v)
            parent[young] = old
            negative[col] = True
            is_low[young] = True
            births.append(young)
            deaths.append(col)

    ess = List()
    for i in range(n):
        if not negative[i] and not is_low[i]:
            ess.append(i)

    nb = len(births)
    b = np.empty(nb, dtype=np.int64)
    dd = np.empty(nb, dtype=np.int64)
    for i in range(nb):
        b[i] = births[i]
        dd[i] = deaths[i]
    e = np.empty(len(ess), dtype=np.int64)
    for i in range(len(ess)):
        e[i] = ess[i]
    return b, dd, e
