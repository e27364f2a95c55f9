"""Hard centerline extraction for tubular binary structures."""
from __future__ import annotations

import warnings

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sps
from scipy.sparse.csgraph import dijkstra

from .voxelcore import index_to_world


class SkeletonError(ValueError):
    pass


# one representative per +/- pair of 26-neighbour offsets
_HALF_OFFSETS = [
    (a, b, c)
    for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
    if (a, b, c) > (0, 0, 0)
]


def _voxel_graph(B, weight_fn):
    idx = -np.ones(B.shape, dtype=np.int64)
    coords = np.argwhere(B)
    idx[tuple(coords.T)] = np.arange(len(coords))
    rows, cols, vals = [], [], []
    shape = np.array(B.shape)
    for off in _HALF_OFFSETS:
        off = np.array(off)
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < shape), axis=1)
        src = np.flatnonzero(ok)
        dst = idx[tuple(nb[ok].T)]
        keep = dst >= 0
        src, dst = src[keep], dst[keep]
        rows.append(src)
        cols.append(dst)
        vals.append(weight_fn(src, dst, float(np.linalg.norm(off))))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = len(coords)
    g = sps.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return coords, g


def _farthest(graph, source):
    d = dijkstra(graph, directed=False, indices=source)
    d[~np.isfinite(d)] = -1
    return int(np.argmax(d))


def _trim_to_ridge(path, dt):
    """Drop path voxels at an end while the distance transform keeps rising."""
    lo = 0
    while lo + 1 < len(path) and dt[path[lo + 1]] > dt[path[lo]]:
        lo += 1
    hi = len(path) - 1
    while hi - 1 > lo and dt[path[hi - 1]] > dt[path[hi]]:
        hi -= 1
    return path[lo:hi + 1]


def _moving_average(points, window=5):
    half = window // 2
    out = np.empty_like(points)
    n = len(points)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = points[i - h:i + h + 1].mean(axis=0)
    return out


def skeletonize(B, eps: float = 1e-3, elongation_warn: float = 3.0) -> np.ndarray:
    """Ordered centerline of a single 26-connected binary structure.

    The two voxels farthest apart in graph distance (double sweep) are
    joined by a shortest path whose edge costs favour the distance
    transform ridge, and the polyline is smoothed with a 5-point moving
    average.  Returns world coordinates of shape ``(N, 3)``.
    """
    B = np.asarray(B, dtype=bool)
    if not B.any():
        raise SkeletonError("cannot skeletonize an empty structure")
    _, n_comp = ndi.label(B, structure=np.ones((3, 3, 3)))
    if n_comp != 1:
        raise SkeletonError(f"expected one connected component, found {n_comp}")

    dt_grid = ndi.distance_transform_edt(np.pad(B, 1))[1:-1, 1:-1, 1:-1]
    coords, geo = _voxel_graph(B, lambda s, d, length: np.full(len(s), length))
    if len(coords) == 1:
        p = index_to_world(coords[0], B.shape)
        return np.stack([p, p + 1e-12])
    dt = dt_grid[tuple(coords.T)]

    a = _farthest(geo, 0)
    b = _farthest(geo, a)

    def ridge_cost(s, d, length):
        return length * 0.5 * (1.0 / (dt[s] + eps) + 1.0 / (dt[d] + eps))

    _, cost = _voxel_graph(B, ridge_cost)
    _, pred = dijkstra(cost, directed=False, indices=a, return_predecessors=True)
    path = [b]
    while path[-1] != a:
        path.append(int(pred[path[-1]]))
    path = np.array(path[::-1])
    path = _trim_to_ridge(path, dt)

    pts = index_to_world(coords[path].astype(float), B.shape)
    pts = _moving_average(pts, 5)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
    pts = pts[keep]

    length = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    pitch = 1.0 / max(B.shape)
    radius = dt.max() * pitch
    if length < elongation_warn * 2 * radius:
        warnings.warn(
            "structure is not elongated; centerline may be meaningless "
            f"(length {length:.3g} vs diameter {2 * radius:.3g})",
            UserWarning, stacklevel=2)
    if len(pts) < 2:
        pts = np.stack([pts[0], pts[0] + 1e-12])
    return pts
