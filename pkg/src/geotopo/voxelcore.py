"""Dense voxel grids, channel algebra and trilinear point sampling.

Conventions
-----------
A voxel map is an array of shape ``(C, H, W, D)``; a structure map is a
single-channel ``(H, W, D)`` array with values in [0, 1].  World
coordinates span the cube [-1/2, 1/2]^3 over the whole volume, so the
center of voxel ``i`` along an axis of length ``n`` sits at
``(i + 0.5) / n - 0.5``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sps

# continuous indices closer than this to an integer are snapped onto it, so
# sampling exactly at voxel centers reproduces stored values bit-for-bit
_SNAP = 1e-9


def index_to_world(index, shape) -> np.ndarray:
    """World coordinates of (possibly fractional) voxel indices."""
    index = np.asarray(index, dtype=float)
    n = np.asarray(shape, dtype=float)
    return (index + 0.5) / n - 0.5


def world_to_index(points, shape) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    n = np.asarray(shape, dtype=float)
    return (points + 0.5) * n - 0.5


def voxel_centers(shape) -> np.ndarray:
    """World coordinates of every voxel center, shape ``(H, W, D, 3)``."""
    axes = [index_to_world(np.arange(n), n) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def is_probability(V, atol: float = 1e-6) -> bool:
    V = np.asarray(V)
    return bool(np.all(np.isfinite(V)) and np.all(V >= 0)
                and np.allclose(V.sum(axis=0), 1.0, atol=atol))


def one_hot_encode(labels, channels: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"labels must be 3D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must hold integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= channels):
        raise ValueError(
            f"label values must lie in [0, {channels}), got range "
            f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((channels,) + labels.shape)
    for c in range(channels):
        out[c][labels == c] = 1.0
    return out


def softmax_channels(logits, temperature: float = 1.0) -> np.ndarray:
    """Channel softmax of ``temperature * logits`` (channel axis first)."""
    logits = np.asarray(logits, dtype=float)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input contains non-finite values")
    x = temperature * logits
    x = x - x.max(axis=0, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=0, keepdims=True)


def softmax_vjp(probs, cotangent, temperature: float = 1.0) -> np.ndarray:
    """Pull a cotangent on softmax outputs back onto the logits."""
    inner = (probs * cotangent).sum(axis=0, keepdims=True)
    return temperature * probs * (cotangent - inner)


def _check_selection(u, channels: int) -> np.ndarray:
    u = np.asarray(u, dtype=bool).ravel()
    if u.size != channels:
        raise ValueError(
            f"selection vector has length {u.size}, expected {channels}")
    return u


def boolean_subset(V, u) -> np.ndarray:
    """Union of the selected channels via a voxelwise maximum."""
    V = np.asarray(V, dtype=float)
    u = _check_selection(u, V.shape[0])
    if not u.any():
        return np.zeros(V.shape[1:])
    return V[u].max(axis=0)


def boolean_subset_vjp(V, u, cotangent) -> np.ndarray:
    """Route the cotangent to the channel that attains the maximum."""
    V = np.asarray(V, dtype=float)
    u = _check_selection(u, V.shape[0])
    grad = np.zeros_like(V)
    if not u.any():
        return grad
    sel = np.flatnonzero(u)
    winner = sel[np.argmax(V[sel], axis=0)]
    np.put_along_axis(grad, winner[None], np.asarray(cotangent)[None], axis=0)
    return grad


def binarize(S, threshold: float = 0.9) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(S) > threshold


class TrilinearMap:
    """Linear operator sampling a grid at fixed world points.

    Points outside the grid's support read zero (zero padding).  The
    operator is stored as a sparse ``(n_points, n_voxels)`` matrix with at
    most 8 nonzeros per row, so ``vjp`` is just its transpose.
    """

    def __init__(self, shape, points):
        self.shape = tuple(int(n) for n in shape)
        points = np.asarray(points, dtype=float)
        if points.shape[-1] != 3:
            raise ValueError("points must have a trailing axis of size 3")
        if not np.all(np.isfinite(points)):
            raise ValueError("sample points contain non-finite coordinates")
        self.points_shape = points.shape[:-1]
        flat = points.reshape(-1, 3)
        self.matrix = _trilinear_matrix(self.shape, flat)

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        lead = values.shape[:-3]
        if values.shape[-3:] != self.shape:
            raise ValueError(f"grid shape {values.shape[-3:]} != {self.shape}")
        flat = values.reshape(-1, int(np.prod(self.shape)))
        out = (self.matrix @ flat.T).T
        return out.reshape(lead + self.points_shape)

    def vjp(self, cotangent) -> np.ndarray:
        cotangent = np.asarray(cotangent, dtype=float)
        k = len(self.points_shape)
        lead = cotangent.shape[:cotangent.ndim - k]
        flat = cotangent.reshape(-1, self.n_points)
        out = (self.matrix.T @ flat.T).T
        return out.reshape(lead + self.shape)


def _trilinear_matrix(shape, points) -> sps.csr_matrix:
    n = np.asarray(shape)
    u = world_to_index(points, shape)
    r = np.round(u)
    u = np.where(np.abs(u - r) < _SNAP, r, u)
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    rows, cols, vals = [], [], []
    pid = np.arange(len(points))
    strides = np.array([shape[1] * shape[2], shape[2], 1])
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = i0 + offs
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < n), axis=1) & (w != 0.0)
        rows.append(pid[ok])
        cols.append(idx[ok] @ strides)
        vals.append(w[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sps.csr_matrix((vals, (rows, cols)),
                          shape=(len(points), int(np.prod(shape))))


def trilinear_sample(S, points):
    """Sample a structure map at world points.

    Returns the sampled values (shaped like ``points[..., 0]``) and the
    :class:`TrilinearMap` whose ``vjp`` maps output cotangents back onto
    the grid.
    """
    S = np.asarray(S, dtype=float)
    op = TrilinearMap(S.shape[-3:], points)
    return op(S), op
