"""Cuboidal control domains: template lattices moved by affine transforms.

A template of grid size ``(a, b, g)`` is a lattice centred on the origin
whose cells tile the unit cube [-1/2, 1/2]^3, i.e. along an axis of size
``n`` the points sit at ``(i + 0.5) / n - 0.5``.  A control domain is the
image ``R @ diag(s) @ x + t`` of that lattice.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.ndimage as ndi

from .skeleton import skeletonize
from .voxelcore import TrilinearMap, binarize, boolean_subset, voxel_centers

_ORTHO_TOL = 1e-9


class EmptyStructureError(ValueError):
    pass


class NoInterfaceError(ValueError):
    pass


@dataclass(frozen=True)
class AffineParams:
    R: np.ndarray
    s: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        s = np.array(self.s, dtype=float).reshape(3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("affine parameters must be finite")
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must be a proper rotation (det +1)")
        if not np.all(s > 0):
            raise ValueError("scales must be strictly positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.eye(3), np.ones(3), np.zeros(3))

    @property
    def jacobian(self) -> np.ndarray:
        return self.R * self.s[None, :]

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "s": self.s.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d) -> "AffineParams":
        return cls(d["R"], d["s"], d["t"])


def _check_grid(grid_size):
    g = tuple(int(x) for x in grid_size)
    if len(g) != 3 or min(g) < 1:
        raise ValueError(f"grid size must be three positive integers, got {grid_size}")
    return g


def make_template(grid_size) -> np.ndarray:
    """Centered template lattice, shape ``(a, b, g, 3)``."""
    g = _check_grid(grid_size)
    return voxel_centers(g)


def apply_affine(template, A: AffineParams) -> np.ndarray:
    template = np.asarray(template, dtype=float)
    return template @ A.jacobian.T + A.t


@dataclass(frozen=True)
class ControlDomain:
    grid_size: tuple
    affine: AffineParams = field(default_factory=AffineParams.identity)

    def __post_init__(self):
        object.__setattr__(self, "grid_size", _check_grid(self.grid_size))

    @cached_property
    def points(self) -> np.ndarray:
        return apply_affine(make_template(self.grid_size), self.affine)

    def to_template(self, X) -> np.ndarray:
        """Invert the affine map: ``diag(s)^-1 R^T (X - t)``."""
        A = self.affine
        return ((np.asarray(X) - A.t) @ A.R) / A.s

    def sampler(self, volume_shape) -> TrilinearMap:
        return TrilinearMap(volume_shape, self.points)

    def to_dict(self) -> dict:
        return {"grid_size": list(self.grid_size), "affine": self.affine.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ControlDomain":
        return cls(tuple(d["grid_size"]), AffineParams.from_dict(d["affine"]))


# ---------------------------------------------------------------------------
# frames


def orthonormalize(u0, ref=(0.0, 0.0, 1.0)):
    """Complete ``u0`` to a right-handed frame ``(u0, u1, u2)``."""
    u0 = np.asarray(u0, dtype=float)
    norm = np.linalg.norm(u0)
    if norm == 0:
        raise ValueError("primary direction has zero length")
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"primary direction must be unit length, got |u0|={norm}")
    ref = np.asarray(ref, dtype=float)
    c = np.cross(u0, ref)
    if np.linalg.norm(c) < 1e-6:
        # reference (anti)parallel to u0: use the least aligned coordinate axis
        alt = np.zeros(3)
        alt[np.argmin(np.abs(u0))] = 1.0
        c = np.cross(u0, alt)
    u1 = c / np.linalg.norm(c)
    u2 = np.cross(u0, u1)
    return u1, u2


def _rodrigues(v, axis, theta):
    return (v * np.cos(theta) + np.cross(axis, v) * np.sin(theta)
            + axis * np.dot(axis, v) * (1.0 - np.cos(theta)))


def parallel_transport(tangents, f2_0, f3_0):
    """Propagate a normal frame along unit tangents by minimal rotations."""
    T = np.asarray(tangents, dtype=float)
    if np.any(np.abs(np.linalg.norm(T, axis=1) - 1.0) > 1e-6):
        raise ValueError("tangents must be unit vectors")
    F2 = np.empty_like(T)
    F3 = np.empty_like(T)
    F2[0], F3[0] = f2_0, f3_0
    for i in range(1, len(T)):
        axis = np.cross(T[i - 1], T[i])
        n = np.linalg.norm(axis)
        if n < 1e-9:
            F2[i], F3[i] = F2[i - 1], F3[i - 1]
            continue
        axis /= n
        theta = np.arccos(np.clip(np.dot(T[i - 1], T[i]), -1.0, 1.0))
        F2[i] = _rodrigues(F2[i - 1], axis, theta)
        F3[i] = _rodrigues(F3[i - 1], axis, theta)
    return F2, F3


def fibonacci_lattice(n: int) -> np.ndarray:
    """``n`` near-uniform unit directions on the sphere."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# constructors


def _volume_scale(grid_size, volume_shape):
    return np.asarray(grid_size, dtype=float) / np.asarray(volume_shape, dtype=float)


def world_centroid(S):
    """Intensity-weighted centroid of a structure map in world coordinates."""
    S = np.asarray(S, dtype=float)
    m = S.sum()
    if m <= 0:
        raise EmptyStructureError("structure has zero mass")
    X = voxel_centers(S.shape)
    return np.tensordot(S, X, axes=3) / m


def global_domain(grid_size=None) -> AffineParams:
    if grid_size is not None:
        _check_grid(grid_size)
    return AffineParams.identity()


def cartesian_domain(V, u, grid_size=None, threshold: float = 0.9) -> AffineParams:
    """Axis-aligned box tightly covering the binarized selected structure."""
    if grid_size is not None:
        _check_grid(grid_size)
    S = binarize(boolean_subset(V, u), threshold)
    if not S.any():
        raise EmptyStructureError("selected structure is empty after binarization")
    shape = np.array(S.shape, dtype=float)
    idx = np.argwhere(S)
    lower = idx.min(axis=0) / shape - 0.5
    upper = (idx.max(axis=0) + 1) / shape - 0.5
    return AffineParams(np.eye(3), upper - lower, (upper + lower) / 2)


def interface_domain(V, uA, uB, grid_size, k_dil: int = 5, ref=(0.0, 0.0, 1.0)):
    """Pair of domains straddling the contact region of two structures."""
    grid_size = _check_grid(grid_size)
    if k_dil < 1 or k_dil % 2 == 0:
        raise ValueError("dilation kernel size must be a positive odd integer")
    SA = boolean_subset(V, uA)
    SB = boolean_subset(V, uB)
    if not SA.any() or not SB.any():
        raise EmptyStructureError("interface requires two non-empty structures")
    dilA = ndi.maximum_filter(SA, size=k_dil, mode="constant", cval=0.0)
    dilB = ndi.maximum_filter(SB, size=k_dil, mode="constant", cval=0.0)
    M = np.minimum(dilA, dilB)
    A_int, B_int = SA * M, SB * M
    if A_int.sum() <= 0 or B_int.sum() <= 0:
        raise NoInterfaceError("structures do not meet within the dilation kernel")
    pA, pB = world_centroid(A_int), world_centroid(B_int)
    d = pB - pA
    if np.linalg.norm(d) == 0:
        raise NoInterfaceError("interface centroids coincide")
    ra = d / np.linalg.norm(d)
    rb, rg = orthonormalize(ra, ref)
    R = np.stack([ra, rb, rg], axis=1)
    s = _volume_scale(grid_size, SA.shape)
    return AffineParams(R, s, pA), AffineParams(R, s, pB)


def centerline_frames(centerline, ref=(0.0, 0.0, 1.0)):
    """Unit tangents and parallel-transported normal frames of a polyline."""
    C = np.asarray(centerline, dtype=float)
    T = np.gradient(C, axis=0)
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    f2, f3 = orthonormalize(T[0], ref)
    F2, F3 = parallel_transport(T, f2, f3)
    return T, F2, F3


def default_plane_indices(n_center: int, n_planes: int = 5) -> np.ndarray:
    """Uniformly spaced interior indices along a centerline."""
    return np.round(np.linspace(0, n_center - 1, n_planes + 2)[1:-1]).astype(int)


def curvilinear_domains(V, u, grid_size=(1, 32, 32), subsample_indices=None,
                        ref=(0.0, 0.0, 1.0), n_planes: int = 5, threshold: float = 0.9):
    """Planar cross-section domains along the centerline of a tube."""
    grid_size = _check_grid(grid_size)
    S = binarize(boolean_subset(V, u), threshold)
    if not S.any():
        raise EmptyStructureError("selected structure is empty after binarization")
    C = skeletonize(S)
    T, F2, F3 = centerline_frames(C, ref)
    if subsample_indices is None:
        subsample_indices = default_plane_indices(len(C), n_planes)
    idx = np.asarray(subsample_indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= len(C)):
        raise IndexError(f"subsample index out of range for centerline of length {len(C)}")
    s = _volume_scale(grid_size, S.shape)
    out = []
    for k in idx:
        R = np.stack([T[k], F2[k], F3[k]], axis=1)
        out.append(AffineParams(_reorthonormalize(R), s, C[k]))
    return out


def _reorthonormalize(R):
    # strip the ~1e-15 drift accumulated by repeated rotations
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _exit_distance(origin, direction):
    """Distance along ``direction`` from ``origin`` to the world-cube boundary."""
    with np.errstate(divide="ignore", invalid="ignore"):
        hit = (np.sign(direction) * 0.5 - origin) / direction
    hit = hit[np.isfinite(hit) & (direction != 0)]
    return float(hit.min()) if hit.size else 0.0


def _ray_wall(S, origin, direction, n_query):
    t_exit = _exit_distance(origin, direction)
    t = t_exit * (np.arange(n_query) + 0.5) / n_query
    X = origin + t[:, None] * direction
    w = TrilinearMap(S.shape, X)(S)
    mass = w.sum() / n_query
    if w.sum() <= 0:
        return None, 0.0
    return (w[:, None] * X).sum(axis=0) / w.sum(), mass


def _ray_domains(S, origins, directions, grid_size, n_query, ref, mass_threshold):
    s = _volume_scale(grid_size, S.shape)
    affines, valid = [], np.zeros(len(directions), dtype=bool)
    for k, (o, d) in enumerate(zip(origins, directions)):
        wall, mass = _ray_wall(S, o, d, n_query)
        if wall is None or mass < mass_threshold:
            continue
        u1, u2 = orthonormalize(d, ref)
        R = np.stack([u1, u2, d], axis=1)
        affines.append(AffineParams(R, s, wall))
        valid[k] = True
    return affines, valid


def spherical_domains(V, u, grid_size=(4, 4, 16), n_rays: int = 4, n_query: int = 128,
                      ref=(0.0, 0.0, 1.0), mass_threshold: float = 1e-6):
    """Ray-like domains centred on the walls hit by rays cast from the centroid.

    Returns the affines of valid rays and a boolean validity mask over all
    ``n_rays`` directions.
    """
    grid_size = _check_grid(grid_size)
    S = boolean_subset(V, u)
    if not S.any():
        raise EmptyStructureError("selected structure is empty")
    p = world_centroid(S)
    dirs = fibonacci_lattice(n_rays)
    origins = np.repeat(p[None], n_rays, axis=0)
    return _ray_domains(S, origins, dirs, grid_size, n_query, ref, mass_threshold)


def cylindrical_domains(V, u, grid_size=(4, 4, 32), n_z: int = 4, n_theta: int = 4,
                        n_query: int = 128, ref=(0.0, 0.0, 1.0),
                        mass_threshold: float = 1e-6):
    """Radial ray domains from ``n_z`` stations on the volume's third axis."""
    grid_size = _check_grid(grid_size)
    S = boolean_subset(V, u)
    if not S.any():
        raise EmptyStructureError("selected structure is empty")
    z = (np.arange(n_z) + 0.5) / n_z - 0.5
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    origins, dirs = [], []
    for zj in z:
        for th in theta:
            origins.append([0.0, 0.0, zj])
            dirs.append([np.cos(th), np.sin(th), 0.0])
    return _ray_domains(S, np.array(origins), np.array(dirs), grid_size,
                        n_query, ref, mass_threshold)
