"""Differentiable geometric moments of substructures.

Local moments are taken over voxel coordinates ``r`` in [0, 1]^3 of the
substructure lattice; :func:`local_to_global` maps them into world units
through the domain's affine parameters.  Gradients of the geometric
potential are closed-form: every quantity involved is a low-degree
rational function of the voxel values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domains import AffineParams, ControlDomain

COV_EPS = 1e-9


@dataclass
class Substructure:
    values: np.ndarray
    domain: ControlDomain
    valid: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.domain.grid_size:
            raise ValueError(
                f"values shape {self.values.shape} does not match domain grid "
                f"{self.domain.grid_size}")


@dataclass
class GeometricMoments:
    mass: float
    centroid: np.ndarray
    cov: np.ndarray
    frame: str = "local"
    defined: bool = True


@dataclass
class MomentDecomposition:
    size: float
    shape: np.ndarray
    orientation: np.ndarray
    cov_n: np.ndarray


@dataclass
class GeometricTarget:
    """Target moments (world frame) with their MSE weights.

    ``weights`` are ``(mass, centroid, covariance)``.  Below
    ``mass_threshold`` only the mass term is active.
    """
    mass: float
    centroid: np.ndarray
    cov_n: np.ndarray
    weights: tuple = (1.0, 1.0, 1.0)
    mass_threshold: float = 0.0

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=float).reshape(3)
        self.cov_n = np.asarray(self.cov_n, dtype=float).reshape(3, 3)
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ValueError("weights must be three non-negative numbers")
        if not np.allclose(self.cov_n, self.cov_n.T, atol=1e-9):
            raise ValueError("target normalized covariance must be symmetric")

    def to_dict(self) -> dict:
        return {"mass": float(self.mass), "centroid": self.centroid.tolist(),
                "cov_n": self.cov_n.tolist(), "weights": list(self.weights),
                "mass_threshold": float(self.mass_threshold)}

    @classmethod
    def from_dict(cls, d) -> "GeometricTarget":
        return cls(d["mass"], d["centroid"], d["cov_n"],
                   tuple(d.get("weights", (1.0, 1.0, 1.0))),
                   d.get("mass_threshold", 0.0))


def local_coordinates(grid_size) -> np.ndarray:
    """Voxel-center coordinates in [0, 1]^3, flattened to ``(N, 3)``."""
    axes = [(np.arange(n) + 0.5) / n for n in grid_size]
    r = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return r.reshape(-1, 3)


def moments(values) -> GeometricMoments:
    """Mass, centroid and covariance of a substructure in its local frame.

    The returned mass is normalized by the voxel count.  An empty
    substructure yields zero mass and ``defined=False``.
    """
    values = np.asarray(values, dtype=float)
    w = values.ravel()
    m_raw = w.sum()
    if m_raw == 0:
        return GeometricMoments(0.0, np.full(3, np.nan), np.full((3, 3), np.nan),
                                "local", False)
    r = local_coordinates(values.shape)
    p = w @ r / m_raw
    cov = (r * w[:, None]).T @ r / m_raw - np.outer(p, p)
    cov = 0.5 * (cov + cov.T)
    return GeometricMoments(m_raw / w.size, p, cov, "local", True)


def local_to_global(M: GeometricMoments, A: AffineParams) -> GeometricMoments:
    J = A.jacobian
    mass = M.mass * abs(np.linalg.det(J))
    if not M.defined:
        return GeometricMoments(mass, M.centroid, M.cov, "global", False)
    p = A.t + J @ (M.centroid - 0.5)
    cov = J @ M.cov @ J.T
    return GeometricMoments(mass, p, 0.5 * (cov + cov.T), "global", True)


def measure(sub: Substructure) -> GeometricMoments:
    return local_to_global(moments(sub.values), sub.domain.affine)


def normalized_cov(cov, eps: float = COV_EPS) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    return cov / (np.trace(cov) + eps)


def decompose(cov, eps: float = COV_EPS, sym_tol: float = 1e-9) -> MomentDecomposition:
    """Split a covariance into size (trace), shape and orientation."""
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=sym_tol, rtol=0):
        raise ValueError("covariance is not symmetric")
    v = float(np.trace(cov))
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    for k in range(3):
        col = evecs[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            evecs[:, k] = -col
    shape = np.clip(evals, 0.0, None) / (v + eps)
    return MomentDecomposition(v, shape, evecs, cov / (v + eps))


def geometric_potential(values, A: AffineParams, target: GeometricTarget,
                        valid: bool = True, eps: float = COV_EPS):
    """Weighted MSE between world-frame moments and a target.

    Returns ``(loss, grad)`` with ``grad`` the exact derivative of the loss
    with respect to every substructure voxel value.  The centroid and
    covariance weights switch off when the world-frame mass is strictly
    below ``target.mass_threshold``; at equality they are active.
    """
    values = np.asarray(values, dtype=float)
    grad = np.zeros(values.shape)
    if not valid:
        return 0.0, grad
    lam0, lam1, lam2 = target.weights
    w = values.ravel()
    N = w.size
    J = A.jacobian
    detJ = abs(np.linalg.det(J))
    M = w.sum()

    m_g = M / N * detJ
    loss = lam0 * (m_g - target.mass) ** 2
    g = np.full(N, 2.0 * lam0 * (m_g - target.mass) * detJ / N)

    if M <= 0 or m_g < target.mass_threshold:
        return float(loss), g.reshape(values.shape)

    r = local_coordinates(values.shape)
    p = w @ r / M
    cov = (r * w[:, None]).T @ r / M - np.outer(p, p)
    p_g = A.t + J @ (p - 0.5)
    cov_g = J @ cov @ J.T
    v = np.trace(cov_g)
    denom = v + eps
    cov_n = cov_g / denom

    d = (r - p) @ J.T  # world-frame displacement of each voxel from the centroid

    if lam1:
        dp = p_g - target.centroid
        loss += lam1 * np.mean(dp ** 2)
        g += (2.0 * lam1 / 3.0) * (d @ dp) / M

    if lam2:
        diff = cov_n - target.cov_n
        loss += lam2 * np.mean(diff ** 2)
        G = (2.0 * lam2 / 9.0) * diff
        a = np.sum(G * cov_g)
        quad = np.einsum("ni,ij,nj->n", d, G, d)
        sq = np.einsum("ni,ni->n", d, d)
        g += (quad - a) / (M * denom) - a * (sq - v) / (M * denom ** 2)

    return float(loss), g.reshape(values.shape)


def target_from_substructure(sub: Substructure, weights=(1.0, 1.0, 1.0),
                             mass_threshold: float = 0.0) -> GeometricTarget:
    """Measure a substructure and freeze the result as a guidance target."""
    M = measure(sub)
    if not M.defined:
        return GeometricTarget(M.mass, np.zeros(3), np.zeros((3, 3)), weights, mass_threshold)
    return GeometricTarget(M.mass, M.centroid, normalized_cov(M.cov), weights, mass_threshold)
