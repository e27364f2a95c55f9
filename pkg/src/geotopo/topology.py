"""Persistent homology of substructures and the preserve/suppress potential.

The cubical complex treats voxels as closed unit cubes, so foreground
sets are 26-connected and their complements 6-connected.  Substructures
are filtered by super-level sets ``{S >= tau}`` as ``tau`` decreases to
0; only voxels with positive intensity ever enter.  Classes still alive
at the end are essential and their death is pinned to 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.ndimage as ndi

from ._cubical import cell_values, reduce_filtration

MAX_VOXELS = 96 ** 3


@dataclass(frozen=True)
class PersistencePoint:
    dim: int
    birth: float
    death: float
    birth_coord: tuple
    death_coord: tuple | None
    essential: bool = False

    @property
    def persistence(self) -> float:
        return self.birth - self.death


@dataclass
class PersistenceDiagram:
    points: list
    shape: tuple

    def by_dim(self, dim: int) -> list:
        return [p for p in self.points if p.dim == dim]

    def essential_counts(self) -> tuple:
        return tuple(sum(1 for p in self.points if p.essential and p.dim == d)
                     for d in range(3))

    def to_table(self) -> list:
        """Flat records ``(dim, birth, death, b-coord, d-coord, essential)``."""
        return [{"dim": p.dim, "birth": p.birth, "death": p.death,
                 "birth_coord": list(p.birth_coord),
                 "death_coord": None if p.death_coord is None else list(p.death_coord),
                 "essential": p.essential} for p in self.points]


@dataclass(frozen=True)
class TopologicalPrior:
    """Desired numbers of components, loops and voids."""
    betti: tuple

    def __post_init__(self):
        b = tuple(int(x) for x in self.betti)
        if len(b) != 3 or min(b) < 0:
            raise ValueError("prior must be three non-negative integers")
        object.__setattr__(self, "betti", b)


def _sort_key(p: PersistencePoint):
    # two faces of one voxel can carry identical births; the death voxel
    # settles the order
    return (p.dim, -p.persistence, -p.birth, p.birth_coord, p.death_coord or ())


@lru_cache(maxsize=8)
def _dim_major_order_cached(G):
    _, _, dim = cell_values(np.zeros(tuple((g - 1) // 2 for g in G)))
    d = dim.ravel()
    return np.argsort(d, kind="stable")


def _dim_major_order(G):
    """Linear cell indices sorted by (dimension, index); the filtration
    order is a stable sort of this by decreasing value."""
    return _dim_major_order_cached(tuple(int(g) for g in G))


def persistent_homology(S, union_find_dim0: bool = True, dual_top: bool = True) -> PersistenceDiagram:
    """Super-level persistence diagram in dimensions 0, 1 and 2.

    Every point records the voxel coordinates whose intensities set its
    birth and death.  Zero-persistence pairs are dropped.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 3:
        raise ValueError("substructure must be a 3D array")
    if S.size > MAX_VOXELS:
        raise ValueError(f"substructure has {S.size} voxels; the cap is {MAX_VOXELS}")
    if not np.all(np.isfinite(S)):
        raise ValueError("substructure contains non-finite values")
    value, creator, dim = cell_values(S)
    G = value.shape
    value, creator, dim = value.ravel(), creator.ravel(), dim.ravel()
    base = _dim_major_order(G)
    # excluded cells (value <= 0) trail the filtered complex; they only
    # serve the dual union-find for voids
    order = base[np.argsort(-value[base], kind="stable")]
    n_inc = int(np.count_nonzero(value > 0))
    order_of = np.empty(value.size, dtype=np.int64)
    order_of[order] = np.arange(len(order))
    births, deaths, essential = reduce_filtration(
        order, dim[order].astype(np.int64), order_of, G[0], G[1], G[2],
        union_find_dim0, n_inc, dual_top)

    def coord(pos):
        return tuple(int(x) for x in np.unravel_index(creator[order[pos]], S.shape))

    pts = []
    for b, e in zip(births, deaths):
        vb, ve = value[order[b]], value[order[e]]
        if vb == ve:
            continue
        pts.append(PersistencePoint(int(dim[order[b]]), float(vb), float(ve),
                                    coord(b), coord(e), False))
    for b in essential:
        pts.append(PersistencePoint(int(dim[order[b]]), float(value[order[b]]), 0.0,
                                    coord(b), None, True))
    pts.sort(key=_sort_key)
    return PersistenceDiagram(pts, S.shape)


def _euler_characteristic(B):
    value, _, dim = cell_values(np.asarray(B, dtype=float))
    inc = value > 0
    return sum((-1) ** k * int(np.count_nonzero(inc & (dim == k))) for k in range(4))


def betti_numbers(B) -> tuple:
    """Betti numbers of a binary volume (26-connected set, 6-connected gaps).

    Components and voids come from connected-component labelling; loops
    follow from the Euler characteristic of the union of voxel cubes.
    """
    B = np.asarray(B, dtype=bool)
    if not B.any():
        return (0, 0, 0)
    _, b0 = ndi.label(B, structure=np.ones((3, 3, 3)))
    comp, n_comp = ndi.label(~np.pad(B, 1), structure=ndi.generate_binary_structure(3, 1))
    b2 = n_comp - 1  # the padded exterior is one unbounded component
    chi = _euler_characteristic(B)
    b1 = b0 + b2 - chi
    return (int(b0), int(b1), int(b2))


def partition_diagram(D: PersistenceDiagram, prior):
    """Split points into the top-``prior[i]`` most persistent per dimension
    (preserved) and the rest (suppressed)."""
    if not isinstance(prior, TopologicalPrior):
        prior = TopologicalPrior(prior)
    prior = prior.betti
    keep, drop = [], []
    for dim in range(3):
        pts = sorted(D.by_dim(dim), key=_sort_key)
        keep.extend(pts[:prior[dim]])
        drop.extend(pts[prior[dim]:])
    return keep, drop


def topological_potential(S, preserve, suppress):
    """Preserve/suppress loss on birth and death intensities.

    Preserved points are pushed apart (negative squared persistence),
    suppressed points pulled together.  Essential points use a death
    intensity of 0 and receive no death gradient.  Returns
    ``(loss, grad)`` with ``grad`` a dict from voxel coordinate tuples to
    derivatives; only birth/death voxels appear in it.
    """
    S = np.asarray(S, dtype=float)

    def check(coord):
        if len(coord) != S.ndim or any(c < 0 or c >= n for c, n in zip(coord, S.shape)):
            raise IndexError(f"coordinate {coord} outside substructure of shape {S.shape}")
        return tuple(int(c) for c in coord)

    loss = 0.0
    grad = {}
    for sign, group in ((-1.0, preserve), (1.0, suppress)):
        for p in group:
            rb = check(p.birth_coord)
            rd = None if (p.essential or p.death_coord is None) else check(p.death_coord)
            diff = S[rb] - (0.0 if rd is None else S[rd])
            loss += sign * diff * diff
            grad[rb] = grad.get(rb, 0.0) + sign * 2.0 * diff
            if rd is not None:
                grad[rd] = grad.get(rd, 0.0) - sign * 2.0 * diff
    return float(loss), grad


def dense_gradient(grad: dict, shape) -> np.ndarray:
    out = np.zeros(shape)
    for coord, val in grad.items():
        out[coord] += val
    return out
