"""Evaluation metrics: geometric fidelity, Betti precision, FMD and 1-NNA."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .geometry import decompose, moments
from .topology import betti_numbers
from .voxelcore import voxel_centers

DISPLAY_SCALE = {"mass": 1e5, "centroid": 1e4, "cov": 1e5}
STD_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# geometric fidelity and Betti precision


def geometric_fidelity(measured, targets) -> dict:
    """Mean absolute moment errors over matched (measured, target) pairs.

    Both arguments are sequences of objects with ``mass``, ``centroid`` and
    a normalized covariance (``cov_n``); undefined measurements (NaN
    centroid) are skipped for centroid and covariance.
    """
    measured, targets = list(measured), list(targets)
    if len(measured) != len(targets):
        raise ValueError(f"{len(measured)} measurements for {len(targets)} targets")
    if not measured:
        raise ValueError("nothing to compare")
    dm, dc, dS = [], [], []
    for m, t in zip(measured, targets):
        dm.append(abs(float(m.mass) - float(t.mass)))
        c = np.asarray(m.centroid, float)
        if np.all(np.isfinite(c)):
            dc.append(np.mean(np.abs(c - np.asarray(t.centroid, float))))
            dS.append(np.mean(np.abs(np.asarray(m.cov_n, float) - np.asarray(t.cov_n, float))))
    raw = {"mass": float(np.mean(dm)),
           "centroid": float(np.mean(dc)) if dc else float("nan"),
           "cov": float(np.mean(dS)) if dS else float("nan")}
    out = dict(raw)
    for k, s in DISPLAY_SCALE.items():
        out[f"{k}_display"] = raw[k] * s
    out["count"] = len(measured)
    return out


def betti_precision(label_volumes, selection, prior) -> tuple:
    """Fraction of argmax volumes whose selected structure has the prior's
    Betti number, per dimension."""
    vols = list(label_volumes)
    if not vols:
        raise ValueError("need at least one sample")
    sel = np.flatnonzero(np.asarray(selection, dtype=bool))
    prior = tuple(int(b) for b in prior)
    hits = np.zeros(3)
    for L in vols:
        L = np.asarray(L)
        if L.ndim == 4:  # probability or one-hot map
            L = L.argmax(axis=0)
        b = betti_numbers(np.isin(L, sel))
        hits += np.array(b) == np.array(prior)
    return tuple(float(h) for h in hits / len(vols))


# ---------------------------------------------------------------------------
# morphological features and FMD


@dataclass
class FeatureNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "FeatureNormalizer":
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std


def morph_features(V, channels=None) -> np.ndarray:
    """Per-channel mass, world centroid and normalized covariance
    eigenvalues, concatenated (7 values per channel).

    ``V`` is a label grid or a ``(C, H, W, D)`` map.  Absent tissues get
    zero mass, a centred centroid and zero eigenvalues.
    """
    V = np.asarray(V)
    if V.ndim == 3:
        C = int(V.max()) + 1 if channels is None else channels
        V = np.stack([(V == c) for c in range(C)]).astype(float)
    feats = []
    for S in V:
        M = moments(S)
        if not M.defined:
            feats.append(np.zeros(7))
            continue
        centroid = M.centroid - 0.5  # local [0,1] frame to world cube
        evals = decompose(M.cov).shape
        feats.append(np.concatenate([[M.mass], centroid, evals]))
    return np.concatenate(feats)


def _sqrtm_psd(A):
    A = 0.5 * (A + A.T)
    w, U = np.linalg.eigh(A)
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between two Gaussians.

    The trace of ``(cov1 cov2)^(1/2)`` is evaluated as the trace of the
    symmetric PSD matrix ``(s1 cov2 s1)^(1/2)`` with ``s1 = cov1^(1/2)``.
    """
    s1 = _sqrtm_psd(cov1)
    cross = _sqrtm_psd(s1 @ cov2 @ s1)
    d = np.sum((np.asarray(mu1) - np.asarray(mu2)) ** 2)
    return float(max(d + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross), 0.0))


def fmd(real_features, synth_features, normalizer: FeatureNormalizer | None = None) -> float:
    """Frechet morphological distance on features normalized by real-set stats."""
    R = np.asarray(real_features, dtype=float)
    S = np.asarray(synth_features, dtype=float)
    if len(R) < 2 or len(S) < 2:
        raise ValueError("FMD needs at least two samples on each side")
    norm = normalizer or FeatureNormalizer.fit(R)
    R, S = norm(R), norm(S)
    return frechet_distance(R.mean(0), np.cov(R, rowvar=False).reshape(R.shape[1], -1),
                            S.mean(0), np.cov(S, rowvar=False).reshape(S.shape[1], -1))


# ---------------------------------------------------------------------------
# point clouds and 1-NNA


def farthest_point_sample(points, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of ``k`` points starting at ``start``."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    k = min(k, n)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start % n
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return points[chosen]


def tissue_cloud(labels, channel: int, k: int = 64, start: int = 0):
    """FPS cloud of a tissue's voxel centres (world units), or ``None`` if absent."""
    labels = np.asarray(labels)
    mask = labels == channel
    if not mask.any():
        return None
    pts = voxel_centers(labels.shape)[mask]
    return farthest_point_sample(pts, k, start)


def emd(a, b) -> float:
    """Exact earth mover's distance between equal-size clouds (mean matched
    Euclidean distance under the optimal assignment)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) != len(b):
        raise ValueError("exact assignment EMD needs clouds of equal size")
    cost = cdist(a, b)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].mean())


def _pairwise_emd(clouds):
    n = len(clouds)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = emd(clouds[i], clouds[j])
    return D


def one_nna_from_distances(D, n_real: int) -> float:
    """Leave-one-out 1-NN accuracy given a full distance matrix whose first
    ``n_real`` rows are real samples."""
    D = np.array(D, dtype=float)
    n = len(D)
    np.fill_diagonal(D, np.inf)
    is_real = np.arange(n) < n_real
    nn = np.argmin(D, axis=1)
    return float(np.mean(is_real[nn] == is_real))


def one_nna(real_clouds, synth_clouds) -> float:
    """1-NNA between two lists of equal-size point clouds (one tissue)."""
    real_clouds, synth_clouds = list(real_clouds), list(synth_clouds)
    if len(real_clouds) < 2 or len(synth_clouds) < 2:
        raise ValueError("1-NNA needs at least two clouds on each side")
    return one_nna_from_distances(_pairwise_emd(real_clouds + synth_clouds), len(real_clouds))


def one_nna_volumes(real_labels, synth_labels, channels, points_per_cloud: int = 64) -> dict:
    """Per-tissue 1-NNA over FPS clouds of label volumes, and their mean.

    Tissues absent from some volume are dropped from that side; a tissue
    left with fewer than two clouds on a side is excluded with a warning.
    """
    per = {}
    for c in channels:
        R = [x for x in (tissue_cloud(L, c, points_per_cloud) for L in real_labels) if x is not None]
        S = [x for x in (tissue_cloud(L, c, points_per_cloud) for L in synth_labels) if x is not None]
        k = min([len(x) for x in R + S], default=0)
        if len(R) < 2 or len(S) < 2 or k == 0:
            warnings.warn(f"tissue {c} excluded from 1-NNA: too few non-empty volumes",
                          UserWarning, stacklevel=2)
            continue
        # equal cloud sizes for exact assignment
        R = [x[:k] for x in R]
        S = [x[:k] for x in S]
        per[int(c)] = one_nna(R, S)
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return {"per_tissue": per, "mean": mean}
