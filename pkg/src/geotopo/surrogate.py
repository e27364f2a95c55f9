"""Procedural phantoms, the fixed latent encoder/decoder and parsing.

The decoder stands in for a learned neural field: latent logits on a
coarse grid are trilinearly interpolated at arbitrary world points and
pushed through a tempered channel softmax.  Every parsing routine returns
substructures together with a pullback that maps cotangents on the
substructure values back onto its source (voxel map or latent).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .domains import ControlDomain
from .geometry import Substructure
from .voxelcore import (TrilinearMap, boolean_subset, boolean_subset_vjp,
                        one_hot_encode, softmax_channels, softmax_vjp,
                        voxel_centers)

LOGIT_EPS = 1e-4
PART_KINDS = ("ellipsoid", "tube", "torus", "shell", "box")
_MAX_RETRIES = 100


class PhantomError(ValueError):
    pass


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PartSpec:
    """One primitive painted into a phantom.

    ``size`` holds the kind-specific dimensions (world units):

    * ellipsoid: ``radii`` (3)
    * box: ``half_extents`` (3)
    * shell: ``radii`` (3) and ``thickness``
    * torus: ``major`` and ``minor``
    * tube: ``points`` (k, 3) polyline in the part frame and ``radius``

    Jitter is drawn per sample: Gaussian centre offsets ``center_std``, a
    uniform size factor from ``scale_range``, additive relative size noise
    ``size_std`` and a random-axis rotation of angle ~ N(0, rotation_std).
    """
    kind: str
    channel: int
    center: tuple = (0.0, 0.0, 0.0)
    size: dict = field(default_factory=dict)
    euler: tuple = (0.0, 0.0, 0.0)
    center_std: tuple = (0.0, 0.0, 0.0)
    scale_range: tuple = (1.0, 1.0)
    size_std: float = 0.0
    rotation_std: float = 0.0
    probability: float = 1.0

    def validate(self, channels: int):
        if self.kind not in PART_KINDS:
            raise PhantomError(f"unknown part kind {self.kind!r}")
        if not 0 < self.channel < channels:
            raise PhantomError(
                f"part channel {self.channel} must be a foreground channel in [1, {channels})")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise PhantomError("scale range must be positive and ordered")
        required = {"ellipsoid": ("radii",), "box": ("half_extents",),
                    "shell": ("radii", "thickness"), "torus": ("major", "minor"),
                    "tube": ("points", "radius")}[self.kind]
        for key in required:
            if key not in self.size:
                raise PhantomError(f"{self.kind} part needs size entry {key!r}")
        for key, val in self.size.items():
            if key != "points" and np.any(np.asarray(val, dtype=float) <= 0):
                raise PhantomError(f"size entry {key!r} must be positive")
        if not 0.0 <= self.probability <= 1.0:
            raise PhantomError("part probability must lie in [0, 1]")


@dataclass
class PhantomSpec:
    channels: int
    shape: tuple
    parts: list
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.parts = [p if isinstance(p, PartSpec) else PartSpec(**p) for p in self.parts]

    def validate(self):
        if self.channels < 2:
            raise PhantomError("a phantom needs a background and at least one tissue channel")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise PhantomError(f"invalid volume shape {self.shape}")
        for p in self.parts:
            p.validate(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d) -> "PhantomSpec":
        return cls(d["channels"], tuple(d["shape"]), [PartSpec(**p) for p in d["parts"]],
                   d.get("seed", 0), d.get("name", "custom"))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x)}")


def euler_rotation(angles) -> np.ndarray:
    """Rotation ``Rz(a) @ Ry(b) @ Rx(c)`` for angles ``(a, b, c)``."""
    a, b, c = angles
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    Rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rx = np.array([[1, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return Rz @ Ry @ Rx


def _axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _draw_part(part: PartSpec, rng):
    """Sample one realization; returns ``None`` when the part is absent."""
    present = rng.random() < part.probability
    center = np.asarray(part.center, float) + rng.normal(size=3) * np.asarray(part.center_std, float)
    R = euler_rotation(part.euler)
    axis = rng.normal(size=3)
    angle = rng.normal() * part.rotation_std
    R = _axis_angle(axis, angle) @ R
    scale = rng.uniform(*part.scale_range)
    for _ in range(_MAX_RETRIES):
        size = {}
        ok = True
        for key, val in part.size.items():
            val = np.asarray(val, dtype=float)
            if key == "points":
                size[key] = val * scale
                continue
            noisy = val * (scale + part.size_std * rng.normal(size=val.shape))
            if np.any(noisy <= 0):
                ok = False
                break
            size[key] = noisy
        if ok and part.kind == "shell" and np.any(size["radii"] <= size["thickness"]):
            ok = False
        if ok and part.kind == "torus" and size["minor"] >= size["major"]:
            ok = False
        if ok:
            break
    else:
        raise PhantomError(f"could not draw valid {part.kind} geometry in {_MAX_RETRIES} tries")
    return present, center, R, size


def _inside(kind, q, size):
    """Membership of part-frame points ``q`` (..., 3)."""
    if kind == "ellipsoid":
        return np.sum((q / size["radii"]) ** 2, axis=-1) <= 1.0
    if kind == "box":
        return np.all(np.abs(q) <= size["half_extents"], axis=-1)
    if kind == "shell":
        outer = size["radii"]
        inner = outer - size["thickness"]
        return ((np.sum((q / outer) ** 2, axis=-1) <= 1.0)
                & (np.sum((q / inner) ** 2, axis=-1) > 1.0))
    if kind == "torus":
        rho = np.hypot(q[..., 0], q[..., 1])
        return (rho - size["major"]) ** 2 + q[..., 2] ** 2 <= size["minor"] ** 2
    if kind == "tube":
        pts = np.atleast_2d(size["points"])
        best = np.full(q.shape[:-1], np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            t = np.clip(((q - a) @ ab) / (ab @ ab), 0.0, 1.0)
            d = np.linalg.norm(q - a - t[..., None] * ab, axis=-1)
            best = np.minimum(best, d)
        return best <= size["radius"]
    raise PhantomError(f"unknown part kind {kind!r}")


def generate_phantom(spec: PhantomSpec, index: int):
    """Label grid of sample ``index`` plus its drawn part parameters.

    Later parts overwrite earlier ones.  Returns ``(labels, truth)`` where
    ``labels`` is an integer ``(H, W, D)`` grid (0 = background).
    """
    spec.validate()
    rng = np.random.default_rng([int(spec.seed), int(index)])
    X = voxel_centers(spec.shape)
    labels = np.zeros(spec.shape, dtype=np.int64)
    truth = []
    for part in spec.parts:
        present, center, R, size = _draw_part(part, rng)
        truth.append({"kind": part.kind, "channel": part.channel, "present": bool(present),
                      "center": center.tolist(), "rotation": R.tolist(),
                      "size": {k: np.asarray(v).tolist() for k, v in size.items()}})
        if not present:
            continue
        q = (X - center) @ R
        labels[_inside(part.kind, q, size)] = part.channel
    return labels, truth


def phantom_map(spec: PhantomSpec, index: int) -> np.ndarray:
    """One-hot voxel map ``(C, H, W, D)`` of a phantom sample."""
    labels, _ = generate_phantom(spec, index)
    return one_hot_encode(labels, spec.channels)


def phantom_family(name: str, shape=(32, 32, 32), seed: int = 0) -> PhantomSpec:
    """Bundled phantom families.

    * ``blobs``: one ellipsoid whose centre wanders mostly along x
    * ``two_blob``: two blobs, bridged by a tube in roughly a quarter of samples
    * ``two_chamber``: two touching chambers on separate channels
    * ``branched_tube``: a bent tube with a side branch
    * ``stacked_tori``: three rings stacked along z
    * ``annular_wall``: a spherical wall with small inclusions
    """
    if name == "blobs":
        parts = [PartSpec("ellipsoid", 1, size={"radii": (0.16, 0.12, 0.10)},
                          center_std=(0.06, 0.006, 0.006), scale_range=(0.9, 1.1),
                          rotation_std=0.15)]
        return PhantomSpec(2, shape, parts, seed, name)
    if name == "two_blob":
        parts = [
            PartSpec("ellipsoid", 1, center=(-0.17, 0.0, 0.0), size={"radii": (0.11, 0.11, 0.11)},
                     center_std=(0.015, 0.02, 0.02), scale_range=(0.9, 1.1)),
            PartSpec("ellipsoid", 1, center=(0.17, 0.0, 0.0), size={"radii": (0.11, 0.11, 0.11)},
                     center_std=(0.015, 0.02, 0.02), scale_range=(0.9, 1.1)),
            PartSpec("tube", 1, size={"points": [[-0.17, 0, 0], [0.17, 0, 0]], "radius": 0.05},
                     center_std=(0.0, 0.01, 0.01), probability=0.25),
        ]
        return PhantomSpec(2, shape, parts, seed, name)
    if name == "two_chamber":
        parts = [
            PartSpec("ellipsoid", 1, center=(-0.1, 0.0, 0.0), size={"radii": (0.14, 0.16, 0.18)},
                     center_std=(0.015, 0.015, 0.015), scale_range=(0.9, 1.1), rotation_std=0.1),
            PartSpec("ellipsoid", 2, center=(0.14, 0.0, 0.0), size={"radii": (0.12, 0.15, 0.16)},
                     center_std=(0.015, 0.015, 0.015), scale_range=(0.9, 1.1), rotation_std=0.1),
        ]
        return PhantomSpec(3, shape, parts, seed, name)
    if name == "branched_tube":
        parts = [
            PartSpec("tube", 1, size={"points": [[0.0, -0.05, -0.38], [0.0, 0.0, 0.0],
                                                 [0.05, 0.15, 0.2], [0.0, 0.3, 0.38]],
                                      "radius": 0.07},
                     center_std=(0.02, 0.02, 0.0), rotation_std=0.08, size_std=0.05),
            PartSpec("tube", 1, size={"points": [[0.0, 0.0, 0.0], [0.3, -0.1, 0.1]],
                                      "radius": 0.045},
                     center_std=(0.02, 0.02, 0.0), rotation_std=0.1, size_std=0.05),
        ]
        return PhantomSpec(2, shape, parts, seed, name)
    if name == "stacked_tori":
        parts = [PartSpec("torus", 1, center=(0.0, 0.0, z), size={"major": 0.2, "minor": 0.07},
                          center_std=(0.015, 0.015, 0.01), scale_range=(0.9, 1.1),
                          rotation_std=0.08)
                 for z in (-0.25, 0.0, 0.25)]
        return PhantomSpec(2, shape, parts, seed, name)
    if name == "annular_wall":
        parts = [PartSpec("shell", 1, size={"radii": (0.3, 0.3, 0.3), "thickness": 0.1},
                          center_std=(0.02, 0.02, 0.02), scale_range=(0.9, 1.1))]
        for k, d in enumerate([(1, 0, 0), (0, 1, 0), (0, 0, 1)]):
            parts.append(PartSpec("ellipsoid", 2, center=tuple(0.25 * np.array(d, float)),
                                  size={"radii": (0.04, 0.04, 0.04)},
                                  center_std=(0.02, 0.02, 0.02), probability=0.5))
        return PhantomSpec(3, shape, parts, seed, name)
    raise PhantomError(f"unknown phantom family {name!r}")


FAMILIES = ("blobs", "two_blob", "two_chamber", "branched_tube", "stacked_tori", "annular_wall")


# ---------------------------------------------------------------------------
# encoder / decoder


def encode(V, f: int) -> np.ndarray:
    """Average-pool each channel by ``f`` and map to logits.

    ``log(q + eps) - log(1 / C)``: a uniform mixture maps to zero logits.
    """
    V = np.asarray(V, dtype=float)
    C, H, W, D = V.shape
    f = int(f)
    if f < 1 or H % f or W % f or D % f:
        raise ValueError(f"downsampling factor {f} does not divide volume shape {V.shape[1:]}")
    q = V.reshape(C, H // f, f, W // f, f, D // f, f).mean(axis=(2, 4, 6))
    return np.log(q + LOGIT_EPS) - np.log(1.0 / C)


class _OperatorCache:
    """Trilinear operators keyed by grid shape and query geometry."""

    def __init__(self, maxsize: int = 64):
        self.maxsize = maxsize
        self._store = {}

    def get(self, shape, points, key=None) -> TrilinearMap:
        points = np.asarray(points, dtype=float)
        if key is None:
            key = hashlib.sha1(points.tobytes()).hexdigest() + str(points.shape)
        key = (tuple(shape), key)
        op = self._store.get(key)
        if op is None:
            if len(self._store) >= self.maxsize:
                self._store.pop(next(iter(self._store)))
            op = TrilinearMap(shape, points)
            self._store[key] = op
        return op


_OPS = _OperatorCache()


def _domain_key(domain: ControlDomain) -> str:
    A = domain.affine
    h = hashlib.sha1(A.R.tobytes() + A.s.tobytes() + A.t.tobytes()).hexdigest()
    return f"{domain.grid_size}:{h}"


def _full_grid_key(shape) -> str:
    return f"voxels:{tuple(shape)}"


class FieldDecode:
    """Decoded channel probabilities at query points, with a VJP to ``z``."""

    def __init__(self, z, op: TrilinearMap, temperature: float):
        self.op = op
        self.temperature = float(temperature)
        self.probs = softmax_channels(op(z), self.temperature)

    def vjp(self, cotangent) -> np.ndarray:
        return self.op.vjp(softmax_vjp(self.probs, cotangent, self.temperature))


def decode_field(z, points, temperature: float = 1.0, cache_key=None) -> FieldDecode:
    """Trilinear interpolation of latent logits at world points, then softmax.

    ``result.probs`` has shape ``(C, *points.shape[:-1])``.
    """
    z = np.asarray(z, dtype=float)
    op = _OPS.get(z.shape[1:], points, cache_key)
    return FieldDecode(z, op, temperature)


def decode_volume(z, shape, temperature: float = 1.0) -> FieldDecode:
    """Decode at every voxel centre of a full-resolution grid ``shape``."""
    shape = tuple(int(n) for n in shape)
    z = np.asarray(z, dtype=float)
    key = _full_grid_key(shape)
    op = _OPS._store.get((tuple(z.shape[1:]), key))
    if op is None:
        op = _OPS.get(z.shape[1:], voxel_centers(shape), key)
    return FieldDecode(z, op, temperature)


# ---------------------------------------------------------------------------
# parsing


@dataclass
class ParseResult:
    """Substructures from one parse plus the pullback to the source."""
    substructures: list
    _pullback: object = None

    def vjp(self, cotangents) -> np.ndarray:
        """Map per-substructure cotangents onto the source array."""
        return self._pullback(cotangents)


def v_parse(V, u, domains) -> ParseResult:
    """Subset a voxel map and sample it over each control domain."""
    V = np.asarray(V, dtype=float)
    S = boolean_subset(V, u)
    ops = [_OPS.get(S.shape, d.points, _domain_key(d)) for d in domains]
    subs = [Substructure(op(S), d) for op, d in zip(ops, domains)]

    def pullback(cots):
        gS = np.zeros(S.shape)
        for op, c in zip(ops, cots):
            gS += op.vjp(c)
        return boolean_subset_vjp(V, u, gS)

    return ParseResult(subs, pullback)


def l_parse(z, u, domains, temperature: float = 1.0) -> ParseResult:
    """Decode the latent directly at each domain's points, then subset.

    A global identity domain at reduced grid size gives the coarse variant;
    transformed templates give localized high-resolution parsing.
    """
    z = np.asarray(z, dtype=float)
    decs = [decode_field(z, d.points, temperature, _domain_key(d)) for d in domains]
    subs = [Substructure(boolean_subset(dec.probs, u), d) for dec, d in zip(decs, domains)]

    def pullback(cots):
        g = np.zeros(z.shape)
        for dec, c in zip(decs, cots):
            g += dec.vjp(boolean_subset_vjp(dec.probs, u, c))
        return g

    return ParseResult(subs, pullback)


def v_parse_latent(z, u, domains, volume_shape, temperature: float = 1.0) -> ParseResult:
    """Full-resolution decode followed by :func:`v_parse`, pulled back to ``z``."""
    dec = decode_volume(z, volume_shape, temperature)
    V = dec.probs
    inner = v_parse(V, u, domains)
    return ParseResult(inner.substructures, lambda cots: dec.vjp(inner.vjp(cots)))
