"""Guided reverse diffusion over latents with a closed-form denoiser.

The prior is the empirical distribution of a latent dataset, so the
optimal denoiser is the softmax-weighted mixture of dataset members and
its Jacobian is a weighted covariance.  Guidance subtracts
``sigma^2 * grad L`` from the denoiser output before each Euler step.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import domains as dom
from .domains import AffineParams, ControlDomain
from .geometry import GeometricTarget, geometric_potential
from .surrogate import decode_volume, l_parse, v_parse
from .topology import (TopologicalPrior, dense_gradient, partition_diagram,
                       persistent_homology, topological_potential)

PARSING_MODES = ("V", "L-coarse", "L-local")
DOMAIN_KINDS = ("global", "cartesian", "interface", "curvilinear", "spherical", "cylindrical")
REFRESH_EVERY = 10
FREEZE_BELOW_SIGMA = 0.05


class SamplerError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ConstraintError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and denoiser


@dataclass(frozen=True)
class NoiseSchedule:
    n_steps: int
    sigma_max: float
    sigma_min: float
    rho: float
    sigmas: np.ndarray


def noise_schedule(n_steps: int = 100, sigma_max: float = 80.0, sigma_min: float = 0.01,
                   rho: float = 1.0) -> NoiseSchedule:
    """Power-interpolated noise levels from ``sigma_max`` down to ``sigma_min``."""
    if n_steps < 2:
        raise ValueError("need at least two steps")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("noise levels must satisfy 0 < sigma_min < sigma_max")
    if rho <= 0:
        raise ValueError("rho must be positive")
    i = np.arange(n_steps)
    a, b = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
    sig = (a + i / (n_steps - 1) * (b - a)) ** rho
    # the power round trip can leave the endpoints off by an ulp
    sig[0], sig[-1] = sigma_max, sigma_min
    return NoiseSchedule(n_steps, float(sigma_max), float(sigma_min), float(rho), sig)


def _mixture_weights(z, sigma, dataset):
    dataset = np.asarray(dataset, dtype=float)
    if len(dataset) == 0:
        raise ValueError("empirical denoiser needs a non-empty dataset")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    diff = dataset.reshape(len(dataset), -1) - np.asarray(z, dtype=float).reshape(1, -1)
    logits = -np.einsum("ij,ij->i", diff, diff) / (2.0 * sigma * sigma)
    return np.exp(logits - logsumexp(logits)), dataset


def empirical_denoiser(z, sigma: float, dataset) -> np.ndarray:
    """Posterior mean of a clean latent under the empirical prior."""
    w, dataset = _mixture_weights(z, sigma, dataset)
    return np.tensordot(w, dataset, axes=1)


def denoiser_vjp(z, sigma: float, dataset, g) -> np.ndarray:
    """``J^T g`` for the empirical denoiser (its Jacobian is symmetric)."""
    w, dataset = _mixture_weights(z, sigma, dataset)
    z0 = np.tensordot(w, dataset, axes=1)
    dev = (dataset - z0).reshape(len(dataset), -1)
    proj = dev @ np.asarray(g, dtype=float).ravel()
    return ((w * proj) @ dev).reshape(np.shape(z)) / (sigma * sigma)


# ---------------------------------------------------------------------------
# constraints


@dataclass
class DomainSpec:
    """How a constraint's control domains are built.

    ``params`` carries constructor options (e.g. ``selection_b`` for an
    interface, ``n_rays`` for spherical domains).  ``affines`` holds the
    resolved transforms, ``None`` marking an invalid slot.  Static domains
    keep them; dynamic ones are rebuilt from the decoded prediction.
    """
    kind: str = "global"
    grid_size: tuple = (32, 32, 32)
    params: dict = field(default_factory=dict)
    affines: list | None = None
    refresh: str = "static"

    def __post_init__(self):
        self.grid_size = tuple(int(g) for g in self.grid_size)
        if self.kind not in DOMAIN_KINDS:
            raise ConstraintError(f"unknown domain kind {self.kind!r}; expected one of {DOMAIN_KINDS}")
        if self.refresh not in ("static", "dynamic"):
            raise ConstraintError("refresh must be 'static' or 'dynamic'")
        if len(self.grid_size) != 3 or min(self.grid_size) < 1:
            raise ConstraintError(f"invalid domain grid size {self.grid_size}")

    def build(self, V, u) -> list:
        """Construct affines from a probability map; invalid slots are ``None``."""
        p = dict(self.params)
        g = self.grid_size
        if self.kind == "global":
            return [dom.global_domain(g)]
        if self.kind == "cartesian":
            return [dom.cartesian_domain(V, u, g, p.get("threshold", 0.9))]
        if self.kind == "interface":
            a, b = dom.interface_domain(V, u, p["selection_b"], g, p.get("k_dil", 5))
            return [a, b]
        if self.kind == "curvilinear":
            return dom.curvilinear_domains(V, u, g, p.get("subsample_indices"),
                                           n_planes=p.get("n_planes", 5),
                                           threshold=p.get("threshold", 0.9))
        if self.kind == "spherical":
            affs, valid = dom.spherical_domains(V, u, g, p.get("n_rays", 4), p.get("n_query", 128),
                                                mass_threshold=p.get("mass_threshold", 1e-6))
        else:
            affs, valid = dom.cylindrical_domains(V, u, g, p.get("n_z", 4), p.get("n_theta", 4),
                                                  p.get("n_query", 128),
                                                  mass_threshold=p.get("mass_threshold", 1e-6))
        it = iter(affs)
        return [next(it) if v else None for v in valid]

    def n_slots(self) -> int:
        if self.affines is not None:
            return len(self.affines)
        if self.kind in ("global", "cartesian"):
            return 1
        if self.kind == "interface":
            return 2
        if self.kind == "curvilinear":
            idx = self.params.get("subsample_indices")
            return len(idx) if idx is not None else self.params.get("n_planes", 5)
        if self.kind == "spherical":
            return self.params.get("n_rays", 4)
        return self.params.get("n_z", 4) * self.params.get("n_theta", 4)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "grid_size": list(self.grid_size), "params": self.params,
                "affines": None if self.affines is None else
                [None if a is None else a.to_dict() for a in self.affines],
                "refresh": self.refresh}

    @classmethod
    def from_dict(cls, d) -> "DomainSpec":
        affs = d.get("affines")
        if affs is not None:
            affs = [None if a is None else AffineParams.from_dict(a) for a in affs]
        return cls(d.get("kind", "global"), tuple(d.get("grid_size", (32, 32, 32))),
                   dict(d.get("params", {})), affs, d.get("refresh", "static"))


@dataclass
class ConstraintSpec:
    """A selection, its domains, and the targets guiding them.

    ``geometric`` lists one target (or ``None``) per domain slot.
    """
    selection: tuple
    domain: DomainSpec = field(default_factory=DomainSpec)
    geometric: list | None = None
    topological: TopologicalPrior | None = None
    lambda_geo: float = 1.0
    lambda_topo: float = 1.0
    temperature: float = 1.0
    parsing: str = "L-local"
    name: str = ""

    def __post_init__(self):
        self.selection = tuple(int(bool(x)) for x in self.selection)
        if self.topological is not None and not isinstance(self.topological, TopologicalPrior):
            self.topological = TopologicalPrior(self.topological)

    def validate(self, channels: int):
        if len(self.selection) != channels:
            raise ConstraintError(
                f"constraint {self.name!r}: selection has {len(self.selection)} entries, "
                f"the data has {channels} channels")
        if self.domain.kind == "interface":
            sb = self.domain.params.get("selection_b")
            if sb is None or len(sb) != channels:
                raise ConstraintError(
                    f"constraint {self.name!r}: interface domains need a 'selection_b' of "
                    f"length {channels}")
        if self.geometric is None and self.topological is None:
            raise ConstraintError(f"constraint {self.name!r}: needs a geometric or topological target")
        if self.lambda_geo < 0 or self.lambda_topo < 0:
            raise ConstraintError(f"constraint {self.name!r}: weights must be non-negative")
        if self.temperature <= 0:
            raise ConstraintError(f"constraint {self.name!r}: temperature must be positive")
        if self.parsing not in PARSING_MODES:
            raise ConstraintError(
                f"constraint {self.name!r}: parsing must be one of {PARSING_MODES}")
        if self.parsing == "L-coarse" and self.domain.kind != "global":
            raise ConstraintError(
                f"constraint {self.name!r}: coarse latent parsing uses a global domain")
        if self.geometric is not None and len(self.geometric) != self.domain.n_slots():
            raise ConstraintError(
                f"constraint {self.name!r}: {len(self.geometric)} geometric targets for "
                f"{self.domain.n_slots()} domain slots")
        if self.domain.refresh == "static" and self.domain.affines is None \
                and self.domain.kind != "global":
            raise ConstraintError(
                f"constraint {self.name!r}: static {self.domain.kind} domain is unresolved")

    def slot_selection(self, slot: int) -> tuple:
        """Selection used for a domain slot; the second side of an interface
        pair uses ``selection_b``."""
        if self.domain.kind == "interface" and slot == 1:
            return tuple(int(bool(x)) for x in self.domain.params["selection_b"])
        return self.selection

    def to_dict(self) -> dict:
        return {"name": self.name, "selection": list(self.selection),
                "domain": self.domain.to_dict(),
                "geometric": None if self.geometric is None else
                [None if t is None else t.to_dict() for t in self.geometric],
                "topological": None if self.topological is None else list(self.topological.betti),
                "lambda_geo": self.lambda_geo, "lambda_topo": self.lambda_topo,
                "temperature": self.temperature, "parsing": self.parsing}

    @classmethod
    def from_dict(cls, d) -> "ConstraintSpec":
        geo = d.get("geometric")
        if geo is not None:
            geo = [None if t is None else GeometricTarget.from_dict(t) for t in geo]
        topo = d.get("topological")
        return cls(tuple(d["selection"]), DomainSpec.from_dict(d.get("domain", {})), geo,
                   None if topo is None else TopologicalPrior(tuple(topo)),
                   float(d.get("lambda_geo", 1.0)), float(d.get("lambda_topo", 1.0)),
                   float(d.get("temperature", 1.0)), d.get("parsing", "L-local"),
                   d.get("name", ""))


def resolve_constraint(c: ConstraintSpec, V_ref, weights=(1.0, 1.0, 1.0),
                       mass_threshold: float = 0.0, with_targets: bool = True) -> ConstraintSpec:
    """Build domains from a reference map and, optionally, measure geometric
    targets on them.  Returns a new constraint with static domains."""
    from .geometry import target_from_substructure

    affines = c.domain.build(V_ref, c.selection)
    domain = DomainSpec(c.domain.kind, c.domain.grid_size, dict(c.domain.params), affines,
                        "static")
    geo = c.geometric
    if with_targets:
        geo = []
        for A in affines:
            if A is None:
                geo.append(None)
                continue
            sel = c.slot_selection(len(geo))
            sub = v_parse(V_ref, sel, [ControlDomain(domain.grid_size, A)]).substructures[0]
            geo.append(target_from_substructure(sub, weights, mass_threshold))
    return ConstraintSpec(c.selection, domain, geo, c.topological, c.lambda_geo,
                          c.lambda_topo, c.temperature, c.parsing, c.name)


# ---------------------------------------------------------------------------
# composite potential


class GuidanceProblem:
    """Constraints bound to a decoder resolution, with current domains."""

    def __init__(self, constraints, volume_shape, channels: int):
        self.constraints = list(constraints)
        self.volume_shape = tuple(int(n) for n in volume_shape)
        for c in self.constraints:
            c.validate(channels)
        self.affines = [list(c.domain.affines) if c.domain.affines is not None else
                        ([AffineParams.identity()] if c.domain.kind == "global" else
                         [None] * c.domain.n_slots())
                        for c in self.constraints]

    @property
    def dynamic(self) -> bool:
        return any(c.domain.refresh == "dynamic" for c in self.constraints)

    def refresh(self, z0):
        """Rebuild dynamic domains from the decoded prediction.

        A failed construction keeps the previous domains.
        """
        if not self.dynamic:
            return
        V = decode_volume(z0, self.volume_shape, 1.0).probs
        for k, c in enumerate(self.constraints):
            if c.domain.refresh != "dynamic":
                continue
            try:
                affs = c.domain.build(V, c.selection)
            except (dom.EmptyStructureError, dom.NoInterfaceError, ValueError):
                continue
            if len(affs) == len(self.affines[k]):
                self.affines[k] = affs

    def n_substructures(self) -> int:
        return sum(len(a) for a in self.affines)

    def evaluate(self, z0):
        """Composite potential and its gradient with respect to ``z0``."""
        z0 = np.asarray(z0, dtype=float)
        grad = np.zeros_like(z0)
        K = self.n_substructures()
        if K == 0:
            return 0.0, grad
        total = 0.0
        for c, affs in zip(self.constraints, self.affines):
            slots = [i for i, A in enumerate(affs) if A is not None]
            if not slots:
                continue
            dec = decode_volume(z0, self.volume_shape, c.temperature) if c.parsing == "V" else None
            g_probs = np.zeros_like(dec.probs) if dec is not None else None
            for slot in slots:
                domain = ControlDomain(c.domain.grid_size, affs[slot])
                sel = c.slot_selection(slot)
                if dec is not None:
                    parsed = v_parse(dec.probs, sel, [domain])
                else:
                    parsed = l_parse(z0, sel, [domain], c.temperature)
                sub = parsed.substructures[0]
                loss, g = 0.0, np.zeros(sub.values.shape)
                if c.geometric is not None and c.geometric[slot] is not None and c.lambda_geo:
                    lg, gg = geometric_potential(sub.values, sub.domain.affine, c.geometric[slot])
                    loss += c.lambda_geo * lg
                    g += c.lambda_geo * gg
                if c.topological is not None and c.lambda_topo:
                    diag = persistent_homology(sub.values)
                    keep, drop = partition_diagram(diag, c.topological)
                    lt, gt = topological_potential(sub.values, keep, drop)
                    loss += c.lambda_topo * lt
                    g += c.lambda_topo * dense_gradient(gt, sub.values.shape)
                total += loss
                if dec is not None:
                    g_probs += parsed.vjp([g / K])
                else:
                    grad += parsed.vjp([g / K])
            if dec is not None:
                grad += dec.vjp(g_probs)
        return total / K, grad


def composite_potential(z0, constraints, volume_shape):
    """One-shot evaluation of the averaged potential on a clean latent."""
    z0 = np.asarray(z0, dtype=float)
    return GuidanceProblem(constraints, volume_shape, z0.shape[0]).evaluate(z0)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SamplerConfig:
    n_steps: int = 100
    sigma_min: float = 0.01
    sigma_max: float = 80.0
    rho: float = 1.0
    churn: float = 0.0
    guidance: str = "full"  # "full" (through the denoiser) or "stop" (stop-gradient)
    seed: int = 0
    keep_trajectory: bool = False

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("n_steps must be at least 2")
        if self.guidance not in ("full", "stop"):
            raise ValueError("guidance must be 'full' or 'stop'")
        if self.churn < 0:
            raise ValueError("churn must be non-negative")

    def schedule(self) -> NoiseSchedule:
        return noise_schedule(self.n_steps, self.sigma_max, self.sigma_min, self.rho)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class SampleResult:
    labels: np.ndarray
    latent: np.ndarray
    loss_log: np.ndarray
    trajectory: list
    manifest: dict


def sample(config: SamplerConfig, dataset, constraints=(), volume_shape=None,
           seed: int | None = None) -> SampleResult:
    """Draw one guided sample.

    ``dataset`` is an array of latents ``(n, C, h, w, d)``; the final
    latent is decoded on ``volume_shape`` and argmaxed.
    """
    t_start = time.perf_counter()
    dataset = np.asarray(dataset, dtype=float)
    if dataset.ndim != 5 or len(dataset) == 0:
        raise ValueError("dataset must be a non-empty array of latents (n, C, h, w, d)")
    latent_shape = dataset.shape[1:]
    if volume_shape is None:
        volume_shape = latent_shape[1:]
    seed = config.seed if seed is None else seed
    problem = GuidanceProblem(constraints, volume_shape, latent_shape[0]) if constraints else None

    sched = config.schedule()
    sigmas = np.append(sched.sigmas, 0.0)
    rng = np.random.default_rng(seed)
    z = rng.normal(size=latent_shape) * sigmas[0]
    gamma = min(config.churn / config.n_steps, np.sqrt(2.0) - 1.0) if config.churn else 0.0

    losses = np.zeros(config.n_steps)
    traj = [z.copy()] if config.keep_trajectory else []
    for i in range(config.n_steps):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        if gamma > 0:
            sigma_hat = sigma * (1.0 + gamma)
            z = z + np.sqrt(sigma_hat ** 2 - sigma ** 2) * rng.normal(size=z.shape)
            sigma = sigma_hat
        D = empirical_denoiser(z, sigma, dataset)
        Dw = D
        if problem is not None:
            if problem.dynamic and i % REFRESH_EVERY == 0 and sigma >= FREEZE_BELOW_SIGMA:
                problem.refresh(D)
            loss, g = problem.evaluate(D)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise SamplerError("non-finite guidance loss or gradient", i)
            losses[i] = loss
            if config.guidance == "full":
                g = denoiser_vjp(z, sigma, dataset, g)
            Dw = D - sigma * sigma * g
        z = z + (sigma_next - sigma) * (z - Dw) / sigma
        if not np.all(np.isfinite(z)):
            raise SamplerError("latent became non-finite", i)
        if config.keep_trajectory:
            traj.append(z.copy())

    probs = decode_volume(z, volume_shape, 1.0).probs
    labels = probs.argmax(axis=0).astype(np.int64)
    manifest = {"config": config.to_dict(), "config_hash": config.digest(), "seed": int(seed),
                "schedule": sched.sigmas.tolist(), "loss": losses.tolist(),
                "wall_time": time.perf_counter() - t_start}
    return SampleResult(labels, z, losses, traj, manifest)
