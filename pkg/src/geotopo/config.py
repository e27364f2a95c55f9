"""Task configuration files (JSON with a schema version).

A task names a latent dataset, a reference map for static domains and
targets, a list of constraints, sampler settings and output options.
Floats are written with ``repr`` precision, so a config round-trips
bit-exactly.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gvox
from .sampler import ConstraintError, ConstraintSpec, SamplerConfig, resolve_constraint
from .surrogate import PhantomSpec, encode, phantom_family, phantom_map
from .voxelcore import one_hot_encode

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    """Either a bundled phantom family or a directory of GVOX label volumes."""
    family: str | None = "blobs"
    shape: tuple = (32, 32, 32)
    count: int = 64
    seed: int = 0
    factor: int = 2
    path: str | None = None
    spec: dict | None = None

    def phantom_spec(self) -> PhantomSpec:
        if self.spec is not None:
            return PhantomSpec.from_dict(self.spec)
        return phantom_family(self.family, tuple(self.shape), self.seed)

    def channels(self) -> int:
        if self.path is not None:
            return load_dataset_dir(self.path)[1]
        return self.phantom_spec().channels

    def volume_shape(self) -> tuple:
        if self.path is not None:
            return load_dataset_dir(self.path)[0][0].shape
        return tuple(int(n) for n in self.shape)

    def voxel_maps(self) -> list:
        if self.path is not None:
            labels, C = load_dataset_dir(self.path)
            return [one_hot_encode(L, C) for L in labels]
        spec = self.phantom_spec()
        return [phantom_map(spec, i) for i in range(self.count)]

    def latents(self) -> np.ndarray:
        return np.stack([encode(V, self.factor) for V in self.voxel_maps()])


@dataclass
class ReferenceConfig:
    """Map used to build static domains and measure targets.

    By default it is a phantom of the dataset family drawn with a separate
    seed, so the target is never a dataset member.
    """
    index: int = 0
    seed: int = 1000
    path: str | None = None

    def voxel_map(self, dataset: DatasetConfig) -> np.ndarray:
        if self.path is not None:
            arr, C = gvox.load(self.path)
            return arr if arr.ndim == 4 else one_hot_encode(arr.astype(np.int64), C)
        spec = dataset.phantom_spec()
        spec.seed = self.seed
        return phantom_map(spec, self.index)


@dataclass
class OutputConfig:
    dir: str = "out"
    renders: bool = False
    wireframes: bool = False


@dataclass
class TaskConfig:
    name: str = "task"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    constraints: list = field(default_factory=list)  # raw dicts, see resolve()
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seeds: list = field(default_factory=lambda: [0])
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "name": self.name,
                "dataset": dict(self.dataset.__dict__, shape=list(self.dataset.shape)),
                "reference": dict(self.reference.__dict__),
                "constraints": copy.deepcopy(self.constraints),
                "sampler": self.sampler.to_dict(), "seeds": list(self.seeds),
                "output": dict(self.output.__dict__)}

    def digest(self) -> str:
        return hashlib.sha256(dumps(self.to_dict()).encode()).hexdigest()

    def resolve(self, V_ref=None, channels=None) -> list:
        """Turn raw constraint entries into :class:`ConstraintSpec` objects.

        Entries with a ``target`` block of source ``reference`` get static
        domains and geometric targets measured on the reference map.
        Every constraint is validated against the channel count.
        """
        channels = self.dataset.channels() if channels is None else channels
        out = []
        for k, raw in enumerate(self.constraints):
            raw = dict(raw)
            target = raw.pop("target", None)
            try:
                c = ConstraintSpec.from_dict(raw)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"constraint {k}: {exc}") from exc
            if not c.name:
                c.name = f"constraint{k}"
            if len(c.selection) != channels:
                raise ConstraintError(
                    f"constraint {c.name!r}: selection has {len(c.selection)} entries, "
                    f"the data has {channels} channels")
            if target is not None:
                if target.get("source", "reference") != "reference":
                    raise ConfigError(f"constraint {c.name!r}: unknown target source")
                if V_ref is None:
                    V_ref = self.reference.voxel_map(self.dataset)
                refresh = c.domain.refresh
                c = resolve_constraint(c, V_ref, tuple(target.get("weights", (1.0, 1.0, 1.0))),
                                       float(target.get("mass_threshold", 0.0)),
                                       with_targets=target.get("geometric", True))
                c.domain.refresh = refresh
            c.validate(channels)
            out.append(c)
        return out


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default)


def _default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def task_from_dict(d) -> TaskConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    known = {"schema_version", "name", "dataset", "reference", "constraints", "sampler",
             "seeds", "output"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    try:
        ds = DatasetConfig(**d.get("dataset", {}))
        ds.shape = tuple(ds.shape)
        ref = ReferenceConfig(**d.get("reference", {}))
        sampler = SamplerConfig(**d.get("sampler", {}))
        out = OutputConfig(**d.get("output", {}))
    except TypeError as exc:
        raise ConfigError(f"malformed config section: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    constraints = d.get("constraints", [])
    if not isinstance(constraints, list):
        raise ConfigError("constraints must be a list")
    seeds = d.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    if ds.path is None and ds.family is None and ds.spec is None:
        raise ConfigError("dataset needs a family, a spec or a path")
    if ds.factor < 1:
        raise ConfigError("dataset factor must be a positive integer")
    return TaskConfig(d.get("name", "task"), ds, ref, constraints, sampler, seeds, out)


def load_task(path) -> TaskConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return task_from_dict(d)


def save_task(task: TaskConfig, path) -> None:
    Path(path).write_text(dumps(task.to_dict()) + "\n")


def load_dataset_dir(path):
    """Label volumes and channel count from a directory written by gen-dataset."""
    path = Path(path)
    manifest = path / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"{path} has no manifest.json")
    m = json.loads(manifest.read_text())
    labels = []
    for entry in m["entries"]:
        arr, _ = gvox.load(path / entry["file"])
        labels.append(arr.astype(np.int64))
    if not labels:
        raise ConfigError(f"dataset {path} is empty")
    return labels, int(m["channels"])
