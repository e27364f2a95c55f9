"""Command-line entry point: ``geotopo <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import gvox
from .config import (ConfigError, DatasetConfig, TaskConfig, dumps, load_dataset_dir,
                     load_task, task_from_dict)
from .domains import ControlDomain, make_template
from .geometry import GeometricTarget, measure, normalized_cov
from .metrics import (FeatureNormalizer, betti_precision, fmd, geometric_fidelity,
                      morph_features, one_nna_volumes)
from .presets import preset, preset_names
from .sampler import ConstraintError, SamplerError, sample
from .surrogate import (PhantomError, PhantomSpec, encode, generate_phantom, l_parse,
                        phantom_family, v_parse)
from .topology import betti_numbers
from .voxelcore import one_hot_encode

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("geotopo")


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n")


def _task(args) -> TaskConfig:
    if getattr(args, "preset", None):
        try:
            task = task_from_dict(preset(args.preset))
        except KeyError as exc:
            raise CliError(str(exc.args[0])) from exc
    elif args.config:
        if not Path(args.config).exists():
            raise CliError(f"config file {args.config} not found")
        task = load_task(args.config)
    else:
        raise CliError("this command needs --config FILE or --preset NAME")
    if args.seed is not None:
        task.sampler.seed = args.seed
    return task


def _out_dir(args, default) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _jobs(args) -> int:
    return max(1, args.jobs or os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# gen-dataset


def cmd_gen_dataset(args) -> int:
    if args.spec:
        try:
            spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CliError(f"cannot read phantom spec {args.spec}: {exc}") from exc
    else:
        spec = phantom_family(args.family, tuple(args.shape))
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    if args.count < 0:
        raise CliError("count must be non-negative")
    out = _out_dir(args, "dataset")
    entries = []
    for i in range(args.count):
        labels, truth = generate_phantom(spec, i)
        name = f"phantom_{i:05d}.gvox"
        gvox.save(out / name, labels.astype(np.uint8), spec.channels)
        entries.append({"index": i, "file": name, "sha256": _sha256(out / name),
                        "truth": truth})
    manifest = {"seed": spec.seed, "spec": spec.to_dict(), "spec_hash": spec.digest(),
                "channels": spec.channels, "shape": list(spec.shape), "count": args.count,
                "entries": entries}
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {args.count} volumes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def _sample_one(payload):
    task_dict, seed, constraints, latents, shape = payload
    task = task_from_dict(task_dict)
    return seed, sample(task.sampler, latents, constraints, shape, seed=seed)


def _render(labels, path):
    from PIL import Image

    H, W, D = labels.shape
    top = max(int(labels.max()), 1)
    slices = [labels[H // 2], labels[:, W // 2], labels[:, :, D // 2]]
    h = max(s.shape[0] for s in slices)
    tiles = [np.pad(s, ((0, h - s.shape[0]), (0, 1))) for s in slices]
    img = (np.concatenate(tiles, axis=1) * (255 // top)).astype(np.uint8)
    Image.fromarray(img).save(path)


def cmd_sample(args) -> int:
    task = _task(args)
    if args.steps is not None:
        task.sampler.n_steps = args.steps
    seeds = args.seeds if args.seeds else task.seeds
    channels = task.dataset.channels()
    constraints = task.resolve(channels=channels)  # pre-flight validation
    out = _out_dir(args, task.output.dir)
    latents = task.dataset.latents()
    shape = task.dataset.volume_shape()
    log.info("sampling %d seed(s) with %d constraint(s)", len(seeds), len(constraints))
    payloads = [(task.to_dict(), s, constraints, latents, shape) for s in seeds]
    jobs = min(_jobs(args), len(seeds)) if seeds else 1
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sample_one, payloads))
    else:
        results = [_sample_one(p) for p in payloads]
    for seed, res in results:
        stem = f"sample_{seed:05d}"
        gvox.save(out / f"{stem}.gvox", res.labels.astype(np.uint8), channels)
        manifest = dict(res.manifest, task=task.name, task_hash=task.digest(),
                        volume=f"{stem}.gvox")
        manifest.pop("wall_time")
        _write_json(out / f"{stem}.run.json", manifest)
        # wall-clock time lives apart from the manifest so reruns stay identical
        (out / f"{stem}.time").write_text(f"{res.manifest['wall_time']:.6f}\n")
        if task.output.renders or args.render:
            _render(res.labels, out / f"{stem}.png")
    if task.output.wireframes:
        _export_wireframes(constraints, out / "domains.json")
    print(f"wrote {len(results)} sample(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# measure


def _load_volumes(paths):
    vols, failed = [], []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise CliError(f"{p} does not exist")
        files =sorted(p.glob("*.gvox")) if p.is_dir() else [p]
        for f in files:
            try:
                arr, C = gvox.load(f)
                vols.append((str(f), arr, C))
            except (OSError, gvox.GVoxError) as exc:
                failed.append({"volume": str(f), "error": str(exc)})
    return vols, failed


def _as_map(arr, C):
    return arr if arr.ndim == 4 else one_hot_encode(arr.astype(np.int64), C)


def measure_volume(V, constraints):
    """Global-frame moments, Betti numbers and validity per constraint slot."""
    labels = V.argmax(axis=0)
    out = []
    for c in constraints:
        try:
            affs = c.domain.build(V, c.selection) if c.domain.refresh == "dynamic" \
                else c.domain.affines or [None]
        except ValueError as exc:
            affs = [None] * c.domain.n_slots()
            log.info("domain construction failed for %s: %s", c.name, exc)
        if c.domain.kind == "global":
            affs = c.domain.affines or [ControlDomain(c.domain.grid_size).affine]
        slots = []
        for k, A in enumerate(affs):
            rec = {"slot": k, "valid": A is not None}
            if A is not None:
                sub = v_parse(V, c.slot_selection(k), [ControlDomain(c.domain.grid_size, A)])
                M = measure(sub.substructures[0])
                rec.update({"defined": M.defined, "mass": M.mass,
                            "centroid": M.centroid.tolist(), "cov_n":
                            normalized_cov(M.cov).tolist() if M.defined else None})
                if c.geometric is not None and c.geometric[k] is not None and M.defined:
                    t = c.geometric[k]
                    meas = GeometricTarget(M.mass, M.centroid, normalized_cov(M.cov))
                    rec["fidelity"] = geometric_fidelity([meas], [t])
            slots.append(rec)
        sel = np.flatnonzero(np.asarray(c.selection, bool))
        betti = betti_numbers(np.isin(labels, sel))
        out.append({"constraint": c.name, "slots": slots, "betti": list(betti)})
    return out


def cmd_measure(args) -> int:
    task = _task(args)
    constraints = task.resolve()
    vols, failed = _load_volumes(args.volumes)
    report = {"task": task.name, "task_hash": task.digest(), "volumes": [], "failed": failed}
    for path, arr, C in vols:
        report["volumes"].append({"volume": path,
                                  "constraints": measure_volume(_as_map(arr, C), constraints)})
    text = dumps(report)
    if args.out:
        _write_json(_out_dir(args, ".") / "measure.json", report)
    else:
        print(text)
    if not vols:
        raise CliError("no volume could be read", EXIT_RUNTIME if failed else EXIT_VALIDATION)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def evaluate_sets(real, synth, channels, constraints=(), points=64) -> dict:
    """Metric report for two lists of label volumes."""
    if len(real) < 2 or len(synth) < 2:
        raise CliError("evaluation needs at least two volumes on each side")
    R = np.stack([morph_features(L, channels) for L in real])
    S = np.stack([morph_features(L, channels) for L in synth])
    report = {"n_real": len(real), "n_synth": len(synth),
              "fmd": fmd(R, S, FeatureNormalizer.fit(R)),
              "one_nna": one_nna_volumes(real, synth, range(1, channels), points)}
    fid, betti = {}, {}
    for c in constraints:
        if c.geometric is not None:
            meas, targ = [], []
            for L in synth:
                for rec in measure_volume(one_hot_encode(L, channels), [c])[0]["slots"]:
                    t = c.geometric[rec["slot"]] if rec["slot"] < len(c.geometric) else None
                    if rec["valid"] and rec.get("defined") and t is not None:
                        meas.append(GeometricTarget(rec["mass"], rec["centroid"], rec["cov_n"]))
                        targ.append(t)
            fid[c.name] = geometric_fidelity(meas, targ) if meas else None
        if c.topological is not None:
            betti[c.name] = list(betti_precision(synth, c.selection, c.topological.betti))
    report["geometric_fidelity"] = fid
    report["betti_precision"] = betti
    return report


def _label_set(path):
    vols, failed = _load_volumes([path])
    if failed:
        raise CliError(f"unreadable volumes in {path}: {failed[0]['error']}", EXIT_RUNTIME)
    if not vols:
        raise CliError(f"no volumes in {path}")
    C = max(c for _, _, c in vols)
    return [a.argmax(0) if a.ndim == 4 else a for _, a, _ in vols], C


def cmd_evaluate(args) -> int:
    real, C1 = _label_set(args.real)
    synth, C2 = _label_set(args.synth)
    C = max(C1, C2)
    constraints = []
    if args.config or args.preset:
        task = _task(args)
        constraints = task.resolve(channels=C)
    report = evaluate_sets(real, synth, C, constraints, args.points)
    if args.out:
        _write_json(_out_dir(args, ".") / "evaluate.json", report)
    print(dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-parsing


def cmd_bench_parsing(args) -> int:
    from .sampler import ConstraintSpec, DomainSpec, SamplerConfig

    task = _task(args)
    latents = task.dataset.latents()
    shape = task.dataset.volume_shape()
    channels = latents.shape[1]
    base = task.resolve(channels=channels)
    geo = [c for c in base if c.geometric is not None]
    if not geo:
        raise CliError("bench-parsing needs a task with a geometric constraint")
    c0 = geo[0]
    cfg = SamplerConfig(**dict(task.sampler.to_dict(), n_steps=args.steps))
    rows = []
    variants = [("V", tuple(shape))] + [("L-coarse", (r, r, r)) for r in args.resolutions]
    for mode, grid in variants:
        c = ConstraintSpec(c0.selection, DomainSpec("global", grid, affines=None,
                                                    refresh="static"),
                           [c0.geometric[0]], None, c0.lambda_geo, 0.0, c0.temperature,
                           mode, f"{mode}@{grid[0]}")
        t0 = time.perf_counter()
        res = [sample(cfg, latents, [c], shape, seed=s) for s in range(args.samples)]
        dt = time.perf_counter() - t0
        meas = []
        for r in res:
            M = measure(v_parse(one_hot_encode(r.labels, channels), c.selection,
                                [ControlDomain(shape)]).substructures[0])
            meas.append(GeometricTarget(M.mass, np.nan_to_num(M.centroid),
                                        normalized_cov(np.nan_to_num(M.cov))))
        fid = geometric_fidelity(meas, [c0.geometric[0]] * len(meas))
        rows.append({"parsing": mode, "resolution": list(grid),
                     "samples_per_second": args.samples / dt, "fidelity": fid})
    slowest = min(r["samples_per_second"] for r in rows)
    for r in rows:
        r["relative_speed"] = r["samples_per_second"] / slowest
    report = {"task": task.name, "rows": rows}
    if args.out:
        _write_json(_out_dir(args, ".") / "bench.json", report)
    for r in rows:
        print(f"{r['parsing']:9s} {r['resolution'][0]:4d}  speed {r['relative_speed']:6.2f}  "
              f"mass L1 {r['fidelity']['mass']:.3e}  centroid L1 {r['fidelity']['centroid']:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# domains


def domain_wireframe(domain: ControlDomain) -> list:
    """The 12 edges of a domain's cuboid hull as world-space polylines."""
    J, t = domain.affine.jacobian, domain.affine.t
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    world = corners @ J.T + t
    edges = []
    for i in range(8):
        for j in range(i + 1, 8):
            if np.sum(corners[i] != corners[j]) == 1:
                edges.append([world[i].tolist(), world[j].tolist()])
    return edges


def _export_wireframes(constraints, path):
    out = []
    for c in constraints:
        affs = c.domain.affines or [None]
        if c.domain.kind == "global" and c.domain.affines is None:
            affs = [ControlDomain(c.domain.grid_size).affine]
        out.append({"constraint": c.name, "kind": c.domain.kind,
                    "domains": [None if A is None else
                                {"grid_size": list(c.domain.grid_size),
                                 "polylines": domain_wireframe(ControlDomain(c.domain.grid_size, A))}
                                for A in affs]})
    _write_json(path, {"domains": out})


def cmd_domains(args) -> int:
    task = _task(args)
    constraints = task.resolve()
    out = _out_dir(args, task.output.dir)
    _export_wireframes(constraints, out / "domains.json")
    print(f"wrote {out / 'domains.json'}")
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.name:
        print(dumps(preset(args.name)))
    else:
        print("\n".join(preset_names()))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the random seed")
    common.add_argument("--jobs", type=int, default=None,
                        help="worker processes (default: available cores)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="task configuration file (JSON)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="geotopo", parents=[common],
                                description="Geometric and topological control of voxel maps.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", parents=[common], help="write a phantom dataset")
    g.add_argument("--family", default="blobs")
    g.add_argument("--spec", default=None, help="phantom spec JSON (overrides --family)")
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    g.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("sample", parents=[common], help="run guided sampling")
    s.add_argument("--preset", default=None)
    s.add_argument("--steps", type=int, default=None, help="diffusion steps (default 100)")
    s.add_argument("--seeds", type=int, nargs="*", default=None)
    s.add_argument("--render", action="store_true", help="write mid-slice PNGs")
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("measure", parents=[common], help="measure volumes")
    m.add_argument("volumes", nargs="+")
    m.add_argument("--preset", default=None)
    m.set_defaults(func=cmd_measure)

    e = sub.add_parser("evaluate", parents=[common], help="compare real and synthetic sets")
    e.add_argument("real")
    e.add_argument("synth")
    e.add_argument("--preset", default=None)
    e.add_argument("--points", type=int, default=64, help="FPS points per cloud")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench-parsing", parents=[common], help="parsing throughput table")
    b.add_argument("--preset", default=None)
    b.add_argument("--resolutions", type=int, nargs="*", default=[16, 32])
    b.add_argument("--samples", type=int, default=2)
    b.add_argument("--steps", type=int, default=100)
    b.set_defaults(func=cmd_bench_parsing)

    d = sub.add_parser("domains", parents=[common], help="export domain wireframes")
    d.add_argument("--preset", default=None)
    d.set_defaults(func=cmd_domains)

    r = sub.add_parser("presets", parents=[common], help="list or print bundled presets")
    r.add_argument("name", nargs="?")
    r.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ConstraintError, PhantomError, gvox.GVoxError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SamplerError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
