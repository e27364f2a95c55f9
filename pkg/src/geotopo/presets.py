"""Bundled task presets on the phantom families.

Weights, grid sizes, mass thresholds, temperatures and priors follow the
published task configurations; the selections map each task onto the
closest phantom family channel.
"""
from __future__ import annotations

import copy

from .config import task_from_dict

# geometric control tasks: (family, kind, selection, extra params, grid, mass threshold, weights)
GEOMETRIC = {
    "rv": ("two_chamber", "cartesian", [0, 1, 0], {}, [64, 64, 64], 1e-5, [1e7, 1e5, 1e4]),
    "mitral": ("two_chamber", "interface", [0, 1, 0], {"selection_b": [0, 0, 1]},
               [4, 32, 32], 1e-4, [1e9, 1e6, 1e4]),
    "aortic": ("branched_tube", "curvilinear", [0, 1], {"n_planes": 5}, [1, 32, 32], 1e-6,
               [1e9, 1e5, 1e3]),
    "myo": ("annular_wall", "spherical", [0, 1, 0], {"n_rays": 4}, [4, 4, 16], 1e-6,
            [1e9, 1e5, 1e4]),
}

# topological control tasks: (family, selection, prior, lambda_topo)
TOPOLOGICAL = {
    "atrial_separation": ("two_blob", [0, 1], [2, 0, 0], 5.0),
    "branch_connectivity": ("branched_tube", [0, 1], [1, 0, 0], 1.0),
    "vert_connectivity": ("stacked_tori", [0, 1], [1, 9, 0], 5.0),
    "calcium_count": ("annular_wall", [0, 0, 1], [2, 0, 0], 50.0),
}
TOPO_GRID = [64, 64, 64]
TOPO_TEMPERATURE = 4.0

# multiscale tasks: (family, kind, selection, params, small grid, large grid, threshold, weights)
MULTISCALE = {
    "spinal": ("stacked_tori", "cartesian", [0, 1], {}, [64, 64, 64], [64, 64, 64], 1e-4,
               [1e7, 1e5, 1e4]),
    "aorta": ("branched_tube", "curvilinear", [0, 1], {"n_planes": 5}, [1, 16, 16],
              [16, 16, 16], 1e-6, [1e9, 1e5, 1e3]),
    "myo_wall": ("annular_wall", "spherical", [0, 1, 0], {"n_rays": 16}, [4, 4, 16],
                 [8, 8, 16], 1e-6, [1e9, 1e5, 1e4]),
    "vessel_wall": ("annular_wall", "cylindrical", [0, 1, 1], {"n_z": 4, "n_theta": 4},
                    [4, 4, 32], [16, 16, 32], 1e-6, [1e9, 1e5, 1e4]),
}


def _base(name, family, shape, count, seed):
    return {"schema_version": 1, "name": name,
            "dataset": {"family": family, "shape": list(shape), "count": count, "seed": seed,
                        "factor": 2},
            "reference": {"index": 0, "seed": seed + 1000},
            "sampler": {"n_steps": 100, "sigma_min": 0.01, "sigma_max": 80.0, "rho": 1.0,
                        "churn": 0.0, "guidance": "full", "seed": seed},
            "seeds": [0], "output": {"dir": f"out/{name}", "renders": False,
                                      "wireframes": False},
            "constraints": []}


def _geometric_constraint(name, kind, selection, params, grid, threshold, weights,
                          refresh="dynamic", parsing="L-local"):
    return {"name": name, "selection": selection,
            "domain": {"kind": kind, "grid_size": grid, "params": dict(params),
                       "refresh": refresh},
            "lambda_geo": 1.0, "lambda_topo": 0.0, "temperature": 1.0, "parsing": parsing,
            "target": {"source": "reference", "weights": weights, "mass_threshold": threshold}}


def preset(name: str, shape=(32, 32, 32), count: int = 64, seed: int = 0) -> dict:
    """Task config dictionary for a named preset.

    Multiscale presets take a ``_small`` or ``_large`` suffix.
    """
    if name in GEOMETRIC:
        family, kind, sel, params, grid, thr, w = GEOMETRIC[name]
        d = _base(name, family, shape, count, seed)
        d["constraints"].append(_geometric_constraint(name, kind, sel, params, grid, thr, w))
    elif name in TOPOLOGICAL:
        family, sel, prior, lam = TOPOLOGICAL[name]
        d = _base(name, family, shape, count, seed)
        d["constraints"].append({
            "name": name, "selection": sel,
            "domain": {"kind": "global", "grid_size": TOPO_GRID, "refresh": "static"},
            "topological": prior, "lambda_geo": 0.0, "lambda_topo": lam,
            "temperature": TOPO_TEMPERATURE, "parsing": "L-coarse"})
    elif name.rsplit("_", 1)[0] in MULTISCALE and name.rsplit("_", 1)[1] in ("small", "large"):
        base, size = name.rsplit("_", 1)
        family, kind, sel, params, small, large, thr, w = MULTISCALE[base]
        d = _base(name, family, shape, count, seed)
        grid = small if size == "small" else large
        d["constraints"].append(_geometric_constraint(name, kind, sel, params, grid, thr, w))
    else:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    task_from_dict(copy.deepcopy(d))  # schema check
    return d


def preset_names() -> list:
    names = list(GEOMETRIC) + list(TOPOLOGICAL)
    for base in MULTISCALE:
        names += [f"{base}_small", f"{base}_large"]
    return names
