"""Localized geometric and topological measurement and guidance for
multi-class voxel maps."""
from .domains import AffineParams, ControlDomain
from .geometry import GeometricTarget, Substructure, geometric_potential, measure, moments
from .metrics import betti_precision, fmd, geometric_fidelity, one_nna
from .sampler import (ConstraintSpec, DomainSpec, SamplerConfig, composite_potential,
                      denoiser_vjp, empirical_denoiser, noise_schedule, sample)
from .surrogate import decode_field, encode, generate_phantom, l_parse, phantom_family, v_parse
from .topology import (PersistenceDiagram, TopologicalPrior, betti_numbers, partition_diagram,
                       persistent_homology, topological_potential)

__version__ = "0.1.0"
