import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geotopo.domains import AffineParams, ControlDomain, cartesian_domain, world_centroid
from geotopo.geometry import GeometricTarget, geometric_potential, moments
from geotopo.surrogate import (FAMILIES, LOGIT_EPS, PartSpec, PhantomError, PhantomSpec,
                               decode_field, decode_volume, encode, generate_phantom, l_parse,
                               phantom_family, phantom_map, v_parse, v_parse_latent)
from geotopo.topology import betti_numbers
from geotopo.voxelcore import one_hot_encode, softmax_channels, voxel_centers
from oracles import rel_err


def ellipsoid_spec(shape=(48, 48, 48), radii=(0.3, 0.2, 0.12)):
    return PhantomSpec(2, shape, [PartSpec("ellipsoid", 1, size={"radii": radii})])


def smooth_latent(rng, C=3, n=6):
    return rng.normal(scale=1.5, size=(C, n, n, n))


# phantoms ------------------------------------------------------------------------


def test_centered_ellipsoid_moments():
    radii = np.array([0.3, 0.2, 0.12])
    V = phantom_map(ellipsoid_spec(radii=tuple(radii)), 0)
    assert np.abs(world_centroid(V[1])).max() <= 1 / 48
    M = moments(V[1])
    ev = np.sort(np.linalg.eigvalsh(M.cov))[::-1]
    expected = radii ** 2 / 5
    assert np.abs(ev / expected - 1).max() < 0.05


def test_two_blob_topology():
    spec = phantom_family("two_blob")
    spec.parts[2].probability = 0.0
    for i in range(3):
        labels, _ = generate_phantom(spec, i)
        assert betti_numbers(labels == 1) == (2, 0, 0)


def test_two_blob_family_is_bimodal():
    spec = phantom_family("two_blob")
    b0 = [betti_numbers(generate_phantom(spec, i)[0] == 1)[0] for i in range(64)]
    assert set(b0) == {1, 2}
    assert 0.1 <= np.mean(np.array(b0) == 1) <= 0.4


def test_phantom_deterministic():
    spec = phantom_family("stacked_tori", (24, 24, 24), seed=5)
    a, ta = generate_phantom(spec, 3)
    b, tb = generate_phantom(spec, 3)
    assert np.array_equal(a, b) and ta == tb
    assert not np.array_equal(a, generate_phantom(spec, 4)[0])


@pytest.mark.parametrize("name", FAMILIES)
def test_families_generate(name):
    spec = phantom_family(name, (24, 24, 24))
    labels, truth = generate_phantom(spec, 0)
    assert labels.shape == (24, 24, 24) and labels.max() < spec.channels
    assert len(truth) == len(spec.parts)
    assert (labels > 0).any()


def test_family_topology_priors():
    assert betti_numbers(generate_phantom(phantom_family("stacked_tori"), 0)[0] == 1) == (3, 3, 0)
    labels = generate_phantom(phantom_family("annular_wall"), 0)[0]
    assert betti_numbers(labels > 0)[2] == 1


def test_unknown_family():
    with pytest.raises(PhantomError):
        phantom_family("nope")


def test_invalid_geometry_exhausts_retries():
    part = PartSpec("torus", 1, size={"major": 0.05, "minor": 0.2})
    with pytest.raises(PhantomError, match="tries"):
        generate_phantom(PhantomSpec(2, (8, 8, 8), [part]), 0)


@pytest.mark.parametrize("part", [
    PartSpec("blob", 1, size={}),
    PartSpec("ellipsoid", 2, size={"radii": (0.1, 0.1, 0.1)}),
    PartSpec("ellipsoid", 1, size={}),
    PartSpec("ellipsoid", 1, size={"radii": (0.1, -0.1, 0.1)}),
    PartSpec("ellipsoid", 1, size={"radii": (0.1, 0.1, 0.1)}, probability=1.5),
])
def test_spec_validation(part):
    with pytest.raises(PhantomError):
        PhantomSpec(2, (8, 8, 8), [part]).validate()


def test_spec_round_trip_and_digest():
    spec = phantom_family("annular_wall", (16, 16, 16), seed=3)
    again = PhantomSpec.from_dict(spec.to_dict())
    assert again.digest() == spec.digest()
    assert np.array_equal(phantom_map(again, 1), phantom_map(spec, 1))
    spec.seed = 4
    assert again.digest() != spec.digest()


# encoder / decoder -----------------------------------------------------------------


def test_encode_examples():
    V = one_hot_encode(np.ones((4, 4, 4), dtype=int), 3)
    z = encode(V, 2)
    assert z.shape == (3, 2, 2, 2)
    assert np.allclose(z[1], np.log(1 + LOGIT_EPS) - np.log(1 / 3))
    assert np.all(z[1] > z[0])
    U = np.full((4, 2, 2, 2), 0.25)
    assert np.allclose(encode(U, 2), np.log(0.25 + LOGIT_EPS) - np.log(0.25))
    assert np.abs(encode(U, 2)).max() < 1e-3
    with pytest.raises(ValueError):
        encode(np.zeros((2, 6, 6, 5)), 2)


def test_round_trip_f1_recovers_argmax():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=(6, 7, 5))
    V = one_hot_encode(labels, 4)
    dec = decode_volume(encode(V, 1), labels.shape)
    assert np.array_equal(dec.probs.argmax(0), labels)
    assert np.allclose(dec.probs, softmax_channels(encode(V, 1)))


def test_decode_at_cell_center():
    rng = np.random.default_rng(1)
    z = smooth_latent(rng)
    X = voxel_centers(z.shape[1:])[2, 3, 1]
    dec = decode_field(z, X[None], temperature=2.0)
    assert np.allclose(dec.probs[:, 0], softmax_channels(z[:, 2:3, 3:4, 1:2], 2.0).ravel())


@pytest.mark.parametrize("seed", range(5))
def test_decode_field_vjp_fd(seed):
    rng = np.random.default_rng(seed)
    z = smooth_latent(rng)
    X = rng.uniform(-0.5, 0.5, size=(40, 3))
    tau = rng.uniform(0.5, 4)
    g = rng.normal(size=(3, 40))
    grad = decode_field(z, X, tau).vjp(g)
    f = lambda y: np.sum(g * decode_field(y, X, tau).probs)
    d = rng.normal(size=z.shape)
    h = 1e-5
    fd = (f(z + h * d) - f(z - h * d)) / (2 * h)
    assert rel_err(np.sum(grad * d), fd) < 1e-5


# parsing ------------------------------------------------------------------------


def test_v_parse_identity_and_empty():
    rng = np.random.default_rng(2)
    V = softmax_channels(rng.normal(size=(3, 6, 6, 6)))
    dom = ControlDomain((6, 6, 6))
    sub = v_parse(V, [0, 1, 1], [dom]).substructures[0]
    assert np.array_equal(sub.values, np.maximum(V[1], V[2]))
    assert not v_parse(V, [0, 0, 0], [dom]).substructures[0].values.any()


def test_v_parse_cartesian_blob_mass():
    V = phantom_map(ellipsoid_spec((32, 32, 32), (0.15, 0.1, 0.12)), 0)
    A = cartesian_domain(V, [0, 1])
    grid = tuple(np.round(A.s * 32).astype(int))
    sub = v_parse(V, [0, 1], [ControlDomain(grid, A)]).substructures[0]
    assert abs(sub.values.sum() - V[1].sum()) <= 0.01 * V[1].sum()


def test_v_parse_vjp_fd():
    rng = np.random.default_rng(3)
    V = softmax_channels(rng.normal(size=(3, 5, 5, 5)))
    doms = [ControlDomain((3, 4, 2), AffineParams(np.eye(3), [0.6, 0.5, 0.7], [0.05, 0, -0.1]))]
    g = [rng.normal(size=(3, 4, 2))]
    pr = v_parse(V, [1, 0, 1], doms)
    grad = pr.vjp(g)
    f = lambda W: np.sum(g[0] * v_parse(W, [1, 0, 1], doms).substructures[0].values)
    d = rng.normal(size=V.shape)
    h = 1e-6
    assert rel_err(np.sum(grad * d), (f(V + h * d) - f(V - h * d)) / (2 * h)) < 1e-6


def _aligned_domains(shape):
    """Domains whose lattice points coincide with voxel centres.

    A run of ``g`` voxels starting at index ``a`` on an axis of length
    ``n`` is covered by scale ``g / n`` and centre ``(a + g / 2) / n - 1/2``.
    """
    n = np.array(shape, dtype=float)
    start, count = np.array([2, 1, 3]), np.array([4, 3, 5])
    box = AffineParams(np.eye(3), count / n, (start + count / 2) / n - 0.5)
    # a quarter turn about z sends template axis 0 to world y and axis 1 to world x
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    g = (2, 4, 3)
    world_count = np.array([g[1], g[0], g[2]])
    turned = AffineParams(Rz, [g[0] / n[1], g[1] / n[0], g[2] / n[2]],
                          (start + world_count / 2) / n - 0.5)
    return [ControlDomain(shape), ControlDomain(tuple(count), box), ControlDomain(g, turned)]


@pytest.mark.parametrize("seed", range(3))
def test_l_parse_equals_v_parse_on_voxel_lattice(seed):
    rng = np.random.default_rng(seed)
    shape = (10, 8, 12)
    z = rng.normal(size=(3,) + shape)
    V = decode_volume(z, shape).probs
    doms = _aligned_domains(shape)
    for a, b in zip(l_parse(z, [0, 1, 1], doms).substructures,
                    v_parse(V, [0, 1, 1], doms).substructures):
        assert np.abs(a.values - b.values).max() < 1e-6


def test_coarse_mass_close_to_full_resolution():
    V = phantom_map(ellipsoid_spec((128, 128, 128), (0.2, 0.15, 0.12)), 0)
    z = encode(V, 4)
    full = l_parse(z, [0, 1], [ControlDomain((128,) * 3)]).substructures[0].values.mean()
    coarse = l_parse(z, [0, 1], [ControlDomain((32,) * 3)]).substructures[0].values.mean()
    assert abs(coarse - full) <= 0.05 * full


def test_mass_resolution_invariance():
    V = phantom_map(ellipsoid_spec((64, 64, 64), (0.2, 0.15, 0.12)), 0)
    z = encode(V, 2)
    A = cartesian_domain(V, [0, 1])
    masses = []
    for n in (16, 32, 64):
        sub = l_parse(z, [0, 1], [ControlDomain((n,) * 3, A)]).substructures[0]
        masses.append(moments(sub.values).mass * np.prod(A.s))
    assert (max(masses) - min(masses)) <= 0.05 * np.mean(masses)


def test_localized_domain_resolves_thin_wall():
    n = 128
    lab = np.zeros((n, n, n), dtype=int)
    lab[62:65, 32:96, 32:96] = 1  # 3-voxel slab normal to x
    V = one_hot_encode(lab, 2)
    z = encode(V, 1)
    line = lambda sub: int((sub.values[:, sub.values.shape[1] // 2,
                                       sub.values.shape[2] // 2] > 0.5).sum())
    coarse = l_parse(z, [0, 1], [ControlDomain((32,) * 3)]).substructures[0]
    A = cartesian_domain(V, [0, 1])
    local = l_parse(z, [0, 1], [ControlDomain((32,) * 3, A)]).substructures[0]
    assert line(coarse) < 2 and line(local) >= 4


def test_l_parse_vjp_chain_fd():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(2, 6, 6, 6))
    A = AffineParams(np.eye(3), [0.7, 0.6, 0.5], [0.05, -0.02, 0.0])
    dom = ControlDomain((5, 5, 5), A)
    C = rng.normal(size=(3, 3))
    target = GeometricTarget(0.1, [0.02, 0.01, -0.03], C @ C.T / np.trace(C @ C.T), (10, 10, 10))

    def loss(y):
        pr = l_parse(y, [0, 1], [dom], temperature=1.5)
        return geometric_potential(pr.substructures[0].values, A, target), pr

    (val, g), pr = loss(z)
    grad = pr.vjp([g])
    d = rng.normal(size=z.shape)
    h = 1e-6
    fd = (loss(z + h * d)[0][0] - loss(z - h * d)[0][0]) / (2 * h)
    assert rel_err(np.sum(grad * d), fd) < 1e-4


def test_v_parse_latent_vjp_fd():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, 4, 4, 4))
    dom = ControlDomain((4, 4, 4), AffineParams(np.eye(3), [0.5] * 3, [0.1, 0, 0]))
    g = rng.normal(size=(4, 4, 4))
    f = lambda y: np.sum(g * v_parse_latent(y, [0, 1], [dom], (8, 8, 8)).substructures[0].values)
    grad = v_parse_latent(z, [0, 1], [dom], (8, 8, 8)).vjp([g])
    d = rng.normal(size=z.shape)
    h = 1e-6
    assert rel_err(np.sum(grad * d), (f(z + h * d) - f(z - h * d)) / (2 * h)) < 1e-5


@given(st.integers(0, 2 ** 31))
def test_decode_probabilities_valid(seed):
    z = np.random.default_rng(seed).normal(scale=3, size=(3, 3, 3, 3))
    p = decode_volume(z, (6, 6, 6), 4.0).probs
    assert np.allclose(p.sum(0), 1) and p.min() >= 0
