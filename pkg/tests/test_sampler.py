import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geotopo.domains import AffineParams, ControlDomain
from geotopo.geometry import GeometricTarget, target_from_substructure
from geotopo.sampler import (ConstraintError, ConstraintSpec, DomainSpec, GuidanceProblem,
                             SamplerConfig, SamplerError, composite_potential, denoiser_vjp,
                             empirical_denoiser, noise_schedule, resolve_constraint, sample)
from geotopo.surrogate import decode_volume, encode, l_parse, phantom_family, phantom_map
from geotopo.topology import TopologicalPrior
from oracles import ball, rel_err

CFG_FAST = dict(n_steps=12, sigma_max=20.0, sigma_min=0.01)


@pytest.fixture(scope="module")
def blob_latents():
    spec = phantom_family("blobs", (16, 16, 16))
    return np.stack([encode(phantom_map(spec, i), 2) for i in range(8)])


def two_blob_latent(n=10):
    B = ball(n, 1.5, (2, 4.5, 4.5)) | ball(n, 1.5, (7, 4.5, 4.5))
    z = np.stack([np.where(B, -3.0, 3.0), np.where(B, 3.0, -3.0)])
    return z


# schedule -----------------------------------------------------------------------


def test_schedule_examples():
    s = noise_schedule(3, 80.0, 0.01, 1.0).sigmas
    assert s[0] == 80.0 and s[-1] == 0.01
    assert np.isclose(s[1], (80.0 + 0.01) / 2)
    s = noise_schedule(5, 4.0, 1.0, 2.0).sigmas
    assert np.isclose(s[2], ((2.0 + 1.0) / 2) ** 2)


@given(st.integers(2, 300), st.floats(0.001, 1.0), st.floats(1.5, 200.0), st.floats(0.5, 9.0))
def test_schedule_strictly_decreasing(n, lo, hi, rho):
    s = noise_schedule(n, hi, lo, rho).sigmas
    assert len(s) == n and s[0] == hi and s[-1] == lo
    assert np.all(np.diff(s) < 0)


@pytest.mark.parametrize("args", [(1, 80, 0.01, 1), (10, 1, 2, 1), (10, 80, 0, 1), (10, 80, 1, 0)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        noise_schedule(*args)


# denoiser -----------------------------------------------------------------------


def test_denoiser_single_member():
    X = np.random.default_rng(0).normal(size=(1, 2, 3, 3, 3))
    z = np.zeros((2, 3, 3, 3))
    assert np.array_equal(empirical_denoiser(z, 0.7, X), X[0])
    assert not denoiser_vjp(z, 0.7, X, np.ones_like(z)).any()


def test_denoiser_limits():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 2, 2, 2, 2))
    z = X[3] + 0.01 * rng.normal(size=X[3].shape)
    assert np.allclose(empirical_denoiser(z, 1e6, X), X.mean(0), atol=1e-8)
    assert np.allclose(empirical_denoiser(z, 1e-4, X), X[3])
    with pytest.raises(ValueError):
        empirical_denoiser(z, 0.0, X)
    with pytest.raises(ValueError):
        empirical_denoiser(z, 1.0, X[:0])


@given(st.integers(0, 2 ** 31), st.floats(0.3, 5.0))
def test_denoiser_is_convex_combination(seed, sigma):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 1, 2, 2, 2))
    D = empirical_denoiser(rng.normal(size=(1, 2, 2, 2)), sigma, X)
    assert np.all(D >= X.min(0) - 1e-12) and np.all(D <= X.max(0) + 1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_denoiser_vjp_fd(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 2, 2, 2, 2))
    z = rng.normal(size=X.shape[1:])
    sigma = rng.uniform(0.8, 2.0)
    g = rng.normal(size=z.shape)
    d = rng.normal(size=z.shape)
    h = 1e-6
    f = lambda y: np.sum(g * empirical_denoiser(y, sigma, X))
    fd = (f(z + h * d) - f(z - h * d)) / (2 * h)
    assert rel_err(np.sum(denoiser_vjp(z, sigma, X, g) * d), fd) < 1e-5


def test_denoiser_vjp_zero_cotangent():
    X = np.random.default_rng(2).normal(size=(4, 1, 2, 2, 2))
    assert not denoiser_vjp(X[0], 1.0, X, np.zeros(X.shape[1:])).any()


# constraints and the composite potential -----------------------------------------------


def test_no_constraints_zero_potential():
    z = np.zeros((2, 4, 4, 4))
    loss, grad = composite_potential(z, [], (8, 8, 8))
    assert loss == 0 and not grad.any()


def test_satisfied_geometric_constraint_is_flat():
    z = two_blob_latent()
    c = ConstraintSpec((0, 1), DomainSpec("global", (8, 8, 8)), parsing="L-coarse")
    # targets measured on the latent's own coarse decode
    sub = l_parse(z, (0, 1), [ControlDomain((8, 8, 8))]).substructures[0]
    c.geometric = [target_from_substructure(sub, (1e3, 1e3, 1e3))]
    loss, grad = composite_potential(z, [c], (16, 16, 16))
    assert loss < 1e-20 and np.abs(grad).max() < 1e-8


def test_topological_constraint_on_two_blobs():
    z = two_blob_latent()

    def run(prior):
        c = ConstraintSpec((0, 1), DomainSpec("global", (10, 10, 10)), topological=prior,
                           lambda_topo=1.0, parsing="L-coarse")
        return composite_potential(z, [c], (16, 16, 16))

    one, grad = run((1, 0, 0))
    two, _ = run((2, 0, 0))
    # the second component is suppressed instead of preserved
    assert one > two
    assert 0 < np.count_nonzero(grad) < grad.size // 2


def test_potential_averages_over_substructures():
    z = two_blob_latent()
    t = GeometricTarget(0.5, np.zeros(3), np.eye(3) / 3, (1.0, 0.0, 0.0))
    one = ConstraintSpec((0, 1), DomainSpec("global", (8, 8, 8)), geometric=[t], parsing="L-coarse")
    l1, g1 = composite_potential(z, [one], (16, 16, 16))
    l2, g2 = composite_potential(z, [one, one], (16, 16, 16))
    assert np.isclose(l1, l2) and np.allclose(g1, g2)


def test_parsing_modes_agree_at_aligned_grid():
    z = np.random.default_rng(3).normal(size=(2, 4, 4, 4))
    t = GeometricTarget(0.3, np.full(3, 0.1), np.eye(3) / 3, (1.0, 10.0, 10.0))
    vals = {}
    for mode in ("V", "L-local"):
        c = ConstraintSpec((0, 1), DomainSpec("global", (8, 8, 8)), geometric=[t], parsing=mode)
        vals[mode] = composite_potential(z, [c], (8, 8, 8))[0]
    assert np.isclose(vals["V"], vals["L-local"], rtol=1e-9)


def test_constraint_validation():
    t = GeometricTarget(0.1, np.zeros(3), np.eye(3) / 3)
    ok = ConstraintSpec((0, 1), geometric=[t])
    ok.validate(2)
    bad = [
        ConstraintSpec((0, 1, 0), geometric=[t]),
        ConstraintSpec((0, 1)),
        ConstraintSpec((0, 1), geometric=[t], lambda_geo=-1),
        ConstraintSpec((0, 1), geometric=[t], temperature=0),
        ConstraintSpec((0, 1), geometric=[t], parsing="X"),
        ConstraintSpec((0, 1), DomainSpec("cartesian"), geometric=[t], parsing="L-coarse"),
        ConstraintSpec((0, 1), DomainSpec("cartesian"), geometric=[t]),
        ConstraintSpec((0, 1), geometric=[t, t]),
        ConstraintSpec((0, 1), DomainSpec("interface"), geometric=[t, t]),
    ]
    for c in bad:
        with pytest.raises(ConstraintError):
            c.validate(2)
    with pytest.raises(ConstraintError):
        DomainSpec("torus")
    with pytest.raises(ConstraintError):
        DomainSpec("global", (0, 4, 4))
    with pytest.raises(ValueError):
        ConstraintSpec((0, 1), topological=(1, -1, 0))


def test_constraint_round_trip():
    V = np.stack([1 - ball(16, 4.0), ball(16, 4.0)]).astype(float)
    c = resolve_constraint(ConstraintSpec((0, 1), DomainSpec("cartesian", (8, 8, 8)),
                                          topological=TopologicalPrior((1, 0, 0))), V)
    d = ConstraintSpec.from_dict(c.to_dict())
    assert d.to_dict() == c.to_dict()
    assert isinstance(d.domain.affines[0], AffineParams)


def test_dynamic_refresh_keeps_domains_on_failure():
    t = GeometricTarget(0.1, np.zeros(3), np.eye(3) / 3)
    A = AffineParams(np.eye(3), [0.5] * 3, np.zeros(3))
    c = ConstraintSpec((0, 1), DomainSpec("cartesian", (4, 4, 4), affines=[A], refresh="dynamic"),
                       geometric=[t])
    P = GuidanceProblem([c], (8, 8, 8), 2)
    empty = np.stack([np.full((4, 4, 4), 5.0), np.full((4, 4, 4), -5.0)])
    P.refresh(empty)
    assert P.affines[0][0] is A
    P.refresh(two_blob_latent())
    assert P.affines[0][0] is not A


# sampling ---------------------------------------------------------------------------


def test_sample_deterministic(blob_latents):
    cfg = SamplerConfig(**CFG_FAST)
    a = sample(cfg, blob_latents, seed=4)
    b = sample(cfg, blob_latents, seed=4)
    assert np.array_equal(a.latent, b.latent) and np.array_equal(a.labels, b.labels)
    c = sample(cfg, blob_latents, seed=5)
    assert not np.array_equal(a.latent, c.latent)


def test_unconditional_lands_near_dataset(blob_latents):
    res = sample(SamplerConfig(**CFG_FAST), blob_latents, volume_shape=(16, 16, 16), seed=0)
    d = np.linalg.norm((blob_latents - res.latent).reshape(len(blob_latents), -1), axis=1)
    assert d.min() < 0.05 * np.linalg.norm(blob_latents[0])
    assert res.labels.shape == (16, 16, 16)


def test_zero_potential_step_is_bitwise_unguided(blob_latents):
    # a geometric constraint with all-zero weights contributes nothing
    t = GeometricTarget(0.5, np.zeros(3), np.eye(3) / 3, (0.0, 0.0, 0.0))
    c = ConstraintSpec((0, 1), DomainSpec("global", (4, 4, 4)), geometric=[t], parsing="L-coarse")
    cfg = SamplerConfig(**CFG_FAST)
    a = sample(cfg, blob_latents, [c], seed=1)
    b = sample(cfg, blob_latents, [], seed=1)
    assert np.array_equal(a.latent, b.latent)


def test_first_step_scale(blob_latents):
    cfg = SamplerConfig(**CFG_FAST, keep_trajectory=True)
    res = sample(cfg, blob_latents, seed=2)
    z0 = res.trajectory[0]
    expected = cfg.sigma_max * np.sqrt(z0.size)
    assert expected / 2 < np.linalg.norm(z0) < 2 * expected
    assert len(res.trajectory) == cfg.n_steps + 1


@given(st.integers(0, 2 ** 31), st.floats(0.05, 2.0))
def test_full_guidance_never_opposes_stop_gradient(seed, sigma):
    # the denoiser Jacobian is a weighted covariance, hence PSD: routing the
    # gradient through it can shrink but never reverse the descent direction
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 2, 2, 2, 2))
    z = X[0] + sigma * rng.normal(size=X.shape[1:])
    g = rng.normal(size=z.shape)
    assert np.sum(denoiser_vjp(z, sigma, X, g) * g) >= -1e-9 * np.sum(g * g)


def test_non_finite_guidance_raises(blob_latents):
    t = GeometricTarget(np.nan, np.zeros(3), np.eye(3) / 3, (1.0, 1.0, 1.0))
    c = ConstraintSpec((0, 1), DomainSpec("global", (4, 4, 4)), geometric=[t], parsing="L-coarse")
    with pytest.raises(SamplerError) as e:
        sample(SamplerConfig(**CFG_FAST), blob_latents, [c], seed=0)
    assert e.value.step == 0


def test_sampler_config_validation(blob_latents):
    for bad in (dict(n_steps=1), dict(guidance="half"), dict(churn=-1)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
    with pytest.raises(ValueError):
        sample(SamplerConfig(**CFG_FAST), blob_latents[0])


def test_mass_guidance_pulls_toward_target(blob_latents):
    # the empirical prior can only reach dataset members, so aim for the
    # heaviest one and compare against unguided draws
    dom = [ControlDomain((8, 8, 8))]
    coarse_mass = lambda z: l_parse(z, (0, 1), dom).substructures[0].values.mean()
    target = max(coarse_mass(z) for z in blob_latents)
    t = GeometricTarget(target, np.zeros(3), np.eye(3) / 3, (1e6, 0.0, 0.0))
    c = ConstraintSpec((0, 1), DomainSpec("global", (8, 8, 8)), geometric=[t], parsing="L-coarse")
    cfg = SamplerConfig(n_steps=40, sigma_max=20.0, sigma_min=0.01)
    errs = []
    for cons in ([c], []):
        m = [coarse_mass(sample(cfg, blob_latents, cons, seed=s).latent) for s in range(6)]
        errs.append(abs(np.mean(m) - target))
    assert errs[0] < 0.5 * errs[1]
