import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import perturb, small_params
from prefguide.dataset import GaussianMixtureSpec
from prefguide.diffusion import epsilon_fn, make_schedule, sample
from prefguide.guidance import (
    W_PRESET_INVERSION_RATE,
    GuidanceSpec,
    cfg_epsilon,
    cpgd_epsilon,
    guided_sample,
    pgd_epsilon,
    weight_sweep,
)
from prefguide.metrics import compute_metrics

SCHED = make_schedule(20, 1e-3, 0.3)
vec = arrays(np.float64, (3, 2), elements=st.floats(-1e3, 1e3))
weights = st.floats(0.0, 20.0)


def test_cfg_examples():
    assert np.array_equal(cfg_epsilon([1, 0], [3, 2], 2.0), [5.0, 4.0])
    u, c = np.array([0.1, -0.7]), np.array([1.3, 0.2])
    assert np.array_equal(cfg_epsilon(u, c, 0.0), u)
    assert np.array_equal(cfg_epsilon(u, c, 1.0), c)


def test_cpgd_examples():
    assert np.array_equal(cpgd_epsilon([0, 0], [1, 1], [1, -1], 3.0), [0.0, 6.0])
    r, a = np.array([0.4, 0.5]), np.array([1.1, -2.0])
    assert np.array_equal(cpgd_epsilon(r, a, a, 7.0), r)
    assert np.array_equal(cpgd_epsilon(r, a, -a, 0.0), r)


@settings(max_examples=100, deadline=None)
@given(vec, vec, weights)
def test_pgd_equals_cfg(a, b, w):
    assert pgd_epsilon(a, b, w).tobytes() == cfg_epsilon(a, b, w).tobytes()


@settings(max_examples=100, deadline=None)
@given(vec, vec, weights)
def test_pgd_endpoints_exact(a, b, w):
    assert np.array_equal(pgd_epsilon(a, b, 0.0), a)
    assert np.array_equal(pgd_epsilon(a, b, 1.0), b)


@settings(max_examples=100, deadline=None)
@given(vec, vec, weights)
def test_cpgd_tie_reduces_to_pgd(ref, pos, w):
    scale = 1.0 + np.max(np.abs(ref)) + np.max(np.abs(pos))
    np.testing.assert_allclose(cpgd_epsilon(ref, pos, ref, w), pgd_epsilon(ref, pos, w), rtol=0, atol=1e-13 * scale * (1 + w))


@settings(max_examples=100, deadline=None)
@given(vec, vec, weights)
def test_composition_affine_in_w(ref, tuned, w):
    scale = 1.0 + np.max(np.abs(ref)) + np.max(np.abs(tuned))
    lhs = pgd_epsilon(ref, tuned, w) - pgd_epsilon(ref, tuned, 0.0)
    rhs = w * (pgd_epsilon(ref, tuned, 1.0) - pgd_epsilon(ref, tuned, 0.0))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-13 * scale * (1 + w))


def test_spec_validation():
    ref = small_params(0)
    with pytest.raises(ValueError):
        GuidanceSpec("bogus")
    with pytest.raises(ValueError):
        GuidanceSpec("pgd", -1.0)
    with pytest.raises(ValueError):
        GuidanceSpec("pgd", 1.0, s=-1)
    with pytest.raises(ValueError, match="tuned"):
        GuidanceSpec("pgd", 1.0, ref=ref).validate(20)
    with pytest.raises(ValueError, match="pos, neg"):
        GuidanceSpec("cpgd", 1.0, ref=ref).validate(20)
    with pytest.raises(ValueError):
        GuidanceSpec("pgd", 1.0, s=21, ref=ref, tuned=ref).validate(20)


def test_partial_step_window():
    spec = GuidanceSpec("pgd", 2.0, s=3)
    assert [t for t in range(1, 21) if spec.active(t, 20)] == [18, 19, 20]
    assert not any(GuidanceSpec("pgd", 2.0, s=0).active(t, 20) for t in range(1, 21))
    assert all(GuidanceSpec("pgd", 2.0).active(t, 20) for t in range(1, 21))
    assert not GuidanceSpec("none").active(20, 20)


def _models(seed=0):
    rng = np.random.default_rng(seed)
    ref = small_params(seed)
    return ref, perturb(ref, rng, 0.3), perturb(ref, rng, 0.3)


def _draw(spec, seed=5, n=40):
    return guided_sample(spec, n, SCHED, np.random.default_rng(seed))


def test_reductions_bitwise():
    ref, a, b = _models()
    base = sample(epsilon_fn(ref, SCHED.T), 40, SCHED, np.random.default_rng(5))
    tuned = sample(epsilon_fn(a, SCHED.T), 40, SCHED, np.random.default_rng(5))
    assert _draw(GuidanceSpec("none", ref=ref)).tobytes() == base.tobytes()
    assert _draw(GuidanceSpec("pgd", 0.0, ref=ref, tuned=a)).tobytes() == base.tobytes()
    assert _draw(GuidanceSpec("cfg", 0.0, ref=ref, tuned=a)).tobytes() == base.tobytes()
    assert _draw(GuidanceSpec("pgd", 4.0, s=0, ref=ref, tuned=a)).tobytes() == base.tobytes()
    assert _draw(GuidanceSpec("cpgd", 0.0, ref=ref, pos=a, neg=b)).tobytes() == base.tobytes()
    assert _draw(GuidanceSpec("cpgd", 3.0, ref=ref, pos=b, neg=b)).tobytes() == base.tobytes()
    assert _draw(GuidanceSpec("pgd", 1.0, s=SCHED.T, ref=ref, tuned=a)).tobytes() == tuned.tobytes()


def test_guidance_changes_samples_when_active():
    ref, a, _ = _models()
    assert not np.array_equal(_draw(GuidanceSpec("pgd", 2.0, ref=ref, tuned=a)), _draw(GuidanceSpec("none", ref=ref)))


def test_weight_sweep_rows():
    ref, a, _ = _models(1)
    mix = GaussianMixtureSpec()
    rows = weight_sweep(GuidanceSpec("pgd", ref=ref, tuned=a), [0.0, 2.0, 2.0], 60, SCHED, 3, mix)
    base = sample(epsilon_fn(ref, SCHED.T), 60, SCHED, np.random.default_rng(3))
    assert rows[0][1] == compute_metrics(base, mix, base)
    assert rows[0][1].frechet < 1e-10
    assert rows[1][1] == rows[2][1] and rows[1][2].tobytes() == rows[2][2].tobytes()
    with pytest.raises(ValueError):
        weight_sweep(GuidanceSpec("pgd", ref=ref, tuned=a), [], 10, SCHED, 0, mix)


def test_inversion_rate_preset():
    assert W_PRESET_INVERSION_RATE == 0.3
    assert GuidanceSpec().w == 1.0


def test_epsilon_mixed_matches_per_step():
    ref, a, b = _models(2)
    rng = np.random.default_rng(0)
    x, t = rng.normal(size=(30, 2)), rng.integers(1, SCHED.T + 1, 30)
    for spec in (GuidanceSpec("pgd", 2.0, s=7, ref=ref, tuned=a), GuidanceSpec("cpgd", 1.5, ref=ref, pos=a, neg=b)):
        mixed = spec.epsilon_mixed(x, t, SCHED.T)
        for i in range(30):
            np.testing.assert_allclose(mixed[i], spec.epsilon(x[i], int(t[i]), SCHED.T), rtol=0, atol=1e-13)
