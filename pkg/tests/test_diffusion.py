import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ldulab.diffusion import (
    ConstantEps,
    Denoiser,
    SamplerConfig,
    denoise_step,
    few_step_denoise,
    forward_noise,
    invert,
    invert_step,
    sample,
    train_dm,
)
from ldulab.errors import ConfigError, ShapeError
from ldulab.metrics import mmd
from ldulab.nets import DenoiserSpec, init_denoiser
from ldulab.schedule import NoiseSchedule, make_schedule

HALF = NoiseSchedule(2, np.array([0.5, 0.5]))  # alpha_bar = [0.5, 0.25]
pts = hnp.arrays(np.float64, (4, 2), elements=st.floats(-2, 2))


def test_forward_noise_hand_value():
    # alpha_bar = 0.25 at t=2: x_t = 0.5 * x0 + sqrt(0.75) * eps
    x = forward_noise(np.array([[1.0, 0.0]]), 2, np.array([[0.0, 1.0]]), HALF)
    np.testing.assert_allclose(x, [[0.5, math.sqrt(0.75)]], rtol=1e-12)
    np.testing.assert_allclose(x, [[0.5, 0.86603]], atol=5e-6)


def test_forward_noise_endpoints():
    s = make_schedule(10)
    x0, eps = np.ones((2, 2)), np.full((2, 2), 3.0)
    np.testing.assert_array_equal(forward_noise(x0, 0, eps, s), x0)
    s_far = NoiseSchedule(3, np.array([0.999999, 0.999999, 0.999999]))
    np.testing.assert_allclose(forward_noise(x0, 3, eps, s_far), eps, atol=1e-8)


def test_forward_noise_shape_error():
    with pytest.raises(ShapeError):
        forward_noise(np.zeros((2, 2)), 1, np.zeros((2, 3)), HALF)


def test_denoise_step_hand_value():
    # alpha_bar 0.25 -> 0.5, x = (1, 1), eps = (1, 0)
    x = denoise_step(ConstantEps([1.0, 0.0]), np.array([[1.0, 1.0]]), 2, 1, None, 1.0, HALF)
    c_x = math.sqrt(0.5 / 0.25)
    c_e = math.sqrt(0.5) - math.sqrt(0.5) * math.sqrt(0.75) / math.sqrt(0.25)
    np.testing.assert_allclose(x, [[c_x + c_e, c_x]], rtol=1e-12)
    np.testing.assert_allclose(x, [[0.89658, 1.41421]], atol=5e-6)


def test_denoise_step_zero_eps_scaling():
    s = make_schedule(20)
    x = np.array([[0.3, -1.2]])
    out = denoise_step(ConstantEps(0.0), x, 15, 5, None, 1.0, s)
    np.testing.assert_allclose(out, math.sqrt(s.ab(5) / s.ab(15)) * x, rtol=1e-14)
    up = invert_step(ConstantEps(0.0), x, 5, 15, s)
    np.testing.assert_allclose(up, math.sqrt(s.ab(15) / s.ab(5)) * x, rtol=1e-14)


def test_denoise_step_equal_alpha_bar_is_identity():
    # two grid points with the same alpha_bar (beta tiny) leave x unchanged under zero eps
    s = NoiseSchedule(2, np.array([0.5, 1e-300 + 1e-300]))
    x = np.array([[0.7, 0.1]])
    np.testing.assert_allclose(denoise_step(ConstantEps(0.0), x, 2, 1, None, 1.0, s), x, rtol=1e-15)


def test_step_direction_errors():
    with pytest.raises(ConfigError):
        denoise_step(ConstantEps(0.0), np.zeros((1, 2)), 1, 1, None, 1.0, HALF)
    with pytest.raises(ConfigError):
        invert_step(ConstantEps(0.0), np.zeros((1, 2)), 2, 1, HALF)


@pytest.mark.parametrize("k", [1, 2, 4, 8, 50, 200])
def test_constant_eps_exact_inverse(k):
    s = make_schedule(200)
    rng = np.random.default_rng(k)
    model = ConstantEps(rng.standard_normal(2))
    z0 = rng.standard_normal((16, 2))
    zT = invert(model, z0, s)
    back = few_step_denoise(model, zT, None, SamplerConfig(k=k), s)
    assert np.max(np.abs(back - z0)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(pts, st.sampled_from([1, 2, 4, 5, 10, 20]), hnp.arrays(np.float64, (2,), elements=st.floats(-2, 2)))
def test_invert_denoise_are_mutual_inverses(z0, k, c):
    s = make_schedule(20)
    model = ConstantEps(c)
    zT = invert(model, z0, s, k)
    np.testing.assert_allclose(few_step_denoise(model, zT, None, SamplerConfig(k=k), s), z0, atol=1e-9)
    # and the other way round
    x0 = few_step_denoise(model, z0, None, SamplerConfig(k=k), s)
    np.testing.assert_allclose(invert(model, x0, s, k), z0, atol=1e-9)


def test_k1_is_single_jump_and_kT_is_full_composition():
    s = make_schedule(10)
    model = Denoiser(init_denoiser(DenoiserSpec(hidden=(8, 8)), 0), DenoiserSpec(hidden=(8, 8)), schedule=s)
    z = np.random.default_rng(0).standard_normal((3, 2))
    one = few_step_denoise(model, z, None, SamplerConfig(k=1), s)
    np.testing.assert_array_equal(one, denoise_step(model, z, 10, 0, None, 1.0, s))
    full = z
    for t in range(10, 0, -1):
        full = denoise_step(model, full, t, t - 1, None, 1.0, s)
    np.testing.assert_array_equal(few_step_denoise(model, z, None, SamplerConfig(k=10), s), full)


def _tiny():
    spec = DenoiserSpec(hidden=(8, 8), n_class=2)
    s = make_schedule(10)
    return Denoiser(init_denoiser(spec, 0), spec, schedule=s), s


def test_train_zero_steps_leaves_params():
    model, s = _tiny()
    before = model.params.copy()
    train_dm(model, np.ones((4, 2)), None, s, 0)
    assert model.params.equal(before)


def test_train_deterministic_trace():
    runs = []
    for _ in range(2):
        model, s = _tiny()
        runs.append(train_dm(model, np.random.default_rng(0).standard_normal((32, 2)), np.arange(32) % 2 + 1, s, 20, batch=8).losses)
    assert runs[0] == runs[1]


def test_sample_empty_and_deterministic():
    model, s = _tiny()
    assert sample(model, 0, None, SamplerConfig(k=2), s).shape == (0, 2)
    a = sample(model, 5, None, SamplerConfig(k=2), s, seed=3)
    assert a.tobytes() == sample(model, 5, None, SamplerConfig(k=2), s, seed=3).tobytes()


# ---------------------------------------------------------------------------
# trained model (shared session fixture)


def test_trained_loss_halves(trained_spiral):
    tr = trained_spiral.trace
    assert len(tr.losses) == 20000
    assert tr.window_mean(100, last=True) < 0.5 * tr.window_mean(100, last=False)


def test_one_step_round_trip_trained(trained_spiral):
    lab = trained_spiral.lab
    x = lab.dataset.pool[:200]
    for t in (1, 50, 200):
        z = invert_step(lab.model, x, t - 1, t, lab.schedule)
        y = denoise_step(lab.model, z, t, t - 1, None, 1.0, lab.schedule)
        assert np.linalg.norm(y - x) / np.linalg.norm(x) < 0.05


def test_trained_samples_match_training_distribution(trained_spiral):
    # class-balanced conditional samples on the full grid vs the pool; the
    # threshold is 1.5x the distance between two disjoint halves of the pool
    lab = trained_spiral.lab
    pool = lab.dataset.pool
    perm = np.random.default_rng(0).permutation(len(pool))
    half = len(pool) // 2
    self_dist = mmd(pool[perm[:half]], pool[perm[half:]], 0.1, unbiased=False)
    labels = np.resize(np.arange(1, lab.dataset.spec.n_identities + 1), 1000)
    gen = sample(lab.model, 1000, labels, SamplerConfig(k=lab.schedule.T), lab.schedule, seed=0)
    assert mmd(gen, pool, 0.1, unbiased=False) < 1.5 * self_dist
