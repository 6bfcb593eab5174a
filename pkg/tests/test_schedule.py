import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldulab.errors import ConfigError
from ldulab.schedule import NoiseSchedule, grid_pairs, make_schedule, step_grid


def test_two_step_hand_product():
    s = NoiseSchedule(2, np.array([0.5, 0.5]))
    np.testing.assert_array_equal(s.alpha_bar, [0.5, 0.25])
    assert s.ab(0) == 1.0


def test_zero_noise_limit():
    s = make_schedule(4, "linear", 1e-12, 1e-12)
    np.testing.assert_allclose(s.alpha_bar, 1.0, atol=1e-11)


def test_ddpm_terminal_alpha_bar():
    # oracle: direct cumulative product written out independently
    T = 1000
    betas = [1e-4 + (0.02 - 1e-4) * i / (T - 1) for i in range(T)]
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    s = make_schedule(T)
    assert s.alpha_bar[-1] == pytest.approx(prod, rel=1e-12)
    assert s.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.05)


@pytest.mark.parametrize(
    "T,k,grid",
    [(8, 4, [8, 6, 4, 2]), (8, 8, [8, 7, 6, 5, 4, 3, 2, 1]), (1000, 4, [1000, 750, 500, 250])],
)
def test_step_grid_examples(T, k, grid):
    assert step_grid(T, k) == grid


def test_grid_pairs_end_at_zero():
    assert grid_pairs(8, 4) == [(8, 6), (6, 4), (4, 2), (2, 0)]


@pytest.mark.parametrize("k", [0, 9])
def test_step_grid_rejects_bad_k(k):
    with pytest.raises(ConfigError):
        step_grid(8, k)


@pytest.mark.parametrize("args", [(0, "linear", 1e-4, 0.02), (10, "linear", 0.0, 0.02), (10, "linear", 0.1, 0.05), (10, "linear", 1e-4, 1.0), (10, "sigmoid", 1e-4, 0.02)])
def test_make_schedule_rejects_invalid(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_roundtrip_dict():
    s = make_schedule(50, "cosine")
    r = NoiseSchedule.from_dict(s.to_dict())
    assert r.T == s.T and r.kind == "cosine"
    assert r.beta.tobytes() == s.beta.tobytes()


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 400),
    st.sampled_from(["linear", "cosine"]),
    st.floats(1e-5, 0.01),
    st.floats(0.01, 0.5),
)
def test_schedule_invariants(T, kind, lo, hi):
    s = make_schedule(T, kind, lo, hi)
    assert np.all((s.beta > 0) & (s.beta < 1))
    np.testing.assert_array_equal(s.alpha, 1.0 - s.beta)
    assert np.all(np.diff(np.concatenate([[1.0], s.alpha_bar])) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    # recomputing the product reproduces the stored values exactly
    np.testing.assert_array_equal(np.cumprod(1.0 - s.beta), s.alpha_bar)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.data())
def test_grid_strictly_decreasing(T, data):
    k = data.draw(st.integers(1, T))
    g = step_grid(T, k)
    assert len(g) == k and g[0] == T and g[-1] >= 1
    assert all(a > b for a, b in zip(g, g[1:]))
    assert step_grid(T, T) == list(range(T, 0, -1))
