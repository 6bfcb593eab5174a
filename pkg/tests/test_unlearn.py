import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldulab import tensorcore as tc
from ldulab.diffusion import ConstantEps, Denoiser, SamplerConfig
from ldulab.errors import ConfigError, ConstraintNotMet
from ldulab.nets import DenoiserSpec, RhoSpec, init_denoiser, init_rho
from ldulab.schedule import make_schedule
from ldulab.tensorcore import Tape
from ldulab.unlearn import (
    BUDGET_SLACK,
    UnlearnState,
    _token_assignment,
    baseline_reconstruction,
    craft_unlearnable,
    joint_minmax_train,
    lagrangian_loss,
    linf_true,
    pipeline_forward,
    smooth_linf,
    update_lambda,
)

SPEC = DenoiserSpec(hidden=(16, 16), n_class=2)


def _model(seed=0, T=20, constant=None):
    s = make_schedule(T)
    p = init_denoiser(SPEC, seed)
    if constant is not None:
        # zero output weights: the predictor returns its bias everywhere
        p["net/denoiser/out/w"] = np.zeros_like(p["net/denoiser/out/w"])
        p["net/denoiser/out/b"] = np.asarray(constant, dtype=np.float64)
    return Denoiser(p, SPEC, schedule=s)


def _subjects(seed=0):
    rng = np.random.default_rng(seed)
    return [0.1 * rng.standard_normal((3, 2)) + c for c in ([0.4, 0.0], [-0.4, 0.2])]


def _tokens(seed=0):
    return np.random.default_rng(seed).standard_normal((2, 16))


# ---------------------------------------------------------------------------
# Lagrangian and multiplier schedule


def test_lagrangian_lambda_zero():
    assert lagrangian_loss(0.3, 1.7, 0.0, 0.01) == -1.7


def test_lagrangian_on_boundary():
    assert lagrangian_loss(10 / 255, 0.4, 5.0, 10 / 255) == -0.4


def test_lagrangian_hand_value():
    delta = 10 / 255
    expected = 2.0 * (0.05 - delta) - 1.0
    assert lagrangian_loss(0.05, 1.0, 2.0, delta) == pytest.approx(expected, abs=1e-15)
    assert lagrangian_loss(0.05, 1.0, 2.0, delta) == pytest.approx(-0.97843, abs=5e-6)


def test_lagrangian_node_matches_float():
    tape = Tape()
    d = tape.input(np.array([0.01, 0.08, 0.05]))
    node = lagrangian_loss(d, tape.constant(0.7), 3.0, 0.04)
    assert float(node.value) == pytest.approx(lagrangian_loss(np.array([0.01, 0.08, 0.05]), 0.7, 3.0, 0.04), abs=1e-15)


def test_lagrangian_rejects_negative_lambda():
    with pytest.raises(ConfigError):
        lagrangian_loss(0.1, 0.0, -1.0, 0.1)


def test_update_lambda_examples():
    s = UnlearnState(init_rho(RhoSpec(hidden=4)), 0.1, 0.0, 0.5)
    update_lambda(s, 0.0)
    assert s.penalty_lambda == 0.0
    update_lambda(s, 0.2)
    assert s.penalty_lambda == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=40), st.floats(0.01, 2), st.floats(0, 3))
def test_lambda_linear_and_non_decreasing(violations, eta, lam0):
    s = UnlearnState(init_rho(RhoSpec(hidden=4)), 0.1, lam0, eta)
    prev = s.penalty_lambda
    for v in violations:
        update_lambda(s, v)
        assert s.penalty_lambda >= prev
        prev = s.penalty_lambda
    bumps = sum(v > s.tolerance for v in violations)
    assert s.penalty_lambda == pytest.approx(lam0 + bumps * eta)
    assert len(s.history) == len(violations)


@pytest.mark.parametrize("kwargs", [{"delta": 0.0}, {"delta": 0.1, "penalty_lambda": -1.0}, {"delta": 0.1, "eta_lambda": 0.0}])
def test_state_validation(kwargs):
    with pytest.raises(ConfigError):
        UnlearnState(init_rho(RhoSpec(hidden=4)), **kwargs)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000))
def test_smooth_linf_bounds_true_max(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d)) * 0.1
    tape = Tape()
    s = smooth_linf(tape.input(x), 50.0).value
    true = np.abs(x).max(axis=1)
    assert np.all(s >= true - 1e-15)
    assert np.all(s <= true + np.log(2 * d) / 50.0 + 1e-15)


# ---------------------------------------------------------------------------
# pipeline


def test_identity_rho_equals_baseline():
    model = _model(1)
    x0 = np.concatenate(_subjects())
    sampler = SamplerConfig(k=4)
    spec = RhoSpec(hidden=8)
    out = pipeline_forward(Tape(), x0, init_rho(spec, 3), spec, model, sampler, model.schedule, 1).z_0_ul.value
    base = baseline_reconstruction(x0, model, sampler, model.schedule, 1)
    assert np.max(np.abs(out - base)) <= 1e-12


def test_constant_eps_identity_rho_reproduces_input():
    s = make_schedule(40)
    x0 = np.random.default_rng(0).standard_normal((5, 2))
    spec = RhoSpec(hidden=8)
    out = pipeline_forward(Tape(), x0, init_rho(spec), spec, ConstantEps([0.3, -0.2]), SamplerConfig(k=4), s).z_0_ul.value
    assert np.max(np.abs(out - x0)) <= 1e-9


class CountingEps(ConstantEps):
    def __init__(self, c):
        super().__init__(c)
        self.calls = []

    def eps(self, tape, x_t, t, cond=None, guidance=1.0):
        self.calls.append(t)
        return super().eps(tape, x_t, t, cond, guidance)


def test_k4_runs_four_denoise_steps():
    s = make_schedule(40)
    model = CountingEps(0.0)
    z_T = np.zeros((2, 2))
    spec = RhoSpec(hidden=4)
    pipeline_forward(Tape(), z_T, init_rho(spec), spec, model, SamplerConfig(k=4), s, z_T=z_T)
    assert model.calls == [40, 30, 20, 10]


def test_inversion_is_detached_from_rho():
    model = _model(2)
    x0 = np.concatenate(_subjects())
    spec = RhoSpec(hidden=8)
    rho = init_rho(spec)
    tape = Tape(frozen=[model.params])
    res = pipeline_forward(tape, x0, rho, spec, model, SamplerConfig(k=4), model.schedule)
    # the latent fed to rho is a constant leaf on the tape
    leaves = [n for n in tape.nodes if n.op == "const" and n.value.shape == x0.shape]
    assert leaves
    tc.backward(tc.sum(res.z_0_ul))
    assert all(np.any(rho.grad(n) != 0) for n in ("net/rho/out/w",))
    for n in model.params.names():
        assert not np.any(model.params.grad(n))


# ---------------------------------------------------------------------------
# crafting


def test_zero_steps_returns_baseline():
    model = _model(0)
    res = craft_unlearnable(_subjects(), model, _tokens(), 5.0, SamplerConfig(k=4), steps=0, lambda0=0.7)
    assert res.state.penalty_lambda == 0.7
    np.testing.assert_array_equal(res.stacked(), res.baseline)


def test_frozen_contract_during_crafting():
    model = _model(0)
    before = model.params.copy()
    tokens = _tokens()
    tok_before = tokens.copy()
    craft_unlearnable(_subjects(), model, tokens, 5.0, SamplerConfig(k=2), steps=15, lr=1e-2, n_mc=2, eval_every=5)
    assert model.params.equal(before)
    for n in model.params.names():
        assert not np.any(model.params.grad(n)), n
    assert tokens.tobytes() == tok_before.tobytes()


def test_tiny_budget_pins_outputs_to_reconstruction():
    model = _model(0, constant=[0.2, -0.1])
    x0 = _subjects()
    delta = 1e-6
    res = craft_unlearnable(x0, model, _tokens(), delta, SamplerConfig(k=4), steps=20, lr=1e-2, n_mc=2, eval_every=1)
    assert res.feasible
    assert np.max(linf_true(res.stacked(), np.concatenate(x0))) <= delta * (1 + BUDGET_SLACK)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.005, 0.3), st.integers(0, 3))
def test_budget_invariant(delta, seed):
    model = _model(seed)
    x0 = np.concatenate(_subjects(seed))
    try:
        res = craft_unlearnable(_subjects(seed), model, _tokens(seed), delta, SamplerConfig(k=2), steps=20, lr=1e-2,
                                seed=seed, n_mc=2, eval_every=4)
    except ConstraintNotMet as exc:
        assert exc.result is not None and not exc.result.feasible
        return
    assert np.max(linf_true(res.stacked(), x0)) <= delta * (1 + BUDGET_SLACK)
    lams = [r["lambda"] for r in res.trace.rows]
    assert all(b >= a for a, b in zip(lams, lams[1:]))


def test_crafting_deterministic_and_trace_csv(tmp_path):
    args = (_subjects(), _model(0), _tokens(), 5.0, SamplerConfig(k=2))
    a = craft_unlearnable(*args, steps=10, n_mc=2, eval_every=3, seed=5)
    b = craft_unlearnable(*args, steps=10, n_mc=2, eval_every=3, seed=5)
    assert a.stacked().tobytes() == b.stacked().tobytes()
    assert a.rho.equal(b.rho)
    a.trace.to_csv(tmp_path / "trace.csv")
    rows = list(csv.reader((tmp_path / "trace.csv").read_text().splitlines()))
    assert rows[0] == ["step", "lambda", "violation", "l_pers", "total"]
    assert len(rows) == 11


def test_shuffle_assignment():
    rng = tc.make_rng(0, 1)
    who = np.repeat(np.arange(4), 50)
    out = _token_assignment(rng, who, 4, True)
    moved = out != who
    assert 0.35 < moved.mean() < 0.65
    assert out.min() >= 0 and out.max() < 4
    np.testing.assert_array_equal(_token_assignment(rng, who, 4, False), who)


# ---------------------------------------------------------------------------
# min-max


def test_minmax_zero_rounds():
    tokens = _tokens()
    res = joint_minmax_train(_subjects(), _model(0), tokens, 5.0, outer_rounds=0)
    np.testing.assert_array_equal(res.tokens, tokens)
    np.testing.assert_array_equal(res.rho["net/rho/out/w"], 0.0)


def test_minmax_zero_tau_steps_keeps_tokens():
    tokens = _tokens()
    res = joint_minmax_train(_subjects(), _model(0), tokens, 5.0, outer_rounds=2, tau_steps=0, rho_steps=5, n_mc=2)
    np.testing.assert_array_equal(res.tokens, tokens)
    assert len(res.rounds) == 2
    assert not res.warnings


def test_minmax_refreshes_tokens():
    tokens = _tokens()
    res = joint_minmax_train(_subjects(), _model(0), tokens, 5.0, outer_rounds=2, tau_steps=5, rho_steps=5, n_mc=2)
    assert not np.array_equal(res.tokens, tokens)
    assert [r["round"] for r in res.rounds] == [0, 1]


def test_minmax_unmeetable_budget_carries_last_iterate():
    subj = _subjects()
    with pytest.raises(ConstraintNotMet) as err:
        joint_minmax_train(subj, _model(0), _tokens(), 1e-9, outer_rounds=2, tau_steps=1, rho_steps=3, n_mc=1)
    res = err.value.result
    assert len(res.rounds) == 2 and all(r["min_violation"] > 0 for r in res.rounds)
    assert [o.shape for o in res.outputs] == [s.shape for s in subj]


def test_decayed_step_size_is_deterministic_and_bounded():
    a = craft_unlearnable(_subjects(), _model(1), _tokens(), 5.0, steps=6, n_mc=1, lr_final=1e-4, eval_every=2)
    b = craft_unlearnable(_subjects(), _model(1), _tokens(), 5.0, steps=6, n_mc=1, lr_final=1e-4, eval_every=2)
    assert a.rho.equal(b.rho)
    c = craft_unlearnable(_subjects(), _model(1), _tokens(), 5.0, steps=6, n_mc=1, eval_every=2)
    assert not a.rho.equal(c.rho)
