import numpy as np
import pytest
from hypothesis import given, strategies as st

from shoeprint_lab.optim import AdamState, OptimizerConfig, adam_step, lr_at


def _step(p, g, state, cfg):
    params = {"p": p}
    adam_step(params, {"p": g}, state, cfg)
    return params["p"]


def test_first_step_value():
    p = np.zeros(1)
    _step(p, np.ones(1), AdamState(), OptimizerConfig(l2_param_names=()))
    # bias-corrected moments are both 1, so the step is lr / (1 + eps)
    assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-15, abs=0)
    assert f"{p[0]:.12f}" == "-0.000999999990"


def test_zero_gradient_is_fixed_point():
    p = np.array([0.3, -1.2])
    state = AdamState()
    _step(p, np.zeros(2), state, OptimizerConfig())
    assert p.tolist() == [0.3, -1.2]
    assert state.step == 1


def test_update_magnitude_decays_after_gradient_stops():
    p, state, cfg = np.zeros(1), AdamState(), OptimizerConfig(l2_param_names=())
    _step(p, np.ones(1), state, cfg)
    prev, sizes = p.copy(), []
    for _ in range(2):
        _step(p, np.zeros(1), state, cfg)
        sizes.append(abs(p[0] - prev[0]))
        prev = p.copy()
    assert sizes[1] < sizes[0]


@pytest.mark.parametrize("step,expected", [(0, 0.001), (9999, 0.001), (10000, 0.0005),
                                           (25000, 0.00025)])
def test_lr_at(step, expected):
    assert lr_at(step, OptimizerConfig()) == pytest.approx(expected, rel=1e-15)


def test_lr_constant_for_unit_factor():
    cfg = OptimizerConfig(decay_factor=1.0, decay_step=3)
    assert {lr_at(s, cfg) for s in range(0, 100, 7)} == {0.001}


@given(c=st.floats(0.01, 100), seed=st.integers(0, 1000))
def test_gradient_scale_invariance(c, seed):
    g = np.random.default_rng(seed).normal(size=4)
    # eps zeroed so the bias-corrected ratio is exactly scale free
    cfg = OptimizerConfig(adam_eps=1e-30, l2_param_names=())
    a, b = np.zeros(4), np.zeros(4)
    sa, sb = AdamState(), AdamState()
    for _ in range(50):
        _step(a, g, sa, cfg)
        _step(b, c * g, sb, cfg)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_l2_decay_shrinks_norm_each_step():
    cfg = OptimizerConfig(l2_lambda=0.01, l2_param_names={"w"})
    params = {"w": np.array([1.0, -2.0, 0.5])}
    state = AdamState()
    norms = [np.linalg.norm(params["w"])]
    for _ in range(20):
        adam_step(params, {"w": np.zeros(3)}, state, cfg)
        norms.append(np.linalg.norm(params["w"]))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_l2_only_on_named_parameters():
    cfg = OptimizerConfig(l2_lambda=0.5, l2_param_names={"a"})
    params = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(params, {"a": np.zeros(2), "b": np.zeros(2)}, AdamState(), cfg)
    assert params["b"].tolist() == [1.0, 1.0]
    assert np.all(params["a"] < 1.0)


def test_default_l2_target_is_second_last_fc():
    assert OptimizerConfig().l2_param_names == frozenset({"fc2.W"})


def test_deterministic_state_evolution():
    def run():
        r = np.random.default_rng(5)
        params, state = {"w": r.normal(size=(3, 3))}, AdamState()
        for _ in range(10):
            adam_step(params, {"w": r.normal(size=(3, 3))}, state, OptimizerConfig())
        return params["w"], state
    (a, sa), (b, sb) = run(), run()
    assert a.tobytes() == b.tobytes()
    assert sa.m["w"].tobytes() == sb.m["w"].tobytes() and sa.v["w"].tobytes() == sb.v["w"].tobytes()
    assert np.all(sa.v["w"] >= 0)


def test_errors():
    with pytest.raises(KeyError):
        adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, AdamState(), OptimizerConfig())
    with pytest.raises(ValueError):
        adam_step({"a": np.zeros(1)}, {"a": np.zeros(2)}, AdamState(), OptimizerConfig())
    with pytest.raises(FloatingPointError, match="'a'"):
        adam_step({"a": np.zeros(1)}, {"a": np.array([np.inf])}, AdamState(), OptimizerConfig())
    for bad in (dict(lr0=0), dict(beta1=1.0), dict(beta2=0.0), dict(decay_step=0),
                dict(decay_factor=1.5), dict(l2_lambda=-1)):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)
