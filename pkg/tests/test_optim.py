import numpy as np
import pytest

from hrtf_scnn.optim import (
    AdamState,
    NonFiniteError,
    Sample,
    TrainConfig,
    adam_step,
    evaluate_loss,
    train,
)

from conftest import bandlimited_field, tiny_model

# f(x) = x^2 / 2 from x0 = 1, lr 0.1, default betas and eps (40-digit hand computation)
QUAD_STEP1 = 0.90000000099999999
QUAD_STEP2 = 0.80041222971233739111
# first step from 0 with gradient 1: -lr / (1 + eps)
FIRST_STEP = -0.09999999900000001


def test_adam_first_step():
    cfg = TrainConfig(learning_rate=0.1)
    p, state = adam_step([np.zeros(1)], [np.ones(1)], AdamState.zeros_like([np.zeros(1)]), cfg)
    assert p[0][0] == pytest.approx(FIRST_STEP, abs=1e-12)
    assert state.step_count == 1


def test_adam_quadratic_trace():
    cfg = TrainConfig(learning_rate=0.1)
    x = [np.ones(1)]
    state = AdamState.zeros_like(x)
    trace = []
    for _ in range(2):
        x, state = adam_step(x, [x[0].copy()], state, cfg)
        trace.append(x[0][0])
    assert abs(trace[0] - QUAD_STEP1) <= 1e-12
    assert abs(trace[1] - QUAD_STEP2) <= 1e-12


def test_adam_zero_gradient_is_noop(rng):
    cfg = TrainConfig()
    params = [rng.standard_normal((2, 3)), rng.standard_normal(4)]
    new, state = adam_step(params, [np.zeros((2, 3)), np.zeros(4)], AdamState.zeros_like(params), cfg)
    for a, b in zip(params, new):
        np.testing.assert_array_equal(a, b)
    assert state.step_count == 1


def test_adam_does_not_mutate_inputs(rng):
    params = [rng.standard_normal(3)]
    before = params[0].copy()
    state = AdamState.zeros_like(params)
    adam_step(params, [np.ones(3)], state, TrainConfig())
    np.testing.assert_array_equal(params[0], before)
    assert state.step_count == 0 and np.all(state.m[0] == 0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_adam_rejects_non_finite(bad):
    g = np.array([0.0, bad])
    with pytest.raises(NonFiniteError):
        adam_step([np.zeros(2)], [g], AdamState.zeros_like([np.zeros(2)]), TrainConfig())


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(beta1=1.0), dict(beta2=0.0),
                                    dict(epsilon=0), dict(batch_size=0), dict(max_epochs=-1),
                                    dict(patience=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def make_samples(params, ks, n, seed):
    """Targets reachable by the tiny model: mapped field plus a non-negative correction."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        H, _ = bandlimited_field(params.dense_grid, 2, 3, rng)
        bump = 4 * np.abs(bandlimited_field(params.dense_grid, 1, 3, rng)[0])
        out.append(Sample(H[ks.known_index], H + bump))
    return out


def test_zero_learning_rate_keeps_params():
    params, ks = tiny_model()
    samples = make_samples(params, ks, 3, 0)
    res = train(samples, samples, params, TrainConfig(learning_rate=0.0, max_epochs=5, patience=10))
    for a, b in zip(params.learnable(), res.params.learnable()):
        np.testing.assert_array_equal(a, b)
    losses = [h.train_lsd for h in res.history]
    assert np.allclose(losses, losses[0], rtol=1e-12, atol=0)
    assert losses[0] == pytest.approx(evaluate_loss(params, samples), rel=1e-12)


def test_patience_one_with_constant_validation():
    params, ks = tiny_model()
    samples = make_samples(params, ks, 2, 0)
    res = train(samples, samples, params, TrainConfig(max_epochs=50, patience=1), val_fn=lambda p: 1.0)
    assert len(res.history) == 2
    assert res.stopped_early and res.best_epoch == 1


def test_max_epochs_zero_returns_initial_params():
    params, ks = tiny_model()
    samples = make_samples(params, ks, 2, 0)
    res = train(samples, samples, params, TrainConfig(max_epochs=0))
    assert res.history == [] and res.best_epoch == 0
    for a, b in zip(params.learnable(), res.params.learnable()):
        np.testing.assert_array_equal(a, b)


def test_training_is_reproducible():
    params, ks = tiny_model()
    samples = make_samples(params, ks, 5, 1)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=2, max_epochs=8, patience=8, seed=3)
    a = train(samples, samples[:2], params, cfg)
    b = train(samples, samples[:2], params, cfg)
    assert [h.train_lsd for h in a.history] == [h.train_lsd for h in b.history]
    for x, y in zip(a.params.learnable(), b.params.learnable()):
        assert x.tobytes() == y.tobytes()


def test_best_tracker_and_step_count():
    params, ks = tiny_model()
    samples = make_samples(params, ks, 5, 2)
    cfg = TrainConfig(learning_rate=3e-2, batch_size=2, max_epochs=12, patience=100)
    res = train(samples, samples[:2], params, cfg)
    vals = [h.val_lsd for h in res.history]
    assert res.best_val_lsd == min(vals)
    assert res.best_epoch == 1 + int(np.argmin(vals))
    assert evaluate_loss(res.params, samples[:2]) == pytest.approx(res.best_val_lsd, rel=1e-12)
    assert res.state.step_count == 12 * 3  # ceil(5 / 2) batches per epoch


def test_tiny_overfit():
    params, ks = tiny_model()
    samples = make_samples(params, ks, 2, 1)
    res = train(samples, samples, params, TrainConfig(learning_rate=1e-2, max_epochs=200, patience=200))
    first = res.history[0].train_lsd
    assert min(h.train_lsd for h in res.history) <= 0.5 * first


def test_empty_splits_rejected():
    params, ks = tiny_model()
    samples = make_samples(params, ks, 1, 0)
    with pytest.raises(ValueError):
        train([], samples, params, TrainConfig())
    with pytest.raises(ValueError):
        train(samples, [], params, TrainConfig())
    with pytest.raises(ValueError):
        evaluate_loss(params, [])
