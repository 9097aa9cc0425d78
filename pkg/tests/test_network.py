import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hrtf_scnn.network import (
    CheckpointError,
    init_model,
    load_checkpoint,
    loss_and_gradients,
    lsd,
    lsd_loss_and_grad,
    magnitude_db,
    model_backward,
    model_forward,
    relu,
    relu_grad,
    save_checkpoint,
)
from hrtf_scnn.sh import build_sh_matrix
from hrtf_scnn.sphconv import mapping_block

from conftest import tiny_model

LSD_3_4 = 3.53553390593273762   # sqrt(25/2)
DB_HALF = -6.02059991327962390  # 20*log10(0.5)


def activation_pattern(H, params):
    _, cache = model_forward(H, params)
    return [y > 0 for y in cache.pre_act]


def fd_gradient(params, H, T, coords, eps=1e-4):
    """Central finite differences of the per-sample LSD (oracle, no backward code).

    Also reports whether any perturbation flipped a ReLU; differences taken
    across a kink say nothing about the gradient.
    """
    tensors = [t.copy() for t in params.learnable()]
    base = activation_pattern(H, params)
    out, smooth = [], True
    for k, idx in coords:
        vals = []
        for sign in (+1, -1):
            pert = [t.copy() for t in tensors]
            pert[k][idx] += sign * eps
            p = params.with_learnable(pert)
            vals.append(lsd(T, model_forward(H, p)[0]))
            smooth &= all(np.array_equal(a, b) for a, b in zip(base, activation_pattern(H, p)))
        out.append((vals[0] - vals[1]) / (2 * eps))
    return np.array(out), smooth


def gradient_check_point(params, n_coords, seed):
    """First deterministic draw of (H, T, coords) whose perturbations stay off every ReLU kink."""
    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        H = 3 * rng.standard_normal((20, 3))
        T = 3 * rng.standard_normal((48, 3))
        coords = random_coords(params, n_coords, rng)
        numeric, smooth = fd_gradient(params, H, T, coords)
        if smooth:
            return H, T, coords, numeric, attempt
    raise RuntimeError("no kink-free draw found")


def random_coords(params, n, rng):
    tensors = params.learnable()
    sizes = np.array([t.size for t in tensors])
    coords = []
    # sample with replacement only when asked for more coordinates than exist
    for flat in rng.choice(sizes.sum(), size=n, replace=n > sizes.sum()):
        k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        local = flat - (sizes[:k].sum() if k else 0)
        coords.append((k, np.unravel_index(local, tensors[k].shape)))
    return coords


def test_relu_examples():
    assert relu(-2.0) == 0.0
    assert relu(3.0) == 3.0
    assert relu_grad(0.0) == 0.0
    np.testing.assert_array_equal(relu_grad(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 1.0])


def test_lsd_examples(rng):
    H = rng.standard_normal((5, 4))
    assert lsd(H, H) == 0.0
    assert lsd(H, H + 3.0) == pytest.approx(3.0, abs=1e-14)
    assert lsd(np.zeros((1, 2)), np.array([[3.0, 4.0]])) == pytest.approx(LSD_3_4, abs=1e-15)
    with pytest.raises(ValueError):
        lsd(np.zeros((2, 2)), np.zeros((2, 3)))


# dB values on a 1/64 grid: squared differences cannot underflow
DB = st.integers(-6400, 6400).map(lambda k: k / 64.0)


@given(arrays(np.float64, (4, 3), elements=DB), arrays(np.float64, (4, 3), elements=DB))
def test_lsd_metric_properties(a, b):
    d = lsd(a, b)
    assert d >= 0.0
    assert (d == 0.0) == bool(np.array_equal(a, b))
    assert d == lsd(b, a)


def test_magnitude_db():
    assert magnitude_db(1.0) == 0.0
    assert magnitude_db(10.0) == pytest.approx(20.0, abs=1e-13)
    assert magnitude_db(0.5) == pytest.approx(DB_HALF, abs=1e-13)
    with pytest.raises(ValueError):
        magnitude_db(0.0)
    with pytest.raises(ValueError):
        magnitude_db(np.array([1.0, -2.0]))
    assert magnitude_db(0.0, clamp=True) == pytest.approx(-120.0)


def test_zero_kernels_reduce_to_mapping(rng):
    params, ks = tiny_model(zero=True)
    H = rng.standard_normal((20, 3))
    out, _ = model_forward(H, params)
    ref = mapping_block(mapping_block(H, ks.known, params.dense_grid, 2), params.dense_grid, params.dense_grid, 2)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_zero_input_gives_zero_output(rng):
    params, _ = tiny_model(seed=3)
    params = params.with_learnable([t if t.ndim == 3 else np.zeros_like(t) for t in params.learnable()])
    out, _ = model_forward(np.zeros((20, 3)), params)
    assert np.all(out == 0.0)


def test_output_is_bandlimited(rng):
    params, _ = tiny_model(seed=1)
    params = params.with_learnable([t + 0.1 * rng.standard_normal(t.shape) for t in params.learnable()])
    out, _ = model_forward(rng.standard_normal((20, 3)), params)
    Y = build_sh_matrix(params.dense_grid, params.n_map_out)
    refit = Y.values @ np.linalg.lstsq(Y.values, out, rcond=None)[0]
    np.testing.assert_allclose(refit, out, atol=1e-7)


def test_forward_is_deterministic(rng):
    params, _ = tiny_model(seed=2)
    H = rng.standard_normal((20, 3))
    a, _ = model_forward(H, params)
    b, _ = model_forward(H, params)
    assert a.tobytes() == b.tobytes()


def test_batched_forward_matches_single(rng):
    params, _ = tiny_model(seed=2)
    H = rng.standard_normal((4, 20, 3))
    batch, _ = model_forward(H, params)
    for i in range(4):
        np.testing.assert_allclose(batch[i], model_forward(H[i], params)[0], atol=1e-12)


def test_forward_shape_error(tiny):
    params, _ = tiny
    with pytest.raises(ValueError):
        model_forward(np.zeros((21, 3)), params)


def test_zero_residual_gives_zero_gradient(tiny, rng):
    params, _ = tiny
    H = rng.standard_normal((20, 3))
    out, _ = model_forward(H, params)
    _, per_sample, grads = loss_and_gradients(params, H, out)
    assert per_sample[0] == 0.0
    assert all(np.all(g == 0.0) for g in grads)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    params, _ = tiny_model(seed=seed)
    H, T, coords, numeric, _ = gradient_check_point(params, 20, 100 + seed)
    _, _, grads = loss_and_gradients(params, H, T)
    analytic = np.array([grads.tensors[k][idx] for k, idx in coords])
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    assert rel.max() <= 1e-4


def test_batch_gradient_is_mean_of_sample_gradients(rng):
    params, _ = tiny_model(seed=4)
    H = rng.standard_normal((3, 20, 3))
    T = rng.standard_normal((3, 48, 3))
    loss, per_sample, grads = loss_and_gradients(params, H, T)
    assert loss == pytest.approx(per_sample.mean())
    singles = [loss_and_gradients(params, H[i], T[i])[2].tensors for i in range(3)]
    for k, g in enumerate(grads.tensors):
        np.testing.assert_allclose(g, sum(s[k] for s in singles) / 3, atol=1e-12)


def test_linear_regime_scales_with_kernels(rng):
    """With every pre-activation positive, doubling betas doubles the conv contribution."""
    params, ks = tiny_model(seed=5, bias=True)
    H = rng.standard_normal((20, 3))
    tensors = [0.01 * t if t.ndim == 3 else np.full_like(t, 50.0) for t in params.learnable()]
    # bias 50 dB keeps ReLU inputs positive; measure against the zero-kernel map
    p1 = params.with_learnable(tensors)
    p2 = params.with_learnable([2 * t if t.ndim == 3 else t for t in tensors])
    zero = params.with_learnable([np.zeros_like(t) if t.ndim == 3 else t for t in tensors])
    o1, c1 = model_forward(H, p1)
    o2, c2 = model_forward(H, p2)
    o0, _ = model_forward(H, zero)
    assert all(np.all(y > 0) for y in c1.pre_act + c2.pre_act)
    d1, d2 = o1 - o0, o2 - o0
    # first-order terms double; the block-2-on-block-1 cross term is small at this scale
    assert np.abs(d2 - 2 * d1).max() < 0.1 * np.abs(d1).max()
    # directional derivative along betas equals the gradient projection
    T = rng.standard_normal((48, 3))
    _, _, g = loss_and_gradients(p1, H, T)
    direction = [t if t.ndim == 3 else np.zeros_like(t) for t in tensors]
    eps = 1e-5
    plus = p1.with_learnable([t + eps * d for t, d in zip(tensors, direction)])
    minus = p1.with_learnable([t - eps * d for t, d in zip(tensors, direction)])
    fd = (lsd(T, model_forward(H, plus)[0]) - lsd(T, model_forward(H, minus)[0])) / (2 * eps)
    proj = sum(float(np.sum(gt * d)) for gt, d in zip(g.tensors, direction))
    assert proj == pytest.approx(fd, rel=1e-6)


def test_lsd_loss_rows_subset(rng):
    out = rng.standard_normal((2, 10, 3))
    tgt = rng.standard_normal((2, 10, 3))
    rows = np.array([1, 4, 7])
    per, _ = lsd_loss_and_grad(out, tgt, rows)
    for b in range(2):
        assert per[b] == pytest.approx(lsd(out[b, rows], tgt[b, rows]))


def test_backward_rejects_bad_input(tiny, rng):
    params, _ = tiny
    _, cache = model_forward(rng.standard_normal((20, 3)), params)
    with pytest.raises(TypeError):
        model_backward(None, np.zeros((48, 3)))
    with pytest.raises(ValueError):
        model_backward(cache, np.zeros((47, 3)))


def test_parameter_count():
    params, _ = tiny_model()
    assert params.n_parameters() == 2 * (3 * 3 * 3) + 2 * 3
    names = params.learnable_names()
    assert names == ["block1.betas", "block1.bias", "block2.betas", "block2.bias"]


def test_init_model_rejects_width_mismatch(tiny):
    params, ks = tiny
    with pytest.raises(ValueError):
        init_model(ks.known, params.dense_grid, 3, 2, 2, 2, width=4)
    with pytest.raises(ValueError):
        init_model(ks.known, params.dense_grid, 3, n_map_in=5)  # 36 coefficients > 20 points


def test_checkpoint_roundtrip(tmp_path, rng):
    params, _ = tiny_model(seed=7)
    params.block2.uses_relu = False
    path = tmp_path / "model.bin"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.sparse_grid == params.sparse_grid and loaded.dense_grid == params.dense_grid
    assert loaded.block2.uses_relu is False and loaded.block1.uses_relu is True
    for a, b in zip(params.learnable(), loaded.learnable()):
        assert a.tobytes() == b.tobytes()
    H = rng.standard_normal((20, 3))
    assert model_forward(H, params)[0].tobytes() == model_forward(H, loaded)[0].tobytes()
    save_checkpoint(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    params, _ = tiny_model()
    path = tmp_path / "model.bin"
    save_checkpoint(params, path)
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.bin")
    (tmp_path / "ver.bin").write_bytes(data[:8] + (99).to_bytes(4, "little") + data[12:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ver.bin")
    tampered = bytearray(data)
    tampered[-1] ^= 0x01  # last dense-grid coordinate
    (tmp_path / "grid.bin").write_bytes(bytes(tampered))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "grid.bin")
