import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pylonloc import tensor_ops as T
from pylonloc.errors import ConfigurationError, DegenerateStatisticsError, DimensionError, InputError, OptimizerError

from conftest import circular_shift, grad_check


def naive_conv(x, w, b, stride, padding, mode="zeros"):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if mode == "zeros":
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), mode="wrap")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for a in range(n):
        for q in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[a, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[a, q, i, j] = np.sum(patch * w[q]) + (0.0 if b is None else b[q])
    return out


def bilinear_point(src, dst_h, dst_w):
    """Half-pixel-centers bilinear interpolation, evaluated one output pixel at a time."""
    h, w = src.shape
    out = np.zeros((dst_h, dst_w))
    for i in range(dst_h):
        for j in range(dst_w):
            sy = min(max((i + 0.5) * h / dst_h - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / dst_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * src[y0, x0] + (1 - fy) * fx * src[y0, x1]
                         + fy * (1 - fx) * src[y1, x0] + fy * fx * src[y1, x1])
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 5))
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_field():
    x = np.full((1, 1, 6, 6), 0.7)
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * 0.7)


@pytest.mark.parametrize("stride,padding,mode", [(1, 1, "zeros"), (2, 1, "zeros"), (1, 0, "zeros"),
                                                 (1, 1, "circular"), (2, 1, "circular")])
def test_conv_matches_direct_loop(rng, stride, padding, mode):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, padding, mode).data
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride, padding, mode), atol=1e-6)


def test_conv_output_size_formula(rng):
    for h, k, s, p in [(7, 3, 2, 1), (8, 7, 2, 3), (5, 1, 1, 0), (9, 5, 3, 2)]:
        out = T.conv2d(T.Tensor(np.zeros((1, 1, h, h))), T.Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1


def test_conv_errors():
    x = T.Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(DimensionError):
        T.conv2d(x, T.Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ConfigurationError):
        T.conv2d(x, T.Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ConfigurationError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 2, 2))), T.Tensor(np.zeros((1, 2, 5, 5))))
    with pytest.raises(ConfigurationError):
        T.conv2d(x, T.Tensor(np.zeros((1, 2, 3, 3))), padding=2, pad_mode="circular")


# ---------------------------------------------------------------- normalization


def test_batch_norm_passes_normalized_input(rng):
    x = rng.normal(size=(4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=1e-5).data
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_batch_norm_constant_channel_gives_beta():
    x = np.full((2, 2, 3, 3), 4.0)
    beta = np.array([0.3, -1.2])
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(beta)).data
    np.testing.assert_allclose(out, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape))


def test_batch_norm_moments(rng):
    x = rng.normal(3.0, 2.5, size=(5, 4, 6, 6))
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), eps=1e-12).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-5


def test_batch_norm_running_stats_momentum(rng):
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, training=False, eps=0.0).data
    np.testing.assert_allclose(out, (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1)))


def test_batch_norm_degenerate():
    with pytest.raises(DegenerateStatisticsError):
        T.batch_norm(T.Tensor(np.zeros((1, 2, 1, 1))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))


def test_group_norm_instance_limit_constant():
    x = np.broadcast_to(np.array([1.0, 5.0, -2.0]).reshape(1, 3, 1, 1), (2, 3, 4, 4)).copy()
    beta = np.array([0.1, 0.2, 0.3])
    out = T.group_norm(T.Tensor(x), 3, T.Tensor(np.ones(3)), T.Tensor(beta)).data
    np.testing.assert_allclose(out, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape))


def test_group_norm_batch_independent(rng):
    x = rng.normal(size=(3, 4, 5, 5))
    g, b = T.Tensor(rng.normal(size=4)), T.Tensor(rng.normal(size=4))
    full = T.group_norm(T.Tensor(x), 2, g, b).data
    alone = T.group_norm(T.Tensor(x[1:2]), 2, g, b).data
    np.testing.assert_array_equal(full[1:2], alone)


def test_group_norm_matches_group_moments(rng):
    x = rng.normal(1.0, 2.0, size=(2, 6, 4, 4))
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    out = T.group_norm(T.Tensor(x), 3, T.Tensor(gamma), T.Tensor(beta), eps=1e-5).data
    ref = np.empty_like(x)
    for n in range(2):
        for g in range(3):
            block = x[n, 2 * g : 2 * g + 2]
            ref[n, 2 * g : 2 * g + 2] = (block - block.mean()) / np.sqrt(block.var() + 1e-5)
    ref = ref * gamma.reshape(1, 6, 1, 1) + beta.reshape(1, 6, 1, 1)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_group_norm_divisibility():
    with pytest.raises(ConfigurationError):
        T.group_norm(T.Tensor(np.zeros((1, 5, 2, 2))), 2, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)))


# ---------------------------------------------------------------- activations and pooling


def test_activations():
    x = T.Tensor(np.array([[[[-1.0, 2.0, 0.0]]]]))
    np.testing.assert_array_equal(T.pointwise_activation(x, "relu").data, [[[[0.0, 2.0, 0.0]]]])
    assert T.pointwise_activation(x, "sigmoid").data[0, 0, 0, 2] == 0.5
    with pytest.raises(ConfigurationError):
        T.pointwise_activation(x, "tanh")


def test_max_pool_examples(rng):
    out = T.max_pool2d(T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data
    np.testing.assert_array_equal(out, [[[[4.0]]]])
    np.testing.assert_array_equal(T.max_pool2d(T.Tensor(np.full((1, 2, 4, 6), 3.0))).data, np.full((1, 2, 2, 3), 3.0))
    x = rng.normal(size=(2, 3, 6, 8))
    ref = np.array([[[[x[a, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max() for j in range(4)] for i in range(3)]
                     for c in range(3)] for a in range(2)])
    np.testing.assert_array_equal(T.max_pool2d(T.Tensor(x)).data, ref)
    with pytest.raises(DimensionError):
        T.max_pool2d(T.Tensor(np.zeros((1, 1, 3, 4))))


def test_global_max_pool(rng):
    heat = np.zeros((1, 1, 5, 5))
    heat[0, 0, 2, 3] = 7.5
    assert T.global_max_pool(T.Tensor(heat)).data[0, 0] == 7.5
    x = rng.normal(size=(2, 3, 4, 5))
    for dy, dx in [(1, 0), (3, 4), (2, 2)]:
        np.testing.assert_array_equal(T.global_max_pool(T.Tensor(circular_shift(x, dy, dx))).data,
                                      T.global_max_pool(T.Tensor(x)).data)


def test_global_max_pool_gradient_routes_to_argmax(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    p = T.Param(x.copy(), "x")
    T.sum_all(T.global_max_pool(p)).backward()
    numeric = T.finite_difference_gradient(lambda a: float(a.max()), x.copy())
    expected = np.zeros_like(x)
    expected.flat[np.argmax(x)] = 1.0
    np.testing.assert_array_equal(p.grad, expected)
    np.testing.assert_allclose(numeric, expected, atol=1e-8)


def test_global_max_pool_tie_goes_to_first():
    p = T.Param(np.ones((1, 1, 2, 2)), "x")
    T.sum_all(T.global_max_pool(p)).backward()
    np.testing.assert_array_equal(p.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_global_avg_pool(rng):
    assert T.global_avg_pool(T.Tensor(np.full((1, 1, 3, 3), 2.0))).data[0, 0] == 2.0
    assert T.global_avg_pool(T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data[0, 0] == 2.5
    x = rng.integers(-8, 8, size=(2, 2, 4, 4)).astype(float)
    np.testing.assert_array_equal(T.global_avg_pool(T.Tensor(circular_shift(x, 1, 3))).data,
                                  T.global_avg_pool(T.Tensor(x)).data)


# ---------------------------------------------------------------- resampling


def test_bilinear_identity_and_constant(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(T.bilinear_upsample(T.Tensor(x), size=(3, 3)).data, x)
    up = T.bilinear_upsample(T.Tensor(np.full((1, 1, 2, 3), 1.5)), size=(7, 11)).data
    np.testing.assert_allclose(up, 1.5)


def test_bilinear_matches_formula():
    src = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = T.bilinear_upsample(T.Tensor(src[None, None]), size=(4, 4)).data[0, 0]
    np.testing.assert_allclose(up, bilinear_point(src, 4, 4), atol=1e-12)
    # frozen values of the half-pixel convention
    np.testing.assert_allclose(up[0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(up[1], [0.5, 0.75, 1.25, 1.5])


def test_bilinear_random_formula(rng):
    src = rng.normal(size=(3, 5))
    up = T.bilinear_upsample(T.Tensor(src[None, None]), size=(7, 13)).data[0, 0]
    np.testing.assert_allclose(up, bilinear_point(src, 7, 13), atol=1e-12)


def test_bilinear_rejects_downsampling():
    with pytest.raises(ConfigurationError):
        T.bilinear_upsample(T.Tensor(np.zeros((1, 1, 4, 4))), size=(2, 4))


# ---------------------------------------------------------------- loss


def test_bce_examples(rng):
    assert abs(float(T.bce_with_logits(T.Tensor(np.zeros((1, 1))), np.ones((1, 1))).data) - np.log(2)) < 1e-12
    assert float(T.bce_with_logits(T.Tensor(np.full((1, 1), 20.0)), np.ones((1, 1))).data) < 1e-8
    z = rng.normal(scale=3.0, size=(6, 4))
    t = rng.integers(0, 2, size=(6, 4))
    s = 1 / (1 + np.exp(-z))
    ref = np.mean(-(t * np.log(s) + (1 - t) * np.log(1 - s)))
    assert abs(float(T.bce_with_logits(T.Tensor(z), t).data) - ref) < 1e-9
    with pytest.raises(InputError):
        T.bce_with_logits(T.Tensor(z), t * 0.5 + 0.25)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.integers(0, 255))
def test_bce_nonnegative(logits, bits):
    z = np.array(logits)[None]
    t = np.array([(bits >> i) & 1 for i in range(z.size)])[None]
    assert float(T.bce_with_logits(T.Tensor(z), t).data) >= 0.0


# ---------------------------------------------------------------- adam


def scalar_adam(x, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        traj.append(x)
    return traj


def test_adam_zero_gradient_is_noop():
    p = T.Param(np.array([1.5, -2.0]), "w")
    T.adam_step([p], T.AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_first_step_closed_form():
    g = np.array([3.0, -0.02])
    p = T.Param(np.zeros(2), "w")
    p.grad = g.copy()
    state = T.adam_step([p], T.AdamState(lr=1e-3))
    # bias-corrected m = g and v = g**2 after one step
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    assert state.step == 1


def test_adam_trajectory_matches_scalar_reference():
    p = T.Param(np.array([2.0]), "x")
    opt = T.Adam([p], lr=0.1)
    traj = []
    for _ in range(5):
        opt.zero_grad()
        T.sum_all(T.mul(p, p)).backward()
        opt.step()
        traj.append(float(p.data[0]))
    ref = scalar_adam(2.0, lambda x: 2 * x, 5, 0.1)
    np.testing.assert_allclose(traj, ref, rtol=0, atol=1e-10)
    assert opt.state.step == 5


def test_adam_nonfinite_gradient_names_param():
    p = T.Param(np.zeros(2), "decoder.w")
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(OptimizerError, match="decoder.w"):
        T.adam_step([p], T.AdamState())


# ---------------------------------------------------------------- finite differences


def test_finite_difference_examples():
    g = T.finite_difference_gradient(lambda x: float(np.sum(x**2)), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-8
    a = np.array([1.5, -2.0, 0.25])
    g = T.finite_difference_gradient(lambda x: float(a @ x), np.zeros(3), h=0.7)
    np.testing.assert_allclose(g, a, atol=1e-12)


def test_conv_gradient_vs_finite_differences(rng):
    err = grad_check(lambda x, w, b: T.conv2d(x, w, b, 1, 1), [rng.normal(size=(2, 2, 5, 5)),
                                                                 rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)], rng)
    assert err < 1e-5


def test_gradcheck_in_float32_is_looser(rng):
    x = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
    weights = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
    p = T.Param(x.copy(), "x")
    T.sum_all(T.mul(T.conv2d(p, T.Tensor(w), padding=1), T.Tensor(weights))).backward()
    assert p.grad.dtype == np.float32
    numeric = T.finite_difference_gradient(
        lambda a: float((T.conv2d(T.Tensor(a.astype(np.float64)), T.Tensor(w.astype(np.float64)), padding=1).data
                         * weights).sum()), x.astype(np.float64))
    assert T.relative_error(p.grad, numeric) < 1e-3


# ---------------------------------------------------------------- properties


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 2**31 - 1))
def test_circular_conv_shift_equivariance(dy, dx, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 8, 8))
    w = r.normal(size=(3, 2, 3, 3))
    f = lambda a: T.conv2d(T.Tensor(a), T.Tensor(w), padding=1, pad_mode="circular").data
    assert np.abs(f(circular_shift(x, dy, dx)) - circular_shift(f(x), dy, dx)).max() < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_strided_conv_and_pool_shift_by_stride_multiples(ky, kx, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2, 8, 8))
    w = r.normal(size=(2, 2, 3, 3))
    conv = lambda a: T.conv2d(T.Tensor(a), T.Tensor(w), stride=2, padding=1, pad_mode="circular").data
    pool = lambda a: T.max_pool2d(T.Tensor(a)).data
    for f in (conv, pool):
        err = np.abs(f(circular_shift(x, 2 * ky, 2 * kx)) - circular_shift(f(x), ky, kx)).max()
        assert err < 1e-5


def test_ops_are_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    b = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_tape_counts_ops():
    x = T.Tensor(np.ones((1, 1, 2, 2)))
    y = T.add(T.global_avg_pool(x), T.global_avg_pool(T.relu(x)))
    assert T.count_ops(y, "global_avg_pool") == 2
    assert T.count_ops(y, "relu") == 1


def test_no_grad_drops_closures():
    p = T.Param(np.ones((1, 1, 2, 2)), "p")
    with T.no_grad():
        y = T.relu(p)
    assert not y.requires_grad
