import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caga import layers as L
from caga import tensor as T
from caga.errors import ContractError, ShapeError
from caga.oracles import conv2d_loop, dsconv_loop, valid_placements

from conftest import leaf, weighted_sum


@pytest.mark.parametrize("k, d, expected", [(3, 1, 3), (3, 2, 5), (3, 3, 7), (5, 2, 9), (1, 3, 1)])
def test_effective_kernel_size(k, d, expected):
    assert L.effective_kernel_size(k, d) == expected


@given(k=st.sampled_from([1, 3, 5]), d=st.integers(1, 3), s=st.integers(1, 2), extra=st.integers(0, 20))
def test_output_extent_matches_placement_count(k, d, s, extra):
    H = L.effective_kernel_size(k, d) + extra
    assert L.dilated_output_extent(H, k, d, s) == valid_placements(H, k, d, s)


def test_kernel_larger_than_input():
    with pytest.raises(ShapeError, match="kernel larger than input"):
        L.dilated_output_extent(6, 3, 3)


@given(k=st.sampled_from([1, 3]), d=st.integers(1, 3), s=st.integers(1, 2), same=st.booleans(),
       depthwise=st.booleans(), seed=st.integers(0, 10_000))
def test_conv2d_matches_loop_oracle(k, d, s, same, depthwise, seed):
    r = np.random.default_rng(seed)
    C = 3
    O = C if depthwise else 2
    groups = C if depthwise else 1
    H, W = 8 + r.integers(0, 3), 7 + r.integers(0, 3)
    x = r.normal(size=(C, H, W))
    w = r.normal(size=(O, C // groups, k, k))
    b = r.normal(size=O)
    spec = L.ConvSpec(C, O, k, s, d, "same" if same else "valid", True, groups)
    expected, _ = conv2d_loop(x, w, b, s, d, spec.pad, groups)
    got = L.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), spec).data
    assert got.shape == expected.shape
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_conv2d_batched_equals_per_sample(rng):
    x = rng.normal(size=(3, 2, 9, 9))
    w = rng.normal(size=(4, 2, 3, 3))
    batched = L.conv2d(T.Tensor(x), T.Tensor(w), dilation=2).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], L.conv2d(T.Tensor(x[b]), T.Tensor(w), dilation=2).data)


def test_same_padding_preserves_extent(rng):
    for d in (1, 2, 3):
        out = L.conv2d(T.Tensor(rng.normal(size=(1, 9, 11))), T.Tensor(rng.normal(size=(1, 1, 3, 3))),
                       dilation=d, padding="same")
        assert out.shape == (1, 9, 11)


@pytest.mark.parametrize("d, s, padding, groups", [
    (1, 1, "valid", 1), (2, 1, "valid", 1), (3, 1, "valid", 1), (2, 2, "valid", 1),
    (1, 1, "same", 1), (3, 1, "same", 1), (1, 1, "same", 2), (2, 2, "same", 2),
])
def test_conv2d_gradients(rng, d, s, padding, groups):
    x = leaf(rng, 2, 2, 10, 9)
    w = leaf(rng, 2, 2 // groups, 3, 3)
    b = leaf(rng, 2)
    fn = weighted_sum(lambda t: L.conv2d(t[0], t[1], t[2], stride=s, dilation=d, padding=padding, groups=groups),
                      [x, w, b])
    assert T.gradcheck(fn, [x, w, b]) < 1e-4


def test_pointwise_strided_gradient(rng):
    x, w = leaf(rng, 1, 3, 6, 6), leaf(rng, 2, 3, 1, 1)
    fn = weighted_sum(lambda t: L.conv2d(t[0], t[1], stride=2), [x, w])
    assert T.gradcheck(fn, [x, w]) < 1e-4


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        L.conv2d(T.Tensor(rng.normal(size=(2, 5, 5))), T.Tensor(rng.normal(size=(1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        L.conv2d(T.Tensor(rng.normal(size=(1, 5, 5))), T.Tensor(rng.normal(size=(1, 1, 3, 3))), dilation=3)
    with pytest.raises(ContractError):
        L.ConvSpec(4, 8, groups=4)


@given(d=st.integers(1, 3), seed=st.integers(0, 1000))
def test_depthwise_separable_matches_oracle(d, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 8, 8))
    dw_w, dw_b = r.normal(size=(3, 1, 3, 3)), r.normal(size=3)
    pw_w, pw_b = r.normal(size=(5, 3, 1, 1)), r.normal(size=5)
    got = L.depthwise_separable_conv(*(T.Tensor(a) for a in (x, dw_w, dw_b, pw_w, pw_b)), dilation=d).data
    np.testing.assert_allclose(got, dsconv_loop(x, dw_w, dw_b, pw_w, pw_b, d), atol=1e-10)


def test_depthwise_separable_param_count(rng):
    assert L.DepthwiseSeparableConv(32, 48, rng).num_parameters() == 32 * 9 + 32 + 32 * 48 + 48


def test_interpolation_rows_sum_to_one():
    for n_in, n_out in ((3, 7), (8, 4), (5, 5), (1, 4)):
        A = L.interpolation_matrix(n_in, n_out)
        np.testing.assert_allclose(A.sum(axis=1), 1.0)


def test_interpolation_known_values():
    # align-corners-false upsampling of [0, 1] by 2
    np.testing.assert_allclose(L.interpolation_matrix(2, 4) @ np.array([0.0, 1.0]), [0.0, 0.25, 0.75, 1.0])


def test_interpolation_identity_and_constants(rng):
    x = T.Tensor(rng.normal(size=(2, 4, 5)))
    assert L.interpolate_bilinear(x, (4, 5)) is x
    const = L.interpolate_bilinear(T.Tensor(np.full((1, 3, 3), 2.5)), (7, 4)).data
    np.testing.assert_allclose(const, 2.5)


def test_interpolation_gradient(rng):
    x = leaf(rng, 2, 1, 3, 4)
    assert T.gradcheck(weighted_sum(lambda t: L.interpolate_bilinear(t[0], (5, 7)), [x]), [x]) < 1e-4


def test_xavier_bounds_and_determinism():
    w1 = L.xavier_uniform((64, 32), 64, 32, np.random.default_rng(82)).data
    w2 = L.xavier_uniform((64, 32), 64, 32, np.random.default_rng(82)).data
    a = np.sqrt(6 / 96)
    assert np.abs(w1).max() <= a
    np.testing.assert_array_equal(w1, w2)
    assert L.conv_fans((8, 3, 3, 3)) == (27, 72)


def test_batchnorm_training_statistics(rng):
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    bn = L.BatchNorm2d(3)
    y = bn(T.Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    n = 4 * 25
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batchnorm_eval_uses_running_stats(rng):
    bn = L.BatchNorm2d(2)
    bn.running_mean[:] = [1.0, -1.0]
    bn.running_var[:] = [4.0, 1.0]
    bn.eval()
    x = rng.normal(size=(1, 2, 3, 3))
    y = bn(T.Tensor(x)).data
    expected = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(np.array([4.0, 1.0]) + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(y, expected)


def test_batchnorm_degenerate_batch():
    with pytest.raises(ContractError):
        L.BatchNorm2d(2)(T.Tensor(np.ones((1, 2, 1, 1))))


def test_batchnorm_gradient(rng):
    x, g, b = leaf(rng, 3, 2, 3, 3), leaf(rng, 2), leaf(rng, 2)

    def build(t):
        return L.batchnorm2d(t[0], L.BatchNormState(t[1], t[2], np.zeros(2), np.ones(2)), training=True)

    assert T.gradcheck(weighted_sum(build, [x, g, b]), [x, g, b]) < 1e-4


def test_linear_gradient_and_count(rng):
    lin = L.Linear(48, 4, rng)
    assert lin.num_parameters() == 196
    x = leaf(rng, 5, 48)
    lin.bias.data[:] = rng.normal(size=4)
    params = [x, lin.weight, lin.bias]
    assert T.gradcheck(weighted_sum(lambda t: lin(t[0]), params), params) < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    class Net(L.Module):
        def __init__(self):
            super().__init__()
            self.conv = L.Conv2d(L.ConvSpec(2, 3), rng)
            self.bn = L.BatchNorm2d(3)

    a, b = Net(), Net()
    a.bn.running_mean[:] = [1, 2, 3]
    L.save_checkpoint(a, str(tmp_path))
    names = L.read_manifest(str(tmp_path / "manifest.txt"))
    assert set(names) == {"conv.weight", "conv.bias", "bn.gamma", "bn.beta"}
    L.load_checkpoint(b, str(tmp_path))
    for (n1, v1), (n2, v2) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items())):
        assert n1 == n2
        np.testing.assert_array_equal(v1, v2)


def test_load_state_dict_rejects_mismatch(rng):
    conv = L.Conv2d(L.ConvSpec(2, 3), rng)
    with pytest.raises(ContractError):
        conv.load_state_dict({})
    with pytest.raises(ShapeError):
        conv.load_state_dict({"weight": np.zeros((1, 1, 1, 1)), "bias": np.zeros(3)})
