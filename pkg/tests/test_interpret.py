import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caga import interpret as I
from caga import tensor as T
from caga.attention import CagaBlock, CagaConfig, caga_param_count
from caga.dataio import decode_pnm
from caga.errors import ContractError, ShapeError
from caga.layers import Conv2d, ConvSpec, Linear, read_manifest, save_checkpoint
from caga.model import CagaClassifier, ModelConfig
from caga.oracles import conv2d_loop
from caga.tensor import load_tnsr


def test_gradcam_hand_fixture():
    feats = np.array([[[1.0, 2.0], [3.0, 4.0]], [[4.0, 0.0], [1.0, 1.0]]])
    grads = np.stack([np.full((2, 2), 0.5), np.full((2, 2), -0.25)])
    # weights (0.5, -0.25): ReLU([[-0.5, 1], [1.25, 1.75]])
    np.testing.assert_allclose(I.grad_cam_from_maps(feats, grads, normalize=False), [[0, 1], [1.25, 1.75]])
    np.testing.assert_allclose(I.grad_cam_from_maps(feats, grads), [[0, 1 / 1.75], [1.25 / 1.75, 1]])


def test_gradcam_uniform_maps_give_uniform_heatmap():
    cam = I.grad_cam_from_maps(np.ones((3, 4, 4)), np.full((3, 4, 4), 0.2), (8, 8))
    np.testing.assert_array_equal(cam, np.ones((8, 8)))


def test_gradcam_negative_weights_give_zeros(rng):
    feats = rng.uniform(0.1, 1, size=(4, 3, 3))
    cam = I.grad_cam_from_maps(feats, -np.ones((4, 3, 3)), (6, 6))
    np.testing.assert_array_equal(cam, np.zeros((6, 6)))


@given(seed=st.integers(0, 999))
def test_gradcam_range_and_shape(seed):
    r = np.random.default_rng(seed)
    cam = I.grad_cam_from_maps(r.normal(size=(3, 4, 5)), r.normal(size=(3, 4, 5)), (16, 20))
    assert cam.shape == (16, 20) and cam.min() >= 0 and cam.max() <= 1
    assert cam.max() in (0.0, 1.0)


def test_gradcam_on_model(rng):
    model = CagaClassifier()
    img = rng.normal(size=(3, 32, 32))
    result = I.grad_cam(model, img, 2)
    assert result.heatmap.shape == (32, 32) and result.layer == "caga0"
    assert 0 <= result.heatmap.min() and result.heatmap.max() <= 1
    assert model.training  # mode restored
    for layer in ("stem0", "stem2"):
        assert I.grad_cam(model, img, 0, layer).heatmap.shape == (32, 32)


def test_gradcam_matches_manual_gradient(rng):
    model = CagaClassifier()
    model.eval()
    img = rng.normal(size=(3, 32, 32))
    with T.ComputationTape():
        cap = {}
        logits = model(T.Tensor(img[None]), capture=cap)
        T.backward(logits[0, 1])
        expected = I.grad_cam_from_maps(cap["caga0"].data[0], cap["caga0"].grad[0], (32, 32))
    np.testing.assert_allclose(I.grad_cam(model, img, 1).heatmap, expected)


def test_gradcam_errors(rng):
    model = CagaClassifier()
    with pytest.raises(LookupError):
        I.grad_cam(model, rng.normal(size=(3, 32, 32)), 0, "nope")
    with pytest.raises(ShapeError):
        I.grad_cam(model, rng.normal(size=(3, 32, 32)), 0, "pool")
    with pytest.raises(ContractError):
        I.grad_cam(model, rng.normal(size=(3, 32, 32)), 7)


def test_overlay_files_are_reproducible(rng):
    model = CagaClassifier(seed=82)
    img = np.random.default_rng(82).uniform(size=(3, 32, 32))
    a = I.heatmap_files(img, I.grad_cam(model, img, 0))
    b = I.heatmap_files(img, I.grad_cam(CagaClassifier(seed=82), img, 0))
    assert a == b
    assert a[0].startswith(b"P5\n32 32\n255\n") and a[1].startswith(b"P6\n32 32\n255\n")
    assert decode_pnm(a[1]).shape == (32, 32, 3)


def test_colormap_endpoints():
    cm = I.colormap(np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(cm[:, 0, 0], [0, 0, 0.5])
    np.testing.assert_allclose(cm[:, 0, 1], [0.5, 0, 0])


def test_profile_examples():
    rng = np.random.default_rng(0)
    dense = Conv2d(ConvSpec(3, 8, 3), rng)
    assert I.count_params(dense).total_params == 224
    assert I.count_macs(dense, (3, 10, 10)).total_macs == 13_824
    assert I.count_params(Linear(48, 4, rng)).total_params == 196
    assert I.count_macs(Conv2d(ConvSpec(1, 1, 1), rng), (1, 4, 4)).total_macs == 16
    assert I.attention_macs(8, 64) == (65_536, 4_096)
    assert I.interpolation_macs(2, (3, 3), (3, 3)) == 0
    assert I.interpolation_macs(2, (3, 3), (4, 5)) == 160


@given(k=st.sampled_from([1, 3]), d=st.integers(1, 3), s=st.integers(1, 2), c_in=st.integers(1, 3),
       c_out=st.integers(1, 3), extra=st.integers(0, 3))
def test_conv_macs_equal_oracle_iterations(k, d, s, c_in, c_out, extra):
    H = k + (k - 1) * (d - 1) + extra
    r = np.random.default_rng(0)
    layer = Conv2d(ConvSpec(c_in, c_out, k, s, d), r)
    _, loops = conv2d_loop(r.normal(size=(c_in, H, H)), layer.weight.data, None, s, d)
    assert I.count_macs(layer, (c_in, H, H)).total_macs == loops


def test_model_profile_totals_are_consistent(tmp_path):
    model = CagaClassifier()
    report = I.count_macs(model, (3, 32, 32))
    assert report.total_params == model.num_parameters() == I.count_params(model).total_params
    assert report.total_macs == sum(r.macs for r in report.rows)
    save_checkpoint(model, str(tmp_path))
    manifest = read_manifest(str(tmp_path / "manifest.txt"))
    assert sum(load_tnsr(os.path.join(tmp_path, f)).size for f in manifest.values()) == report.total_params
    without = I.count_macs(CagaClassifier(ModelConfig(use_caga=False)), (3, 32, 32))
    assert report.total_params - without.total_params == caga_param_count(CagaConfig(), 32)


def test_block_attention_rows():
    report = I.count_macs(CagaBlock(32, CagaConfig()), (32, 8, 8))
    rows = {r.layer: r.macs for r in report.rows}
    # dilation 1 on 8x8 leaves 6x6 = 36 tokens, dilation 3 leaves 2x2
    assert rows["caga.cga.head0.attn0"] == 2 * 8 * 36 ** 2
    assert rows["caga.cga.head0.attn0.softmax"] == 36 ** 2
    assert rows["caga.cga.head2.attn2"] == 2 * 8 * 16
    assert rows["caga.cga.head0.interp0"] == 4 * 8 * 64


def test_csv_and_flops_flag():
    report = I.ProfileReport()
    report.add("a", 3, 10)
    report.add("b", 0, 5)
    assert report.to_csv().splitlines() == ["layer,params,macs", "a,3,10", "b,0,5", "total,3,15"]
    assert report.to_csv(double=True).splitlines()[-1] == "total,3,30"
    assert report.flops() == 30


def test_parameter_reduction_pattern():
    assert I.parameter_reduction(58.9, 36.8) == 1 - 36.8 / 58.9
    assert round(I.parameter_reduction(58.9, 36.8), 3) == 0.375
    with pytest.raises(ContractError):
        I.parameter_reduction(0, 1)
