import numpy as np
import pytest

from pvnowcast.layers import (
    MLP,
    BatchNorm,
    DenseLayer,
    FireModule,
    Identity,
    ImageDecoder,
    ImageEncoder,
    LstmStack,
    Projection,
    admissible_resolutions,
    pooling_levels,
    shortcut,
)
from pvnowcast.tensor import ShapeError, Tensor, gradient_check, ops, precision


def zero_all(module):
    for p in module.parameters():
        p.data[...] = 0.0


def test_mlp_zero_weights_give_half():
    with precision("f64"):
        m = MLP([6, 64, 64, 1])
        zero_all(m)
        for layer in m.layers:
            if layer.bn is not None:
                layer.bn.gamma.data[...] = 1.0
        out = m(Tensor(np.random.default_rng(0).normal(size=(5, 6))))
    np.testing.assert_array_equal(out.data, np.full((5, 1), 0.5))


def test_mlp_history_to_unit_interval():
    m = MLP([6, 64, 64, 1], rng=np.random.default_rng(1))
    out = m(Tensor(np.random.default_rng(2).uniform(size=(8, 6))))
    assert out.shape == (8, 1)
    assert np.all((out.data > 0) & (out.data < 1))


def test_single_layer_closed_form():
    layer = DenseLayer(1, 1, activation="sigmoid", dtype=np.float64)
    layer.weight.data[...] = 1.0
    out = layer(Tensor(np.array([[2.0]])))
    assert out.item() == pytest.approx(1 / (1 + np.exp(-2.0)), abs=1e-12)
    assert out.item() == pytest.approx(0.8808, abs=1e-4)


def test_mlp_mismatch_names_layer():
    m = MLP([6, 8, 1])
    with pytest.raises(ShapeError, match="layer 0"):
        m(Tensor(np.zeros((2, 5))))


def test_dense_before_batch_norm_has_no_bias():
    assert DenseLayer(4, 3, batch_norm=True).bias is None
    assert DenseLayer(4, 3).bias is not None


def test_batch_norm_modes():
    rng = np.random.default_rng(0)
    bn = BatchNorm(3, dtype=np.float64)
    x = Tensor(rng.normal(5.0, 3.0, (32, 3)))
    y = bn(x).data
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-5)
    bn.eval()
    a = rng.normal(size=(4, 3))
    b = np.vstack([a[:1], rng.normal(size=(6, 3))])
    # eval mode is a per-row affine map
    np.testing.assert_array_equal(bn(Tensor(a)).data[0], bn(Tensor(b)).data[0])


@pytest.mark.parametrize("resolution, pools", [(16, 1), (32, 2), (64, 3), (128, 4)])
def test_encoder_depth_follows_resolution(resolution, pools):
    assert pooling_levels(resolution) == pools
    enc = ImageEncoder(in_channels=2, resolution=resolution, stem_channels=4, fire_channels=(4, 8, 8), squeeze=2, latent=256)
    assert enc.levels == pools
    assert len(enc.fires) == min(3, pools - 1)
    z = enc(Tensor(np.random.default_rng(0).uniform(size=(1, 2, resolution, resolution))))
    assert z.shape == (1, 256)


def test_encoder_single_image_and_weight_sharing():
    enc = ImageEncoder(in_channels=3, resolution=16, n_fire=1, stem_channels=4, fire_channels=(8,), squeeze=2)
    enc.eval()
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    other = np.random.default_rng(1).uniform(size=(3, 16, 16))
    assert enc(Tensor(img)).shape == (256,)
    z = enc(Tensor(np.stack([img, other, img]))).data
    np.testing.assert_array_equal(z[0], z[2])
    assert not np.allclose(z[0], z[1])


def test_encoder_rejects_bad_resolution():
    with pytest.raises(ValueError, match=r"\[16, 32, 64, 128\]"):
        ImageEncoder(resolution=48)
    assert admissible_resolutions(3) == [16, 32, 64, 128]
    enc = ImageEncoder(in_channels=1, resolution=16, stem_channels=4, fire_channels=(4,), squeeze=2)
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((1, 1, 32, 32))))


def test_fire_module_shape_and_zero_weights():
    fire = FireModule(8, 64, squeeze=16)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 6, 6)))
    y = fire(x)
    assert y.shape == (2, 64, 6, 6)
    zero_all(fire)
    for bn in (fire.squeeze.bn, fire.expand1.bn, fire.expand3.bn):
        bn.gamma.data[...] = 1.0
    assert not np.any(fire(x).data)
    with pytest.raises(ShapeError, match="input channels"):
        fire(Tensor(np.zeros((1, 3, 4, 4))))


def test_fire_module_gradient():
    with precision("f64"):
        fire = FireModule(1, 8, squeeze=4, rng=np.random.default_rng(3))
        x = Tensor(np.random.default_rng(4).normal(size=(1, 1, 8, 8)), requires_grad=True)
        w = np.random.default_rng(5).normal(size=(1, 8, 8, 8))
        err = gradient_check(lambda v: ops.sum(ops.mul(fire(v), Tensor(w))), x)
    assert err < 1e-4


def test_shortcut_identity_when_widths_match():
    assert isinstance(shortcut(64, 64), Identity)
    assert isinstance(shortcut(64, 128), Projection)
    proj = Projection(4, 4, dtype=np.float64)
    proj.conv.weight.data[...] = np.eye(4).reshape(4, 4, 1, 1)
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 5))
    assert proj(Tensor(x)).data.tobytes() == Identity()(Tensor(x)).data.tobytes()


def test_lstm_zero_weights_give_zero():
    stack = LstmStack(5, hidden=4)
    zero_all(stack)
    out = stack([Tensor(np.ones((3, 5)))])
    np.testing.assert_array_equal(out.data, np.zeros((3, 4)))


def test_lstm_order_sensitivity():
    stack = LstmStack(1, hidden=6, rng=np.random.default_rng(7))
    seq = [0.1, 0.9, -0.5, 0.3]
    a = stack([Tensor([[v]]) for v in seq]).data
    b = stack([Tensor([[v]]) for v in reversed(seq)]).data
    c = stack([Tensor([[0.2]]) for _ in seq]).data
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_lstm_gradient_three_steps():
    with precision("f64"):
        stack = LstmStack(3, hidden=4, rng=np.random.default_rng(1))
        rng = np.random.default_rng(2)
        rest = [Tensor(rng.normal(size=(2, 3))) for _ in range(2)]
        w = rng.normal(size=(2, 4))
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        err = gradient_check(lambda v: ops.sum(ops.mul(stack([v] + rest), Tensor(w))), x)
    assert err < 1e-4


def test_lstm_empty_sequence():
    with pytest.raises(ValueError, match="empty"):
        LstmStack(2, hidden=2)([])


@pytest.mark.parametrize("resolution, stages", [(128, 5), (32, 3)])
def test_decoder_stages(resolution, stages):
    dec = ImageDecoder(latent=256, out_channels=20, resolution=resolution, seed_channels=8, channels=(8, 8, 8, 8))
    assert len(dec.blocks) == stages
    assert dec(Tensor(np.zeros((2, 256)))).shape == (2, 20, resolution, resolution)


def test_decoder_zero_in_zero_out():
    dec = ImageDecoder(latent=16, out_channels=3, resolution=16, seed_channels=4, channels=(4,))
    zero_all(dec)
    for b in dec.blocks:
        b.bn.gamma.data[...] = 1.0
    assert not np.any(dec(Tensor(np.zeros((2, 16)))).data)


def test_decoder_rejects_unreachable_resolution():
    with pytest.raises(ValueError, match="admissible"):
        ImageDecoder(resolution=256, channels=(8, 8))


def test_module_names_are_stable():
    names = [n for n, _ in MLP([3, 4, 1]).named_parameters()]
    assert names == ["layer0.weight", "layer0.bn.gamma", "layer0.bn.beta", "layer1.weight", "layer1.bias"]
