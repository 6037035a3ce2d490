import numpy as np
import pytest

from moespnet import layers as L
from moespnet.backbone import backbone_forward, init_backbone
from moespnet.config import ModelConfig
from moespnet.tensor import ShapeError, Tensor, backward

CFG = ModelConfig(backbone_widths=(4, 4, 8, 8, 8))


def test_pyramid_shapes(rng):
    params = init_backbone(CFG, 0)
    pyr = backbone_forward(Tensor(rng.random((2, 3, 64, 64))), params, CFG)
    assert pyr.f8.shape == (2, 8, 8, 8)
    assert pyr.f16.shape == (2, 8, 4, 4)
    assert pyr.f32.shape == (2, 8, 2, 2)


def test_three_blocks_only_stride8(rng):
    params = init_backbone(CFG, 0, blocks=3)
    assert not any("block4" in k for k in params)
    pyr = backbone_forward(Tensor(rng.random((1, 3, 32, 64))), params, CFG, blocks=3)
    assert pyr.f8.shape == (1, 8, 4, 8) and pyr.f16 is None and pyr.f32 is None


def test_mean_image_with_zero_bias_gives_zero_features():
    pyr = backbone_forward(Tensor(np.full((1, 3, 32, 32), CFG.input_mean)), init_backbone(CFG, 0), CFG)
    for f in (pyr.f8, pyr.f16, pyr.f32):
        assert not f.data.any()


def test_mean_is_subtracted(rng):
    x = rng.random((1, 3, 32, 32))
    shifted = ModelConfig(backbone_widths=CFG.backbone_widths, input_mean=0.0)
    params = init_backbone(CFG, 0)
    a = backbone_forward(Tensor(x), params, CFG).f8.data
    b = backbone_forward(Tensor(x - CFG.input_mean), params, shifted).f8.data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_first_layer_receives_gradient(rng):
    params = init_backbone(CFG, 1)
    pyr = backbone_forward(Tensor(rng.random((1, 3, 32, 32))), params, CFG)
    backward(L.sum_all(pyr.f8))
    assert np.abs(params["backbone.block1.conv1.weight"].grad).sum() > 0


@pytest.mark.parametrize("shape", [(1, 3, 48, 64), (1, 1, 64, 64), (1, 3, 0, 32)])
def test_bad_inputs(shape):
    with pytest.raises(ShapeError):
        backbone_forward(Tensor(np.zeros(shape)), init_backbone(CFG, 0), CFG)


def test_init_is_order_independent_and_seeded():
    a = init_backbone(CFG, 5)
    b = init_backbone(CFG, 5, blocks=2)
    np.testing.assert_array_equal(a["backbone.block2.conv1.weight"].data, b["backbone.block2.conv1.weight"].data)
    c = init_backbone(CFG, 6)
    assert not np.array_equal(a["backbone.block1.conv1.weight"].data, c["backbone.block1.conv1.weight"].data)
