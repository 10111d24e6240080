import numpy as np
import pytest

from mecam.cam import (
    aggregate,
    bundle_from_outputs,
    cam_pipeline,
    class_probability_map,
    exit_cam,
    exit_weights,
    mask_image,
    minmax_rescale,
    upsample_bilinear,
)
from mecam.errors import ShapeError
from mecam.model import ExitOutputs, ModelConfig, build
from mecam.tensor import Tensor


def test_class_probability_map_is_pixelwise_softmax():
    m = np.array([[[0.0, 1.0]], [[0.0, -1.0]]])  # C=2, 1x2
    p = class_probability_map(m, 0)
    np.testing.assert_allclose(p, [[0.5, 1 / (1 + np.exp(-2))]])


def test_class_probability_map_rejects_bad_class():
    with pytest.raises(ValueError):
        class_probability_map(np.zeros((2, 2, 2)), 2)


def test_minmax_rescale_range_and_flat_map():
    out = minmax_rescale(np.array([[2.0, 4.0], [3.0, 6.0]]))
    assert out.min() == 0.0 and out.max() == 1.0
    np.testing.assert_array_equal(minmax_rescale(np.full((3, 3), 0.7)), np.zeros((3, 3)))


def test_exit_cam_constant_map_is_zero():
    np.testing.assert_array_equal(exit_cam(np.ones((2, 4, 4)), 1), np.zeros((4, 4)))


def test_exit_weights_softmax_over_mask():
    logits = {1: np.array([0.0, 1.0]), 2: np.array([0.0, 1.0]), 3: np.array([0.0, 5.0])}
    w = exit_weights(logits, 1, [1, 2])
    assert w == pytest.approx({1: 0.5, 2: 0.5, 3: 0.0})
    w = exit_weights(logits, 1, [3])
    assert w[3] == 1.0


def test_exit_weights_unknown_exit():
    with pytest.raises(ValueError):
        exit_weights({1: np.zeros(2)}, 0, [2])
    with pytest.raises(ValueError):
        exit_weights({1: np.zeros(2)}, 0, [])


def test_upsample_known_values():
    # 2 -> 4 with half-pixel centres: edges clamp, middle interpolates at 1/4 and 3/4
    out = upsample_bilinear(np.array([[0.0, 1.0]]).repeat(2, axis=0), (4, 4))
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])


def test_upsample_constant_and_identity():
    np.testing.assert_allclose(upsample_bilinear(np.full((2, 2), 0.3), (8, 8)), 0.3)
    m = np.random.default_rng(0).random((4, 4))
    np.testing.assert_array_equal(upsample_bilinear(m, (4, 4)), m)


def test_upsample_refuses_downscale():
    with pytest.raises(ValueError):
        upsample_bilinear(np.zeros((4, 4)), (2, 2))


def test_aggregate_requires_normalised_weights():
    with pytest.raises(ValueError):
        aggregate({1: np.zeros((2, 2))}, {1: 0.5}, (4, 4))


def test_mask_image_broadcasts_over_channels():
    x = np.ones((3, 2, 2), np.float32)
    m = np.array([[1.0, 0.0], [0.5, 0.0]])
    out = mask_image(x, m)
    assert out.shape == (3, 2, 2)
    np.testing.assert_array_equal(out[2], [[0.0, 1.0], [0.5, 1.0]])
    with pytest.raises(ShapeError):
        mask_image(x, np.zeros((3, 3)))


def _outputs(rng, exits=(1, 2, 3, 4), c=2, sizes=(16, 8, 4, 2)):
    maps = [Tensor(rng.normal(size=(1, c, s, s))) for s in sizes[: len(exits)]]
    logits = [Tensor(m.data.mean(axis=(2, 3))) for m in maps]
    return ExitOutputs(tuple(exits), maps, logits, Tensor(np.zeros((1, 4))))


def test_single_exit_bundle_equals_that_exit():
    rng = np.random.default_rng(1)
    out = _outputs(rng)
    b = bundle_from_outputs(out, 0, (32, 32), [2])
    np.testing.assert_array_equal(b.aggregated, np.clip(b.upsampled[2], 0, 1))
    assert b.weights == {1: 0.0, 2: 1.0, 3: 0.0, 4: 0.0}


def test_bundle_uses_final_exit_prediction():
    rng = np.random.default_rng(2)
    out = _outputs(rng)
    out.logits[-1].data[:] = [[-3.0, 3.0]]
    assert bundle_from_outputs(out, 0, (32, 32)).predicted_class == 1


def test_cam_pipeline_shapes():
    model = build(ModelConfig(stage_widths=(4, 8, 8, 8), input_size=16), 0)
    x = np.random.default_rng(0).random((1, 16, 16)).astype(np.float32)
    bundle, masked = cam_pipeline(model, x, [1, 4])
    assert bundle.aggregated.shape == (16, 16)
    assert masked.shape == (1, 1, 16, 16)
    assert set(bundle.cams) == {1, 4}
    assert bundle.cams[1].shape == (8, 8) and bundle.cams[4].shape == (1, 1)
    assert (masked <= x + 1e-7).all()
