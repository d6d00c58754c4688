import numpy as np
import pytest

from stattn.autodiff import DimensionError, Tensor, gradient_errors, projected
from stattn.spatial import MaskNetwork, apply_mask, export_masks, mask_forward, read_pgm, write_pgm


@pytest.fixture
def net(rng):
    return MaskNetwork(8, 6, 4, rng)


def test_zero_final_layer_gives_half(net, rng):
    net.conv3.weight.data[:] = 0.0
    net.conv3.bias.data[:] = 0.0
    m = mask_forward(net, Tensor(rng.normal(size=(8, 7, 7))))
    np.testing.assert_array_equal(m.data, np.full((1, 7, 7), 0.5))


def test_large_bias_saturates(net, rng):
    net.conv3.weight.data[:] = 0.0
    net.conv3.bias.data[:] = 20.0
    m = mask_forward(net, Tensor(rng.normal(size=(8, 7, 7))))
    assert (m.data > 1 - 1e-8).all()


def test_output_shape_and_range(net, rng):
    m = mask_forward(net, Tensor(rng.normal(size=(3, 8, 7, 5))))
    assert m.shape == (3, 1, 7, 5)
    assert ((m.data > 0) & (m.data < 1)).all()


def test_gradients(rng):
    net = MaskNetwork(8, 4, 3, rng)
    x = Tensor(rng.normal(size=(8, 7, 7)), requires_grad=True)
    r = rng.normal(size=(1, 7, 7))
    params = [x] + net.parameters()
    # network-level checks use a smaller step: train-mode BN over 49 pixels is strongly curved
    errs = gradient_errors(lambda: projected(mask_forward(net, x), r), params, 1e-5)
    assert max(errs) < 1e-4


def test_channel_mismatch(net):
    with pytest.raises(DimensionError, match="channel"):
        mask_forward(net, Tensor(np.zeros((4, 7, 7))))


def test_per_frame_in_eval_mode(net, rng):
    net.eval()
    x = rng.normal(size=(4, 8, 5, 5))
    whole = mask_forward(net, Tensor(x)).data
    perm = [2, 0, 3, 1]
    np.testing.assert_allclose(mask_forward(net, Tensor(x[perm])).data, whole[perm], atol=1e-15)


class TestApplyMask:
    def test_ones_is_identity(self, rng):
        x = rng.normal(size=(3, 4, 4))
        np.testing.assert_array_equal(apply_mask(Tensor(x), Tensor(np.ones((1, 4, 4)))).data, x)

    def test_zeros(self, rng):
        out = apply_mask(Tensor(rng.normal(size=(3, 4, 4))), Tensor(np.zeros((1, 4, 4))))
        assert not out.data.any()

    def test_example(self):
        out = apply_mask(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor([[[1.0, 0.0], [0.0, 1.0]]]))
        np.testing.assert_array_equal(out.data, [[[1.0, 0.0], [0.0, 4.0]]])

    def test_broadcast_over_channels(self, rng):
        x, m = rng.normal(size=(5, 3, 3)), rng.uniform(size=(1, 3, 3))
        out = apply_mask(Tensor(x), Tensor(m)).data
        for c in range(5):
            np.testing.assert_array_equal(out[c], x[c] * m[0])

    def test_linear_in_features(self, rng):
        x, y, m = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4)), Tensor(rng.uniform(size=(1, 4, 4)))
        lhs = apply_mask(Tensor(2.5 * x - 1.5 * y), m).data
        rhs = 2.5 * apply_mask(Tensor(x), m).data - 1.5 * apply_mask(Tensor(y), m).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_attenuates(self, rng):
        x = rng.normal(size=(3, 4, 4))
        ratio = apply_mask(Tensor(x), Tensor(rng.uniform(size=(1, 4, 4)))).data / x
        assert ((ratio >= 0) & (ratio <= 1)).all()

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            apply_mask(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 4))))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        m = Tensor(rng.uniform(size=(1, 3, 3)), requires_grad=True)
        r = rng.normal(size=(2, 3, 3))
        assert max(gradient_errors(lambda: projected(apply_mask(x, m), r), [x, m], 1e-3)) < 1e-4


def test_pgm_quantization(tmp_path):
    img = np.array([[0.0, 0.5, 1.0], [0.2, 0.999, 0.0021]])
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 128, 255], [51, 255, 1]])


def test_export_masks_names(tmp_path):
    paths = export_masks(np.ones((3, 1, 2, 2)), tmp_path, "clip")
    assert [p.name for p in paths] == ["clip_1_mask.pgm", "clip_2_mask.pgm", "clip_3_mask.pgm"]
    assert (read_pgm(paths[0]) == 255).all()
