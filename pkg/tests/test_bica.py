import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfpnet import bica, nn
from mfpnet.errors import ShapeError
from mfpnet.tensor import Tensor, backward, tsum


def zero_params(channels, rows):
    return {k: Tensor(np.zeros(shape)) for k, (shape, _) in bica.bica_param_shapes(channels, rows).items()}


def random_params(rng, channels, rows):
    return {k: Tensor(rng.normal(size=shape) * 0.3) for k, (shape, _) in bica.bica_param_shapes(channels, rows).items()}


def unit_mask_params(O, Q, block):
    """Channel weights chosen so that every mask entry is exactly 1 on constant inputs."""
    rows = (O.shape[2] // block) * (O.shape[3] // block)
    p = zero_params(O.shape[1], rows)
    p["ca.b"] = Tensor(np.ones(1))
    return p


class TestSemanticDomain:
    def test_constant_input(self):
        X = Tensor(np.full((2, 3, 8, 8), 0.7))
        assert np.allclose(bica.semantic_domain(X, 4).data, 0.7)

    def test_row_count(self):
        S = bica.semantic_domain(Tensor(np.zeros((1, 16, 32, 32))), 8)
        assert S.shape == (1, 16, 16)

    def test_unit_block_is_reshape(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
        S = bica.semantic_domain(Tensor(x), 1).data
        assert np.array_equal(S, x.reshape(2, 3, 20).transpose(0, 2, 1))

    def test_stacked_rows(self):
        O = Tensor(np.zeros((1, 16, 32, 32)))
        assert bica.stacked_domain(O, O, 8).shape == (1, 32, 16)

    def test_schedule(self):
        cfg = bica.SemanticDomainConfig.for_depth(5)
        assert [cfg.block(t) for t in (4, 3, 2, 1)] == [1, 2, 4, 8]
        assert cfg.rows(1, 64) == 64
        with pytest.raises(ShapeError):
            cfg.rows(1, 12)


class TestChannelAttention:
    def test_zero_weights_give_zero(self):
        rng = np.random.default_rng(1)
        O, Q = Tensor(rng.normal(size=(2, 4, 8, 8))), Tensor(rng.normal(size=(2, 4, 8, 8)))
        out = bica.channel_attention(O, Q, zero_params(4, 4), 4, mask_activation="identity")
        assert np.all(out.data == 0)

    def test_sigmoid_mask_bounded(self):
        rng = np.random.default_rng(2)
        O, Q = Tensor(rng.normal(size=(2, 4, 8, 8))), Tensor(rng.normal(size=(2, 4, 8, 8)))
        m = bica.channel_mask(O, Q, random_params(rng, 4, 4), 4).data
        assert m.shape == (2, 4)
        assert np.all((m > 0) & (m < 1))

    def test_unit_mask_returns_q(self):
        rng = np.random.default_rng(3)
        O, Q = Tensor(np.ones((1, 3, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 4)))
        out = bica.channel_attention(O, Q, unit_mask_params(O, Q, 2), 2, mask_activation="identity")
        assert np.allclose(out.data, Q.data)

    def test_weight_shape_mismatch(self):
        O = Tensor(np.ones((1, 2, 4, 4)))
        with pytest.raises(ShapeError):
            bica.channel_attention(O, O, zero_params(2, 9), 2)

    def test_linear_in_q_with_fixed_mask(self):
        rng = np.random.default_rng(4)
        O, Q = Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 4)))
        m = bica.channel_mask(O, Q, random_params(rng, 3, 4), 2)
        a = nn.mul_channels(Q, m).data
        b = nn.mul_channels(Tensor(2.5 * Q.data), m).data
        assert np.allclose(b, 2.5 * a)


class TestFlow:
    def test_zero_params_zero_flow(self):
        rng = np.random.default_rng(5)
        O, Q = Tensor(rng.normal(size=(2, 4, 6, 6))), Tensor(rng.normal(size=(2, 4, 6, 6)))
        f = bica.flow_estimate(O, Q, zero_params(4, 9))
        assert f.shape == (2, 6, 6, 2)
        assert np.all(f.data == 0)

    def test_raw_output_is_in_pixels(self):
        O = Tensor(np.arange(20.0).reshape(1, 1, 4, 5))
        p = zero_params(1, 4)
        p["flow.k3.conv2.b"] = Tensor(np.array([0.0, 1.0]))  # one pixel to the right
        f = bica.flow_estimate(O, O, p)
        assert np.allclose(f.data[..., 1], 2.0 / 4) and np.allclose(f.data[..., 0], 0.0)
        out = bica.flow_warp(O, f).data
        assert np.allclose(out[..., :-1], O.data[..., 1:])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bica.flow_estimate(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 4, 2))), zero_params(2, 4))

    @given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_zero_flow_is_identity(self, H, W, seed):
        O = np.random.default_rng(seed).normal(size=(2, 3, H, W))
        out = bica.flow_warp(Tensor(O), Tensor(np.zeros((2, H, W, 2))))
        assert np.allclose(out.data, O, atol=1e-6)

    def test_one_column_shift(self):
        O = np.arange(20.0).reshape(1, 1, 4, 5)
        flow = np.zeros((1, 4, 5, 2))
        flow[..., 1] = 2.0 / (5 - 1)
        out = bica.flow_warp(Tensor(O), Tensor(flow)).data
        assert np.allclose(out[..., :-1], O[..., 1:])
        assert np.allclose(out[..., -1], O[..., -1])

    @pytest.mark.parametrize("value", [10.0, 1e6, -1e6])
    def test_saturation(self, value):
        O = np.random.default_rng(6).normal(size=(1, 2, 5, 4))
        out = bica.flow_warp(Tensor(O), Tensor(np.full((1, 5, 4, 2), value))).data
        corner = O[..., -1, -1] if value > 0 else O[..., 0, 0]
        assert np.allclose(out, corner[..., None, None])

    def test_flow_gradient_through_clamp(self):
        O = Tensor(np.random.default_rng(7).normal(size=(1, 1, 4, 4)))
        F = Tensor(np.full((1, 4, 4, 2), 5.0), requires_grad=True, name="F")
        g = backward(tsum(bica.flow_warp(O, F)), {"F": F})["F"]
        assert np.all(g == 0)  # fully saturated coordinates carry no gradient


class TestFuse:
    def test_identity_contrivance(self):
        rng = np.random.default_rng(8)
        O = Tensor(rng.normal(size=(1, 3, 4, 4)))
        Q = Tensor(rng.normal(size=(1, 3, 4, 4)))
        out = bica.bica_fuse(O, Q, unit_mask_params(O, Q, 2), 2, mask_activation="identity")
        assert np.allclose(out.data, O.data + Q.data)

    def test_shape_preserved(self):
        rng = np.random.default_rng(9)
        O = Tensor(rng.normal(size=(2, 4, 8, 8)))
        out = bica.bica_fuse(O, O, random_params(rng, 4, 16), 2)
        assert out.shape == O.shape

    def test_is_warp_plus_scaled_q(self):
        rng = np.random.default_rng(10)
        O, Q = Tensor(rng.normal(size=(1, 4, 4, 4))), Tensor(rng.normal(size=(1, 4, 4, 4)))
        p = random_params(rng, 4, 4)
        expected = (bica.flow_warp(O, bica.flow_estimate(O, Q, p)).data
                    + bica.channel_attention(O, Q, p, 2).data)
        assert np.allclose(bica.bica_fuse(O, Q, p, 2).data, expected)
