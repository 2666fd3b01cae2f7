import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csicodec.autograd import Tensor
from csicodec.codec import (
    CodecConfig,
    CsiCodec,
    MultiUserCsiCodec,
    JointFeatureDecoder,
    ResidualBlock,
    add_noise,
    merge_complex,
    quantization_noise,
    quantize,
    split_complex,
)
from csicodec.evaluate import estimated_bits
from csicodec.rangecoder import Bitstream, ModelMismatchError


def random_csi(n, n_c=32, n_t=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, n_c, n_t)) + 1j * rng.normal(size=(n, n_c, n_t))


def zero_biases(model):
    for name, p in model.named_parameters().items():
        if name.endswith(".bias") or name.endswith(".beta"):
            p.data[...] = 0.0


class TestComplexPlanes:
    def test_real_input_has_zero_imaginary_plane(self):
        x = split_complex(np.random.default_rng(0).normal(size=(4, 3)))
        assert x.shape == (2, 4, 3) and not x[1].any()

    def test_inverse_and_norm(self):
        h = random_csi(3, 8, 4)
        x = split_complex(h)
        np.testing.assert_array_equal(merge_complex(x), h)
        assert np.linalg.norm(x) == pytest.approx(np.linalg.norm(h), rel=1e-14)

    def test_merge_needs_two_planes(self):
        with pytest.raises(ValueError):
            merge_complex(np.zeros((3, 4, 4)))


class TestQuantizer:
    @pytest.mark.parametrize("value, expected", [(0.4, 0.0), (-1.5, -2.0), (2.5, 3.0), (-0.5, -1.0), (0.5, 1.0)])
    def test_rounding_convention(self, value, expected):
        assert quantize(np.array([value]))[0] == expected

    def test_integers_unchanged(self):
        m = np.arange(-5.0, 6.0)
        np.testing.assert_array_equal(quantize(m), m)

    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)))
    def test_error_bound(self, m):
        assert np.max(np.abs(m - quantize(m))) <= 0.5

    def test_noise_moments(self):
        u = quantization_noise(1_000_000, np.random.default_rng(0))
        assert abs(u.mean()) < 1e-3
        assert u.var() == pytest.approx(1 / 12, rel=0.01)
        assert u.min() >= -0.5 and u.max() < 0.5

    def test_unit_noise_variant(self):
        u = quantization_noise(10_000, np.random.default_rng(0), "unit")
        assert u.min() >= 0 and u.max() < 1

    def test_add_noise_is_differentiable(self):
        m = Tensor(np.zeros((2, 3)), requires_grad=True)
        add_noise(m, np.random.default_rng(0)).sum().backward()
        np.testing.assert_array_equal(m.grad, np.ones((2, 3)))


class TestConfig:
    def test_defaults(self):
        c = CodecConfig()
        assert c.total_factor == 16 and c.up_factors == (2, 2, 4)
        assert c.latent_shape(32, 16) == (32, 2, 1)

    @pytest.mark.parametrize(
        "kwargs",
        [{"down_factors": (3, 2, 2)}, {"upsample_mode": "bilinear"}, {"noise": "gauss"},
         {"fusion_positions": (2,)}, {"kernel_sizes": (9, 5)}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            CodecConfig(**kwargs)

    def test_dict_roundtrip(self):
        c = CodecConfig(down_factors=(4, 4, 1), residual_order="conv-prelu-bn")
        assert CodecConfig.from_dict(c.to_dict()) == c


class TestEncoderDecoder:
    def test_latent_shape(self):
        m = CsiCodec(CodecConfig(), seed=0).eval()
        assert m.encode_features(random_csi(2)).shape == (2, 32, 2, 1)
        assert m.encode_features(random_csi(1)[0]).shape == (32, 2, 1)

    def test_zero_in_zero_out(self):
        m = CsiCodec(seed=1).eval()
        zero_biases(m)
        assert not m.encode_features(np.zeros((32, 16))).any()
        assert not m.decode_features(np.zeros((32, 2, 1))).any()

    def test_fully_convolutional_width(self):
        m = CsiCodec(seed=2).eval()
        assert m.encode_features(random_csi(1, 64, 16)).shape == (1, 32, 4, 1)
        assert m.decode_features(np.zeros((1, 32, 4, 1))).shape == (1, 64, 16)

    def test_indivisible_input(self):
        m = CsiCodec(seed=3)
        with pytest.raises(ValueError):
            m.encode_features(random_csi(1, 24, 16))

    def test_decoder_rejects_wrong_channels(self):
        m = CsiCodec(seed=3)
        with pytest.raises(ValueError):
            m.decode_features(np.zeros((1, 8, 2, 1)))

    def test_zero_residual_kernels_are_identity(self):
        block = ResidualBlock(4, 3, rng=np.random.default_rng(0)).eval()
        block.conv1.weight.data[...] = 0.0
        block.conv2.weight.data[...] = 0.0
        x = np.random.default_rng(1).normal(size=(2, 4, 3, 3))
        np.testing.assert_array_equal(block(Tensor(x)).data, x)

    @pytest.mark.parametrize(
        "kwargs",
        [{"upsample_mode": "transposed"}, {"residual_order": "conv-prelu-bn"}, {"decoder_bn": False},
         {"down_factors": (4, 4, 1)}, {"n_residual_blocks": 0, "fusion_positions": ()}],
    )
    def test_variants_run(self, kwargs):
        m = CsiCodec(CodecConfig(**kwargs), seed=4).eval()
        out = m.reconstruct(random_csi(2))
        assert out.shape == (2, 32, 16) and np.isfinite(out).all()


@pytest.fixture(scope="module")
def model():
    m = CsiCodec(seed=5)
    m.meta.input_scale = 0.7
    m.freeze()
    return m


class TestCompress:
    def test_round_trip_matches_direct_path(self, model):
        for h in random_csi(5, seed=1):
            stream = Bitstream.from_bytes(model.compress(h).to_bytes())
            np.testing.assert_array_equal(model.decompress(stream), model.reconstruct(h))

    def test_latent_recovered_exactly(self, model):
        from csicodec.codec import decompress_latent

        h = random_csi(1, seed=2)[0]
        stream = model.compress(h)
        np.testing.assert_array_equal(decompress_latent(stream, model, model.tables), quantize(model.encode_features(h)))

    def test_rate_tracks_estimate(self, model):
        h = random_csi(1, seed=3)[0]
        stream = model.compress(h)
        est = estimated_bits(model, model.encode_features(h))
        assert abs(stream.payload_bits - est) <= 0.02 * est + 64

    def test_other_model_rejected(self, model):
        stream = model.compress(random_csi(1)[0])
        other = CsiCodec(seed=6)
        with pytest.raises(ModelMismatchError):
            other.decompress(stream)

    def test_model_id_tracks_weights(self):
        a = CsiCodec(seed=7)
        before = a.model_id()
        a.decoder.tail.conv.bias.data[0] += 1.0
        assert a.model_id() != before

    def test_raw_float_mode(self):
        m = CsiCodec(CodecConfig(entropy_coding=False), seed=8)
        m.freeze()
        h = random_csi(1)[0]
        stream = m.compress(h)
        assert stream.payload_bits == 32 * 64
        np.testing.assert_array_equal(m.decompress(Bitstream.from_bytes(stream.to_bytes())), m.reconstruct(h))


class TestJointDecoder:
    def test_zero_fusion_matches_single_branches(self):
        single = CsiCodec(seed=9).eval()
        joint = MultiUserCsiCodec.from_single(single, 2).eval()
        lat = [np.random.default_rng(i).normal(size=(3, 32, 2, 1)) for i in range(2)]
        outs = joint.decode_features(lat)
        for m, o in zip(lat, outs):
            np.testing.assert_array_equal(o, single.decode_features(m))

    def test_symmetric_weights_identical_latents(self):
        cfg = CodecConfig()
        dec = JointFeatureDecoder(cfg, 2, rng=np.random.default_rng(0)).eval()
        dec.branches[1].load_state_dict(dec.branches[0].state_dict())
        for stage in dec.fusion:
            stage[1].load_state_dict(stage[0].state_dict())
        m = np.random.default_rng(1).normal(size=(2, 32, 2, 1))
        a, b = dec([m, m])
        np.testing.assert_array_equal(a.data, b.data)

    def test_fusion_changes_output(self):
        dec = JointFeatureDecoder(CodecConfig(), 2, rng=np.random.default_rng(0)).eval()
        m = [np.random.default_rng(i).normal(size=(1, 32, 2, 1)) for i in range(2)]
        before = dec(m)[0].data.copy()
        dec.fusion_conv(0, 1, 0).bias.data[...] = 1.0
        assert not np.array_equal(dec(m)[0].data, before)

    def test_user_count_mismatch(self):
        dec = JointFeatureDecoder(CodecConfig(), 2)
        with pytest.raises(ValueError):
            dec([np.zeros((1, 32, 2, 1))] * 3)

    def test_latent_shapes_must_agree(self):
        dec = JointFeatureDecoder(CodecConfig(), 2)
        with pytest.raises(ValueError):
            dec([np.zeros((1, 32, 2, 1)), np.zeros((1, 32, 4, 1))])

    def test_two_fusion_stages(self):
        dec = JointFeatureDecoder(CodecConfig(), 3)
        assert len(dec.fusion) == 2 and all(len(s) == 6 for s in dec.fusion)

    def test_distributed_compress_round_trip(self):
        single = CsiCodec(seed=10)
        joint = MultiUserCsiCodec.from_single(single, 2)
        joint.decoder.fusion_conv(1, 0, 1).weight.data[...] = 0.01
        joint.freeze()
        hs = [random_csi(1, seed=s)[0] for s in (1, 2)]
        streams = [Bitstream.from_bytes(joint.compress(h, u).to_bytes()) for u, h in enumerate(hs)]
        for a, b in zip(joint.decompress(streams), joint.reconstruct(hs)):
            np.testing.assert_array_equal(a, b)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_entropy_stage_is_transparent(model, seed):
    h = random_csi(1, seed=seed)[0] * 3
    np.testing.assert_array_equal(model.decompress(model.compress(h)), model.reconstruct(h))
