import numpy as np
import pytest

from texservo import autodiff as ad
from texservo import blocks as bl
from texservo.errors import ConfigError, ShapeError


def small_cfg(**kw):
    base = dict(channels_in=4, channels_expanded=8, embed_dim=8,
                num_dyn_kernels=3, patch_size=2, heads=1)
    base.update(kw)
    return bl.BlockConfig(**base)


class TestConfig:
    def test_rejects_shrinking_expansion(self):
        with pytest.raises(ConfigError):
            small_cfg(channels_expanded=2).validate()

    def test_rejects_bad_heads(self):
        with pytest.raises(ConfigError):
            small_cfg(heads=3).validate()


class TestAttentionBaselines:
    def test_se_gate_half_with_zero_weights(self):
        rng = np.random.default_rng(0)
        se = bl.SEAttention(rng, 6)
        for p in se.parameters():
            p.data[...] = 0.0
        x = ad.Tensor(np.random.default_rng(1).normal(size=(2, 6, 4, 4)))
        out = se.forward(x)
        # zero logits -> sigmoid gate of exactly 0.5 on every channel
        np.testing.assert_allclose(out.data, 0.5 * x.data, atol=1e-15)

    def test_eca_gate_bounded(self):
        rng = np.random.default_rng(2)
        eca = bl.ECAAttention(rng, 8)
        x = ad.Tensor(np.abs(rng.normal(size=(2, 8, 5, 5))))
        out = eca.forward(x)
        assert np.all(np.abs(out.data) <= np.abs(x.data) + 1e-15)

    def test_grn_identity_at_init(self):
        rng = np.random.default_rng(3)
        grn = bl.GRNAttention(rng, 5)
        x = ad.Tensor(rng.normal(size=(2, 5, 3, 3)))
        np.testing.assert_array_equal(grn.forward(x).data, x.data)

    @pytest.mark.parametrize("c,expected", [(8, 3), (32, 3), (64, 3), (256, 5)])
    def test_eca_kernel_size(self, c, expected):
        assert bl.eca_kernel_size(c) == expected

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            bl.make_attention_baseline(np.random.default_rng(0), 4, "nope")


class TestDynamicConv:
    def test_one_hot_scores_select_single_kernel(self):
        rng = np.random.default_rng(4)
        x = ad.Tensor(rng.normal(size=(2, 3, 5, 5)))
        bank = ad.Tensor(rng.normal(size=(4, 3, 3, 3, 3)))
        scores = np.zeros((2, 4))
        scores[0, 1] = 1.0
        scores[1, 3] = 1.0
        out = bl.dynamic_conv(x, bank, ad.Tensor(scores))
        ref0 = ad.conv2d(ad.Tensor(x.data[:1]), ad.Tensor(bank.data[1]), padding=1).data
        ref1 = ad.conv2d(ad.Tensor(x.data[1:]), ad.Tensor(bank.data[3]), padding=1).data
        np.testing.assert_allclose(out.data, np.concatenate([ref0, ref1]), atol=1e-12)

    def test_opposite_kernels_cancel(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(1, 3, 3, 3, 3))
        bank = ad.Tensor(np.concatenate([w, -w]))
        x = ad.Tensor(rng.normal(size=(1, 3, 4, 4)))
        out = bl.dynamic_conv(x, bank, ad.Tensor(np.array([[0.5, 0.5]])))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_linear_in_bank(self):
        rng = np.random.default_rng(6)
        x = ad.Tensor(rng.normal(size=(2, 2, 4, 4)))
        bank = rng.normal(size=(3, 2, 2, 3, 3))
        scores = ad.Tensor(rng.dirichlet(np.ones(3), size=2))
        one = bl.dynamic_conv(x, ad.Tensor(bank), scores).data
        two = bl.dynamic_conv(x, ad.Tensor(2.0 * bank), scores).data
        np.testing.assert_allclose(two, 2.0 * one, atol=1e-10)

    def test_score_shape_mismatch(self):
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.normal(size=(2, 2, 4, 4)))
        bank = ad.Tensor(rng.normal(size=(3, 2, 2, 3, 3)))
        with pytest.raises(ShapeError):
            bl.dynamic_conv(x, bank, ad.Tensor(np.ones((2, 5)) / 5.0))


class TestDCAB:
    def test_scores_uniform_on_zero_input(self):
        rng = np.random.default_rng(8)
        dcab = bl.DCAB(rng, 8, num_kernels=4)
        s = dcab.scores(ad.Tensor(np.zeros((3, 8, 4, 4))))
        np.testing.assert_allclose(s.data, 0.25, atol=1e-15)

    def test_scores_simplex(self):
        rng = np.random.default_rng(9)
        dcab = bl.DCAB(rng, 8, num_kernels=5)
        s = dcab.scores(ad.Tensor(rng.normal(size=(4, 8, 6, 6)))).data
        assert np.all(s > 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_output_shape_preserved(self):
        rng = np.random.default_rng(10)
        dcab = bl.DCAB(rng, 6, num_kernels=3)
        x = ad.Tensor(rng.normal(size=(2, 6, 5, 7)))
        assert dcab.forward(x).data.shape == (2, 6, 5, 7)


class TestConvBlock:
    def test_shape_preserved(self):
        rng = np.random.default_rng(11)
        block = bl.ConvBlock(rng, bl.BlockConfig(channels_in=8, channels_expanded=16))
        x = ad.Tensor(rng.normal(size=(1, 8, 16, 16)))
        assert block.forward(x, train=True).data.shape == (1, 8, 16, 16)

    def test_zero_input_zero_output_at_init(self):
        # all biases and BN shifts start at zero, so the block maps 0 -> 0
        rng = np.random.default_rng(12)
        block = bl.ConvBlock(rng, small_cfg())
        out = block.forward(ad.Tensor(np.zeros((2, 4, 6, 6))), train=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(13)
        block = bl.ConvBlock(rng, small_cfg())
        with pytest.raises(ShapeError):
            block.forward(ad.Tensor(np.zeros((1, 5, 6, 6))))

    @pytest.mark.parametrize("kind", ["DCAB", "SE", "ECA", "GRN"])
    def test_attention_variants_run(self, kind):
        rng = np.random.default_rng(14)
        block = bl.ConvBlock(rng, small_cfg(), attention=kind)
        x = ad.Tensor(rng.normal(size=(2, 4, 6, 6)))
        assert block.forward(x, train=True).data.shape == (2, 4, 6, 6)

    def test_all_parameters_receive_gradient(self):
        rng = np.random.default_rng(15)
        block = bl.ConvBlock(rng, small_cfg())
        x = ad.Tensor(rng.normal(size=(3, 4, 6, 6)))
        mask = rng.normal(size=(3, 4, 6, 6))
        tape = ad.Tape()
        with ad.recording(tape):
            root = ad.tsum(ad.mul(block.forward(x, train=False), ad.Tensor(mask)))
        for p in block.parameters():
            p.zero_grad()
        ad.backward(tape, root)
        for name, p in block.named_parameters():
            assert p.grad is not None and np.any(p.grad != 0.0), f"dead path at {name}"


class TestTransformerBlock:
    def test_shape_preserved(self):
        rng = np.random.default_rng(16)
        tb = bl.TransformerBlock(rng, dim=8)
        q = ad.Tensor(rng.normal(size=(2, 8, 4, 6)))
        kv = ad.Tensor(rng.normal(size=(2, 8, 4, 6)))
        assert tb.forward(q, kv).data.shape == (2, 8, 4, 6)

    def test_multihead_shape(self):
        rng = np.random.default_rng(17)
        tb = bl.TransformerBlock(rng, dim=8, heads=2)
        q = ad.Tensor(rng.normal(size=(1, 8, 3, 5)))
        kv = ad.Tensor(rng.normal(size=(1, 8, 3, 5)))
        assert tb.forward(q, kv).data.shape == (1, 8, 3, 5)

    def test_asymmetric_in_sources(self):
        # queries and key/values play different roles; swapping them changes
        # the output (the residual rides on the key/value stream)
        rng = np.random.default_rng(18)
        tb = bl.TransformerBlock(rng, dim=8)
        a = ad.Tensor(rng.normal(size=(1, 8, 4, 4)))
        b = ad.Tensor(rng.normal(size=(1, 8, 4, 4)))
        fwd = tb.forward(a, b).data
        rev = tb.forward(b, a).data
        assert np.linalg.norm(fwd - rev) > 1e-6

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(19)
        tb = bl.TransformerBlock(rng, dim=8)
        with pytest.raises(ShapeError):
            tb.forward(ad.Tensor(np.zeros((1, 8, 4, 4))), ad.Tensor(np.zeros((1, 8, 4, 5))))


class TestDifferenceExtraction:
    def test_equal_streams_give_equal_outputs(self):
        rng = np.random.default_rng(20)
        de = bl.DifferenceExtraction(rng, 6)
        x = rng.normal(size=(2, 6, 4, 4))
        a_out, b_out = de.forward(ad.Tensor(x), ad.Tensor(x.copy()), train=False)
        np.testing.assert_array_equal(a_out.data, b_out.data)

    def test_channel_width_preserved(self):
        rng = np.random.default_rng(21)
        de = bl.DifferenceExtraction(rng, 5)
        a = ad.Tensor(rng.normal(size=(2, 5, 3, 3)))
        b = ad.Tensor(rng.normal(size=(2, 5, 3, 3)))
        a_out, b_out = de.forward(a, b, train=True)
        assert a_out.data.shape == (2, 5, 3, 3) and b_out.data.shape == (2, 5, 3, 3)


class TestBlockGradients:
    """Finite-difference oracle over whole blocks (eval mode keeps the
    builders deterministic since BN running buffers are untouched)."""

    def test_conv_block(self):
        rng = np.random.default_rng(22)
        block = bl.ConvBlock(rng, small_cfg())
        x = ad.parameter(rng.normal(size=(2, 4, 4, 4)))
        mask = ad.Tensor(rng.normal(size=(2, 4, 4, 4)))
        wrt = [x] + block.parameters()
        err = ad.check_gradients(
            lambda: ad.tsum(ad.mul(block.forward(x, train=False), mask)),
            wrt, samples_per_tensor=3, rng=np.random.default_rng(0))
        assert err < 1e-4

    def test_transformer_block(self):
        rng = np.random.default_rng(23)
        tb = bl.TransformerBlock(rng, dim=6)
        q = ad.parameter(rng.normal(size=(1, 6, 3, 4)))
        kv = ad.parameter(rng.normal(size=(1, 6, 3, 4)))
        mask = ad.Tensor(rng.normal(size=(1, 6, 3, 4)))
        wrt = [q, kv] + tb.parameters()
        err = ad.check_gradients(lambda: ad.tsum(ad.mul(tb.forward(q, kv), mask)),
                                 wrt, samples_per_tensor=3, rng=np.random.default_rng(1))
        assert err < 1e-4

    def test_difference_extraction(self):
        rng = np.random.default_rng(24)
        de = bl.DifferenceExtraction(rng, 4)
        a = ad.parameter(rng.normal(size=(2, 4, 3, 3)))
        b = ad.parameter(rng.normal(size=(2, 4, 3, 3)))
        mask = ad.Tensor(rng.normal(size=(2, 4, 3, 3)))

        def build():
            ao, bo = de.forward(a, b, train=False)
            return ad.tsum(ad.mul(ad.add(ao, bo), mask))

        err = ad.check_gradients(build, [a, b] + de.parameters(),
                                 samples_per_tensor=3, rng=np.random.default_rng(2))
        assert err < 1e-4

    @pytest.mark.parametrize("kind", ["SE", "ECA", "GRN"])
    def test_attention_baselines(self, kind):
        rng = np.random.default_rng(25)
        attn = bl.make_attention_baseline(rng, 8, kind)
        x = ad.parameter(rng.normal(size=(2, 8, 3, 3)))
        mask = ad.Tensor(rng.normal(size=(2, 8, 3, 3)))
        err = ad.check_gradients(lambda: ad.tsum(ad.mul(attn.forward(x), mask)),
                                 [x] + attn.parameters(),
                                 samples_per_tensor=3, rng=np.random.default_rng(3))
        assert err < 1e-4

    def test_dcab(self):
        rng = np.random.default_rng(26)
        dcab = bl.DCAB(rng, 4, num_kernels=3)
        x = ad.parameter(rng.normal(size=(2, 4, 3, 3)))
        mask = ad.Tensor(rng.normal(size=(2, 4, 3, 3)))
        err = ad.check_gradients(lambda: ad.tsum(ad.mul(dcab.forward(x), mask)),
                                 [x] + dcab.parameters(),
                                 samples_per_tensor=3, rng=np.random.default_rng(4))
        assert err < 1e-4
