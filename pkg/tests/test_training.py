import numpy as np
import pytest

from texservo import autodiff as ad
from texservo import network as nw
from texservo import training as tr
from texservo.errors import ConfigError, NumericError
from texservo.geometry import DiffRanges


def tiny_cfg(**kw):
    base = dict(input_hw=(18, 48), backbone_patch=(6, 8), backbone_dim=12,
                backbone_layers=1, embed_dim=8, expansion=2, attn_ratio=0.5,
                unfold_patch=3, heads=1, num_dyn_kernels=2, deam_layers=1,
                conv_blocks=1, transformer_blocks=1, head_hidden=8,
                variant="DCAB")
    base.update(kw)
    return nw.NetConfig(**base)


def toy_data(n, cfg, seed=0, n_val=4):
    rng = np.random.default_rng(seed)
    h, w = cfg.input_hw
    des = rng.uniform(size=(n + n_val, 1, h, w))
    cur = rng.uniform(size=(n + n_val, 1, h, w))
    labels = rng.uniform(0.2, 0.8, size=(n + n_val, 6))
    return (des[:n], cur[:n], labels[:n], des[n:], cur[n:], labels[n:])


class TestLoss:
    def test_zero_on_perfect(self):
        gt = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        assert tr.loss_e(gt, gt) == 0.0

    def test_three_four_five(self):
        gt = np.full(6, 0.5)
        pred = gt + np.array([0.3, 0.4, 0.0, 0.0, 0.0, 0.0])
        assert tr.loss_e(pred, gt, alpha=1.0, beta=1.0) == pytest.approx(0.5)

    def test_alpha_zero_ignores_translation(self):
        gt = np.full(6, 0.5)
        a = gt + np.array([0.3, 0.0, 0.0, 0.0, 0.1, 0.0])
        b = gt + np.array([0.0, 0.9, 0.0, 0.0, 0.1, 0.0])
        assert tr.loss_e(a, gt, alpha=0.0) == pytest.approx(tr.loss_e(b, gt, alpha=0.0))

    def test_metric_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=6), rng.uniform(size=6)
        assert tr.loss_e(a, b) == pytest.approx(tr.loss_e(b, a))

    def test_tensor_version_matches_scalar(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(size=(5, 6))
        gt = rng.uniform(size=(5, 6))
        batch = tr.loss_e_tensor(ad.Tensor(pred), gt).data.item()
        manual = np.mean([tr.loss_e(pred[i], gt[i]) for i in range(5)])
        assert batch == pytest.approx(manual, abs=1e-12)

    def test_tensor_loss_gradient(self):
        rng = np.random.default_rng(2)
        pred = ad.parameter(rng.uniform(size=(3, 6)))
        gt = rng.uniform(size=(3, 6))
        err = ad.check_gradients(lambda: tr.loss_e_tensor(pred, gt), [pred])
        assert err < 1e-6


class TestSchedule:
    CFG = tr.TrainConfig(epochs=20, warmup_epochs=5, lr_start=1e-6,
                         lr_peak=1e-4, lr_end=1e-5)

    def test_endpoints(self):
        spe = 10
        assert tr.lr_at(0, self.CFG, spe) == pytest.approx(1e-6)
        assert tr.lr_at(5 * spe, self.CFG, spe) == pytest.approx(1e-4)
        assert tr.lr_at(20 * spe - 1, self.CFG, spe) == pytest.approx(1e-5)

    def test_clamp_beyond_horizon(self):
        assert tr.lr_at(10_000, self.CFG, 10) == pytest.approx(1e-5)

    def test_warmup_linear_and_monotone(self):
        spe = 10
        lrs = [tr.lr_at(s, self.CFG, spe) for s in range(5 * spe + 1)]
        diffs = np.diff(lrs)
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-18)

    def test_cosine_monotone_decreasing(self):
        spe = 10
        lrs = [tr.lr_at(s, self.CFG, spe) for s in range(5 * spe, 20 * spe)]
        assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            tr.TrainConfig(lr_start=1e-3, lr_peak=1e-4).validate()
        with pytest.raises(ConfigError):
            tr.TrainConfig(alpha=-1.0).validate()


class TestAdamW:
    def test_zero_grad_zero_decay_unchanged(self):
        p = ad.parameter([1.0, -2.0, 3.0], name="p")
        p.grad = np.zeros(3)
        opt = tr.AdamW([("p", p)], weight_decay=0.0)
        before = p.data.copy()
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_zero_grad_decay_scales(self):
        p = ad.parameter([2.0, -4.0], name="p")
        p.grad = np.zeros(2)
        opt = tr.AdamW([("p", p)], weight_decay=0.5)
        before = p.data.copy()
        opt.step(lr=0.1)
        np.testing.assert_allclose(p.data, before * (1.0 - 0.1 * 0.5), atol=1e-15)

    def test_quadratic_bowl_converges(self):
        rng = np.random.default_rng(3)
        w = ad.parameter(rng.uniform(-1.0, 1.0, size=8), name="w")
        opt = tr.AdamW([("w", w)], weight_decay=0.0)
        for _ in range(500):
            w.grad = 2.0 * w.data
            opt.step(lr=0.01)
        assert np.linalg.norm(w.data) < 1e-3

    def test_nonfinite_gradient_names_param(self):
        p = ad.parameter([1.0], name="layer.w")
        p.grad = np.array([np.nan])
        opt = tr.AdamW([("layer.w", p)])
        before = p.data.copy()
        with pytest.raises(NumericError) as e:
            opt.step(lr=0.1)
        assert "layer.w" in str(e.value)
        np.testing.assert_array_equal(p.data, before)  # step aborted cleanly

    def test_no_decay_set_respected(self):
        p = ad.parameter([2.0], name="bn.gamma")
        p.grad = np.zeros(1)
        opt = tr.AdamW([("bn.gamma", p)], weight_decay=0.5, no_decay={"bn.gamma"})
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, [2.0])


class TestClip:
    def test_short_gradient_untouched(self):
        p = ad.parameter([0.1, 0.2], name="p")
        p.grad = np.array([0.3, 0.4])
        tr.clip_gradients([p], 1.0)
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])

    def test_long_gradient_scaled_to_norm(self):
        p = ad.parameter([0.0, 0.0], name="p")
        p.grad = np.array([3.0, 4.0])
        tr.clip_gradients([p], 1.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)


class TestTrainLoop:
    def test_lr_zero_leaves_params_bit_identical(self):
        cfg = tiny_cfg()
        net = nw.build_network(cfg, seed=0)
        before = net.param_vector()
        tcfg = tr.TrainConfig(epochs=1, batch_size=4, warmup_epochs=0,
                              lr_start=0.0, lr_peak=0.0, lr_end=0.0,
                              weight_decay=0.0, seed=0)
        tr.train(net, toy_data(8, cfg), tcfg)
        np.testing.assert_array_equal(net.param_vector(), before)

    def test_history_length_and_determinism(self):
        cfg = tiny_cfg()
        tcfg = tr.TrainConfig(epochs=3, batch_size=4, warmup_epochs=1, seed=5)

        def run():
            net = nw.build_network(cfg, seed=1)
            history, _ = tr.train(net, toy_data(8, cfg), tcfg)
            return history, net.param_vector()

        h1, p1 = run()
        h2, p2 = run()
        assert len(h1) == 3
        np.testing.assert_array_equal(p1, p2)
        for a, b in zip(h1, h2):
            # wall_seconds is the lone timing field and may differ
            for key in ("epoch", "lr", "train_loss", "val_loss"):
                assert a[key] == b[key]

    def test_resolution_mismatch_rejected(self):
        cfg = tiny_cfg()
        net = nw.build_network(cfg, seed=0)
        rng = np.random.default_rng(0)
        bad = (rng.uniform(size=(4, 1, 12, 48)),) * 2 + (rng.uniform(size=(4, 6)),)
        with pytest.raises(ConfigError):
            tr.train(net, bad + bad, tr.TrainConfig(epochs=1).validate())

    def test_overfit_16_samples(self):
        # training loss on a 16-sample set must fall below 10% of its
        # initial value within 200 epochs of full-batch training
        cfg = tiny_cfg(head_hidden=16)
        net = nw.build_network(cfg, seed=2)
        data = toy_data(16, cfg, seed=7, n_val=2)
        tcfg = tr.TrainConfig(epochs=200, batch_size=16, warmup_epochs=20,
                              lr_start=1e-5, lr_peak=1e-2, lr_end=1e-4,
                              weight_decay=0.0, seed=3)
        history, _ = tr.train(net, data, tcfg)
        ratio = history[-1]["train_loss"] / history[0]["train_loss"]
        assert ratio < 0.1, f"loss ratio {ratio}"


class TestEvaluate:
    def test_perfect_predictor(self):
        rng = np.random.default_rng(4)
        des = rng.uniform(size=(6, 1, 8, 8))
        cur = rng.uniform(size=(6, 1, 8, 8))
        labels = rng.uniform(size=(6, 6))
        table = {i: labels[i] for i in range(6)}
        idx = {"i": 0}

        def oracle(i_des, i_cur):
            out = table[idx["i"]]
            idx["i"] += 1
            return out

        rep = tr.evaluate(oracle, des, cur, labels, DiffRanges())
        assert rep["mean_loss"] == 0.0
        assert rep["trans_rmse_mm"] == 0.0 and rep["rot_rmse_deg"] == 0.0

    def test_constant_half_predictor_rmse_is_label_spread(self):
        rng = np.random.default_rng(5)
        labels = rng.uniform(size=(50, 6))
        ranges = DiffRanges()
        des = cur = np.zeros((50, 1, 4, 4))
        rep = tr.evaluate(lambda a, b: np.full(6, 0.5), des, cur, labels, ranges)
        denorm = np.stack([ranges.denormalize(l) for l in labels])
        expected = float(np.sqrt(np.mean(denorm[:, :3] ** 2)))
        assert rep["trans_rmse_mm"] == pytest.approx(expected, abs=1e-9)

    def test_std_matches_per_sample_losses(self):
        rng = np.random.default_rng(6)
        labels = rng.uniform(size=(10, 6))
        des = cur = np.zeros((10, 1, 4, 4))
        rep = tr.evaluate(lambda a, b: np.full(6, 0.4), des, cur, labels, DiffRanges())
        assert rep["loss_std"] == pytest.approx(np.std(rep["per_sample_loss"]))

    def test_empty_testset_rejected(self):
        with pytest.raises(ConfigError):
            tr.evaluate(lambda a, b: np.zeros(6), np.zeros((0, 1, 4, 4)),
                        np.zeros((0, 1, 4, 4)), np.zeros((0, 6)), DiffRanges())
