import math

import numpy as np
import pytest

from detmoe import gate as G
from detmoe.decode import AnchorConfig, Level, RawPredictionTensor
from detmoe.errors import ConfigError, TrainingError
from detmoe.evaluation import GroundTruth
from detmoe.gate import GateOutput, init_gate
from detmoe.geometry import Box
from detmoe.synth import SynthSpec, generate
from detmoe.training import (TrainConfig, TrainSample, batch_entropy_loss, batch_objective,
                             detection_loss, domain_ce_loss, importance, importance_loss,
                             kl_uniform_loss, routing_accuracy, samplewise_entropy_loss,
                             total_loss, train_gate)

from gradcheck import check, make_problem


def softplus(x):
    return math.log1p(math.exp(x))


def out(*w):
    return GateOutput("single", np.array(w, dtype=float))


class TestImportance:
    def test_sums(self):
        np.testing.assert_allclose(importance([out(0.5, 0.5)] * 4), [2, 2])
        np.testing.assert_allclose(importance([out(1, 0), out(1, 0)]), [2, 0])
        np.testing.assert_allclose(importance([out(0.75, 0.25), out(0.25, 0.75), out(0.5, 0.5)]),
                                   [1.5, 1.5])

    def test_empty(self):
        with pytest.raises(ValueError):
            importance([])

    def test_spatial_uses_cell_mean(self):
        grid = np.zeros((2, 2, 2))
        grid[..., 0] = [[1, 0], [1, 0]]
        grid[..., 1] = 1 - grid[..., 0]
        np.testing.assert_allclose(importance([GateOutput("spatial", grid)]), [0.5, 0.5])


class TestBalancingLosses:
    @pytest.mark.parametrize("imp,expected", [((2, 2), 0.0), ((1.5, 0.5), 0.25), ((2, 0), 1.0)])
    def test_importance_loss(self, imp, expected):
        assert importance_loss(imp) == pytest.approx(expected, abs=1e-15)

    def test_kl(self):
        assert kl_uniform_loss((1, 1)) == 0.0
        assert kl_uniform_loss((0.75, 0.25)) == pytest.approx(
            0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-15)
        assert kl_uniform_loss((0.75, 0.25)) == pytest.approx(0.13081, abs=1e-5)
        assert kl_uniform_loss((1, 0)) == pytest.approx(math.log(2))

    def test_batch_entropy(self):
        assert batch_entropy_loss((3, 3, 3)) == pytest.approx(0.0, abs=1e-15)
        h = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert h == pytest.approx(0.56234, abs=1e-5)
        assert batch_entropy_loss((0.75, 0.25)) == pytest.approx(math.log(2) - h, abs=1e-15)
        assert batch_entropy_loss((1, 0)) == pytest.approx(math.log(2))

    def test_batch_entropy_equals_kl(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            imp = rng.uniform(0, 5, int(rng.integers(2, 6)))
            assert abs(batch_entropy_loss(imp) - kl_uniform_loss(imp)) <= 1e-12

    def test_sample_entropy(self):
        assert samplewise_entropy_loss([out(0.5, 0.5)] * 3) == 0.0
        assert samplewise_entropy_loss([out(1, 0)]) == pytest.approx(math.log(2), abs=1e-9)
        assert samplewise_entropy_loss([out(0.75, 0.25), out(0.5, 0.5)]) == pytest.approx(0.06541, abs=1e-5)

    def test_domain_ce(self):
        assert domain_ce_loss([out(1 - 1e-12, 1e-12)], [0]) == pytest.approx(0.0, abs=1e-11)
        assert domain_ce_loss([out(0.5, 0.5)], [1]) == pytest.approx(math.log(2))
        assert domain_ce_loss([out(0.75, 0.25)], [1]) == pytest.approx(1.38629, abs=1e-5)

    def test_domain_ce_label_range(self):
        with pytest.raises(ValueError):
            domain_ce_loss([out(0.5, 0.5)], [2])

    @pytest.mark.parametrize("fn", [importance_loss, kl_uniform_loss, batch_entropy_loss])
    def test_zero_importance(self, fn):
        with pytest.raises(ValueError):
            fn((0.0, 0.0))

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            imp = rng.uniform(0, 3, 3)
            outs = [out(*G.softmax(rng.normal(size=3))) for _ in range(4)]
            assert importance_loss(imp) >= 0 and kl_uniform_loss(imp) >= -1e-15
            assert samplewise_entropy_loss(outs) >= 0

    def test_total(self):
        assert total_loss(1.0, 0.5, 0.0) == 1.0
        assert total_loss(1.0, 0.5, 0.1) == pytest.approx(1.05)
        assert TrainConfig().lam == 0.1


class TestDetectionLoss:
    def toy(self):
        return AnchorConfig((Level(8, ((8.0, 8.0),)),), 1, (8, 8))

    def test_background(self):
        cfg = self.toy()
        t = np.zeros((1, 1, 1, 6))
        t[..., 4] = -40.0
        assert detection_loss([RawPredictionTensor("i", "e", [t])], [], cfg) < 1e-15

    def test_perfect(self):
        from detmoe.decode import encode_box
        cfg = AnchorConfig((Level(8, ((8.0, 8.0),)),), 2, (32, 32))
        raw = np.zeros(cfg.level_shape(0))
        raw[..., 4] = -40.0
        raw[..., 5:] = -40.0
        gt = GroundTruth("i", 1, Box(9.0, 10.0, 17.0, 18.0))
        raw[0, 1, 1, :4] = encode_box(gt.box.as_list(), cfg, 0, 0, (1, 1))
        raw[0, 1, 1, 4] = 40.0
        raw[0, 1, 1, 6] = 40.0
        assert detection_loss([RawPredictionTensor("i", "e", [raw])], [gt], cfg) < 1e-9

    def test_hand_computed(self):
        cfg = self.toy()
        t = np.zeros((1, 1, 1, 6))
        t[0, 0, 0, 4], t[0, 0, 0, 5] = 1.0, 2.0
        gt = GroundTruth("i", 0, Box(0, 0, 8, 4))
        # decoded box [0,0,8,8] -> IoU 0.5
        expected = 0.5 + softplus(-1.0) + softplus(-2.0)
        assert detection_loss([RawPredictionTensor("i", "e", [t])], [gt], cfg) == pytest.approx(expected)

    def test_mean_over_experts(self):
        cfg = self.toy()
        a = np.zeros((1, 1, 1, 6))
        b = np.full((1, 1, 1, 6), 1.0)
        la = detection_loss([RawPredictionTensor("i", "a", [a])], [], cfg)
        lb = detection_loss([RawPredictionTensor("i", "b", [b])], [], cfg)
        both = detection_loss([RawPredictionTensor("i", "a", [a]), RawPredictionTensor("i", "b", [b])], [], cfg)
        assert both == pytest.approx((la + lb) / 2)

    def test_bad_ground_truth(self):
        cfg = self.toy()
        raw = [RawPredictionTensor("i", "e", [np.zeros((1, 1, 1, 6))])]
        with pytest.raises(ConfigError):
            detection_loss(raw, [GroundTruth("i", 1, Box(0, 0, 4, 4))], cfg)
        with pytest.raises(ConfigError):
            detection_loss(raw, [GroundTruth("i", 0, Box(0, 0, 9, 4))], cfg)


class TestGradients:
    def test_softmax_ce_identity(self):
        p = init_gate("fc1", ["a", "b"], 2, zero=True)
        s = TrainSample("i", np.ones((2, 1, 1)), domain_label=0)
        g = batch_objective(p, [s], TrainConfig(loss_mode="domain_ce", balancing="none"))["grads"]
        np.testing.assert_allclose(g["head0.out.bias"], [-0.5, 0.5])

    def test_lambda_zero_ignores_balancing(self):
        p, batch, cfg = make_problem(0, "fc2")
        a = batch_objective(p, batch, TrainConfig("domain_ce", "kl", lam=0.0))["grads"]
        b = batch_objective(p, batch, TrainConfig("domain_ce", "none"))["grads"]
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    @pytest.mark.parametrize("mode", ["spatial", "classwise"])
    @pytest.mark.parametrize("arch", G.ARCHITECTURES)
    @pytest.mark.parametrize("loss", ["domain_ce", "detection"])
    def test_modes(self, mode, arch, loss):
        p, batch, cfg = make_problem(11, arch, mode, batch=2, hidden=3, conv=2, in_channels=2)
        for bal in ("importance", "sample_entropy"):
            assert check(p, batch, TrainConfig(loss, bal, lam=0.7), cfg) == []


class TestTrainGate:
    def synth(self, n=30, seed=0):
        cfg, images = generate(SynthSpec(images_per_domain=n, seed=seed))
        samples = [TrainSample(im.image_id, im.features.data.astype(float), im.raws,
                               im.ground_truth, im.domain_label) for im in images]
        return cfg, samples

    def test_lr_zero_keeps_params(self):
        cfg, samples = self.synth(8)
        p = init_gate("conv_fc2", ["day", "night"], 8, hidden=8, conv_channels=4)
        trained, metrics = train_gate(p, samples, TrainConfig(learning_rate=0.0, epochs=2,
                                                              batch_size=4), cfg)
        for k in p.tensors:
            np.testing.assert_array_equal(trained.tensors[k], p.tensors[k])
        assert len(metrics) == 2 and set(metrics[0]) >= {"task_loss", "balancing_loss", "importance"}

    def test_separable_routing(self):
        cfg, samples = self.synth(40)
        p = init_gate("fc1", ["day", "night"], 8, seed=0)
        trained, _ = train_gate(p, samples, TrainConfig("domain_ce", epochs=50, batch_size=16), cfg)
        assert routing_accuracy(trained, samples) >= 0.99

    def test_deterministic(self):
        cfg, samples = self.synth(8)
        p = init_gate("conv2_fc2", ["day", "night"], 8, hidden=8, conv_channels=4, seed=5)
        tc = TrainConfig(epochs=2, batch_size=4, seed=9)
        a, ma = train_gate(p, samples, tc, cfg)
        b, mb = train_gate(p, samples, tc, cfg)
        assert ma == mb
        for k in a.tensors:
            assert a.tensors[k].tobytes() == b.tensors[k].tobytes()

    def test_experts_frozen(self):
        cfg, samples = self.synth(6)
        before = [[lv.tobytes() for lv in r.levels] for s in samples for r in s.raws]
        p = init_gate("fc2", ["day", "night"], 8, hidden=8)
        train_gate(p, samples, TrainConfig(epochs=1, batch_size=4), cfg)
        after = [[lv.tobytes() for lv in r.levels] for s in samples for r in s.raws]
        assert before == after

    def test_regulariser_resists_collapse(self):
        # start already leaning toward the labelled expert, the collapse direction
        cfg, samples = self.synth(10)
        day = [s for s in samples if s.domain_label == 0][:8]
        p = init_gate("fc1", ["day", "night"], 8, zero=True)
        p.tensors["head0.out.bias"][:] = [1.0, 0.0]
        x = np.stack([s.features for s in day])
        peaks = []
        for lam in (0.0, 1.0):
            tc = TrainConfig("domain_ce", "sample_entropy", lam=lam, epochs=1, batch_size=8,
                             learning_rate=0.05)
            trained, _ = train_gate(p, day, tc)
            peaks.append(G.forward(trained, x)[0].max())
        assert peaks[1] < peaks[0]

    def test_nan_aborts(self):
        cfg, samples = self.synth(4)
        samples[0].features = np.full_like(samples[0].features, np.nan)
        p = init_gate("fc1", ["day", "night"], 8)
        with pytest.raises(TrainingError, match="batch 0"):
            train_gate(p, samples[:1], TrainConfig("domain_ce", epochs=1, batch_size=1))

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train_gate(init_gate("fc1", ["a", "b"], 2), [], TrainConfig())

    @pytest.mark.parametrize("kw", [dict(loss_mode="x"), dict(balancing="x"), dict(lam=-1),
                                    dict(momentum=1.0), dict(epochs=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
