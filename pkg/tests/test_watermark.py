import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mvmark.errors import ConfigError, WatermarkError
from mvmark.gradcheck import check_gradients
from mvmark.models import (FeatureBank, ModelSpec, TrainConfig, build_module,
                           set_flat_parameters, num_parameters)
from mvmark.trigger import assign_labels, select_trigger_set, split_source
from mvmark.watermark import (WatermarkTrainConfig, _repel_cap, feature_reg_loss,
                              joint_loss, train_watermarked, watermark_loss)


def _probe(num_classes=3, dim=2, seed=0):
    """Tiny float64 linear probe with random parameters (~9 parameters)."""
    spec = ModelSpec("linear", num_classes, dim, (dim,))
    m = build_module(spec, init_seed=seed, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    set_flat_parameters(m, rng.standard_normal(num_parameters(spec)))
    return m


def _probe_batch(rng, n, dim=2, num_classes=3):
    x = torch.from_numpy(rng.standard_normal((n, dim)))
    y = torch.from_numpy(rng.integers(0, num_classes, size=n))
    return x, y


class TestJointLoss:
    def test_equals_sum_of_separately_averaged_terms(self, rng):
        m = _probe()
        cx, cy = _probe_batch(rng, 16)
        tx, ty = _probe_batch(rng, 5)
        with torch.no_grad():
            total = joint_loss(m, cx, cy, tx, ty)
            oracle = F.cross_entropy(m(cx), cy) + F.cross_entropy(m(tx), ty)
        assert abs(float(total) - float(oracle)) < 1e-12

    def test_random_instances_match_manual_formula(self):
        # brute force: -log softmax at the label, averaged per batch, summed
        for seed in range(100):
            rng = np.random.default_rng(seed)
            m = _probe(seed=seed)
            cx, cy = _probe_batch(rng, int(rng.integers(2, 10)))
            tx, ty = _probe_batch(rng, int(rng.integers(1, 6)))
            with torch.no_grad():
                def mean_ce(x, y):
                    z = m(x).numpy()
                    p = np.exp(z - z.max(1, keepdims=True))
                    p /= p.sum(1, keepdims=True)
                    return -np.mean(np.log(p[np.arange(len(y)), y.numpy()]))
                oracle = mean_ce(cx, cy) + mean_ce(tx, ty)
                got = float(joint_loss(m, cx, cy, tx, ty))
            assert abs(got - oracle) < 1e-10

    def test_no_trigger_reduces_to_clean_ce(self, rng):
        m = _probe()
        cx, cy = _probe_batch(rng, 8)
        with torch.no_grad():
            assert float(joint_loss(m, cx, cy)) == pytest.approx(
                float(F.cross_entropy(m(cx), cy)), abs=1e-12)


class TestFeatureRegLoss:
    def _bank(self, rng, K=3, p=2):
        return FeatureBank(means=rng.standard_normal((K, p)),
                           counts=np.ones(K, dtype=np.int64), epoch_of_origin=1)

    def test_matches_norm_oracle(self, rng):
        m = _probe()
        tx, _ = _probe_batch(rng, 6)
        labels = rng.integers(0, 3, size=6)
        bank = self._bank(rng)
        with torch.no_grad():
            got = float(feature_reg_loss(m, tx, labels, bank, "attract"))
            feats = m.features(tx).numpy()
        oracle = np.mean([np.linalg.norm(feats[i] - bank.means[labels[i]])
                          for i in range(6)])
        assert abs(got - oracle) < 1e-12

    def test_cap_clamps_distances(self, rng):
        m = _probe()
        tx, _ = _probe_batch(rng, 6)
        labels = rng.integers(0, 3, size=6)
        bank = self._bank(rng)
        with torch.no_grad():
            capped = float(feature_reg_loss(m, tx, labels, bank, "repel", cap=0.1))
        assert capped <= 0.1 + 1e-12

    def test_unavailable_classes_skipped(self, rng):
        m = _probe()
        tx, _ = _probe_batch(rng, 4)
        bank = FeatureBank(means=np.zeros((3, 2)),
                           counts=np.array([1, 0, 0]), epoch_of_origin=0)
        labels = np.array([0, 1, 2, 0])
        with torch.no_grad():
            got = float(feature_reg_loss(m, tx, labels, bank, "attract"))
            feats = m.features(tx).numpy()
        oracle = np.mean([np.linalg.norm(feats[i]) for i in (0, 3)])
        assert abs(got - oracle) < 1e-12

    def test_nothing_available_returns_zero_with_warning(self, rng, caplog):
        m = _probe()
        tx, _ = _probe_batch(rng, 2)
        bank = FeatureBank(means=np.zeros((3, 2)),
                           counts=np.zeros(3, dtype=np.int64), epoch_of_origin=0)
        with caplog.at_level("WARNING"):
            got = feature_reg_loss(m, tx, np.array([1, 2]), bank, "attract")
        assert float(got) == 0.0
        assert "skipped" in caplog.text

    def test_bad_mode_rejected(self, rng):
        m = _probe()
        tx, _ = _probe_batch(rng, 2)
        with pytest.raises(ConfigError):
            feature_reg_loss(m, tx, np.array([0, 1]), self._bank(rng), "sideways")


class TestRepelCap:
    def test_scale_times_mean_pairwise_distance(self):
        means = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 8.0]])
        bank = FeatureBank(means=means, counts=np.ones(3, dtype=np.int64))
        # pairwise distances: 5, 8, 5 -> mean 6
        assert _repel_cap(bank, 10.0) == pytest.approx(60.0, abs=1e-12)

    def test_single_class_gives_unbounded_cap(self):
        bank = FeatureBank(means=np.zeros((3, 2)),
                           counts=np.array([4, 0, 0]))
        assert _repel_cap(bank, 10.0) == float("inf")


class TestWatermarkLossGradients:
    """Autograd vs central finite differences on float64 probes (<=1e-4 rel)."""

    @pytest.mark.parametrize("mode", ["none", "attract", "repel"])
    def test_total_loss_gradcheck(self, rng, mode):
        m = _probe()
        cx, cy = _probe_batch(rng, 10)
        tx, ty = _probe_batch(rng, 4)
        ty_orig = (ty + 1) % 3
        bank = FeatureBank(means=rng.standard_normal((3, 2)),
                           counts=np.ones(3, dtype=np.int64))

        def loss_fn(module):
            return watermark_loss(module, cx, cy, tx, ty, ty_orig,
                                  None if mode == "none" else bank,
                                  alpha=0.05, reg_mode=mode, repel_cap=5.0)
        assert check_gradients(m, loss_fn) < 1e-4


class TestTrainWatermarked:
    def test_empty_trigger_rejected(self, blobs, blob_spec):
        cfg = WatermarkTrainConfig(base=TrainConfig(epochs=1))
        empty = blobs.subset(np.array([], dtype=np.int64))
        with pytest.raises(WatermarkError):
            train_watermarked(blob_spec, blobs, empty, cfg)

    def test_repel_requires_original_labels(self, blobs, blob_spec):
        cfg = WatermarkTrainConfig(base=TrainConfig(epochs=1), alpha=0.1,
                                   reg_mode="repel")
        trig = blobs.subset([0, 1], relabel=(blobs.ys[[0, 1]] + 1) % 4)
        with pytest.raises(ConfigError):
            train_watermarked(blob_spec, blobs.subset(range(2, len(blobs))),
                              trig, cfg)

    def test_bad_reg_mode_rejected(self):
        with pytest.raises(ConfigError):
            WatermarkTrainConfig(reg_mode="sideways")
        with pytest.raises(ConfigError):
            WatermarkTrainConfig(alpha=-0.1)

    def test_alpha_zero_equals_reg_none(self, blobs, blob_model, blob_spec):
        ids = select_trigger_set(blob_model, blobs, 8)
        ts = assign_labels(blob_model, blobs, ids)
        clean, trig = split_source(blobs, ts)
        base = TrainConfig(epochs=4, batch_size=32, lr_initial=0.1,
                           lr_decay_every=3, seed=2)
        a = train_watermarked(blob_spec, clean, trig,
                              WatermarkTrainConfig(base=base, alpha=0.0,
                                                   reg_mode="attract"))
        b = train_watermarked(blob_spec, clean, trig,
                              WatermarkTrainConfig(base=base, reg_mode="none"))
        assert np.array_equal(a.parameters, b.parameters)

    @pytest.mark.parametrize("mode", ["none", "attract", "repel"])
    def test_embeds_trigger_and_is_deterministic(self, blobs, blob_model,
                                                 blob_spec, mode):
        ids = select_trigger_set(blob_model, blobs, 8)
        ts = assign_labels(blob_model, blobs, ids)
        clean, trig = split_source(blobs, ts)
        cfg = WatermarkTrainConfig(
            base=TrainConfig(epochs=15, batch_size=32, lr_initial=0.1,
                             lr_decay_every=8, seed=2),
            alpha=0.01, reg_mode=mode)
        kwargs = {"original_labels": ts.original_labels}
        src = train_watermarked(blob_spec, clean, trig, cfg, **kwargs)
        again = train_watermarked(blob_spec, clean, trig, cfg, **kwargs)
        assert np.array_equal(src.parameters, again.parameters)
        preds = src.predict(trig.xs)
        assert (preds == trig.ys).mean() >= 0.75

    def test_training_log_reports_bank_lag(self, blobs, blob_model, blob_spec):
        ids = select_trigger_set(blob_model, blobs, 6)
        ts = assign_labels(blob_model, blobs, ids)
        clean, trig = split_source(blobs, ts)
        cfg = WatermarkTrainConfig(
            base=TrainConfig(epochs=3, batch_size=32, lr_initial=0.05,
                             lr_decay_every=2, seed=0),
            alpha=0.01, reg_mode="attract")
        records = []
        train_watermarked(blob_spec, clean, trig, cfg,
                          original_labels=ts.original_labels,
                          log_fn=records.append)
        assert [r["epoch"] for r in records] == [0, 1, 2]
        # epoch 0 runs unregularized; later epochs use the current epoch's bank
        assert records[0]["bank_epoch"] is None
        assert records[1]["bank_epoch"] == 1
        assert records[1]["reg_loss"] > 0.0
