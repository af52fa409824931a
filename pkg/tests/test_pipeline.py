import numpy as np
import pytest

from hdseg.buffer import BufferConfig, half_count
from hdseg.data import IGNORE_LABEL, LabeledFeatureSet, default_benchmark_spec, generate_synthetic
from hdseg.errors import ConfigError, ContractError
from hdseg.hdc import ClassModel, build_encoder, encode_batch
from hdseg.pipeline import StageConfig, adapt, evaluate, pretrain

from reference import ref_argmax, ref_confusion, ref_cosines, ref_iou


@pytest.fixture(scope="module")
def small_bench():
    spec = default_benchmark_spec(points_per_scan=300, scans_per_stage=(6, 7, 3), seed=1)
    return generate_synthetic(spec)


def small_cfg(**kw):
    base = dict(hd_dim=512, retrain_epochs=3, batch_size=2, buffer=BufferConfig(10, seed=4))
    base.update(kw)
    return StageConfig(**base)


@pytest.fixture(scope="module")
def pretrained(small_bench):
    return pretrain(small_cfg(), small_bench[0])


class TestPretrain:
    def test_one_point_per_class(self):
        feats = np.random.default_rng(0).normal(size=(3, 4))
        data = LabeledFeatureSet(feats, [0, 1, 2], [3])
        cfg = StageConfig(num_classes=3, feature_dim=4, hd_dim=64, retrain_epochs=0)
        encoder, model = pretrain(cfg, data)
        assert np.array_equal(model.accumulators, encode_batch(encoder, feats))

    def test_held_in_accuracy(self):
        spec = default_benchmark_spec(points_per_scan=1200, scans_per_stage=(5, 1, 1))
        pre, _, _ = generate_synthetic(spec)
        encoder, model = pretrain(StageConfig(hd_dim=2048, retrain_epochs=10), pre)
        acc = (model.predict(encode_batch(encoder, pre.features)) == pre.labels).mean()
        assert acc >= 0.95

    def test_deterministic_checkpoints(self, small_bench):
        pre = small_bench[0]
        a = pretrain(small_cfg(), pre)
        b = pretrain(small_cfg(), pre)
        assert a[0].to_bytes() == b[0].to_bytes()
        assert a[1].to_bytes() == b[1].to_bytes()

    def test_empty(self):
        empty = LabeledFeatureSet(np.zeros((0, 16)), np.zeros(0))
        with pytest.raises(ConfigError):
            pretrain(small_cfg(), empty)

    def test_label_out_of_range(self):
        data = LabeledFeatureSet(np.ones((2, 16)), [0, 6], [2])
        with pytest.raises(ContractError):
            pretrain(small_cfg(), data)

    def test_cache_and_threads_do_not_change_result(self, small_bench):
        pre = small_bench[0]
        plain = pretrain(small_cfg(), pre)[1]
        assert pretrain(small_cfg(cache_hypervectors=True), pre)[1] == plain
        assert pretrain(small_cfg(threads=3), pre)[1] == plain


class TestEvaluate:
    def test_memorized(self):
        feats = np.random.default_rng(3).normal(size=(4, 8))
        data = LabeledFeatureSet(feats, [0, 1, 2, 3], [4])
        encoder, model = pretrain(StageConfig(num_classes=4, feature_dim=8, hd_dim=1024, retrain_epochs=0), data)
        assert evaluate(encoder, model, data).miou == 1.0

    def test_hand_model_against_oracle(self):
        rng = np.random.default_rng(7)
        encoder = build_encoder(3, 16, seed=2)
        model = ClassModel.from_accumulators(rng.integers(-3, 4, size=(2, 16)))
        feats = rng.normal(size=(10, 3))
        labels = rng.integers(0, 2, size=10)
        rec = evaluate(encoder, model, LabeledFeatureSet(feats, labels, [4, 10]))

        acc = model.accumulators.tolist()
        preds = [ref_argmax(ref_cosines(acc, h.tolist())) for h in encode_batch(encoder, feats)]
        per_class, miou = ref_iou(ref_confusion(labels.tolist(), preds, 2))
        assert rec.miou == pytest.approx(miou, abs=1e-12)
        for got, want in zip(rec.per_class_iou, per_class):
            assert np.isnan(got) if want is None else got == pytest.approx(want, abs=1e-12)

    def test_pure_and_model_untouched(self, small_bench):
        pre, _, test = small_bench
        encoder, model = pretrain(small_cfg(), pre)
        before = model.to_bytes()
        a = evaluate(encoder, model, test)
        b = evaluate(encoder, model, test, threads=2)
        assert model.to_bytes() == before
        assert a.miou == b.miou and np.array_equal(a.per_class_iou, b.per_class_iou)
        assert a.points_processed == b.points_processed == len(test)

    def test_empty(self):
        encoder = build_encoder(2, 8)
        model = ClassModel.from_accumulators(np.ones((2, 8), dtype=int))
        with pytest.raises(ConfigError):
            evaluate(encoder, model, LabeledFeatureSet(np.zeros((0, 2)), np.zeros(0)))

    def test_ignored_points_excluded(self, small_bench):
        pre, _, test = small_bench
        encoder, model = pretrain(small_cfg(), pre)
        noisy_labels = test.labels.copy()
        noisy_labels[::5] = IGNORE_LABEL
        noisy = LabeledFeatureSet(test.features, noisy_labels, test.scan_boundaries)
        keep = noisy_labels != IGNORE_LABEL
        clean = LabeledFeatureSet(test.features[keep], test.labels[keep])
        assert evaluate(encoder, model, noisy).miou == evaluate(encoder, model, clean).miou


class TestAdapt:
    def test_zero_epochs(self, small_bench, pretrained):
        report = adapt(small_cfg(retrain_epochs=0), *pretrained, small_bench[1], small_bench[2])
        assert [r.epoch for r in report.epoch_records] == [0]
        assert report.epoch_records[0].points_processed == len(small_bench[1])

    def test_does_not_mutate_input_model(self, small_bench, pretrained):
        before = pretrained[1].to_bytes()
        adapt(small_cfg(), *pretrained, small_bench[1], small_bench[2])
        assert pretrained[1].to_bytes() == before

    def test_points_processed_follow_buffer_size(self, small_bench, pretrained):
        cfg = small_cfg(retrain_epochs=4, buffer=BufferConfig(7, seed=1))
        report = adapt(cfg, *pretrained, small_bench[1], small_bench[2])
        n = len(small_bench[1])
        assert [r.epoch for r in report.epoch_records] == [0, 1, 2, 3, 4]
        assert report.epoch_records[0].points_processed == n
        for rec in report.epoch_records[1:]:
            assert rec.points_processed == 2 * half_count(n, 7)

    def test_batch_scope(self, small_bench, pretrained):
        cfg = small_cfg(buffer=BufferConfig(10, seed=1, scope="batch"))
        stream = small_bench[1]
        report = adapt(cfg, *pretrained, stream, small_bench[2])
        expected = sum(2 * half_count(b - a, 10) for a, b in stream.batch_ranges(cfg.batch_size))
        assert all(r.points_processed == expected for r in report.epoch_records[1:])

    @pytest.mark.parametrize("drop", [0, 1])
    def test_full_ratio_matches_full_data(self, small_bench, pretrained, drop):
        stream = small_bench[1]
        if drop:  # odd point count
            stream = LabeledFeatureSet(stream.features[:-1], stream.labels[:-1], [*stream.scan_boundaries[:-1], len(stream) - 1])
        full = adapt(small_cfg(buffer=None), *pretrained, stream, small_bench[2])
        k100 = adapt(small_cfg(buffer=BufferConfig(100)), *pretrained, stream, small_bench[2])
        assert full.final_model == k100.final_model
        assert [r.miou for r in full.epoch_records] == [r.miou for r in k100.epoch_records]

    def test_reproducible(self, small_bench, pretrained):
        a = adapt(small_cfg(), *pretrained, small_bench[1], small_bench[2])
        b = adapt(small_cfg(cache_hypervectors=True, threads=2), *pretrained, small_bench[1], small_bench[2])
        assert a.final_model == b.final_model
        for x, y in zip(a.epoch_records, b.epoch_records):
            assert (x.epoch, x.miou, x.points_processed) == (y.epoch, y.miou, y.points_processed)
            assert np.array_equal(x.per_class_iou, y.per_class_iou)

    def test_ignored_points_never_train(self, small_bench, pretrained):
        stream = small_bench[1]
        extra = np.full((50, stream.feature_dim), 40.0, dtype=np.float32)
        noisy = LabeledFeatureSet.concatenate(
            [stream, LabeledFeatureSet(extra, np.full(50, IGNORE_LABEL))]
        )
        a = adapt(small_cfg(), *pretrained, stream, small_bench[2])
        b = adapt(small_cfg(), *pretrained, noisy, small_bench[2])
        assert a.final_model == b.final_model

    def test_dimension_mismatch(self, small_bench, pretrained):
        encoder, model = pretrained
        other = build_encoder(16, 256)
        with pytest.raises(ContractError):
            adapt(small_cfg(), other, model, small_bench[1], small_bench[2])

    def test_adaptation_recovers_drift(self, small_bench, pretrained):
        encoder, model = pretrained
        before = evaluate(encoder, model, small_bench[2]).miou
        report = adapt(small_cfg(buffer=None, retrain_epochs=5), encoder, model, small_bench[1], small_bench[2])
        assert report.final_miou > before

    def test_report_csv(self, small_bench, pretrained, tmp_path):
        report = adapt(small_cfg(retrain_epochs=1), *pretrained, small_bench[1], small_bench[2])
        report.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == (
            "epoch,miou,iou_class_0,iou_class_1,iou_class_2,iou_class_3,iou_class_4,iou_class_5,"
            "points_processed,wall_time_s"
        )
        assert len(lines) == 4 and lines[-1].startswith("# throughput_fps=")
        assert report.throughput_fps > 0
