import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdseg.buffer import (
    BufferConfig,
    BufferSelection,
    LossStore,
    half_count,
    init_losses,
    record_losses,
    select,
    top_losses,
)
from hdseg.data import LabeledFeatureSet
from hdseg.errors import ConfigError, ContractError, StateError
from hdseg.hdc import ClassModel, build_encoder, encode_batch

from reference import ref_loss


def store_of(values):
    store = LossStore.empty(len(values))
    store.initialize(np.asarray(values, dtype=np.float64))
    return store


def sort_oracle(losses, m):
    return sorted(sorted(range(len(losses)), key=lambda i: (-losses[i], i))[:m])


class TestConfig:
    @pytest.mark.parametrize("k", [0, -1, 100.5])
    def test_ratio_bounds(self, k):
        with pytest.raises(ConfigError):
            BufferConfig(ratio_percent=k)

    def test_scope(self):
        with pytest.raises(ConfigError):
            BufferConfig(scope="scan")

    @pytest.mark.parametrize(
        "n, k, expected", [(10, 40, 2), (100, 5, 2), (1000, 5, 25), (7, 100, 3), (20, 20, 2), (3, 0.1, 0)]
    )
    def test_half_count(self, n, k, expected):
        assert half_count(n, k) == expected


class TestInitLosses:
    def setup_method(self):
        self.encoder = build_encoder(3, 4, seed=11)
        self.features = np.random.default_rng(2).normal(size=(3, 3))
        self.hvs = encode_batch(self.encoder, self.features)
        self.model = ClassModel.from_accumulators([[2, 0, -2, 2], [-1, 1, 1, -1]])

    def test_matches_pointwise_oracle(self):
        data = LabeledFeatureSet(self.features, np.array([0, 1, 1]), np.array([3]))
        store = LossStore.empty(3)
        init_losses(store, self.model, data, self.encoder)
        acc = self.model.accumulators.tolist()
        expected = [ref_loss(acc, h.tolist(), y) for h, y in zip(self.hvs, [0, 1, 1])]
        assert store.initialized
        np.testing.assert_array_equal(store.losses, expected)
        again = LossStore.empty(3)
        init_losses(again, self.model, data, self.encoder)
        np.testing.assert_array_equal(again.losses, store.losses)

    def test_perfect_model_gives_zeros(self):
        preds = self.model.predict(self.hvs)
        data = LabeledFeatureSet(self.features, preds, np.array([3]))
        store = LossStore.empty(3)
        init_losses(store, self.model, data, self.encoder)
        assert not store.losses.any()

    def test_size_mismatch(self):
        data = LabeledFeatureSet(self.features, np.array([0, 1, 1]), np.array([3]))
        with pytest.raises(ContractError):
            init_losses(LossStore.empty(4), self.model, data, self.encoder)


class TestSelect:
    def test_worked_example(self):
        losses = [0.9, 0.1, 0, 0.5, 0.4, 0, 0, 0.2, 0, 0]
        sel = select(store_of(losses), BufferConfig(40, seed=1), epoch=1)
        assert sel.hard_indices.tolist() == [0, 3]
        assert len(sel.random_indices) == 2
        assert not set(sel.random_indices.tolist()) & {0, 3}

    @pytest.mark.parametrize("n", [10, 11, 1])
    def test_full_ratio_covers_everything(self, n):
        sel = select(store_of(np.random.default_rng(n).random(n)), BufferConfig(100), epoch=0)
        assert sel.indices.tolist() == list(range(n))

    def test_all_zero_losses_take_lowest_indices(self):
        sel = select(store_of(np.zeros(40)), BufferConfig(20), epoch=0)
        assert sel.hard_indices.tolist() == [0, 1, 2, 3]

    def test_uninitialized(self):
        with pytest.raises(StateError):
            select(LossStore.empty(5), BufferConfig(), epoch=0)

    def test_seeded_and_epoch_dependent(self):
        store = store_of(np.random.default_rng(0).random(500))
        cfg = BufferConfig(10, seed=3)
        a, b = select(store, cfg, 2), select(store, cfg, 2)
        assert np.array_equal(a.random_indices, b.random_indices)
        assert not np.array_equal(a.random_indices, select(store, cfg, 3).random_indices)

    def test_candidate_pool(self):
        store = store_of(np.arange(20, dtype=float))
        sel = select(store, BufferConfig(40), epoch=0, candidates=np.arange(5, 15))
        assert sel.hard_indices.tolist() == [13, 14]
        assert set(sel.random_indices.tolist()) <= set(range(5, 13))

    def test_random_half_uniformity(self):
        n, k, draws = 20, 20, 10_000
        store = store_of(np.linspace(1.0, 0.0, n))
        counts = np.zeros(n)
        for epoch in range(draws):
            sel = select(store, BufferConfig(k, seed=17), epoch)
            counts[sel.random_indices] += 1
        hard = [0, 1]
        assert not counts[hard].any()
        rest = np.delete(counts, hard)
        p = 2 / 18
        mean, sigma = draws * p, math.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(rest - mean) <= 3 * sigma), rest

    @settings(max_examples=150, deadline=None)
    @given(
        losses=st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, 1.5]) | st.floats(0, 2), min_size=1, max_size=300),
        k=st.floats(0.5, 100) | st.sampled_from([5, 10, 20, 50, 100]),
        epoch=st.integers(0, 50),
    )
    def test_against_sort_oracle(self, losses, k, epoch):
        sel = select(store_of(losses), BufferConfig(k, seed=9), epoch)
        n = len(losses)
        m = math.floor(Decimal(repr(float(k))) * n / 200)
        assert sel.hard_indices.tolist() == sort_oracle(losses, m)
        assert not set(sel.hard_indices.tolist()) & set(sel.random_indices.tolist())
        expected_random = n - m if k == 100 else m
        assert len(sel.random_indices) == expected_random
        assert len(sel) <= n


class TestTopLosses:
    def test_edge_sizes(self):
        assert top_losses(np.array([1.0, 2.0]), 0).tolist() == []
        assert top_losses(np.array([1.0, 2.0]), 5).tolist() == [0, 1]


class TestRecordLosses:
    def test_empty_update(self):
        store = store_of([0.9, 0.5, 0.1])
        record_losses(store, BufferSelection(np.array([0]), np.array([], dtype=np.int64)), {})
        assert store.losses.tolist() == [0.9, 0.5, 0.1]

    def test_single_overwrite(self):
        store = store_of([0.9, 0.5, 0.1])
        record_losses(store, BufferSelection(np.array([0]), np.array([], dtype=np.int64)), {0: 0.0})
        assert store.losses.tolist() == [0.0, 0.5, 0.1]

    def test_outside_buffer_rejected(self):
        store = store_of([0.9, 0.5, 0.1])
        with pytest.raises(ContractError):
            record_losses(store, BufferSelection(np.array([0]), np.array([2])), {1: 0.3})

    def test_negative_rejected(self):
        store = store_of([0.9, 0.5, 0.1])
        with pytest.raises(ContractError):
            record_losses(store, BufferSelection(np.array([0]), np.array([2])), {0: -0.1})

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32), n=st.integers(1, 2000), k=st.floats(1, 100))
    def test_untouched_persistence(self, seed, n, k):
        rng = np.random.default_rng(seed)
        store = store_of(rng.random(n))
        cfg = BufferConfig(k, seed=seed)
        for epoch in range(5):
            shadow = store.losses.copy()
            sel = select(store, cfg, epoch)
            idx = sel.indices
            record_losses(store, sel, (idx, rng.random(len(idx))))
            outside = np.setdiff1d(np.arange(n), idx)
            assert store.losses[outside].tobytes() == shadow[outside].tobytes()


def test_csv_dump(tmp_path):
    store = store_of([0.5, 0.0])
    store.to_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["point_index,loss", "0,0.5", "1,0.0"]
