"""Tests for IDX ingestion, datasets, online gradient descent, and sweeps."""

import logging
import math
import struct

import numpy as np
import pytest

from isospec.meanfield import HardTanh, Linear, activation_apply
from isospec.rmtsim import OrthogonalNet, normalized_input
from isospec.trainlab import (
    Dataset,
    TrainConfig,
    estimate_boundary,
    evaluate,
    idx_dataset,
    load_idx,
    lr_depth_sweep,
    online_gd_step,
    synth_dataset,
    train_run,
)


def _idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    head = struct.pack(">i", magic)
    head += b"".join(struct.pack(">i", d) for d in dims)
    return head + payload


class TestLoadIdx:
    def test_reads_image_tensor(self, tmp_path):
        payload = bytes(range(24))
        path = tmp_path / "img.idx"
        path.write_bytes(_idx_bytes(0x00000803, (2, 3, 4), payload))
        arr = load_idx(path)
        assert arr.shape == (2, 3, 4)
        assert arr.dtype == np.uint8
        assert arr[1, 2, 3] == 23

    def test_reads_label_vector(self, tmp_path):
        path = tmp_path / "lbl.idx"
        path.write_bytes(_idx_bytes(0x00000801, (5,), bytes([0, 1, 2, 1, 0])))
        arr = load_idx(path)
        assert arr.shape == (5,)
        assert list(arr) == [0, 1, 2, 1, 0]

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(_idx_bytes(0x00000999, (2,), bytes(2)))
        with pytest.raises(ValueError, match="bad magic"):
            load_idx(path)

    def test_rejects_truncated_header(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">i", 0x00000803) + struct.pack(">i", 2))
        with pytest.raises(ValueError, match="header needs 16 bytes, file has 8"):
            load_idx(path)

    def test_rejects_payload_size_mismatch(self, tmp_path):
        path = tmp_path / "sizes.idx"
        path.write_bytes(_idx_bytes(0x00000801, (5,), bytes(3)))
        with pytest.raises(ValueError, match="expected 13 bytes"):
            load_idx(path)

    def test_rejects_tiny_file(self, tmp_path):
        path = tmp_path / "tiny.idx"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(ValueError, match="no room for a magic"):
            load_idx(path)


class TestIdxDataset:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(1, 255, size=(6, 2, 2), dtype=np.uint8)
        labels = np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8)
        ipath, lpath = tmp_path / "i.idx", tmp_path / "l.idx"
        ipath.write_bytes(_idx_bytes(0x00000803, images.shape, images.tobytes()))
        lpath.write_bytes(_idx_bytes(0x00000801, (6,), labels.tobytes()))
        data = idx_dataset(ipath, lpath, classes=3, limit=4)
        assert data.size == 4 and data.width == 4
        qhat = (data.inputs**2).sum(axis=1) / 4
        np.testing.assert_allclose(qhat, 1.0, atol=1e-12)

    def test_rejects_count_mismatch(self, tmp_path):
        ipath, lpath = tmp_path / "i.idx", tmp_path / "l.idx"
        ipath.write_bytes(_idx_bytes(0x00000803, (2, 2, 2), bytes(range(1, 9))))
        lpath.write_bytes(_idx_bytes(0x00000801, (3,), bytes(3)))
        with pytest.raises(ValueError, match="2 images vs 3 labels"):
            idx_dataset(ipath, lpath, classes=2)


class TestDataset:
    def test_from_arrays_normalizes(self):
        raw = np.array([[3.0, 4.0, 0.0], [1.0, 1.0, 1.0]])
        data = Dataset.from_arrays(raw, [0, 1], classes=2)
        qhat = (data.inputs**2).sum(axis=1) / 3
        np.testing.assert_allclose(qhat, 1.0, atol=1e-12)

    def test_target_is_basis_vector(self):
        data = Dataset.from_arrays(np.ones((2, 4)), [0, 2], classes=3)
        np.testing.assert_array_equal(data.target(1), [0.0, 0.0, 1.0, 0.0])

    def test_rejects_unnormalized_direct_construction(self):
        with pytest.raises(ValueError, match="not normalized"):
            Dataset(2.0 * np.ones((2, 4)), [0, 1], classes=2)

    def test_rejects_zero_rows(self):
        with pytest.raises(ValueError, match="zero-norm"):
            Dataset.from_arrays(np.array([[1.0, 1.0], [0.0, 0.0]]), [0, 0], classes=1)

    def test_rejects_bad_labels_and_classes(self):
        raw = np.ones((2, 4))
        with pytest.raises(ValueError):
            Dataset.from_arrays(raw, [0, 5], classes=3)
        with pytest.raises(ValueError):
            Dataset.from_arrays(raw, [0, 1], classes=5)


class TestSynthDataset:
    def test_seed_determinism(self):
        da = synth_dataset(16, 20, 4, seed=7)
        db = synth_dataset(16, 20, 4, seed=7)
        np.testing.assert_array_equal(da.inputs, db.inputs)
        np.testing.assert_array_equal(da.labels, db.labels)
        dc = synth_dataset(16, 20, 4, seed=8)
        assert not np.array_equal(da.inputs, dc.inputs)

    def test_labels_balanced(self):
        data = synth_dataset(8, 21, 3, seed=0)
        counts = np.bincount(data.labels, minlength=3)
        assert counts.max() - counts.min() <= 1

    def test_guards(self):
        with pytest.raises(ValueError):
            synth_dataset(4, 10, 5, seed=0)
        with pytest.raises(ValueError):
            synth_dataset(4, 0, 2, seed=0)


def _loss_of(net: OrthogonalNet, x: np.ndarray, y: np.ndarray) -> float:
    cur = x
    for ell in range(net.depth):
        h = net.weights[ell] @ cur
        if ell < net.depth - 1:
            cur = activation_apply(net.activation, h)
    return float((h - y) @ (h - y)) / (2.0 * net.width)


class TestOnlineGdStep:
    def test_zero_eta_leaves_weights(self):
        net = OrthogonalNet.sample(8, 2, Linear(1.0), seed=0)
        before = [w.copy() for w in net.weights]
        x = normalized_input(8, np.random.default_rng(0))
        y = np.zeros(8)
        loss, ok = online_gd_step(net, x, y, 0.0)
        assert ok
        for w0, w1 in zip(before, net.weights):
            np.testing.assert_array_equal(w0, w1)

    def test_reported_loss_matches_definition(self):
        net = OrthogonalNet.sample(8, 3, HardTanh(s=1.0, g=1.0), seed=3)
        x = normalized_input(8, np.random.default_rng(3))
        y = np.zeros(8)
        y[0] = 1.0
        expected = _loss_of(net, x, y)
        loss, ok = online_gd_step(net.copy(), x, y, 0.1)
        assert ok
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_gradient_against_finite_differences(self):
        # seed 3 keeps every preactivation well away from the kink
        net = OrthogonalNet.sample(8, 3, HardTanh(s=1.0, g=1.0), seed=3)
        x = normalized_input(8, np.random.default_rng(3))
        y = np.zeros(8)
        y[0] = 1.0
        stepped = net.copy()
        online_gd_step(stepped, x, y, 1.0)
        grads = [w0 - w1 for w0, w1 in zip(net.weights, stepped.weights)]
        h = 1e-6
        rng = np.random.default_rng(99)
        for ell in range(3):
            for _ in range(4):
                i, j = rng.integers(0, 8, size=2)
                plus, minus = net.copy(), net.copy()
                plus.weights[ell][i, j] += h
                minus.weights[ell][i, j] -= h
                fd = (_loss_of(plus, x, y) - _loss_of(minus, x, y)) / (2 * h)
                assert abs(fd - grads[ell][i, j]) < 1e-5

    def test_nonfinite_loss_reports_failure(self):
        net = OrthogonalNet.sample(8, 2, Linear(1.0), seed=0)
        net.weights[0] *= 1e200
        before = [w.copy() for w in net.weights]
        x = normalized_input(8, np.random.default_rng(0))
        loss, ok = online_gd_step(net, x, np.zeros(8), 0.1)
        assert not ok
        for w0, w1 in zip(before, net.weights):
            np.testing.assert_array_equal(w0, w1)


class TestEvaluate:
    def test_matches_single_step_loss(self):
        data = synth_dataset(8, 1, 2, seed=4)
        net = OrthogonalNet.sample(8, 2, Linear(1.0), seed=4)
        probe = net.copy()
        loss, _ = online_gd_step(probe, data.inputs[0], data.target(0), 0.0)
        mean_loss, acc = evaluate(net, data)
        assert mean_loss == pytest.approx(loss, abs=1e-12)
        assert 0.0 <= acc <= 1.0


class TestTrainRun:
    def test_small_eta_descends(self):
        data = synth_dataset(16, 32, 4, seed=0)
        cfg = TrainConfig(depth=1, width=16, activation=Linear(1.0), eta=1e-2, steps=200, seed=1)
        r = train_run(cfg, data)
        assert not r.diverged
        assert r.losses[-20:].mean() < r.losses[:20].mean()

    def test_moderate_eta_completes(self):
        data = synth_dataset(16, 32, 4, seed=0)
        cfg = TrainConfig(
            depth=4, width=16, activation=HardTanh(s=1.0, g=1.0), eta=0.1, steps=100, seed=2
        )
        r = train_run(cfg, data)
        assert not r.diverged
        assert r.train_loss < 0.5

    def test_extreme_eta_diverges_and_clamps(self):
        data = synth_dataset(16, 32, 4, seed=0)
        cfg = TrainConfig(
            depth=4, width=16, activation=HardTanh(s=1.0, g=1.0), eta=80.0, steps=100, seed=2
        )
        r = train_run(cfg, data)
        assert r.diverged and r.diverged_at is not None
        assert r.train_loss == cfg.loss_clamp
        assert r.train_acc == 0.0
        assert r.losses.max() <= cfg.loss_clamp

    def test_seeded_runs_are_identical(self):
        data = synth_dataset(16, 32, 4, seed=0)
        cfg = TrainConfig(depth=2, width=16, activation=Linear(1.0), eta=0.05, steps=50, seed=5)
        ra, rb = train_run(cfg, data), train_run(cfg, data)
        np.testing.assert_array_equal(ra.losses, rb.losses)

    def test_test_metrics_follow_dataset_presence(self):
        data = synth_dataset(16, 32, 4, seed=0)
        test = synth_dataset(16, 16, 4, seed=9)
        cfg = TrainConfig(depth=1, width=16, activation=Linear(1.0), eta=0.01, steps=20, seed=0)
        with_test = train_run(cfg, data, test)
        assert math.isfinite(with_test.test_loss)
        assert 0.0 <= with_test.test_acc <= 1.0
        without = train_run(cfg, data)
        assert math.isnan(without.test_loss) and math.isnan(without.test_acc)

    def test_rejects_width_mismatch(self):
        data = synth_dataset(8, 8, 2, seed=0)
        cfg = TrainConfig(depth=1, width=16, activation=Linear(1.0), eta=0.01, steps=5)
        with pytest.raises(ValueError):
            train_run(cfg, data)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(depth=1, width=16, activation=Linear(1.0), eta=-0.1, steps=5)
        with pytest.raises(ValueError):
            TrainConfig(depth=0, width=16, activation=Linear(1.0), eta=0.1, steps=5)
        with pytest.raises(ValueError):
            TrainConfig(depth=1, width=16, activation=Linear(1.0), eta=0.1, steps=5, blowup_factor=0.5)


class TestEstimateBoundary:
    def test_geometric_midpoint(self):
        got = estimate_boundary([0.1, 0.2, 0.4], [False, False, True])
        assert got == pytest.approx(math.sqrt(0.2 * 0.4))

    def test_handles_unsorted_input(self):
        got = estimate_boundary([0.4, 0.1, 0.2], [True, False, False])
        assert got == pytest.approx(math.sqrt(0.2 * 0.4))

    def test_no_crossing_returns_none(self):
        assert estimate_boundary([0.1, 0.2], [False, False]) is None
        assert estimate_boundary([0.1, 0.2], [True, True]) is None

    def test_non_monotone_pattern_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="isospec.trainlab"):
            got = estimate_boundary([0.1, 0.2, 0.4], [False, True, False])
        assert got == pytest.approx(math.sqrt(0.4 * 0.2))
        assert "non-monotone" in caplog.text


class TestLrDepthSweep:
    def _base(self):
        return TrainConfig(
            depth=1, width=16, activation=HardTanh(s=1.0, g=1.0), eta=0.1, steps=40, seed=3
        )

    def test_grid_and_boundary(self):
        data = synth_dataset(16, 32, 4, seed=0)
        sw = lr_depth_sweep([1, 2], [1e-3, 80.0], self._base(), data)
        assert len(sw.cells) == 4
        assert sw.boundary[1] == pytest.approx(math.sqrt(1e-3 * 80.0))
        assert sw.boundary[2] == pytest.approx(math.sqrt(1e-3 * 80.0))
        assert not sw.all_diverged()
        seeds = [c.seed for c in sw.cells]
        assert len(set(seeds)) == len(seeds)

    def test_csv_rows(self):
        data = synth_dataset(16, 32, 4, seed=0)
        sw = lr_depth_sweep([1], [1e-3, 80.0], self._base(), data)
        rows = list(sw.to_csv_rows())
        assert rows[0] == "L,eta,train_loss,test_loss,train_acc,test_acc,diverged"
        assert len(rows) == 3
        assert all(row.split(",")[-1] in ("0", "1") for row in rows[1:])

    def test_all_diverged_grid(self):
        data = synth_dataset(16, 32, 4, seed=0)
        sw = lr_depth_sweep([2], [60.0, 90.0], self._base(), data)
        assert sw.all_diverged()
        assert sw.boundary[2] is None

    def test_rejects_empty_grids(self):
        data = synth_dataset(16, 32, 4, seed=0)
        with pytest.raises(ValueError):
            lr_depth_sweep([], [0.1], self._base(), data)
        with pytest.raises(ValueError):
            lr_depth_sweep([1], [], self._base(), data)
