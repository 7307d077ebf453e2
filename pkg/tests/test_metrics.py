import os

import numpy as np
import pytest

from camoguide.metrics import (MetricReport, adaptive_e_measure, evaluate_dataset,
                               evaluate_pairs, mae, s_measure,
                               weighted_f_measure, write_report_tsv)
from camoguide.pnm import write_pgm

import oracles


def block_fixture(size=8):
    """Mixed binary gt: a centered square, away from the image border."""
    gt = np.zeros((size, size), dtype=bool)
    q = size // 4
    gt[q:size - q, q:size - q] = True
    return gt


def random_fixture(rng, size=16):
    gt = np.zeros((size, size), dtype=bool)
    cy, cx = rng.integers(4, size - 4, size=2)
    ry, rx = rng.integers(2, 5, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    gt[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = True
    pred = np.clip(gt * rng.uniform(0.4, 1.0) + 0.25 * rng.random((size, size)), 0, 1)
    return pred, gt


class TestMae:
    def test_perfect(self):
        gt = block_fixture()
        assert mae(gt.astype(float), gt) == 0.0

    def test_complement(self):
        gt = block_fixture()
        assert mae(1.0 - gt.astype(float), gt) == 1.0

    def test_constant_half(self):
        gt = block_fixture()
        assert mae(np.full(gt.shape, 0.5), gt) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            mae(np.zeros((4, 4)), np.zeros((4, 5), dtype=bool))


class TestSMeasure:
    def test_perfect_binary(self):
        gt = block_fixture()
        assert abs(s_measure(gt.astype(float), gt) - 1.0) < 1e-9

    def test_degenerate_all_background(self):
        gt = np.zeros((8, 8), dtype=bool)
        assert s_measure(np.zeros((8, 8)), gt) == 1.0
        assert abs(s_measure(np.full((8, 8), 0.3), gt) - 0.7) < 1e-9

    def test_degenerate_all_foreground(self):
        gt = np.ones((8, 8), dtype=bool)
        assert abs(s_measure(np.full((8, 8), 0.8), gt) - 0.8) < 1e-9

    def test_fixture_matches_oracle(self):
        rng = np.random.default_rng(0)
        gt = block_fixture()
        pred = np.clip(gt * 0.8 + 0.1 * rng.random((8, 8)), 0, 1)
        assert abs(s_measure(pred, gt) - oracles.s_measure_oracle(pred, gt)) < 1e-6

    def test_monotone_decay_toward_complement(self):
        rng = np.random.default_rng(1)
        gt = np.zeros((16, 16), dtype=bool)
        gt[4:12, 5:13] = True
        good = gt.astype(float)
        bad = 1.0 - good
        vals = []
        for t in np.linspace(0.0, 1.0, 5):
            pred = (1 - t) * good + t * bad
            vals.append(s_measure(pred, gt))
            assert abs(vals[-1] - oracles.s_measure_oracle(pred, gt)) < 1e-6
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestAdaptiveE:
    def test_perfect_binary(self):
        gt = block_fixture()
        assert abs(adaptive_e_measure(gt.astype(float), gt) - 1.0) < 1e-9

    def test_complement_on_balanced_fixture(self):
        gt = np.zeros((8, 8), dtype=bool)
        gt[:, :4] = True  # exactly half foreground
        val = adaptive_e_measure(1.0 - gt.astype(float), gt)
        assert abs(val - oracles.adaptive_e_oracle(1.0 - gt.astype(float), gt)) < 1e-9
        assert val <= 0.25

    def test_constant_half_matches_oracle(self):
        gt = block_fixture()
        pred = np.full((8, 8), 0.5)
        assert abs(adaptive_e_measure(pred, gt)
                   - oracles.adaptive_e_oracle(pred, gt)) < 1e-9


class TestWeightedF:
    def test_perfect_binary(self):
        gt = block_fixture()
        assert abs(weighted_f_measure(gt.astype(float), gt) - 1.0) < 1e-7

    def test_zero_prediction(self):
        # foreground at least 3px from every border so the dependency blur
        # window never touches the zero padding
        gt = np.zeros((16, 16), dtype=bool)
        gt[6:10, 6:10] = True
        assert weighted_f_measure(np.zeros(gt.shape), gt) == 0.0

    def test_gt_all_background_conventions(self):
        gt = np.zeros((8, 8), dtype=bool)
        assert weighted_f_measure(np.zeros((8, 8)), gt) == 1.0
        pred = np.zeros((8, 8))
        pred[3, 3] = 0.5
        assert weighted_f_measure(pred, gt) == 0.0

    def test_fixture_matches_oracle(self):
        rng = np.random.default_rng(2)
        gt = block_fixture()
        pred = np.clip(gt * 0.7 + 0.2 * rng.random((8, 8)), 0, 1)
        assert abs(weighted_f_measure(pred, gt)
                   - oracles.weighted_f_oracle(pred, gt)) < 1e-6

    def test_translation_strictly_hurts(self):
        gt = np.zeros((16, 16), dtype=bool)
        gt[5:11, 5:11] = True
        aligned = weighted_f_measure(gt.astype(float), gt)
        shifted = np.roll(gt.astype(float), 2, axis=1)
        assert weighted_f_measure(shifted, gt) < aligned


class TestOracleAgreement:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_16x16_fixtures(self, seed):
        rng = np.random.default_rng(100 + seed)
        pred, gt = random_fixture(rng)
        assert abs(s_measure(pred, gt) - oracles.s_measure_oracle(pred, gt)) < 1e-6
        assert abs(adaptive_e_measure(pred, gt)
                   - oracles.adaptive_e_oracle(pred, gt)) < 1e-6
        assert abs(weighted_f_measure(pred, gt)
                   - oracles.weighted_f_oracle(pred, gt)) < 1e-6
        assert abs(mae(pred, gt) - oracles.mae_oracle(pred, gt)) < 1e-6


class TestEvaluateDataset:
    def test_perfect_prediction_report(self, tmp_path):
        gt = block_fixture()
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        write_pgm(str(pred_dir / "a.pgm"), gt.astype(np.float32))
        write_pgm(str(gt_dir / "a.pgm"), gt.astype(np.float32))
        report, rows = evaluate_dataset(str(pred_dir), str(gt_dir))
        assert report.n == 1
        assert abs(report.s_measure - 1.0) < 1e-6
        assert abs(report.adaptive_e - 1.0) < 1e-6
        assert abs(report.weighted_f - 1.0) < 1e-6
        assert report.mae == 0.0

    def test_two_sample_mean(self):
        gt = block_fixture()
        pairs = [("a", gt.astype(float), gt), ("b", np.full(gt.shape, 0.5), gt)]
        report, rows = evaluate_pairs(pairs)
        assert report.n == 2
        for i, field in enumerate(("s_measure", "adaptive_e", "weighted_f", "mae")):
            mean_rows = (rows[0][i + 1] + rows[1][i + 1]) / 2.0
            assert abs(getattr(report, field) - mean_rows) < 1e-9

    def test_order_invariance(self):
        rng = np.random.default_rng(4)
        pairs = []
        for i in range(5):
            pred, gt = random_fixture(rng)
            pairs.append((f"s{i}", pred, gt))
        r1, rows1 = evaluate_pairs(pairs)
        r2, rows2 = evaluate_pairs(list(reversed(pairs)))
        assert rows1 == rows2
        assert r1 == r2

    def test_missing_pair_errors(self, tmp_path):
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        gt = block_fixture()
        write_pgm(str(pred_dir / "a.pgm"), gt.astype(np.float32))
        write_pgm(str(gt_dir / "a.pgm"), gt.astype(np.float32))
        write_pgm(str(gt_dir / "b.pgm"), gt.astype(np.float32))
        with pytest.raises(ValueError, match="b"):
            evaluate_dataset(str(pred_dir), str(gt_dir))

    def test_tsv_mean_row_matches(self, tmp_path):
        rng = np.random.default_rng(5)
        pairs = [(f"s{i}", *random_fixture(rng)) for i in range(4)]
        report, rows = evaluate_pairs(pairs)
        path = tmp_path / "report.tsv"
        write_report_tsv(str(path), report, rows)
        lines = path.read_text().strip().split("\n")
        assert lines[0].startswith("stem\t")
        body = [l.split("\t") for l in lines[1:-1]]
        mean_line = lines[-1].split("\t")
        assert mean_line[0] == "MEAN"
        for col in range(1, 5):
            col_mean = np.mean([float(b[col]) for b in body])
            assert abs(col_mean - float(mean_line[col])) < 1e-8
