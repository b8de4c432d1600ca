"""AUROC/AUPRO metric tests and dataset-level evaluation tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from g2sf.errors import UndefinedMetricError
from g2sf.evaluation import (
    EvalConfig,
    EvalReport,
    ablation_scores,
    aupro,
    aupro_curve,
    auroc,
    eval_dataset,
    write_ablation_csv,
)
from g2sf.selftest import aupro_bruteforce
from tests.conftest import DESK_K


def pair_counting_auroc(scores, labels):
    """Oracle: fraction of (anomalous, normal) pairs ranked correctly."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestAuroc:
    def test_hand_case(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        assert auroc(scores, labels) == pytest.approx(0.75)
        assert auroc(scores, labels) == pytest.approx(pair_counting_auroc(scores, labels))

    def test_perfect_separation(self):
        assert auroc([1.0, 2.0, 5.0, 6.0], [0, 0, 1, 1]) == 1.0

    def test_label_inversion_antisymmetry(self):
        rng = np.random.default_rng(0)
        scores = rng.random(40)
        labels = rng.integers(0, 2, 40)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) == pytest.approx(1.0 - auroc(scores, 1 - labels))

    def test_ties_contribute_half(self):
        assert auroc([1.0, 1.0, 2.0], [0, 1, 1]) == pytest.approx(0.75)

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_constant_scores_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.5, 0.5, 0.5], [0, 1, 0])

    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 10.0),
           shift=st.floats(-5, 5))
    @settings(max_examples=30, deadline=None)
    def test_monotone_transform_invariance(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        base = auroc(scores, labels)
        assert auroc(np.exp(scale * scores) + shift, labels) == pytest.approx(base)

    def test_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            scores = rng.integers(0, 6, 25).astype(float)  # heavy ties
            labels = rng.integers(0, 2, 25)
            if labels.min() == labels.max() or scores.min() == scores.max():
                continue
            assert auroc(scores, labels) == pytest.approx(
                pair_counting_auroc(scores, labels))


class TestAupro:
    def test_perfect_detector_exactly_one(self):
        gt = np.zeros((8, 8), dtype=bool)
        gt[2:4, 2:5] = True
        gt[6, 6] = True
        for limit in (0.3, 0.01, 1.0):
            assert aupro([gt.astype(float)], [gt], limit) == 1.0

    def test_anticorrelated_worst_case(self):
        gt = np.zeros((8, 8), dtype=bool)
        gt[3:5, 3:5] = True
        scores = 1.0 - gt.astype(float)
        assert aupro([scores], [gt], 0.01) == pytest.approx(0.0, abs=1e-12)
        assert aupro([scores], [gt], 0.3) <= 1e-9

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(3)
        for trial in range(100):
            maps = [rng.random((8, 8)) for _ in range(2)]
            gts = [rng.random((8, 8)) < 0.25 for _ in range(2)]
            if not any(g.any() for g in gts):
                gts[0][0, 0] = True
            for limit in (0.30, 0.01):
                fast = aupro(maps, gts, limit)
                slow = aupro_bruteforce(maps, gts, limit)
                assert abs(fast - slow) <= 1e-9

    def test_area_nondecreasing_in_limit(self):
        rng = np.random.default_rng(5)
        maps = [rng.random((10, 10))]
        gts = [rng.random((10, 10)) < 0.2]
        limits = [0.01, 0.05, 0.2, 0.5, 1.0]
        raw_areas = [aupro(maps, gts, lim) * lim for lim in limits]
        assert all(a <= b + 1e-12 for a, b in zip(raw_areas, raw_areas[1:]))
        assert all(0.0 <= aupro(maps, gts, lim) <= 1.0 for lim in limits)

    def test_no_anomalous_region_undefined(self):
        with pytest.raises(UndefinedMetricError):
            aupro([np.random.rand(4, 4)], [np.zeros((4, 4), dtype=bool)], 0.3)

    def test_binned_fast_path_approximates_exact(self):
        rng = np.random.default_rng(11)
        maps = [rng.random((16, 16)) for _ in range(3)]
        gts = [rng.random((16, 16)) < 0.2 for _ in range(3)]
        exact = aupro(maps, gts, 0.3)
        binned = aupro(maps, gts, 0.3, bins=1000)
        assert abs(exact - binned) < 0.01

    def test_curve_endpoints(self):
        rng = np.random.default_rng(8)
        maps = [rng.random((6, 6))]
        gts = [rng.random((6, 6)) < 0.3]
        if not gts[0].any():
            gts[0][0, 0] = True
        fprs, pros = aupro_curve(maps, gts)
        assert fprs[0] == 0.0 and pros[0] == 0.0
        assert fprs[-1] == 1.0 and pros[-1] == 1.0
        assert np.all(np.diff(fprs) >= 0) and np.all(np.diff(pros) >= 0)


@pytest.fixture(scope="module")
def eval_cfg():
    return EvalConfig(k=DESK_K, smooth_sigma=2.0)


@pytest.fixture(scope="module")
def report(desk_dataset, desk_checkpoint, eval_cfg):
    _, _, test_manifest = desk_dataset
    ckpt, _ = desk_checkpoint
    return eval_dataset(ckpt, test_manifest, eval_cfg)


@pytest.fixture(scope="module")
def tables(desk_dataset, desk_checkpoint):
    _, _, test_manifest = desk_dataset
    ckpt, _ = desk_checkpoint
    return ablation_scores(ckpt, test_manifest, EvalConfig(k=DESK_K, smooth_sigma=2.0))


class TestReportFromMaps:
    def test_gt_oracle_detector_scores_one_everywhere(self):
        from g2sf.evaluation import report_from_maps

        rng = np.random.default_rng(0)
        gts = [rng.random((8, 8)) < 0.2 for _ in range(4)]
        gts[0][:] = False  # one normal sample
        labels = [int(g.any()) for g in gts]
        maps = [g.astype(float) for g in gts]
        rep = report_from_maps([f"s{i}" for i in range(4)], [float(l) for l in labels],
                               labels, maps, gts)
        assert rep.i_auroc == 1.0
        assert rep.p_auroc == 1.0
        assert all(v == 1.0 for v in rep.aupro.values())


class TestEvalDataset:
    def test_metrics_present_and_bounded(self, report):
        assert 0.0 <= report.i_auroc <= 1.0
        assert 0.0 <= report.p_auroc <= 1.0
        assert set(report.aupro) == {0.30, 0.01}
        assert all(0.0 <= v <= 1.0 for v in report.aupro.values())
        assert not report.flags

    def test_report_json_roundtrip(self, report):
        back = EvalReport.from_json(report.to_json())
        assert back.to_json() == report.to_json()
        assert back.aupro == report.aupro

    def test_pure_function_of_inputs(self, desk_dataset, desk_checkpoint, eval_cfg,
                                     report):
        _, _, test_manifest = desk_dataset
        ckpt, _ = desk_checkpoint
        again = eval_dataset(ckpt, test_manifest, eval_cfg)
        assert again.to_json() == report.to_json()

    def test_threads_do_not_change_results(self, desk_dataset, desk_checkpoint,
                                           report):
        _, _, test_manifest = desk_dataset
        ckpt, _ = desk_checkpoint
        threaded = eval_dataset(ckpt, test_manifest,
                                EvalConfig(k=DESK_K, smooth_sigma=2.0, threads=4))
        assert threaded.to_json() == report.to_json()

    def test_missing_gt_flags_pixel_metrics(self, desk_dataset, desk_checkpoint,
                                            eval_cfg, tmp_path):
        import dataclasses

        _, _, test_manifest = desk_dataset
        ckpt, _ = desk_checkpoint
        stripped = dataclasses.replace(
            test_manifest,
            samples=[dataclasses.replace(ref, pixel_gt=None)
                     for ref in test_manifest.samples],
        )
        report = eval_dataset(ckpt, stripped, eval_cfg)
        assert report.i_auroc is not None
        assert report.p_auroc is None and not report.aupro
        assert any(flag.startswith("pixel_metrics_omitted") for flag in report.flags)


class TestAblation:
    def test_all_variants_reported(self, tables):
        variants, aggs = tables
        assert [r["variant"] for r in variants] == ["s_pc", "s_rgb", "w_pc", "w_rgb",
                                                    "fused"]
        assert [r["variant"] for r in aggs] == ["min", "max", "mean", "first"]
        for row in variants + aggs:
            assert 0.0 <= row["i_auroc"] <= 1.0

    def test_csv_layout(self, tables, tmp_path):
        variants, _ = tables
        path = tmp_path / "ablation.csv"
        write_ablation_csv(variants, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "variant,I-AUROC,P-AUROC,AUPRO@30%,AUPRO@1%"
        assert len(lines) == 1 + len(variants)

    def test_unit_scale_identity(self, desk_dataset, desk_banks, desk_checkpoint):
        # With the network forced to w = 1, the fused rank-0 metric must
        # equal the sigma-weighted sum of the unimodal distances.
        from g2sf.lspn import parameters
        from g2sf.scoring import sample_maps
        from g2sf.features import load_sample

        _, _, test_manifest = desk_dataset
        banks, normalizer = desk_banks
        ckpt, _ = desk_checkpoint
        forced = ckpt.model.copy()
        for p in parameters(forced)[:-1]:
            p[...] = 0.0
        forced.log_sigma[...] = np.log(0.5)
        pair = load_sample(test_manifest, test_manifest.samples[1])
        maps = sample_maps(forced, pair, banks, normalizer, DESK_K)
        fused_first = maps["first"].grid
        want = 0.5 * (maps["s_pc"].grid + maps["s_rgb"].grid)
        np.testing.assert_allclose(fused_first, want, rtol=1e-6)
