"""Overlap, surface distance, instance matching, and report aggregation."""
import csv
import json
from collections import deque

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from tandemseg.errors import ConfigError, DimensionError
from tandemseg.metrics import (CaseReport, MetricsConfig, aggregate,
                               border_voxels, connected_instances,
                               evaluate_case, match_lesions, overlap_metrics,
                               surface_distances, write_case_csv,
                               write_reports_json, write_summary_csv)
from tandemseg.volume import SegVolume


def seg(labels, spacing=(1.0, 1.0, 1.0)) -> SegVolume:
    return SegVolume(np.asarray(labels, dtype=np.uint8), spacing)


def components_by_flood(mask: np.ndarray) -> list[set]:
    """6-connected components as voxel-index sets (order-free oracle)."""
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    for start in np.ndindex(mask.shape):
        if not mask[start] or seen[start]:
            continue
        comp = set()
        queue = deque([start])
        seen[start] = True
        while queue:
            z, y, x = queue.popleft()
            comp.add((z, y, x))
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (z + dz, y + dy, x + dx)
                if all(0 <= c < s for c, s in zip(n, mask.shape)) \
                        and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        comps.append(comp)
    return comps


def surface_stats_oracle(a: np.ndarray, b: np.ndarray, spacing):
    """All-pairs border-distance statistics (pooled symmetric lists)."""
    def border(m):
        out = np.zeros(m.shape, dtype=bool)
        for idx in np.argwhere(m):
            for axis in range(3):
                for step in (-1, 1):
                    n = idx.copy()
                    n[axis] += step
                    if not (0 <= n[axis] < m.shape[axis]) or not m[tuple(n)]:
                        out[tuple(idx)] = True
        return out

    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(border(a)) * sp
    pb = np.argwhere(border(b)) * sp
    d = cdist(pa, pb)
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return pooled.mean(), pooled.max(), np.sqrt((pooled ** 2).mean())


class TestOverlap:
    def test_perfect(self):
        m = np.zeros((2, 3, 3), dtype=bool)
        m[1, 1, 1] = m[1, 1, 2] = True
        out = overlap_metrics(m, m)
        assert out == {"dice": 1.0, "voe": 0.0, "rvd": 0.0}

    def test_both_empty(self):
        e = np.zeros((2, 2, 2), dtype=bool)
        assert overlap_metrics(e, e) == {"dice": 1.0, "voe": 0.0, "rvd": None}

    def test_empty_ground_truth(self):
        pred = np.zeros((2, 2, 2), dtype=bool)
        pred[0, 0, 0] = True
        out = overlap_metrics(pred, np.zeros_like(pred))
        assert out["dice"] == 0.0 and out["voe"] == 1.0 and out["rvd"] is None

    def test_empty_prediction(self):
        gt = np.zeros((2, 2, 2), dtype=bool)
        gt[0, :, :] = True
        out = overlap_metrics(np.zeros_like(gt), gt)
        assert out["dice"] == 0.0 and out["voe"] == 1.0 and out["rvd"] == -1.0

    def test_half_overlap_hand_values(self):
        a = np.zeros((1, 2, 4), dtype=bool)
        b = np.zeros((1, 2, 4), dtype=bool)
        a[0, :, 0:2] = True   # 4 voxels
        b[0, :, 1:3] = True   # 4 voxels, overlap 2
        out = overlap_metrics(a, b)
        assert out["dice"] == 0.5
        assert out["voe"] == pytest.approx(2.0 / 3.0, rel=1e-12)
        assert out["rvd"] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            overlap_metrics(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))

    def test_matches_set_arithmetic_on_random_masks(self):
        rng = np.random.default_rng(33)
        for _ in range(20):
            a = rng.random((4, 5, 6)) < rng.uniform(0.1, 0.6)
            b = rng.random((4, 5, 6)) < rng.uniform(0.1, 0.6)
            sa = {tuple(v) for v in np.argwhere(a)}
            sb = {tuple(v) for v in np.argwhere(b)}
            out = overlap_metrics(a, b)
            if not sa and not sb:
                continue
            assert out["dice"] == pytest.approx(
                2 * len(sa & sb) / (len(sa) + len(sb)), rel=1e-12)
            assert out["voe"] == pytest.approx(
                1 - len(sa & sb) / len(sa | sb), rel=1e-12)
            if sb:
                assert out["rvd"] == pytest.approx(
                    (len(sa) - len(sb)) / len(sb), rel=1e-12)


class TestSurfaceDistances:
    def test_cube_border_count(self):
        m = np.zeros((5, 5, 5), dtype=bool)
        m[1:4, 1:4, 1:4] = True
        assert border_voxels(m).sum() == 26  # 27-voxel cube minus its center

    def test_edge_of_volume_counts_as_border(self):
        m = np.ones((2, 2, 2), dtype=bool)
        assert border_voxels(m).sum() == 8

    def test_two_single_voxels(self):
        a = np.zeros((3, 3, 6), dtype=bool)
        b = np.zeros((3, 3, 6), dtype=bool)
        a[1, 1, 1] = True
        b[1, 1, 4] = True
        out = surface_distances(a, b, (1.0, 1.0, 1.0))
        assert out == {"assd_mm": 3.0, "msd_mm": 3.0, "rmsd_mm": 3.0}

    def test_identical_masks_are_zero(self):
        m = np.zeros((4, 4, 4), dtype=bool)
        m[1:3, 1:3, 1:3] = True
        out = surface_distances(m, m, (2.0, 0.8, 0.8))
        assert out == {"assd_mm": 0.0, "msd_mm": 0.0, "rmsd_mm": 0.0}

    def test_empty_side_gives_none(self):
        m = np.ones((2, 2, 2), dtype=bool)
        e = np.zeros_like(m)
        for pair in ((m, e), (e, m), (e, e)):
            out = surface_distances(*pair, (1, 1, 1))
            assert out == {"assd_mm": None, "msd_mm": None, "rmsd_mm": None}

    def test_distances_scale_with_spacing(self):
        rng = np.random.default_rng(3)
        a = rng.random((5, 6, 5)) < 0.3
        b = rng.random((5, 6, 5)) < 0.3
        a[2, 2, 2] = b[2, 3, 2] = True  # keep both non-empty
        base = surface_distances(a, b, (1.0, 1.0, 1.0))
        doubled = surface_distances(a, b, (2.0, 2.0, 2.0))
        for key in base:
            assert doubled[key] == pytest.approx(2.0 * base[key], rel=1e-12)

    def test_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(58)
        spacing = (2.0, 1.0, 1.25)
        for trial in range(6):
            a = rng.random((6, 7, 5)) < 0.35
            b = rng.random((6, 7, 5)) < 0.35
            a[0, 0, 0] = b[5, 6, 4] = True
            got = surface_distances(a, b, spacing)
            assd, msd, rmsd = surface_stats_oracle(a, b, spacing)
            assert got["assd_mm"] == pytest.approx(assd, rel=1e-9), f"trial {trial}"
            assert got["msd_mm"] == pytest.approx(msd, rel=1e-9)
            assert got["rmsd_mm"] == pytest.approx(rmsd, rel=1e-9)


class TestConnectedInstances:
    def test_ids_ordered_by_min_corner(self):
        mask = np.zeros((3, 6, 6), dtype=bool)
        mask[2, 0, 0] = True
        mask[0, 3, 3] = True
        mask[1, 1, 1] = True
        instances = connected_instances(mask)
        firsts = [tuple(inst.voxels[0]) for inst in instances]
        assert firsts == [(0, 3, 3), (1, 1, 1), (2, 0, 0)]
        assert [inst.id for inst in instances] == [1, 2, 3]

    def test_volume_in_cubic_mm(self):
        mask = np.zeros((2, 3, 3), dtype=bool)
        mask[0, 0, :2] = True
        inst, = connected_instances(mask, spacing=(2.0, 1.0, 0.5))
        assert inst.size == 2
        assert inst.volume_mm3 == pytest.approx(2 * 2.0 * 1.0 * 0.5)

    def test_matches_flood_fill_sets(self):
        rng = np.random.default_rng(71)
        for _ in range(10):
            mask = rng.random((5, 7, 6)) < 0.3
            instances = connected_instances(mask)
            got = {frozenset((int(z), int(y), int(x)) for z, y, x in inst.voxels)
                   for inst in instances}
            want = {frozenset(c) for c in components_by_flood(mask)}
            assert got == want
            corners = [tuple(inst.voxels.min(axis=0)) for inst in instances]
            assert corners == sorted(corners)

    def test_empty_mask(self):
        assert connected_instances(np.zeros((3, 3, 3), dtype=bool)) == []


def instances_of(mask):
    return connected_instances(np.asarray(mask, dtype=bool))


class TestMatching:
    @pytest.fixture
    def iou_04_pair(self):
        pred = np.zeros((1, 1, 6), dtype=bool)
        gt = np.zeros((1, 1, 6), dtype=bool)
        pred[0, 0, 0:3] = True   # x 0..2
        gt[0, 0, 1:5] = True     # x 1..4 -> intersection 2, union 5
        return instances_of(pred), instances_of(gt)

    @pytest.mark.parametrize("threshold,expect_tp", [
        (0.0, 1), (0.25, 1), (0.39, 1), (0.4, 0), (0.5, 0),
    ])
    def test_iou_04_flips_across_thresholds(self, iou_04_pair, threshold, expect_tp):
        pred, gt = iou_04_pair
        m = match_lesions(pred, gt, threshold)
        assert m.tp == expect_tp
        if expect_tp:
            assert m.pairs[0][2] == pytest.approx(0.4, rel=1e-12)

    def test_two_predictions_one_truth(self):
        pred = np.zeros((1, 5, 8), dtype=bool)
        gt = np.zeros((1, 5, 8), dtype=bool)
        gt[0, 1:4, 1:6] = True    # 15 voxels
        pred[0, 1:4, 1:4] = True  # instance A: 9, IoU 9/15
        pred[0, 1:4, 5:7] = True  # instance B: 6, IoU 3/18
        m = match_lesions(instances_of(pred), instances_of(gt), 0.0)
        assert (m.tp, m.fp, m.fn) == (1, 1, 0)
        assert m.precision == 0.5 and m.recall == 1.0
        pid, gid, iou = m.pairs[0]
        assert iou == pytest.approx(9 / 15, rel=1e-12)
        assert m.unmatched_pred != [] and m.unmatched_gt == []

    def test_empty_versus_empty_conventions(self):
        m = match_lesions([], [], 0.0)
        assert (m.tp, m.fp, m.fn) == (0, 0, 0)
        assert m.precision == 1.0 and m.recall == 1.0

    def test_missed_everything(self):
        gt = np.zeros((1, 2, 2), dtype=bool)
        gt[0, 0, 0] = True
        m = match_lesions([], instances_of(gt), 0.0)
        assert m.recall == 0.0 and m.precision == 1.0 and m.fn == 1

    def test_greedy_prefers_higher_iou(self):
        # one prediction overlapping two truths unequally
        pred = np.zeros((1, 1, 8), dtype=bool)
        gt = np.zeros((1, 1, 8), dtype=bool)
        pred[0, 0, 2:6] = True
        gt[0, 0, 0:3] = True   # overlap 1
        gt[0, 0, 4:8] = True   # overlap 2
        m = match_lesions(instances_of(pred), instances_of(gt), 0.0)
        assert m.tp == 1 and m.fn == 1
        _, gid, iou = m.pairs[0]
        assert iou == pytest.approx(2 / 6, rel=1e-12)
        assert gid == 2  # the later-starting, higher-overlap component

    @pytest.mark.parametrize("bad", [-0.1, 1.0])
    def test_threshold_validation(self, bad):
        with pytest.raises(ConfigError):
            match_lesions([], [], bad)


@pytest.fixture
def perfect_and_missed():
    """Case A: exact prediction. Case B: liver right, lesion missed."""
    gt_labels = np.zeros((2, 6, 6), dtype=np.uint8)
    gt_labels[:, 1:5, 1:5] = 1
    gt_labels[0, 2, 2] = 2
    gt_labels[0, 2, 3] = 2
    pred_b = gt_labels.copy()
    pred_b[pred_b == 2] = 1  # lesion absorbed into liver
    case_a = evaluate_case(seg(gt_labels), seg(gt_labels), case_id="a")
    case_b = evaluate_case(seg(pred_b), seg(gt_labels), case_id="b")
    return case_a, case_b


class TestEvaluateCase:
    def test_perfect_case(self, perfect_and_missed):
        case_a, _ = perfect_and_missed
        assert case_a.liver["dice"] == 1.0
        assert case_a.lesion["dice"] == 1.0
        for d in case_a.detection:
            assert (d.tp, d.fp, d.fn) == (1, 0, 0)
        pair, = case_a.matched_lesions
        assert pair.iou == 1.0 and pair.dice == 1.0 and pair.assd_mm == 0.0

    def test_missed_lesion_case(self, perfect_and_missed):
        _, case_b = perfect_and_missed
        assert case_b.liver["dice"] == 1.0
        assert case_b.lesion["dice"] == 0.0
        assert case_b.lesion["rvd"] == -1.0
        for d in case_b.detection:
            assert (d.tp, d.fp, d.fn) == (0, 0, 1)
            assert d.precision == 1.0 and d.recall == 0.0
        assert case_b.matched_lesions == []

    def test_counts_are_raw_voxels(self, perfect_and_missed):
        case_a, case_b = perfect_and_missed
        assert case_a.counts["lesion_gt"] == 2
        assert case_a.counts["lesion_intersection"] == 2
        assert case_b.counts["lesion_pred"] == 0
        assert case_a.counts["liver_pred"] == case_a.counts["liver_gt"] == 2 * 16

    def test_dimension_checks(self):
        a = seg(np.zeros((2, 4, 4), dtype=np.uint8))
        b = seg(np.zeros((2, 4, 5), dtype=np.uint8))
        with pytest.raises(DimensionError):
            evaluate_case(a, b)
        c = seg(np.zeros((2, 4, 4), dtype=np.uint8), spacing=(2.0, 1.0, 1.0))
        with pytest.raises(DimensionError):
            evaluate_case(a, c)

    def test_config_validation(self, perfect_and_missed):
        with pytest.raises(ConfigError):
            MetricsConfig(connectivity=5).validate()
        with pytest.raises(ConfigError):
            MetricsConfig(detection_thresholds=(0.0, 1.0)).validate()


class TestAggregate:
    def test_pooled_versus_per_case(self, perfect_and_missed):
        summary = aggregate(list(perfect_and_missed))
        assert summary["cases"] == 2
        assert summary["lesion_dice_per_case"] == 0.5
        # pooled: intersections 2+0 over voxel sums (2+2) + (0+2)
        assert summary["lesion_global_dice"] == pytest.approx(2 * 2 / 6, rel=1e-12)
        assert summary["liver_dice_per_case"] == 1.0
        assert summary["liver_global_dice"] == 1.0

    def test_detection_pools_counts(self, perfect_and_missed):
        summary = aggregate(list(perfect_and_missed))
        at0 = summary["detection"][0.0]
        assert (at0["tp"], at0["fp"], at0["fn"]) == (1, 0, 1)
        assert at0["precision"] == 1.0 and at0["recall"] == 0.5

    def test_matched_means(self, perfect_and_missed):
        summary = aggregate(list(perfect_and_missed))
        assert summary["matched_lesion_count"] == 1
        assert summary["matched_lesion_means"]["dice"] == 1.0
        assert summary["matched_lesion_means"]["assd_mm"] == 0.0

    def test_input_order_irrelevant(self, perfect_and_missed):
        case_a, case_b = perfect_and_missed
        assert aggregate([case_a, case_b]) == aggregate([case_b, case_a])

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            aggregate([])

    def test_no_matches_anywhere_gives_none_means(self, perfect_and_missed):
        _, case_b = perfect_and_missed
        summary = aggregate([case_b])
        assert summary["matched_lesion_count"] == 0
        assert all(v is None for v in summary["matched_lesion_means"].values())


class TestReportWriters:
    def test_case_csv_layout(self, tmp_path, perfect_and_missed):
        path = tmp_path / "cases.csv"
        write_case_csv(list(perfect_and_missed), str(path))
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, row_a, row_b = rows
        assert header[:4] == ["Case", "Liver Dice", "Dice per case", "Dice"]
        assert "Precision IoU>0" in header and "Recall IoU>0.5" in header
        assert row_a[0] == "a" and row_b[0] == "b"
        assert row_a[1] == repr(1.0)
        # case b has no matched lesions: per-lesion cells are NA
        assert row_b[3] == "NA" and row_b[8] == "NA"

    def test_summary_csv_layout(self, tmp_path, perfect_and_missed):
        summary = aggregate(list(perfect_and_missed))
        path = tmp_path / "summary.csv"
        write_summary_csv(summary, str(path))
        with open(path, newline="") as fh:
            header, row = list(csv.reader(fh))
        assert header[:6] == ["Dice", "VOE", "RVD", "ASSD", "MSD", "RMSD"]
        by_col = dict(zip(header, row))
        assert by_col["Global Dice"] == repr(2 * 2 / 6)
        assert by_col["Dice per case"] == repr(0.5)
        assert by_col["Recall IoU>0"] == repr(0.5)

    def test_json_round_trips(self, tmp_path, perfect_and_missed):
        summary = aggregate(list(perfect_and_missed))
        path = tmp_path / "report.json"
        write_reports_json(list(perfect_and_missed), summary, str(path))
        payload = json.loads(path.read_text())
        assert [c["case_id"] for c in payload["cases"]] == ["a", "b"]
        assert payload["summary"]["detection"]["0"]["recall"] == 0.5
        assert payload["summary"]["detection"]["0.5"]["tp"] == 1
        assert payload["cases"][1]["lesion"]["rvd"] == -1.0

    def test_writers_are_deterministic(self, tmp_path, perfect_and_missed):
        summary = aggregate(list(perfect_and_missed))
        paths = [tmp_path / f"r{i}.json" for i in range(2)]
        for p in paths:
            write_reports_json(list(perfect_and_missed), summary, str(p))
        assert paths[0].read_bytes() == paths[1].read_bytes()
