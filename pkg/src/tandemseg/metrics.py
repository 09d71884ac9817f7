"""Lesion-wise and volume-wise evaluation.

Covers overlap metrics (Dice, VOE, signed RVD), symmetric surface distances
(ASSD/MSD/RMSD over the pooled union of both directed border-distance
lists), greedy one-to-one lesion matching by descending IoU, detection
precision/recall at IoU > 0 and > 0.5, and the two Dice aggregates: global
Dice from voxel counts pooled across cases versus the unweighted mean of
per-case Dice. Metrics that are undefined for empty sets are reported as
None, never as 0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError
from .postprocess import connectivity_structure
from .volume import SegVolume


@dataclass
class LesionInstance:
    id: int
    voxels: np.ndarray  # (K, 3) int voxel indices
    volume_mm3: float

    @property
    def size(self) -> int:
        return len(self.voxels)


def connected_instances(mask: np.ndarray, connectivity: int = 6,
                        spacing=(1.0, 1.0, 1.0)) -> list[LesionInstance]:
    """All connected components, ids ordered by (min z, min y, min x)."""
    mask = np.asarray(mask, dtype=bool)
    labeled, count = ndimage.label(mask, structure=connectivity_structure(connectivity))
    voxel_volume = float(np.prod([float(s) for s in spacing]))
    raw: list[tuple[tuple, np.ndarray]] = []
    for comp in range(1, count + 1):
        voxels = np.argwhere(labeled == comp)
        key = (int(voxels[:, 0].min()), int(voxels[:, 1].min()), int(voxels[:, 2].min()),
               int(voxels[0, 0]), int(voxels[0, 1]), int(voxels[0, 2]))
        raw.append((key, voxels))
    raw.sort(key=lambda item: item[0])
    return [LesionInstance(id=i + 1, voxels=voxels, volume_mm3=len(voxels) * voxel_volume)
            for i, (_, voxels) in enumerate(raw)]


@dataclass
class MatchResult:
    threshold: float
    pairs: list[tuple[int, int, float]]  # (pred_id, gt_id, iou)
    unmatched_pred: list[int]
    unmatched_gt: list[int]
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float


def _safe_ratio(num: int, den: int) -> float:
    """tp/(tp+fp) style ratio with the 0/0 -> 1 convention."""
    return 1.0 if den == 0 else num / den


def match_lesions(pred_instances: Sequence[LesionInstance],
                  gt_instances: Sequence[LesionInstance],
                  iou_threshold: float) -> MatchResult:
    """Greedy one-to-one matching in descending IoU order; IoU must exceed
    the threshold strictly."""
    if not 0.0 <= iou_threshold < 1.0:
        raise ConfigError(f"IoU threshold must lie in [0, 1), got {iou_threshold}")
    pred_sets = {p.id: {tuple(v) for v in p.voxels} for p in pred_instances}
    gt_sets = {g.id: {tuple(v) for v in g.voxels} for g in gt_instances}
    candidates = []
    for pid, pset in pred_sets.items():
        for gid, gset in gt_sets.items():
            inter = len(pset & gset)
            if inter == 0:
                continue
            iou = inter / len(pset | gset)
            if iou > iou_threshold:
                candidates.append((-iou, pid, gid))
    candidates.sort()
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    pairs: list[tuple[int, int, float]] = []
    for neg_iou, pid, gid in candidates:
        if pid in used_pred or gid in used_gt:
            continue
        used_pred.add(pid)
        used_gt.add(gid)
        pairs.append((pid, gid, -neg_iou))
    tp = len(pairs)
    fp = len(pred_sets) - tp
    fn = len(gt_sets) - tp
    return MatchResult(threshold=iou_threshold, pairs=pairs,
                       unmatched_pred=sorted(set(pred_sets) - used_pred),
                       unmatched_gt=sorted(set(gt_sets) - used_gt),
                       tp=tp, fp=fp, fn=fn,
                       precision=_safe_ratio(tp, tp + fp),
                       recall=_safe_ratio(tp, tp + fn))


def overlap_metrics(a: np.ndarray, b: np.ndarray) -> dict:
    """dice/voe/rvd of prediction ``a`` against ground truth ``b``.

    Both empty: dice 1, voe 0. Empty ground truth: rvd is None (undefined).
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    ni = int((a & b).sum())
    if na == 0 and nb == 0:
        return {"dice": 1.0, "voe": 0.0, "rvd": None}
    dice = 2.0 * ni / (na + nb)
    voe = 1.0 - ni / (na + nb - ni)
    rvd = None if nb == 0 else (na - nb) / nb
    return {"dice": dice, "voe": voe, "rvd": rvd}


def border_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> dict:
    """ASSD/MSD/RMSD in mm over the union of both directed distance lists."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return {"assd_mm": None, "msd_mm": None, "rmsd_mm": None}
    spacing = tuple(float(s) for s in spacing)
    border_a = border_voxels(a)
    border_b = border_voxels(b)
    dist_to_b = ndimage.distance_transform_edt(~border_b, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~border_a, sampling=spacing)
    pooled = np.concatenate([dist_to_b[border_a], dist_to_a[border_b]])
    return {"assd_mm": float(pooled.mean()),
            "msd_mm": float(pooled.max()),
            "rmsd_mm": float(np.sqrt((pooled ** 2).mean()))}


@dataclass
class MetricsConfig:
    connectivity: int = 6
    detection_thresholds: tuple[float, ...] = (0.0, 0.5)
    segmentation_match_threshold: float = 0.5

    def validate(self) -> None:
        if self.connectivity not in (6, 26):
            raise ConfigError(f"connectivity must be 6 or 26, got {self.connectivity}")
        for t in self.detection_thresholds + (self.segmentation_match_threshold,):
            if not 0.0 <= t < 1.0:
                raise ConfigError(f"IoU threshold must lie in [0, 1), got {t}")


@dataclass
class LesionPairMetrics:
    pred_id: int
    gt_id: int
    iou: float
    dice: float
    voe: float
    rvd: float | None
    assd_mm: float | None
    msd_mm: float | None
    rmsd_mm: float | None


@dataclass
class DetectionCounts:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float


@dataclass
class CaseReport:
    case_id: str
    liver: dict
    lesion: dict
    detection: list[DetectionCounts]
    matched_lesions: list[LesionPairMetrics]
    # raw voxel counts for cross-case pooling
    counts: dict = field(default_factory=dict)


def _instance_mask(shape, instance: LesionInstance) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(instance.voxels.T)] = True
    return mask


def evaluate_case(pred: SegVolume, gt: SegVolume, config: MetricsConfig | None = None,
                  case_id: str = "case") -> CaseReport:
    """All per-case metrics for one predicted/ground-truth label volume pair."""
    config = config or MetricsConfig()
    config.validate()
    if pred.dims != gt.dims:
        raise DimensionError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")
    if tuple(pred.spacing) != tuple(gt.spacing):
        raise DimensionError(
            f"prediction spacing {pred.spacing} != ground truth spacing {gt.spacing}")

    liver_p, liver_g = pred.liver_mask(), gt.liver_mask()
    lesion_p, lesion_g = pred.lesion_mask(), gt.lesion_mask()
    liver = overlap_metrics(liver_p, liver_g)
    lesion = overlap_metrics(lesion_p, lesion_g)

    pred_instances = connected_instances(lesion_p, config.connectivity, pred.spacing)
    gt_instances = connected_instances(lesion_g, config.connectivity, gt.spacing)
    detection = []
    for threshold in config.detection_thresholds:
        m = match_lesions(pred_instances, gt_instances, threshold)
        detection.append(DetectionCounts(threshold=threshold, tp=m.tp, fp=m.fp, fn=m.fn,
                                         precision=m.precision, recall=m.recall))

    seg_match = match_lesions(pred_instances, gt_instances,
                              config.segmentation_match_threshold)
    pred_by_id = {p.id: p for p in pred_instances}
    gt_by_id = {g.id: g for g in gt_instances}
    matched: list[LesionPairMetrics] = []
    for pid, gid, iou in sorted(seg_match.pairs, key=lambda pair: pair[0]):
        pm = _instance_mask(pred.dims, pred_by_id[pid])
        gm = _instance_mask(gt.dims, gt_by_id[gid])
        ov = overlap_metrics(pm, gm)
        sd = surface_distances(pm, gm, pred.spacing)
        matched.append(LesionPairMetrics(pred_id=pid, gt_id=gid, iou=iou,
                                         dice=ov["dice"], voe=ov["voe"], rvd=ov["rvd"],
                                         assd_mm=sd["assd_mm"], msd_mm=sd["msd_mm"],
                                         rmsd_mm=sd["rmsd_mm"]))

    counts = {
        "liver_intersection": int((liver_p & liver_g).sum()),
        "liver_pred": int(liver_p.sum()),
        "liver_gt": int(liver_g.sum()),
        "lesion_intersection": int((lesion_p & lesion_g).sum()),
        "lesion_pred": int(lesion_p.sum()),
        "lesion_gt": int(lesion_g.sum()),
    }
    return CaseReport(case_id=case_id, liver=liver, lesion=lesion,
                      detection=detection, matched_lesions=matched, counts=counts)


def _pooled_dice(reports: Sequence[CaseReport], prefix: str) -> float:
    inter = sum(r.counts[f"{prefix}_intersection"] for r in reports)
    pred = sum(r.counts[f"{prefix}_pred"] for r in reports)
    gt = sum(r.counts[f"{prefix}_gt"] for r in reports)
    return 1.0 if pred + gt == 0 else 2.0 * inter / (pred + gt)


def _mean_or_none(values: list) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate(reports: Sequence[CaseReport]) -> dict:
    """Cross-case summary: pooled global Dice, mean per-case Dice, pooled
    detection counts, and means of the per-matched-lesion metrics."""
    if not reports:
        raise ConfigError("aggregate requires at least one case report")
    reports = sorted(reports, key=lambda r: r.case_id)
    thresholds = [d.threshold for d in reports[0].detection]
    detection = {}
    for i, threshold in enumerate(thresholds):
        tp = sum(r.detection[i].tp for r in reports)
        fp = sum(r.detection[i].fp for r in reports)
        fn = sum(r.detection[i].fn for r in reports)
        detection[threshold] = {"tp": tp, "fp": fp, "fn": fn,
                                "precision": _safe_ratio(tp, tp + fp),
                                "recall": _safe_ratio(tp, tp + fn)}
    all_pairs = [m for r in reports for m in r.matched_lesions]
    lesion_means = {key: _mean_or_none([getattr(m, key) for m in all_pairs])
                    for key in ("dice", "voe", "rvd", "assd_mm", "msd_mm", "rmsd_mm")}
    return {
        "cases": len(reports),
        "lesion_global_dice": _pooled_dice(reports, "lesion"),
        "lesion_dice_per_case": _mean_or_none([r.lesion["dice"] for r in reports]),
        "liver_global_dice": _pooled_dice(reports, "liver"),
        "liver_dice_per_case": _mean_or_none([r.liver["dice"] for r in reports]),
        "detection": detection,
        "matched_lesion_means": lesion_means,
        "matched_lesion_count": len(all_pairs),
    }


# -- report serialization --------------------------------------------------------

def _cell(value) -> str:
    return "NA" if value is None else repr(float(value))


def write_case_csv(reports: Sequence[CaseReport], path: str) -> None:
    """Per-case rows; segmentation columns are means over matched lesions."""
    header = ["Case", "Liver Dice", "Dice per case", "Dice", "VOE", "RVD",
              "ASSD", "MSD", "RMSD"]
    if reports:
        for d in reports[0].detection:
            tag = f"IoU>{d.threshold:g}"
            header += [f"Precision {tag}", f"Recall {tag}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in sorted(reports, key=lambda r: r.case_id):
            pairs = r.matched_lesions
            row = [r.case_id, _cell(r.liver["dice"]), _cell(r.lesion["dice"])]
            for key in ("dice", "voe", "rvd", "assd_mm", "msd_mm", "rmsd_mm"):
                row.append(_cell(_mean_or_none([getattr(m, key) for m in pairs])))
            for d in r.detection:
                row += [_cell(d.precision), _cell(d.recall)]
            writer.writerow(row)


def write_summary_csv(summary: dict, path: str) -> None:
    means = summary["matched_lesion_means"]
    header = ["Dice", "VOE", "RVD", "ASSD", "MSD", "RMSD",
              "Global Dice", "Dice per case", "Liver Dice per case"]
    row = [_cell(means["dice"]), _cell(means["voe"]), _cell(means["rvd"]),
           _cell(means["assd_mm"]), _cell(means["msd_mm"]), _cell(means["rmsd_mm"]),
           _cell(summary["lesion_global_dice"]), _cell(summary["lesion_dice_per_case"]),
           _cell(summary["liver_dice_per_case"])]
    for threshold, d in sorted(summary["detection"].items()):
        tag = f"IoU>{threshold:g}"
        header += [f"Precision {tag}", f"Recall {tag}"]
        row += [_cell(d["precision"]), _cell(d["recall"])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)


def report_to_jsonable(report: CaseReport) -> dict:
    return {
        "case_id": report.case_id,
        "liver": report.liver,
        "lesion": report.lesion,
        "detection": [vars(d) for d in report.detection],
        "matched_lesions": [vars(m) for m in report.matched_lesions],
        "counts": report.counts,
    }


def write_reports_json(reports: Sequence[CaseReport], summary: dict, path: str) -> None:
    payload = {
        "cases": [report_to_jsonable(r) for r in sorted(reports, key=lambda r: r.case_id)],
        "summary": {**summary,
                    "detection": {f"{k:g}": v for k, v in summary["detection"].items()}},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
