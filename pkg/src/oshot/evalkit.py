"""Metrics and experiment harnesses: VOC-style AP/mAP, detection error
analysis, gamma sweeps, and report files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boxgeom
from .boxgeom import Detection
from .errors import ContractViolation

ERROR_TYPES = ("correct", "mislocalized", "background")
CORRECT_IOU = 0.5
MISLOC_IOU = 0.3


@dataclass
class EvalReport:
    per_class_ap: dict[str, float | None]
    map: float
    errors: dict[str, int]
    per_image: list[list[dict]] = field(default_factory=list)
    gamma_curve: list[tuple[int, float]] | None = None

    def to_json(self) -> str:
        doc = {
            "per_class_ap": self.per_class_ap,
            "mAP": self.map,
            "errors": self.errors,
            "per_image": self.per_image,
            "gamma_curve": self.gamma_curve,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def detections_to_dicts(dets: list[Detection]) -> list[dict]:
    return [
        {
            "c": int(d.cls),
            "score": float(d.score),
            "box": [float(v) for v in d.box],
        }
        for d in dets
    ]


def voc_ap(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[tuple[np.ndarray, np.ndarray]],
    iou_thresh: float = 0.5,
    num_classes: int = 5,
) -> tuple[list[float | None], float]:
    """Per-class average precision and mAP.

    Detections are ranked by score across all images (stable under ties)
    and greedily matched to not-yet-matched same-class ground truths at
    IoU >= iou_thresh. AP integrates the precision envelope over recall
    (all-point interpolation). Classes without any ground truth get
    AP = None and are excluded from the mean.
    """
    aps: list[float | None] = []
    for c in range(num_classes):
        entries = []  # (score, image index, box), in discovery order
        n_gt = 0
        for i, (gt_boxes, gt_classes) in enumerate(gts_per_image):
            n_gt += int((np.asarray(gt_classes) == c).sum())
        for i, dets in enumerate(dets_per_image):
            for d in dets:
                if d.cls == c:
                    entries.append((d.score, i, d.box))
        if n_gt == 0:
            aps.append(None)
            continue
        if not entries:
            aps.append(0.0)
            continue
        order = sorted(range(len(entries)), key=lambda k: -entries[k][0])
        matched: dict[int, np.ndarray] = {}
        gt_cache: dict[int, np.ndarray] = {}
        tp = np.zeros(len(order))
        fp = np.zeros(len(order))
        for rank, k in enumerate(order):
            _, img_i, box = entries[k]
            if img_i not in gt_cache:
                gt_boxes, gt_classes = gts_per_image[img_i]
                sel = np.asarray(gt_classes) == c
                gt_cache[img_i] = np.asarray(gt_boxes).reshape(-1, 4)[sel]
                matched[img_i] = np.zeros(int(sel.sum()), dtype=bool)
            gts = gt_cache[img_i]
            taken = matched[img_i]
            best_iou = -1.0
            best_j = -1
            for j in range(len(gts)):
                if taken[j]:
                    continue
                v = boxgeom.iou(box, gts[j])
                if v > best_iou:
                    best_iou = v
                    best_j = j
            if best_j >= 0 and best_iou >= iou_thresh:
                tp[rank] = 1
                taken[best_j] = True
            else:
                fp[rank] = 1
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        recall = ctp / n_gt
        precision = ctp / np.maximum(ctp + cfp, 1e-12)
        # Precision envelope, integrated over recall.
        env = np.maximum.accumulate(precision[::-1])[::-1]
        prev_r = 0.0
        ap = 0.0
        for r, p in zip(recall, env):
            ap += (r - prev_r) * p
            prev_r = r
        aps.append(float(ap))
    valid = [a for a in aps if a is not None]
    m = float(np.mean(valid)) if valid else 0.0
    return aps, m


def error_analysis(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[tuple[np.ndarray, np.ndarray]],
    top_k: int,
) -> dict[str, int]:
    """Classify the top-k most confident detections by their best IoU with
    any same-class ground truth: correct (>= 0.5), mislocalized
    ([0.3, 0.5)), background (< 0.3)."""
    if top_k < 1:
        raise ContractViolation(f"error_analysis: top_k must be >= 1, got {top_k}")
    flat = []
    for i, dets in enumerate(dets_per_image):
        for d in dets:
            flat.append((d.score, i, d))
    flat.sort(key=lambda t: -t[0])
    flat = flat[:top_k]
    counts = {t: 0 for t in ERROR_TYPES}
    for _, img_i, det in flat:
        gt_boxes, gt_classes = gts_per_image[img_i]
        gt_boxes = np.asarray(gt_boxes).reshape(-1, 4)
        sel = np.asarray(gt_classes) == det.cls
        best = 0.0
        for g in gt_boxes[sel]:
            best = max(best, boxgeom.iou(det.box, g))
        if best >= CORRECT_IOU:
            counts["correct"] += 1
        elif best >= MISLOC_IOU:
            counts["mislocalized"] += 1
        else:
            counts["background"] += 1
    counts["total"] = len(flat)
    return counts


def build_report(
    dets_per_image: list[list[Detection]],
    gts_per_image: list[tuple[np.ndarray, np.ndarray]],
    class_names: tuple[str, ...],
    iou_thresh: float = 0.5,
    top_k: int | None = None,
    gamma_curve: list[tuple[int, float]] | None = None,
) -> EvalReport:
    aps, m = voc_ap(dets_per_image, gts_per_image, iou_thresh, len(class_names))
    if top_k is None:
        top_k = max(1, len(dets_per_image))
    errs = error_analysis(dets_per_image, gts_per_image, top_k)
    return EvalReport(
        per_class_ap={class_names[c]: aps[c] for c in range(len(class_names))},
        map=m,
        errors=errs,
        per_image=[detections_to_dicts(d) for d in dets_per_image],
        gamma_curve=gamma_curve,
    )


def emit_report(report: EvalReport, out_dir) -> None:
    """Write report.json plus ap.csv / errors.csv (and gamma.csv when a
    sweep curve is present)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "report.json").write_text(report.to_json())
    lines = ["class,ap"]
    for name, ap in report.per_class_ap.items():
        lines.append(f"{name},{'' if ap is None else format(ap, '.6f')}")
    lines.append(f"mAP,{report.map:.6f}")
    (root / "ap.csv").write_text("\n".join(lines) + "\n")
    lines = ["type,count"]
    for t in ERROR_TYPES:
        lines.append(f"{t},{report.errors.get(t, 0)}")
    (root / "errors.csv").write_text("\n".join(lines) + "\n")
    if report.gamma_curve is not None:
        lines = ["gamma,map"]
        for g, m in report.gamma_curve:
            lines.append(f"{g},{m:.6f}")
        (root / "gamma.csv").write_text("\n".join(lines) + "\n")


def load_report(path) -> EvalReport:
    doc = json.loads(Path(path).read_text())
    curve = doc.get("gamma_curve")
    return EvalReport(
        per_class_ap=doc["per_class_ap"],
        map=doc["mAP"],
        errors=doc["errors"],
        per_image=doc["per_image"],
        gamma_curve=[tuple(x) for x in curve] if curve is not None else None,
    )
