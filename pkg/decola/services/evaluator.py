"""
Detection metrics: all-point AP, conditioned mAP (c-mAP@k) and conditioned recall (c-AR)
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from decola.config import settings
from decola.errors import SelectionError
from decola.ml.decoder import DetectionSet
from decola.ml.geometry import box_iou, cxcywh_to_xyxy
from decola.ml.vocabulary import Vocabulary
from decola.schemas import DatasetManifest, EvalReport, HiddenGroundTruth
from decola.utils.diagnostics import diagnostics
from decola.utils.samples import Sample

logger = logging.getLogger(__name__)

LVIS_IOU_RANGE = [round(0.5 + 0.05 * i, 2) for i in range(10)]


class Stage(str, Enum):
    FIRST = "first"
    SECOND = "second"


@dataclass
class ImageGroundTruth:
    boxes: np.ndarray  # normalized XYXY
    classes: List[str]


@dataclass
class APResult:
    per_class: Dict[str, Optional[float]]
    map: float
    iou_thresholds: List[float] = field(default_factory=lambda: [0.5])

    def group_map(self, names: Iterable[str]) -> Optional[float]:
        values = [self.per_class[n] for n in names if self.per_class.get(n) is not None]
        return float(np.mean(values)) if values else None


def _cap(det: DetectionSet, k: Optional[int]) -> DetectionSet:
    if k is None or len(det) <= k:
        return det
    order = np.lexsort((det.query_ids, det.class_ids if len(det.class_ids) else np.zeros(len(det)), -det.scores))
    return det.select(order[:k])


def _match_image(boxes: np.ndarray, gt_boxes: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy matching of score-ordered predictions; each gt matched at most once"""
    tp = np.zeros(boxes.shape[0], dtype=bool)
    if gt_boxes.shape[0] == 0 or boxes.shape[0] == 0:
        return tp
    ious = box_iou(boxes, gt_boxes)
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    for i in range(boxes.shape[0]):
        candidates = np.where(taken, -1.0, ious[i])
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_thr:
            taken[best] = True
            tp[i] = True
    return tp


def all_point_ap(tp: np.ndarray, num_gt: int) -> float:
    """Area under the precision envelope; `tp` must be in descending-score order"""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = np.concatenate([[0.0], tp_cum / num_gt])
    precision = np.concatenate([[1.0], tp_cum / (tp_cum + fp_cum)])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1]) + 1
    return float(np.sum((recall[steps] - recall[steps - 1]) * precision[steps]))


def average_precision(
    preds: Dict[int, DetectionSet],
    gt: Dict[int, ImageGroundTruth],
    iou_thr: float = 0.5,
    k: Optional[int] = None,
    classes: Optional[Sequence[str]] = None,
) -> APResult:
    """
    Per-class AP pooled over images. Each image keeps its top-k detections
    before pooling; classes without ground truth get AP None and are left out of mAP.
    """
    if not 0.0 < iou_thr < 1.0:
        raise ValueError(f"iou_thr must be in (0, 1) (got {iou_thr})")
    if classes is None:
        classes = sorted({c for g in gt.values() for c in g.classes})

    capped = {image_id: _cap(det, k) for image_id, det in preds.items()}
    per_class: Dict[str, Optional[float]] = {}
    for name in classes:
        num_gt = sum(c == name for g in gt.values() for c in g.classes)
        if num_gt == 0:
            per_class[name] = None
            continue
        scores, hits, images, ranks = [], [], [], []
        for image_id in sorted(capped):
            det = capped[image_id].for_class(name)
            image_gt = gt.get(image_id, ImageGroundTruth(np.zeros((0, 4)), []))
            gt_boxes = image_gt.boxes[[i for i, c in enumerate(image_gt.classes) if c == name]]
            order = np.lexsort((det.query_ids, -det.scores))
            tp = _match_image(det.boxes[order], gt_boxes, iou_thr)
            scores.extend(det.scores[order].tolist())
            hits.extend(tp.tolist())
            images.extend([image_id] * len(order))
            ranks.extend(range(len(order)))
        # pooled order: score desc, then image id, then rank inside the image
        pooled = np.lexsort((np.array(ranks), np.array(images), -np.array(scores, dtype=np.float64)))
        per_class[name] = all_point_ap(np.array(hits, dtype=bool)[pooled] if hits else np.zeros(0), num_gt)

    defined = [v for v in per_class.values() if v is not None]
    return APResult(per_class, float(np.mean(defined)) if defined else 0.0, [iou_thr])


def average_precision_range(
    preds: Dict[int, DetectionSet],
    gt: Dict[int, ImageGroundTruth],
    iou_thresholds: Sequence[float],
    k: Optional[int] = None,
    classes: Optional[Sequence[str]] = None,
) -> APResult:
    """AP averaged over several IoU thresholds (0.5:0.95 for LVIS-style numbers)"""
    results = [average_precision(preds, gt, t, k, classes) for t in iou_thresholds]
    per_class: Dict[str, Optional[float]] = {}
    for name in results[0].per_class:
        values = [r.per_class[name] for r in results]
        per_class[name] = None if values[0] is None else float(np.mean(values))
    defined = [v for v in per_class.values() if v is not None]
    return APResult(per_class, float(np.mean(defined)) if defined else 0.0, list(iou_thresholds))


def sample_ground_truth(samples: Sequence[Sample]) -> Dict[int, ImageGroundTruth]:
    return {s.image_id: ImageGroundTruth(s.gt_xyxy(), list(s.gt.classes)) for s in samples}


def _parallel(fn, samples: Sequence[Sample]) -> Dict[int, object]:
    with ThreadPoolExecutor(max_workers=max(1, settings.DECOLA_THREADS)) as pool:
        results = list(pool.map(fn, samples))
    return {s.image_id: r for s, r in sorted(zip(samples, results), key=lambda pair: pair[0].image_id)}


def _conditioning(sample: Sample, vocabulary: Vocabulary, conditioning: str, n: int):
    """(class names, per-class budget) for one image"""
    if conditioning == "gt":
        return sample.classes, n
    if conditioning == "full":
        # full-vocabulary baseline with the same total query count as gt conditioning
        total = n * len(sample.classes)
        return list(vocabulary.classes), max(1, total // len(vocabulary.classes))
    raise SelectionError(f"Unknown conditioning '{conditioning}'")


def conditioned_detections(
    model,
    samples: Sequence[Sample],
    n: int,
    limit_k: int,
    conditioning: str = "gt",
) -> Dict[int, DetectionSet]:
    def run(sample: Sample) -> DetectionSet:
        if not sample.classes:
            return DetectionSet.empty(sample.original_size)
        names, budget = _conditioning(sample, model.vocabulary, conditioning, n)
        return model.detect(sample.image, names, limit_k=limit_k, budget=budget)

    return _parallel(run, samples)


def conditioned_map(
    model,
    samples: Sequence[Sample],
    k: Sequence[int] = (10, 20, 50, 100, 300),
    n: Optional[int] = None,
    iou_thresholds: Sequence[float] = (0.5,),
    conditioning: str = "gt",
    classes: Optional[Sequence[str]] = None,
) -> Dict[int, APResult]:
    """c-mAP at each detection limit k; images without ground truth are skipped"""
    n = model.config.queries_per_class if n is None else n
    samples = [s for s in samples if s.classes]
    if n == 0:
        detections = {s.image_id: DetectionSet.empty(s.original_size) for s in samples}
    else:
        detections = conditioned_detections(model, samples, n, max(k), conditioning)
    gt = sample_ground_truth(samples)
    return {limit: average_precision_range(detections, gt, iou_thresholds, limit, classes) for limit in k}


def open_vocab_map(
    model,
    samples: Sequence[Sample],
    k: int = 100,
    iou_thresholds: Sequence[float] = (0.5,),
    vocabulary: Optional[Sequence[str]] = None,
) -> APResult:
    """Standard AP of unconditioned (Phase 2) inference over `vocabulary`"""
    detections = _parallel(lambda s: model.detect(s.image, None, limit_k=k, vocabulary=vocabulary), samples)
    return average_precision_range(detections, sample_ground_truth(samples), iou_thresholds, k, vocabulary)


def conditioned_recall(
    model,
    samples: Sequence[Sample],
    stage: Stage,
    iou_thr: float = 0.5,
    n: Optional[int] = None,
    conditioning: str = "gt",
) -> float:
    """
    Fraction of gt objects with a same-class candidate at IoU >= iou_thr,
    averaged over images per class and then over classes.
    """
    stage = Stage(stage)
    n = model.config.queries_per_class if n is None else n
    samples = [s for s in samples if s.classes]
    if n == 0 or not samples:
        return 0.0

    def run(sample: Sample) -> Dict[str, float]:
        names, budget = _conditioning(sample, model.vocabulary, conditioning, n)
        forward = model.forward(sample.image, names, budget=budget)
        gt_xyxy = sample.gt_xyxy()
        recalls = {}
        for name in sample.classes:
            queries = forward.queries.per_class[name]
            if stage == Stage.FIRST:
                candidates = queries.proposal_boxes.numpy()
            else:
                block = forward.queries.class_names.index(name)
                rows = slice(block * forward.queries.n, (block + 1) * forward.queries.n)
                candidates = forward.output.final.boxes.numpy()[rows]
            gt_boxes = gt_xyxy[[i for i, c in enumerate(sample.gt.classes) if c == name]]
            ious = box_iou(gt_boxes, cxcywh_to_xyxy(candidates))
            recalls[name] = float(np.mean(ious.max(axis=1) >= iou_thr))
        return recalls

    per_image = _parallel(run, samples)
    by_class: Dict[str, List[float]] = {}
    for recalls in per_image.values():
        for name, value in recalls.items():
            by_class.setdefault(name, []).append(value)
    return float(np.mean([np.mean(v) for _, v in sorted(by_class.items())]))


def pseudo_label_quality(pseudo: DatasetManifest, hidden: HiddenGroundTruth, iou_thr: float = 0.5) -> Dict[str, float]:
    """Fraction of pseudo boxes overlapping a hidden gt box of the same class at IoU >= iou_thr"""
    truth: Dict[tuple, List[List[float]]] = {}
    for ann in hidden.annotations:
        truth.setdefault((ann.image_id, ann.category), []).append(ann.bbox)
    hits: List[bool] = []
    by_resolution: Dict[int, List[bool]] = {}
    for ann in pseudo.annotations:
        boxes = truth.get((ann.image_id, ann.category), [])
        hit = bool(boxes) and float(box_iou(np.array([ann.bbox]), np.array(boxes)).max()) >= iou_thr
        hits.append(hit)
        by_resolution.setdefault(ann.resolution_h or 0, []).append(hit)
    quality = {
        "boxes": float(len(hits)),
        "iou_threshold": iou_thr,
        "fraction_matched": float(np.mean(hits)) if hits else 0.0,
    }
    for resolution, values in sorted(by_resolution.items()):
        quality[f"fraction_matched@{resolution}"] = float(np.mean(values))
    return quality


def build_report(
    mode: str,
    result: APResult,
    vocabulary: Vocabulary,
    budget_n: int,
    detection_limit: int,
    c_map_at_k: Optional[Dict[int, APResult]] = None,
    c_map_at_n: Optional[Dict[int, APResult]] = None,
    c_ar_first: Optional[float] = None,
    c_ar_second: Optional[float] = None,
    pseudo_quality: Optional[Dict[str, float]] = None,
) -> EvalReport:
    c_map_at_k = c_map_at_k or {}
    monotone = None
    if c_map_at_k:
        values = [c_map_at_k[k].map for k in sorted(c_map_at_k)]
        monotone = all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
        if not monotone:
            logger.warning(f"c-mAP is not monotone in k: {values}")
    return EvalReport(
        mode=mode,
        iou_thresholds=result.iou_thresholds,
        budget_n=budget_n,
        detection_limit=detection_limit,
        per_class_ap=dict(sorted(result.per_class.items())),
        map=result.map,
        group_ap={
            "base": result.group_map(vocabulary.base_classes),
            "novel": result.group_map(vocabulary.novel_classes),
        },
        c_map_at_k={str(k): r.map for k, r in sorted(c_map_at_k.items())},
        c_map_at_n={str(n): r.map for n, r in sorted((c_map_at_n or {}).items())},
        c_ar_first=c_ar_first,
        c_ar_second=c_ar_second,
        monotone_in_k=monotone,
        pseudo_label_quality=pseudo_quality,
        diagnostics=diagnostics.snapshot(),
    )
