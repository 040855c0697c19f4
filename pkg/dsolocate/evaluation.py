"""
Contour-level detection evaluation: the annotation format, greedy
matching by rasterized IoU, precision/recall and VOC-style mAP (area
under the monotone precision envelope over all recall points).
"""
import math
import numpy as np

from pathlib import Path
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union
from dsolocate import io
from dsolocate.exceptions import DomainError, SchemaError
from dsolocate.geometry import Contour, ContourSet, Polygon, rasterize

DEFAULT_IOU_THRESHOLD = 0.5

LABELS = ("dso", "galaxy", "nebula", "globular_cluster")

@dataclass
class AnnotatedObject:

    label: str
    polygon: Polygon
    confidence: Optional[float] = None
    difficult: bool = False

@dataclass
class Annotation:

    image: str
    width: int
    height: int
    objects: List[AnnotatedObject] = field(default_factory=list)

    def __len__(self):
        return len(self.objects)

    def to_dict(self) -> dict:
        objects = []
        for o in self.objects:
            entry = {
                "label": o.label,
                "polygon": [[round(float(x), 3), round(float(y), 3)] for x, y in o.polygon],
            }
            if o.confidence is not None:
                entry["confidence"] = round(float(o.confidence), 6)
            if o.difficult:
                entry["difficult"] = True
            objects.append(entry)
        return {"image": self.image, "width": int(self.width), "height": int(self.height), "objects": objects}

    def to_contour_set(self) -> ContourSet:
        return ContourSet(
            width=self.width,
            height=self.height,
            image=self.image,
            contours=[
                Contour(polygon=o.polygon, confidence=1.0 if o.confidence is None else o.confidence, label=o.label)
                for o in self.objects
            ],
        )

    @staticmethod
    def from_contour_set(contours: ContourSet, image: str = None) -> "Annotation":
        return Annotation(
            image=image if image is not None else (contours.image or ""),
            width=contours.width,
            height=contours.height,
            objects=[AnnotatedObject(label=c.label, polygon=c.polygon, confidence=c.confidence) for c in contours],
        )

    @staticmethod
    def from_dict(data: dict, label_set: Sequence[str] = LABELS, source: str = "") -> "Annotation":

        """
            Validates and reads the annotation JSON schema
            {"image": str, "width": int, "height": int,
             "objects": [{"label": str, "polygon": [[x, y], ...], "confidence": float?}]}

            Raises SchemaError naming the offending field.
        """

        prefix = f"{source}:" if source else ""

        def _fail(name, msg):
            raise SchemaError(f"{prefix}{name}", msg)

        if not isinstance(data, dict):
            _fail("<root>", "must be an object")
        for key, kind in (("image", str), ("width", int), ("height", int), ("objects", list)):
            if key not in data:
                _fail(key, "is missing")
            if not isinstance(data[key], kind) or isinstance(data[key], bool):
                _fail(key, f"must be of type {kind.__name__}")
        width, height = data["width"], data["height"]
        if width < 1 or height < 1:
            _fail("width", f"image size must be positive, got {width}x{height}")

        objects = []
        for i, obj in enumerate(data["objects"]):
            name = f"objects[{i}]"
            if not isinstance(obj, dict):
                _fail(name, "must be an object")
            label = obj.get("label")
            if not isinstance(label, str):
                _fail(f"{name}.label", "must be a string")
            if label not in label_set:
                _fail(f"{name}.label", f"'{label}' is not in the label set {list(label_set)}")
            polygon = obj.get("polygon")
            if not isinstance(polygon, list) or len(polygon) < 3:
                _fail(f"{name}.polygon", "must be a list of at least 3 [x, y] points")
            for j, point in enumerate(polygon):
                if (not isinstance(point, (list, tuple)) or len(point) != 2
                        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in point)):
                    _fail(f"{name}.polygon[{j}]", "must be a pair of finite numbers")
                x, y = point
                if not (-0.5 - 1e-6 <= x <= width - 0.5 + 1e-6 and -0.5 - 1e-6 <= y <= height - 0.5 + 1e-6):
                    _fail(f"{name}.polygon[{j}]", f"point {point} is outside the {width}x{height} image")
            confidence = obj.get("confidence")
            if confidence is not None and (not isinstance(confidence, (int, float)) or isinstance(confidence, bool) or not math.isfinite(confidence)):
                _fail(f"{name}.confidence", "must be a finite number")
            difficult = obj.get("difficult", False)
            if not isinstance(difficult, bool):
                _fail(f"{name}.difficult", "must be a boolean")
            objects.append(AnnotatedObject(
                label=label,
                polygon=[[float(x), float(y)] for x, y in polygon],
                confidence=None if confidence is None else float(confidence),
                difficult=difficult,
            ))

        return Annotation(image=data["image"], width=width, height=height, objects=objects)

def load_annotation(path, label_set: Sequence[str] = LABELS) -> Annotation:
    return Annotation.from_dict(io.read_json(path), label_set=label_set, source=str(path))

def save_annotation(path, annotation: Union[Annotation, ContourSet]):
    if isinstance(annotation, ContourSet):
        annotation = Annotation.from_contour_set(annotation)
    io.write_json(path, annotation.to_dict())

Detections = Union[ContourSet, Annotation]

def _as_contours(preds: Detections) -> List[Contour]:
    if isinstance(preds, Annotation):
        preds = preds.to_contour_set()
    return list(preds.contours)

def _bbox(polygon: Polygon) -> Tuple[float, float, float, float]:
    pts = np.asarray(polygon, dtype=np.float64)
    return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()

def iou(a: Polygon, b: Polygon) -> float:

    """
        Intersection over union of two polygons, counted in pixels whose
        centers fall inside each polygon. Defined as 0 when the union is empty.

        Args:
            a (Polygon): [[x, y], ...]
            b (Polygon): [[x, y], ...]

        Returns:
            float
    """

    if len(a) < 3 or len(b) < 3:
        return 0.0
    ax0, ay0, ax1, ay1 = _bbox(a)
    bx0, by0, bx1, by1 = _bbox(b)
    x0, y0 = int(math.floor(min(ax0, bx0))) - 1, int(math.floor(min(ay0, by0))) - 1
    x1, y1 = int(math.ceil(max(ax1, bx1))) + 1, int(math.ceil(max(ay1, by1))) + 1
    shape = (y1 - y0 + 1, x1 - x0 + 1)

    mask_a = rasterize(a, shape, offset=(x0, y0))
    mask_b = rasterize(b, shape, offset=(x0, y0))
    union = np.count_nonzero(mask_a | mask_b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(mask_a & mask_b) / union)

def _boxes_overlap(a: Polygon, b: Polygon) -> bool:
    ax0, ay0, ax1, ay1 = _bbox(a)
    bx0, by0, bx1, by1 = _bbox(b)
    return ax0 <= bx1 + 1 and bx0 <= ax1 + 1 and ay0 <= by1 + 1 and by0 <= ay1 + 1

@dataclass(frozen=True)
class Match:

    prediction: int
    truth: int
    iou: float

@dataclass
class DetectionMatches:
    """
    Outcome of matching the predictions of one image against its truth.
    Indices refer to positions in the prediction and truth lists.
    """

    matches: List[Match]
    false_positives: List[int]
    false_negatives: List[int]
    confidences: List[float] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)

def match_detections(preds: Detections, truth: Annotation, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> DetectionMatches:

    """
        Greedy matching: predictions in descending confidence (ties keep
        their input order) each take the unmatched truth object of the same
        label with the highest IoU >= iou_threshold (ties go to the lower
        truth index). Unmatched predictions are false positives, unmatched
        truths false negatives.

        Args:
            preds (ContourSet | Annotation): Predictions with confidences
            truth (Annotation): Ground truth
            iou_threshold (float): In (0, 1]

        Returns:
            DetectionMatches
    """

    if not 0.0 < iou_threshold <= 1.0:
        raise DomainError(f"iou_threshold must be in (0, 1], got {iou_threshold}")

    contours = _as_contours(preds)
    order = sorted(range(len(contours)), key=lambda i: -contours[i].confidence)
    taken = [False] * len(truth.objects)

    matches, false_positives = [], []
    for i in order:
        best, best_iou = None, -1.0
        for j, obj in enumerate(truth.objects):
            if taken[j] or obj.label != contours[i].label or not _boxes_overlap(contours[i].polygon, obj.polygon):
                continue
            value = iou(contours[i].polygon, obj.polygon)
            if value >= iou_threshold and value > best_iou:
                best, best_iou = j, value
        if best is None:
            false_positives.append(i)
        else:
            taken[best] = True
            matches.append(Match(prediction=i, truth=best, iou=best_iou))

    return DetectionMatches(
        matches=matches,
        false_positives=false_positives,
        false_negatives=[j for j, t in enumerate(taken) if not t],
        confidences=[c.confidence for c in contours],
    )

def compute_pr(matches: Union[DetectionMatches, Sequence[DetectionMatches]]) -> Tuple[float, float]:

    """
        Precision TP / (TP + FP) and recall TP / (TP + FN) over one or many
        images. Both are 0 when their denominator is 0.
    """

    if isinstance(matches, DetectionMatches):
        matches = [matches]
    tp = sum(m.tp for m in matches)
    fp = sum(m.fp for m in matches)
    fn = sum(m.fn for m in matches)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall

def average_precision(ranked_hits: Sequence[bool], n_truths: int) -> float:

    """
        Area under the monotone precision envelope of a confidence-ranked
        list of hits (True = true positive) against n_truths objects.
    """

    if n_truths == 0:
        return 0.0
    hits = np.asarray(ranked_hits, dtype=bool)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / float(n_truths)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))

def _restrict(preds: Detections, truth: Annotation, label: str):
    contours = [c for c in _as_contours(preds) if c.label == label]
    objects = [o for o in truth.objects if o.label == label]
    return (
        ContourSet(width=truth.width, height=truth.height, contours=contours),
        Annotation(image=truth.image, width=truth.width, height=truth.height, objects=objects),
    )

def _check_ids(preds_per_image: Mapping[str, Detections], truths_per_image: Mapping[str, Annotation]):
    unknown = sorted(set(preds_per_image) - set(truths_per_image))
    if unknown:
        raise DomainError(f"predictions for images without ground truth: {unknown}")

def per_class_ap(preds_per_image: Mapping[str, Detections], truths_per_image: Mapping[str, Annotation],
                 iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> Dict[str, float]:

    """
        Average precision of every class present in the ground truth.
        Predictions of every image are ranked together by confidence
        (ties in image order, then prediction order).
    """

    _check_ids(preds_per_image, truths_per_image)
    labels = sorted({o.label for t in truths_per_image.values() for o in t.objects})
    empty = ContourSet(width=1, height=1)

    result = {}
    for label in labels:
        ranked, n_truths = [], 0
        for rank, image_id in enumerate(sorted(truths_per_image)):
            preds, truth = _restrict(preds_per_image.get(image_id, empty), truths_per_image[image_id], label)
            n_truths += len(truth.objects)
            matched = match_detections(preds, truth, iou_threshold)
            hit = set(m.prediction for m in matched.matches)
            for i, c in enumerate(preds.contours):
                ranked.append((-c.confidence, rank, i, i in hit))
        ranked.sort(key=lambda r: r[:3])
        result[label] = average_precision([r[3] for r in ranked], n_truths)
    return result

def compute_map(preds_per_image: Mapping[str, Detections], truths_per_image: Mapping[str, Annotation],
                iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> float:
    """
        Mean of per_class_ap over the classes present in the ground truth,
        0 when the ground truth holds no object.
    """
    aps = per_class_ap(preds_per_image, truths_per_image, iou_threshold)
    return float(np.mean(list(aps.values()))) if aps else 0.0

@dataclass
class EvalReport:

    iou_threshold: float
    precision: float
    recall: float
    per_class_ap: Dict[str, float]
    map: float
    images: Dict[str, List[dict]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    stats: Optional[dict] = None

    def to_dict(self) -> dict:
        data = {
            "iou_threshold": self.iou_threshold,
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "per_class_ap": {k: round(v, 6) for k, v in self.per_class_ap.items()},
            "map": round(self.map, 6),
            "counts": self.counts,
            "images": self.images,
        }
        if self.stats is not None:
            data["stats"] = self.stats
        return data

    def to_table(self) -> str:
        lines = [
            f"{'metric':<24}{'value':>10}",
            "-" * 34,
            f"{'iou_threshold':<24}{self.iou_threshold:>10.2f}",
            f"{'true positives':<24}{self.counts.get('tp', 0):>10d}",
            f"{'false positives':<24}{self.counts.get('fp', 0):>10d}",
            f"{'false negatives':<24}{self.counts.get('fn', 0):>10d}",
            f"{'precision':<24}{self.precision:>10.4f}",
            f"{'recall':<24}{self.recall:>10.4f}",
        ]
        for label, ap in sorted(self.per_class_ap.items()):
            lines.append(f"{'AP ' + label:<24}{ap:>10.4f}")
        lines.append(f"{'mAP':<24}{self.map:>10.4f}")
        return "\n".join(lines) + "\n"

def evaluate(preds_per_image: Mapping[str, Detections], truths_per_image: Mapping[str, Annotation],
             iou_threshold: float = DEFAULT_IOU_THRESHOLD, stats: Optional[dict] = None) -> EvalReport:

    """
        Full evaluation of a prediction set: per-image class-aware matches,
        pooled precision/recall, per-class AP and mAP.
    """

    _check_ids(preds_per_image, truths_per_image)
    empty = ContourSet(width=1, height=1)
    all_matches, images = [], {}
    for image_id in sorted(truths_per_image):
        truth = truths_per_image[image_id]
        preds = preds_per_image.get(image_id, empty)
        contours = _as_contours(preds)
        labels = sorted({c.label for c in contours} | {o.label for o in truth.objects})

        records = []
        for label in labels:
            sub_preds, sub_truth = _restrict(preds, truth, label)
            matched = match_detections(sub_preds, sub_truth, iou_threshold)
            all_matches.append(matched)
            pred_index = [i for i, c in enumerate(contours) if c.label == label]
            truth_index = [j for j, o in enumerate(truth.objects) if o.label == label]
            records += [
                {"label": label, "prediction": pred_index[m.prediction], "truth": truth_index[m.truth], "iou": round(m.iou, 6)}
                for m in matched.matches
            ]
        images[image_id] = records

    precision, recall = compute_pr(all_matches)
    aps = per_class_ap(preds_per_image, truths_per_image, iou_threshold)
    return EvalReport(
        iou_threshold=iou_threshold,
        precision=precision,
        recall=recall,
        per_class_ap=aps,
        map=float(np.mean(list(aps.values()))) if aps else 0.0,
        images=images,
        counts={
            "tp": sum(m.tp for m in all_matches),
            "fp": sum(m.fp for m in all_matches),
            "fn": sum(m.fn for m in all_matches),
        },
        stats=stats,
    )

def load_annotations(paths: Sequence, label_set: Sequence[str] = LABELS) -> Dict[str, Annotation]:

    """
        Loads annotation files (directories are searched for *.json) and
        indexes them by image id.
    """

    found = {}
    for path in paths:
        path = Path(path)
        files = sorted(path.rglob("*.json")) if path.is_dir() else [path]
        for file in files:
            data = io.read_json(file)
            if path.is_dir() and not (isinstance(data, dict) and "objects" in data):
                continue
            annotation = Annotation.from_dict(data, label_set=label_set, source=str(file))
            if annotation.image in found:
                raise SchemaError(f"{file}:image", f"duplicate image id '{annotation.image}'")
            found[annotation.image] = annotation
    return found
