"""Frame-level detection mAP, top-k accuracy, the verb-noun prior, and score aggregation."""

from __future__ import annotations

import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .roi import Box


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class Detection:
    box: Box
    scores: dict[int, float]


@dataclass
class GroundTruth:
    box: Box
    labels: frozenset[int]


@dataclass
class EvalRecord:
    frame_id: str
    detections: list[Detection] = field(default_factory=list)
    ground_truth: list[GroundTruth] = field(default_factory=list)


def match_detections(records: Sequence[EvalRecord], cls: int, iou_thresh: float = 0.5):
    """Greedy matching for one class.

    Returns ``(hits, num_gt, pairs)``: a 0/1 array over detections in ranked
    order, the positive GT count, and ``(rank, frame index, gt index)`` for
    every true positive. Ranking is by score descending, then record order,
    then detection order. Each detection takes the unmatched GT with the
    highest IoU (ties to the lower GT index).
    """
    gts = {}
    num_gt = 0
    for fi, rec in enumerate(records):
        boxes = [(gi, g.box) for gi, g in enumerate(rec.ground_truth) if cls in g.labels]
        gts[fi] = boxes
        num_gt += len(boxes)

    dets = []
    for fi, rec in enumerate(records):
        for di, det in enumerate(rec.detections):
            if cls in det.scores:
                dets.append((-det.scores[cls], fi, di, det.box))
    dets.sort(key=lambda x: x[:3])

    used = set()
    hits = np.zeros(len(dets), dtype=np.int64)
    pairs = []
    for rank, (_, fi, _, box) in enumerate(dets):
        best, best_iou = None, -1.0
        for gi, gbox in gts[fi]:
            if (fi, gi) in used:
                continue
            ov = iou(box, gbox)
            if ov >= iou_thresh and ov > best_iou:
                best, best_iou = gi, ov
        if best is not None:
            used.add((fi, best))
            hits[rank] = 1
            pairs.append((rank, fi, best))
    return hits, num_gt, pairs


def average_precision(hits: np.ndarray, num_gt: int) -> float:
    """All-points interpolated AP from ranked 0/1 hits."""
    if num_gt == 0:
        return 0.0
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1 - hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def frame_ap(records: Sequence[EvalRecord], cls: int, iou_thresh: float = 0.5) -> float:
    """AP for one class; a class without ground truth scores 0."""
    hits, num_gt, _ = match_detections(records, cls, iou_thresh)
    return average_precision(hits, num_gt)


def per_class_ap(records: Sequence[EvalRecord], classes: Iterable[int],
                 iou_thresh: float = 0.5) -> dict[int, float]:
    return {c: frame_ap(records, c, iou_thresh) for c in classes}


def mean_ap(records: Sequence[EvalRecord], classes: Iterable[int] | None = None,
            iou_thresh: float = 0.5) -> float:
    if classes is None:
        found = set()
        for rec in records:
            for g in rec.ground_truth:
                found |= g.labels
            for d in rec.detections:
                found |= set(d.scores)
        classes = sorted(found)
    aps = per_class_ap(records, classes, iou_thresh)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def topk_hit(scores: Sequence[float], label: int, k: int) -> int:
    """1 if ``label`` is among the ``k`` highest scores (ties go to the lower class index)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[-1]:
        raise ValueError(f"k={k} outside [1, {scores.shape[-1]}]")
    order = np.lexsort((np.arange(scores.size), -scores))
    return int(label in order[:k])


def topk_accuracy(scores: np.ndarray, labels: Sequence[int], k: int) -> float:
    scores = np.atleast_2d(scores)
    return float(np.mean([topk_hit(s, int(y), k) for s, y in zip(scores, labels)]))


@dataclass
class PriorTable:
    """Verb-noun prior ``mu(v, n) = count(v, n) / count(n)``."""

    counts: dict[tuple[str, str], int]

    def __post_init__(self):
        self.noun_counts: Counter = Counter()
        for (_, n), c in self.counts.items():
            if c < 0:
                raise ValueError("prior counts must be non-negative")
            self.noun_counts[n] += c

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "PriorTable":
        return cls(dict(Counter(pairs)))

    def mu(self, verb: str, noun: str) -> float:
        total = self.noun_counts.get(noun, 0)
        if total == 0:
            return 0.0
        return self.counts.get((verb, noun), 0) / total

    def matrix(self, verbs: Sequence[str], nouns: Sequence[str]) -> np.ndarray:
        return np.array([[self.mu(v, n) for n in nouns] for v in verbs])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PriorTable":
        counts: dict[tuple[str, str], int] = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 'verb noun count'")
                v, n, c = parts
                counts[(v, n)] = counts.get((v, n), 0) + int(c)
        return cls(counts)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for (v, n), c in sorted(self.counts.items()):
                fh.write(f"{v} {n} {c}\n")


def action_scores(prior: PriorTable, p_verb: Mapping[str, float],
                  p_noun: Mapping[str, float]) -> dict[tuple[str, str], float]:
    """Unnormalized ``mu(v, n) * P(verb=v) * P(noun=n)`` for every verb-noun pair."""
    return {
        (v, n): prior.mu(v, n) * pv * pn
        for v, pv in p_verb.items()
        for n, pn in p_noun.items()
    }


def top_actions(scores: Mapping[tuple[str, str], float], k: int = 1) -> list[tuple[str, str]]:
    return [a for a, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def aggregate_predictions(clip_scores: Sequence[np.ndarray], mode: str = "max") -> np.ndarray:
    """Combine per-clip (or per-crop) class scores elementwise."""
    if len(clip_scores) == 0:
        raise ValueError("no clip predictions to aggregate")
    stacked = np.stack([np.asarray(s, dtype=np.float64) for s in clip_scores])
    if mode == "max":
        return stacked.max(axis=0)
    if mode == "mean":
        return stacked.mean(axis=0)
    raise ValueError(f"aggregation mode must be 'max' or 'mean', got {mode!r}")


def combine_augmentations(view_scores: Sequence[np.ndarray], mode: str = "mean") -> np.ndarray:
    """Test-time augmentation (crops, flips, scales) of one clip; averaged by default."""
    return aggregate_predictions(view_scores, mode)


class InterchangeError(ValueError):
    """Malformed detection / ground-truth line."""


def read_interchange(path: str | os.PathLike, with_scores: bool) -> dict[str, list]:
    """Parse ``frame_id,x1,y1,x2,y2,class_id[,score]`` lines.

    Rows sharing a frame and box are merged: detections into one per-class
    score dict, ground truth into one label set.
    """
    grouped: dict[str, dict[tuple, dict | set]] = defaultdict(dict)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            expected = 7 if with_scores else 6
            if len(parts) != expected:
                raise InterchangeError(f"{path}:{lineno}: expected {expected} fields, got {len(parts)}")
            frame = parts[0]
            try:
                box = tuple(float(v) for v in parts[1:5])
                cls = int(parts[5])
                score = float(parts[6]) if with_scores else None
                Box(*box)
            except ValueError as exc:
                raise InterchangeError(f"{path}:{lineno}: {exc}") from None
            slot = grouped[frame]
            if with_scores:
                slot.setdefault(box, {})[cls] = score
            else:
                slot.setdefault(box, set()).add(cls)
    out: dict[str, list] = {}
    for frame, boxes in grouped.items():
        if with_scores:
            out[frame] = [Detection(Box(*b), dict(s)) for b, s in boxes.items()]
        else:
            out[frame] = [GroundTruth(Box(*b), frozenset(s)) for b, s in boxes.items()]
    return out


def load_records(detections_path, gt_path) -> list[EvalRecord]:
    dets = read_interchange(detections_path, with_scores=True)
    gts = read_interchange(gt_path, with_scores=False)
    frames = sorted(set(dets) | set(gts))
    return [EvalRecord(f, dets.get(f, []), gts.get(f, [])) for f in frames]


def write_interchange(path, records: Sequence[EvalRecord], which: str) -> None:
    with open(path, "w") as fh:
        for rec in records:
            if which == "detections":
                for d in rec.detections:
                    for c, s in sorted(d.scores.items()):
                        fh.write(f"{rec.frame_id},{','.join(repr(float(v)) for v in d.box.as_tuple())},{c},{float(s)!r}\n")
            else:
                for g in rec.ground_truth:
                    for c in sorted(g.labels):
                        fh.write(f"{rec.frame_id},{','.join(repr(float(v)) for v in g.box.as_tuple())},{c}\n")
