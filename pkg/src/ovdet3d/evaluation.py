"""Detection metrics: greedy matching, all-point AP, recall, base/novel aggregation.

Per class, predictions from all scenes are ranked by descending score (ties
keep input order: scenes in the order given, predictions in list order).
Each prediction claims the unmatched ground-truth box in its own scene with
the highest 3D IoU at or above the threshold; anything else is a false
positive, including duplicates of an already-claimed box.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import ClassVocabulary, ObjectLabel, Prediction3D
from .errors import UnknownClassError
from .geometry import Box3D, iou3d

DEFAULT_IOU_THRESHOLD = 0.25


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = DEFAULT_IOU_THRESHOLD

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


@dataclass
class EvalReport:
    per_class_ap: dict[int, float] = field(default_factory=dict)
    per_class_ar: dict[int, float] = field(default_factory=dict)
    num_gt: dict[int, int] = field(default_factory=dict)
    map_novel: float = 0.0
    map_base: float = 0.0
    mar_novel: float = 0.0
    mar_base: float = 0.0
    avg_map: float = 0.0
    avg_mar: float = 0.0

    def to_dict(self, vocab: ClassVocabulary | None = None) -> dict:
        d = asdict(self)
        for k in ("per_class_ap", "per_class_ar", "num_gt"):
            d[k] = {str(c): v for c, v in sorted(d[k].items())}
        if vocab is not None:
            d["class_names"] = {str(c): vocab.names[c] for c in sorted(self.per_class_ap)}
        return d

    def to_json(self, vocab: ClassVocabulary | None = None) -> str:
        return json.dumps(self.to_dict(vocab), indent=2, sort_keys=False) + "\n"

    def to_csv(self, vocab: ClassVocabulary | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "class_id", "name", "split", "num_gt", "ap", "ar"])
        for c in sorted(self.per_class_ap):
            name = vocab.names[c] if vocab is not None else ""
            split = "" if vocab is None else ("base" if vocab.is_base(c) else "novel")
            w.writerow(["class", c, name, split, self.num_gt.get(c, 0),
                        repr(self.per_class_ap[c]), repr(self.per_class_ar[c])])
        for split, ap, ar in (("novel", self.map_novel, self.mar_novel),
                              ("base", self.map_base, self.mar_base),
                              ("all", self.avg_map, self.avg_mar)):
            w.writerow(["aggregate", "", "", split, "", repr(ap), repr(ar)])
        return buf.getvalue()


def match_class(preds: Sequence[tuple[Box3D, float]], gts: Sequence[Box3D],
                cfg: EvalConfig = EvalConfig()) -> list[tuple[int, int | None]]:
    """Greedy score-ordered matching within one scene and class.

    Returns (pred_idx, gt_idx or None) pairs in ranking order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    taken = [False] * len(gts)
    out = []
    for i in order:
        box = preds[i][0]
        best_j, best = None, cfg.iou_threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou3d(box, g)
            if v >= best and (best_j is None or v > best):
                best_j, best = j, v
        if best_j is not None:
            taken[best_j] = True
        out.append((i, best_j))
    return out


def average_precision(matching: Sequence[tuple[int, int | None]], num_gt: int) -> float:
    """All-point interpolated AP of a ranked matching.

    ``matching`` must be in ranking order (as returned by ``match_class``).
    Returns 0.0 when num_gt == 0.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0 or not matching:
        return 0.0
    tp = np.array([g is not None for _, g in matching], dtype=bool)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope: max precision at any recall >= this one
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall advances by exactly 1/num_gt at each true positive and not at all
    # otherwise, so the area is the envelope summed over TP ranks
    return math.fsum(envelope[tp]) / num_gt


@dataclass
class SceneEval:
    """Ground truth and predictions for one scene."""

    gts: list[ObjectLabel]
    preds: list[Prediction3D]
    scene_id: str = ""


def _ranked_matching(scenes: Sequence[SceneEval], class_id: int, cfg: EvalConfig):
    """Cross-scene ranked TP flags for one class, plus its GT count."""
    ranked = []  # (score, scene_idx, pred_idx, is_tp)
    num_gt = 0
    for si, sc in enumerate(scenes):
        gts = [g.box for g in sc.gts if g.class_id == class_id]
        num_gt += len(gts)
        idx = [k for k, p in enumerate(sc.preds) if p.class_id == class_id]
        if not idx:
            continue
        for i, g in match_class([(sc.preds[k].box, sc.preds[k].score) for k in idx], gts, cfg):
            ranked.append((sc.preds[idx[i]].score, si, idx[i], g is not None))
    # matching within a scene is greedy by score, so global ranking can be
    # assembled afterwards; ties fall back to (scene, prediction) order
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
    return [(k, 0 if tp else None) for k, (_, _, _, tp) in enumerate(ranked)], num_gt


def evaluate(scenes: Sequence[SceneEval], vocab: ClassVocabulary,
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Per-class AP/AR and split means.

    Classes with ground truth are aggregated; a class with predictions but no
    ground truth is reported with AP = AR = 0 and left out of the means.
    Recall counts GT boxes matched by any prediction.
    """
    present: set[int] = set()
    for sc in scenes:
        for item in (*sc.gts, *sc.preds):
            if not vocab.is_valid(item.class_id):
                raise UnknownClassError(f"class_id {item.class_id} not in vocabulary ({len(vocab)} classes)")
            present.add(item.class_id)

    rep = EvalReport()
    for c in sorted(present):
        matching, num_gt = _ranked_matching(scenes, c, cfg)
        rep.num_gt[c] = num_gt
        rep.per_class_ap[c] = average_precision(matching, num_gt)
        tp = sum(1 for _, g in matching if g is not None)
        rep.per_class_ar[c] = tp / num_gt if num_gt else 0.0

    def mean(vals):
        return float(np.mean(vals)) if vals else 0.0

    with_gt = [c for c in sorted(present) if rep.num_gt[c] > 0]
    novel = [c for c in with_gt if vocab.is_novel(c)]
    base = [c for c in with_gt if vocab.is_base(c)]
    rep.map_novel = mean([rep.per_class_ap[c] for c in novel])
    rep.map_base = mean([rep.per_class_ap[c] for c in base])
    rep.mar_novel = mean([rep.per_class_ar[c] for c in novel])
    rep.mar_base = mean([rep.per_class_ar[c] for c in base])
    rep.avg_map = mean([rep.per_class_ap[c] for c in with_gt])
    rep.avg_mar = mean([rep.per_class_ar[c] for c in with_gt])
    return rep
