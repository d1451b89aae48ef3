"""Image-guided novel object discovery.

Two uses of the 2D detections:
  * query seeds: each 2D box center is lifted into the point cloud and
    position-encoded, giving extra starting points for 3D proposals;
  * selection: 3D proposals are projected into the image and matched to
    novel-class 2D boxes; well-overlapping matches become pseudo labels in
    a per-scene memory bank that is rebuilt from scratch each round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .datamodel import (
    SCHEMA_VERSION,
    ClassVocabulary,
    ObjectLabel,
    SceneFrame,
    _encode,
    _read_jsonl,
    _write_lines,
    box3d_to_dict,
)
from .errors import BehindCameraError, DegenerateBoxError, NoSupportPointsError, ParseError
from .geometry import Box2D, Box3D, Point3, fourier_encode, iou2d, iou3d, lift_box_center, project_box3d

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.75
DEFAULT_BASE_DEDUP_IOU = 0.25
DEFAULT_SEED_DIMS = 60


@dataclass(frozen=True)
class DiscoveryConfig:
    epsilon: float = DEFAULT_EPSILON
    base_dedup_iou: float = DEFAULT_BASE_DEDUP_IOU
    seed_encoding_dims: int = DEFAULT_SEED_DIMS

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if not 0 < self.base_dedup_iou <= 1:
            raise ValueError(f"base_dedup_iou must be in (0, 1], got {self.base_dedup_iou}")
        if self.seed_encoding_dims <= 0 or self.seed_encoding_dims % 6:
            raise ValueError("seed_encoding_dims must be a positive multiple of 6")


@dataclass(frozen=True)
class DiscoveredObject:
    box: Box3D
    class_id: int
    source_detection: int
    match_iou: float

    def as_label(self) -> ObjectLabel:
        return ObjectLabel(self.box, self.class_id)


@dataclass
class MemoryBank:
    entries: dict[str, list[DiscoveredObject]] = field(default_factory=dict)
    round: int = 0

    def objects(self, scene_id: str) -> list[DiscoveredObject]:
        return self.entries.get(scene_id, [])

    def __len__(self):
        return sum(len(v) for v in self.entries.values())


class QuerySeed(NamedTuple):
    point: Point3
    encoding: np.ndarray
    detection_index: int


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


def init_query_seeds(scene: SceneFrame, cfg: DiscoveryConfig = DiscoveryConfig()) -> tuple[list[QuerySeed], int]:
    """Lift every 2D detection to a 3D seed point, in detection order.

    Returns:
      (seeds, skipped): detections whose box contains no cloud point are
      skipped and counted rather than raising.
    """
    seeds, skipped = [], 0
    for m, det in enumerate(scene.detections2d):
        try:
            p = lift_box_center(scene.camera, det.box, scene.cloud)
        except NoSupportPointsError:
            skipped += 1
            continue
        seeds.append(QuerySeed(p, fourier_encode(p, cfg.seed_encoding_dims), m))
    if skipped:
        logger.debug("%s: %d detections had no supporting points", scene.scene_id, skipped)
    return seeds, skipped


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


def projected_proposals(scene: SceneFrame) -> list[Box2D | None]:
    """Image rectangle of every proposal; None for proposals that cannot be projected."""
    out = []
    for prop in scene.proposals3d:
        try:
            out.append(project_box3d(scene.camera, prop.box))
        except (BehindCameraError, DegenerateBoxError):
            out.append(None)
    return out


def select_novel(scene: SceneFrame, vocab: ClassVocabulary,
                 cfg: DiscoveryConfig = DiscoveryConfig()) -> list[DiscoveredObject]:
    """Pick reliable novel 3D objects using the 2D detections as guidance.

    For each novel-class detection the best-overlapping projected proposal is
    kept when its 2D IoU reaches ``cfg.epsilon``. Proposals overlapping any
    base label by more than ``cfg.base_dedup_iou`` in 3D are dropped. When
    several detections land on one proposal the higher IoU wins (earlier
    detection on exact ties) and the others are discarded. The box comes
    from the proposal, the class from the detection. Output is ordered by
    detection index.
    """
    projected = projected_proposals(scene)
    eligible = [i for i, b in enumerate(projected) if b is not None]
    if not eligible:
        return []

    # proposal index -> (match_iou, detection index)
    claims: dict[int, tuple[float, int]] = {}
    for m, det in enumerate(scene.detections2d):
        if not vocab.is_novel(det.class_id):
            continue
        best_i, best_iou = -1, -1.0
        for i in eligible:
            v = iou2d(det.box, projected[i])
            if v > best_iou:
                best_i, best_iou = i, v
        if best_iou < cfg.epsilon:
            continue
        prev = claims.get(best_i)
        if prev is None or best_iou > prev[0]:
            claims[best_i] = (best_iou, m)

    out = []
    for i, (v, m) in claims.items():
        box = scene.proposals3d[i].box
        if any(iou3d(box, lab.box) > cfg.base_dedup_iou for lab in scene.base_labels):
            continue
        out.append(DiscoveredObject(box, scene.detections2d[m].class_id, m, v))
    out.sort(key=lambda o: o.source_detection)
    return out


# ---------------------------------------------------------------------------
# Memory bank
# ---------------------------------------------------------------------------


def update_memory_bank(bank: MemoryBank, per_scene: dict[str, list[DiscoveredObject]]) -> MemoryBank:
    """Replace the whole bank with ``per_scene``; the old contents are discarded."""
    return MemoryBank({sid: list(objs) for sid, objs in per_scene.items()}, bank.round + 1)


def training_targets(scene: SceneFrame, bank: MemoryBank) -> list[ObjectLabel]:
    """Base labels followed by the scene's banked discoveries."""
    return list(scene.base_labels) + [o.as_label() for o in bank.objects(scene.scene_id)]


def bank_violations(bank: MemoryBank, scenes, vocab: ClassVocabulary,
                    cfg: DiscoveryConfig = DiscoveryConfig()) -> list[str]:
    """Descriptions of every bank entry that breaks the bank invariants (empty when clean)."""
    by_id = {s.scene_id: s for s in scenes}
    problems = []
    for sid, objs in bank.entries.items():
        scene = by_id.get(sid)
        for j, o in enumerate(objs):
            if not vocab.is_novel(o.class_id):
                problems.append(f"{sid}[{j}]: class {o.class_id} is not novel")
            if o.match_iou < cfg.epsilon:
                problems.append(f"{sid}[{j}]: match_iou {o.match_iou} < epsilon {cfg.epsilon}")
            if scene is None:
                continue
            for lab in scene.base_labels:
                v = iou3d(o.box, lab.box)
                if v > cfg.base_dedup_iou:
                    problems.append(f"{sid}[{j}]: overlaps base label (iou3d {v:.3f})")
    return problems


def discover(scenes, vocab: ClassVocabulary, bank: MemoryBank | None = None,
             cfg: DiscoveryConfig = DiscoveryConfig()) -> MemoryBank:
    """One discovery round over a dataset: select per scene, then rebuild the bank."""
    per_scene = {s.scene_id: select_novel(s, vocab, cfg) for s in scenes}
    per_scene = {k: v for k, v in per_scene.items() if v}
    return update_memory_bank(bank or MemoryBank(), per_scene)


def save_bank(bank: MemoryBank, path) -> None:
    """bank.jsonl: a header record with the round counter, then one record per scene."""
    lines = [_encode({"schema_version": SCHEMA_VERSION, "kind": "header", "round": bank.round})]
    for sid, objs in bank.entries.items():
        lines.append(_encode({
            "schema_version": SCHEMA_VERSION,
            "kind": "scene",
            "scene_id": sid,
            "objects": [
                {"box": box3d_to_dict(o.box), "class_id": o.class_id,
                 "source_detection": o.source_detection, "match_iou": o.match_iou}
                for o in objs
            ],
        }))
    _write_lines(path, lines)


def load_bank(path) -> MemoryBank:
    bank = None
    for lineno, rd, rec in _read_jsonl(path):
        kind = rd.str_(rd.get(rec, "kind", ""), "kind")
        if bank is None:
            if kind != "header":
                rd.fail("kind", "first record must be the header")
            bank = MemoryBank({}, rd.int_(rd.get(rec, "round", ""), "round"))
            continue
        if kind != "scene":
            rd.fail("kind", f"unexpected record kind {kind!r}")
        sid = rd.str_(rd.get(rec, "scene_id", ""), "scene_id")
        if sid in bank.entries:
            rd.fail("scene_id", f"duplicate scene_id {sid!r}")
        objs = []
        for j, d in enumerate(rd.list_(rd.get(rec, "objects", ""), "objects")):
            p = f"objects[{j}]"
            objs.append(DiscoveredObject(
                rd.box3d(rd.get(d, "box", p), f"{p}.box"),
                rd.int_(rd.get(d, "class_id", p), f"{p}.class_id"),
                rd.int_(rd.get(d, "source_detection", p), f"{p}.source_detection"),
                rd.num(rd.get(d, "match_iou", p), f"{p}.match_iou"),
            ))
        bank.entries[sid] = objs
    if bank is None:
        raise ParseError("bank file has no header record")
    return bank
