"""Deterministic synthetic scenes and stand-ins for the external models.

Everything random draws from a numpy Generator keyed by (seed, stream,
scene, ...), so scenes can be built independently and in any order. The
detector and proposal simulators draw every random number for every ground
truth object whether or not it is used, which keeps streams aligned across
configurations: raising a recall parameter only ever adds outputs.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .datamodel import ClassVocabulary, Detection2D, ObjectLabel, Proposal3D, SceneFrame
from .discovery import DiscoveryConfig, MemoryBank, QuerySeed, init_query_seeds, select_novel, update_memory_bank
from .errors import BehindCameraError, DegenerateBoxError
from .geometry import (
    Box2D,
    Box3D,
    CameraModel,
    Point3,
    box3d_corners,
    iou3d,
    points_in_box,
    project_box3d,
    project_points,
)

# (name, nominal width, length, height) in meters
DEFAULT_CLASSES = (
    ("chair", 0.55, 0.55, 0.9),
    ("table", 1.2, 0.8, 0.75),
    ("bed", 1.5, 2.0, 0.6),
    ("sofa", 1.9, 0.9, 0.8),
    ("desk", 1.2, 0.6, 0.75),
    ("dresser", 1.0, 0.5, 1.0),
    ("bookshelf", 0.9, 0.35, 1.8),
    ("toilet", 0.45, 0.7, 0.8),
    ("sink", 0.6, 0.5, 0.9),
    ("lamp", 0.35, 0.35, 1.4),
    ("cabinet", 0.8, 0.5, 1.0),
    ("nightstand", 0.5, 0.45, 0.6),
)

_STREAM_LAYOUT = 1
_STREAM_DET2D = 2
_STREAM_PROP = 3
_STREAM_SPURIOUS = 4
_STREAM_ANCHOR = 5
_STREAM_EMBED = 6


@dataclass(frozen=True)
class SimConfig:
    num_scenes: int = 20
    objects_per_scene: tuple[int, int] = (4, 8)
    room_extent: tuple[float, float] = (6.0, 6.0)
    class_count: int = 12
    base_count: int = 4
    points_per_object: int = 150
    clutter_points: int = 300
    detector2d_recall: float = 0.9
    detector2d_jitter: float = 2.0  # px, per box coordinate
    confusion_rate: float = 0.05
    proposal_noise: float = 0.04  # m, on center and size components
    proposal_recall: float = 0.6
    spurious_proposals: int = 2
    seed_boost: float = 0.3  # recall added for GT boxes near a lifted seed
    seed_margin: float = 0.2  # m, how far outside a GT box a seed still counts
    embed_dim: int = 64
    embed_noise: float = 0.1
    image_size: tuple[int, int] = (640, 480)
    focal: float = 320.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.objects_per_scene
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_scene must be a (min, max) range with 0 <= min <= max")
        for name in ("detector2d_recall", "confusion_rate", "proposal_recall"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("detector2d_jitter", "proposal_noise", "embed_noise", "seed_boost", "seed_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.base_count <= self.class_count:
            raise ValueError("need 0 < base_count <= class_count")
        if self.num_scenes < 0 or self.points_per_object < 0 or self.clutter_points < 0:
            raise ValueError("counts must be nonnegative")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")

    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary(class_names(self.class_count), self.base_count)


def class_names(n: int) -> tuple[str, ...]:
    names = [c[0] for c in DEFAULT_CLASSES[:n]]
    names += [f"object{i}" for i in range(len(names), n)]
    return tuple(names)


def _nominal_size(class_id: int) -> tuple[float, float, float]:
    if class_id < len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES[class_id][1:]
    # deterministic size for generated class names
    r = np.random.default_rng([class_id, 7919])
    return tuple(r.uniform(0.4, 1.2, size=3))


def _scene_key(scene_id: str) -> int:
    return zlib.crc32(scene_id.encode("utf-8"))


def rng_for(cfg: SimConfig, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream, *keys])


def scene_id_for(index: int) -> str:
    return f"scene{index:05d}"


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


def scene_camera(cfg: SimConfig) -> CameraModel:
    """Camera behind the room's y=0 wall, raised and looking at the room center."""
    X, Y = cfg.room_extent
    W, H = cfg.image_size
    reach = max(X, Y)
    position = (0.5 * X, -0.75 * reach, 0.55 * reach)
    target = (0.5 * X, 0.5 * Y, 0.0)
    return CameraModel.look_at(position, target, cfg.focal, cfg.focal, 0.5 * W, 0.5 * H, W, H)


def _fully_visible(cam: CameraModel, box: Box3D) -> bool:
    uv, depth = project_points(cam, box3d_corners(box))
    return bool(
        np.all(depth > 0)
        and np.all(uv[:, 0] >= 0) and np.all(uv[:, 0] <= cam.image_width)
        and np.all(uv[:, 1] >= 0) and np.all(uv[:, 1] <= cam.image_height)
    )


def _sample_surface(rng: np.random.Generator, box: Box3D, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 3))
    w, l, h = box.size
    # faces: +-x (l*h), +-y (w*h), +-z (w*l)
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 3))
    local = uv * np.array([w, l, h])
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    local[np.arange(n), axis] = sign * np.array([w, l, h])[axis]
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(box.center)


def gen_scene(cfg: SimConfig, index: int) -> SceneFrame:
    """Room scene with non-overlapping, fully visible ground-truth boxes.

    Detections and proposals are left empty; see ``generate_dataset``.
    """
    rng = rng_for(cfg, _STREAM_LAYOUT, index)
    cam = scene_camera(cfg)
    X, Y = cfg.room_extent
    lo, hi = cfg.objects_per_scene
    n_target = int(rng.integers(lo, hi + 1)) if hi > 0 else 0

    labels: list[ObjectLabel] = []
    attempts = 0
    while len(labels) < n_target and attempts < 200 * max(n_target, 1):
        attempts += 1
        c = int(rng.integers(cfg.class_count))
        w, l, h = (s * rng.uniform(0.85, 1.15) for s in _nominal_size(c))
        heading = rng.uniform(-math.pi, math.pi)
        r = 0.5 * math.hypot(w, l)
        if 2 * r >= min(X, Y):
            continue
        x, y = rng.uniform(r, X - r), rng.uniform(r, Y - r)
        box = Box3D(Point3(x, y, 0.5 * h), (w, l, h), heading)
        # circumscribed circles apart => footprints disjoint => iou3d == 0
        if any(math.hypot(x - o.box.center.x, y - o.box.center.y)
               <= r + 0.5 * math.hypot(o.box.size[0], o.box.size[1]) for o in labels):
            continue
        if not _fully_visible(cam, box):
            continue
        labels.append(ObjectLabel(box, c))

    parts = [_sample_surface(rng, o.box, cfg.points_per_object) for o in labels]
    clutter = np.column_stack([
        rng.uniform(0, X, cfg.clutter_points),
        rng.uniform(0, Y, cfg.clutter_points),
        rng.uniform(0, 0.05, cfg.clutter_points),
    ])
    cloud = np.concatenate(parts + [clutter]) if parts else clutter
    base = [o for o in labels if o.class_id < cfg.base_count]
    return SceneFrame(scene_id_for(index), cloud, cam, base_labels=base, gt_all=labels)


# ---------------------------------------------------------------------------
# External model stand-ins
# ---------------------------------------------------------------------------


def simulate_detector2d(scene: SceneFrame, cfg: SimConfig) -> list[Detection2D]:
    """Noisy open-vocabulary 2D detector: recall, box jitter and class confusion."""
    rng = rng_for(cfg, _STREAM_DET2D, _scene_key(scene.scene_id))
    dets = []
    W, H = scene.camera.image_width, scene.camera.image_height
    for obj in scene.gt_all:
        hit = rng.uniform()
        jitter = rng.normal(0.0, 1.0, size=4) * cfg.detector2d_jitter
        confused = rng.uniform() < cfg.confusion_rate
        other = int(rng.integers(max(cfg.class_count - 1, 1)))
        score = float(rng.uniform(0.5, 1.0))
        if hit >= cfg.detector2d_recall:
            continue
        try:
            b = project_box3d(scene.camera, obj.box)
        except (BehindCameraError, DegenerateBoxError):
            continue
        x0, y0, x1, y1 = np.asarray(b.as_tuple()) + jitter
        x0, x1 = sorted((min(max(x0, 0.0), W), min(max(x1, 0.0), W)))
        y0, y1 = sorted((min(max(y0, 0.0), H), min(max(y1, 0.0), H)))
        if not (x1 > x0 and y1 > y0):
            continue
        cls = obj.class_id
        if confused and cfg.class_count > 1:
            cls = other if other < obj.class_id else other + 1
        dets.append(Detection2D(Box2D(float(x0), float(y0), float(x1), float(y1)), cls, score))
    return dets


def simulate_proposals3d(scene: SceneFrame, cfg: SimConfig,
                         seeds: Sequence[QuerySeed] | None = None) -> list[Proposal3D]:
    """Class-agnostic 3D proposals.

    Each GT box is proposed with probability ``proposal_recall``, raised by
    ``seed_boost`` when a lifted seed lies within ``seed_margin`` of the box.
    Center and size get Gaussian noise. ``spurious_proposals`` random boxes
    follow the GT-derived ones.
    """
    rng = rng_for(cfg, _STREAM_PROP, _scene_key(scene.scene_id))
    seed_pts = np.array([s.point for s in seeds], dtype=np.float64).reshape(-1, 3) if seeds else None
    props = []
    for obj in scene.gt_all:
        u = rng.uniform()
        noise = rng.normal(0.0, 1.0, size=6) * cfg.proposal_noise
        score = float(rng.uniform(0.5, 1.0))
        recall = cfg.proposal_recall
        if seed_pts is not None and np.any(points_in_box(obj.box, seed_pts, cfg.seed_margin)):
            recall = min(recall + cfg.seed_boost, 1.0)
        if u >= recall:
            continue
        center = np.asarray(obj.box.center) + noise[:3]
        size = np.maximum(np.asarray(obj.box.size) + noise[3:], 0.05)
        props.append(Proposal3D(Box3D(Point3(*center), tuple(size), obj.box.heading), score))

    srng = rng_for(cfg, _STREAM_SPURIOUS, _scene_key(scene.scene_id))
    X, Y = cfg.room_extent
    for _ in range(cfg.spurious_proposals):
        size = tuple(srng.uniform(0.3, 1.2, size=3))
        center = (srng.uniform(0, X), srng.uniform(0, Y), 0.5 * size[2])
        props.append(Proposal3D(Box3D(Point3(*center), size, srng.uniform(-math.pi, math.pi)),
                                float(srng.uniform(0.0, 0.5))))
    return props


def class_anchors(cfg: SimConfig) -> np.ndarray:
    """[class_count, embed_dim] unit anchors; orthonormal when class_count <= embed_dim."""
    rng = rng_for(cfg, _STREAM_ANCHOR)
    G = rng.normal(size=(cfg.embed_dim, cfg.class_count))
    if cfg.class_count <= cfg.embed_dim:
        Q, R = np.linalg.qr(G)
        Q = Q * np.sign(np.diag(R))
        return np.ascontiguousarray(Q.T)
    return (G / np.linalg.norm(G, axis=0)).T


def simulate_embedder(target, modality: str, cfg: SimConfig, instance: int = 0,
                      anchors: np.ndarray | None = None) -> np.ndarray:
    """Stand-in for a vision-language embedder.

    ``target`` is a class id or a SceneFrame. Text embeddings are the exact
    anchor (for a scene: the normalized sum of its distinct GT class
    anchors); image and point embeddings add Gaussian noise and renormalize,
    drawing noise keyed by (target, modality, instance).
    """
    if modality not in ("point", "image", "text"):
        raise ValueError(f"unknown modality {modality!r}")
    if anchors is None:
        anchors = class_anchors(cfg)
    if isinstance(target, SceneFrame):
        classes = sorted({o.class_id for o in target.gt_all})
        base = anchors[classes].sum(axis=0) if classes else np.zeros(cfg.embed_dim)
        key = _scene_key(target.scene_id)
        kind = 1
    else:
        base = anchors[int(target)]
        key = int(target)
        kind = 0
    norm = np.linalg.norm(base)
    vec = base / norm if norm > 0 else base.copy()
    if modality == "text":
        return vec
    rng = rng_for(cfg, _STREAM_EMBED, kind, key, ("point", "image").index(modality), instance)
    vec = vec + rng.normal(0.0, cfg.embed_noise, size=cfg.embed_dim)
    return vec / np.linalg.norm(vec)


# ---------------------------------------------------------------------------
# Datasets and discovery rounds
# ---------------------------------------------------------------------------


def generate_dataset(cfg: SimConfig) -> tuple[ClassVocabulary, list[SceneFrame]]:
    """Scenes with simulated 2D detections and seedless (first-round) proposals."""
    scenes = []
    for i in range(cfg.num_scenes):
        s = gen_scene(cfg, i)
        s.detections2d = simulate_detector2d(s, cfg)
        s.proposals3d = simulate_proposals3d(s, cfg)
        scenes.append(s)
    return cfg.vocabulary(), scenes


class RoundStat(NamedTuple):
    round: int
    novel_recall: float
    base_recall: float


def coverage(gts: Sequence[Box3D], boxes: Sequence[Box3D], iou_threshold: float = 0.25) -> int:
    """Number of GT boxes overlapped by some box at iou3d >= threshold."""
    return sum(1 for g in gts if any(iou3d(g, b) >= iou_threshold for b in boxes))


def run_discovery_rounds(scenes: Sequence[SceneFrame], cfg: SimConfig, rounds: int,
                         disc_cfg: DiscoveryConfig = DiscoveryConfig(), period: int = 1,
                         iou_threshold: float = 0.25) -> tuple[list[RoundStat], MemoryBank]:
    """Alternate proposal generation and image-guided discovery.

    Round r: proposals are simulated (seed-boosted once a discovery has run),
    recall of GT covered by bank + proposals is recorded, then every
    ``period``-th round seeds are lifted, novel objects selected and the bank
    rebuilt. Round 1 is therefore the proposals-only baseline.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if period < 1:
        raise ValueError("period must be >= 1")
    vocab = cfg.vocabulary()
    bank = MemoryBank()
    seeds: dict[str, list[QuerySeed]] = {}
    stats = []
    for r in range(1, rounds + 1):
        novel_hit = novel_total = base_hit = base_total = 0
        current = []
        for s in scenes:
            props = simulate_proposals3d(s, cfg, seeds.get(s.scene_id))
            frame = replace(s, proposals3d=props)
            current.append(frame)
            boxes = [p.box for p in props] + [o.box for o in bank.objects(s.scene_id)]
            novel = [o.box for o in s.gt_all if vocab.is_novel(o.class_id)]
            base = [o.box for o in s.gt_all if vocab.is_base(o.class_id)]
            novel_hit += coverage(novel, boxes, iou_threshold)
            base_hit += coverage(base, boxes, iou_threshold)
            novel_total += len(novel)
            base_total += len(base)
        stats.append(RoundStat(r, novel_hit / novel_total if novel_total else 0.0,
                               base_hit / base_total if base_total else 0.0))
        if r % period == 0:
            per_scene = {}
            for frame in current:
                seeds[frame.scene_id] = init_query_seeds(frame, disc_cfg)[0]
                found = select_novel(frame, vocab, disc_cfg)
                if found:
                    per_scene[frame.scene_id] = found
            bank = update_memory_bank(bank, per_scene)
    return stats, bank


def average_rounds(cfg: SimConfig, rounds: int, seeds: Sequence[int],
                   disc_cfg: DiscoveryConfig = DiscoveryConfig(), period: int = 1) -> list[RoundStat]:
    """Round statistics averaged over several simulator seeds."""
    acc = np.zeros((rounds, 2))
    for sd in seeds:
        c = replace(cfg, seed=sd)
        _, scenes = generate_dataset(c)
        stats, _ = run_discovery_rounds(scenes, c, rounds, disc_cfg, period)
        acc += np.array([[s.novel_recall, s.base_recall] for s in stats])
    acc /= len(seeds)
    return [RoundStat(r + 1, float(a), float(b)) for r, (a, b) in enumerate(acc)]
