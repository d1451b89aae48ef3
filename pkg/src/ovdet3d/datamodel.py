"""Scene containers, class vocabulary and line-delimited JSON file IO.

Every record carries ``schema_version``. Floats are written with 17
significant digits so that save/load round-trips are bit-exact, and the
writer emits keys in a fixed order so output is canonical: saving a
loaded canonical file reproduces it byte for byte.

File layouts (one JSON object per line):

  vocab.json        {"schema_version", "names": [...], "base_count"}
  scenes.jsonl      {"schema_version", "scene_id", "camera", "cloud",
                     "base_labels", "gt_all", "detections2d", "proposals3d"}
  embeddings.jsonl  {"schema_version", "key": {...}, "vector": [...]}
                    where key is {"scene_id", "object_index", "modality"}
                    or {"class_id", "modality"}
  predictions.jsonl {"schema_version", "scene_id", "predictions": [
                     {"box", "class_id", "score"}]}

Boxes are {"center": [x, y, z], "size": [w, l, h], "heading"} in 3D and
[xmin, ymin, xmax, ymax] in 2D.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple

import numpy as np

from .errors import DimensionMismatch, ParseError, SchemaVersionMismatch
from .geometry import Box2D, Box3D, CameraModel, Point3

SCHEMA_VERSION = 1
MODALITIES = ("point", "image", "text")


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names; the first ``base_count`` are base classes, the rest novel."""

    names: tuple[str, ...]
    base_count: int

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("vocabulary must not be empty")
        if any(not isinstance(n, str) or not n for n in names):
            raise ValueError("class names must be nonempty strings")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if not 0 < self.base_count <= len(names):
            raise ValueError(f"base_count must be in (0, {len(names)}], got {self.base_count}")

    def __len__(self):
        return len(self.names)

    def is_valid(self, class_id: int) -> bool:
        return isinstance(class_id, (int, np.integer)) and 0 <= class_id < len(self.names)

    def is_base(self, class_id: int) -> bool:
        return 0 <= class_id < self.base_count

    def is_novel(self, class_id: int) -> bool:
        return self.base_count <= class_id < len(self.names)

    @property
    def base_ids(self) -> range:
        return range(self.base_count)

    @property
    def novel_ids(self) -> range:
        return range(self.base_count, len(self.names))


@dataclass(frozen=True)
class ObjectLabel:
    box: Box3D
    class_id: int


@dataclass(frozen=True)
class Detection2D:
    box: Box2D
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


@dataclass(frozen=True, eq=False)
class Proposal3D:
    box: Box3D
    score: float
    feature: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"proposal score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class Prediction3D:
    """A classified 3D detection, the unit of evaluation."""

    box: Box3D
    class_id: int
    score: float


@dataclass(eq=False)
class SceneFrame:
    scene_id: str
    cloud: np.ndarray
    camera: CameraModel
    base_labels: list[ObjectLabel] = field(default_factory=list)
    gt_all: list[ObjectLabel] = field(default_factory=list)
    detections2d: list[Detection2D] = field(default_factory=list)
    proposals3d: list[Proposal3D] = field(default_factory=list)

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=np.float64).reshape(-1, 3)


def validate_scene(scene: SceneFrame, vocab: ClassVocabulary) -> None:
    """Check class ids against ``vocab``; raises ValueError naming the offending field."""
    for i, lab in enumerate(scene.base_labels):
        if not vocab.is_base(lab.class_id):
            raise ValueError(f"{scene.scene_id}: base_labels[{i}].class_id={lab.class_id} is not a base class")
    for name in ("gt_all", "detections2d"):
        for i, item in enumerate(getattr(scene, name)):
            if not vocab.is_valid(item.class_id):
                raise ValueError(f"{scene.scene_id}: {name}[{i}].class_id={item.class_id} out of range")


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    s = format(x, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def _encode(obj: Any) -> str:
    """Compact JSON with 17-significant-digit floats. Dict order is preserved."""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def box3d_to_dict(b: Box3D) -> dict:
    return {"center": list(b.center), "size": list(b.size), "heading": b.heading}


def camera_to_dict(c: CameraModel) -> dict:
    return {
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "rotation": [list(r) for r in c.rotation],
        "translation": list(c.translation),
        "image_width": c.image_width, "image_height": c.image_height,
    }


def _label_to_dict(lab: ObjectLabel) -> dict:
    return {"box": box3d_to_dict(lab.box), "class_id": lab.class_id}


def scene_to_record(s: SceneFrame) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": s.scene_id,
        "camera": camera_to_dict(s.camera),
        "cloud": s.cloud.tolist(),
        "base_labels": [_label_to_dict(x) for x in s.base_labels],
        "gt_all": [_label_to_dict(x) for x in s.gt_all],
        "detections2d": [
            {"box": list(d.box.as_tuple()), "class_id": d.class_id, "score": d.score}
            for d in s.detections2d
        ],
        "proposals3d": [
            {
                "box": box3d_to_dict(p.box),
                "score": p.score,
                "feature": None if p.feature is None else np.asarray(p.feature).tolist(),
            }
            for p in s.proposals3d
        ],
    }


# ---------------------------------------------------------------------------
# Decoding with field diagnostics
# ---------------------------------------------------------------------------


class _Reader:
    """Typed accessors that raise ParseError with the line number and field path."""

    def __init__(self, line: int):
        self.line = line

    def fail(self, path: str, msg: str):
        raise ParseError(msg, line=self.line, field=path)

    def get(self, d: Any, key: str, path: str):
        if not isinstance(d, dict):
            self.fail(path, "expected an object")
        if key not in d:
            self.fail(f"{path}.{key}" if path else key, "missing field")
        return d[key]

    def num(self, v: Any, path: str) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(path, f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            self.fail(path, "expected a finite number")
        return v

    def int_(self, v: Any, path: str) -> int:
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(path, f"expected an integer, got {v!r}")
        return v

    def str_(self, v: Any, path: str) -> str:
        if not isinstance(v, str):
            self.fail(path, f"expected a string, got {v!r}")
        return v

    def list_(self, v: Any, path: str, length: int | None = None) -> list:
        if not isinstance(v, list):
            self.fail(path, "expected a list")
        if length is not None and len(v) != length:
            self.fail(path, f"expected {length} entries, got {len(v)}")
        return v

    def vec(self, v: Any, path: str, length: int | None = None) -> list[float]:
        return [self.num(x, f"{path}[{i}]") for i, x in enumerate(self.list_(v, path, length))]

    def box3d(self, d: Any, path: str) -> Box3D:
        center = self.vec(self.get(d, "center", path), f"{path}.center", 3)
        size = self.vec(self.get(d, "size", path), f"{path}.size", 3)
        heading = self.num(self.get(d, "heading", path), f"{path}.heading")
        for i, s in enumerate(size):
            if s <= 0:
                self.fail(f"{path}.size[{i}]", f"size components must be > 0, got {s}")
        return Box3D(Point3(*center), tuple(size), heading)

    def box2d(self, v: Any, path: str) -> Box2D:
        xmin, ymin, xmax, ymax = self.vec(v, path, 4)
        if not xmin < xmax:
            self.fail(f"{path}.xmin", f"xmin ({xmin}) must be < xmax ({xmax})")
        if not ymin < ymax:
            self.fail(f"{path}.ymin", f"ymin ({ymin}) must be < ymax ({ymax})")
        return Box2D(xmin, ymin, xmax, ymax)

    def score(self, v: Any, path: str) -> float:
        s = self.num(v, path)
        if not 0.0 <= s <= 1.0:
            self.fail(path, f"score must be in [0, 1], got {s}")
        return s

    def label(self, d: Any, path: str) -> ObjectLabel:
        box = self.box3d(self.get(d, "box", path), f"{path}.box")
        cid = self.int_(self.get(d, "class_id", path), f"{path}.class_id")
        if cid < 0:
            self.fail(f"{path}.class_id", "class_id must be >= 0")
        return ObjectLabel(box, cid)

    def camera(self, d: Any, path: str) -> CameraModel:
        vals = {k: self.num(self.get(d, k, path), f"{path}.{k}")
                for k in ("fx", "fy", "cx", "cy", "image_width", "image_height")}
        rot = self.list_(self.get(d, "rotation", path), f"{path}.rotation", 3)
        R = [self.vec(r, f"{path}.rotation[{i}]", 3) for i, r in enumerate(rot)]
        t = self.vec(self.get(d, "translation", path), f"{path}.translation", 3)
        try:
            return CameraModel(rotation=R, translation=t, **vals)
        except ValueError as exc:
            self.fail(path, str(exc))

    def check_version(self, rec: Any) -> None:
        if not isinstance(rec, dict):
            self.fail("", "record must be a JSON object")
        if "schema_version" not in rec:
            self.fail("schema_version", "missing field")
        if rec["schema_version"] != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"expected schema_version {SCHEMA_VERSION}, got {rec['schema_version']!r}",
                line=self.line, field="schema_version",
            )


def _read_jsonl(path) -> Iterable[tuple[int, _Reader, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            rd = _Reader(lineno)
            rd.check_version(rec)
            yield lineno, rd, rec


def _write_lines(path, lines: Iterable[str]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
    os.replace(tmp, path)


def scene_from_record(rd: _Reader, rec: dict) -> SceneFrame:
    scene_id = rd.str_(rd.get(rec, "scene_id", ""), "scene_id")
    camera = rd.camera(rd.get(rec, "camera", ""), "camera")
    cloud_raw = rd.list_(rd.get(rec, "cloud", ""), "cloud")
    cloud = np.array([rd.vec(p, f"cloud[{i}]", 3) for i, p in enumerate(cloud_raw)],
                     dtype=np.float64).reshape(-1, 3)
    base = [rd.label(x, f"base_labels[{i}]")
            for i, x in enumerate(rd.list_(rd.get(rec, "base_labels", ""), "base_labels"))]
    gt = [rd.label(x, f"gt_all[{i}]")
          for i, x in enumerate(rd.list_(rd.get(rec, "gt_all", ""), "gt_all"))]
    dets = []
    for i, d in enumerate(rd.list_(rd.get(rec, "detections2d", ""), "detections2d")):
        p = f"detections2d[{i}]"
        dets.append(Detection2D(
            rd.box2d(rd.get(d, "box", p), f"{p}.box"),
            rd.int_(rd.get(d, "class_id", p), f"{p}.class_id"),
            rd.score(rd.get(d, "score", p), f"{p}.score"),
        ))
    props = []
    for i, d in enumerate(rd.list_(rd.get(rec, "proposals3d", ""), "proposals3d")):
        p = f"proposals3d[{i}]"
        feat = d.get("feature") if isinstance(d, dict) else None
        props.append(Proposal3D(
            rd.box3d(rd.get(d, "box", p), f"{p}.box"),
            rd.score(rd.get(d, "score", p), f"{p}.score"),
            None if feat is None else np.array(rd.vec(feat, f"{p}.feature")),
        ))
    return SceneFrame(scene_id, cloud, camera, base, gt, dets, props)


def load_dataset(path, vocab: ClassVocabulary | None = None) -> list[SceneFrame]:
    """Read scenes.jsonl. When ``vocab`` is given, class ids are validated against it."""
    scenes, seen = [], set()
    for lineno, rd, rec in _read_jsonl(path):
        scene = scene_from_record(rd, rec)
        if scene.scene_id in seen:
            rd.fail("scene_id", f"duplicate scene_id {scene.scene_id!r}")
        seen.add(scene.scene_id)
        if vocab is not None:
            try:
                validate_scene(scene, vocab)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
        scenes.append(scene)
    return scenes


def dump_scene(scene: SceneFrame) -> str:
    return _encode(scene_to_record(scene))


def save_dataset(scenes: Iterable[SceneFrame], path) -> None:
    scenes = list(scenes)
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError("scene_id values must be unique within a dataset")
    _write_lines(path, (dump_scene(s) for s in scenes))


def save_vocab(vocab: ClassVocabulary, path) -> None:
    rec = {"schema_version": SCHEMA_VERSION, "names": list(vocab.names), "base_count": vocab.base_count}
    _write_lines(path, [_encode(rec)])


def load_vocab(path) -> ClassVocabulary:
    with open(path, encoding="utf-8") as fh:
        try:
            rec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    rd = _Reader(1)
    rd.check_version(rec)
    names = [rd.str_(n, f"names[{i}]") for i, n in enumerate(rd.list_(rd.get(rec, "names", ""), "names"))]
    base_count = rd.int_(rd.get(rec, "base_count", ""), "base_count")
    try:
        return ClassVocabulary(tuple(names), base_count)
    except ValueError as exc:
        raise ParseError(str(exc), line=1, field="names") from None


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


class ObjectKey(NamedTuple):
    scene_id: str
    object_index: int
    modality: str


class ClassKey(NamedTuple):
    class_id: int
    modality: str


def _key_to_dict(key) -> dict:
    if isinstance(key, ObjectKey):
        return {"scene_id": key.scene_id, "object_index": key.object_index, "modality": key.modality}
    if isinstance(key, ClassKey):
        return {"class_id": key.class_id, "modality": key.modality}
    raise TypeError(f"unsupported embedding key {key!r}")


def save_embeddings(embeddings: dict, path) -> None:
    dims = {np.asarray(v).shape for v in embeddings.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"embeddings have mixed shapes {sorted(dims)}")
    lines = (
        _encode({"schema_version": SCHEMA_VERSION, "key": _key_to_dict(k),
                 "vector": np.asarray(v, dtype=np.float64).tolist()})
        for k, v in embeddings.items()
    )
    _write_lines(path, lines)


def load_embeddings(path) -> dict:
    """Read embeddings.jsonl into {ObjectKey | ClassKey: vector}.

    Raises:
      DimensionMismatch: vectors do not all share one dimension.
      ParseError: malformed record or duplicate key.
    """
    out: dict = {}
    dim = None
    for lineno, rd, rec in _read_jsonl(path):
        kd = rd.get(rec, "key", "")
        modality = rd.str_(rd.get(kd, "modality", "key"), "key.modality")
        if modality not in MODALITIES:
            rd.fail("key.modality", f"unknown modality {modality!r}")
        if isinstance(kd, dict) and "class_id" in kd:
            key = ClassKey(rd.int_(kd["class_id"], "key.class_id"), modality)
        else:
            key = ObjectKey(
                rd.str_(rd.get(kd, "scene_id", "key"), "key.scene_id"),
                rd.int_(rd.get(kd, "object_index", "key"), "key.object_index"),
                modality,
            )
        vec = np.array(rd.vec(rd.get(rec, "vector", ""), "vector"), dtype=np.float64)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DimensionMismatch(f"line {lineno}: vector has dimension {vec.shape[0]}, expected {dim}")
        if key in out:
            rd.fail("key", f"duplicate key {tuple(key)}")
        out[key] = vec
    return out


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------


def save_predictions(preds: dict[str, list[Prediction3D]], path) -> None:
    lines = (
        _encode({
            "schema_version": SCHEMA_VERSION,
            "scene_id": sid,
            "predictions": [
                {"box": box3d_to_dict(p.box), "class_id": p.class_id, "score": p.score}
                for p in plist
            ],
        })
        for sid, plist in preds.items()
    )
    _write_lines(path, lines)


def load_predictions(path) -> dict[str, list[Prediction3D]]:
    out: dict[str, list[Prediction3D]] = {}
    for _, rd, rec in _read_jsonl(path):
        sid = rd.str_(rd.get(rec, "scene_id", ""), "scene_id")
        if sid in out:
            rd.fail("scene_id", f"duplicate scene_id {sid!r}")
        plist = []
        for i, d in enumerate(rd.list_(rd.get(rec, "predictions", ""), "predictions")):
            p = f"predictions[{i}]"
            plist.append(Prediction3D(
                rd.box3d(rd.get(d, "box", p), f"{p}.box"),
                rd.int_(rd.get(d, "class_id", p), f"{p}.class_id"),
                rd.score(rd.get(d, "score", p), f"{p}.score"),
            ))
        out[sid] = plist
    return out
