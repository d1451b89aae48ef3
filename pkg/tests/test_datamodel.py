import json

import numpy as np
import pytest

from ovdet3d.datamodel import (
    ClassKey,
    ClassVocabulary,
    Detection2D,
    ObjectKey,
    ObjectLabel,
    Prediction3D,
    Proposal3D,
    SceneFrame,
    load_dataset,
    load_embeddings,
    load_predictions,
    load_vocab,
    save_dataset,
    save_embeddings,
    save_predictions,
    save_vocab,
    validate_scene,
)
from ovdet3d.errors import DimensionMismatch, ParseError, SchemaVersionMismatch
from ovdet3d.geometry import Box2D, Box3D, CameraModel, Point3
from ovdet3d.simgen import SimConfig, generate_dataset


@pytest.fixture
def scene():
    rng = np.random.default_rng(0)
    cam = CameraModel(500.1, 499.7, 320.3, 239.9, rotation=np.eye(3), translation=(0.1, -0.2, 0.3))
    return SceneFrame(
        "s0",
        rng.normal(size=(5, 3)),
        cam,
        base_labels=[ObjectLabel(Box3D(Point3(0.1, 0.2, 3.0), (1 / 3, 0.5, 0.7), 0.3), 0)],
        gt_all=[ObjectLabel(Box3D(Point3(0.1, 0.2, 3.0), (1 / 3, 0.5, 0.7), 0.3), 0),
                ObjectLabel(Box3D(Point3(-1, 0.5, 4.0), (0.4, 0.4, 0.4), -2.0), 2)],
        detections2d=[Detection2D(Box2D(10.5, 20.25, 30.125, 40.0), 2, 0.9)],
        proposals3d=[Proposal3D(Box3D(Point3(-1, 0.5, 4.1), (0.4, 0.5, 0.4), -2.0), 0.7),
                     Proposal3D(Box3D(Point3(1, 1, 5), (1, 1, 1)), 0.1, np.array([0.1, 1 / 7]))],
    )


class TestVocabulary:
    def test_split(self):
        v = ClassVocabulary(("a", "b", "c"), 2)
        assert list(v.base_ids) == [0, 1] and list(v.novel_ids) == [2]
        assert v.is_novel(2) and not v.is_novel(1) and v.is_base(0)

    @pytest.mark.parametrize("names,base", [((), 1), (("a", "a"), 1), (("a", ""), 1), (("a",), 0), (("a",), 2)])
    def test_invalid(self, names, base):
        with pytest.raises(ValueError):
            ClassVocabulary(names, base)

    def test_roundtrip(self, tmp_path):
        v = ClassVocabulary(("chair", "table", "lamp"), 2)
        save_vocab(v, tmp_path / "vocab.json")
        assert load_vocab(tmp_path / "vocab.json") == v

    def test_validate_scene(self, scene):
        validate_scene(scene, ClassVocabulary(("a", "b", "c"), 1))
        with pytest.raises(ValueError, match="gt_all"):
            validate_scene(scene, ClassVocabulary(("a", "b"), 1))


class TestDatasetIO:
    def test_empty(self, tmp_path):
        save_dataset([], tmp_path / "s.jsonl")
        assert load_dataset(tmp_path / "s.jsonl") == []

    def test_roundtrip_bit_exact(self, tmp_path, scene):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset([scene], p1)
        loaded = load_dataset(p1)
        save_dataset(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        got = loaded[0]
        np.testing.assert_array_equal(got.cloud, scene.cloud)
        assert got.camera == scene.camera
        assert got.gt_all == scene.gt_all
        assert got.detections2d == scene.detections2d
        assert got.proposals3d[0].feature is None
        np.testing.assert_array_equal(got.proposals3d[1].feature, scene.proposals3d[1].feature)
        assert got.base_labels[0].box.size[0] == 1 / 3

    def test_simulated_roundtrip(self, tmp_path):
        _, scenes = generate_dataset(SimConfig(num_scenes=3))
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(scenes, p1)
        save_dataset(load_dataset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def _write_with(self, tmp_path, scene, mutate):
        p = tmp_path / "s.jsonl"
        save_dataset([scene], p)
        rec = json.loads(p.read_text())
        mutate(rec)
        p.write_text(json.dumps(rec) + "\n")
        return p

    def test_xmin_gt_xmax_names_field(self, tmp_path, scene):
        def bad(rec):
            rec["detections2d"][0]["box"] = [50, 0, 10, 10]

        with pytest.raises(ParseError) as exc:
            load_dataset(self._write_with(tmp_path, scene, bad))
        assert exc.value.line == 1
        assert "detections2d[0].box.xmin" in str(exc.value)

    def test_missing_field(self, tmp_path, scene):
        with pytest.raises(ParseError, match="camera.fx"):
            load_dataset(self._write_with(tmp_path, scene, lambda r: r["camera"].pop("fx")))

    def test_schema_version(self, tmp_path, scene):
        def bump(rec):
            rec["schema_version"] = 99

        with pytest.raises(SchemaVersionMismatch):
            load_dataset(self._write_with(tmp_path, scene, bump))

    def test_bad_json_reports_line(self, tmp_path, scene):
        p = tmp_path / "s.jsonl"
        save_dataset([scene], p)
        p.write_text(p.read_text() + "{not json\n")
        with pytest.raises(ParseError) as exc:
            load_dataset(p)
        assert exc.value.line == 2

    def test_vocab_validation(self, tmp_path, scene):
        p = tmp_path / "s.jsonl"
        save_dataset([scene], p)
        with pytest.raises(ParseError, match="out of range"):
            load_dataset(p, ClassVocabulary(("a", "b"), 1))

    def test_duplicate_scene_ids(self, tmp_path, scene):
        with pytest.raises(ValueError):
            save_dataset([scene, scene], tmp_path / "s.jsonl")


class TestEmbeddings:
    def test_two_vectors(self, tmp_path):
        rng = np.random.default_rng(1)
        emb = {ClassKey(0, "text"): rng.normal(size=512), ObjectKey("s0", 3, "image"): rng.normal(size=512)}
        save_embeddings(emb, tmp_path / "e.jsonl")
        got = load_embeddings(tmp_path / "e.jsonl")
        assert len(got) == 2
        for k, v in emb.items():
            np.testing.assert_array_equal(got[k], v)

    def test_mixed_dims(self, tmp_path):
        p = tmp_path / "e.jsonl"
        lines = [
            {"schema_version": 1, "key": {"class_id": 0, "modality": "text"}, "vector": [0.0] * 512},
            {"schema_version": 1, "key": {"class_id": 1, "modality": "text"}, "vector": [0.0] * 256},
        ]
        p.write_text("".join(json.dumps(x) + "\n" for x in lines))
        with pytest.raises(DimensionMismatch):
            load_embeddings(p)
        with pytest.raises(DimensionMismatch):
            save_embeddings({ClassKey(0, "text"): np.zeros(3), ClassKey(1, "text"): np.zeros(4)}, p)

    def test_unit_vectors_stay_unit(self, tmp_path):
        rng = np.random.default_rng(2)
        emb = {}
        for i in range(50):
            v = rng.normal(size=512)
            emb[ClassKey(i, "text")] = v / np.linalg.norm(v)
        save_embeddings(emb, tmp_path / "e.jsonl")
        for v in load_embeddings(tmp_path / "e.jsonl").values():
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12

    def test_unknown_modality(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text(json.dumps({"schema_version": 1, "key": {"class_id": 0, "modality": "audio"},
                                 "vector": [1.0]}) + "\n")
        with pytest.raises(ParseError, match="modality"):
            load_embeddings(p)


def test_predictions_roundtrip(tmp_path):
    preds = {"s0": [Prediction3D(Box3D(Point3(0, 0, 0), (1, 1, 1), 0.1), 3, 0.25)], "s1": []}
    save_predictions(preds, tmp_path / "p.jsonl")
    assert load_predictions(tmp_path / "p.jsonl") == preds
