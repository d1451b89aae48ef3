"""Acceptance suite: one test per criterion, each at its stated tolerance and time budget.

Measured values are attached to the report and echoed by the summary hook
in conftest.py.
"""

import math
import time

import numpy as np
import pytest

from eval_fixture import VOCAB as EVAL_VOCAB
from eval_fixture import brute_report, fixture_scenes
from oracles import as_selection_set, brute_select_novel, mc_iou2d, mc_iou3d, random_selection_scene
from ovdet3d import alignment as al
from ovdet3d.cli import main
from ovdet3d.datamodel import ClassVocabulary
from ovdet3d.discovery import DEFAULT_BASE_DEDUP_IOU, DEFAULT_EPSILON, DiscoveryConfig, select_novel
from ovdet3d.evaluation import DEFAULT_IOU_THRESHOLD, EvalConfig, average_precision, evaluate
from ovdet3d.geometry import Box2D, Box3D, Point3, iou2d, iou3d
from ovdet3d.simgen import SimConfig, generate_dataset, run_discovery_rounds


def measured(request, text):
    request.node.user_properties.append(("measured", text))


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

FD_STEP = 1e-4
REL_TOL = 1e-6
MAG_FLOOR = 1e-8


def central(f, X, mask=None):
    out = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        if mask is not None and not mask[idx]:
            continue
        Y = X.copy()
        Y[idx] = X[idx] + FD_STEP
        up = f(Y)
        Y[idx] = X[idx] - FD_STEP
        out[idx] = (up - f(Y)) / (2 * FD_STEP)
    return out


def rel_error(a, n):
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = scale > MAG_FLOOR
    return float(np.max(np.abs(a - n)[keep] / scale[keep])) if np.any(keep) else 0.0


@pytest.mark.criterion("gradient suite: FD h=1e-4, rel err <= 1e-6, 100 batches, < 30 s")
def test_gradient_suite(request):
    t0 = time.perf_counter()
    worst = {"instance": 0.0, "class": 0.0, "scene": 0.0}
    for b in range(100):
        rng = np.random.default_rng([0, b])
        f2d = rng.normal(size=16)
        f3d = f2d + rng.uniform(10 * FD_STEP, 1.0, 16) * rng.choice([-1.0, 1.0], 16)
        _, g = al.loss_instance(f3d, f2d)
        worst["instance"] = max(worst["instance"], rel_error(g, central(lambda x: al.loss_instance(x, f2d)[0], f3d)))

        labels = rng.integers(0, 4, size=8)
        labels[1] = labels[0]
        mods = rng.choice(["point", "image", "text"], size=8)
        mods[0] = "point"
        X = rng.normal(size=(8, 16))

        def cls(Xv):
            return al.loss_class([al.LabeledFeature(x, int(c), str(m)) for x, c, m in zip(Xv, labels, mods)])

        mask = np.broadcast_to((mods == "point")[:, None], X.shape)
        worst["class"] = max(worst["class"], rel_error(cls(X).grads, central(lambda Xv: cls(Xv).loss, X, mask)))

        Z, T = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
        worst["scene"] = max(worst["scene"], rel_error(al.loss_scene(Z, T).grads,
                                                       central(lambda Zv: al.loss_scene(Zv, T).loss, Z)))
    elapsed = time.perf_counter() - t0
    measured(request, ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f", {elapsed:.1f} s")
    assert elapsed < 30
    for k, v in worst.items():
        assert v <= REL_TOL, f"{k}: max relative error {v:.3e}"


# ---------------------------------------------------------------------------
# PISE permutation invariance
# ---------------------------------------------------------------------------


@pytest.mark.criterion("PISE permutation invariance: 1000 triples bit-identical, < 5 s")
def test_pise_permutation_invariance(request):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for trial in range(1000):
        d_in, h, d_out = (int(v) for v in rng.integers(2, 33, 3))
        w = al.pise_init(d_in, h, d_out, seed=trial)
        X = rng.normal(size=(int(rng.integers(1, 13)), d_in))
        perm = rng.permutation(len(X))
        assert np.array_equal(al.pise_forward(X, w).vec, al.pise_forward(X[perm], w).vec)
    elapsed = time.perf_counter() - t0
    measured(request, f"{elapsed:.2f} s")
    assert elapsed < 5


# ---------------------------------------------------------------------------
# IoU oracles
# ---------------------------------------------------------------------------


@pytest.mark.criterion("IoU oracles: 2D within 5e-3, 3D within 1e-2 of 1e6-sample MC, < 2 min")
def test_iou_oracles(request):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst2 = worst3 = 0.0
    for _ in range(100):
        x0, y0 = rng.uniform(0, 10, 2)
        a = Box2D(x0, y0, x0 + rng.uniform(0.5, 5), y0 + rng.uniform(0.5, 5))
        x1, y1 = a.xmin + rng.uniform(-3, 3), a.ymin + rng.uniform(-3, 3)
        b = Box2D(x1, y1, x1 + rng.uniform(0.5, 5), y1 + rng.uniform(0.5, 5))
        worst2 = max(worst2, abs(iou2d(a, b) - mc_iou2d(a, b, 1_000_000, rng)))
    for _ in range(100):
        a = Box3D(Point3(*rng.uniform(-1, 1, 3)), tuple(rng.uniform(0.3, 2.0, 3)), rng.uniform(-math.pi, math.pi))
        b = Box3D(Point3(*(np.array(a.center) + rng.uniform(-0.8, 0.8, 3))), tuple(rng.uniform(0.3, 2.0, 3)),
                  rng.uniform(-math.pi, math.pi))
        worst3 = max(worst3, abs(iou3d(a, b) - mc_iou3d(a, b, 1_000_000, rng)))
    elapsed = time.perf_counter() - t0
    measured(request, f"2D {worst2:.1e}, 3D {worst3:.1e}, {elapsed:.1f} s")
    assert worst2 <= 5e-3 and worst3 <= 1e-2
    assert elapsed < 120


# ---------------------------------------------------------------------------
# Novel selection oracle
# ---------------------------------------------------------------------------


@pytest.mark.criterion("selection oracle: equals all-pairs reference on 1000 scenes, < 1 min")
def test_select_novel_oracle(request):
    vocab = ClassVocabulary(tuple(f"c{i}" for i in range(8)), 3)
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    selected = 0
    for _ in range(1000):
        s = random_selection_scene(rng, max_dets=20, max_props=20)
        got = as_selection_set(s, select_novel(s, vocab))
        assert got == brute_select_novel(s, vocab)
        selected += len(got)
    elapsed = time.perf_counter() - t0
    measured(request, f"{selected} selections, {elapsed:.1f} s")
    assert selected > 1000
    assert elapsed < 60


# ---------------------------------------------------------------------------
# Hand-computed losses
# ---------------------------------------------------------------------------


@pytest.mark.criterion("hand-computed losses: ln(1+e) and ln(1+e^-1) within 1e-9")
def test_hand_losses(request):
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    cls = al.loss_class([al.LabeledFeature(e1, 0), al.LabeledFeature(e2, 0, "text")], 1.0).loss
    scene = al.loss_scene(np.stack([e1, e2]), np.stack([e1, e2]), 1.0).loss
    measured(request, f"class {cls:.12f}, scene {scene:.12f}")
    assert abs(cls - math.log(1 + math.e)) <= 1e-9
    assert abs(scene - math.log(1 + math.exp(-1))) <= 1e-9


# ---------------------------------------------------------------------------
# Recall jump over discovery rounds
# ---------------------------------------------------------------------------


def _rounds_csv(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["rounds", "--rounds", "2", "--num-seeds", "20", "--out", str(out), *extra]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    return [float(r[1]) for r in rows]


@pytest.mark.criterion("recall jump: guided round beats baseline over 20 seeds; none without 2D, < 1 min")
def test_recall_jump(request, tmp_path):
    t0 = time.perf_counter()
    guided = _rounds_csv(tmp_path, "guided.csv")
    blind = _rounds_csv(tmp_path, "blind.csv", "--detector2d-recall", "0")
    elapsed = time.perf_counter() - t0
    measured(request, f"default {guided[0]:.3f} -> {guided[1]:.3f}, no 2D {blind[0]:.3f} -> {blind[1]:.3f}, "
                      f"{elapsed:.1f} s")
    assert guided[1] > guided[0]
    assert blind[1] <= blind[0]
    assert elapsed < 60


# ---------------------------------------------------------------------------
# Memory-bank hygiene
# ---------------------------------------------------------------------------


@pytest.mark.criterion("memory-bank hygiene: no entry with iou3d > 0.25 to a base label, 20 datasets")
def test_bank_hygiene(request):
    entries = 0
    for seed in range(20):
        cfg = SimConfig(seed=seed)
        _, scenes = generate_dataset(cfg)
        by_id = {s.scene_id: s for s in scenes}
        for rounds in (1, 2, 3):
            _, bank = run_discovery_rounds(scenes, cfg, rounds)
            for sid, objs in bank.entries.items():
                for o in objs:
                    entries += 1
                    for lab in by_id[sid].base_labels:
                        assert iou3d(o.box, lab.box) <= 0.25
    measured(request, f"{entries} entries checked")
    assert entries > 0


@pytest.mark.criterion("memory-bank hygiene: no entry with iou3d > 0.25 to a base label, 20 datasets")
def test_bank_hygiene_with_base_lookalikes():
    # proposals copied from base labels must never reach the bank, even when
    # a novel detection lands on them
    cfg = SimConfig(num_scenes=10, detector2d_recall=1.0, detector2d_jitter=0.0, proposal_noise=0.0,
                    proposal_recall=1.0, confusion_rate=1.0)
    vocab, scenes = generate_dataset(cfg)
    for s in scenes:
        for o in select_novel(s, vocab):
            assert all(iou3d(o.box, lab.box) <= 0.25 for lab in s.base_labels)


# ---------------------------------------------------------------------------
# Evaluation oracle
# ---------------------------------------------------------------------------


@pytest.mark.criterion("eval oracle: fixture equals brute force exactly; [TP, FP, TP] AP = 5/6")
def test_eval_oracle(request):
    rep = evaluate(fixture_scenes(), EVAL_VOCAB)
    for k, v in brute_report().items():
        assert getattr(rep, k) == v, k
    ap = average_precision([(0, 0), (1, None), (2, 1)], 2)
    measured(request, f"AP {ap!r}")
    assert abs(ap - 5 / 6) <= 1e-12


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------


@pytest.mark.criterion("constants: epsilon, temperatures, weights, warm-up, IoU, prompts")
def test_constants():
    assert DEFAULT_EPSILON == 0.75 and DiscoveryConfig().epsilon == 0.75
    assert DEFAULT_BASE_DEDUP_IOU == 0.25
    assert al.DEFAULT_TAU1 == 1.0 and al.DEFAULT_TAU2 == 1.0
    w = al.LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3) == (1.0, 1.0, 0.5)
    assert w.warmup_value == 0.02
    assert w.at(0) == (0.02, 0.02, 0.02) and w.at(10 ** 6) == (1.0, 1.0, 0.5)
    assert DEFAULT_IOU_THRESHOLD == 0.25 and EvalConfig().iou_threshold == 0.25
    assert al.class_prompt("sofa") == "A photo of sofa."
    assert al.scene_prompt(["sofa", "lamp"]) == "A room with sofa, lamp."
    assert al.nothing_prompt() == "A photo of nothing."
