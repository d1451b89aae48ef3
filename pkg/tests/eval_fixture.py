"""Hand-built three-scene evaluation fixture and its brute-force PR oracle."""

from fractions import Fraction

from ovdet3d.datamodel import ClassVocabulary, ObjectLabel, Prediction3D
from ovdet3d.evaluation import SceneEval
from ovdet3d.geometry import Box3D, Point3

VOCAB = ClassVocabulary(("chair", "table", "lamp", "sofa"), 2)


def cube(x, y=0.0):
    return Box3D(Point3(x, y, 0.5), (1.0, 1.0, 1.0))


def oracle_ap(flags, num_gt):
    """AP from explicit precision/recall points using exact fractions."""
    if num_gt == 0:
        return Fraction(0)
    points, tp = [], 0
    for k, f in enumerate(flags, 1):
        tp += f
        points.append((Fraction(tp, num_gt), Fraction(tp, k)))
    ap, prev = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == 0:
            continue
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap


# (scene, class, x of box, score, hand-decided TP?)
FIXTURE_GT = {
    "s1": [(0, 0.0), (0, 3.0), (2, 6.0)],
    "s2": [(2, 0.0), (3, 3.0)],
    "s3": [(0, 0.0)],
}
FIXTURE_PRED = [
    ("s1", 0, 0.0, 0.9, True),
    ("s1", 0, 0.5, 0.8, False),   # overlaps the already-claimed box: duplicate
    ("s1", 2, 6.8, 0.7, False),   # IoU 1/9 < 0.25
    ("s1", 0, 3.0, 0.3, True),
    ("s2", 2, 0.5, 0.75, True),   # IoU 1/3
    ("s2", 3, 10.0, 0.6, False),
    ("s2", 1, 20.0, 0.5, False),  # class without any ground truth
    ("s3", 0, 0.0, 0.8, True),    # same score as the s1 duplicate, ranks after it
    ("s3", 2, 0.0, 0.95, False),  # no lamp in s3
]


def fixture_scenes():
    return [
        SceneEval([ObjectLabel(cube(x), c) for c, x in FIXTURE_GT[sid]],
                  [Prediction3D(cube(x), c, s) for ps, c, x, s, _ in FIXTURE_PRED if ps == sid], sid)
        for sid in ("s1", "s2", "s3")
    ]


def brute_report():
    order = {"s1": 0, "s2": 1, "s3": 2}
    per_ap, per_ar, num_gt = {}, {}, {}
    classes = sorted({c for g in FIXTURE_GT.values() for c, _ in g} | {p[1] for p in FIXTURE_PRED})
    for c in classes:
        preds = [(k, p) for k, p in enumerate(FIXTURE_PRED) if p[1] == c]
        preds.sort(key=lambda kp: (-kp[1][3], order[kp[1][0]], kp[0]))
        flags = [p[4] for _, p in preds]
        n = sum(1 for g in FIXTURE_GT.values() for cc, _ in g if cc == c)
        num_gt[c] = n
        per_ap[c] = float(oracle_ap(flags, n))
        per_ar[c] = sum(flags) / n if n else 0.0
    with_gt = [c for c in classes if num_gt[c]]

    def mean(cs, d):
        return sum(d[c] for c in cs) / len(cs) if cs else 0.0

    novel = [c for c in with_gt if c >= 2]
    base = [c for c in with_gt if c < 2]
    return dict(per_class_ap=per_ap, per_class_ar=per_ar, num_gt=num_gt,
                map_novel=mean(novel, per_ap), map_base=mean(base, per_ap),
                mar_novel=mean(novel, per_ar), mar_base=mean(base, per_ar),
                avg_map=mean(with_gt, per_ap), avg_mar=mean(with_gt, per_ar))
