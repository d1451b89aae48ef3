"""Command-line entry point: simulate | discover | align-check | eval | rounds.

Every flag can also come from ``--config FILE.json`` whose keys are the
flag names (kebab or snake case); explicit flags win over the file.
Exit status: 0 success, 1 data error or failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import alignment as al
from .datamodel import (
    SCHEMA_VERSION,
    ClassKey,
    ObjectKey,
    Prediction3D,
    _encode,
    _write_lines,
    load_dataset,
    load_predictions,
    load_vocab,
    save_dataset,
    save_embeddings,
    save_predictions,
    save_vocab,
)
from .discovery import (
    DEFAULT_BASE_DEDUP_IOU,
    DEFAULT_EPSILON,
    DEFAULT_SEED_DIMS,
    DiscoveryConfig,
    MemoryBank,
    init_query_seeds,
    load_bank,
    save_bank,
    select_novel,
    update_memory_bank,
)
from .errors import Ovdet3dError
from .evaluation import DEFAULT_IOU_THRESHOLD, EvalConfig, SceneEval, evaluate
from .gradcheck import DEFAULT_FLOOR, DEFAULT_STEP, central_difference, max_relative_error
from .simgen import SimConfig, average_rounds, class_anchors, generate_dataset, simulate_embedder

logger = logging.getLogger("ovdet3d")

_SIM_DEFAULTS = SimConfig()


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument definitions
# ---------------------------------------------------------------------------


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    d = _SIM_DEFAULTS
    g = p.add_argument_group("simulator")
    g.add_argument("--num-scenes", type=int, default=d.num_scenes)
    g.add_argument("--objects-min", type=int, default=d.objects_per_scene[0])
    g.add_argument("--objects-max", type=int, default=d.objects_per_scene[1])
    g.add_argument("--class-count", type=int, default=d.class_count)
    g.add_argument("--base-count", type=int, default=d.base_count)
    g.add_argument("--points-per-object", type=int, default=d.points_per_object)
    g.add_argument("--clutter-points", type=int, default=d.clutter_points)
    g.add_argument("--detector2d-recall", type=float, default=d.detector2d_recall)
    g.add_argument("--detector2d-jitter", type=float, default=d.detector2d_jitter, help="px sigma")
    g.add_argument("--confusion-rate", type=float, default=d.confusion_rate)
    g.add_argument("--proposal-noise", type=float, default=d.proposal_noise, help="m sigma")
    g.add_argument("--proposal-recall", type=float, default=d.proposal_recall)
    g.add_argument("--spurious-proposals", type=int, default=d.spurious_proposals)
    g.add_argument("--seed-boost", type=float, default=d.seed_boost,
                   help="recall added for GT near a lifted query seed")
    g.add_argument("--embed-dim", type=int, default=d.embed_dim)
    g.add_argument("--embed-noise", type=float, default=d.embed_noise)


def _add_discovery_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("discovery")
    g.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON,
                   help="2D IoU gate for accepting a proposal")
    g.add_argument("--base-dedup-iou", type=float, default=DEFAULT_BASE_DEDUP_IOU,
                   help="drop discoveries overlapping a base label above this 3D IoU")
    g.add_argument("--seed-dims", type=int, default=DEFAULT_SEED_DIMS,
                   help="query seed position-encoding width (multiple of 6)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="ovdet3d",
        description="Image-guided open-vocabulary 3D detection toolkit.",
        formatter_class=fmt,
    )
    parser.add_argument("--config", type=Path, help="JSON file of flag values")
    parser.add_argument("--seed", type=int, default=0, help="single source of randomness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--oracle-predictions", action="store_true",
                   help="also write predictions.jsonl copying the ground truth")
    _add_sim_flags(p)

    p = sub.add_parser("discover", help="run one discovery round and write the memory bank",
                       formatter_class=fmt)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--bank-in", type=Path, help="previous bank; only its round counter is kept")
    p.add_argument("--out", type=Path, required=True, help="bank.jsonl to write")
    p.add_argument("--seeds-out", type=Path, help="optional seeds.jsonl")
    p.add_argument("--diagnostics", type=Path, help="write diagnostics JSON here instead of stdout")
    _add_discovery_flags(p)

    p = sub.add_parser("align-check", help="alignment losses and finite-difference gradient check",
                       formatter_class=fmt)
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-6, help="max relative gradient error")
    p.add_argument("--fd-step", type=float, default=DEFAULT_STEP)
    p.add_argument("--fd-floor", type=float, default=DEFAULT_FLOOR,
                   help="components below this magnitude are not compared")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--batch-features", type=int, default=8)
    p.add_argument("--batch-scenes", type=int, default=4)
    p.add_argument("--tau1", type=float, default=al.DEFAULT_TAU1, help="class-level temperature")
    p.add_argument("--tau2", type=float, default=al.DEFAULT_TAU2, help="scene-level temperature")
    w = al.LossWeights()
    p.add_argument("--lambda1", type=float, default=w.lambda1, help="instance weight")
    p.add_argument("--lambda2", type=float, default=w.lambda2, help="class weight")
    p.add_argument("--lambda3", type=float, default=w.lambda3, help="scene weight")
    p.add_argument("--warmup-value", type=float, default=w.warmup_value,
                   help="all weights during warm-up")
    p.add_argument("--warmup-steps", type=int, default=w.warmup_steps)
    p.add_argument("--step", type=int, default=w.warmup_steps, help="schedule step for the total loss")
    p.add_argument("--l-box", type=float, default=0.0, help="externally supplied box loss")
    p.add_argument("--out", type=Path, help="write report JSON here instead of stdout")

    p = sub.add_parser("eval", help="mAP/mAR of predictions against ground truth", formatter_class=fmt)
    p.add_argument("--scenes", type=Path, required=True, help="scenes.jsonl with gt_all")
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--iou-threshold", type=float, default=DEFAULT_IOU_THRESHOLD,
                   help="3D IoU needed for a true positive")
    p.add_argument("--json-out", type=Path)
    p.add_argument("--csv-out", type=Path)

    p = sub.add_parser("rounds", help="recall over discovery rounds (CSV)", formatter_class=fmt)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--discovery-period", type=int, default=1,
                   help="run discovery every N rounds (no published default)")
    p.add_argument("--num-seeds", type=int, default=1,
                   help="average over seeds seed .. seed+N-1")
    p.add_argument("--out", type=Path, help="CSV path; stdout when omitted")
    _add_sim_flags(p)
    _add_discovery_flags(p)
    parser.commands = sub.choices
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, rest = pre.parse_known_args(argv)
    command = next((tok for tok in rest if tok in parser.commands), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    try:
        with open(known.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {known.config}: {exc}")
    if not isinstance(overrides, dict):
        parser.error("config file must hold a JSON object")
    sub = parser.commands[command]
    top = {a.dest: a for a in parser._actions}
    local = {a.dest: a for a in sub._actions}
    top_vals, sub_vals = {}, {}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        action = local.get(dest) or top.get(dest)
        if action is None or dest in ("command", "config", "help"):
            parser.error(f"unknown config key {key!r} for command {command}")
        if action.type is not None and value is not None:
            try:
                value = action.type(value)
            except (TypeError, ValueError):
                parser.error(f"config key {key!r}: invalid value {value!r}")
        action.required = False
        (sub_vals if dest in local else top_vals)[dest] = value
    # file values become defaults, so explicit flags still take precedence
    parser.set_defaults(**top_vals)
    sub.set_defaults(**sub_vals)
    return parser.parse_args(argv)


def _sim_config(args) -> SimConfig:
    return SimConfig(
        num_scenes=args.num_scenes,
        objects_per_scene=(args.objects_min, args.objects_max),
        class_count=args.class_count,
        base_count=args.base_count,
        points_per_object=args.points_per_object,
        clutter_points=args.clutter_points,
        detector2d_recall=args.detector2d_recall,
        detector2d_jitter=args.detector2d_jitter,
        confusion_rate=args.confusion_rate,
        proposal_noise=args.proposal_noise,
        proposal_recall=args.proposal_recall,
        spurious_proposals=args.spurious_proposals,
        seed_boost=args.seed_boost,
        embed_dim=args.embed_dim,
        embed_noise=args.embed_noise,
        seed=args.seed,
    )


def _disc_config(args) -> DiscoveryConfig:
    return DiscoveryConfig(args.epsilon, args.base_dedup_iou, args.seed_dims)


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise UsageError(f"{what} {path} does not exist")


def _require_out(path: Path | None) -> None:
    if path is None:
        return
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out: Path = args.out_dir
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    cfg = _sim_config(args)
    out.mkdir(parents=True, exist_ok=True)
    vocab, scenes = generate_dataset(cfg)
    save_vocab(vocab, out / "vocab.json")
    save_dataset(scenes, out / "scenes.jsonl")

    anchors = class_anchors(cfg)
    emb = {ClassKey(c, "text"): simulate_embedder(c, "text", cfg, anchors=anchors) for c in range(len(vocab))}
    for s in scenes:
        for k, obj in enumerate(s.gt_all):
            for modality in ("image", "point"):
                emb[ObjectKey(s.scene_id, k, modality)] = simulate_embedder(
                    obj.class_id, modality, cfg, instance=k, anchors=anchors)
    save_embeddings(emb, out / "embeddings.jsonl")
    if args.oracle_predictions:
        save_predictions({s.scene_id: [Prediction3D(o.box, o.class_id, 1.0) for o in s.gt_all]
                          for s in scenes}, out / "predictions.jsonl")
    logger.info("wrote %d scenes to %s", len(scenes), out)
    return 0


def cmd_discover(args) -> int:
    _require_file(args.scenes, "scenes file")
    _require_file(args.vocab, "vocab file")
    if args.bank_in is not None:
        _require_file(args.bank_in, "bank file")
    for p in (args.out, args.seeds_out, args.diagnostics):
        _require_out(p)
    cfg = _disc_config(args)
    vocab = load_vocab(args.vocab)
    scenes = load_dataset(args.scenes, vocab)
    prior = load_bank(args.bank_in) if args.bank_in is not None else MemoryBank()

    per_scene, seed_lines = {}, []
    n_seeds = n_skip = 0
    per_class = Counter()
    for s in scenes:
        seeds, skipped = init_query_seeds(s, cfg)
        n_seeds += len(seeds)
        n_skip += skipped
        for q in seeds:
            seed_lines.append(_encode({
                "schema_version": SCHEMA_VERSION, "scene_id": s.scene_id,
                "detection_index": q.detection_index, "point": list(q.point),
                "encoding": q.encoding.tolist(),
            }))
        found = select_novel(s, vocab, cfg)
        if found:
            per_scene[s.scene_id] = found
        per_class.update(vocab.names[o.class_id] for o in found)
    bank = update_memory_bank(prior, per_scene)
    save_bank(bank, args.out)
    if args.seeds_out is not None:
        _write_lines(args.seeds_out, seed_lines)
    diag = {
        "round": bank.round,
        "scenes": len(scenes),
        "seeds_emitted": n_seeds,
        "seed_skips": n_skip,
        "selected_total": len(bank),
        "selected_per_class": {vocab.names[c]: per_class[vocab.names[c]]
                               for c in vocab.novel_ids if per_class[vocab.names[c]]},
    }
    _emit(json.dumps(diag, indent=2) + "\n", args.diagnostics)
    return 0


def align_check(seed: int = 0, batches: int = 100, dim: int = 16, batch_features: int = 8,
                batch_scenes: int = 4, tau1: float = al.DEFAULT_TAU1, tau2: float = al.DEFAULT_TAU2,
                h: float = DEFAULT_STEP, floor: float = DEFAULT_FLOOR,
                weights: al.LossWeights = al.LossWeights(), step: int = 400, l_box: float = 0.0) -> dict:
    """Evaluate every alignment loss on seeded random batches and finite-difference its gradient.

    Batches: every feature row is an independent standard Gaussian vector
    in the given dimension; batch b of seed s uses the stream [s, b].
    """
    t0 = time.perf_counter()
    n_classes = 4
    worst = {"instance": 0.0, "class": 0.0, "scene": 0.0}
    sums = {"instance": 0.0, "class": 0.0, "scene": 0.0}
    for b in range(batches):
        rng = np.random.default_rng([seed, b])

        # instance level: keep every component clear of the |x| kink by more than h
        f2d = rng.normal(size=dim)
        delta = rng.uniform(10 * h, 1.0, size=dim) * rng.choice([-1.0, 1.0], size=dim)
        f3d = f2d + delta
        loss, g = al.loss_instance(f3d, f2d)
        num = central_difference(lambda x: al.loss_instance(x, f2d)[0], f3d, h)
        worst["instance"] = max(worst["instance"], max_relative_error(g, num, floor))
        sums["instance"] += loss

        # class level
        labels = rng.integers(0, n_classes, size=batch_features)
        labels[1] = labels[0]  # at least one positive pair
        mods = rng.choice(["point", "image", "text"], size=batch_features)
        mods[0] = "point"
        X = rng.normal(size=(batch_features, dim))

        def class_loss(Xv):
            return al.loss_class([al.LabeledFeature(x, int(c), str(m))
                                  for x, c, m in zip(Xv, labels, mods)], tau1).loss

        res = al.loss_class([al.LabeledFeature(x, int(c), str(m)) for x, c, m in zip(X, labels, mods)], tau1)
        mask = np.broadcast_to((mods == "point")[:, None], X.shape)
        num = central_difference(class_loss, X, h, mask=mask)
        worst["class"] = max(worst["class"], max_relative_error(res.grads, num, floor))
        sums["class"] += res.loss

        # scene level
        Z = rng.normal(size=(batch_scenes, dim))
        T = rng.normal(size=(batch_scenes, dim))
        sres = al.loss_scene(Z, T, tau2)
        num = central_difference(lambda Zv: al.loss_scene(Zv, T, tau2).loss, Z, h)
        worst["scene"] = max(worst["scene"], max_relative_error(sres.grads, num, floor))
        sums["scene"] += sres.loss

    means = {k: v / max(batches, 1) for k, v in sums.items()}
    total = al.loss_total(l_box, means["instance"], means["class"], means["scene"], weights, step)
    report = {
        "batches": batches,
        "fd_step": h,
        "mean_loss": means,
        "loss_total": total,
        "lambdas": list(weights.at(step)),
        "step": step,
        "max_relative_error": worst,
    }
    # timing goes to the log so repeated runs write identical reports
    logger.info("align-check: %d batches in %.2f s", batches, time.perf_counter() - t0)
    return report


def cmd_align_check(args) -> int:
    _require_out(args.out)
    if args.batches < 1:
        raise UsageError("--batches must be >= 1")
    weights = al.LossWeights(args.lambda1, args.lambda2, args.lambda3, args.warmup_steps, args.warmup_value)
    report = align_check(args.seed, args.batches, args.dim, args.batch_features, args.batch_scenes,
                         args.tau1, args.tau2, args.fd_step, args.fd_floor, weights, args.step, args.l_box)
    report["tolerance"] = args.tolerance
    report["passed"] = all(v <= args.tolerance for v in report["max_relative_error"].values())
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return 0 if report["passed"] else 1


def cmd_eval(args) -> int:
    _require_file(args.scenes, "scenes file")
    _require_file(args.vocab, "vocab file")
    _require_file(args.predictions, "predictions file")
    _require_out(args.json_out)
    _require_out(args.csv_out)
    cfg = EvalConfig(args.iou_threshold)
    vocab = load_vocab(args.vocab)
    scenes = load_dataset(args.scenes, vocab)
    preds = load_predictions(args.predictions)
    ids = {s.scene_id for s in scenes}
    unknown = sorted(set(preds) - ids)
    if unknown:
        raise ValueError(f"predictions reference unknown scenes: {unknown[:5]}")
    report = evaluate([SceneEval(s.gt_all, preds.get(s.scene_id, []), s.scene_id) for s in scenes], vocab, cfg)
    if args.csv_out is not None:
        _emit(report.to_csv(vocab), args.csv_out)
    _emit(report.to_json(vocab), args.json_out)
    return 0


def rounds_csv(stats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "novel_recall", "base_recall"])
    for s in stats:
        w.writerow([s.round, repr(s.novel_recall), repr(s.base_recall)])
    return buf.getvalue()


def cmd_rounds(args) -> int:
    _require_out(args.out)
    if args.rounds < 1 or args.discovery_period < 1 or args.num_seeds < 1:
        raise UsageError("--rounds, --discovery-period and --num-seeds must be >= 1")
    cfg = _sim_config(args)
    stats = average_rounds(cfg, args.rounds, range(args.seed, args.seed + args.num_seeds),
                           _disc_config(args), args.discovery_period)
    _emit(rounds_csv(stats), args.out)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "discover": cmd_discover,
    "align-check": cmd_align_check,
    "eval": cmd_eval,
    "rounds": cmd_rounds,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ovdet3d: error: {exc}", file=sys.stderr)
        return 2
    except (Ovdet3dError, ValueError, OSError) as exc:
        print(f"ovdet3d: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
