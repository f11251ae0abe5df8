"""``edgesgg`` command line: gen, transform, train, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from .autodiff import TensorError
from .evaluation import (
    SUBTASKS, EvaluationError, evaluate_subtask, longtail_csv, longtail_report, strata_from_counts,
)
from .graph import GraphError, build_edge_dual_graph, scene_from_json
from .harness import (
    ABLATION_VARIANTS, DataError, ExperimentConfig, NumericalError, format_table, load_checkpoint,
    run_ablation, run_training,
)
from .synthetic import DetectorNoise, WorldError, WorldSpec, generate_split, generate_world, read_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("edgesgg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc


def cmd_gen(args) -> int:
    spec = WorldSpec.from_dict(_read_json(args.spec))
    world = generate_world(spec)
    seed = spec.seed if args.seed is None else args.seed
    scenes = generate_split(world, args.n, seed, args.split)
    write_dataset(scenes, args.out, world.spec)
    n_trip = sum(len(s.gt_triplets) for s in scenes)
    print(json.dumps({"scenes": len(scenes), "triplets": n_trip, "out": str(args.out)}))
    return EXIT_OK


def cmd_transform(args) -> int:
    doc = _read_json(args.inp)
    try:
        g = scene_from_json(doc)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed scene: {exc}") from exc
    dg = build_edge_dual_graph(g)
    Path(args.out).write_text(json.dumps(dg.to_dict(), sort_keys=True) + "\n")
    if args.report == "counts":
        print(json.dumps({"dual_nodes": len(dg.dual_nodes), "dual_edges": len(dg.dual_edges)}))
    return EXIT_OK


def _load_config(args) -> ExperimentConfig:
    doc = _read_json(args.config)
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from exc
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seeds = [args.seed] + [s for s in cfg.seeds if s != args.seed]
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    record = run_training(cfg, seed=cfg.seeds[0], out_dir=cfg.out_dir)
    last = record["losses"][-1] if record["losses"] else {}
    print(json.dumps({"out": cfg.out_dir, "final_loss": last.get("L"),
                      "best_epoch": record["best_epoch"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params, doc = load_checkpoint(args.ckpt)
    header, scenes = read_dataset(args.data)
    if not scenes:
        raise DataError(f"{args.data}: empty dataset")
    for key in ("n_obj_classes", "n_rel_classes"):
        if key in header and header[key] != getattr(cfg, key):
            raise DataError(f"vocabulary mismatch on {key}: dataset {header[key]}, "
                            f"checkpoint {getattr(cfg, key)}")
    for sc in scenes:
        for d in sc.detections:
            if not 0 <= d.label < cfg.n_obj_classes or len(d.feature) != cfg.d_o:
                raise DataError("dataset objects do not fit the checkpoint's vocabulary")
        for _, _, p in sc.gt_triplets:
            if not 1 <= p < cfg.n_rel_classes:
                raise DataError(f"predicate {p} outside the checkpoint's vocabulary")
    world = generate_world(WorldSpec.from_dict(doc["world"])) if "world" in doc else None
    noise = DetectorNoise(**doc["noise"]) if "noise" in doc else DetectorNoise()
    counts = {int(k): v for k, v in doc.get("train_predicate_counts", {}).items()}
    if not counts:
        counts = {p: 0 for p in range(1, cfg.n_rel_classes)}
        for sc in scenes:
            for _, _, p in sc.gt_triplets:
                counts[p] += 1
    strata = strata_from_counts(counts)
    report = evaluate_subtask(cfg, params, scenes, args.subtask, noise, world,
                              seed=args.seed, strata=strata)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out.parent / "longtail.csv").write_text(longtail_csv(longtail_report(report, strata)))
    print(json.dumps({"subtask": args.subtask,
                      "mean_recall_at": report.to_dict()["mean_recall_at"],
                      "recall_at": report.to_dict()["recall_at"]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = run_ablation(cfg, args.axis, jobs=args.jobs)
    for w in caught:
        log.warning("%s", w.message)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.json").write_text(json.dumps(result, indent=2) + "\n")
    print(format_table(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgesgg", description="Edge dual scene graph generation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="world spec JSON")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("transform", help="edge dual of a scene graph")
    t.add_argument("--in", dest="inp", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--report", choices=("counts", "none"), default="counts")
    t.set_defaults(func=cmd_transform)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--jobs", type=int, default=1)
        s.set_defaults(func=fn)
        if name == "ablate":
            s.add_argument("--axis", choices=sorted(ABLATION_VARIANTS), required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--subtask", choices=SUBTASKS, default="sggen")
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    level = os.environ.get("EDGESGG_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"edgesgg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"edgesgg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GraphError, WorldError, EvaluationError, TensorError,
            ValueError, KeyError, OSError) as exc:
        print(f"edgesgg: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
