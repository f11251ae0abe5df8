"""Experiment driver: configs, data preparation, SGD training, checkpoints,
evaluation and the branch / aggregation ablations."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .evaluation import (
    DEFAULT_KS, SUBTASKS, evaluate_subtask, longtail_csv, longtail_report, strata_from_counts,
)
from .graph import build_edge_dual_graph, build_primitive_graph
from .model import DualMPNNConfig, forward, init_params, joint_loss, merge_indices, scene_index
from .synthetic import (
    DetectorNoise, SceneSample, World, WorldSpec, generate_split, generate_world, read_dataset,
)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class DataError(ValueError):
    pass


LR_SCHEDULES = ("constant", "cosine")


def epoch_lr(base: float, schedule: str, epoch: int, epochs: int) -> float:
    """Learning rate for 1-based ``epoch``; cosine decays towards zero at
    the last epoch."""
    if schedule == "constant":
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / epochs))


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    n_train: int = 500
    n_val: int = 0
    n_test: int = 100
    model: DualMPNNConfig = field(default_factory=DualMPNNConfig)
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 8
    subtask: str = "sggen"
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/default"
    noise: DetectorNoise = field(default_factory=lambda: DetectorNoise(0.02, 0.1, 0.1))
    snapshot_epochs: list = field(default_factory=list)
    Ks: list = field(default_factory=lambda: list(DEFAULT_KS))
    train_data: str | None = None
    val_data: str | None = None
    test_data: str | None = None
    target_train_accuracy: float | None = None
    lr_schedule: str = "constant"
    grad_clip: float | None = None

    def __post_init__(self):
        # vocab and feature width always follow the world
        self.model = dataclasses.replace(
            self.model, d_o=self.world.d_o, n_obj_classes=self.world.n_obj_classes,
            n_rel_classes=self.world.n_rel_classes,
        )
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.target_train_accuracy is not None and not 0 < self.target_train_accuracy <= 1:
            raise ValueError("target_train_accuracy must lie in (0, 1]")
        if self.subtask not in SUBTASKS:
            raise ValueError(f"unknown subtask {self.subtask!r}")
        for path in (self.train_data, self.val_data, self.test_data):
            if path is not None and not Path(path).exists():
                raise DataError(f"missing data file {path}")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
            "model": self.model.to_dict(),
            "lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
            "subtask": self.subtask, "seeds": list(self.seeds), "out_dir": self.out_dir,
            "noise": dataclasses.asdict(self.noise),
            "snapshot_epochs": list(self.snapshot_epochs), "Ks": list(self.Ks),
            "train_data": self.train_data, "val_data": self.val_data, "test_data": self.test_data,
            "target_train_accuracy": self.target_train_accuracy,
            "lr_schedule": self.lr_schedule,
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "world" in d:
            d["world"] = WorldSpec.from_dict(d["world"])
        if "model" in d:
            base = DualMPNNConfig().to_dict()
            base.update(d["model"])
            d["model"] = DualMPNNConfig.from_dict(base)
        if "noise" in d:
            d["noise"] = DetectorNoise(**d["noise"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Split:
    scenes: list[SceneSample]
    parts: list
    obj_targets: list[np.ndarray]
    rel_targets: list[np.ndarray]


def relation_targets(scene: SceneSample, g) -> np.ndarray:
    """Predicate per directional edge in tensor order; 0 is background."""
    gt = {(s, o): p for s, o, p in scene.gt_triplets}
    return np.array([gt.get(e, 0) for e in g.directed_edges()], dtype=np.int64)


def prepare_split(scenes: list[SceneSample]) -> Split:
    parts, obj_t, rel_t = [], [], []
    for sc in scenes:
        g = build_primitive_graph(sc.detections)
        dg = build_edge_dual_graph(g) if g.edges else None
        parts.append(scene_index(g, dg))
        obj_t.append(np.array([d.label for d in g.nodes], dtype=np.int64))
        rel_t.append(relation_targets(sc, g))
    return Split(scenes, parts, obj_t, rel_t)


def load_data(config: ExperimentConfig, seed: int) -> tuple[World, dict[str, list[SceneSample]]]:
    """World plus train/val/test scenes, from files when configured, else
    generated from the world spec and ``seed``."""
    world = generate_world(config.world)
    data = {}
    for split, n, path in (("train", config.n_train, config.train_data),
                           ("val", config.n_val, config.val_data),
                           ("test", config.n_test, config.test_data)):
        if path:
            _, scenes = read_dataset(path)
        else:
            scenes = generate_split(world, n, seed, split)
        data[split] = scenes
    return world, data


def batch_loss(config: DualMPNNConfig, params: ParamStore, split: Split, ids):
    """Joint loss over a mini-batch: each scene's object and relation means
    enter with equal weight."""
    parts = [split.parts[i] for i in ids]
    index = merge_indices(parts)
    obj_w = np.concatenate([np.full(p.n_nodes, 1.0 / (len(ids) * p.n_nodes)) for p in parts])
    with_rel = [p for p in parts if p.n_dir]
    rel_w = np.concatenate(
        [np.full(p.n_dir, 1.0 / (len(with_rel) * p.n_dir)) for p in with_rel]
    ) if with_rel else np.zeros(0)
    state = forward(index, config, params)
    obj_t = np.concatenate([split.obj_targets[i] for i in ids])
    rel_t = np.concatenate([split.rel_targets[i] for i in ids])
    return joint_loss(state.u_hat, state.p_hat, obj_t, rel_t, obj_w, rel_w)


def relation_accuracy(config: DualMPNNConfig, params: ParamStore, split: Split) -> float:
    """Fraction of directional edges (background included) whose argmax
    predicate is correct."""
    with ad.no_grad():
        state = forward(merge_indices(split.parts), config, params)
    if state.p_hat is None:
        return 1.0
    target = np.concatenate(split.rel_targets)
    return float(np.mean(state.p_hat.data.argmax(axis=1) == target))


def split_loss(config, params, split: Split) -> float:
    with ad.no_grad():
        _, _, L = batch_loss(config, params, split, list(range(len(split.scenes))))
    return L.item()


def predicate_counts(scenes, n_rel_classes: int) -> dict[int, int]:
    counts = {p: 0 for p in range(1, n_rel_classes)}
    for sc in scenes:
        for _, _, p in sc.gt_triplets:
            counts[p] += 1
    return counts


@dataclass
class TrainResult:
    params: ParamStore
    losses: list[dict]
    val_losses: list[float]
    best_epoch: int
    snapshots: dict
    train_counts: dict


def train_model(config: ExperimentConfig, seed: int, world: World,
                data: dict[str, list[SceneSample]]) -> TrainResult:
    """Mini-batch SGD on the joint loss; single-threaded and deterministic in
    ``seed``.  ``lr=0`` runs the loop without updating anything.  With
    ``target_train_accuracy`` set, training stops after the first epoch whose
    train relation accuracy reaches it."""
    mcfg = config.model
    params = init_params(mcfg, seed)
    train = prepare_split(data["train"])
    if not train.scenes:
        raise DataError("empty training set")
    val = prepare_split(data["val"]) if data.get("val") else None
    test_scenes = data.get("test") or []
    counts = predicate_counts(train.scenes, mcfg.n_rel_classes)
    strata = strata_from_counts(counts)
    snap_at = set(config.snapshot_epochs)

    losses, val_losses, snapshots = [], [], {}
    best, best_epoch, best_state = math.inf, config.epochs, None
    n = len(train.scenes)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        lr = epoch_lr(config.lr, config.lr_schedule, epoch, config.epochs)
        tot = np.zeros(3)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            ids = order[start:start + config.batch_size].tolist()
            l_obj, l_rel, L = batch_loss(mcfg, params, train, ids)
            if not math.isfinite(L.item()):
                raise NumericalError(f"loss became non-finite at epoch {epoch}")
            if lr > 0:
                ad.backward(L)
                if config.grad_clip is not None:
                    ad.clip_grad_norm(params, config.grad_clip)
                ad.sgd_step(params, lr)
            tot += (l_obj.item(), l_rel.item(), L.item())
            n_batches += 1
        tot /= n_batches
        losses.append({"epoch": epoch, "L_obj": tot[0], "L_rel": tot[1], "L": tot[2]})
        log.info("epoch %d  L_obj %.4f  L_rel %.4f  L %.4f", epoch, *tot)
        if val is not None:
            vl = split_loss(mcfg, params, val)
            val_losses.append(vl)
            if vl < best:
                best, best_epoch = vl, epoch
                best_state = {k: t.data.copy() for k, t in params}
        if epoch in snap_at and test_scenes:
            rep = evaluate_subtask(mcfg, params, test_scenes, config.subtask, config.noise,
                                   world, seed=seed, Ks=config.Ks, strata=strata)
            snapshots[epoch] = rep.to_dict()
        if config.target_train_accuracy is not None:
            if relation_accuracy(mcfg, params, train) >= config.target_train_accuracy:
                log.info("train relation accuracy target reached at epoch %d", epoch)
                break
    if best_state is not None:
        for k, t in params:
            t.data = best_state[k]
    return TrainResult(params, losses, val_losses, best_epoch, snapshots, counts)


def checkpoint_doc(config: ExperimentConfig, result: TrainResult, seed: int) -> dict:
    doc = result.params.to_dict()
    doc["seed"] = seed
    doc["config"] = config.model.to_dict()
    doc["world"] = config.world.to_dict()
    doc["noise"] = dataclasses.asdict(config.noise)
    doc["train_predicate_counts"] = {str(k): v for k, v in result.train_counts.items()}
    return doc


def load_checkpoint(path) -> tuple[DualMPNNConfig, ParamStore, dict]:
    doc = json.loads(Path(path).read_text())
    cfg = DualMPNNConfig.from_dict(doc["config"])
    params = init_params(cfg, doc.get("seed", 0))
    params.load_dict(doc)
    return cfg, params, doc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_training(config: ExperimentConfig, seed: int | None = None, out_dir=None) -> dict:
    """Train, evaluate every subtask on the test split and write the run's
    artifacts under ``out_dir``.  Returns the run record."""
    seed = config.seeds[0] if seed is None else seed
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    world, data = load_data(config, seed)
    result = train_model(config, seed, world, data)
    strata = strata_from_counts(result.train_counts)
    reports = {}
    if data["test"]:
        for sub in SUBTASKS:
            rep = evaluate_subtask(config.model, result.params, data["test"], sub, config.noise,
                                   world, seed=seed, Ks=config.Ks, strata=strata)
            reports[sub] = rep.to_dict()
            if sub == config.subtask:
                main = rep
        (out / "longtail.csv").write_text(longtail_csv(longtail_report(main, strata)))
    ckpt = out / "checkpoint.json"
    ckpt.write_text(json.dumps(checkpoint_doc(config, result, seed), sort_keys=True))
    (out / "config.json").write_text(_dump(config.to_dict()))
    (out / "report.json").write_text(_dump(reports))
    record = {
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "seed": seed,
        "losses": result.losses,
        "val_losses": result.val_losses,
        "best_epoch": result.best_epoch,
        "reports": reports,
        "snapshots": {str(k): v for k, v in result.snapshots.items()},
        "wall_time": time.perf_counter() - t0,
        "checkpoint": str(ckpt),
    }
    (out / "runrecord.json").write_text(_dump(record))
    return record


# -- ablations -------------------------------------------------------------

ABLATION_VARIANTS = {
    "branches": {
        "object-only": {"enable_object_branch": True, "enable_relation_branch": False},
        "relation-only": {"enable_object_branch": False, "enable_relation_branch": True},
        "both": {"enable_object_branch": True, "enable_relation_branch": True},
    },
    "aggregation": {
        "mean": {"aggregation": "mean"},
        "multiply": {"aggregation": "multiply"},
        "concat": {"aggregation": "concat"},
    },
}


def variant_config(config: ExperimentConfig, axis: str, variant: str) -> ExperimentConfig:
    cfg = copy.deepcopy(config)
    cfg.model = dataclasses.replace(cfg.model, **ABLATION_VARIANTS[axis][variant])
    return cfg


def run_variant(config: ExperimentConfig, seed: int) -> dict:
    """Train one configuration on one seed and return its test report for the
    configured subtask, plus any snapshot reports."""
    world, data = load_data(config, seed)
    result = train_model(config, seed, world, data)
    strata = strata_from_counts(result.train_counts)
    rep = evaluate_subtask(config.model, result.params, data["test"], config.subtask,
                           config.noise, world, seed=seed, Ks=config.Ks, strata=strata)
    return {"report": rep.to_dict(), "snapshots": result.snapshots,
            "final_loss": result.losses[-1]["L"] if result.losses else None}


def _run_job(args):
    cfg_dict, seed = args
    return run_variant(ExperimentConfig.from_dict(cfg_dict), seed)


def run_ablation(config: ExperimentConfig, axis: str, jobs: int = 1) -> dict:
    """Train every variant of ``axis`` on every seed and report per-variant
    medians of mR@K for the configured subtask."""
    if axis not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation axis {axis!r}")
    if len(config.seeds) < 3:
        warnings.warn("ablation medians over fewer than 3 seeds", stacklevel=2)
    jobs_list = [
        (name, seed, variant_config(config, axis, name).to_dict())
        for name in ABLATION_VARIANTS[axis] for seed in config.seeds
    ]
    payload = [(cfg, seed) for _, seed, cfg in jobs_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, payload))
    else:
        results = [_run_job(p) for p in payload]
    rows = []
    for name in ABLATION_VARIANTS[axis]:
        runs = [r for (n, _, _), r in zip(jobs_list, results) if n == name]
        row = {"variant": name, "per_seed": {}}
        for K in config.Ks:
            vals = [r["report"]["mean_recall_at"][str(K)] for r in runs]
            row[f"mR@{K}"] = statistics.median(vals)
            row["per_seed"][f"mR@{K}"] = vals
        rows.append(row)
    return {"axis": axis, "subtask": config.subtask, "seeds": list(config.seeds), "rows": rows}


def format_table(result: dict) -> str:
    ks = [k for k in result["rows"][0] if k.startswith("mR@")]
    lines = ["variant".ljust(14) + "".join(k.rjust(10) for k in ks)]
    for row in result["rows"]:
        lines.append(row["variant"].ljust(14) + "".join(f"{100 * row[k]:10.1f}" for k in ks))
    return "\n".join(lines)
