import json
import subprocess
import sys

import numpy as np
import pytest

from edgesgg.cli import main
from edgesgg.evaluation import Triplet
from edgesgg.graph import Detection, build_primitive_graph
from oracles import mean_recall_oracle


def scene_file(tmp_path, n, name="scene.json"):
    dets = [Detection(i, (float(i), 1.0), (0.05 * i, 0.1, 0.05 * i + 0.2, 0.5), label=0) for i in range(n)]
    path = tmp_path / name
    path.write_text(json.dumps(build_primitive_graph(dets).to_dict()))
    return path


def small_config(tmp_path, **kw):
    cfg = {"world": {"d_o": 8, "seed": 1}, "n_train": 10, "n_test": 8, "model": {"d_r": 8},
           "lr": 0.05, "epochs": 2, "batch_size": 4, "out_dir": str(tmp_path / "run")}
    cfg.update(kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestTransform:
    @pytest.mark.parametrize("n,counts", [(4, (6, 12)), (2, (1, 0)), (5, (10, 30))])
    def test_counts(self, tmp_path, capsys, n, counts):
        out = tmp_path / "dual.json"
        assert main(["transform", "--in", str(scene_file(tmp_path, n)), "--out", str(out)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert (report["dual_nodes"], report["dual_edges"]) == counts
        assert len(json.loads(out.read_text())["dual_edges"]) == counts[1]

    def test_malformed(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert main(["transform", "--in", str(bad), "--out", str(tmp_path / "o.json")]) == 2
        bad.write_text(json.dumps({"nodes": [{"id": 0}]}))
        assert main(["transform", "--in", str(bad), "--out", str(tmp_path / "o.json")]) == 2

    def test_single_node_has_nothing_to_dualize(self, tmp_path):
        assert main(["transform", "--in", str(scene_file(tmp_path, 1)),
                     "--out", str(tmp_path / "o.json")]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_gen_and_eval(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"d_o": 8, "seed": 1}))
    data = tmp_path / "test.jsonl"
    assert main(["gen", "--spec", str(spec), "--n", "20", "--out", str(data), "--split", "test"]) == 0
    assert json.loads(capsys.readouterr().out)["scenes"] == 20

    cfg = small_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()
    run = tmp_path / "run"
    for name in ("config.json", "checkpoint.json", "runrecord.json", "report.json", "longtail.csv"):
        assert (run / name).exists()

    reports = []
    for k in range(2):
        rep = tmp_path / f"eval{k}" / "report.json"
        assert main(["eval", "--ckpt", str(run / "checkpoint.json"), "--data", str(data),
                     "--subtask", "predcls", "--report", str(rep)]) == 0
        reports.append(rep.read_bytes())
        assert (rep.parent / "longtail.csv").exists()
    assert reports[0] == reports[1]


def test_eval_vocab_mismatch_and_empty(tmp_path):
    cfg = small_config(tmp_path, epochs=1)
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "run" / "checkpoint.json"
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"d_o": 8, "seed": 1, "n_obj_classes": 7}))
    other = tmp_path / "other.jsonl"
    assert main(["gen", "--spec", str(spec), "--n", "3", "--out", str(other)]) == 0
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(other), "--report",
                 str(tmp_path / "r.json")]) == 2
    empty = tmp_path / "empty.jsonl"
    empty.write_text(json.dumps({"version": 1, "spec": {}}) + "\n")
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(empty), "--report",
                 str(tmp_path / "r.json")]) == 2


def test_untrained_predcls_is_near_chance(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"d_o": 8, "seed": 1}))
    data = tmp_path / "test.jsonl"
    main(["gen", "--spec", str(spec), "--n", "60", "--out", str(data), "--split", "test"])
    cfg = small_config(tmp_path, lr=0.0, epochs=1)
    main(["train", "--config", str(cfg)])
    rep = tmp_path / "r.json"
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "run" / "checkpoint.json"), "--data", str(data),
                 "--subtask", "predcls", "--report", str(rep)]) == 0
    got = json.loads(rep.read_text())["mean_recall_at"]["50"]

    # chance: every ordered pair gets a uniformly random non-background predicate
    from edgesgg.synthetic import read_dataset
    _, scenes = read_dataset(data)
    rng = np.random.default_rng(0)
    draws = []
    for _ in range(20):
        images = []
        for sc in scenes:
            by = {d.id: d for d in sc.detections}
            gts = [Triplet(by[s].box, by[o].box, by[s].label, by[o].label, p) for s, o, p in sc.gt_triplets]
            preds = [Triplet(a.box, b.box, a.label, b.label, int(rng.integers(1, 6)), 0.5)
                     for a in sc.detections for b in sc.detections if a.id != b.id]
            images.append((preds, gts))
        draws.append(float(mean_recall_oracle(images, 50)))
    chance = float(np.mean(draws))
    assert abs(chance - 0.2) < 0.03
    assert abs(got - chance) < 0.1


def test_ablate_writes_table(tmp_path, capsys):
    cfg = small_config(tmp_path, epochs=1, seeds=[0, 1, 2], n_train=6, n_test=4)
    assert main(["ablate", "--config", str(cfg), "--axis", "branches"]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 4
    doc = json.loads((tmp_path / "run" / "ablation_branches.json").read_text())
    assert [r["variant"] for r in doc["rows"]] == ["object-only", "relation-only", "both"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "edgesgg.cli", "transform", "--in",
                           str(scene_file(tmp_path, 4)), "--out", str(tmp_path / "d.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout) == {"dual_nodes": 6, "dual_edges": 12}
