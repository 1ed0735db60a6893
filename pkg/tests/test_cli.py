import json
from pathlib import Path

import numpy as np
import pytest

from minidetr import cli
from minidetr.data import write_ppm
from minidetr.metrics import Detection
from minidetr.data import export_detections

DATA = "synthetic:n=10,seed=0,image_size=32"
TINY = {"model": {"d_model": 16, "num_heads": 2, "enc_layers": 1, "dec_layers": 2, "num_queries": 4,
                  "backbone_channels": [4, 8], "ffn_dim": 16, "image_size": 32},
        "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.001}}


def files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "train"
    assert cli.main(["train", "--dataset", DATA, "--config", str(cfg), "--out", str(out)]) == 0
    return root, out / "checkpoint.mdetr"


def run_ok(args, out):
    assert cli.main(args + ["--out", str(out)]) == 0
    return files(out)


def test_train_outputs(trained):
    root, ckpt = trained
    out = ckpt.parent
    names = set(files(out))
    assert {"checkpoint.mdetr", "loss_curve.csv", "loss_curve.svg", "manifest.json"} <= names
    lines = (out / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_loss" and len(lines) == 3


def test_replay_reproduces_train_byte_for_byte(trained):
    root, ckpt = trained
    first = files(ckpt.parent)
    again = root / "train_replay"
    assert cli.main(["replay", str(ckpt.parent / "manifest.json"), "--out", str(again)]) == 0
    second = files(again)
    first.pop("manifest.json"), second.pop("manifest.json")
    assert first == second


@pytest.mark.parametrize("argv,expected", [
    (["occlusion-sweep", "--ratios", "0.2,0.6", "--draws", "2"], {"occlusion.csv", "occlusion.svg"}),
    (["salient-sweep", "--ratios", "0.4", "--draws", "2", "--saliency", "edge-energy"],
     {"salient_vs_random.csv", "salient_vs_random.svg"}),
    (["sticker-eval", "--heatmaps", "1"], {"sticker_report.csv", "sticker_placements.json"}),
    (["corruption-benchmark", "--families", "fog,brightness"], {"corruption_mAP.csv", "corruption_mAP50.csv"}),
    (["query-analysis", "--threshold", "0.3"], {"query_frequency.csv", "query_stats.json", "masking_report.csv"}),
])
def test_experiment_commands_and_replay(trained, argv, expected, tmp_path):
    root, ckpt = trained
    argv = argv + ["--dataset", DATA, "--checkpoint", str(ckpt)]
    first = run_ok(argv, tmp_path / "a")
    assert expected <= set(first)
    assert cli.main(["replay", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    second = files(tmp_path / "b")
    first.pop("manifest.json"), second.pop("manifest.json")
    assert first == second


def test_workers_do_not_change_results(trained, tmp_path):
    _, ckpt = trained
    argv = ["occlusion-sweep", "--ratios", "0.4", "--draws", "1", "--dataset", DATA, "--checkpoint", str(ckpt)]
    one = run_ok(argv + ["--workers", "1"], tmp_path / "w1")
    three = run_ok(argv + ["--workers", "3"], tmp_path / "w3")
    assert one["occlusion.csv"] == three["occlusion.csv"]


def test_query_drop_ab_command(trained, tmp_path):
    root, _ = trained
    out = run_ok(["query-drop-ab", "--dataset", DATA, "--config", str(root / "tiny.json"), "--epochs", "1",
                  "-p", "0.15"], tmp_path / "ab")
    assert {"comparison.csv", "comparison.svg", "summary.json"} <= set(out)
    summary = json.loads(out["summary.json"])
    assert summary["drop_query_drop_p"] == 0.15


def test_perturb_evaluate_and_make_dataset(tmp_path):
    img = tmp_path / "img.ppm"
    write_ppm(img, np.full((20, 20, 3), 0.5))
    out = run_ok(["perturb", "--image", str(img), "--occlude", "0.4", "--seed", "3"], tmp_path / "p")
    assert "perturbed.ppm" in out
    out = run_ok(["perturb", "--image", str(img), "--corrupt", "fog:2"], tmp_path / "p2")
    assert "perturbed.ppm" in out

    ds = tmp_path / "ds"
    assert cli.main(["make-dataset", "-n", "3", "--image-size", "32", "--out", str(ds)]) == 0
    ann = json.loads((ds / "annotations.json").read_text())
    dets = [Detection(a["image_id"], a["category_id"], 0.9,
                      tuple(v / 32 for v in (a["bbox"][0] + a["bbox"][2] / 2, a["bbox"][1] + a["bbox"][3] / 2,
                                             a["bbox"][2], a["bbox"][3])))
            for a in ann["annotations"]]
    export_detections(dets, tmp_path / "dets.json")
    out = run_ok(["evaluate", "--dataset", str(ds), "--detections", str(tmp_path / "dets.json")], tmp_path / "ev")
    report = json.loads(out["report.json"])
    assert report["mAP50"] == pytest.approx(1.0)


def test_synthetic_held_out_split_and_resolved_manifest(trained):
    from minidetr.experiments import resolve_dataset
    tr, _ = resolve_dataset("synthetic:n=8,test=3,seed=0,image_size=32", "train")
    te, _ = resolve_dataset("synthetic:n=8,test=3,seed=0,image_size=32", "test")
    assert [s.image_id for s in tr] == list(range(8)) and [s.image_id for s in te] == [8, 9, 10]
    plain, _ = resolve_dataset(DATA, "test")
    assert [s.image_id for s in plain] == [8, 9]
    manifest = json.loads((trained[1].parent / "manifest.json").read_text())
    assert manifest["params"]["model"]["num_queries"] == 4 and manifest["params"]["model"]["backbone_depth"] == 2
    assert manifest["params"]["train"]["epochs"] == 2 and "seed" not in manifest["params"]["train"]


def test_default_output_dir_from_environment(tmp_path, monkeypatch):
    img = tmp_path / "img.ppm"
    write_ppm(img, np.full((10, 10, 3), 0.5))
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["perturb", "--image", str(img), "--occlude", "0.2"]) == 0
    assert (tmp_path / "env" / "perturb" / "perturbed.ppm").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--dataset", "/no/such/dir"],
    ["query-analysis", "--dataset", DATA, "--checkpoint", "/no/such/file"],
    ["perturb", "--image", "/no/such.ppm", "--occlude", "0.2"],
    ["replay", "/no/such/manifest.json"],
])
def test_missing_inputs_exit_2(argv, tmp_path, capsys):
    assert cli.main(argv + ["--out", str(tmp_path / "x")] if argv[0] != "replay" else argv) == 2
    assert "error" in capsys.readouterr().err


def test_invalid_values_exit_2(tmp_path):
    img = tmp_path / "img.ppm"
    write_ppm(img, np.full((10, 10, 3), 0.5))
    assert cli.main(["perturb", "--image", str(img), "--occlude", "1.5", "--out", str(tmp_path / "a")]) == 2
    assert cli.main(["perturb", "--image", str(img), "--corrupt", "fog:x", "--out", str(tmp_path / "b")]) == 2
    assert cli.main(["perturb", "--image", str(img), "--corrupt", "rain:1", "--out", str(tmp_path / "c")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert cli.main(["train", "--dataset", DATA, "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    bad.write_text(json.dumps({"model": {"d_model": 10}}))
    assert cli.main(["train", "--dataset", DATA, "--config", str(bad), "--out", str(tmp_path / "e")]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["occlusion-sweep", "--ratios", "a,b"])
    assert e.value.code == 2


def test_runtime_failure_exits_1(monkeypatch, tmp_path, capsys):
    def boom(manifest):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli, "run_manifest", boom)
    img = tmp_path / "img.ppm"
    write_ppm(img, np.full((10, 10, 3), 0.5))
    assert cli.main(["perturb", "--image", str(img), "--occlude", "0.2", "--out", str(tmp_path / "a")]) == 1
    assert "disk on fire" in capsys.readouterr().err
