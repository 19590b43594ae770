import csv
import json
import re

import pytest
from click.testing import CliRunner

from fceyolo.cli import main
from fceyolo.data import labels_to_ground_truth, synth_dataset, write_split
from fceyolo.metrics import Detection, format_predictions


@pytest.fixture
def run():
    runner = CliRunner()

    def _run(*args):
        return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    return _run


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "ds"
    samples = synth_dataset(4, image_size=64, boxes_per_image=2, seed=11)
    write_split(root, "valid", samples)
    return root, samples


def _perfect_predictions(samples):
    dets = []
    for s in samples:
        for g in labels_to_ground_truth(s.labels, s.stem, 64, 64):
            dets.append(Detection(g.image_id, g.class_id, g.box, 0.9))
    return format_predictions(dets)


# ------------------------------------------------------------------ help


@pytest.mark.parametrize("command", [None] + sorted(main.commands))
def test_help_lists_every_flag(run, command):
    args = ["--help"] if command is None else [command, "--help"]
    res = run(*args)
    assert res.exit_code == 0
    params = main.params if command is None else main.commands[command].params
    for p in params:
        for opt in p.opts:
            if opt.startswith("-"):
                assert opt in res.output, f"{opt} missing from {command} help"


# ------------------------------------------------------------------ summary


def test_summary_base_l_row(run):
    res = run("summary", "--scale", "L", "--nc", 9, "--fce", "none", "--input-size", 640)
    assert res.exit_code == 0
    row = next(line for line in res.output.splitlines() if line.startswith("YOLOv8-L"))
    params, flops = re.findall(r"([\d.]+)[MG]", row)
    assert abs(float(params) - 43.61) / 43.61 <= 0.005
    assert abs(float(flops) - 164.9) / 164.9 <= 0.02


def test_summary_all_rows_and_monotone(run, tmp_path):
    out = tmp_path / "all.csv"
    res = run("summary", "--all", "--input-size", 640, "--out", out)
    assert res.exit_code == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 3 + 3 * 4 * 3
    by_variant = {}
    for r in rows:
        key = (r["model"].rsplit("-", 1)[0], r["method"])
        by_variant.setdefault(key, {})[r["scale"]] = int(r["params"])
    assert len(by_variant) == 13
    for sizes in by_variant.values():
        assert sizes["S"] < sizes["M"] < sizes["L"]


def test_summary_bad_method_names_flag(run):
    res = run("summary", "--method", "M9")
    assert res.exit_code == 2 and "--method" in res.output


def test_summary_bad_input_size(run):
    res = run("summary", "--input-size", 100)
    assert res.exit_code == 2 and "--input-size" in res.output


# ------------------------------------------------------------------ config file


def test_config_supplies_defaults_and_flags_override(run, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"summary": {"scale": "S", "fce": "GCT", "method": "M2"}}))
    res = run("--config", cfg, "summary")
    assert res.exit_code == 0 and "GCT-M2-S" in res.output
    res = run("--config", cfg, "summary", "--scale", "M")
    assert "GCT-M2-M" in res.output


@pytest.mark.parametrize("payload, key", [
    ({"summary": {"scael": "S"}}, "scael"),
    ({"sumary": {}}, "sumary"),
    ({"split": {"input_size": 3}}, "input_size"),
])
def test_config_unknown_key_rejected(run, tmp_path, payload, key):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(payload))
    res = run("--config", cfg, "summary")
    assert res.exit_code == 2 and key in res.output


# ------------------------------------------------------------------ gradcheck


def test_gradcheck_gct(run):
    res = run("gradcheck", "--module", "gct")
    assert res.exit_code == 0
    err = float(re.search(r"max rel error ([\d.e+-]+) over", res.output).group(1))
    assert err < 1e-4


def test_gradcheck_failure_exit_code(run):
    res = run("gradcheck", "--module", "relu", "--seeds", 1, "--tol", 0)
    assert res.exit_code == 1 and "FAIL" in res.output


# ------------------------------------------------------------------ split / augment


def test_split_counts(run, tmp_path):
    res = run("split", "--n-from-list", 20327, "--ratios", 0.7, 0.2, 0.1, "--seed", 0, "--out", tmp_path / "s")
    assert res.exit_code == 0
    sizes = dict(line.split() for line in res.output.splitlines())
    assert int(sizes["total"]) == 20327
    assert int(sizes["train"]) + int(sizes["valid"]) + int(sizes["test"]) == 20327
    written = [len((tmp_path / "s" / f"{n}.txt").read_text().splitlines()) for n in ("train", "valid", "test")]
    assert written == [int(sizes[n]) for n in ("train", "valid", "test")]


def test_split_is_byte_identical_across_runs(run, tmp_path):
    for d in ("a", "b"):
        run("split", "--n-from-list", 500, "--seed", 3, "--out", tmp_path / d)
    for n in ("train", "valid", "test"):
        assert (tmp_path / "a" / f"{n}.txt").read_bytes() == (tmp_path / "b" / f"{n}.txt").read_bytes()


def test_split_from_list_and_errors(run, tmp_path):
    lst = tmp_path / "items.txt"
    lst.write_text("".join(f"img{i}\n" for i in range(10)))
    res = run("split", "--list", lst)
    assert res.exit_code == 0 and res.output.split()[-2:] == ["total", "10"]
    res = run("split", "--list", tmp_path / "missing.txt")
    assert res.exit_code == 1 and "missing.txt" in res.output
    assert run("split", "--n-from-list", 10, "--ratios", 0.5, 0.5, 0.5).exit_code == 2
    assert run("split").exit_code == 2


def test_augment_index_and_directory(run, dataset, tmp_path):
    res = run("augment", "--n-from-list", 14204)
    assert res.exit_code == 0 and "14204 -> 28408" in res.output
    root, _ = dataset
    res = run("augment", "--root", root, "--split", "valid", "--out-root", tmp_path / "aug")
    assert res.exit_code == 0 and "4 -> 8" in res.output
    assert len(list((tmp_path / "aug" / "images" / "valid").iterdir())) == 8


# ------------------------------------------------------------------ eval / pr-export


def test_eval_perfect_predictions(run, dataset, tmp_path):
    root, samples = dataset
    pred = tmp_path / "pred.txt"
    pred.write_text(_perfect_predictions(samples))
    out = tmp_path / "report.json"
    res = run("eval", "--gt", root / "labels" / "valid", "--pred", pred, "--out", out)
    assert res.exit_code == 0
    assert "mAP@50: 1.0000" in res.output
    assert json.loads(out.read_text())["map50"] == 1.0


def test_eval_missing_files(run, dataset, tmp_path):
    root, _ = dataset
    res = run("eval", "--gt", root / "labels" / "valid", "--pred", tmp_path / "nope.txt")
    assert res.exit_code == 1 and "nope.txt" in res.output
    res = run("eval", "--gt", tmp_path / "nolabels", "--pred", tmp_path / "nope.txt")
    assert res.exit_code == 1 and "nolabels" in res.output


def test_eval_bad_prediction_line(run, dataset, tmp_path):
    root, _ = dataset
    pred = tmp_path / "pred.txt"
    pred.write_text("a 0 0.5 1 2 3\n")
    res = run("eval", "--gt", root / "labels" / "valid", "--pred", pred)
    assert res.exit_code == 1 and "line 1" in res.output


def test_pr_export(run, dataset, tmp_path):
    root, samples = dataset
    pred = tmp_path / "pred.txt"
    pred.write_text(_perfect_predictions(samples))
    out = tmp_path / "pr.csv"
    res = run("pr-export", "--gt", root / "labels" / "valid", "--pred", pred, "--out", out)
    assert res.exit_code == 0
    rows = list(csv.DictReader(out.open()))
    assert rows and all(float(r["precision"]) == 1.0 for r in rows)
    first = out.read_bytes()
    run("pr-export", "--gt", root / "labels" / "valid", "--pred", pred, "--out", out)
    assert out.read_bytes() == first


# ------------------------------------------------------------------ train / predict


def test_train_predict_eval_round_trip(run, tmp_path):
    out = tmp_path / "run"
    res = run("train-toy", "--fce", "SE", "--steps", 3, "--out", out)
    assert res.exit_code == 0, res.output
    assert (out / "loss.csv").read_text().splitlines()[0] == "step,loss"
    assert len((out / "loss.csv").read_text().splitlines()) == 4
    assert (out / "weights" / "manifest.json").exists()

    imgs = tmp_path / "imgs"
    write_split(tmp_path / "ds", "test", synth_dataset(2, seed=4))
    src = tmp_path / "ds" / "images" / "test"
    pred = tmp_path / "pred.txt"
    res = run("predict", "--weights", out / "weights", "--source", src, "--size", 64, "--conf", 0.01,
              "--out", pred, "--save-dir", imgs)
    assert res.exit_code == 0, res.output
    assert len(list(imgs.iterdir())) == 2
    first = pred.read_bytes()
    run("predict", "--weights", out / "weights", "--source", src, "--size", 64, "--conf", 0.01, "--out", pred)
    assert pred.read_bytes() == first
    res = run("eval", "--gt", tmp_path / "ds" / "labels" / "test", "--pred", pred)
    assert res.exit_code == 0 and "mAP@50:" in res.output


def test_predict_missing_source(run, tmp_path):
    out = tmp_path / "run"
    run("train-toy", "--steps", 0, "--out", out)
    res = run("predict", "--weights", out / "weights", "--source", tmp_path / "nothing.png")
    assert res.exit_code == 1 and "nothing.png" in res.output
