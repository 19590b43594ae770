"""Acceptance criteria 1-10, each with its tolerance and runtime budget.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the report: one PASS/FAIL line per criterion.
"""
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

from fceyolo.cost import count_flops, count_params
from fceyolo.data import SplitSpec, augmented_index, labels_to_ground_truth, overfit_pair, split_dataset
from fceyolo.fce import FCE_KINDS, make_fce
from fceyolo.gradcheck import gradient_cases, run_case
from fceyolo.graph import METHODS, ModelConfig, Model, build_model, create_model, validate
from fceyolo.infer import DecodeConfig, postprocess
from fceyolo.metrics import COCO_THRESHOLDS, average_precision, iou, match_detections
from fceyolo.tensor import Tensor, default_dtype, no_grad
from fceyolo.train import TrainConfig, _batch, train_loop

from test_metrics import oracle_ap, oracle_match, random_instance

ROOT = Path(__file__).resolve().parents[1]

BASE_L = ModelConfig(scale="L", num_classes=9)


def _rel(a, b):
    return abs(a - b) / b


@pytest.mark.criterion(1, 1.0)
def test_criterion_01_base_params(criterion):
    g = build_model(BASE_L)
    fused, unfused = count_params(g, fused=True), count_params(g)
    criterion.detail = f"params {fused / 1e6:.2f}M fused, {unfused / 1e6:.2f}M with BN vs 43.61M"
    assert _rel(fused / 1e6, 43.61) <= 0.005
    assert _rel(unfused / 1e6, 43.61) <= 0.005


@pytest.mark.criterion(2, 1.0)
def test_criterion_02_base_flops(criterion):
    g = build_model(BASE_L)
    conv_only = count_flops(g, 640, fused=True, elementwise=False)
    full = count_flops(g, 640)
    criterion.detail = f"FLOPs {conv_only / 1e9:.1f}G conv-only, {full / 1e9:.1f}G all ops vs 164.9G"
    assert _rel(conv_only / 1e9, 164.9) <= 0.02
    assert _rel(full / 1e9, 164.9) <= 0.02


@pytest.mark.criterion(3, 1.0)
def test_criterion_03_parameter_free_blocks(criterion):
    deltas = []
    for scale in "SML":
        base = count_params(build_model(ModelConfig(scale=scale)))
        for kind in ("GCT", "GE"):
            for method in METHODS:
                deltas.append(count_params(build_model(ModelConfig(scale=scale, fce_kind=kind, method=method))) - base)
    criterion.detail = f"{len(deltas)} GCT/GE variants, max |delta params| = {max(map(abs, deltas))}"
    assert deltas == [0] * 18


@pytest.mark.criterion(4, 120.0)
def test_criterion_04_insertion_topology(criterion):
    x = Tensor(np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32))
    want = {"none": 0, "M1": 1, "M2": 1, "M3": 4}
    n = 0
    for scale in "SML":
        for kind in ("none",) + FCE_KINDS:
            for method in METHODS:
                cfg = ModelConfig(scale=scale, fce_kind=kind, method=method)
                g = build_model(cfg)
                validate(g)
                assert len(g.fce_nodes()) == want["none" if kind == "none" else method]
                with no_grad():
                    outs = Model(g, seed=0)(x)
                assert [o.shape[2:] for o in outs] == [(8, 8), (4, 4), (2, 2)]
                assert all(np.isfinite(o.data).all() for o in outs)
                n += 1
    criterion.detail = f"{n} configs built, validated and ran at 64x64"
    assert n == 45


@pytest.mark.criterion(5, 120.0)
def test_criterion_05_gradients(criterion):
    worst = {name: max(run_case(name, seed) for seed in range(20)) for name in gradient_cases()}
    name = max(worst, key=worst.get)
    criterion.detail = f"{len(worst)} cases x 20 seeds, worst {name} {worst[name]:.2e} (< 1e-4)"
    assert all(v < 1e-4 for v in worst.values()), {k: v for k, v in worst.items() if v >= 1e-4}


@pytest.mark.criterion(6, 30.0)
def test_criterion_06_gating(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    with default_dtype(np.float64):
        blocks = {k: make_fce(k, 8, rng=np.random.default_rng(1)) for k in ("SE", "GE", "GCT")}
        for b in blocks.values():
            b.to(np.float64)
        for kind, block in blocks.items():
            for _ in range(1000):
                x = rng.normal(0, float(rng.choice([0.1, 1.0, 10.0])), (2, 8, 4, 4))
                y = block(Tensor(x)).data
                worst = max(worst, float(np.max(np.abs(y) - np.abs(x))))
        x = rng.normal(size=(2, 8, 5, 5))
        x -= x.mean(axis=(2, 3), keepdims=True) - 0.3
        ident = float(np.max(np.abs(blocks["GCT"](Tensor(x)).data - x)))
    criterion.detail = f"max(|y|-|x|) = {worst:.1e} over 1000 inputs per kind; GCT identity error {ident:.1e}"
    assert worst <= 0.0
    assert ident <= 1e-6


@pytest.mark.criterion(7, 60.0)
def test_criterion_07_metric_oracle(criterion):
    rng = np.random.default_rng(7)
    worst, n_ap = 0.0, 0
    for _ in range(1000):
        dets, gts = random_instance(rng)
        thr = float(rng.choice(COCO_THRESHOLDS))
        flags = match_detections(dets, gts, thr)
        assert flags.tolist() == oracle_match(dets, gts, thr)
        for c in range(3):
            idx = [i for i, d in enumerate(dets) if d.class_id == c]
            n = sum(g.class_id == c for g in gts)
            if n:
                f = [bool(flags[i]) for i in idx]
                s = [dets[i].score for i in idx]
                worst = max(worst, abs(average_precision(f, s, n) - oracle_ap(f, s, n)))
                n_ap += 1
    analytic = (average_precision([True], [0.9], 1), average_precision([], [], 1),
                average_precision([True, False, True], [0.9, 0.8, 0.7], 2))
    criterion.detail = f"1000 instances, {n_ap} AP values, max diff {worst:.1e}; analytic {analytic}"
    assert worst <= 1e-9
    assert analytic[:2] == (1.0, 0.0)
    # 5/6 has no float representation; the envelope sum lands on an adjacent double
    assert abs(analytic[2] - 5 / 6) <= math.ulp(5 / 6)


@pytest.mark.criterion(8, 10.0)
def test_criterion_08_data_prep(criterion):
    aug = augmented_index([f"img{i:05d}" for i in range(14_204)])
    parts = split_dataset(range(20_327), SplitSpec(seed=0))
    sizes = tuple(map(len, parts))
    criterion.detail = f"augment 14204 -> {len(aug)}; split 20327 -> {sizes}"
    assert len(aug) == 28_408 and len(set(aug)) == 28_408
    assert sum(sizes) == 20_327
    assert sorted(x for p in parts for x in p) == list(range(20_327))
    for n, r in zip(sizes, (0.7, 0.2, 0.1)):
        assert abs(n / 20_327 - r) <= 0.005


def _overfit(kind):
    samples = overfit_pair()
    model = create_model(ModelConfig(scale="S", fce_kind=kind, method="M1"), seed=0)
    t = time.perf_counter()
    res = train_loop(model, samples, TrainConfig(steps=200))
    with no_grad():
        per_image = postprocess(model(_batch(samples)), DecodeConfig())
    ious = []
    for s, dets in zip(samples, per_image):
        for g in labels_to_ground_truth(s.labels, s.stem, 64, 64):
            ious.append(max((iou(d.box, g.box) for d in dets if d.class_id == g.class_id), default=0.0))
    return 1 - res.losses[-1] / res.losses[0], min(ious), res.dead_params, time.perf_counter() - t


@pytest.mark.criterion(9, 5 * 300.0)
def test_criterion_09_overfit(criterion):
    rows, ok = [], True
    for kind in ("none",) + FCE_KINDS:
        drop, worst_iou, dead, secs = _overfit(kind)
        rows.append(f"{kind} drop {drop:.1%} min IoU {worst_iou:.2f} dead {len(dead)} {secs:.0f}s")
        ok &= drop >= 0.9 and worst_iou >= 0.5 and not dead and secs < 300
    criterion.detail = "; ".join(rows)
    assert ok, rows


@pytest.mark.criterion(10, 1.0)
def test_criterion_10_non_reproducibility_statement(criterion):
    readme = (ROOT / "README.md").read_text()
    section = readme.split("## Not reproduced", 1)[1].split("\n## ", 1)[0]
    for needle in ("mAP@50", "F1", "per-class", "inference time", "not acceptance targets"):
        assert needle in section, needle
    # no test anywhere asserts the full-dataset figures
    for path in (ROOT / "tests").glob("test_*.py"):
        if path.name != Path(__file__).name:
            assert not re.search(r"67\.07|66\.32|65\.78", path.read_text()), path.name
    criterion.detail = "full-dataset accuracy and GPU latency documented as out of scope; criteria 1-9 stand in"
