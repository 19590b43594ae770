"""Toy overfit run for the base model and each block kind.

Trains an S-scale model for 200 steps on the two built-in 64x64 images,
then reports the loss drop, the worst post-NMS IoU against the training
boxes, and any parameters that never received a gradient.  Loss traces go
to <out>/<kind>_<method>.csv.

    python scripts/overfit_all.py --out runs/overfit
"""
import argparse
import time
from pathlib import Path

from fceyolo.data import labels_to_ground_truth, overfit_pair
from fceyolo.fce import FCE_KINDS
from fceyolo.graph import ModelConfig, create_model
from fceyolo.infer import DecodeConfig, postprocess
from fceyolo.metrics import iou
from fceyolo.tensor import no_grad
from fceyolo.train import TrainConfig, _batch, train_loop


def run(kind: str, method: str, steps: int, out: Path) -> dict:
    samples = overfit_pair()
    model = create_model(ModelConfig(scale="S", fce_kind=kind, method=method), seed=0)
    t = time.perf_counter()
    res = train_loop(model, samples, TrainConfig(steps=steps), loss_csv=out / f"{kind}_{method}.csv")
    secs = time.perf_counter() - t
    with no_grad():
        per_image = postprocess(model(_batch(samples)), DecodeConfig())
    ious = [max((iou(d.box, g.box) for d in dets if d.class_id == g.class_id), default=0.0)
            for s, dets in zip(samples, per_image)
            for g in labels_to_ground_truth(s.labels, s.stem, 64, 64)]
    return dict(drop=1 - res.losses[-1] / res.losses[0], min_iou=min(ious), dead=res.dead_params, secs=secs)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--method", default="M1", choices=("M1", "M2", "M3"))
    ap.add_argument("--kinds", nargs="+", default=["none", *FCE_KINDS])
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    print(f"{'kind':<6}{'drop':>8}{'min IoU':>9}{'dead':>6}{'time':>8}")
    for kind in args.kinds:
        r = run(kind, args.method, args.steps, args.out)
        print(f"{kind:<6}{r['drop']:>8.1%}{r['min_iou']:>9.3f}{len(r['dead']):>6}{r['secs']:>7.0f}s")


if __name__ == "__main__":
    main()
