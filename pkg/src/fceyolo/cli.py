"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (missing files, bad data, failed
check), 2 usage or configuration error.

A JSON config file given with ``--config`` supplies defaults per command;
flags on the command line override it.  Its top level maps command names
to objects whose keys are that command's option names with dashes turned
into underscores, e.g.::

    {"summary": {"scale": "S", "input_size": 1024},
     "train-toy": {"steps": 50, "fce": "GC"}}
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__

FCE_NAMES = ("none", "SE", "GC", "GE", "GCT")


class ConfigFileError(click.UsageError):
    pass


def load_config(path: Path, commands: dict) -> dict:
    """Parse and check a config file against the commands' option names."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigFileError("config file must hold a JSON object")
    for section, values in raw.items():
        if section not in commands:
            raise ConfigFileError(f"unknown config key {section!r}; expected a command name from {sorted(commands)}")
        if not isinstance(values, dict):
            raise ConfigFileError(f"config key {section!r} must map to an object")
        allowed = {p.name for p in commands[section].params}
        for key in values:
            if key not in allowed:
                raise ConfigFileError(f"unknown config key {section}.{key!r}; allowed: {sorted(allowed)}")
    return raw


class _Group(click.Group):
    """Turns runtime exceptions into exit code 1 with a one-line message."""

    def invoke(self, ctx):
        from .data import LabelError
        from .graph import ConfigError
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            ctx.exit(2)
        except (FileNotFoundError, LabelError, ValueError, RuntimeError) as e:
            click.echo(f"error: {e}", err=True)
            ctx.exit(1)


@click.group(cls=_Group, context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
              help="JSON file with per-command defaults.")
@click.version_option(__version__)
@click.pass_context
def main(ctx, config_path):
    """YOLOv8 + feature context excitation toolkit."""
    if config_path is not None:
        ctx.default_map = load_config(config_path, main.commands)


def _fce_option(default="none"):
    return click.option("--fce", type=click.Choice(FCE_NAMES, case_sensitive=False), default=default,
                        show_default=True, help="Feature context excitation block (none for the base model).")


def _method_option():
    return click.option("--method", type=click.Choice(("M1", "M2", "M3"), case_sensitive=False), default="M1",
                        show_default=True, help="Insertion method for the block.")


def _write(path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


# ------------------------------------------------------------------ summary


@main.command()
@click.option("--scale", type=click.Choice(("S", "M", "L"), case_sensitive=False), default="L", show_default=True)
@click.option("--nc", type=click.IntRange(min=1), default=9, show_default=True, help="Number of classes.")
@_fce_option()
@_method_option()
@click.option("--input-size", type=click.IntRange(min=32), default=640, show_default=True,
              help="Detection input size; FLOPs are always reported at 640.")
@click.option("--all", "all_", is_flag=True, help="Every base model and every (scale, block, method) variant.")
@click.option("--unfused", is_flag=True, help="Count batch norm separately instead of folded into convolutions.")
@click.option("--elementwise", is_flag=True, help="Include activation, add and pooling FLOPs.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Also write the table as CSV.")
def summary(scale, nc, fce, method, input_size, all_, unfused, elementwise, out):
    """Parameter and FLOP table."""
    from .cost import all_configs, summary_table
    from .graph import ModelConfig
    if input_size % 32:
        raise click.BadParameter("must be a multiple of 32", param_hint="'--input-size'")
    cfgs = all_configs(nc) if all_ else [ModelConfig(scale=scale.upper(), num_classes=nc, fce_kind=fce,
                                                     method=method.upper())]
    report = summary_table(cfgs, input_size, fused=not unfused, elementwise=elementwise)
    click.echo(report.format_table())
    if out:
        _write(out, report.to_csv())


# ------------------------------------------------------------------ gradcheck


def _gradcheck_choices():
    from .gradcheck import gradient_cases
    return ("all", "ops", "fce") + tuple(gradient_cases())


@main.command()
@click.option("--module", "module", type=click.Choice(_gradcheck_choices(), case_sensitive=False), default="all",
              show_default=True, help="Case name, or a group: ops, fce, all.")
@click.option("--seeds", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True, help="Maximum allowed relative error.")
def gradcheck(module, seeds, tol):
    """Finite-difference gradient checks in float64."""
    from .gradcheck import gradient_cases, run_case
    module = module.lower()
    names = list(gradient_cases(module)) if module in ("all", "ops", "fce") else [module]
    worst_all = 0.0
    for name in names:
        worst = max(run_case(name, s) for s in range(seeds))
        worst_all = max(worst_all, worst)
        click.echo(f"{name:<20} max rel error {worst:.3e}  {'ok' if worst < tol else 'FAIL'}")
    click.echo(f"max rel error {worst_all:.3e} over {seeds} seeds (tolerance {tol:g})")
    if not worst_all < tol:
        sys.exit(1)


# ------------------------------------------------------------------ split / augment


@main.command()
@click.option("--n-from-list", "n_items", type=click.IntRange(min=3), help="Split N synthetic item ids 0..N-1.")
@click.option("--list", "list_file", type=click.Path(dir_okay=False, path_type=Path),
              help="File with one item per line.")
@click.option("--ratios", type=float, nargs=3, default=(0.7, 0.2, 0.1), show_default=True)
@click.option("--sizes", type=int, nargs=2, default=None, help="Explicit train and valid sizes; test gets the rest.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path),
              help="Write train.txt, valid.txt and test.txt here.")
def split(n_items, list_file, ratios, sizes, seed, out):
    """Seeded train/valid/test partition."""
    from .data import SPLITS, SplitSpec, split_dataset
    if (n_items is None) == (list_file is None):
        raise click.UsageError("give exactly one of --n-from-list or --list")
    if list_file is not None:
        if not list_file.exists():
            raise FileNotFoundError(f"list file not found: {list_file}")
        items = [line.strip() for line in list_file.read_text().splitlines() if line.strip()]
    else:
        items = [str(i) for i in range(n_items)]
    try:
        spec = SplitSpec(tuple(ratios), seed, tuple(sizes) if sizes else None)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="'--ratios'") from None
    parts = split_dataset(items, spec)
    for name, part in zip(SPLITS, parts):
        click.echo(f"{name:<6}{len(part):>8}")
        if out:
            _write(Path(out) / f"{name}.txt", "".join(f"{x}\n" for x in part))
    click.echo(f"{'total':<6}{sum(map(len, parts)):>8}")


@main.command()
@click.option("--root", type=click.Path(file_okay=False, path_type=Path),
              help="Dataset root with images/<split> and labels/<split>.")
@click.option("--split", "split_name", default="train", show_default=True)
@click.option("--alpha", type=float, default=1.2, show_default=True, help="Contrast gain.")
@click.option("--gamma", type=float, default=10.0, show_default=True, help="Brightness offset.")
@click.option("--out-root", type=click.Path(file_okay=False, path_type=Path),
              help="Write originals and copies here instead of in place.")
@click.option("--n-from-list", "n_items", type=click.IntRange(min=0), help="Index-level run: double N item ids.")
def augment(root, split_name, alpha, gamma, out_root, n_items):
    """Add a contrast/brightness copy of every image in a split."""
    from .data import AugmentSpec, augment_split, augmented_index
    if (root is None) == (n_items is None):
        raise click.UsageError("give exactly one of --root or --n-from-list")
    if n_items is not None:
        click.echo(f"images: {n_items} -> {len(augmented_index([str(i) for i in range(n_items)]))}")
        return
    total = augment_split(root, split_name, AugmentSpec(alpha, gamma), out_root)
    click.echo(f"images: {total // 2} -> {total}")


# ------------------------------------------------------------------ training


@main.command("train-toy")
@click.option("--scale", type=click.Choice(("S", "M", "L"), case_sensitive=False), default="S", show_default=True)
@_fce_option()
@_method_option()
@click.option("--data", type=click.Path(file_okay=False, path_type=Path),
              help="Dataset root (train split); default is the built-in two-image set.")
@click.option("--nc", type=click.IntRange(min=1), default=9, show_default=True)
@click.option("--steps", type=click.IntRange(min=0), default=200, show_default=True)
@click.option("--batch", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--log-every", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True,
              help="Output directory for loss.csv and weights/.")
def train_toy(scale, fce, method, data, nc, steps, batch, lr, seed, log_every, out):
    """Short SGD run on a small synthetic or on-disk dataset."""
    from .data import overfit_pair, read_split
    from .graph import ModelConfig, create_model, save_weights
    from .train import TrainConfig, train_loop
    samples = read_split(data, "train") if data else overfit_pair(nc)
    if not samples:
        raise ValueError("training set is empty")
    model = create_model(ModelConfig(scale=scale.upper(), num_classes=nc, fce_kind=fce, method=method.upper()),
                         seed=seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_loop(model, samples, TrainConfig(steps=steps, batch=batch, lr=lr, seed=seed, log_every=log_every),
                     loss_csv=out / "loss.csv")
    save_weights(model, out / "weights")
    if res.losses:
        drop = 1 - res.losses[-1] / res.losses[0]
        click.echo(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f} ({drop:.1%} lower) in {steps} steps")
    click.echo(f"parameters never updated: {len(res.dead_params)}")


# ------------------------------------------------------------------ predict / eval


def _image_paths(source: Path) -> list:
    from .data import IMAGE_SUFFIXES
    if source.is_dir():
        return sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if source.exists():
        return [source]
    raise FileNotFoundError(f"no such image or directory: {source}")


@main.command()
@click.option("--weights", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--source", type=click.Path(path_type=Path), required=True, help="Image file or directory.")
@click.option("--size", type=click.IntRange(min=32), default=640, show_default=True, help="Network input size.")
@click.option("--conf", type=click.FloatRange(0, 1), default=0.25, show_default=True)
@click.option("--iou", type=click.FloatRange(0, 1), default=0.45, show_default=True)
@click.option("--max-det", type=click.IntRange(min=1), default=300, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Prediction text file.")
@click.option("--save-dir", type=click.Path(file_okay=False, path_type=Path), help="Write annotated images here.")
def predict(weights, source, size, conf, iou, max_det, out, save_dir):
    """Detect objects and write predictions as text."""
    from .data import load_image, read_class_names
    from .graph import load_weights
    from .infer import DecodeConfig, predict as run_predict, save_annotated
    from .metrics import format_predictions
    model = load_weights(weights)
    cfg = DecodeConfig(model.config.reg_max, conf, iou, max_det)
    paths = _image_paths(source)
    names = read_class_names(Path(weights))
    lines = []
    for p in paths:
        img = load_image(p)
        (dets,) = run_predict(model, [img], [p.stem], size, cfg)
        lines.append(format_predictions(dets))
        if save_dir:
            save_annotated(Path(save_dir) / f"{p.stem}.png", img, dets, names)
    text = "".join(lines)
    if out:
        _write(out, text)
    else:
        click.echo(text, nl=False)
    click.echo(f"{len(paths)} images, {sum(t.count(chr(10)) for t in lines)} detections", err=True)


def _load_ground_truth(gt: Path, images: Path = None) -> list:
    """Labels directory plus image sizes from the matching images directory."""
    from .data import IMAGE_SUFFIXES, labels_to_ground_truth, load_image, read_labels_dir
    labels = read_labels_dir(gt)
    if images is None:
        # <root>/labels/<split> pairs with <root>/images/<split>
        images = gt.parent.parent / "images" / gt.name if gt.parent.name == "labels" else gt
    out = []
    for stem, labs in labels.items():
        cands = [images / f"{stem}{s}" for s in IMAGE_SUFFIXES]
        path = next((c for c in cands if c.exists()), None)
        if path is None:
            raise FileNotFoundError(f"no image for labels {stem!r} under {images}")
        h, w = load_image(path).shape[:2]
        out += labels_to_ground_truth(labs, stem, w, h)
    return out


def _load_predictions(pred: Path) -> list:
    from .metrics import parse_predictions
    if not pred.exists():
        raise FileNotFoundError(f"prediction file not found: {pred}")
    try:
        return parse_predictions(pred.read_text())
    except ValueError as e:
        raise ValueError(f"{pred}: {e}") from None


_gt_options = [
    click.option("--gt", type=click.Path(file_okay=False, path_type=Path), required=True,
                 help="Directory of YOLO label files (e.g. <root>/labels/valid)."),
    click.option("--images", type=click.Path(file_okay=False, path_type=Path),
                 help="Images matching --gt, used for box scaling; defaults to <root>/images/<split>."),
    click.option("--pred", type=click.Path(dir_okay=False, path_type=Path), required=True,
                 help="Prediction text file (image_id class score x1 y1 x2 y2)."),
    click.option("--points", type=click.Choice(("all", "11", "101")), default="all", show_default=True,
                 help="Precision interpolation: all points, or an 11/101-point recall grid."),
]


def _with_gt_options(f):
    for opt in reversed(_gt_options):
        f = opt(f)
    return f


@main.command("eval")
@_with_gt_options
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write the full report as JSON.")
def eval_cmd(gt, images, pred, points, out):
    """mAP@50, mAP@50-95, per-class AP and best F1."""
    from .data import read_class_names
    from .metrics import evaluate
    gts = _load_ground_truth(gt, images)
    report = evaluate(_load_predictions(pred), gts, None if points == "all" else int(points))
    root = gt.parent.parent if gt.parent.name == "labels" else gt
    click.echo(report.summary(read_class_names(root)))
    if out:
        _write(out, report.to_json() + "\n")


@main.command("pr-export")
@_with_gt_options
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="CSV destination.")
def pr_export(gt, images, pred, points, out):
    """Per-class precision/recall curves at IoU 0.5 as CSV."""
    from .metrics import evaluate
    report = evaluate(_load_predictions(pred), _load_ground_truth(gt, images),
                      None if points == "all" else int(points))
    _write(out, report.pr_csv())
    click.echo(f"wrote {sum(len(r) for r, _ in report.pr_curves.values())} points for "
               f"{len(report.pr_curves)} classes to {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
