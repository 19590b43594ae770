"""Parameter/FLOP tables for every base model and block variant.

Writes one CSV per counting convention into the output directory and prints
the deployed-model table (batch norm folded, convolution FLOPs only).

    python scripts/cost_tables.py --out runs/cost
"""
import argparse
from pathlib import Path

from fceyolo.cost import all_configs, summary_table


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/cost"))
    ap.add_argument("--nc", type=int, default=9)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    cfgs = all_configs(args.nc)
    conventions = {
        "fused_conv_only": dict(fused=True, elementwise=False),
        "unfused_all_ops": dict(fused=False, elementwise=True),
    }
    for name, kw in conventions.items():
        for size in (640, 1024):
            report = summary_table(cfgs, size, **kw)
            (args.out / f"{name}_{size}.csv").write_text(report.to_csv())
    print(summary_table(cfgs, 640).format_table())
    print(f"\nCSV files in {args.out}")


if __name__ == "__main__":
    main()
