"""Helpers shared by the experiment scripts: argument parsing and result tables."""
import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from tsdsae.experiments import RunSpec, run_one  # noqa: E402

COLUMNS = ("f1_pre", "f1_post_global", "f1_post_local", "mse_recon", "frechet_recon", "rpa_pre")


def parser(desc: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=desc)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--max-epochs", type=int, default=RunSpec.max_epochs)
    ap.add_argument("--c-epochs", type=int, default=RunSpec.c_epochs)
    ap.add_argument("--scale", type=float, default=RunSpec.input_scale)
    ap.add_argument("--out", type=Path, default=None, help="CSV file for the result table")
    return ap


def base_spec(args, **kw) -> RunSpec:
    return RunSpec(max_epochs=args.max_epochs, c_epochs=args.c_epochs, input_scale=args.scale, **kw)


def run_all(specs, factors=("instrument",)):
    rows = []
    for spec in specs:
        res = run_one(spec)
        for factor in factors:
            row = {"run": spec.label(), "factor": factor, "seconds": round(res.seconds, 1),
                   "best_epoch": res.best_epoch}
            for col in COLUMNS:
                key = (col, factor) if (col, factor) in res.metrics else (col, "all")
                row[col] = res.metrics[key]
            row["rpa_post_global"] = res.metrics[("rpa_post_global", factor)]
            rows.append(row)
            print("  ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
    return rows


def write_csv(rows, path):
    if path is None or not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
