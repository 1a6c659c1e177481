"""Command-line front end.

    covsampler verify [--verbose]
    covsampler sample --config run.toml [--out DIR] [--seed N]
    covsampler ablate --config run.toml [--out DIR] [--seed N]
    covsampler report results.csv [--out DIR]

Exit status: 0 on success, 1 when a check or computation fails, 2 for invalid
input (config, CSV schema, arguments).
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from . import checks, formats, plotting
from .config import ConfigError, RunConfig, build_experiment, load_config
from .evaluation import CSV_COLUMNS, run_ablation, run_comparison, run_steps

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DIAG_COLUMNS = ("sampler", "transform", "averaging", "steps", "seed", "step", "t", "groups", "var_min", "var_mean", "var_max")


def _out_dir(args, cfg: RunConfig) -> str:
    if args.out:
        return args.out
    if cfg.out:
        return os.path.join(cfg.base_dir, cfg.out)
    return "covsampler-out"


def _seeds(args, cfg: RunConfig) -> tuple:
    return (args.seed,) if args.seed is not None else cfg.seeds


def _sample_name(row: dict) -> str:
    parts = [row["sampler"]]
    if row["sampler"] == "covaware":
        parts += [row["transform"], row["averaging"]]
    return "-".join(parts) + f"_steps{row['steps']}_seed{row['seed']}.cvs"


def _log(args, msg: str) -> None:
    if args.verbose:
        print(msg, file=sys.stderr)


def cmd_verify(args) -> int:
    results = checks.run_checks()
    width = max(len(r.name) for r in results)
    header = f"{'check':<{width}}  status  value"
    if args.verbose:
        header += "        tolerance  measures"
    print(header)
    for r in results:
        line = f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.value:<11.3g}"
        if args.verbose:
            line += f"  {r.tolerance:<9.3g}  {r.what}"
        print(line.rstrip())
        if r.error:
            print(f"    {r.error}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def _run_rows(args, cfg: RunConfig, ablate: bool):
    exp = build_experiment(cfg)
    rows, runs = [], []
    for seed in _seeds(args, cfg):
        _log(args, f"seed {seed}")
        if ablate:
            rows += run_ablation(cfg.ablation_grid(), exp, seed, runs)
        elif cfg.budgets:
            rows += run_comparison(exp, cfg.sampler_specs(), cfg.budgets, seed, runs)
        else:
            rows += run_steps(exp, cfg.sampler_specs(), cfg.steps, seed, runs)
    return rows, runs


def _diag_rows(rows, runs) -> list:
    out = []
    for row, run in zip(rows, runs):
        for d in run.diagnostics:
            out.append({**{k: row[k] for k in ("sampler", "transform", "averaging", "steps", "seed")}, **d})
    return out


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    rows, runs = _run_rows(args, cfg, ablate=False)
    for row, run in zip(rows, runs):
        formats.write_samples(os.path.join(out, "samples", _sample_name(row)), run.samples)
    formats.write_csv(os.path.join(out, "metrics.csv"), rows, CSV_COLUMNS)
    diag = _diag_rows(rows, runs)
    if diag:
        formats.write_csv(os.path.join(out, "diagnostics.csv"), diag, DIAG_COLUMNS)
    print(f"wrote {len(rows)} rows to {os.path.join(out, 'metrics.csv')}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if cfg.ablation is None:
        raise ConfigError("config has no [ablation] section")
    out = _out_dir(args, cfg)
    rows, runs = _run_rows(args, cfg, ablate=True)
    formats.write_csv(os.path.join(out, "ablation.csv"), rows, CSV_COLUMNS)
    formats.write_csv(os.path.join(out, "ablation_diagnostics.csv"), _diag_rows(rows, runs), DIAG_COLUMNS)
    print(f"wrote {len(rows)} rows to {os.path.join(out, 'ablation.csv')}")
    return EXIT_OK


def _parse_rows(path) -> list:
    raw = formats.read_csv(path, CSV_COLUMNS)
    if not raw:
        raise formats.SchemaError(f"{path}: no data rows")
    rows = []
    for i, r in enumerate(raw):
        try:
            rows.append({**r, "nfe": int(r["nfe"]), **{m: float(r[m]) for m in plotting.METRICS}})
        except ValueError as e:
            raise formats.FormatError(f"{path}: row {i + 1}: {e}") from None
    return rows


def cmd_report(args) -> int:
    rows = _parse_rows(args.csv)
    out = args.out or os.path.dirname(os.path.abspath(args.csv))
    stem = os.path.splitext(os.path.basename(args.csv))[0]
    for metric in plotting.METRICS:
        path = os.path.join(out, f"{stem}_{metric}.svg")
        formats.atomic_write_bytes(path, plotting.figure_svg(plotting.metric_figure(rows, metric)))
        _log(args, f"wrote {path}")
    print(f"wrote {len(plotting.METRICS)} plots to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covsampler", description="Covariance-aware diffusion sampling experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="print tolerances and progress")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="run the invariant checks")
    v.set_defaults(fn=cmd_verify)

    for name, fn, text in (("sample", cmd_sample, "run sampler comparisons"), ("ablate", cmd_ablate, "run the estimator ablation grid")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--config", required=True, metavar="PATH")
        s.add_argument("--out", metavar="DIR")
        s.add_argument("--seed", type=int, metavar="N", help="run this seed only")
        s.set_defaults(fn=fn)

    r = sub.add_parser("report", parents=[common], help="plot a metrics CSV as SVG")
    r.add_argument("csv", metavar="CSV")
    r.add_argument("--out", metavar="DIR")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, formats.FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
