"""Command-line entry point: ``qffl generate | train | sweep | report | efficiency``.

Settings come from a TOML file with ``[synthetic]``, ``[solver]``,
``[sweep]`` and ``[efficiency]`` tables; command-line flags override file
values, which override defaults.  Set ``LOG_LEVEL`` to ``quiet``, ``info``
or ``debug``.

Exit codes: 0 success, 1 runtime error, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import harness
from .data import DataError, SyntheticSpec, generate_synthetic, load_csv_manifest, save_csv_manifest, split_dataset
from .metrics import MetricsError, STAT_FIELDS, aggregate_over_seeds, histogram, histogram_csv, stats_for_split
from .metrics import AccuracyDistribution
from .solvers import ConfigError, RunResult, SolverConfig, run

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("qffl")

SWEEP_KEYS = {"q_grid", "seeds", "accuracy_drop_tolerance", "workers", "num_bins"}
EFFICIENCY_KEYS = {"modes", "q", "rounds", "solvers"}
SECTIONS = {"synthetic", "solver", "sweep", "efficiency"}
LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ValueError):
    pass


def _check_keys(section: str, got: dict, allowed: set[str]) -> None:
    unknown = set(got) - allowed
    if unknown:
        raise UsageError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    unknown = set(cfg) - SECTIONS
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    _check_keys("synthetic", cfg.get("synthetic", {}), {f.name for f in fields(SyntheticSpec)})
    _check_keys("solver", cfg.get("solver", {}), {f.name for f in fields(SolverConfig)})
    _check_keys("sweep", cfg.get("sweep", {}), SWEEP_KEYS)
    _check_keys("efficiency", cfg.get("efficiency", {}), EFFICIENCY_KEYS)
    return cfg


def _synthetic(cfg: dict, seed: int | None) -> SyntheticSpec:
    d = dict(cfg.get("synthetic", {}))
    if seed is not None:
        d["seed"] = seed
    return SyntheticSpec(**d)


def _solver(cfg: dict, args) -> SolverConfig:
    d = dict(cfg.get("solver", {}))
    for key in ("seed", "algorithm", "q"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    return SolverConfig.from_dict(d)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _fmt_stats(values: dict[str, float]) -> str:
    return "  ".join(f"{k}={values[k]:.2f}" for k in STAT_FIELDS)


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg) -> int:
    spec = _synthetic(cfg, args.seed)
    ds = split_dataset(generate_synthetic(spec), spec.seed)
    out = Path(args.out or "data")
    save_csv_manifest(ds, out / "manifest.json")
    print(f"devices={ds.num_devices} samples={ds.total_samples()} manifest={out / 'manifest.json'}")
    return 0


def _load_data(args):
    if not args.data:
        raise UsageError("--data is required (path to a dataset manifest)")
    return load_csv_manifest(args.data)


def cmd_train(args, cfg) -> int:
    config = _solver(cfg, args)
    ds = _load_data(args)
    result = run(config, ds)
    out = Path(args.out or "run.json")
    _write(out, result.to_json())
    st = stats_for_split(result, "test") if result.per_device_test_acc else None
    print(f"rounds={result.rounds_executed} objective={result.objective_history[-1] if result.objective_history else float('nan'):.6g}")
    if st is not None:
        print(f"test  {_fmt_stats(st.values())}  excluded={len(result.excluded('test'))}")
    return 0


def cmd_sweep(args, cfg) -> int:
    base = _solver(cfg, args)
    sw = dict(cfg.get("sweep", {}))
    num_bins = int(sw.pop("num_bins", 10))
    if "q_grid" in sw:
        sw["q_grid"] = tuple(float(q) for q in sw["q_grid"])
    if "seeds" in sw:
        sw["seeds"] = tuple(int(s) for s in sw["seeds"])
    spec = harness.SweepSpec(base=base, **sw)
    ds = _load_data(args)
    report = harness.sweep(spec, ds)
    out = Path(args.out or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    harness.save_sweep(report, out / "sweep.json")
    _write(out / "summary.csv", harness.summary_csv(report.per_q, "test"))
    _write(out / "summary_train.csv", harness.summary_csv(report.per_q, "train"))
    for r in report.runs:
        if r["test_acc"]:
            counts = harness.run_histogram(r, num_bins)
            _write(out / "histograms" / f"q{r['q']!r}_seed{r['seed']}.csv", histogram_csv(counts))
    for e in report.per_q:
        print(f"q={e['q']!r}  " + "  ".join(f"{f}={e['test'][f][0]:.2f}±{e['test'][f][1]:.2f}" for f in STAT_FIELDS))
    print(f"selected_q={report.selected_q!r}")
    return 0


def _table_row(label: str, agg: dict) -> str:
    return f"{label:<12}" + "".join(f"{agg[f][0]:>10.2f} ±{agg[f][1]:>6.2f}" for f in STAT_FIELDS)


def _table_header() -> str:
    names = {"mean_data_weighted": "Average", "mean_device": "Dev.avg", "worst10": "Worst10%",
             "best10": "Best10%", "variance": "Variance"}
    return f"{'':<12}" + "".join(f"{names[f]:>18}" for f in STAT_FIELDS)


def cmd_report(args, cfg) -> int:
    if not args.files:
        raise UsageError("report needs at least one run or sweep file")
    runs, sweeps = [], []
    for f in args.files:
        try:
            text = Path(f).read_text(encoding="utf-8")
            d = json.loads(text)
        except FileNotFoundError:
            raise UsageError(f"file not found: {f}") from None
        except UnicodeDecodeError as exc:
            raise UsageError(f"{f}: not UTF-8 at byte offset {exc.start}") from None
        except json.JSONDecodeError as exc:
            offset = len(text[:exc.pos].encode("utf-8"))
            raise UsageError(f"{f}: invalid JSON at byte offset {offset}: {exc.msg}") from None
        if "per_q" in d:
            sweeps.append(harness.loads_sweep(json.dumps(d), f))
        elif "objective_history" in d:
            runs.append(RunResult.from_dict(d))
        else:
            raise UsageError(f"{f}: neither a run report nor a sweep report")
    fps = {r.dataset_fingerprint for r in runs} | {s.dataset_fingerprint for s in sweeps}
    if runs and sweeps:
        raise UsageError("cannot mix run and sweep reports")
    lines = [_table_header()]
    if runs:
        device_sets = {tuple(sorted(r.per_device_test_acc)) for r in runs}
        if len(device_sets) > 1:
            raise UsageError("run reports cover different device sets")
        if len(fps) > 1:
            raise UsageError("run reports come from different datasets")
        stats = [stats_for_split(r, args.split) for r in runs]
        lines.append(_table_row(f"n={len(runs)}", aggregate_over_seeds(stats)))
        if args.histogram:
            counts = [0] * args.bins
            for r in runs:
                accs = getattr(r, f"per_device_{args.split}_acc")
                dist = AccuracyDistribution.from_maps(accs, r.split_sizes[args.split])
                counts = [a + b for a, b in zip(counts, histogram(dist, args.bins))]
            _write(Path(args.histogram), histogram_csv(counts))
    else:
        if len(fps) > 1:
            raise UsageError("sweep reports come from different datasets")
        for s in sweeps:
            for e in s.per_q:
                lines.append(_table_row(f"q={e['q']!r}", {f: tuple(v) for f, v in e[args.split].items()}))
            lines.append(f"selected_q={s.selected_q!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def cmd_efficiency(args, cfg) -> int:
    eff = dict(cfg.get("efficiency", {}))
    modes = eff.get("modes", ["noniid", "hybrid", "iid"])
    q = float(eff.get("q", 1.0))
    rounds = int(eff.get("rounds", 100))
    solvers = eff.get("solvers", ["qfedavg", "qfedsgd"])
    base = replace(_solver(cfg, args), q=q, max_rounds=rounds)
    spec = _synthetic(cfg, args.seed)
    datasets = {m: generate_synthetic(replace(spec, mode=m)) for m in modes}
    configs = {s: replace(base, algorithm=s) for s in solvers}
    rows = harness.efficiency_curves(datasets, configs, split_seed=base.seed)
    out = Path(args.out or "efficiency")
    _write(out / "curves.csv", harness.curves_csv(rows))
    lines = ["dataset,solver,target,rounds_to_target"]
    for m in modes:
        finals = [r["objective"] for r in rows if r["dataset"] == m and r["round"] == rounds]
        target = max(finals)
        for (d, s), t in harness.rounds_to_target([r for r in rows if r["dataset"] == m], target).items():
            lines.append(f"{d},{s},{target!r},{'' if t is None else t}")
    _write(out / "rounds_to_target.csv", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "efficiency": cmd_efficiency,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", help="output path")
    common.add_argument("--data", help="dataset manifest")

    parser = argparse.ArgumentParser(prog="qffl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic federated dataset")
    p = sub.add_parser("train", parents=[common], help="train one configuration")
    p.add_argument("--algorithm")
    p.add_argument("--q", type=float)
    p = sub.add_parser("sweep", parents=[common], help="q-grid sweep over seeds")
    p.add_argument("--algorithm")
    p = sub.add_parser("report", parents=[common], help="aggregate run or sweep reports")
    p.add_argument("files", nargs="*")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--histogram", help="write pooled histogram CSV here")
    p.add_argument("--bins", type=int, default=10)
    p = sub.add_parser("efficiency", parents=[common], help="q-FedAvg vs q-FedSGD convergence curves")
    p.add_argument("--algorithm", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("LOG_LEVEL", "quiet").lower()
    logging.basicConfig(level=LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, DataError, MetricsError, harness.HarnessError,
            harness.SweepFormatError, TypeError) as exc:
        print(f"qffl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- top-level guard maps to exit 1
        log.debug("unhandled error", exc_info=True)
        print(f"qffl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
