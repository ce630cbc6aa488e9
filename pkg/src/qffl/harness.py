"""Experiment orchestration: L probing, q sweeps, q selection, persistence."""

from __future__ import annotations

import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import models
from .data import FederatedDataset, split_dataset
from .metrics import (STAT_FIELDS, AccuracyDistribution,
                      aggregate_over_seeds, distribution_stats, histogram, stats_for_split)
from .models import ModelSpec
from .solvers import Federation, RunResult, SolverConfig, SolverError, run

log = logging.getLogger(__name__)

DEFAULT_Q_GRID = (0.0, 0.001, 0.01, 0.1, 1.0, 2.0, 5.0, 10.0, 15.0)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_ETA_GRID = (1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001)
SPLITS = ("train", "val", "test")


class HarnessError(RuntimeError):
    pass


class SweepFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# step size / L estimation


def select_step_size(probe: Callable[[float], Sequence[float]], eta_grid: Sequence[float]) -> float:
    """Pick the step size whose probe trajectory ends lowest.

    ``probe(eta)`` returns the objective trajectory starting with the
    initial value.  A candidate is discarded as divergent when it raises,
    produces a non-finite value, or ever exceeds 10x its initial value.
    Ties go to the earlier grid entry.
    """
    best_eta, best_val = None, np.inf
    for eta in eta_grid:
        try:
            traj = np.asarray(probe(eta), dtype=np.float64)
        except (SolverError, models.ModelError, FloatingPointError, OverflowError) as exc:
            log.info("eta=%g diverged: %s", eta, exc)
            continue
        if not np.isfinite(traj).all() or np.any(traj > 10.0 * traj[0]):
            log.info("eta=%g diverged", eta)
            continue
        if traj[-1] < best_val:
            best_eta, best_val = eta, float(traj[-1])
    if best_eta is None:
        raise HarnessError(f"every step size in {list(eta_grid)} diverged; try a wider grid with smaller values")
    return best_eta


def estimate_L(dataset: FederatedDataset, eta_grid: Sequence[float] = DEFAULT_ETA_GRID,
               probe_rounds: int = 30, base: SolverConfig | None = None) -> float:
    """``1/eta`` for the best fixed-step q-FedSGD (q = 0) probe on ``dataset``."""
    base = base or SolverConfig(algorithm="qfedsgd")
    m = sum(1 for s in dataset.shards if s.train_idx.size)
    base = replace(base, algorithm="qfedsgd", q=0.0, max_rounds=probe_rounds, patience=0,
                   devices_per_round=min(base.devices_per_round, m))

    def probe(eta: float) -> list[float]:
        cfg = replace(base, L=1.0 / eta)
        res = run(cfg, dataset)
        fed = Federation(dataset, cfg)
        return [fed.objective(fed.model.zeros(), 0.0), *res.objective_history]

    return 1.0 / select_step_size(probe, eta_grid)


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    base: SolverConfig
    q_grid: tuple[float, ...] = DEFAULT_Q_GRID
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    accuracy_drop_tolerance: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if not self.q_grid or 0 not in self.q_grid:
            raise HarnessError("q_grid must be non-empty and contain 0")
        if not self.seeds:
            raise HarnessError("seeds must be non-empty")
        if self.accuracy_drop_tolerance < 0:
            raise HarnessError("accuracy_drop_tolerance must be >= 0")


@dataclass
class SweepReport:
    q_grid: list[float]
    seeds: list[int]
    base_config: dict
    dataset_fingerprint: str
    runs: list[dict]
    per_q: list[dict]
    selected_q: float
    device_specific: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "q_grid": self.q_grid,
            "seeds": self.seeds,
            "base_config": self.base_config,
            "dataset_fingerprint": self.dataset_fingerprint,
            "runs": self.runs,
            "per_q": self.per_q,
            "selected_q": self.selected_q,
            "device_specific": self.device_specific,
        }

    def stats(self, q: float, split: str = "test") -> dict[str, tuple[float, float]]:
        entry = next(e for e in self.per_q if e["q"] == q)
        return {f: tuple(v) for f, v in entry[split].items()}


def summarize_run(q: float, seed: int, result: RunResult) -> dict:
    out = {
        "q": q,
        "seed": seed,
        "rounds_executed": result.rounds_executed,
        "final_objective": result.objective_history[-1] if result.objective_history else None,
        "dataset_fingerprint": result.dataset_fingerprint,
    }
    for split in SPLITS:
        accs = getattr(result, f"per_device_{split}_acc")
        out[f"{split}_acc"] = {str(k): v for k, v in accs.items()}
        out[f"{split}_stats"] = stats_for_split(result, split).values() if accs else None
    out["split_sizes"] = {s: {str(k): v for k, v in d.items()} for s, d in result.split_sizes.items()}
    return out


def _run_pair(args):
    cfg, dataset = args
    return run(cfg, dataset)


def select_q(per_q: list[dict], tolerance: float) -> float:
    """Lowest mean validation variance among q whose mean data-weighted
    validation accuracy is within ``tolerance`` points of q = 0; ties go
    to the smaller q."""
    base = next(e for e in per_q if e["q"] == 0)
    floor = base["val"]["mean_data_weighted"][0] - tolerance
    ok = [e for e in per_q if e["val"]["mean_data_weighted"][0] >= floor]
    return min(ok, key=lambda e: (e["val"]["variance"][0], e["q"]))["q"]


def device_specific_selection(models_by_q: dict[float, np.ndarray], model: ModelSpec,
                              dataset: FederatedDataset, fallback_q: float):
    """Each device keeps the q whose model scores best on its validation split.

    Ties go to the smaller q; devices without validation data take
    ``fallback_q``.  Returns ``(assignment, test_stats)`` where
    ``assignment`` maps device id to q.
    """
    qs = sorted(models_by_q)
    assignment: dict[int, float] = {}
    test_accs: dict[int, float] = {}
    counts: dict[int, int] = {}
    for s in dataset.shards:
        Xv, yv = s.split("val")
        if yv.size:
            scores = [models.accuracy(model, models_by_q[q], Xv, yv) for q in qs]
            chosen = qs[int(np.argmax(scores))]  # argmax returns the first (smallest q) maximum
        else:
            chosen = fallback_q
        assignment[s.device_id] = chosen
        Xt, yt = s.split("test")
        if yt.size:
            test_accs[s.device_id] = models.accuracy(model, models_by_q[chosen], Xt, yt)
            counts[s.device_id] = int(yt.size)
    stats = distribution_stats(AccuracyDistribution.from_maps(test_accs, counts)) if test_accs else None
    return assignment, stats


def sweep(spec: SweepSpec, dataset: FederatedDataset) -> SweepReport:
    """Run every (q, seed) pair; the seed drives both the split and the solver."""
    splits = {seed: split_dataset(dataset, seed) for seed in spec.seeds}
    pairs = [(q, seed) for seed in spec.seeds for q in spec.q_grid]
    jobs = [(replace(spec.base, q=float(q), seed=seed), splits[seed]) for q, seed in pairs]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_run_pair, jobs))
    else:
        results = [_run_pair(j) for j in jobs]
    by_pair = dict(zip(pairs, results))

    runs = [summarize_run(float(q), seed, by_pair[(q, seed)]) for q, seed in sorted(pairs)]
    per_q = []
    for q in sorted(spec.q_grid):
        entry = {"q": float(q)}
        for split in SPLITS:
            stats = [stats_for_split(by_pair[(q, s)], split) for s in spec.seeds]
            entry[split] = {f: list(v) for f, v in aggregate_over_seeds(stats).items()}
        per_q.append(entry)
    selected = select_q(per_q, spec.accuracy_drop_tolerance)

    model = ModelSpec.for_dataset(dataset, spec.base.ridge)
    dev_stats, assignments = [], {}
    for seed in spec.seeds:
        fams = {float(q): by_pair[(q, seed)].final_params for q in spec.q_grid}
        assign, st = device_specific_selection(fams, model, splits[seed], selected)
        assignments[str(seed)] = {str(k): v for k, v in assign.items()}
        if st is not None:
            dev_stats.append(st)
    device_specific = {
        "assignment": assignments,
        "test": {f: list(v) for f, v in aggregate_over_seeds(dev_stats).items()} if dev_stats else None,
    }
    return SweepReport(
        q_grid=[float(q) for q in spec.q_grid],
        seeds=list(spec.seeds),
        base_config=spec.base.to_dict(),
        dataset_fingerprint=dataset.fingerprint(),
        runs=runs,
        per_q=per_q,
        selected_q=float(selected),
        device_specific=device_specific,
    )


# --------------------------------------------------------------------------
# persistence and tables


def dumps_sweep(report: SweepReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def save_sweep(report: SweepReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_sweep(report))


def loads_sweep(text: str, source: str = "<string>") -> SweepReport:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise SweepFormatError(f"{source}: invalid JSON at byte offset {offset}: {exc.msg}") from None
    try:
        return SweepReport(
            q_grid=[float(q) for q in d["q_grid"]],
            seeds=[int(s) for s in d["seeds"]],
            base_config=dict(d["base_config"]),
            dataset_fingerprint=str(d["dataset_fingerprint"]),
            runs=list(d["runs"]),
            per_q=list(d["per_q"]),
            selected_q=float(d["selected_q"]),
            device_specific=dict(d.get("device_specific", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SweepFormatError(f"{source}: missing or invalid sweep field: {exc}") from None


def load_sweep(path) -> SweepReport:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SweepFormatError(f"{path}: not UTF-8 at byte offset {exc.start}") from None
    return loads_sweep(text, str(path))


def summary_csv(per_q: list[dict], split: str = "test") -> str:
    """One row per q with mean and std of every statistic."""
    buf = io.StringIO()
    cols = ["q"] + [f"{f}_{k}" for f in STAT_FIELDS for k in ("mean", "std")]
    buf.write(",".join(cols) + "\n")
    for e in per_q:
        vals = [repr(e["q"])] + [repr(float(x)) for f in STAT_FIELDS for x in e[split][f]]
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def run_histogram(run_summary: dict, num_bins: int = 10, split: str = "test") -> list[int]:
    accs = {int(k): v for k, v in run_summary[f"{split}_acc"].items()}
    sizes = {int(k): v for k, v in run_summary["split_sizes"][split].items()}
    return histogram(AccuracyDistribution.from_maps(accs, sizes), num_bins)


# --------------------------------------------------------------------------
# convergence comparisons


def efficiency_curves(datasets: dict[str, FederatedDataset], configs: dict[str, SolverConfig],
                      split_seed: int = 0) -> list[dict]:
    """Per-round objective and worst-device test accuracy for each
    (dataset, solver) pair.  Early stopping is disabled so every curve
    spans ``max_rounds`` rounds."""
    rows = []
    for dname, ds in datasets.items():
        split = split_dataset(ds, split_seed)
        model = ModelSpec.for_dataset(split)
        tests = [s.split("test") for s in split.shards if s.test_idx.size]
        for sname, cfg in configs.items():
            def record(t, params, obj, _d=dname, _s=sname):
                worst = min(models.accuracy(model, params, X, y) for X, y in tests) if tests else float("nan")
                rows.append({"dataset": _d, "solver": _s, "round": t, "objective": obj,
                             "worst_test_acc": worst})
            run(replace(cfg, patience=0, seed=split_seed), split, on_round=record)
    return rows


def rounds_to_target(rows: list[dict], target: float) -> dict[tuple[str, str], int | None]:
    """First round at which each curve's objective reaches ``target``."""
    out: dict[tuple[str, str], int | None] = {}
    for r in rows:
        key = (r["dataset"], r["solver"])
        out.setdefault(key, None)
        if out[key] is None and r["objective"] <= target:
            out[key] = r["round"]
    return out


def curves_csv(rows: list[dict]) -> str:
    lines = ["dataset,solver,round,objective,worst_test_acc"]
    lines += [f"{r['dataset']},{r['solver']},{r['round']},{r['objective']!r},{r['worst_test_acc']!r}" for r in rows]
    return "\n".join(lines) + "\n"
