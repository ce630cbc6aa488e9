import json
from dataclasses import replace

import numpy as np
import pytest

from qffl import harness, models
from qffl.harness import (HarnessError, SweepFormatError, SweepSpec, device_specific_selection,
                          estimate_L, select_q, select_step_size, sweep)
from qffl.models import ModelSpec
from qffl.solvers import SolverConfig


def quadratic_probe(a, rounds=30):
    def probe(eta):
        w, traj = 1.0, []
        for _ in range(rounds + 1):
            traj.append(0.5 * a * w * w)
            w -= eta * a * w
        return traj
    return probe


def test_step_size_on_quadratic():
    grid = harness.DEFAULT_ETA_GRID
    for a in (2.0, 4.0, 8.0):
        eta = select_step_size(quadratic_probe(a), grid)
        # within one grid step of 1/a
        pos = grid.index(eta)
        nearest = min(range(len(grid)), key=lambda i: abs(np.log(grid[i] * a)))
        assert abs(pos - nearest) <= 1


def test_step_size_single_and_divergent():
    assert select_step_size(quadratic_probe(1.0), [0.3]) == 0.3
    with pytest.raises(HarnessError, match="wider grid"):
        select_step_size(quadratic_probe(1.0), [1e6])


def test_estimate_L_returns_grid_inverse(small_ds):
    L = estimate_L(small_ds, eta_grid=(10.0, 1.0, 0.1), probe_rounds=5,
                   base=SolverConfig(devices_per_round=4))
    assert L in (0.1, 1.0, 10.0)


def _base(**kw):
    return SolverConfig(algorithm="qfedavg", eta=0.01, L=100.0, scale_delta_by_L=True,
                        devices_per_round=4, max_rounds=6, **kw)


def test_sweep_spec_validation():
    with pytest.raises(HarnessError):
        SweepSpec(base=_base(), q_grid=(1.0,))
    with pytest.raises(HarnessError):
        SweepSpec(base=_base(), seeds=())


def test_singleton_grid_selects_zero(small_raw):
    rep = sweep(SweepSpec(base=_base(), q_grid=(0.0,), seeds=(0,)), small_raw)
    assert rep.selected_q == 0.0


def _entry(q, acc, var):
    return {"q": q, "val": {"mean_data_weighted": [acc, 0.0], "variance": [var, 0.0]}}


def test_select_q_rules():
    per_q = [_entry(0.0, 80.0, 500.0), _entry(1.0, 79.5, 300.0), _entry(2.0, 79.5, 300.0), _entry(5.0, 70.0, 10.0)]
    assert select_q(per_q, 1.0) == 1.0
    assert select_q(per_q, 0.1) == 0.0
    assert select_q(per_q, 20.0) == 5.0


def test_sweep_report_round_trip(tmp_path, small_raw):
    rep = sweep(SweepSpec(base=_base(), q_grid=(0.0, 1.0), seeds=(0, 1)), small_raw)
    assert rep.selected_q in rep.q_grid
    assert len(rep.runs) == 4
    harness.save_sweep(rep, tmp_path / "a.json")
    again = harness.load_sweep(tmp_path / "a.json")
    harness.save_sweep(again, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert harness.summary_csv(rep.per_q).splitlines()[0].startswith("q,mean_data_weighted_mean")
    assert sum(harness.run_histogram(rep.runs[0])) == len(rep.runs[0]["test_acc"])


def test_sweep_parallel_matches_serial(small_raw):
    spec = SweepSpec(base=_base(), q_grid=(0.0, 1.0), seeds=(0,))
    a = harness.dumps_sweep(sweep(spec, small_raw))
    b = harness.dumps_sweep(sweep(replace(spec, workers=2), small_raw))
    assert a == b


def test_malformed_sweep(tmp_path):
    with pytest.raises(SweepFormatError, match="byte offset 11"):
        harness.loads_sweep('{"q_grid": ]')
    with pytest.raises(SweepFormatError, match="byte offset 9"):
        harness.loads_sweep('{"\u00e9\u00e9": ]')  # two 2-byte characters
    with pytest.raises(SweepFormatError, match="missing or invalid sweep field"):
        harness.loads_sweep(json.dumps({"q_grid": [0]}))
    (tmp_path / "bin.json").write_bytes(b'{"a": "\xff"}')
    with pytest.raises(SweepFormatError, match="not UTF-8"):
        harness.load_sweep(tmp_path / "bin.json")


def test_device_specific_single_family(small_ds):
    model = ModelSpec.for_dataset(small_ds)
    w = np.random.default_rng(0).normal(size=model.num_params)
    assign, stats = device_specific_selection({0.0: w}, model, small_ds, 0.0)
    assert set(assign.values()) == {0.0}
    assert stats is not None


def test_device_specific_dominance(small_ds):
    model = ModelSpec.for_dataset(small_ds)
    rng = np.random.default_rng(1)
    fam = {q: rng.normal(size=model.num_params) for q in (0.0, 1.0, 5.0)}
    assign, _ = device_specific_selection(fam, model, small_ds, 1.0)
    for s in small_ds.shards:
        Xv, yv = s.split("val")
        if yv.size:
            chosen = models.accuracy(model, fam[assign[s.device_id]], Xv, yv)
            assert all(chosen >= models.accuracy(model, w, Xv, yv) for w in fam.values())


def test_efficiency_curves_well_formed(small_raw):
    cfgs = {"qfedavg": _base(q=1.0), "qfedsgd": replace(_base(q=1.0), algorithm="qfedsgd")}
    rows = harness.efficiency_curves({"noniid": small_raw}, cfgs)
    for name in cfgs:
        rr = [r for r in rows if r["solver"] == name]
        assert [r["round"] for r in rr] == list(range(1, 7))
        assert all(np.isfinite(r["objective"]) for r in rr)
    hits = harness.rounds_to_target(rows, float("inf"))
    assert set(hits.values()) == {1}
    assert harness.curves_csv(rows).count("\n") == len(rows) + 1
