"""Round-based federated solvers.

Implemented rounds:

* ``fedavg``   -- local SGD on K sampled devices, server averages the models.
* ``fedsgd``   -- one full-batch gradient per sampled device, fixed step ``eta``.
* ``qfedsgd``  -- gradients reweighted by ``F_k^q`` with the dynamic step
  ``1 / sum_k h_k`` from the local Lipschitz bound.
* ``qfedavg``  -- as ``qfedsgd`` but with local-SGD model differences in
  place of gradients.
* ``afl``      -- non-stochastic agnostic federated learning: every device
  participates, ``w`` descends the lambda-mixture, lambda ascends the loss
  vector and is projected back onto the simplex.

Server reductions always run in ascending device-id order so results do
not depend on how device work is scheduled.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import models
from .data import FederatedDataset
from .models import ModelSpec
from .objective import EPS_FLOOR, lipschitz_estimate, qffl_value
from .rngdet import SeededStream

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedsgd", "qfedsgd", "qfedavg", "afl")
SAMPLING = ("weighted", "uniform")


class SolverError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    algorithm: str = "qfedavg"
    q: float = 0.0
    L: float = 1.0
    eta: float = 0.1
    epochs: int = 1
    batch_size: int = 10
    devices_per_round: int = 10
    max_rounds: int = 200
    sampling: str = "weighted"
    seed: int = 0
    patience: int = 10
    scale_delta_by_L: bool = False
    afl_gamma_w: float = 0.1
    afl_gamma_lambda: float = 0.1
    ridge: float = 0.0
    eps_floor: float = EPS_FLOOR

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {', '.join(ALGORITHMS)}")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"unknown sampling mode {self.sampling!r}; expected weighted or uniform")
        checks = {
            "q": self.q >= 0,
            "L": self.L > 0,
            "eta": self.eta >= 0,
            "epochs": self.epochs >= 1,
            "batch_size": self.batch_size >= 1,
            "devices_per_round": self.devices_per_round >= 1,
            "max_rounds": self.max_rounds >= 0,
            "afl_gamma_w": self.afl_gamma_w > 0,
            "afl_gamma_lambda": self.afl_gamma_lambda >= 0,
            "ridge": self.ridge >= 0,
            "eps_floor": self.eps_floor > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError(f"invalid value for {bad[0]}: {getattr(self, bad[0])!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown solver config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RoundState:
    params: np.ndarray
    round: int = 0
    lam: np.ndarray | None = None  # AFL mixture weights


@dataclass(frozen=True, eq=False)
class DeviceUpdate:
    delta: np.ndarray
    h: float


class Federation:
    """Immutable per-run context: model, dataset, and weight vectors."""

    def __init__(self, dataset: FederatedDataset, config: SolverConfig):
        self.dataset = dataset
        self.config = config
        self.model = ModelSpec.for_dataset(dataset, config.ridge)
        self.train = [s.split("train") for s in dataset.shards]
        sizes = np.array([y.size for _, y in self.train], dtype=np.float64)
        if sizes.sum() == 0:
            raise SolverError("dataset has no training samples")
        if config.sampling == "uniform":
            has = (sizes > 0).astype(np.float64)
            self.p = has / has.sum()
        else:
            self.p = sizes / sizes.sum()
        # server reductions walk device ids in ascending order
        self.order = sorted(range(dataset.num_devices), key=lambda i: dataset.shards[i].device_id)

    @property
    def num_devices(self) -> int:
        return self.dataset.num_devices

    def device_loss(self, i: int, params) -> float:
        X, y = self.train[i]
        return models.loss(self.model, params, X, y)

    def device_losses(self, params) -> np.ndarray:
        return np.array([self.device_loss(i, params) if self.train[i][1].size else 0.0
                         for i in range(self.num_devices)])

    def objective(self, params, q: float) -> float:
        return qffl_value(q, self.p, self.device_losses(params))

    def sgd_stream(self, t: int, i: int) -> SeededStream:
        return SeededStream(self.config.seed, f"sgd:round:{t}:device:{self.dataset.shards[i].device_id}")

    def ordered(self, selected) -> list[int]:
        rank = {i: r for r, i in enumerate(self.order)}
        return sorted(selected, key=rank.__getitem__)


# --------------------------------------------------------------------------
# device-side primitives


def sample_devices(p, K: int, rng: SeededStream) -> list[int]:
    """K distinct indices, drawn one at a time with probability proportional
    to the remaining weights."""
    w = np.array(p, dtype=np.float64)
    if np.any(w < 0) or not np.isfinite(w).all():
        raise SolverError("sampling weights must be finite and non-negative")
    if K > int(np.count_nonzero(w)):
        raise SolverError(f"cannot sample {K} distinct devices: only {np.count_nonzero(w)} have positive weight")
    chosen = []
    for _ in range(K):
        cum = np.cumsum(w)
        i = int(np.searchsorted(cum, rng.uniform01() * cum[-1], side="right"))
        i = min(i, int(np.flatnonzero(w)[-1]))
        chosen.append(i)
        w[i] = 0.0
    return chosen


def local_sgd(spec: ModelSpec, params, X, y, epochs: int, eta: float, batch_size: int,
              rng: SeededStream) -> np.ndarray:
    """Minibatch SGD with a fresh shuffle each epoch; the last batch may be short."""
    n = len(y)
    if n == 0:
        raise SolverError("local SGD needs a non-empty training split")
    w = np.array(params, dtype=np.float64)
    models.loss(spec, w, X, y)  # validates shapes and finiteness once
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            b = perm[start:start + batch_size]
            w -= eta * models.batch_gradient(spec, w, X[b], y[b])
    return w


def _server_step(w: np.ndarray, updates: list[DeviceUpdate], t: int) -> np.ndarray:
    num = np.zeros_like(w)
    den = 0.0
    for u in updates:
        num += u.delta
        den += u.h
    if den == 0.0:
        # only reachable when every sampled loss is exactly zero with q >= 1,
        # in which case every delta is zero as well
        return w.copy()
    new = w - num / den
    if not np.isfinite(new).all():
        raise SolverError(f"non-finite server update at round {t}")
    return new


# --------------------------------------------------------------------------
# rounds


def _sample(fed: Federation, t: int) -> list[int]:
    rng = SeededStream(fed.config.seed, f"sample:round:{t}")
    return fed.ordered(sample_devices(fed.p, fed.config.devices_per_round, rng))


def fedavg_round(fed: Federation, state: RoundState, selected: list[int] | None = None) -> RoundState:
    cfg = fed.config
    t = state.round
    selected = _sample(fed, t) if selected is None else fed.ordered(selected)
    w = state.params
    acc = np.zeros_like(w)
    for i in selected:
        X, y = fed.train[i]
        acc += w - local_sgd(fed.model, w, X, y, cfg.epochs, cfg.eta, cfg.batch_size, fed.sgd_stream(t, i))
    # mean of local models, written as the mean local change
    return RoundState(w - acc / len(selected), t + 1)


def fedsgd_round(fed: Federation, state: RoundState, selected: list[int] | None = None) -> RoundState:
    t = state.round
    selected = _sample(fed, t) if selected is None else fed.ordered(selected)
    w = state.params
    acc = np.zeros_like(w)
    for i in selected:
        X, y = fed.train[i]
        acc += models.gradient(fed.model, w, X, y)
    return RoundState(w - fed.config.eta * (acc / len(selected)), t + 1)


def qfedsgd_update(fed: Federation, i: int, w: np.ndarray) -> DeviceUpdate:
    cfg = fed.config
    X, y = fed.train[i]
    F, g = models.loss_and_grad(fed.model, w, X, y)
    h = lipschitz_estimate(cfg.L, cfg.q, F, float(g @ g), cfg.eps_floor)
    return DeviceUpdate(F**cfg.q * g, h)


def qfedsgd_round(fed: Federation, state: RoundState, selected: list[int] | None = None) -> RoundState:
    t = state.round
    selected = _sample(fed, t) if selected is None else fed.ordered(selected)
    updates = [qfedsgd_update(fed, i, state.params) for i in selected]
    return RoundState(_server_step(state.params, updates, t), t + 1)


def qfedavg_update(fed: Federation, i: int, w: np.ndarray, t: int) -> DeviceUpdate:
    cfg = fed.config
    X, y = fed.train[i]
    F = models.loss(fed.model, w, X, y)
    w_local = local_sgd(fed.model, w, X, y, cfg.epochs, cfg.eta, cfg.batch_size, fed.sgd_stream(t, i))
    dw = w - w_local
    if cfg.scale_delta_by_L:
        dw = cfg.L * dw
    h = lipschitz_estimate(cfg.L, cfg.q, F, float(dw @ dw), cfg.eps_floor)
    return DeviceUpdate(F**cfg.q * dw, h)


def qfedavg_round(fed: Federation, state: RoundState, selected: list[int] | None = None) -> RoundState:
    t = state.round
    selected = _sample(fed, t) if selected is None else fed.ordered(selected)
    updates = [qfedavg_update(fed, i, state.params, t) for i in selected]
    return RoundState(_server_step(state.params, updates, t), t + 1)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ks > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def afl_round(fed: Federation, state: RoundState) -> RoundState:
    cfg = fed.config
    w = state.params
    lam = state.lam if state.lam is not None else np.full(fed.num_devices, 1.0 / fed.num_devices)
    F = np.zeros(fed.num_devices)
    step = np.zeros_like(w)
    for i in fed.order:
        X, y = fed.train[i]
        if y.size == 0:
            continue
        F[i], g = models.loss_and_grad(fed.model, w, X, y)
        step += lam[i] * g
    new_w = w - cfg.afl_gamma_w * step
    if not np.isfinite(new_w).all():
        raise SolverError(f"non-finite server update at round {state.round}")
    return RoundState(new_w, state.round + 1, project_simplex(lam + cfg.afl_gamma_lambda * F))


ROUNDS: dict[str, Callable] = {
    "fedavg": fedavg_round,
    "fedsgd": fedsgd_round,
    "qfedsgd": qfedsgd_round,
    "qfedavg": qfedavg_round,
    "afl": afl_round,
}


# --------------------------------------------------------------------------
# driver


@dataclass(eq=False)
class RunResult:
    config: dict
    dataset_fingerprint: str
    device_ids: list[int]
    final_params: np.ndarray
    objective_history: list[float]
    rounds_executed: int
    per_device_train_acc: dict[int, float]
    per_device_val_acc: dict[int, float]
    per_device_test_acc: dict[int, float]
    split_sizes: dict[str, dict[int, int]]
    final_lambda: list[float] | None = None
    wall_time: float = field(default=0.0, compare=False)

    def excluded(self, split: str) -> list[int]:
        """Device ids with no samples in ``split`` (omitted from its accuracies)."""
        accs = getattr(self, f"per_device_{split}_acc")
        return [d for d in self.device_ids if d not in accs]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "dataset_fingerprint": self.dataset_fingerprint,
            "device_ids": self.device_ids,
            "rounds_executed": self.rounds_executed,
            "objective_history": self.objective_history,
            "final_params": self.final_params.tolist(),
            "final_lambda": self.final_lambda,
            "per_device_train_acc": {str(k): v for k, v in self.per_device_train_acc.items()},
            "per_device_val_acc": {str(k): v for k, v in self.per_device_val_acc.items()},
            "per_device_test_acc": {str(k): v for k, v in self.per_device_test_acc.items()},
            "split_sizes": {s: {str(k): v for k, v in d.items()} for s, d in self.split_sizes.items()},
            "excluded": {s: self.excluded(s) for s in ("train", "val", "test")},
        }

    def to_json(self) -> str:
        # wall time is deliberately left out so reruns are byte-identical
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        def ikeys(m):
            return {int(k): v for k, v in m.items()}
        return cls(
            config=d["config"],
            dataset_fingerprint=d["dataset_fingerprint"],
            device_ids=list(d["device_ids"]),
            final_params=np.array(d["final_params"], dtype=np.float64),
            objective_history=list(d["objective_history"]),
            rounds_executed=int(d["rounds_executed"]),
            per_device_train_acc=ikeys(d["per_device_train_acc"]),
            per_device_val_acc=ikeys(d["per_device_val_acc"]),
            per_device_test_acc=ikeys(d["per_device_test_acc"]),
            split_sizes={s: ikeys(m) for s, m in d["split_sizes"].items()},
            final_lambda=d.get("final_lambda"),
        )


def evaluate_accuracies(model: ModelSpec, params, dataset: FederatedDataset) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {"train": {}, "val": {}, "test": {}}
    for s in dataset.shards:
        for split in out:
            X, y = s.split(split)
            if y.size:
                out[split][s.device_id] = models.accuracy(model, params, X, y)
    return out


def run(config: SolverConfig, dataset: FederatedDataset,
        on_round: Callable[[int, np.ndarray, float], None] | None = None,
        init_params: np.ndarray | None = None) -> RunResult:
    """Train from ``w = 0`` for up to ``max_rounds`` rounds.

    After every round the q-objective (with the run's own ``q``) is
    evaluated on all training data; training stops once it has gone
    ``patience`` rounds without a new minimum.  ``patience <= 0`` disables
    early stopping.  ``on_round(t, params, objective)`` is called after each
    round.
    """
    import time

    start = time.perf_counter()
    fed = Federation(dataset, config)
    if config.algorithm != "afl" and config.devices_per_round > np.count_nonzero(fed.p):
        raise ConfigError(f"devices_per_round={config.devices_per_round} exceeds the "
                          f"{np.count_nonzero(fed.p)} devices with training data")
    params = fed.model.zeros() if init_params is None else np.array(init_params, dtype=np.float64)
    state = RoundState(params, 0)
    if config.algorithm == "afl":
        state = replace(state, lam=np.full(fed.num_devices, 1.0 / fed.num_devices))
    step = ROUNDS[config.algorithm]

    history: list[float] = []
    best = np.inf
    stale = 0
    for t in range(config.max_rounds):
        state = step(fed, state)
        obj = fed.objective(state.params, config.q)
        history.append(obj)
        log.info("round %d objective %.6g", t + 1, obj)
        if on_round is not None:
            on_round(t + 1, state.params, obj)
        if obj < best:
            best, stale = obj, 0
        else:
            stale += 1
        if 0 < config.patience <= stale:
            log.info("stopping at round %d: no new minimum for %d rounds", t + 1, stale)
            break

    accs = evaluate_accuracies(fed.model, state.params, dataset)
    sizes = {split: {s.device_id: int(getattr(s, f"{split}_idx").size) for s in dataset.shards}
             for split in ("train", "val", "test")}
    return RunResult(
        config=config.to_dict(),
        dataset_fingerprint=dataset.fingerprint(),
        device_ids=dataset.device_ids,
        final_params=state.params,
        objective_history=history,
        rounds_executed=len(history),
        per_device_train_acc=accs["train"],
        per_device_val_acc=accs["val"],
        per_device_test_acc=accs["test"],
        split_sizes=sizes,
        final_lambda=None if state.lam is None else state.lam.tolist(),
        wall_time=time.perf_counter() - start,
    )
