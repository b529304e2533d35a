"""Round orchestration for FedAvg and FedSkipTwin, with an exact byte ledger."""

from __future__ import annotations

import enum
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import twin as twin_mod
from .datasets import ClientDataset, Partition
from .errors import ConsistencyError, EmptyDatasetError
from .nn import Batch, ParameterVector, TrainConfig, evaluate, l2_norm, loss_and_grad, sgd_step
from .twin import TwinConfig, TwinForecast, TwinModel

BYTES_PER_PARAM = 4
MB = 2 ** 20


@dataclass(frozen=True)
class SkipThresholds:
    tau_mag: float = 0.001
    tau_unc: float = 0.001

    def __post_init__(self):
        for name in ("tau_mag", "tau_unc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


class Decision(str, enum.Enum):
    COMMUNICATE = "communicate"
    SKIP = "skip"


@dataclass(frozen=True)
class Strategy:
    name: str
    thresholds: SkipThresholds | None = None

    FEDAVG = "fedavg"
    FEDSKIPTWIN = "fedskiptwin"

    @classmethod
    def fedavg(cls):
        return cls(cls.FEDAVG)

    @classmethod
    def fedskiptwin(cls, thresholds: SkipThresholds = SkipThresholds()):
        return cls(cls.FEDSKIPTWIN, thresholds)

    @property
    def uses_twins(self) -> bool:
        return self.name == self.FEDSKIPTWIN


@dataclass
class ClientRecord:
    client_id: int
    decision: Decision
    predicted_magnitude: float | None = None
    uncertainty: float | None = None
    actual_norm: float | None = None
    bytes_up: int = 0
    bytes_down: int = 0


@dataclass
class RoundLog:
    round_index: int
    per_client: list[ClientRecord]
    participants: list[int]
    global_accuracy: float
    global_loss: float
    cumulative_bytes: int
    params_digest: str = ""

    @property
    def round_bytes(self) -> int:
        return sum(r.bytes_up + r.bytes_down for r in self.per_client)

    @property
    def skip_rate(self) -> float:
        n = len(self.per_client)
        skips = sum(r.decision is Decision.SKIP for r in self.per_client)
        return skips / n if n else 0.0


@dataclass
class ServerState:
    params: ParameterVector
    twins: dict[int, TwinModel] = field(default_factory=dict)
    logs: list[RoundLog] = field(default_factory=list)
    cumulative_bytes: int = 0


def payload_bytes(params: ParameterVector) -> int:
    """Wire size of one model transfer at 32 bits per parameter."""
    return BYTES_PER_PARAM * len(params)


def params_digest(params: ParameterVector) -> str:
    return hashlib.sha256(np.ascontiguousarray(params.values).tobytes()).hexdigest()


def skip_decision(forecast: TwinForecast, thresholds: SkipThresholds) -> Decision:
    if forecast.cold_start:
        return Decision.COMMUNICATE
    if forecast.predicted_magnitude < thresholds.tau_mag and forecast.uncertainty < thresholds.tau_unc:
        return Decision.SKIP
    return Decision.COMMUNICATE


def client_update(global_params: ParameterVector, data: ClientDataset, cfg: TrainConfig,
                  round_index: int = 1) -> ParameterVector:
    """``cfg.local_epochs`` epochs of minibatch SGD on one client's data.

    Batch order is drawn from (``cfg.rng_seed``, client id, round).
    """
    n = data.size
    if n == 0:
        raise EmptyDatasetError(f"client {data.client_id} has no data")
    rng = np.random.default_rng([cfg.rng_seed, data.client_id, round_index])
    x = data.inputs
    y = data.labels
    params = global_params.copy()
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grad = loss_and_grad(params, Batch(x[idx], y[idx]))
            params = sgd_step(params, grad, cfg.learning_rate)
    return params


def aggregation_weights(participants: Sequence[int], sizes: Mapping[int, int]) -> dict[int, float]:
    missing = [i for i in participants if i not in sizes]
    if missing:
        raise ConsistencyError(f"no dataset size for clients {missing}")
    if any(sizes[i] <= 0 for i in participants):
        raise ConsistencyError("participant dataset sizes must be positive")
    total = sum(sizes[i] for i in participants)
    return {i: sizes[i] / total for i in participants}


def aggregate(theta_prev: ParameterVector, deltas, sizes: Mapping[int, int]) -> ParameterVector:
    """theta_prev plus the size-weighted mean of the participants' deltas.

    ``deltas`` is a sequence of ``(client_id, delta)`` pairs; they are summed
    in ascending client id. An empty sequence returns ``theta_prev``.
    """
    deltas = sorted(deltas, key=lambda item: item[0])
    if not deltas:
        return theta_prev
    for _, delta in deltas:
        theta_prev.check_layout(delta)
    weights = aggregation_weights([cid for cid, _ in deltas], sizes)
    step = np.zeros_like(theta_prev.values)
    for cid, delta in deltas:
        step += weights[cid] * delta.values
    return theta_prev.with_values(theta_prev.values + step)


def twin_seed(seed: int, client_id: int) -> int:
    return int(np.random.SeedSequence([seed, client_id, 0x7717]).generate_state(1)[0])


def init_server(params: ParameterVector, strategy: Strategy, n_clients: int,
                twin_config: TwinConfig = TwinConfig(), seed: int = 0) -> ServerState:
    twins = {}
    if strategy.uses_twins:
        twins = {i: twin_mod.make_twin(twin_config, twin_seed(seed, i)) for i in range(n_clients)}
    return ServerState(params=params, twins=twins)


Predictor = Callable[[TwinModel, int, int], TwinForecast]
ClientFn = Callable[[ParameterVector, ClientDataset, TrainConfig, int], ParameterVector]


def run_round(state: ServerState, t: int, strategy: Strategy, partition: Partition,
              cfg: TrainConfig, test, twin_config: TwinConfig = TwinConfig(), *,
              executor: ThreadPoolExecutor | None = None,
              predictor: Predictor | None = None,
              client_fn: ClientFn | None = None) -> tuple[ServerState, RoundLog]:
    """One round. Returns a new state (the input is left untouched) and its log.

    ``predictor`` and ``client_fn`` default to the twin forecast and
    ``client_update``; tests substitute stubs through them.
    """
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    predictor = predictor or (lambda tw, k, r: twin_mod.predict(tw, k, r))
    client_fn = client_fn or client_update
    theta_prev = state.params
    payload = payload_bytes(theta_prev)

    records = {}
    for client in partition.clients:
        cid = client.client_id
        if strategy.uses_twins:
            fc = predictor(state.twins[cid], twin_config.mc_passes, t)
            decision = skip_decision(fc, strategy.thresholds)
            rec = ClientRecord(cid, decision, fc.predicted_magnitude, fc.uncertainty)
        else:
            rec = ClientRecord(cid, Decision.COMMUNICATE)
        records[cid] = rec

    participants = sorted(cid for cid, r in records.items() if r.decision is Decision.COMMUNICATE)
    by_id = {c.client_id: c for c in partition.clients}

    def work(cid):
        return cid, client_fn(theta_prev, by_id[cid], cfg, t)

    if executor is not None:
        results = list(executor.map(work, participants))
    else:
        results = [work(cid) for cid in participants]

    deltas = []
    for cid, local in results:
        delta = local - theta_prev
        deltas.append((cid, delta))
        rec = records[cid]
        rec.bytes_down = payload
        rec.bytes_up = payload
        rec.actual_norm = l2_norm(delta)

    theta = aggregate(theta_prev, deltas, partition.sizes)

    twins = state.twins
    if strategy.uses_twins and participants:
        twins = dict(state.twins)
        for cid in participants:
            twins[cid] = twin_mod.observe_and_retrain(
                twins[cid], records[cid].actual_norm,
                twin_config.retrain_epochs, twin_config.twin_lr)

    accuracy, loss = evaluate(theta, test)
    per_client = [records[c.client_id] for c in partition.clients]
    round_bytes = sum(r.bytes_up + r.bytes_down for r in per_client)
    log = RoundLog(
        round_index=t,
        per_client=per_client,
        participants=participants,
        global_accuracy=accuracy,
        global_loss=loss,
        cumulative_bytes=state.cumulative_bytes + round_bytes,
        params_digest=params_digest(theta),
    )
    new_state = replace(state, params=theta, twins=twins, logs=state.logs + [log],
                        cumulative_bytes=log.cumulative_bytes)
    return new_state, log


@dataclass
class ExperimentResult:
    logs: list[RoundLog]
    state: ServerState
    summary: dict


def summarize(logs: Sequence[RoundLog], n_clients: int) -> dict:
    rounds = len(logs)
    skips = sum(r.decision is Decision.SKIP for log in logs for r in log.per_client)
    total = logs[-1].cumulative_bytes if logs else 0
    return {
        "final_accuracy": logs[-1].global_accuracy if logs else float("nan"),
        "final_loss": logs[-1].global_loss if logs else float("nan"),
        "total_bytes": total,
        "total_mb": total / MB,
        "mean_skip_rate": skips / (n_clients * rounds) if rounds else 0.0,
        "per_round_skip_rates": [log.skip_rate for log in logs],
        "communicate_count": sum(len(log.participants) for log in logs),
        "rounds": rounds,
        "n_clients": n_clients,
    }


def run_experiment(strategy: Strategy, partition: Partition, test, cfg: TrainConfig,
                   rounds: int, initial_params: ParameterVector,
                   twin_config: TwinConfig = TwinConfig(), *, threads: int = 1,
                   seed: int | None = None, on_round=None) -> ExperimentResult:
    """Run ``rounds`` sequential rounds starting from ``initial_params``."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    seed = cfg.rng_seed if seed is None else seed
    state = init_server(initial_params, strategy, len(partition), twin_config, seed)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(1, rounds + 1):
            state, log = run_round(state, t, strategy, partition, cfg, test, twin_config,
                                   executor=executor)
            if on_round is not None:
                on_round(log)
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(state.logs, state, summarize(state.logs, len(partition)))
