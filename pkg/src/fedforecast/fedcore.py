"""The federated simulation engine.

The server-side loop: deterministic participant selection, broadcast,
sample-weighted FedAvg aggregation, per-round validation, early stopping,
and exact communication metering. Cluster strategies plug in here: ``hc``
runs warm-up FedAvg rounds, one clustering round over all clients' weight
deltas, then independent per-cluster FedAvg; ``ifca`` broadcasts all k
cluster models every round and lets each participant pick its own.

Privacy boundary: nothing in this module touches raw samples. Server
functions consume client handles only through their narrow methods
(local_update, val_loss, choose_cluster, n_*_samples) and operate on
ClientUpdate values; an API-surface test enforces this.

Byte meters are closed-form and exact:

    param_bytes = param_count * 8 + 16          (16-byte blob header)
    bytes_up    = participants * param_bytes
    bytes_down  = participants * models_broadcast * param_bytes

where models_broadcast is k in ifca mode and 1 otherwise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .cluster import hc_partition
from .errors import ConfigError, EmptyAggregationError, NumericError, ShapeError
from .model import ModelParams, ModelSpec, init_params, param_message_bytes
from .optim import OptimizerConfig
from .privacy import DpConfig
from .seeds import derive_seed, rng_for

MODES = ("global", "hc", "ifca")

IMPROVEMENT_EPS = 1e-6


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 0
    participation: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    early_stop_patience: int = 0
    seed: int = 0
    dp: DpConfig | None = None
    eval_every: int = 10

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"fl rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ConfigError(f"fl local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 0:
            raise ConfigError(f"fl batch_size must be >= 0, got {self.batch_size}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError(
                f"fl participation must be in (0,1], got {self.participation}"
            )
        if self.early_stop_patience < 0:
            raise ConfigError(
                f"fl early_stop_patience must be >= 0, got {self.early_stop_patience}"
            )
        if self.eval_every < 0:
            raise ConfigError(f"fl eval_every must be >= 0, got {self.eval_every}")
        if self.seed < 0:
            raise ConfigError(f"fl seed must be >= 0, got {self.seed}")
        if self.dp is not None and not self.dp.active:
            # clip_norm=inf with sigma=0 is a no-op; normalize so runs with
            # and without the privacy block are indistinguishable end to end.
            object.__setattr__(self, "dp", None)


@dataclass(frozen=True)
class ClusterConfig:
    """Clustering knobs; tau/warmup apply to hc, k to ifca."""

    mode: str = "global"
    tau: float = 0.0
    warmup: int = 5
    k: int = 0
    recluster_every: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown cluster mode {self.mode!r}; expected one of {MODES}")
        if self.recluster_every < 0:
            raise ConfigError(
                f"cluster recluster_every must be >= 0, got {self.recluster_every}"
            )
        if self.mode == "hc":
            if not self.tau > 0:
                raise ConfigError(f"cluster tau must be > 0 for hc mode, got {self.tau}")
            if self.warmup < 1:
                raise ConfigError(f"cluster warmup must be >= 1 for hc mode, got {self.warmup}")
        if self.mode == "ifca" and self.k < 1:
            raise ConfigError(f"cluster k must be >= 1 for ifca mode, got {self.k}")


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    """What a client sends back: new params, its sample count, and loss."""

    client_id: str
    new_params: ModelParams
    n_samples: int
    cluster_id: int = -1
    train_loss: float = math.nan

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ShapeError(f"update n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    participants: tuple[str, ...]
    train_losses: Mapping[str, float]
    val_loss: float
    bytes_up: int
    bytes_down: int
    assignment: Mapping[str, int]
    n_clusters: int
    all_client_val_loss: float | None = None


@dataclass(frozen=True)
class ServerState:
    mode: str
    models: tuple[ModelParams, ...]
    assignment: Mapping[str, int]


@dataclass(frozen=True, eq=False)
class RunResult:
    mode: str
    models: tuple[ModelParams, ...]
    assignment: Mapping[str, int]
    reports: tuple[RoundReport, ...]
    config: FLConfig
    cluster: ClusterConfig
    model_spec: ModelSpec
    seed: int
    wall_time_s: float

    @property
    def rounds_to_best_val(self) -> int:
        """1-based index of the round with the lowest validation loss."""
        best = 0
        for i in range(1, len(self.reports)):
            if self.reports[i].val_loss < self.reports[best].val_loss:
                best = i
        return self.reports[best].round_index

    @property
    def bytes_up_total(self) -> int:
        return sum(r.bytes_up for r in self.reports)

    @property
    def bytes_down_total(self) -> int:
        return sum(r.bytes_down for r in self.reports)


def select_participants(
    client_ids: Sequence[str], participation: float, seed: int, round_index: int
) -> list[str]:
    """ceil(P*N) distinct clients, deterministic in (seed, round), id-sorted."""
    ids = sorted(client_ids)
    count = math.ceil(participation * len(ids))
    perm = rng_for(seed, "participation", round_index).permutation(len(ids))
    return sorted(ids[j] for j in perm[:count])


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Sample-count-weighted mean, summed in ascending client_id order."""
    if len(updates) == 0:
        raise EmptyAggregationError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    spec = ordered[0].new_params.spec
    for u in ordered:
        if u.new_params.spec != spec:
            raise ShapeError(
                f"update for {u.client_id} has spec {u.new_params.spec}, expected {spec}"
            )
    total = sum(u.n_samples for u in ordered)
    acc = np.zeros(spec.param_count)
    for u in ordered:
        acc += (u.n_samples / total) * u.new_params.values
    return ModelParams(spec, acc)


def _weighted_val_loss(pairs: list[tuple[float, int]]) -> float:
    total = sum(n for _, n in pairs)
    if total == 0:
        raise EmptyAggregationError("no validation samples among participants")
    return sum(loss * n for loss, n in pairs) / total


def _client_map(clients) -> dict[str, object]:
    by_id: dict[str, object] = {}
    for c in clients:
        if c.client_id in by_id:
            raise ConfigError(f"duplicate client_id {c.client_id!r}")
        by_id[c.client_id] = c
    return by_id


def run_round(
    state: ServerState, clients, config: FLConfig, round_index: int
) -> tuple[ServerState, RoundReport]:
    """One global FedAvg round (also the hc warm-up round)."""
    by_id = _client_map(clients)
    participants = select_participants(
        list(by_id), config.participation, config.seed, round_index
    )
    broadcast = state.models[0]
    updates = [
        by_id[cid].local_update(broadcast, config, round_index) for cid in participants
    ]
    new_model = fedavg_aggregate(updates)
    val = _weighted_val_loss([by_id[cid].val_loss(new_model) for cid in participants])
    pb = param_message_bytes(broadcast.spec)
    report = RoundReport(
        round_index=round_index,
        participants=tuple(participants),
        train_losses={u.client_id: u.train_loss for u in updates},
        val_loss=val,
        bytes_up=len(participants) * pb,
        bytes_down=len(participants) * pb,
        assignment=dict(state.assignment),
        n_clusters=len(state.models),
    )
    return replace(state, models=(new_model,)), report


def ifca_round(
    state: ServerState, clients, config: FLConfig, round_index: int
) -> tuple[ServerState, RoundReport]:
    """One iterative cluster-self-selection round.

    All k models are broadcast (bytes_down scales by k); each participant
    trains from its argmin-loss model; clusters aggregate independently and
    an empty cluster keeps its previous params.
    """
    by_id = _client_map(clients)
    k = len(state.models)
    participants = select_participants(
        list(by_id), config.participation, config.seed, round_index
    )
    chosen: dict[str, int] = {}
    updates: dict[int, list[ClientUpdate]] = {}
    for cid in participants:
        client = by_id[cid]
        j = client.choose_cluster(state.models)
        chosen[cid] = j
        update = client.local_update(state.models[j], config, round_index, cluster_id=j)
        updates.setdefault(j, []).append(update)
    new_models = tuple(
        fedavg_aggregate(updates[j]) if j in updates else state.models[j]
        for j in range(k)
    )
    val = _weighted_val_loss(
        [by_id[cid].val_loss(new_models[chosen[cid]]) for cid in participants]
    )
    pb = param_message_bytes(state.models[0].spec)
    train_losses: dict[str, float] = {}
    for j in sorted(updates):
        for u in updates[j]:
            train_losses[u.client_id] = u.train_loss
    report = RoundReport(
        round_index=round_index,
        participants=tuple(participants),
        train_losses={cid: train_losses[cid] for cid in participants},
        val_loss=val,
        bytes_up=len(participants) * pb,
        bytes_down=len(participants) * k * pb,
        assignment=dict(sorted(chosen.items())),
        n_clusters=k,
    )
    assignment = dict(state.assignment)
    assignment.update(chosen)
    return replace(state, models=new_models, assignment=assignment), report


def hc_clustering_round(
    state: ServerState, clients, config: FLConfig, tau: float, round_index: int
) -> tuple[ServerState, RoundReport]:
    """The one-shot clustering round: every client participates.

    Deltas (local minus broadcast params) feed average-linkage clustering;
    the resulting groups aggregate their updates into per-cluster models.
    Participation is forced to 100% here so the assignment is a total map.
    """
    by_id = _client_map(clients)
    participants = sorted(by_id)
    updates: dict[str, ClientUpdate] = {}
    deltas: dict[str, np.ndarray] = {}
    for cid in participants:
        broadcast = _model_for(state, cid)
        update = by_id[cid].local_update(broadcast, config, round_index)
        updates[cid] = update
        deltas[cid] = update.new_params.values - broadcast.values
    assignment = hc_partition(deltas, tau)
    k = max(assignment.values()) + 1
    new_models = tuple(
        fedavg_aggregate(
            [updates[cid] for cid in participants if assignment[cid] == j]
        )
        for j in range(k)
    )
    val = _weighted_val_loss(
        [by_id[cid].val_loss(new_models[assignment[cid]]) for cid in participants]
    )
    pb = param_message_bytes(state.models[0].spec)
    report = RoundReport(
        round_index=round_index,
        participants=tuple(participants),
        train_losses={cid: updates[cid].train_loss for cid in participants},
        val_loss=val,
        bytes_up=len(participants) * pb,
        bytes_down=len(participants) * pb,
        assignment=dict(sorted(assignment.items())),
        n_clusters=k,
    )
    return ServerState(state.mode, new_models, dict(sorted(assignment.items()))), report


def hc_cluster_round(
    state: ServerState, clients, config: FLConfig, round_index: int
) -> tuple[ServerState, RoundReport]:
    """Post-clustering hc round: independent FedAvg inside each cluster."""
    by_id = _client_map(clients)
    k = len(state.models)
    participants = select_participants(
        list(by_id), config.participation, config.seed, round_index
    )
    updates: dict[int, list[ClientUpdate]] = {}
    for cid in participants:
        j = state.assignment[cid]
        update = by_id[cid].local_update(state.models[j], config, round_index, cluster_id=j)
        updates.setdefault(j, []).append(update)
    new_models = tuple(
        fedavg_aggregate(updates[j]) if j in updates else state.models[j]
        for j in range(k)
    )
    val = _weighted_val_loss(
        [by_id[cid].val_loss(new_models[state.assignment[cid]]) for cid in participants]
    )
    pb = param_message_bytes(state.models[0].spec)
    train_losses: dict[str, float] = {}
    for j in sorted(updates):
        for u in updates[j]:
            train_losses[u.client_id] = u.train_loss
    report = RoundReport(
        round_index=round_index,
        participants=tuple(participants),
        train_losses={cid: train_losses[cid] for cid in participants},
        val_loss=val,
        bytes_up=len(participants) * pb,
        bytes_down=len(participants) * pb,
        assignment=dict(state.assignment),
        n_clusters=k,
    )
    return replace(state, models=new_models), report


def _model_for(state: ServerState, client_id: str) -> ModelParams:
    if len(state.models) == 1:
        return state.models[0]
    return state.models[state.assignment[client_id]]


def _all_client_val_loss(state: ServerState, clients) -> float:
    """Diagnostic sample-weighted validation loss over every client.

    In ifca mode each client evaluates under its self-selected model; this
    is a simulation-side diagnostic and is not metered as communication.
    """
    pairs = []
    for client in sorted(clients, key=lambda c: c.client_id):
        if state.mode == "ifca":
            model = state.models[client.choose_cluster(state.models)]
        else:
            model = _model_for(state, client.client_id)
        pairs.append(client.val_loss(model))
    return _weighted_val_loss(pairs)


def run_training(
    clients,
    model_spec: ModelSpec,
    config: FLConfig,
    mode: str = "global",
    cluster: ClusterConfig | None = None,
) -> RunResult:
    """Execute up to ``config.rounds`` federated rounds in the given mode.

    Early-stops when the participant-weighted validation loss fails to
    improve by at least 1e-6 for ``early_stop_patience`` consecutive rounds
    (patience 0 disables). Raises NumericError naming the round when losses
    or parameters diverge to non-finite values.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}; expected one of {MODES}")
    if len(clients) < 1:
        raise ConfigError("run_training needs at least one client")
    cluster = cluster or ClusterConfig(mode=mode if mode != "ifca" else "global")
    if mode == "ifca" and cluster.k < 1:
        raise ConfigError("ifca mode requires cluster.k >= 1")
    if mode == "hc" and not cluster.tau > 0:
        raise ConfigError("hc mode requires cluster.tau > 0")

    start = time.perf_counter()
    if mode == "ifca":
        models = tuple(
            init_params(model_spec, derive_seed(config.seed, "init", j))
            for j in range(cluster.k)
        )
    else:
        models = (init_params(model_spec, derive_seed(config.seed, "init", 0)),)
    state = ServerState(mode, models, {})

    reports: list[RoundReport] = []
    best_val = math.inf
    stale_rounds = 0
    for round_index in range(1, config.rounds + 1):
        try:
            if mode == "global":
                state, report = run_round(state, clients, config, round_index)
            elif mode == "ifca":
                state, report = ifca_round(state, clients, config, round_index)
            else:
                state, report = _hc_dispatch(state, clients, config, cluster, round_index)
            if not math.isfinite(report.val_loss):
                raise NumericError(
                    f"validation loss is {report.val_loss}; training diverged"
                )
        except NumericError as exc:
            raise NumericError(f"round {round_index}: {exc}") from None
        if config.eval_every > 0 and round_index % config.eval_every == 0:
            report = replace(
                report, all_client_val_loss=_all_client_val_loss(state, clients)
            )
        reports.append(report)
        if best_val - report.val_loss >= IMPROVEMENT_EPS:
            best_val = report.val_loss
            stale_rounds = 0
        else:
            stale_rounds += 1
            if config.early_stop_patience and stale_rounds >= config.early_stop_patience:
                break
    if reports and reports[-1].all_client_val_loss is None:
        reports[-1] = replace(
            reports[-1], all_client_val_loss=_all_client_val_loss(state, clients)
        )

    assignment = _final_assignment(state, clients)
    return RunResult(
        mode=mode,
        models=state.models,
        assignment=assignment,
        reports=tuple(reports),
        config=config,
        cluster=cluster,
        model_spec=model_spec,
        seed=config.seed,
        wall_time_s=time.perf_counter() - start,
    )


def _hc_dispatch(state, clients, config, cluster: ClusterConfig, round_index: int):
    warmup = cluster.warmup
    if round_index <= warmup:
        return run_round(state, clients, config, round_index)
    if round_index == warmup + 1 or (
        cluster.recluster_every > 0
        and (round_index - warmup - 1) % cluster.recluster_every == 0
    ):
        return hc_clustering_round(state, clients, config, cluster.tau, round_index)
    return hc_cluster_round(state, clients, config, round_index)


def _final_assignment(state: ServerState, clients) -> dict[str, int]:
    """Total client -> cluster map for the final models."""
    if state.mode == "global":
        return {}
    ordered = sorted(clients, key=lambda c: c.client_id)
    if state.mode == "ifca":
        return {c.client_id: c.choose_cluster(state.models) for c in ordered}
    if not state.assignment:
        return {c.client_id: 0 for c in ordered}
    return dict(sorted(state.assignment.items()))


def run_result_json_obj(result: RunResult) -> dict:
    """JSON-ready view of a run; wall time is excluded so reruns are
    byte-identical."""
    cfg = result.config
    dp = cfg.dp
    return {
        "mode": result.mode,
        "seed": result.seed,
        "model_spec": {
            "kind": result.model_spec.kind,
            "input_dim": result.model_spec.input_dim,
            "horizon": result.model_spec.horizon,
            "hidden_dim": result.model_spec.hidden_dim,
        },
        "config": {
            "rounds": cfg.rounds,
            "local_epochs": cfg.local_epochs,
            "batch_size": cfg.batch_size,
            "participation": cfg.participation,
            "optimizer": {
                "kind": cfg.optimizer.kind,
                "lr": cfg.optimizer.lr,
                "beta": cfg.optimizer.beta,
            },
            "early_stop_patience": cfg.early_stop_patience,
            "eval_every": cfg.eval_every,
            "seed": cfg.seed,
            "dp": None
            if dp is None
            else {"clip_norm": dp.clip_norm, "sigma": dp.sigma},
        },
        "cluster": {
            "mode": result.cluster.mode,
            "tau": result.cluster.tau,
            "warmup": result.cluster.warmup,
            "k": result.cluster.k,
            "recluster_every": result.cluster.recluster_every,
        },
        "n_models": len(result.models),
        "assignment": dict(sorted(result.assignment.items())),
        "rounds_to_best_val": result.rounds_to_best_val,
        "bytes_up_total": result.bytes_up_total,
        "bytes_down_total": result.bytes_down_total,
        "reports": [
            {
                "round": r.round_index,
                "participants": list(r.participants),
                "train_losses": dict(sorted(r.train_losses.items())),
                "val_loss": r.val_loss,
                "bytes_up": r.bytes_up,
                "bytes_down": r.bytes_down,
                "assignment": dict(sorted(r.assignment.items())),
                "n_clusters": r.n_clusters,
                "all_client_val_loss": r.all_client_val_loss,
            }
            for r in result.reports
        ],
    }


ROUND_CSV_HEADER = [
    "round",
    "val_loss",
    "bytes_up",
    "bytes_down",
    "n_participants",
    "n_clusters",
]


def round_csv_rows(result: RunResult) -> list[list]:
    return [
        [
            r.round_index,
            r.val_loss,
            r.bytes_up,
            r.bytes_down,
            len(r.participants),
            r.n_clusters,
        ]
        for r in result.reports
    ]
