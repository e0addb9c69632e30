"""Federated engine: aggregation, metering, round loop, early stopping.

The identity tests (single-client and pooled-gradient) are the core
correctness oracles: federation must reduce to plain training in the
degenerate cases where both are defined.
"""

import inspect

import numpy as np
import pytest

from helpers import population_clients, population_spec, synthetic_linear_client
from fedforecast import fedcore
from fedforecast.clients import FederatedClient, train_local
from fedforecast.data import SupervisedSet, prepare_client
from fedforecast.errors import (
    ConfigError,
    EmptyAggregationError,
    NumericError,
    ShapeError,
)
from fedforecast.fedcore import (
    ClusterConfig,
    ClientUpdate,
    FLConfig,
    ROUND_CSV_HEADER,
    fedavg_aggregate,
    round_csv_rows,
    run_result_json_obj,
    run_training,
    select_participants,
)
from fedforecast.model import (
    ModelParams,
    ModelSpec,
    init_params,
    loss_and_grad,
    param_message_bytes,
)
from fedforecast.optim import OptimizerConfig
from fedforecast.seeds import derive_seed
from fedforecast.serialize import to_json_text


def update(client_id, values, n, spec=None):
    spec = spec or ModelSpec(kind="linear", input_dim=len(values) - 1, horizon=1)
    return ClientUpdate(
        client_id=client_id,
        new_params=ModelParams(spec, np.asarray(values, dtype=float)),
        n_samples=n,
    )


def sgd_config(**kwargs):
    defaults = dict(rounds=3, optimizer=OptimizerConfig(kind="sgd", lr=0.05), seed=0)
    defaults.update(kwargs)
    return FLConfig(**defaults)


# -------------------------------------------------------------- aggregation


def test_aggregate_equal_weights():
    out = fedavg_aggregate([update("a", [1, 3], 2), update("b", [3, 5], 2)])
    np.testing.assert_allclose(out.values, [2.0, 4.0])


def test_aggregate_sample_weighted():
    spec = ModelSpec(kind="linear", input_dim=1, horizon=1)
    out = fedavg_aggregate(
        [
            ClientUpdate("a", ModelParams(spec, np.array([0.0, 0.0])), 1),
            ClientUpdate("b", ModelParams(spec, np.array([3.0, 3.0])), 3),
        ]
    )
    np.testing.assert_allclose(out.values, [2.25, 2.25])


def test_aggregate_single_update_identity():
    u = update("a", [1.5, -2.5], 7)
    np.testing.assert_array_equal(fedavg_aggregate([u]).values, u.new_params.values)


def test_aggregate_empty_rejected():
    with pytest.raises(EmptyAggregationError):
        fedavg_aggregate([])


def test_aggregate_spec_mismatch_rejected():
    a = update("a", [1.0, 2.0], 1)
    b = update("b", [1.0, 2.0, 3.0], 1)
    with pytest.raises(ShapeError):
        fedavg_aggregate([a, b])


def test_aggregate_matches_manual_weighted_mean():
    rng = np.random.default_rng(0)
    spec = ModelSpec(kind="linear", input_dim=4, horizon=1)
    updates = [
        ClientUpdate(f"c{i}", ModelParams(spec, rng.normal(size=5)), int(rng.integers(1, 9)))
        for i in range(6)
    ]
    total = sum(u.n_samples for u in updates)
    manual = sum((u.n_samples / total) * u.new_params.values for u in updates)
    np.testing.assert_allclose(fedavg_aggregate(updates).values, manual, atol=1e-12)


def test_aggregate_of_identical_params_is_identity():
    spec = ModelSpec(kind="linear", input_dim=2, horizon=1)
    values = np.array([0.3, -0.7, 1.1])
    updates = [ClientUpdate(f"c{i}", ModelParams(spec, values), i + 1) for i in range(4)]
    np.testing.assert_allclose(fedavg_aggregate(updates).values, values, atol=1e-15)


# ------------------------------------------------------------ participation


def test_select_participants_ceil_rule():
    ids = ["c3", "c1", "c2", "c0"]
    assert len(select_participants(ids, 0.5, 0, 1)) == 2
    assert len(select_participants(ids, 0.51, 0, 1)) == 3
    assert select_participants(ids, 1.0, 0, 1) == ["c0", "c1", "c2", "c3"]


def test_select_participants_deterministic_and_round_varying():
    ids = [f"c{i}" for i in range(10)]
    a = select_participants(ids, 0.3, 7, 4)
    b = select_participants(ids, 0.3, 7, 4)
    assert a == b == sorted(a)
    rounds = {tuple(select_participants(ids, 0.3, 7, r)) for r in range(8)}
    assert len(rounds) > 1


# ------------------------------------------------------------- round loop


def test_run_reports_and_byte_formulas():
    clients = population_clients(n_clients=4, days=7, seed=1)
    spec = population_spec()
    result = run_training(clients, spec, sgd_config(rounds=3, participation=0.5))
    assert len(result.reports) == 3
    pb = param_message_bytes(spec)
    for report in result.reports:
        assert len(report.participants) == 2  # ceil(0.5 * 4)
        assert len(report.train_losses) == 2
        assert report.bytes_up == 2 * pb
        assert report.bytes_down == 2 * pb
    assert result.bytes_up_total == 3 * 2 * pb


def test_ifca_broadcast_bytes_scale_with_k():
    clients = population_clients(n_clients=4, days=7, seed=1)
    spec = population_spec()
    result = run_training(
        clients,
        spec,
        sgd_config(rounds=2),
        mode="ifca",
        cluster=ClusterConfig(mode="ifca", k=3),
    )
    pb = param_message_bytes(spec)
    for report in result.reports:
        assert report.bytes_up == 4 * pb
        assert report.bytes_down == 4 * 3 * pb
        assert report.n_clusters == 3
        assert set(report.assignment) == {c.client_id for c in clients}


def test_ifca_empty_cluster_retains_initial_params():
    clients = population_clients(n_clients=2, days=7, seed=3)
    spec = population_spec()
    config = sgd_config(rounds=1)
    result = run_training(
        clients, spec, config, mode="ifca", cluster=ClusterConfig(mode="ifca", k=3)
    )
    chosen = set(result.reports[0].assignment.values())
    assert len(chosen) < 3  # 2 clients cannot fill 3 clusters
    for j in range(3):
        if j not in chosen:
            init = init_params(spec, derive_seed(config.seed, "init", j))
            np.testing.assert_array_equal(result.models[j].values, init.values)


def test_hc_tau_extremes_control_cluster_count():
    clients = population_clients(n_clients=4, days=7, seed=2)
    spec = population_spec()
    single = run_training(
        clients,
        spec,
        sgd_config(rounds=3),
        mode="hc",
        cluster=ClusterConfig(mode="hc", tau=1e9, warmup=1),
    )
    assert single.reports[-1].n_clusters == 1
    singletons = run_training(
        clients,
        spec,
        sgd_config(rounds=3),
        mode="hc",
        cluster=ClusterConfig(mode="hc", tau=1e-12, warmup=1),
    )
    assert singletons.reports[-1].n_clusters == 4
    # one-shot: the assignment set in round 2 persists through round 3
    assert singletons.reports[1].assignment == singletons.reports[2].assignment
    assert singletons.assignment == singletons.reports[-1].assignment


def test_hc_warmup_rounds_are_global():
    clients = population_clients(n_clients=4, days=7, seed=2)
    result = run_training(
        clients,
        population_spec(),
        sgd_config(rounds=2),
        mode="hc",
        cluster=ClusterConfig(mode="hc", tau=0.5, warmup=5),
    )
    # training ended inside the warm-up window: still one model, no assignment
    assert all(r.n_clusters == 1 for r in result.reports)
    assert len(result.models) == 1


def test_patience_two_constant_val_stops_after_round_three():
    clients = population_clients(n_clients=3, days=7, seed=0)
    config = sgd_config(rounds=50, local_epochs=0, early_stop_patience=2)
    result = run_training(clients, population_spec(), config)
    assert len(result.reports) == 3


def test_all_client_val_attached_every_eval_and_at_end():
    clients = population_clients(n_clients=3, days=7, seed=0)
    result = run_training(
        clients, population_spec(), sgd_config(rounds=5, eval_every=2)
    )
    flags = [r.all_client_val_loss is not None for r in result.reports]
    assert flags == [False, True, False, True, True]


def test_divergent_run_raises_numeric_error_naming_round():
    clients = population_clients(n_clients=3, days=7, seed=0)
    config = sgd_config(rounds=200, optimizer=OptimizerConfig(kind="sgd", lr=1e4))
    with pytest.raises(NumericError) as err:
        run_training(clients, population_spec(), config)
    assert "round" in str(err.value)


def test_run_twice_identical_serialization():
    clients = population_clients(n_clients=4, days=7, seed=5)
    spec = population_spec()
    config = sgd_config(rounds=4, participation=0.75, seed=9)
    a = run_training(clients, spec, config)
    b = run_training(clients, spec, config)
    assert to_json_text(run_result_json_obj(a)) == to_json_text(run_result_json_obj(b))


def test_round_csv_rows_shape():
    clients = population_clients(n_clients=3, days=7, seed=0)
    result = run_training(clients, population_spec(), sgd_config(rounds=3))
    rows = round_csv_rows(result)
    assert len(rows) == 3
    assert len(ROUND_CSV_HEADER) == 6
    assert [r[0] for r in rows] == [1, 2, 3]
    assert all(len(r) == len(ROUND_CSV_HEADER) for r in rows)


def test_rounds_to_best_val_first_minimum():
    clients = population_clients(n_clients=3, days=7, seed=0)
    result = run_training(clients, population_spec(), sgd_config(rounds=6))
    losses = [r.val_loss for r in result.reports]
    assert result.rounds_to_best_val == int(np.argmin(losses)) + 1


# --------------------------------------------------------------- identities


def test_single_client_federation_equals_local_training():
    clients = population_clients(n_clients=1, archetypes=1, days=10, seed=4)
    spec = population_spec()
    config = sgd_config(rounds=8, local_epochs=2, batch_size=16, seed=3)
    fed = run_training(clients, spec, config)
    init = init_params(spec, derive_seed(config.seed, "init", 0))
    local_params, _ = train_local(clients[0], init, config)
    fed_values = fed.models[0].values
    rel = np.linalg.norm(fed_values - local_params.values) / max(
        1.0, np.linalg.norm(local_params.values)
    )
    assert rel <= 1e-12


def test_one_round_equals_pooled_gradient_step():
    # With E=1, full batch, and one shared scaler, FedAvg's weighted mean of
    # per-client gradient steps is exactly one gradient step on the pooled
    # training set (the classical reduction).
    datasets = [
        synthetic_linear_client(f"c{i}", [0.6, -0.2], 0.4, 60 + 10 * i, 0.05, seed=i)
        for i in range(3)
    ]
    from fedforecast.data import Scaler

    shared = Scaler(mean=1.0, std=0.5)
    lag, horizon = 2, 1
    splits = [
        prepare_client(ds, lag, horizon, value_scaler=shared) for ds in datasets
    ]
    clients = [FederatedClient(s) for s in splits]
    spec = ModelSpec(kind="linear", input_dim=lag, horizon=horizon)
    lr = 0.1
    config = FLConfig(
        rounds=1,
        local_epochs=1,
        batch_size=0,
        optimizer=OptimizerConfig(kind="sgd", lr=lr),
        seed=21,
    )
    fed = run_training(clients, spec, config)

    init = init_params(spec, derive_seed(config.seed, "init", 0))
    pooled_inputs = np.vstack([s.train.inputs for s in splits])
    pooled_targets = np.vstack([s.train.targets for s in splits])
    _, grad = loss_and_grad(init, pooled_inputs, pooled_targets)
    expected = init.values - lr * grad
    assert np.linalg.norm(fed.models[0].values - expected) <= 1e-9


# ------------------------------------------------------------- api surface


def test_server_api_never_accepts_raw_samples():
    # Server-side entry points must consume client handles or ClientUpdate
    # values, never supervised sample arrays: raw data stays client-side.
    server_entry_points = [
        fedcore.fedavg_aggregate,
        fedcore.run_round,
        fedcore.ifca_round,
        fedcore.hc_clustering_round,
        fedcore.hc_cluster_round,
        fedcore.run_training,
        fedcore.select_participants,
    ]
    for fn in server_entry_points:
        for name, param in inspect.signature(fn).parameters.items():
            annotation = str(param.annotation)
            assert "SupervisedSet" not in annotation, f"{fn.__name__}({name})"
            assert "ndarray" not in annotation, f"{fn.__name__}({name})"


def test_client_handle_exposes_no_raw_arrays():
    client = population_clients(n_clients=1, archetypes=1, days=7)[0]
    for name in dir(client):
        if name.startswith("_"):
            continue
        member = inspect.getattr_static(type(client), name, None)
        if member is None:
            value = getattr(client, name)
            assert not isinstance(value, (np.ndarray, SupervisedSet)), name
        elif isinstance(member, property):
            value = getattr(client, name)
            assert not isinstance(value, (np.ndarray, SupervisedSet)), name


def test_client_update_carries_only_params_and_scalars():
    client = population_clients(n_clients=1, archetypes=1, days=7)[0]
    out = client.local_update(
        init_params(population_spec(), 0), sgd_config(rounds=1), round_index=1
    )
    assert isinstance(out.new_params, ModelParams)
    assert isinstance(out.n_samples, int)
    assert isinstance(out.train_loss, float)
    assert isinstance(out.client_id, str)


# ----------------------------------------------------------- config checks


def test_mode_config_cross_checks():
    clients = population_clients(n_clients=2, days=7)
    spec = population_spec()
    with pytest.raises(ConfigError):
        run_training(clients, spec, sgd_config(), mode="ifca",
                     cluster=ClusterConfig(mode="ifca", k=0))
    with pytest.raises(ConfigError):
        run_training(clients, spec, sgd_config(), mode="hc",
                     cluster=ClusterConfig(mode="hc", tau=0.0))
    with pytest.raises(ConfigError):
        run_training(clients, spec, sgd_config(), mode="spiral")
