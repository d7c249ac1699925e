import dataclasses
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedreid.datagen import (BENCHMARK_VOLUMES, CameraDatasetConfig, WorldConfig, generate_camera_dataset,
                             generate_world, world_from_shards)
from fedreid.fedsim import (STRATEGIES, AggregationError, Client, ClusterAssignment,
                            DistillationError, ExperimentConfig, RoundError, RoundUpdate,
                            Simulation, aggregate_clustered, aggregate_volume, aggregation_weights,
                            cdw_weights, cluster_clients, distillation_mse, initial_backbone,
                            kd_finetune, local_train, make_clients, make_optimizer,
                            run_centralized, run_experiment, run_standalone, volume_weights)
from fedreid.model import Backbone, TrainingDivergenceError, train_epoch
from fedreid.numcore import make_rng, param_vector, spawn_seeds

from oracles import brute_force_first_neighbor_clusters


@pytest.fixture(scope="module")
def small_world():
    return generate_world(WorldConfig(seed=1, total_train=400, test_identities=10))


@pytest.fixture(scope="module")
def one_client_world():
    train, query, gallery, shared = generate_camera_dataset(
        CameraDatasetConfig(num_identities=20, test_identities=10, seed=3))
    return world_from_shards([train], query, gallery, shared)


def update(cid, vec, volume=1, distance=0.1, **kw):
    return RoundUpdate(cid, param_vector(vec), volume, distance, **kw)


# --- local training -------------------------------------------------------------

def test_zero_epochs_returns_incoming_and_zero_distance(small_world):
    cfg = ExperimentConfig()
    client = make_clients(small_world, cfg)[0]
    incoming = initial_backbone(cfg, small_world.input_dim, 9).to_vector()
    u = local_train(client, incoming, 0, 32, small_world.shared_batch)
    assert u.trained_backbone.tobytes() == incoming.tobytes()
    assert u.cosine_distance == 0.0


def test_identical_clients_give_identical_updates(small_world):
    cfg = ExperimentConfig()
    shard = small_world.clients[2]
    a = Client(shard, 99, small_world.input_dim, 8, make_optimizer(cfg))
    b = Client(shard, 99, small_world.input_dim, 8, make_optimizer(cfg))
    incoming = initial_backbone(cfg, small_world.input_dim, 9).to_vector()
    ua = local_train(a, incoming, 2, 32, small_world.shared_batch, with_features=True)
    ub = local_train(b, incoming, 2, 32, small_world.shared_batch, with_features=True)
    assert ua.trained_backbone.tobytes() == ub.trained_backbone.tobytes()
    assert ua.cosine_distance == ub.cosine_distance
    assert ua.clustering_features.tobytes() == ub.clustering_features.tobytes()
    assert 0.0 < ua.cosine_distance <= 2.0


def test_classifier_persists_across_rounds(small_world):
    cfg = ExperimentConfig()
    client = make_clients(small_world, cfg)[0]
    incoming = initial_backbone(cfg, small_world.input_dim, 9).to_vector()
    local_train(client, incoming, 1, 32, small_world.shared_batch)
    clf = client.classifier
    local_train(client, incoming, 1, 32, small_world.shared_batch)
    assert client.classifier is clf
    assert client.optimizer.epoch == 2


def test_momentum_reset_switch(small_world):
    cfg = ExperimentConfig()
    incoming = initial_backbone(cfg, small_world.input_dim, 9).to_vector()
    kept = make_clients(small_world, cfg)[0]
    local_train(kept, incoming, 1, 32, small_world.shared_batch)
    local_train(kept, incoming, 1, 32, small_world.shared_batch, reset_momentum=False)
    fresh = make_clients(small_world, cfg)[0]
    local_train(fresh, incoming, 1, 32, small_world.shared_batch)
    local_train(fresh, incoming, 1, 32, small_world.shared_batch)
    assert kept.backbone.weight.tobytes() != fresh.backbone.weight.tobytes()


# --- aggregation weights ----------------------------------------------------------

def test_benchmark_volume_weights():
    w = volume_weights(BENCHMARK_VOLUMES)
    assert max(w) == pytest.approx(0.42, abs=0.01)
    assert min(w) == pytest.approx(0.0032, abs=0.0001)
    assert volume_weights([32621, 248]) == pytest.approx([0.9925, 0.0075], abs=1e-4)


def test_volume_aggregation_reductions():
    u = [update(0, [1.0, 2.0], 5), update(1, [3.0, 6.0], 5)]
    assert list(aggregate_volume(u)) == [2.0, 4.0]
    assert aggregate_volume(u[:1]).tobytes() == u[0].trained_backbone.tobytes()
    with pytest.raises(AggregationError):
        aggregate_volume([update(0, [1.0], 0)])


def test_cdw_weights_fixtures(caplog):
    assert cdw_weights([1.0, 3.0]) == [0.25, 0.75]
    assert cdw_weights([0.2] * 3) == pytest.approx([1 / 3] * 3, abs=1e-15)
    with caplog.at_level(logging.WARNING):
        assert cdw_weights([0.0, 0.0]) == [0.5, 0.5]
    assert "uniform" in caplog.text
    with pytest.raises(AggregationError):
        cdw_weights([-0.1, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1), st.booleans())
def test_weights_lie_on_simplex(k, seed, use_cdw):
    rng = make_rng(seed)
    updates = [update(i, rng.normal(size=4), int(rng.integers(1, 500)), float(rng.uniform(0, 2)))
               for i in range(k)]
    w = aggregation_weights(updates, use_cdw)
    assert all(x >= 0 for x in w)
    assert abs(sum(w) - 1.0) <= 1e-12


# --- clustering -----------------------------------------------------------------

def angle(deg):
    r = np.deg2rad(deg)
    return np.array([np.cos(r), np.sin(r)])


def test_cluster_four_points_by_angle():
    feats = [(1, angle(0)), (2, angle(1)), (3, angle(90)), (4, angle(91))]
    assert cluster_clients(feats).clusters == [[1, 2], [3, 4]]


def test_two_clients_form_one_cluster():
    rng = make_rng(0)
    assert cluster_clients([(0, rng.normal(size=3)), (1, rng.normal(size=3))]).clusters == [[0, 1]]


def test_zero_feature_client_is_singleton(caplog):
    feats = [(0, angle(0)), (1, angle(2)), (2, np.zeros(2)), (3, angle(5))]
    with caplog.at_level(logging.WARNING):
        assert cluster_clients(feats).clusters == [[0, 1, 3], [2]]
    assert "zero-norm" in caplog.text


@pytest.mark.parametrize("seed", range(40))
def test_clustering_matches_brute_force(seed):
    rng = make_rng(seed)
    k = int(rng.integers(2, 17))
    ids = list(rng.permutation(100)[:k])
    dim = int(rng.integers(2, 6))
    vectors = [rng.normal(size=dim) for _ in range(k)]
    got = sorted(sorted(c) for c in cluster_clients(list(zip(ids, vectors))).clusters)
    assert got == brute_force_first_neighbor_clusters(ids, vectors)


def test_aggregate_clustered_reductions():
    u = [update(0, [1.0, 0.0], 3, 0.2), update(1, [0.0, 1.0], 1, 0.5), update(2, [2.0, 2.0], 6, 0.5)]
    whole = aggregate_clustered(u, ClusterAssignment([[0, 1, 2]]), use_cdw=False)[0]
    assert whole.tobytes() == aggregate_volume(u).tobytes()
    a, bc = aggregate_clustered(u, ClusterAssignment([[0], [1, 2]]), use_cdw=True)
    assert list(a) == [1.0, 0.0]
    assert list(bc) == [1.0, 1.5]
    singles = aggregate_clustered(u, ClusterAssignment([[0], [1], [2]]), use_cdw=False)
    assert [list(m) for m in singles] == [[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]
    with pytest.raises(AggregationError):
        aggregate_clustered(u, ClusterAssignment([[0, 1]]), use_cdw=False)


# --- knowledge distillation -----------------------------------------------------------

def kd_setup(seed=0):
    rng = make_rng(seed)
    bb = Backbone(rng.normal(size=(6, 4)), rng.normal(size=4))
    return bb, rng.normal(size=(40, 6)), rng


def test_kd_fixed_point_leaves_backbone_unchanged():
    bb, x, _ = kd_setup()
    vec, before, after = kd_finetune(bb.to_vector(), x, [bb.embed(x)], input_dim=6, hidden_dim=4)
    assert np.max(np.abs(vec - bb.to_vector())) <= 1e-12
    assert before == after == 0.0


def test_kd_mean_of_identical_soft_labels():
    bb, x, rng = kd_setup(1)
    label = np.abs(rng.normal(size=(40, 4)))
    one = kd_finetune(bb.to_vector(), x, [label], input_dim=6, hidden_dim=4)
    three = kd_finetune(bb.to_vector(), x, [label.copy() for _ in range(3)], input_dim=6,
                        hidden_dim=4)
    assert one[0].tobytes() == three[0].tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_kd_never_increases_distillation_mse(seed):
    bb, x, rng = kd_setup(seed)
    labels = [np.abs(rng.normal(size=(40, 4))) for _ in range(3)]
    vec, before, after = kd_finetune(bb.to_vector(), x, labels, input_dim=6, hidden_dim=4)
    assert after <= before
    tuned = Backbone.from_vector(vec, 6, 4)
    assert distillation_mse(tuned, x, np.mean(labels, axis=0)) == after


def test_kd_shape_mismatch():
    bb, x, _ = kd_setup()
    with pytest.raises(DistillationError):
        kd_finetune(bb.to_vector(), x, [np.zeros((40, 4)), np.zeros((39, 4))],
                    input_dim=6, hidden_dim=4)


# --- simulation -------------------------------------------------------------------

def test_single_round_single_client_global_is_trained_backbone(one_client_world):
    cfg = ExperimentConfig(rounds=1, eval_every=1)
    sim = Simulation(cfg, one_client_world)
    sim.run()
    assert sim.global_backbone.tobytes() == sim.local_models[0].tobytes()


def matched_stream_oracle(world, cfg):
    """Train one client for T*E epochs outside any federation machinery."""
    seeds = spawn_seeds(cfg.seed, len(world.clients) + 2)
    client = Client(world.clients[0], seeds[0], world.input_dim, cfg.hidden_dim, make_optimizer(cfg))
    client.backbone = initial_backbone(cfg, world.input_dim, len(world.clients))
    clf = client.ensure_classifier()
    for _ in range(cfg.rounds):
        if cfg.reset_momentum:
            client.optimizer.buffers.clear()
        for _ in range(cfg.local_epochs):
            train_epoch(client.backbone, clf, client.optimizer, client.shard.train.features,
                        client.labels, cfg.batch_size, client.rng)
    return client.backbone.to_vector()


@pytest.mark.parametrize("reset", [True, False])
def test_one_client_fedpav_matches_centralized_stream(one_client_world, reset):
    cfg = ExperimentConfig(rounds=6, eval_every=3, reset_momentum=reset)
    sim = Simulation(cfg, one_client_world)
    sim.run()
    oracle = matched_stream_oracle(one_client_world, cfg)
    assert np.max(np.abs(sim.global_backbone - oracle)) <= 1e-10


def test_centralized_on_one_client_equals_standalone(one_client_world):
    cfg = ExperimentConfig(rounds=4, eval_every=2)
    cen = run_centralized(cfg, one_client_world)
    sa = run_standalone(cfg, one_client_world)
    assert [e["global"][0]["rank1"] for e in cen.evals] == [e["local"][0]["rank1"] for e in sa.evals]
    assert cen.evals[-1]["global"][0]["mAP"] == sa.evals[-1]["local"][0]["mAP"]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_runs_and_is_deterministic(small_world, strategy, tmp_path):
    cfg = ExperimentConfig(strategy=strategy, rounds=3, eval_every=1)
    a = run_experiment(cfg, small_world, tmp_path / "a")
    b = run_experiment(cfg, small_world, tmp_path / "b")
    assert a.summary() == b.summary()
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() == (tmp_path / "b" / "trace.jsonl").read_bytes()
    for r in a.rounds_trace:
        if "clusters" in r:
            flat = sorted(c for cl in r["clusters"] for c in cl)
            assert flat == r["selected"]
        assert abs(sum(r["weights"]) - (len(r["clusters"]) if "clusters" in r else 1)) <= 1e-12
        if "kd" in strategy:
            assert r["kd_mse"][1] <= r["kd_mse"][0]
    assert (a.global_metrics is None) == ("cc" in strategy)


def test_client_selection_and_communication(small_world):
    cfg = ExperimentConfig(rounds=4, eval_every=2, clients_per_round=3)
    report = run_experiment(cfg, small_world)
    assert all(len(r["selected"]) == 3 for r in report.rounds_trace)
    assert report.per_client_bytes == 4 * 2 * report.model_bytes
    assert report.fleet_bytes == 3 * report.per_client_bytes
    assert report.rounds_trace[-1]["comm_bytes"] == report.fleet_bytes
    assert report.model_bytes == (16 * 8 + 8) * 8


def test_classifier_never_reaches_server(small_world):
    fields = {f.name for f in dataclasses.fields(RoundUpdate)}
    assert not any("classifier" in f for f in fields)
    cfg = ExperimentConfig(strategy="fedpav+kd+cdw", rounds=1)
    sim = Simulation(cfg, small_world)
    sim.run()
    backbone_len = len(sim.global_backbone)
    assert all(len(v) == backbone_len for v in sim.local_models.values())
    assert all(len(v) == backbone_len for v in sim.client_models.values())
    server_state = {k: v for k, v in vars(sim).items() if k != "clients"}
    assert not any("classifier" in k for k in server_state)


def test_divergence_reports_round_and_client(small_world, tmp_path):
    cfg = ExperimentConfig(rounds=2, lr_backbone=1e200, lr_classifier=1e200, momentum=0.0)
    with np.errstate(all="ignore"), pytest.raises(RoundError) as info:
        run_experiment(cfg, small_world, tmp_path)
    assert info.value.round_index == 0
    assert info.value.client_id == 0
    assert '"partial": true' in (tmp_path / "trace.jsonl").read_text().splitlines()[-1]


def test_config_validation():
    with pytest.raises(ValueError, match="strategy"):
        ExperimentConfig(strategy="fedavg").validate()
    with pytest.raises(ValueError, match="clients_per_round"):
        ExperimentConfig(clients_per_round=10).validate(9)
    with pytest.raises(ValueError, match="rounds"):
        ExperimentConfig(rounds=0).validate()
    assert ExperimentConfig.from_dict(ExperimentConfig(rounds=7).to_dict()).rounds == 7
