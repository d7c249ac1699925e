"""Federated Partial Averaging with pluggable server aggregation.

Clients share only the backbone; each keeps a private identity classifier.
The server aggregates uploaded backbones by data volume (plain FedPav) or by
cosine distance weights, optionally splitting clients into first-neighbor
clusters or fine-tuning the aggregate on a shared public dataset.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import metrics as M
from .datagen import ClientShard, FederatedWorld, SampleSet
from .model import (Backbone, Classifier, OptimizerState, SHARED_BATCH_SIZE, TrainingDivergenceError,
                    extract_features, extract_logits, init_backbone, init_classifier,
                    save_checkpoint, sgd_update, train_epoch)
from .numcore import (DegenerateVectorError, ParamVector, cosine_distance, make_rng,
                      param_vector, rng_choice_k, spawn_seeds, weighted_sum)

logger = logging.getLogger(__name__)

STRATEGIES = ("fedpav", "fedpav+cdw", "fedpav+cc", "fedpav+cc+cdw", "fedpav+kd", "fedpav+kd+cdw")
TRACE_SCHEMA = "fedreid-trace/1"
BYTES_PER_PARAM = 8


class AggregationError(ValueError):
    pass


class DistillationError(ValueError):
    pass


class RoundError(RuntimeError):
    def __init__(self, round_index: int, client_id: int, cause: Exception):
        self.round_index = round_index
        self.client_id = client_id
        super().__init__(f"round {round_index}: client {client_id} failed: {cause}")


@dataclass
class ExperimentConfig:
    strategy: str = "fedpav"
    rounds: int = 300
    local_epochs: int = 1
    batch_size: int = 32
    clients_per_round: int | None = None  # None selects every client
    seed: int = 0
    eval_every: int = 10
    hidden_dim: int = 8
    lr_backbone: float = 0.005
    lr_classifier: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step_size: int = 40
    lr_gamma: float = 0.1
    kd_lr: float = 0.0005
    kd_batch_size: int = 32
    cluster_steps: int = 1
    best_k: int = 3
    workers: int = 1
    reset_momentum: bool = True  # fresh optimizer buffers at the start of each round

    @property
    def use_cdw(self) -> bool:
        return "cdw" in self.strategy.split("+")

    @property
    def use_cc(self) -> bool:
        return "cc" in self.strategy.split("+")

    @property
    def use_kd(self) -> bool:
        return "kd" in self.strategy.split("+")

    def validate(self, num_clients: int | None = None) -> None:
        errors = []
        if self.strategy not in STRATEGIES:
            errors.append(f"strategy: must be one of {', '.join(STRATEGIES)}")
        for name in ("rounds", "local_epochs", "batch_size", "eval_every", "hidden_dim",
                     "kd_batch_size", "cluster_steps", "best_k", "workers", "lr_step_size"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1")
        if self.clients_per_round is not None:
            if self.clients_per_round < 1:
                errors.append("clients_per_round: must be >= 1")
            elif num_clients is not None and self.clients_per_round > num_clients:
                errors.append(f"clients_per_round: {self.clients_per_round} exceeds the "
                              f"{num_clients} clients in the world")
        for name in ("lr_backbone", "lr_classifier", "momentum", "weight_decay", "kd_lr"):
            if getattr(self, name) < 0:
                errors.append(f"{name}: must be >= 0")
        if errors:
            raise ValueError("invalid experiment config: " + "; ".join(errors))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"invalid experiment config: unknown keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class RoundUpdate:
    """What a client uploads after local training. Never carries the classifier."""

    client_id: int
    trained_backbone: ParamVector
    data_volume: int
    cosine_distance: float
    clustering_features: np.ndarray | None = None
    soft_labels: np.ndarray | None = None


@dataclass
class ClusterAssignment:
    clusters: list[list[int]]
    models: list[ParamVector] = field(default_factory=list)

    def cluster_of(self, client_id: int) -> int:
        for c, members in enumerate(self.clusters):
            if client_id in members:
                return c
        raise KeyError(client_id)


# --- clients -----------------------------------------------------------------

@dataclass
class Client:
    shard: ClientShard
    seed: int
    input_dim: int
    hidden_dim: int
    optimizer: OptimizerState
    labels: np.ndarray = field(init=False)
    classifier: Classifier | None = None
    backbone: Backbone | None = None
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.labels, _ = self.shard.train.local_labels()
        init_seed, shuffle_seed = spawn_seeds(self.seed, 2)
        self._init_rng = make_rng(init_seed)
        self.rng = make_rng(shuffle_seed)

    @property
    def client_id(self) -> int:
        return self.shard.client_id

    @property
    def volume(self) -> int:
        return self.shard.volume

    def ensure_classifier(self) -> Classifier:
        if self.classifier is None:
            self.classifier = init_classifier(self._init_rng, self.hidden_dim,
                                              int(self.labels.max()) + 1)
        return self.classifier


def make_optimizer(config: ExperimentConfig) -> OptimizerState:
    return OptimizerState(lr_backbone=config.lr_backbone, lr_classifier=config.lr_classifier,
                          momentum=config.momentum, weight_decay=config.weight_decay,
                          step_size=config.lr_step_size, gamma=config.lr_gamma)


def make_clients(world: FederatedWorld, config: ExperimentConfig) -> list[Client]:
    seeds = spawn_seeds(config.seed, len(world.clients) + 2)
    return [Client(shard, seeds[k], world.input_dim, config.hidden_dim, make_optimizer(config))
            for k, shard in enumerate(world.clients)]


def initial_backbone(config: ExperimentConfig, input_dim: int, num_clients: int) -> Backbone:
    seed = spawn_seeds(config.seed, num_clients + 2)[num_clients]
    return init_backbone(make_rng(seed), input_dim, config.hidden_dim)


def local_train(client: Client, incoming: ParamVector, epochs: int, batch_size: int,
                shared_batch: np.ndarray, *, shared_data: np.ndarray | None = None,
                with_features: bool = False, reset_momentum: bool = True) -> RoundUpdate:
    """Run one round of local training from ``incoming`` and build the upload.

    Logits on the shared batch are taken before and after training to get the
    client's cosine distance. A degenerate (all-zero) logit vector yields a
    distance of 0 with a warning. With ``reset_momentum`` the optimizer starts
    the round with empty momentum buffers.
    """
    if reset_momentum:
        client.optimizer.buffers.clear()
    client.backbone = Backbone.from_vector(incoming, client.input_dim, client.hidden_dim)
    classifier = client.ensure_classifier()
    before = extract_logits(client.backbone, classifier, shared_batch)
    x = client.shard.train.features
    for _ in range(epochs):
        train_epoch(client.backbone, classifier, client.optimizer, x, client.labels,
                    batch_size, client.rng)
    after = extract_logits(client.backbone, classifier, shared_batch)
    try:
        distance = cosine_distance(before, after)
    except DegenerateVectorError:
        logger.warning("client %d: zero logits on the shared batch, using distance 0",
                       client.client_id)
        distance = 0.0
    features = None
    if with_features:
        features = extract_features(client.backbone, shared_batch, len(shared_batch))
    soft_labels = None
    if shared_data is not None:
        soft_labels = client.backbone.embed(shared_data)
    return RoundUpdate(client.client_id, client.backbone.to_vector(), client.volume, distance,
                       features, soft_labels)


# --- aggregation ---------------------------------------------------------------

def volume_weights(volumes: Sequence[int]) -> list[float]:
    total = sum(volumes)
    if total <= 0:
        raise AggregationError("total data volume of the selected clients is zero")
    return [v / total for v in volumes]


def aggregate_volume(updates: Sequence[RoundUpdate]) -> ParamVector:
    return weighted_sum([u.trained_backbone for u in updates],
                        volume_weights([u.data_volume for u in updates]))


def cdw_weights(distances: Sequence[float]) -> list[float]:
    """Normalize cosine distances into aggregation weights.

    All-zero distances fall back to uniform weights.
    """
    if len(distances) == 0:
        raise AggregationError("no distances to normalize")
    if any(d < 0 for d in distances):
        raise AggregationError("cosine distances must be non-negative")
    total = sum(distances)
    if total == 0:
        logger.warning("all cosine distances are zero; using uniform weights")
        return [1.0 / len(distances)] * len(distances)
    return [d / total for d in distances]


def aggregation_weights(updates: Sequence[RoundUpdate], use_cdw: bool) -> list[float]:
    if use_cdw:
        return cdw_weights([u.cosine_distance for u in updates])
    return volume_weights([u.data_volume for u in updates])


def _first_neighbor_components(vectors: list[np.ndarray]) -> list[int]:
    n = len(vectors)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = cosine_distance(vectors[i], vectors[j])
    np.fill_diagonal(dist, np.inf)
    first = np.argmin(dist, axis=1)  # lowest index wins ties
    rows, cols = list(range(n)), list(first)
    for i in range(n):
        for j in range(i + 1, n):
            if first[i] == first[j]:
                rows.append(i)
                cols.append(j)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return [int(v) for v in labels]


def cluster_clients(features: Sequence[tuple[int, np.ndarray]], steps: int = 1) -> ClusterAssignment:
    """Group clients whose features are first neighbors (FINCH merge steps).

    ``i`` and ``j`` are linked when one is the other's nearest client by
    cosine distance or both share the same nearest client; clusters are the
    connected components. Later steps repeat the merge on cluster mean
    features. Zero-norm features become singleton clusters.
    """
    if len(features) < 2:
        raise ValueError("clustering needs at least 2 clients")
    length = len(features[0][1])
    if any(len(f) != length for _, f in features):
        raise ValueError("clustering features must all have the same length")
    valid, singletons = [], []
    for cid, f in features:
        if np.linalg.norm(f) == 0.0:
            logger.warning("client %d has zero-norm clustering features; kept alone", cid)
            singletons.append([cid])
        else:
            valid.append((cid, np.asarray(f, dtype=np.float64)))

    groups = [[cid] for cid, _ in valid]
    means = [f for _, f in valid]
    for _ in range(steps):
        if len(groups) < 2:
            break
        labels = _first_neighbor_components(means)
        merged: dict[int, list[int]] = {}
        for g, lab in zip(groups, labels):
            merged.setdefault(lab, []).extend(g)
        if len(merged) == len(groups):
            break
        lookup = dict(valid)
        groups = list(merged.values())
        means = [np.mean([lookup[c] for c in g], axis=0) for g in groups]
    clusters = [sorted(g) for g in groups] + singletons
    clusters.sort(key=lambda g: g[0])
    return ClusterAssignment(clusters)


def aggregate_clustered(updates: Sequence[RoundUpdate], assignment: ClusterAssignment,
                        use_cdw: bool) -> list[ParamVector]:
    """Aggregate inside each cluster; fills and returns ``assignment.models``."""
    by_id = {u.client_id: u for u in updates}
    covered = sorted(c for cluster in assignment.clusters for c in cluster)
    if covered != sorted(by_id):
        raise AggregationError("cluster assignment does not partition the updates")
    models = []
    for cluster in assignment.clusters:
        members = [by_id[c] for c in cluster]
        models.append(weighted_sum([u.trained_backbone for u in members],
                                   aggregation_weights(members, use_cdw)))
    assignment.models = models
    return models


class ServerAggregate(NamedTuple):
    models: list[ParamVector]  # one per cluster, or the single global backbone
    weights: list[float]  # per update, in update order
    assignment: ClusterAssignment | None


def server_aggregate(updates: Sequence[RoundUpdate], strategy: str,
                     cluster_steps: int = 1) -> ServerAggregate:
    """Aggregation step of ``strategy`` (before any distillation)."""
    parts = strategy.split("+")
    use_cdw = "cdw" in parts
    if "cc" in parts:
        assignment = cluster_clients([(u.client_id, u.clustering_features) for u in updates],
                                     steps=cluster_steps)
        models = aggregate_clustered(updates, assignment, use_cdw)
        by_id = {u.client_id: u for u in updates}
        weights = {}
        for members in assignment.clusters:
            weights.update(zip(members, aggregation_weights([by_id[c] for c in members], use_cdw)))
        return ServerAggregate(models, [weights[u.client_id] for u in updates], assignment)
    weights = aggregation_weights(updates, use_cdw)
    return ServerAggregate([weighted_sum([u.trained_backbone for u in updates], weights)],
                           list(weights), None)


def distillation_mse(backbone: Backbone, x: np.ndarray, targets: np.ndarray) -> float:
    """Mean over samples of the squared Euclidean embedding error."""
    diff = backbone.embed(x) - targets
    return float(np.mean(np.sum(diff * diff, axis=1)))


def kd_finetune(global_backbone: ParamVector, shared_data: np.ndarray,
                soft_labels: Sequence[np.ndarray], *, input_dim: int, hidden_dim: int,
                lr: float = 0.0005, batch_size: int = 32,
                momentum: float = 0.9) -> tuple[ParamVector, float, float]:
    """Distill the averaged client embeddings into the global backbone.

    One in-order pass over the shared data with SGD on the embedding MSE.
    Returns the tuned backbone and the full-dataset MSE before and after.
    """
    if len(soft_labels) == 0:
        raise DistillationError("no soft labels to distill")
    shape = soft_labels[0].shape
    if any(s.shape != shape for s in soft_labels):
        raise DistillationError("soft labels differ in shape across clients")
    if shape != (len(shared_data), hidden_dim):
        raise DistillationError(f"soft labels have shape {shape}, expected "
                                f"{(len(shared_data), hidden_dim)}")
    target = np.mean(np.stack(soft_labels), axis=0)
    backbone = Backbone.from_vector(global_backbone, input_dim, hidden_dim)
    before = distillation_mse(backbone, shared_data, target)
    state = OptimizerState(momentum=momentum, weight_decay=0.0)
    params = {"weight": backbone.weight, "bias": backbone.bias}
    for start in range(0, len(shared_data), batch_size):
        x = shared_data[start:start + batch_size]
        pre = x @ backbone.weight + backbone.bias
        d_emb = 2.0 * (np.maximum(pre, 0.0) - target[start:start + batch_size]) / len(x)
        d_pre = d_emb * (pre > 0.0)
        grads = {"weight": x.T @ d_pre, "bias": d_pre.sum(axis=0)}
        try:
            sgd_update(params, grads, {"weight": lr, "bias": lr}, state)
        except TrainingDivergenceError as exc:
            raise DistillationError(f"distillation diverged in block '{exc.block}'") from exc
    after = distillation_mse(backbone, shared_data, target)
    return backbone.to_vector(), before, after


# --- evaluation and reporting --------------------------------------------------

def evaluate_backbone(vec: ParamVector, shard: ClientShard, input_dim: int,
                      hidden_dim: int) -> dict[str, float]:
    return M.evaluate(shard.query, shard.gallery, Backbone.from_vector(vec, input_dim, hidden_dim))


def _mean_metrics(rows: list[dict[str, float]]) -> dict[str, float]:
    return {key: float(np.mean([r[key] for r in rows])) for key in rows[0] if key != "client"}


def best_global(evals: list[dict], best_k: int, key: str = "global") -> tuple[list[int], list[dict]]:
    """Average the ``best_k`` evaluation points ranked by mean client rank-1."""
    points = [e for e in evals if e.get(key)]
    if not points:
        return [], []
    scored = sorted(points, key=lambda e: -float(np.mean([m["rank1"] for m in e[key]])))
    chosen = scored[:best_k]
    n_clients = len(chosen[0][key])
    per_client = [_mean_metrics([e[key][k] for e in chosen]) for k in range(n_clients)]
    return [e["round"] for e in chosen], per_client


def best_per_client(evals: list[dict], best_k: int, key: str = "local") -> list[dict | None]:
    """For every client, average its ``best_k`` evaluation points by its own rank-1."""
    points = [e for e in evals if e.get(key)]
    if not points:
        return []
    n_clients = len(points[0][key])
    out = []
    for k in range(n_clients):
        rows = [e[key][k] for e in points if e[key][k] is not None]
        if not rows:
            out.append(None)
            continue
        rows = sorted(rows, key=lambda m: -m["rank1"])[:best_k]
        out.append(_mean_metrics(rows))
    return out


@dataclass
class MetricsReport:
    strategy: str
    client_names: list[str]
    volumes: list[int]
    rounds: int
    global_metrics: list[dict] | None
    local_metrics: list[dict | None]
    best_rounds: list[int]
    model_bytes: int
    per_client_bytes: int
    fleet_bytes: int
    aggregations: int
    evals: list[dict] = field(default_factory=list)
    rounds_trace: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("evals")
        data.pop("rounds_trace")
        return data

    def mean_rank1(self, key: str = "local") -> float:
        rows = self.global_metrics if key == "global" else self.local_metrics
        return float(np.mean([r["rank1"] for r in rows if r is not None]))


class TraceWriter:
    """Append-only JSONL trace plus a human-readable table, flushed per record."""

    def __init__(self, out_dir: Path | None):
        self.out_dir = out_dir
        self._jsonl = self._table = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self._jsonl = open(out_dir / "trace.jsonl", "w", encoding="utf-8")
            self._table = open(out_dir / "trace.txt", "w", encoding="utf-8")
            self._table.write(f"{'round':>5}  {'kind':<8}{'client':<16}{'rank1':>7}{'rank5':>7}"
                              f"{'rank10':>7}{'mAP':>7}  {'kd_mse':>21}  {'comm_bytes':>12}\n")

    def write(self, record: dict) -> None:
        if self._jsonl is None:
            return
        self._jsonl.write(json.dumps(record, sort_keys=True) + "\n")
        self._jsonl.flush()
        self._table.write(format_record(record))
        self._table.flush()

    def close(self) -> None:
        for fh in (self._jsonl, self._table):
            if fh is not None:
                fh.close()


def format_record(record: dict) -> str:
    lines = []
    kd = record.get("kd_mse")
    kd_txt = f"{kd[0]:.6f}->{kd[1]:.6f}" if kd else "-"
    if record["type"] == "round":
        lines.append(f"{record['round']:>5}  {'round':<8}{'-':<16}{'':>7}{'':>7}{'':>7}{'':>7}  "
                     f"{kd_txt:>21}  {record['comm_bytes']:>12}")
    elif record["type"] == "eval":
        for kind in ("global", "cluster", "local"):
            for row in record.get(kind) or []:
                if row is None:
                    continue
                lines.append(f"{record['round']:>5}  {kind:<8}{row['client']:<16}"
                             f"{row['rank1']:>7.3f}{row['rank5']:>7.3f}{row['rank10']:>7.3f}"
                             f"{row['mAP']:>7.3f}  {'':>21}  {record['comm_bytes']:>12}")
    elif record["type"] == "header":
        lines.append(f"# {record['strategy']}: {len(record['clients'])} clients, "
                     f"{record['model_bytes']} bytes per model")
    else:
        lines.append(json.dumps(record, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def _labelled(names: list[str], rows: list[dict | None]) -> list[dict | None]:
    return [None if r is None else {"client": n, **r} for n, r in zip(names, rows)]


def _strip(rows):
    return [None if r is None else {k: v for k, v in r.items() if k != "client"} for r in rows]


class Simulation:
    """Round-synchronous FedPav server driving a fixed set of clients."""

    def __init__(self, config: ExperimentConfig, world: FederatedWorld,
                 clients: list[Client] | None = None, out_dir: str | Path | None = None,
                 checkpoints: bool = False):
        config.validate(len(world.clients))
        self.config = config
        self.world = world
        self.clients = clients if clients is not None else make_clients(world, config)
        self.input_dim = world.input_dim
        self.global_backbone = initial_backbone(config, self.input_dim, len(world.clients)).to_vector()
        self.assignment: ClusterAssignment | None = None
        # backbone each client starts its next round from
        self.client_models: dict[int, ParamVector] = {c.client_id: self.global_backbone
                                                      for c in self.clients}
        self.local_models: dict[int, ParamVector] = {}
        seeds = spawn_seeds(config.seed, len(world.clients) + 2)
        self.server_rng = make_rng(seeds[-1])
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.checkpoints = checkpoints and self.out_dir is not None
        self.names = [c.shard.name for c in self.clients]
        self.comm_bytes = 0
        self.aggregations = 0

    @property
    def model_bytes(self) -> int:
        return len(self.global_backbone) * BYTES_PER_PARAM

    def _train_selected(self, t: int, selected: list[Client]) -> list[RoundUpdate]:
        cfg = self.config
        shared_data = self.world.shared.features if cfg.use_kd else None

        def job(client: Client) -> RoundUpdate:
            try:
                return local_train(client, self.client_models[client.client_id], cfg.local_epochs,
                                   cfg.batch_size, self.world.shared_batch,
                                   shared_data=shared_data, with_features=cfg.use_cc,
                                   reset_momentum=cfg.reset_momentum)
            except (TrainingDivergenceError, FloatingPointError) as exc:
                raise RoundError(t, client.client_id, exc) from exc

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                return list(pool.map(job, selected))
        return [job(c) for c in selected]

    def step(self, t: int) -> dict:
        """Run round ``t`` and return its trace record."""
        cfg = self.config
        n = len(self.clients)
        k = cfg.clients_per_round or n
        selected = [self.clients[i] for i in sorted(rng_choice_k(self.server_rng, n, k))]
        updates = self._train_selected(t, selected)
        for u in updates:
            self.local_models[u.client_id] = u.trained_backbone

        record = {"type": "round", "round": t + 1, "strategy": cfg.strategy,
                  "selected": [u.client_id for u in updates],
                  "distances": [u.cosine_distance for u in updates]}
        result = server_aggregate(updates, cfg.strategy, cfg.cluster_steps)
        record["weights"] = result.weights
        if cfg.use_cc:
            self.assignment = result.assignment
            for members, model in zip(result.assignment.clusters, result.models):
                for c in members:
                    self.client_models[c] = model
            record["clusters"] = result.assignment.clusters
        else:
            self.global_backbone = result.models[0]
            if cfg.use_kd:
                self.global_backbone, before, after = kd_finetune(
                    self.global_backbone, self.world.shared.features,
                    [u.soft_labels for u in updates], input_dim=self.input_dim,
                    hidden_dim=cfg.hidden_dim, lr=cfg.kd_lr, batch_size=cfg.kd_batch_size,
                    momentum=cfg.momentum)
                record["kd_mse"] = [before, after]
            for c in self.clients:
                self.client_models[c.client_id] = self.global_backbone
        self.aggregations += 1
        self.comm_bytes += M.communication_cost(1, self.model_bytes, len(updates))
        record["comm_bytes"] = self.comm_bytes
        return record

    def evaluate(self, t: int) -> dict:
        cfg = self.config
        hd = cfg.hidden_dim
        record = {"type": "eval", "round": t + 1, "strategy": cfg.strategy,
                  "comm_bytes": self.comm_bytes, "global": None, "cluster": None}
        if cfg.use_cc:
            record["cluster"] = _labelled(self.names, [
                evaluate_backbone(self.client_models[c.client_id], c.shard, self.input_dim, hd)
                for c in self.clients])
            record["clusters"] = self.assignment.clusters if self.assignment else None
        else:
            record["global"] = _labelled(self.names, [
                evaluate_backbone(self.global_backbone, c.shard, self.input_dim, hd)
                for c in self.clients])
        record["local"] = _labelled(self.names, [
            evaluate_backbone(self.local_models[c.client_id], c.shard, self.input_dim, hd)
            if c.client_id in self.local_models else None for c in self.clients])
        return record

    def _checkpoint(self, t: int) -> None:
        ckpt = self.out_dir / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        hd = self.config.hidden_dim
        if not self.config.use_cc:
            save_checkpoint(ckpt / f"round{t + 1:04d}_global.ckpt", self.global_backbone,
                            input_dim=self.input_dim, hidden_dim=hd, epoch=t + 1)
        for cid, vec in sorted(self.local_models.items()):
            save_checkpoint(ckpt / f"round{t + 1:04d}_client{cid}.ckpt", vec,
                            input_dim=self.input_dim, hidden_dim=hd, epoch=t + 1)

    def run(self, on_round: Callable[[dict], None] | None = None) -> MetricsReport:
        cfg = self.config
        writer = TraceWriter(self.out_dir)
        evals, rounds = [], []
        try:
            writer.write({"type": "header", "schema": TRACE_SCHEMA, "strategy": cfg.strategy,
                          "clients": self.names, "volumes": [c.volume for c in self.clients],
                          "model_bytes": self.model_bytes})
            for t in range(cfg.rounds):
                try:
                    record = self.step(t)
                except RoundError as exc:
                    writer.write({"type": "failure", "round": exc.round_index + 1,
                                  "client": exc.client_id, "error": str(exc), "partial": True})
                    raise
                rounds.append(record)
                writer.write(record)
                if on_round is not None:
                    on_round(record)
                if (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1:
                    ev = self.evaluate(t)
                    evals.append(ev)
                    writer.write(ev)
                    if self.checkpoints:
                        self._checkpoint(t)
        finally:
            writer.close()
        return self._report(evals, rounds)

    def _report(self, evals: list[dict], rounds: list[dict]) -> MetricsReport:
        cfg = self.config
        best_rounds, global_rows = best_global(evals, cfg.best_k)
        local_rows = best_per_client(evals, cfg.best_k)
        k = cfg.clients_per_round or len(self.clients)
        return MetricsReport(
            strategy=cfg.strategy, client_names=self.names,
            volumes=[c.volume for c in self.clients], rounds=cfg.rounds,
            global_metrics=_strip(global_rows) if global_rows else None,
            local_metrics=_strip(local_rows), best_rounds=best_rounds,
            model_bytes=self.model_bytes,
            per_client_bytes=M.communication_cost(cfg.rounds, self.model_bytes, 1),
            fleet_bytes=M.communication_cost(cfg.rounds, self.model_bytes, k),
            aggregations=self.aggregations, evals=evals, rounds_trace=rounds)


def run_experiment(config: ExperimentConfig, world: FederatedWorld,
                   out_dir: str | Path | None = None, checkpoints: bool = False,
                   clients: list[Client] | None = None) -> MetricsReport:
    return Simulation(config, world, clients, out_dir, checkpoints).run()


# --- reference training without federation ------------------------------------

def _train_alone(client: Client, start: Backbone, epochs: int, batch_size: int,
                 eval_every: int, evaluate: Callable[[Backbone], list[dict | None]]) -> list[dict]:
    client.backbone = start.copy()
    classifier = client.ensure_classifier()
    evals = []
    for e in range(epochs):
        train_epoch(client.backbone, classifier, client.optimizer, client.shard.train.features,
                    client.labels, batch_size, client.rng)
        if (e + 1) % eval_every == 0 or e == epochs - 1:
            evals.append({"round": e + 1, "rows": evaluate(client.backbone)})
    return evals


def run_standalone(config: ExperimentConfig, world: FederatedWorld) -> MetricsReport:
    """Each client trains on its own shard for ``rounds * local_epochs`` epochs."""
    config.validate(len(world.clients))
    clients = make_clients(world, config)
    start = initial_backbone(config, world.input_dim, len(world.clients))
    epochs = config.rounds * config.local_epochs
    every = config.eval_every * config.local_epochs
    names = [c.shard.name for c in clients]
    per_client_evals = []
    for client in clients:
        evals = _train_alone(client, start, epochs, config.batch_size, every,
                             lambda b, shard=client.shard: [M.evaluate(shard.query, shard.gallery, b)])
        per_client_evals.append(evals)
    evals = []
    for i in range(len(per_client_evals[0])):
        rows = [pce[i]["rows"][0] for pce in per_client_evals]
        evals.append({"type": "eval", "round": per_client_evals[0][i]["round"],
                      "strategy": "standalone", "comm_bytes": 0, "global": None,
                      "cluster": None, "local": _labelled(names, rows)})
    local_rows = best_per_client(evals, config.best_k)
    return MetricsReport("standalone", names, [c.volume for c in clients], config.rounds, None,
                         _strip(local_rows), [], 0, 0, 0, 0, evals, [])


def merge_shards(world: FederatedWorld) -> ClientShard:
    train = SampleSet.concat([c.train for c in world.clients])
    first = world.clients[0]
    return ClientShard(0, "centralized", train, first.query, first.gallery)


def run_centralized(config: ExperimentConfig, world: FederatedWorld) -> MetricsReport:
    """One model on the union of all shards, evaluated on every client's test split.

    Uses client 0's seeds, so on a one-client world it matches that client's
    standalone run exactly.
    """
    config.validate(len(world.clients))
    seeds = spawn_seeds(config.seed, len(world.clients) + 2)
    client = Client(merge_shards(world), seeds[0], world.input_dim, config.hidden_dim,
                    make_optimizer(config))
    start = initial_backbone(config, world.input_dim, len(world.clients))
    names = [c.name for c in world.clients]

    def evaluate(b: Backbone):
        return [M.evaluate(c.query, c.gallery, b) for c in world.clients]

    raw = _train_alone(client, start, config.rounds * config.local_epochs, config.batch_size,
                       config.eval_every * config.local_epochs, evaluate)
    evals = [{"type": "eval", "round": e["round"], "strategy": "centralized", "comm_bytes": 0,
              "global": _labelled(names, e["rows"]), "cluster": None, "local": None} for e in raw]
    best_rounds, global_rows = best_global(evals, config.best_k)
    return MetricsReport("centralized", names, [c.volume for c in world.clients], config.rounds,
                         _strip(global_rows), [], best_rounds, 0, 0, 0, 0, evals, [])
