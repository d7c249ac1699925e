"""Synthetic multi-camera identity worlds.

Every identity has a latent centroid. Clients (datasets) and cameras each
apply their own random affine transform to the rendered centroid, and each
sample adds isotropic noise on top::

    x = C_cam @ (A_client @ (M @ z_id) + b_client) + c_cam + noise

``domain_shift`` scales the client transforms and ``camera_shift`` the camera
ones, so non-IID severity is controlled by two scalars. All random draws are
made before scaling, so changing a magnitude never changes the draws.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .model import SHARED_BATCH_SIZE
from .numcore import make_rng

logger = logging.getLogger(__name__)

WORLD_FORMAT = "fedreid-world"
WORLD_FORMAT_VERSION = 1

# Train image counts of the nine benchmark datasets, largest first.
BENCHMARK_VOLUMES = (32621, 16522, 12936, 7365, 3744, 1940, 632, 450, 248)
BENCHMARK_NAMES = ("MSMT17", "DukeMTMC-reID", "Market-1501", "CUHK03-NP", "PRID2011",
                     "CUHK01", "VIPeR", "3DPeS", "iLIDS-VID")


class ConfigError(ValueError):
    pass


class PartitionError(ValueError):
    pass


class Sample(NamedTuple):
    features: np.ndarray
    identity: int
    camera: int
    client: int


@dataclass
class SampleSet:
    features: np.ndarray  # (n, input_dim)
    identities: np.ndarray  # (n,) int64, world-unique identity ids
    cameras: np.ndarray  # (n,) int64, world-unique camera ids
    clients: np.ndarray  # (n,) int64, -1 for samples owned by nobody

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.identities), -1)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        self.clients = np.asarray(self.clients, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.identities)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.features[i], int(self.identities[i]), int(self.cameras[i]),
                         int(self.clients[i]))

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.features[index], self.identities[index], self.cameras[index],
                         self.clients[index])

    def with_client(self, client: int) -> "SampleSet":
        return SampleSet(self.features, self.identities, self.cameras,
                         np.full(len(self), client, dtype=np.int64))

    @classmethod
    def empty(cls, input_dim: int) -> "SampleSet":
        return cls(np.zeros((0, input_dim)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        return cls(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.identities for p in parts]),
                   np.concatenate([p.cameras for p in parts]),
                   np.concatenate([p.clients for p in parts]))

    def local_labels(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense labels ``0..C-1`` for this set and the identity id of each label."""
        classes, labels = np.unique(self.identities, return_inverse=True)
        return labels.astype(np.int64), classes


@dataclass
class ClientShard:
    client_id: int
    name: str
    train: SampleSet
    query: SampleSet
    gallery: SampleSet
    group: int = 0

    @property
    def volume(self) -> int:
        return len(self.train)

    @property
    def num_classes(self) -> int:
        return len(np.unique(self.train.identities))


@dataclass
class WorldConfig:
    volume_ratios: tuple[float, ...] = BENCHMARK_VOLUMES
    total_train: int = 3000
    samples_per_identity: int = 4
    cameras_per_client: int = 2
    test_identities: int = 30
    test_samples_per_camera: int = 1
    input_dim: int = 16
    latent_dim: int = 8
    domain_shift: float = 0.6
    camera_shift: float = 0.3
    noise: float = 0.5
    group_count: int = 1
    group_spread: float = 0.3
    groups: tuple[int, ...] | None = None
    shared_size: int = 128
    shared_heldout: bool = True
    names: tuple[str, ...] | None = None
    seed: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.volume_ratios)

    def client_volumes(self) -> list[int]:
        total = float(sum(self.volume_ratios))
        # at least 2 samples, so every client can show 2 identities or 2 cameras
        return [max(2, int(round(r / total * self.total_train))) for r in self.volume_ratios]

    def client_groups(self) -> list[int]:
        if self.groups is not None:
            return list(self.groups)
        return [k % self.group_count for k in range(self.num_clients)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("volume_ratios", "groups", "names"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def validate(self) -> None:
        if self.num_clients < 2:
            raise ConfigError("a world needs at least 2 clients")
        if any(r <= 0 for r in self.volume_ratios):
            raise ConfigError("volume_ratios must be positive")
        if self.cameras_per_client < 2:
            raise ConfigError("cameras_per_client must be >= 2")
        if self.samples_per_identity < 2:
            raise ConfigError("samples_per_identity must be >= 2")
        if self.test_identities < 2:
            raise ConfigError("test_identities must be >= 2")
        if self.group_count < 1:
            raise ConfigError("group_count must be >= 1")
        if self.groups is not None and len(self.groups) != self.num_clients:
            raise ConfigError("groups must name one group per client")
        if self.names is not None and len(self.names) != self.num_clients:
            raise ConfigError("names must give one name per client")
        if self.shared_size < SHARED_BATCH_SIZE:
            raise ConfigError(f"shared_size must be >= {SHARED_BATCH_SIZE}")
        if min(self.domain_shift, self.camera_shift, self.noise, self.group_spread) < 0:
            raise ConfigError("shift, spread and noise magnitudes must be non-negative")


@dataclass
class FederatedWorld:
    clients: list[ClientShard]
    shared: SampleSet
    shared_batch_index: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.shared.features.shape[1]

    @property
    def shared_batch(self) -> np.ndarray:
        return self.shared.features[self.shared_batch_index]

    @property
    def volumes(self) -> list[int]:
        return [c.volume for c in self.clients]

    def fingerprint(self) -> str:
        return hashlib.sha256(world_to_text(self).encode("utf-8")).hexdigest()


class _Affine(NamedTuple):
    matrix: np.ndarray
    bias: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.matrix.T + self.bias


def _draw_affine(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, np.ndarray]:
    return rng.standard_normal((dim, dim)) / np.sqrt(dim), rng.standard_normal(dim)


def _affine(raw: tuple[np.ndarray, np.ndarray], scale: float,
            base: _Affine | None = None) -> _Affine:
    dim = raw[0].shape[0]
    if base is None:
        return _Affine(np.eye(dim) + scale * raw[0], scale * raw[1])
    return _Affine(base.matrix + scale * raw[0], base.bias + scale * raw[1])


def _render(rng: np.random.Generator, centroids: np.ndarray, mixing: np.ndarray,
            domain: _Affine, camera: _Affine, noise: float) -> np.ndarray:
    clean = camera.apply(domain.apply(centroids @ mixing.T))
    return clean + noise * rng.standard_normal(clean.shape)


def _test_split(rng, first_id, num_ids, cams, samples_per_cam, client, latent_dim,
                mixing, domain, camera_maps, noise):
    centroids = rng.standard_normal((num_ids, latent_dim))
    feats, ids, cam_ids = [], [], []
    for cam in cams:
        for _ in range(samples_per_cam):
            feats.append(_render(rng, centroids, mixing, domain, camera_maps[cam], noise))
            ids.append(np.arange(first_id, first_id + num_ids))
            cam_ids.append(np.full(num_ids, cam))
    test = SampleSet(np.concatenate(feats), np.concatenate(ids), np.concatenate(cam_ids),
                     np.full(num_ids * len(cams) * samples_per_cam, client))
    return make_query_gallery(test)


def generate_world(config: WorldConfig) -> FederatedWorld:
    """Build a federation of client datasets from ``config``.

    With ``group_count >= 2`` clients of the same group share a transform
    family and differ from it by ``group_spread * domain_shift``; otherwise
    every client draws an independent domain.
    """
    config.validate()
    rng = make_rng(config.seed)
    d, latent = config.input_dim, config.latent_dim
    volumes = config.client_volumes()
    groups = config.client_groups()
    n_groups = max(groups) + 1
    grouped = config.group_count >= 2 or config.groups is not None

    mixing = rng.standard_normal((d, latent)) / np.sqrt(latent)
    family_raw = [_draw_affine(rng, d) for _ in range(n_groups)]
    client_raw = [_draw_affine(rng, d) for _ in range(config.num_clients)]
    camera_raw = [[_draw_affine(rng, d) for _ in range(config.cameras_per_client)]
                  for _ in range(config.num_clients)]
    heldout_raw = _draw_affine(rng, d)
    heldout_cam_raw = [_draw_affine(rng, d) for _ in range(config.cameras_per_client)]

    families = [_affine(raw, config.domain_shift) for raw in family_raw]
    domains = []
    for k in range(config.num_clients):
        if grouped:
            domains.append(_affine(client_raw[k], config.group_spread * config.domain_shift,
                                   families[groups[k]]))
        else:
            domains.append(_affine(client_raw[k], config.domain_shift))

    names = config.names or (BENCHMARK_NAMES if len(volumes) == len(BENCHMARK_NAMES) else None)
    clients = []
    next_id = 0
    for k, volume in enumerate(volumes):
        cams = [k * config.cameras_per_client + j for j in range(config.cameras_per_client)]
        camera_maps = {cam: _affine(camera_raw[k][j], config.camera_shift)
                       for j, cam in enumerate(cams)}
        num_ids = max(2, volume // config.samples_per_identity)
        centroids = rng.standard_normal((num_ids, latent))
        local_id = np.arange(volume) % num_ids
        occurrence = np.arange(volume) // num_ids
        cam_index = (occurrence + local_id) % len(cams)
        feats = np.empty((volume, d))
        for j, cam in enumerate(cams):
            rows = np.flatnonzero(cam_index == j)
            feats[rows] = _render(rng, centroids[local_id[rows]], mixing, domains[k],
                                  camera_maps[cam], config.noise)
        train = SampleSet(feats, next_id + local_id, np.asarray(cams)[cam_index],
                          np.full(volume, k))
        next_id += num_ids
        query, gallery = _test_split(rng, next_id, config.test_identities, cams,
                                     config.test_samples_per_camera, k, latent, mixing,
                                     domains[k], camera_maps, config.noise)
        next_id += config.test_identities
        name = names[k] if names else f"client{k}"
        clients.append(ClientShard(k, name, train, query, gallery, groups[k]))

    shared = _shared_dataset(rng, config, mixing, domains, camera_raw, heldout_raw,
                             heldout_cam_raw, next_id)
    batch_index = np.sort(rng.permutation(len(shared))[:SHARED_BATCH_SIZE])
    return FederatedWorld(clients, shared, batch_index, {"kind": "federation",
                                                          **config.to_dict()})


def _shared_dataset(rng, config, mixing, domains, camera_raw, heldout_raw, heldout_cam_raw,
                    first_id) -> SampleSet:
    """Public dataset. Identities are recorded but never used as training targets."""
    d, latent = config.input_dim, config.latent_dim
    n = config.shared_size
    num_ids = max(2, n // 2)
    centroids = rng.standard_normal((num_ids, latent))
    local_id = np.arange(n) % num_ids
    cam_slot = (np.arange(n) // num_ids + local_id) % config.cameras_per_client
    feats = np.empty((n, d))
    if config.shared_heldout:
        domain = _affine(heldout_raw, config.domain_shift)
        for j in range(config.cameras_per_client):
            rows = np.flatnonzero(cam_slot == j)
            feats[rows] = _render(rng, centroids[local_id[rows]], mixing, domain,
                                  _affine(heldout_cam_raw[j], config.camera_shift), config.noise)
    else:
        # round-robin over the client domains
        owner = np.arange(n) % config.num_clients
        for k in range(config.num_clients):
            for j in range(config.cameras_per_client):
                rows = np.flatnonzero((owner == k) & (cam_slot == j))
                if rows.size:
                    feats[rows] = _render(rng, centroids[local_id[rows]], mixing, domains[k],
                                          _affine(camera_raw[k][j], config.camera_shift),
                                          config.noise)
    cams = 10_000 + cam_slot
    return SampleSet(feats, first_id + local_id, cams, np.full(n, -1))


@dataclass
class CameraDatasetConfig:
    """A single multi-camera dataset, to be split into clients afterwards."""

    num_identities: int = 120
    num_cameras: int = 6
    min_cameras_per_identity: int = 2
    samples_per_camera: int = 2
    test_identities: int = 60
    input_dim: int = 16
    latent_dim: int = 8
    camera_shift: float = 0.6
    noise: float = 0.5
    shared_size: int = 128
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.num_cameras < 2:
            raise ConfigError("a camera dataset needs at least 2 cameras")
        if not 2 <= self.min_cameras_per_identity <= self.num_cameras:
            raise ConfigError("min_cameras_per_identity must lie in [2, num_cameras]")
        if self.num_identities < 2 or self.test_identities < 2:
            raise ConfigError("need at least 2 train and 2 test identities")


def generate_camera_dataset(config: CameraDatasetConfig) -> tuple[SampleSet, SampleSet, SampleSet,
                                                                   SampleSet]:
    """Return ``(train, query, gallery, shared)`` for one multi-camera dataset."""
    config.validate()
    rng = make_rng(config.seed)
    d, latent = config.input_dim, config.latent_dim
    mixing = rng.standard_normal((d, latent)) / np.sqrt(latent)
    identity_map = _Affine(np.eye(d), np.zeros(d))
    cams = list(range(config.num_cameras))
    camera_maps = {c: _affine(_draw_affine(rng, d), config.camera_shift) for c in cams}

    def render_ids(first_id, num_ids, all_cameras):
        centroids = rng.standard_normal((num_ids, latent))
        feats, ids, cam_ids = [], [], []
        for i in range(num_ids):
            if all_cameras:
                seen = cams
            else:
                count = int(rng.integers(config.min_cameras_per_identity, config.num_cameras + 1))
                seen = sorted(int(c) for c in rng.choice(config.num_cameras, count, replace=False))
            for cam in seen:
                rep = np.repeat(centroids[i:i + 1], config.samples_per_camera, axis=0)
                feats.append(_render(rng, rep, mixing, identity_map, camera_maps[cam],
                                     config.noise))
                ids.extend([first_id + i] * config.samples_per_camera)
                cam_ids.extend([cam] * config.samples_per_camera)
        return SampleSet(np.concatenate(feats), np.array(ids), np.array(cam_ids),
                         np.zeros(len(ids), np.int64))

    train = render_ids(0, config.num_identities, all_cameras=False)
    test = render_ids(config.num_identities, config.test_identities, all_cameras=False)
    query, gallery = make_query_gallery(test)
    heldout = _Affine(np.eye(d), np.zeros(d))
    centroids = rng.standard_normal((config.shared_size, latent))
    shared_cam = _affine(_draw_affine(rng, d), config.camera_shift)
    shared = SampleSet(_render(rng, centroids, mixing, heldout, shared_cam, config.noise),
                       config.num_identities + config.test_identities
                       + np.arange(config.shared_size),
                       np.full(config.shared_size, 10_000), np.full(config.shared_size, -1))
    return train, query, gallery, shared


def world_from_shards(shards: Sequence[SampleSet], query: SampleSet, gallery: SampleSet,
                      shared: SampleSet, seed: int = 0, meta: dict | None = None) -> FederatedWorld:
    """Wrap partitioned shards of one dataset as a world; all clients share one test split."""
    clients = [ClientShard(k, f"client{k}", shard.with_client(k), query.with_client(k),
                           gallery.with_client(k)) for k, shard in enumerate(shards)]
    rng = make_rng(seed)
    batch_index = np.sort(rng.permutation(len(shared))[:SHARED_BATCH_SIZE])
    return FederatedWorld(clients, shared, batch_index, dict(meta or {}))


def partition_by_camera(dataset: SampleSet) -> list[SampleSet]:
    """One shard per camera id, in ascending camera order."""
    cams = np.unique(dataset.cameras)
    if len(cams) < 2:
        raise PartitionError("partitioning by camera needs at least 2 cameras")
    return [dataset.subset(np.flatnonzero(dataset.cameras == c)).with_client(k)
            for k, c in enumerate(cams)]


def partition_by_identity(dataset: SampleSet, num_clients: int) -> list[SampleSet]:
    """Split identities (ascending id order) into near-equal contiguous groups.

    The first ``num_clients - I % num_clients`` shards get ``I // num_clients``
    identities and the rest one more.
    """
    ids = np.unique(dataset.identities)
    if num_clients < 1 or num_clients > len(ids):
        raise PartitionError(f"cannot split {len(ids)} identities over {num_clients} clients")
    base, extra = divmod(len(ids), num_clients)
    sizes = [base] * (num_clients - extra) + [base + 1] * extra
    shards, start = [], 0
    for k, size in enumerate(sizes):
        chosen = ids[start:start + size]
        start += size
        shards.append(dataset.subset(np.flatnonzero(np.isin(dataset.identities, chosen)))
                      .with_client(k))
    return shards


def make_query_gallery(test: SampleSet) -> tuple[SampleSet, SampleSet]:
    """Split test samples into queries and gallery, identity by identity.

    For identity ``i`` seen in cameras ``cams`` (ascending), the samples of
    ``cams[i % len(cams)]`` become queries and all other samples go to the
    gallery. Identities seen by a single camera only feed the gallery.
    """
    query_rows, gallery_rows = [], []
    single = 0
    for ident in np.unique(test.identities):
        rows = np.flatnonzero(test.identities == ident)
        cams = np.unique(test.cameras[rows])
        if len(cams) < 2:
            single += 1
            gallery_rows.extend(rows)
            continue
        qcam = cams[ident % len(cams)]
        query_rows.extend(rows[test.cameras[rows] == qcam])
        gallery_rows.extend(rows[test.cameras[rows] != qcam])
    if single:
        logger.info("%d identities seen by one camera only; kept out of the queries", single)
    if not query_rows:
        raise PartitionError("no identity is visible in two cameras; cannot form queries")
    return (test.subset(np.array(query_rows, dtype=np.int64)),
            test.subset(np.array(gallery_rows, dtype=np.int64)))


# --- line-delimited export -------------------------------------------------

def _records(split: str, samples: SampleSet, client: int | None = None) -> Iterator[str]:
    for s in samples:
        yield json.dumps({"split": split,
                          "client": int(s.client if client is None else client),
                          "identity": s.identity, "camera": s.camera,
                          "features": [float(v) for v in s.features]})


def world_to_text(world: FederatedWorld) -> str:
    """Serialize a world: a JSON header line, then one JSON record per sample."""
    header = {"format": WORLD_FORMAT, "version": WORLD_FORMAT_VERSION,
              "input_dim": world.input_dim,
              "clients": [{"client": c.client_id, "name": c.name, "group": c.group}
                          for c in world.clients],
              "shared_batch": [int(i) for i in world.shared_batch_index],
              "config": world.config}
    lines = [json.dumps(header, sort_keys=True)]
    for c in world.clients:
        lines.extend(_records("train", c.train, c.client_id))
        lines.extend(_records("query", c.query, c.client_id))
        lines.extend(_records("gallery", c.gallery, c.client_id))
    lines.extend(_records("shared", world.shared, -1))
    return "\n".join(lines) + "\n"


def world_from_text(text: str) -> FederatedWorld:
    lines = text.splitlines()
    header = json.loads(lines[0])
    if header.get("format") != WORLD_FORMAT:
        raise ValueError("not a world export")
    dim = header["input_dim"]
    buckets: dict[tuple[str, int], list[dict]] = {}
    for line in lines[1:]:
        if not line:
            continue
        rec = json.loads(line)
        buckets.setdefault((rec["split"], rec["client"]), []).append(rec)

    def collect(split, client):
        recs = buckets.get((split, client), [])
        if not recs:
            return SampleSet.empty(dim)
        return SampleSet(np.array([r["features"] for r in recs], dtype=np.float64),
                         np.array([r["identity"] for r in recs]),
                         np.array([r["camera"] for r in recs]),
                         np.array([r["client"] for r in recs]))

    clients = [ClientShard(c["client"], c["name"], collect("train", c["client"]),
                           collect("query", c["client"]), collect("gallery", c["client"]),
                           c.get("group", 0))
               for c in header["clients"]]
    return FederatedWorld(clients, collect("shared", -1),
                          np.array(header["shared_batch"], dtype=np.int64), header["config"])


def export_world(world: FederatedWorld, path: str | Path) -> None:
    Path(path).write_text(world_to_text(world), encoding="utf-8")


def import_world(path: str | Path) -> FederatedWorld:
    return world_from_text(Path(path).read_text(encoding="utf-8"))
