"""Dataset ingestion and Non-IID partitioning into per-client shards.

Sources:

* IDX image/label file pairs (the MNIST distribution format, big-endian,
  magic numbers 2051/2049); pixel bytes are scaled to [0, 1].
* A synthetic multi-context generator: every latent context has its own
  Gaussian class centroids, and all clients of a context draw from the
  same class-conditional distributions. Used as ground truth by the
  acceptance suite.

Partitioning follows the heterogeneous-label recipe: each client gets a
random small label subset and a random shard size, samples are drawn
without replacement across clients, and every shard is split 75/25 into
train/test.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClassExhaustedError, ConfigError, IdxFormatError

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

SHARD_FORMAT = "cgpfl-shards-v1"


@dataclass
class Dataset:
    """A labelled sample pool: features (M, input_dim), labels (M,)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return self.labels.size

    def validate(self) -> None:
        if self.features.ndim != 2 or len(self) < 1:
            raise ConfigError("dataset must hold at least one sample")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError("one label per feature row required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("dataset label out of range")


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    class_set: frozenset[int]


@dataclass
class PartitionConfig:
    num_clients: int = 40
    classes_per_client: int = 3
    shard_size_min: int = 400
    shard_size_max: int = 5000
    train_fraction: float = 0.75
    seed: int = 0

    def validate(self) -> None:
        if self.num_clients < 1 or self.classes_per_client < 1:
            raise ConfigError("num_clients and classes_per_client must be positive")
        if not (0 < self.shard_size_min <= self.shard_size_max):
            raise ConfigError("need 0 < shard_size_min <= shard_size_max")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0, 1)")


def _read_idx_header(raw: bytes, path, expected_magic: int, n_dims: int):
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise OSError(f"truncated IDX file {path}: header incomplete")
    fields = struct.unpack(f">{1 + n_dims}I", raw[:header_len])
    if fields[0] != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}"
        )
    return fields[1:], raw[header_len:]


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair into a Dataset.

    Pixel intensities are divided by 255 and images are flattened row-major,
    so a 28x28 file pair yields input_dim = 784. num_classes is inferred as
    max(label) + 1.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_images = images_path.read_bytes()
    raw_labels = labels_path.read_bytes()

    (n_images, rows, cols), pixels = _read_idx_header(
        raw_images, images_path, _IDX_IMAGES_MAGIC, 3
    )
    (n_labels,), label_bytes = _read_idx_header(
        raw_labels, labels_path, _IDX_LABELS_MAGIC, 1
    )
    if n_images != n_labels:
        raise IdxFormatError(
            f"image count {n_images} != label count {n_labels} "
            f"({images_path} vs {labels_path})"
        )
    if len(pixels) < n_images * rows * cols:
        raise OSError(f"truncated IDX file {images_path}: pixel data incomplete")
    if len(label_bytes) < n_labels:
        raise OSError(f"truncated IDX file {labels_path}: label data incomplete")

    features = (
        np.frombuffer(pixels[: n_images * rows * cols], dtype=np.uint8)
        .reshape(n_images, rows * cols)
        .astype(np.float64)
        / 255.0
    )
    labels = np.frombuffer(label_bytes[:n_labels], dtype=np.uint8).astype(np.int64)
    return Dataset(features, labels, num_classes=int(labels.max()) + 1)


def _split_train_test(
    features: np.ndarray, labels: np.ndarray, train_fraction: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n_train = int(round(train_fraction * labels.size))
    n_train = min(max(n_train, 1), labels.size - 1)
    return (
        features[:n_train],
        labels[:n_train],
        features[n_train:],
        labels[n_train:],
    )


def _spread_counts(total: int, n_parts: int, rng: np.random.Generator) -> np.ndarray:
    """Split `total` into n_parts near-equal counts, extras to random parts."""
    counts = np.full(n_parts, total // n_parts, dtype=np.int64)
    extras = total % n_parts
    if extras:
        counts[rng.permutation(n_parts)[:extras]] += 1
    return counts


def partition_noniid(pool: Dataset, cfg: PartitionConfig) -> list[ClientShard]:
    """Carve a pool into disjoint heterogeneous client shards.

    Each client gets a uniformly random label subset of size
    classes_per_client, a shard size uniform in [shard_size_min,
    shard_size_max], and samples drawn without replacement from the pool
    entries of its labels. Deterministic given cfg.seed; raises
    ClassExhaustedError when a label pool runs dry.
    """
    pool.validate()
    cfg.validate()
    all_labels = np.unique(pool.labels)
    if all_labels.size < cfg.classes_per_client:
        raise ConfigError(
            f"pool has {all_labels.size} distinct labels, "
            f"fewer than classes_per_client={cfg.classes_per_client}"
        )

    rng = np.random.default_rng(cfg.seed)
    pools = {}
    cursors = {}
    for label in all_labels:
        idx = np.flatnonzero(pool.labels == label)
        rng.shuffle(idx)
        pools[int(label)] = idx
        cursors[int(label)] = 0

    shards = []
    for client_id in range(cfg.num_clients):
        chosen = np.sort(rng.choice(all_labels, size=cfg.classes_per_client, replace=False))
        size = int(rng.integers(cfg.shard_size_min, cfg.shard_size_max + 1))
        counts = _spread_counts(size, cfg.classes_per_client, rng)

        taken = []
        for label, want in zip(chosen, counts):
            label = int(label)
            left = pools[label].size - cursors[label]
            if want > left:
                raise ClassExhaustedError(label, needed=int(want - left), available=left)
            taken.append(pools[label][cursors[label] : cursors[label] + want])
            cursors[label] += int(want)

        idx = np.concatenate(taken)
        rng.shuffle(idx)
        ftr, ltr, fte, lte = _split_train_test(
            pool.features[idx], pool.labels[idx], cfg.train_fraction
        )
        shards.append(
            ClientShard(
                client_id=client_id,
                train=Dataset(ftr, ltr, pool.num_classes),
                test=Dataset(fte, lte, pool.num_classes),
                class_set=frozenset(int(c) for c in chosen),
            )
        )
    return shards


def synth_contexts(
    num_contexts: int,
    clients_per_context: int,
    input_dim: int,
    num_classes: int,
    samples_per_client: int,
    separation: float,
    seed: int,
    *,
    class_spread: float = 2.0,
    noise: float = 0.5,
    context_jitter: float = 0.3,
    train_fraction: float = 0.75,
) -> list[ClientShard]:
    """Generate shards for a known multi-context ground truth.

    Class y of context c is a Gaussian blob with standard deviation
    `noise` centred at

        base_y + separation * noise * (v_c + context_jitter * w_{c,y})

    where the base centroids are shared by all contexts, v_c is a unit
    direction per context, and w_{c,y} a unit direction per context and
    class. `separation` is therefore the context offset measured in units
    of the class noise, and separation -> 0 makes the contexts
    statistically identical. The jitter component perturbs each context's
    internal class geometry so that contexts genuinely conflict: a model
    fit to one context misclassifies the others. Clients are ordered
    context-major: clients [c * clients_per_context, (c+1) * ...) belong
    to context c.
    """
    if min(num_contexts, clients_per_context, input_dim, num_classes) < 1:
        raise ConfigError("all synthetic counts must be >= 1")
    if samples_per_client < 4:
        raise ConfigError("samples_per_client too small for a train/test split")
    if separation < 0:
        raise ConfigError("separation must be non-negative")

    rng = np.random.default_rng(seed)
    base = class_spread * rng.standard_normal((num_classes, input_dim))
    ctx_dirs = rng.standard_normal((num_contexts, input_dim))
    ctx_dirs /= np.linalg.norm(ctx_dirs, axis=1, keepdims=True)
    class_dirs = rng.standard_normal((num_contexts, num_classes, input_dim))
    class_dirs /= np.linalg.norm(class_dirs, axis=2, keepdims=True)
    offsets = ctx_dirs[:, None, :] + context_jitter * class_dirs
    centroids = base[None, :, :] + separation * noise * offsets

    shards = []
    for context in range(num_contexts):
        for j in range(clients_per_context):
            counts = _spread_counts(samples_per_client, num_classes, rng)
            labels = np.repeat(np.arange(num_classes, dtype=np.int64), counts)
            rng.shuffle(labels)
            features = centroids[context, labels] + noise * rng.standard_normal(
                (samples_per_client, input_dim)
            )
            ftr, ltr, fte, lte = _split_train_test(features, labels, train_fraction)
            shards.append(
                ClientShard(
                    client_id=context * clients_per_context + j,
                    train=Dataset(ftr, ltr, num_classes),
                    test=Dataset(fte, lte, num_classes),
                    class_set=frozenset(range(num_classes)),
                )
            )
    return shards


def save_shards(shards: list[ClientShard], out_dir, extra: dict | None = None) -> Path:
    """Dump shards: manifest.json plus one little-endian float32 blob per client.

    Each blob holds the client's train rows followed by its test rows;
    labels and row counts live in the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    input_dim = shards[0].train.features.shape[1]
    manifest = {
        "format": SHARD_FORMAT,
        "num_classes": shards[0].train.num_classes,
        "input_dim": int(input_dim),
        "clients": [],
    }
    if extra:
        manifest["generator"] = extra
    for shard in shards:
        name = f"client_{shard.client_id:03d}.f32"
        blob = np.concatenate([shard.train.features, shard.test.features])
        (out_dir / name).write_bytes(blob.astype("<f4").tobytes())
        manifest["clients"].append(
            {
                "client_id": shard.client_id,
                "class_set": sorted(shard.class_set),
                "features_file": name,
                "train_count": len(shard.train),
                "test_count": len(shard.test),
                "train_labels": shard.train.labels.tolist(),
                "test_labels": shard.test.labels.tolist(),
            }
        )
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_shards(in_dir) -> list[ClientShard]:
    """Read back a shard dump written by :func:`save_shards`."""
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != SHARD_FORMAT:
        raise ConfigError(f"unrecognised shard dump format {manifest.get('format')!r}")
    num_classes = manifest["num_classes"]
    input_dim = manifest["input_dim"]
    shards = []
    for entry in manifest["clients"]:
        blob = np.frombuffer(
            (in_dir / entry["features_file"]).read_bytes(), dtype="<f4"
        ).astype(np.float64)
        n_train, n_test = entry["train_count"], entry["test_count"]
        features = blob.reshape(n_train + n_test, input_dim)
        shards.append(
            ClientShard(
                client_id=entry["client_id"],
                train=Dataset(
                    features[:n_train],
                    np.asarray(entry["train_labels"], dtype=np.int64),
                    num_classes,
                ),
                test=Dataset(
                    features[n_train:],
                    np.asarray(entry["test_labels"], dtype=np.int64),
                    num_classes,
                ),
                class_set=frozenset(entry["class_set"]),
            )
        )
    return shards
