"""Deterministic synthetic non-IID data.

Each client draws from two class-conditional Gaussian clusters whose
separation vector is rotated by a client-specific angle, so inter-client
shift grows smoothly with the client index. Train splits are balanced
(50% positive); val/test splits are at 10% prevalence, mirroring the
deliberate prevalence mismatch of the target setting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

TRAIN_PREVALENCE = 0.5
EVAL_PREVALENCE = 0.1

# Per-client example counts, scaled down 10x from the reference cohort
# (train 1816/3772/1150/880/1090, val/test 500 each).
DESK_TRAIN_COUNTS = (182, 377, 115, 88, 109)
DESK_EVAL_COUNT = 50


class ManifestError(ValueError):
    """Counts too small to hit the prevalence targets."""


@dataclass(frozen=True)
class PartitionManifest:
    train_counts: tuple[int, ...]
    val_counts: tuple[int, ...]
    test_counts: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.train_counts) == len(self.val_counts) == len(self.test_counts)):
            raise ManifestError("per-split count lists must have equal length")
        for counts, prev in ((self.train_counts, TRAIN_PREVALENCE),
                             (self.val_counts, EVAL_PREVALENCE),
                             (self.test_counts, EVAL_PREVALENCE)):
            for n in counts:
                if n < 2 or round(n * prev) < 1 or round(n * prev) >= n:
                    raise ManifestError(f"count {n} cannot hit prevalence {prev}")

    @property
    def n_clients(self) -> int:
        return len(self.train_counts)

    def totals(self) -> tuple[int, int, int]:
        return (sum(self.train_counts), sum(self.val_counts), sum(self.test_counts))

    def subset(self, client_ids) -> "PartitionManifest":
        return PartitionManifest(
            tuple(self.train_counts[i] for i in client_ids),
            tuple(self.val_counts[i] for i in client_ids),
            tuple(self.test_counts[i] for i in client_ids),
        )


def desk_manifest(n_clients: int = 5) -> PartitionManifest:
    """Default 5-client desk-scale manifest (or its first n_clients)."""
    if not (1 <= n_clients <= len(DESK_TRAIN_COUNTS)):
        raise ManifestError(f"desk manifest supports 1..{len(DESK_TRAIN_COUNTS)} clients")
    return PartitionManifest(
        DESK_TRAIN_COUNTS[:n_clients],
        (DESK_EVAL_COUNT,) * n_clients,
        (DESK_EVAL_COUNT,) * n_clients,
    )


@dataclass
class ClientDataset:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    angle: float = 0.0  # rotation of this client's class-separation vector

    @property
    def sample_count(self) -> int:
        return len(self.train_y)

    def split(self, name: str):
        return {"train": (self.train_x, self.train_y),
                "val": (self.val_x, self.val_y),
                "test": (self.test_x, self.test_y)}[name]


def prevalence(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty split has no prevalence")
    return float(np.mean(labels == 1))


def _separation_vector(d: int, angle: float, separation: float) -> np.ndarray:
    # rotate the base vector (separation along axis 0) in the (0, 1) plane
    v = np.zeros(d)
    v[0] = separation * np.cos(angle)
    v[1] = separation * np.sin(angle)
    return v


def _draw_split(rng, n: int, d: int, sep: np.ndarray, prev_target: float, std: float):
    n_pos = int(round(n * prev_target))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(n)]
    means = np.where(labels[:, None] == 1, sep / 2.0, -sep / 2.0)
    feats = means + rng.normal(0.0, std, size=(n, d))
    return feats, labels


def generate_clients(manifest: PartitionManifest, d: int = 8,
                     shift_scale: float = 0.6, seed: int = 0,
                     separation: float = 2.0, std: float = 1.0) -> list[ClientDataset]:
    """Deterministic in (manifest, d, shift_scale, seed): client k's class
    means sit at ±v/2 with v the base separation vector rotated by
    k * shift_scale radians. shift_scale 0 gives the IID control arm."""
    if shift_scale < 0:
        raise ValueError("shift_scale must be non-negative")
    if d < 2:
        raise ValueError("need at least 2 feature dimensions for rotations")
    clients = []
    for k in range(manifest.n_clients):
        rng = np.random.default_rng([seed, k])
        angle = k * shift_scale
        sep = _separation_vector(d, angle, separation)
        train_x, train_y = _draw_split(rng, manifest.train_counts[k], d, sep,
                                       TRAIN_PREVALENCE, std)
        val_x, val_y = _draw_split(rng, manifest.val_counts[k], d, sep,
                                   EVAL_PREVALENCE, std)
        test_x, test_y = _draw_split(rng, manifest.test_counts[k], d, sep,
                                     EVAL_PREVALENCE, std)
        clients.append(ClientDataset(k, train_x, train_y, val_x, val_y,
                                     test_x, test_y, angle))
    return clients


# --- flat binary export/import -------------------------------------------

_FILE_MAGIC = b"SDS1"


def save_clients(path, clients: list[ClientDataset]) -> None:
    """Flat binary layout: magic, u32 d, u32 n_clients, then per client
    (u32 id, f64 angle, u32 train/val/test counts, then per split the
    little-endian f64 features followed by one label byte per sample)."""
    d = clients[0].train_x.shape[1]
    with open(path, "wb") as f:
        f.write(_FILE_MAGIC)
        f.write(struct.pack("<II", d, len(clients)))
        for c in clients:
            f.write(struct.pack("<IdIII", c.client_id, c.angle,
                                len(c.train_y), len(c.val_y), len(c.test_y)))
            for x, y in (c.split("train"), c.split("val"), c.split("test")):
                f.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
                f.write(np.asarray(y, dtype=np.uint8).tobytes())


def load_clients(path) -> list[ClientDataset]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _FILE_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    d, n_clients = struct.unpack_from("<II", data, 4)
    off = 12
    clients = []
    for _ in range(n_clients):
        cid, angle, n_train, n_val, n_test = struct.unpack_from("<IdIII", data, off)
        off += struct.calcsize("<IdIII")
        splits = []
        for n in (n_train, n_val, n_test):
            x = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
            off += 8 * n * d
            y = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).astype(np.int64)
            off += n
            splits.append((x, y))
        clients.append(ClientDataset(cid, splits[0][0], splits[0][1],
                                     splits[1][0], splits[1][1],
                                     splits[2][0], splits[2][1], angle))
    return clients


def save_manifest_text(path, manifest: PartitionManifest) -> None:
    with open(path, "w") as f:
        f.write(f"n_clients = {manifest.n_clients}\n")
        f.write("train_counts = " + ",".join(map(str, manifest.train_counts)) + "\n")
        f.write("val_counts = " + ",".join(map(str, manifest.val_counts)) + "\n")
        f.write("test_counts = " + ",".join(map(str, manifest.test_counts)) + "\n")
        totals = manifest.totals()
        f.write(f"total_train = {totals[0]}\n")
        f.write(f"total_val = {totals[1]}\n")
        f.write(f"total_test = {totals[2]}\n")


def load_manifest_text(path) -> PartitionManifest:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    def counts(key):
        return tuple(int(v) for v in values[key].split(","))
    return PartitionManifest(counts("train_counts"), counts("val_counts"),
                             counts("test_counts"))
