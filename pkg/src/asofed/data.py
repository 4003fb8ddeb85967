"""Per-client data shards whose visible training prefix grows over time.

Also holds the synthetic generators, the label-skew partitioner and the
IDX reader used for Fashion-MNIST.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PAPER_SHARD_RATIO = (2000, 2750, 3250, 4000)
SPLIT = (0.6, 0.2, 0.2)


class IdxFormatError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClientShard:
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    visible_count: int
    growth_rate: float
    train_cap: int = -1
    optimum: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.train_cap < 0:
            object.__setattr__(self, "train_cap", len(self.train_idx))
        if not 0 < self.visible_count <= self.train_cap <= len(self.train_idx):
            raise ValueError(
                f"visible_count {self.visible_count} outside (0, {self.train_cap}]")

    @property
    def total_count(self) -> int:
        return len(self.y)

    @property
    def visible_idx(self) -> np.ndarray:
        return self.train_idx[:self.visible_count]

    def visible(self):
        idx = self.visible_idx
        return self.X[idx], self.y[idx]

    def test(self):
        return self.X[self.test_idx], self.y[self.test_idx]

    def validation(self):
        return self.X[self.val_idx], self.y[self.val_idx]


def split_indices(n: int, rng: np.random.Generator):
    """Shuffle ``range(n)`` and cut it 60/20/20 (train gets at least one)."""
    perm = rng.permutation(n)
    n_train = max(1, int(round(SPLIT[0] * n)))
    n_val = min(n - n_train, int(round(SPLIT[1] * n)))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def make_shard(X, y, rng: np.random.Generator, *, initial_fraction=(0.1, 0.5),
               growth=(0.0005, 0.001), train_rate=1.0, optimum=None) -> ClientShard:
    train, val, test = split_indices(len(y), rng)
    cap = max(1, int(math.ceil(train_rate * len(train) - 1e-9)))
    frac = rng.uniform(*initial_fraction)
    visible = min(cap, max(1, int(math.ceil(frac * cap - 1e-9))))
    return ClientShard(np.asarray(X, dtype=np.float64), np.asarray(y), train, val, test,
                       visible, float(rng.uniform(*growth)), cap, optimum)


def advance_stream(shard: ClientShard) -> ClientShard:
    """Reveal ``ceil(growth_rate * train size)`` more samples, capped."""
    if shard.visible_count >= shard.train_cap:
        return shard
    inc = int(math.ceil(shard.growth_rate * shard.train_cap - 1e-9))
    return replace(shard, visible_count=min(shard.train_cap, shard.visible_count + inc))


# --- synthetic generators -------------------------------------------------

def synth_quadratic(dim: int, n_clients: int, dissimilarity: float, seed, *,
                    samples_per_client=200, noise=0.1, size_skew=0.0,
                    initial_fraction=(1.0, 1.0), growth=(0.0, 0.0)) -> list[ClientShard]:
    """Least-squares clients whose optima sit at ``w* + delta_k``.

    ``||delta_k|| == dissimilarity``; with zero dissimilarity every client
    shares ``w*`` and only sampling noise separates them.  ``size_skew``
    in [0, 1) spreads client sample counts around ``samples_per_client``.
    The defaults show each client its full training split, which is what
    the convergence probes want.
    """
    if dim < 1 or n_clients < 1:
        raise ValueError("dim and n_clients must be >= 1")
    rng = np.random.default_rng(seed)
    w_star = rng.normal(size=dim)
    shards = []
    for _ in range(n_clients):
        u = rng.normal(size=dim)
        u /= max(np.linalg.norm(u), 1e-12)
        opt = w_star + dissimilarity * u
        n = int(round(samples_per_client * rng.uniform(1 - size_skew, 1 + size_skew)))
        n = max(n, 5)
        X = rng.normal(size=(n, dim))
        y = X @ opt + noise * rng.normal(size=n)
        shards.append(make_shard(X, y, rng, initial_fraction=initial_fraction,
                                 growth=growth, optimum=opt))
    return shards


def synth_classification(n_classes: int, dim: int, per_class: int, seed, *,
                         separation=5.0, modes=2):
    """Gaussian-mixture classification data in random order.

    Each class is a mixture of ``modes`` unit-variance blobs whose centres
    sit roughly ``separation`` apart; the mixture keeps a linear model from
    solving the task outright.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation / np.sqrt(2 * dim), size=(n_classes, modes, dim))
    X = np.empty((n_classes * per_class, dim))
    y = np.repeat(np.arange(n_classes), per_class)
    mode = rng.integers(0, modes, size=len(y))
    X[:] = centers[y, mode] + rng.normal(size=(len(y), dim))
    order = rng.permutation(len(y))
    return X[order], y[order]


# --- partitioning ---------------------------------------------------------

def rescale_sizes(total: int, ratio) -> list[int]:
    """Split ``total`` proportionally to ``ratio`` (largest remainder)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    exact = total * ratio / ratio.sum()
    sizes = np.floor(exact).astype(int)
    rest = total - sizes.sum()
    for i in np.argsort(-(exact - sizes), kind="stable")[:rest]:
        sizes[i] += 1
    return sizes.tolist()


@dataclass
class PartitionPlan:
    n_clients: int
    shard_sizes: list[int]
    shard_labels: list[int]
    label_assignment: list[list[int]]
    client_indices: list[np.ndarray] = field(repr=False)


def partition_noniid(labels, seed, *, n_clients=20, shard_ratio=PAPER_SHARD_RATIO,
                     shards_per_client=2, max_tries=1000) -> PartitionPlan:
    """Sort by label, cut each class into ``len(shard_ratio)`` contiguous
    shards sized by the ratio, and hand every client ``shards_per_client``
    shards taken from different size groups (and, where possible, with
    different labels)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    groups = len(shard_ratio)
    n_shards = len(classes) * groups
    if n_shards != n_clients * shards_per_client:
        raise PartitionError(
            f"{len(classes)} classes x {groups} shards = {n_shards} shards, but "
            f"{n_clients} clients x {shards_per_client} = {n_clients * shards_per_client} needed")
    order = np.argsort(labels, kind="stable")
    pieces = {}  # (group, class) -> indices
    for c in classes:
        idx = order[labels[order] == c]
        sizes = rescale_sizes(len(idx), shard_ratio)
        off = 0
        for g, s in enumerate(sizes):
            pieces[(g, c)] = idx[off:off + s]
            off += s

    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        perms = [rng.permutation(classes) for _ in range(groups)]
        seq = [(g, c) for g in range(groups) for c in perms[g]]
        owned = [[seq[i + j * n_clients] for j in range(shards_per_client)]
                 for i in range(n_clients)]
        if len(classes) < shards_per_client or all(
                len({c for _, c in own}) == len(own) for own in owned):
            break
    else:
        raise PartitionError("could not give every client distinct labels")
    return PartitionPlan(
        n_clients=n_clients,
        shard_sizes=[len(pieces[k]) for k in seq],
        shard_labels=[int(c) for _, c in seq],
        label_assignment=[[int(c) for _, c in own] for own in owned],
        client_indices=[np.concatenate([pieces[k] for k in own]) for own in owned],
    )


# --- IDX files ------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def features(self) -> np.ndarray:
        return self.images.reshape(len(self.labels), -1)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    head = 4 * (1 + ndim)
    if len(raw) < head:
        raise OSError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise OSError(f"{path}: truncated, need {count} bytes after header, have {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, images, labels) -> None:
    """Inverse of ``load_idx`` for uint8 arrays (used by fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


FASHION_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_fashion_mnist(root=None, split="train"):
    """Locate the IDX pair under ``root`` (or ``$ASOFED_DATA_DIR``); plain
    or gzipped names are accepted.  Returns ``None`` when absent."""
    root = root or os.environ.get("ASOFED_DATA_DIR")
    if not root:
        return None
    found = []
    for name in FASHION_FILES[split]:
        for cand in (Path(root) / name, Path(root) / (name + ".gz"),
                     Path(root) / "fashion" / name, Path(root) / "fashion" / (name + ".gz")):
            if cand.exists():
                found.append(cand)
                break
        else:
            return None
    return tuple(found)
