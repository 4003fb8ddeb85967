import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asofed import data as dt
from asofed.probes import estimate_V, quadratic_federation


# -- shards and streaming ---------------------------------------------------

def shard_with(train_size, rate, visible=1):
    n = train_size + 4
    return dt.ClientShard(np.zeros((n, 1)), np.zeros(n), np.arange(train_size),
                          np.arange(train_size, train_size + 2),
                          np.arange(train_size + 2, n), visible, rate)


def test_advance_adds_ceil_of_rate_times_train_size():
    s = shard_with(1000, 0.001, visible=100)
    assert dt.advance_stream(s).visible_count == 101
    s = shard_with(1000, 0.0015, visible=100)
    assert dt.advance_stream(s).visible_count == 102


def test_advance_saturates_at_cap():
    s = shard_with(50, 0.5, visible=50)
    assert dt.advance_stream(s).visible_count == 50
    s = shard_with(50, 0.5, visible=40)
    assert dt.advance_stream(s).visible_count == 50


def test_advance_is_pure():
    s = shard_with(300, 0.01, visible=10)
    a, b = dt.advance_stream(s), dt.advance_stream(s)
    assert a.visible_count == b.visible_count == 13
    assert s.visible_count == 10


@given(st.integers(5, 400), st.integers(0, 10**6))
def test_split_is_disjoint_and_exhaustive(n, seed):
    tr, va, te = dt.split_indices(n, np.random.default_rng(seed))
    allidx = np.concatenate([tr, va, te])
    assert sorted(allidx.tolist()) == list(range(n))
    assert abs(len(tr) - 0.6 * n) <= 1 and abs(len(va) - 0.2 * n) <= 1


@given(st.integers(10, 300), st.floats(0.1, 0.5), st.floats(0.1, 1.0), st.integers(0, 10**6))
def test_visible_prefix_never_touches_held_out(n, frac, rate, seed):
    rng = np.random.default_rng(seed)
    s = dt.make_shard(rng.normal(size=(n, 2)), np.arange(n), rng,
                      initial_fraction=(frac, frac), growth=(0.05, 0.05), train_rate=rate)
    held = set(s.val_idx.tolist()) | set(s.test_idx.tolist())
    counts = []
    for _ in range(60):
        assert not held & set(s.visible_idx.tolist())
        assert 0 < s.visible_count <= s.train_cap <= len(s.train_idx)
        counts.append(s.visible_count)
        s = dt.advance_stream(s)
    assert counts == sorted(counts)


def test_initial_fraction_and_growth_ranges(rng):
    rates, fracs = [], []
    for _ in range(200):
        s = dt.make_shard(np.zeros((500, 1)), np.zeros(500), rng)
        rates.append(s.growth_rate)
        fracs.append(s.visible_count / s.train_cap)
    assert 0.0005 <= min(rates) and max(rates) <= 0.001
    assert 0.1 <= min(fracs) and max(fracs) <= 0.5 + 1 / 300


# -- synthetic data ---------------------------------------------------------

def test_zero_dissimilarity_gives_common_optimum():
    shards = dt.synth_quadratic(4, 5, 0.0, seed=3)
    for s in shards[1:]:
        assert np.array_equal(s.optimum, shards[0].optimum)


def test_dissimilarity_sets_shift_norm():
    shards = dt.synth_quadratic(4, 6, 2.0, seed=3)
    center = dt.synth_quadratic(4, 6, 0.0, seed=3)[0].optimum
    for s in shards:
        assert np.linalg.norm(s.optimum - center) == pytest.approx(2.0)


def probe_points(dim, n, seed):
    return np.random.default_rng(seed).normal(scale=3.0, size=(n, dim))


def test_iid_federation_has_V_near_one():
    fed = quadratic_federation(5, 4, 0.0, seed=1, samples_per_client=400)
    V = estimate_V(fed, probe_points(5, 200, 0))
    assert 1.0 <= V < 1.1


def test_shifted_federation_has_V_above_one():
    fed = quadratic_federation(5, 4, 2.0, seed=1)
    assert estimate_V(fed, probe_points(5, 200, 0)) > 1.1


def test_synth_classification_shapes():
    X, y = dt.synth_classification(4, 6, 50, seed=0)
    assert X.shape == (200, 6)
    assert np.bincount(y).tolist() == [50] * 4


# -- partitioning -----------------------------------------------------------

def test_rescaled_shard_sizes():
    assert dt.rescale_sizes(6000, dt.PAPER_SHARD_RATIO) == [1000, 1375, 1625, 2000]


@given(st.integers(4, 10**5), st.lists(st.floats(0.1, 10), min_size=1, max_size=6))
def test_rescaled_sizes_sum_to_total(total, ratio):
    sizes = dt.rescale_sizes(total, ratio)
    assert sum(sizes) == total
    exact = np.asarray(ratio) / sum(ratio) * total
    assert np.all(np.abs(np.asarray(sizes) - exact) < 1)


def balanced_labels(per_class=600, classes=10):
    return np.repeat(np.arange(classes), per_class)


def test_twenty_clients_ten_classes():
    labels = balanced_labels()
    plan = dt.partition_noniid(labels, 0)
    assert len(plan.shard_sizes) == 40
    assert sum(plan.shard_sizes) == len(labels)
    for own, idx in zip(plan.label_assignment, plan.client_indices):
        assert len(own) == 2
        assert len(set(labels[idx].tolist())) <= 2
    # each client gets two shards of different sizes
    for i in range(20):
        assert plan.shard_sizes[i] != plan.shard_sizes[i + 20]
    used = np.concatenate(plan.client_indices)
    assert len(np.unique(used)) == len(used) == len(labels)


def test_single_client_single_class_keeps_everything():
    plan = dt.partition_noniid(np.zeros(37, int), 0, n_clients=1, shard_ratio=(1.0,),
                               shards_per_client=1)
    assert plan.shard_sizes == [37]
    assert sorted(plan.client_indices[0].tolist()) == list(range(37))


def test_incompatible_counts_are_rejected():
    with pytest.raises(dt.PartitionError):
        dt.partition_noniid(balanced_labels(), 0, n_clients=7)


@given(st.integers(0, 10**6))
def test_partition_is_seed_deterministic(seed):
    labels = balanced_labels(40)
    a = dt.partition_noniid(labels, seed)
    b = dt.partition_noniid(labels, seed)
    assert a.label_assignment == b.label_assignment
    assert all(np.array_equal(x, y) for x, y in zip(a.client_indices, b.client_indices))


# -- IDX --------------------------------------------------------------------

def write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    dt.write_idx(ip, lp, images, labels)
    return ip, lp


def test_idx_roundtrip_and_scaling(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
    lbls = np.array([0, 9, 3, 3, 1], dtype=np.uint8)
    ds = dt.load_idx(*write_pair(tmp_path, imgs, lbls))
    assert len(ds) == 5
    assert ds.features.shape == (5, 784)
    assert np.array_equal(ds.labels, lbls)
    assert np.allclose(ds.images * 255, imgs)
    assert 0 <= ds.images.min() and ds.images.max() <= 1


def test_idx_header_bytes(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 3, 4), np.uint8), np.zeros(2, np.uint8))
    assert ip.read_bytes()[:16] == struct.pack(">4I", 0x803, 2, 3, 4)
    assert lp.read_bytes()[:8] == struct.pack(">2I", 0x801, 2)


def test_gzipped_idx(tmp_path):
    ip, lp = write_pair(tmp_path, np.ones((3, 2, 2), np.uint8), np.arange(3, dtype=np.uint8))
    for p in (ip, lp):
        (tmp_path / (p.name + ".gz")).write_bytes(gzip.compress(p.read_bytes()))
    ds = dt.load_idx(tmp_path / "img.gz", tmp_path / "lbl.gz")
    assert ds.labels.tolist() == [0, 1, 2]


def test_bad_magic(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    raw = bytearray(ip.read_bytes())
    raw[:4] = b"\0\0\0\0"
    ip.write_bytes(bytes(raw))
    with pytest.raises(dt.IdxFormatError):
        dt.load_idx(ip, lp)


def test_truncated_file(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((4, 3, 3), np.uint8), np.zeros(4, np.uint8))
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(OSError):
        dt.load_idx(ip, lp)


def test_count_mismatch(tmp_path):
    ip, _ = write_pair(tmp_path, np.zeros((4, 3, 3), np.uint8), np.zeros(4, np.uint8))
    lp = tmp_path / "lbl3"
    lp.write_bytes(struct.pack(">2I", 0x801, 3) + bytes(3))
    with pytest.raises(dt.ConsistencyError):
        dt.load_idx(ip, lp)


def test_find_fashion_mnist_via_env(tmp_path, monkeypatch):
    monkeypatch.delenv("ASOFED_DATA_DIR", raising=False)
    assert dt.find_fashion_mnist() is None
    for im, lb in dt.FASHION_FILES.values():
        write_pair(tmp_path, np.zeros((1, 28, 28), np.uint8), np.zeros(1, np.uint8))
        (tmp_path / "img").rename(tmp_path / im)
        (tmp_path / "lbl").rename(tmp_path / lb)
    monkeypatch.setenv("ASOFED_DATA_DIR", str(tmp_path))
    found = dt.find_fashion_mnist()
    assert found is not None and found[0].name == "train-images-idx3-ubyte"


def test_official_files_have_expected_counts(fashion_dir):
    train = dt.load_idx(*dt.find_fashion_mnist(fashion_dir, "train"))
    test = dt.load_idx(*dt.find_fashion_mnist(fashion_dir, "test"))
    assert len(train) == 60000 and len(test) == 10000
    assert train.images.shape[1:] == (28, 28)
