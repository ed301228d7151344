import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cwfedavg.data import (
    LabeledDataset,
    count_matrix,
    load_idx_mnist,
    partition_dirichlet,
    partition_pathological,
    read_partition_csv,
    synth_gaussian_mixture,
    true_distribution,
    write_partition_csv,
)
from cwfedavg.errors import IdxParseError, PartitionError
from cwfedavg.nn import accuracy, init_params, train_local


def labels_only(k, per_class, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.repeat(np.arange(k), per_class))
    return LabeledDataset(np.zeros((len(y), 1)), y, k)


# ---- synthetic data ------------------------------------------------------

def test_synth_counts_and_determinism():
    a = synth_gaussian_mixture(3, 4, 1, 2.0, 5)
    assert len(a) == 3
    assert sorted(a.labels.tolist()) == [0, 1, 2]
    b, c = synth_gaussian_mixture(4, 3, 50, 2.0, 11), synth_gaussian_mixture(4, 3, 50, 2.0, 11)
    assert np.array_equal(b.features, c.features) and np.array_equal(b.labels, c.labels)
    assert b.class_counts().tolist() == [50] * 4


@pytest.mark.parametrize("k,dim", [(4, 6), (6, 2)])
def test_synth_means_separated(k, dim):
    ds = synth_gaussian_mixture(k, dim, 2000, 3.0, 0)
    means = np.stack([ds.features[ds.labels == j].mean(axis=0) for j in range(k)])
    d = np.linalg.norm(means[:, None] - means[None], axis=2)[np.triu_indices(k, 1)]
    # sample means wobble by about sqrt(dim / 2000)
    assert d.min() >= 3.0 - 0.25


def test_synth_linearly_separable_when_far_apart():
    ds = synth_gaussian_mixture(2, 2, 100, 6.0, 0)
    p = train_local(init_params([2, 2], 0), ds.features, ds.labels, epochs=30, batch_size=10, lr=0.1,
                    rng=np.random.default_rng(0))
    assert accuracy(p, ds.features, ds.labels) >= 0.99


@pytest.mark.parametrize("args", [(1, 2, 5, 1.0), (3, 2, 0, 1.0), (3, 2, 5, 0.0)])
def test_synth_rejects_bad_args(args):
    with pytest.raises(ValueError):
        synth_gaussian_mixture(*args, 0)


# ---- IDX ----------------------------------------------------------------

def write_idx(tmp_path, images, labels, img_magic=0x803, lbl_magic=0x801, chop=0, n_lbl=None):
    n, r, c = images.shape
    ib = struct.pack(">4I", img_magic, n, r, c) + images.astype(np.uint8).tobytes()
    lb = struct.pack(">2I", lbl_magic, len(labels) if n_lbl is None else n_lbl) + labels.astype(np.uint8).tobytes()
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    ip.write_bytes(ib[: len(ib) - chop])
    lp.write_bytes(lb)
    return ip, lp


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 3, 2))
    lbls = np.array([3, 1, 4, 1, 5])
    ds = load_idx_mnist(*write_idx(tmp_path, imgs, lbls))
    assert ds.features.shape == (5, 6)
    assert np.allclose(ds.features, imgs.reshape(5, 6) / 255.0, rtol=0, atol=0)
    assert ds.labels.tolist() == lbls.tolist()
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0
    assert len(load_idx_mnist(*write_idx(tmp_path, imgs, lbls), limit=2)) == 2


def test_idx_bad_magic(tmp_path):
    with pytest.raises(IdxParseError, match="magic"):
        load_idx_mnist(*write_idx(tmp_path, np.zeros((2, 2, 2)), np.zeros(2), img_magic=0x802))
    with pytest.raises(IdxParseError, match="magic"):
        load_idx_mnist(*write_idx(tmp_path, np.zeros((2, 2, 2)), np.zeros(2), lbl_magic=0x803))


def test_idx_truncated_and_mismatch(tmp_path):
    with pytest.raises(IdxParseError, match="truncated"):
        load_idx_mnist(*write_idx(tmp_path, np.zeros((2, 2, 2)), np.zeros(2), chop=3))
    with pytest.raises(IdxParseError, match="count mismatch"):
        load_idx_mnist(*write_idx(tmp_path, np.zeros((2, 2, 2)), np.zeros(2), n_lbl=3))


def test_idx_limit_zero(tmp_path):
    with pytest.raises(ValueError):
        load_idx_mnist(*write_idx(tmp_path, np.zeros((2, 2, 2)), np.zeros(2)), limit=0)


# ---- pathological -------------------------------------------------------

def test_pathological_block_structure():
    parts = partition_pathological(labels_only(10, 100), 20, 2, 0)
    counts = count_matrix(parts) + np.stack([c.test_counts for c in parts])
    assert ((counts > 0).sum(axis=1) == 2).all()
    assert ((counts > 0).sum(axis=0) == 4).all()


def test_pathological_single_client_gets_everything():
    data = labels_only(4, 12)
    (c,) = partition_pathological(data, 1, 4, 0)
    assert (c.class_counts + c.test_counts).tolist() == data.class_counts().tolist()


def test_pathological_errors():
    with pytest.raises(ValueError):
        partition_pathological(labels_only(10, 10), 20, 11, 0)
    with pytest.raises(PartitionError):
        partition_pathological(labels_only(10, 10), 3, 2, 0)  # 6 shards over 10 classes
    with pytest.raises(PartitionError):
        partition_pathological(labels_only(10, 2), 20, 2, 0)  # 2 samples, 4 shards


def test_pathological_truncation_is_reported():
    parts = partition_pathological(labels_only(2, 7), 2, 2, 0)  # 7 samples into 2 shards
    assert parts.truncated == {0: 1, 1: 1}


# ---- Dirichlet ----------------------------------------------------------

def test_dirichlet_large_beta_near_uniform():
    parts = partition_dirichlet(labels_only(10, 2000), 20, 1e6, 0)
    for c in parts:
        p = (c.class_counts + c.test_counts) / (c.num_samples + len(c.test))
        assert np.max(np.abs(p - 0.1)) <= 0.05


def test_dirichlet_rejects_bad_beta():
    for beta in (0.0, -1.0):
        with pytest.raises(ValueError):
            partition_dirichlet(labels_only(3, 10), 2, beta, 0)


def test_dirichlet_every_client_trains():
    parts = partition_dirichlet(labels_only(3, 20), 15, 0.01, 4)
    assert all(c.num_samples >= 1 for c in parts)


def test_dirichlet_monotone_in_beta():
    data = labels_only(10, 200)
    means = []
    for beta in (0.01, 0.1, 1.0, 1e3):
        vals = []
        for seed in range(5):
            vals += [true_distribution(c).max() for c in partition_dirichlet(data, 10, beta, seed)]
        means.append(np.mean(vals))
    assert all(a >= b for a, b in zip(means, means[1:])), means


def _check_partition_invariants(data, parts):
    train_idx = np.concatenate([c.train_indices for c in parts])
    all_idx = np.concatenate([train_idx, *[c.test_indices for c in parts]])
    assert len(np.unique(train_idx)) == len(train_idx)
    assert len(np.unique(all_idx)) == len(all_idx)
    held = count_matrix(parts).sum(axis=0) + np.stack([c.test_counts for c in parts]).sum(axis=0)
    expected = data.class_counts().copy()
    for j, n in parts.truncated.items():
        expected[j] -= n
    assert held.tolist() == expected.tolist()
    for c in parts:
        n = c.num_samples + len(c.test)
        if n >= 25:
            assert 0.73 <= c.num_samples / n <= 0.77


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.5, 5.0]), st.integers(1, 8))
def test_dirichlet_invariants(seed, beta, m):
    data = labels_only(5, 60, seed)
    _check_partition_invariants(data, partition_dirichlet(data, m, beta, seed))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(4, 2), (8, 1), (6, 4), (2, 4)]))
def test_pathological_invariants(seed, shape):
    m, cpc = shape
    data = labels_only(4, 53, seed)
    parts = partition_pathological(data, m, cpc, seed)
    _check_partition_invariants(data, parts)
    assert all(((c.class_counts + c.test_counts) > 0).sum() == cpc for c in parts)


def test_partitions_deterministic():
    data = labels_only(6, 40)
    for fn, arg in ((partition_dirichlet, 0.3), (partition_pathological, 3)):
        a, b = fn(data, 4, arg, 9), fn(data, 4, arg, 9)
        assert all(np.array_equal(x.train_indices, y.train_indices) for x, y in zip(a, b))


# ---- distributions & csv ------------------------------------------------

def test_true_distribution_examples():
    assert true_distribution(np.array([10, 0, 10])).tolist() == [0.5, 0.0, 0.5]
    assert true_distribution(np.array([7])).tolist() == [1.0]
    with pytest.raises(ValueError):
        true_distribution(np.array([0, 0]))


def test_true_distribution_normalised():
    for c in partition_dirichlet(labels_only(7, 30), 5, 0.2, 1):
        assert abs(true_distribution(c).sum() - 1.0) <= 1e-12


def test_partition_csv_roundtrip(tmp_path):
    parts = partition_dirichlet(labels_only(4, 30), 3, 0.5, 2)
    write_partition_csv(parts, tmp_path / "d.csv")
    train, test = read_partition_csv(tmp_path / "d.csv")
    assert np.array_equal(train, count_matrix(parts))
    assert np.array_equal(test, np.stack([c.test_counts for c in parts]))
