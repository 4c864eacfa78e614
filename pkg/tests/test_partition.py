import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabinfer.errors import PartitionInfeasible
from collabinfer.nn import LabeledDataset, make_blobs
from collabinfer.partition import (
    ALPHA_GRID,
    PartitionConfig,
    dirichlet_indices,
    dirichlet_partition,
    label_histograms,
    mean_pairwise_tv,
    write_partition,
)


@pytest.fixture(scope="module")
def ten_class():
    return make_blobs(5000, 10, 4, seed=0)


def test_iid_limit_matches_global_histogram(ten_class):
    parts = dirichlet_partition(ten_class, PartitionConfig(1000.0, 5, seed=0))
    glob = np.bincount(ten_class.labels, minlength=10) / len(ten_class)
    for h in label_histograms(parts, 10):
        dist = h / h.sum()
        assert np.max(np.abs(dist - glob) / glob) <= 0.10


def test_strong_skew_drops_classes(ten_class):
    runs = []
    for seed in range(5):
        hist = label_histograms(dirichlet_partition(ten_class, PartitionConfig(0.05, 5, seed=seed)), 10)
        runs.append(max((h == 0).sum() for h in hist) >= 3)
    assert sum(runs) >= 3


def test_single_client_rejected():
    with pytest.raises(ValueError):
        PartitionConfig(1.0, 1)
    with pytest.raises(ValueError):
        PartitionConfig(0.0, 3)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(ALPHA_GRID), st.integers(2, 6), st.integers(0, 10_000))
def test_disjoint_cover_and_determinism(alpha, clients, seed):
    labels = np.repeat(np.arange(4), 25)
    cfg = PartitionConfig(alpha, clients, seed=seed, min_samples_per_client=0)
    parts = dirichlet_indices(labels, cfg)
    joined = np.concatenate(parts)
    assert len(joined) == len(labels) and np.array_equal(np.sort(joined), np.arange(len(labels)))
    again = dirichlet_indices(labels, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_min_samples_enforced():
    labels = np.repeat(np.arange(10), 50)
    parts = dirichlet_indices(labels, PartitionConfig(0.05, 5, seed=1, min_samples_per_client=10))
    assert min(len(p) for p in parts) >= 10


def test_infeasible_partition():
    with pytest.raises(PartitionInfeasible):
        dirichlet_indices(np.arange(4) % 2, PartitionConfig(1.0, 3, seed=0, min_samples_per_client=2))


def test_heterogeneity_decreases_with_alpha(ten_class):
    means = []
    for alpha in ALPHA_GRID:
        tv = [mean_pairwise_tv(label_histograms(dirichlet_partition(ten_class, PartitionConfig(alpha, 5, seed=s)), 10))
              for s in range(20)]
        means.append(np.mean(tv))
    assert all(a > b for a, b in zip(means, means[1:]))


def test_write_partition(tmp_path, ten_class):
    cfg = PartitionConfig(0.5, 3, seed=2)
    parts = dirichlet_partition(ten_class, cfg)
    manifest = json.loads(write_partition(parts, cfg, tmp_path).read_text())
    assert manifest["sizes"] == [len(p) for p in parts]
    assert np.array_equal(manifest["label_histograms"], label_histograms(parts, 10))
    back = LabeledDataset.from_csv(tmp_path / "client_1.csv")
    assert np.array_equal(back.labels, parts[1].labels)
