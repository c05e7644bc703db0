import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from treatrep.mining import (
    build_index,
    first_dims,
    linear_projection,
    mine_triplets,
    set_epsilon_by_quantile,
)
from treatrep.nn import ConfigurationError, make_rng
from treatrep.scm import ScmParams, generate


def test_single_bucket():
    idx = build_index(make_rng(0).normal(size=(30, 4)), buckets_per_dim=1)
    assert idx.n_buckets == 1 and len(idx.members[0]) == 30


def test_median_split():
    idx = build_index(np.array([[1.0], [2.0], [3.0], [4.0]]), buckets_per_dim=2)
    groups = sorted(sorted(m.tolist()) for m in idx.members.values())
    assert groups == [[0, 1], [2, 3]]


def test_more_buckets_than_samples_warns():
    with pytest.warns(UserWarning):
        idx = build_index(np.arange(4.0)[:, None], buckets_per_dim=10)
    assert idx.n_buckets == 4


@given(arrays(np.float64, st.tuples(st.integers(5, 60), st.integers(1, 3)),
              elements=st.floats(-100, 100, allow_nan=False)),
       st.integers(1, 5))
@settings(max_examples=50, deadline=None)
def test_every_sample_in_one_bucket_within_edges(z, nb):
    idx = build_index(z, buckets_per_dim=nb)
    seen = np.concatenate(list(idx.members.values()))
    assert sorted(seen.tolist()) == list(range(len(z)))
    for b, members in idx.members.items():
        assert np.all(idx.bucket_of[members] == b)
        for j, e in enumerate(idx.bucket_edges):
            bins = np.searchsorted(e, z[members, j], side="right")
            assert np.all(bins == bins[0])


def test_g_choices():
    x = make_rng(1).normal(size=(50, 6))
    assert first_dims(2)(x).shape == (50, 2)
    y = x @ np.arange(6.0)
    g = linear_projection(x, y)
    assert np.allclose(g(x)[:, 0], y)


def test_threshold_example():
    idx = build_index(np.zeros((3, 1)), buckets_per_dim=1)
    batch = mine_triplets(idx, np.array([0.0, 0.05, 5.0]), 0.1, rng=make_rng(0))
    rows = {tuple(r) for r in batch.triples.tolist()}
    assert (0, 1, 2) in rows and rows <= {(0, 1, 2), (1, 0, 2)}


def test_large_epsilon_gives_empty_batch():
    idx = build_index(np.zeros((5, 1)), buckets_per_dim=1)
    with pytest.warns(UserWarning, match="no valid triplets"):
        batch = mine_triplets(idx, np.arange(5.0), 10.0, rng=make_rng(0))
    assert len(batch) == 0 and batch.triples.shape == (0, 3)


def test_epsilon_must_be_positive():
    idx = build_index(np.zeros((5, 1)), buckets_per_dim=1)
    with pytest.raises(ConfigurationError):
        mine_triplets(idx, np.arange(5.0), 0.0)


@given(st.integers(0, 2**31), st.integers(1, 4), st.floats(0.05, 2.0), st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_triples_satisfy_constraints(seed, nb, eps, per_anchor):
    rng = make_rng(seed)
    x = rng.normal(size=(80, 2))
    y = x.sum(1) + rng.normal(size=80)
    idx = build_index(x, buckets_per_dim=nb)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        batch = mine_triplets(idx, y, eps, per_anchor, rng)
    for a, p, n in batch.triples:
        assert len({a, p, n}) == 3
        assert idx.bucket_of[a] == idx.bucket_of[p] == idx.bucket_of[n]
        assert abs(y[a] - y[p]) <= eps < abs(y[a] - y[n])
    counts = np.bincount(batch.triples[:, 0], minlength=80) if len(batch) else np.zeros(80)
    assert counts.max() <= per_anchor


def test_mining_deterministic():
    x = make_rng(2).normal(size=(100, 2))
    y = x.sum(1)
    idx = build_index(x)
    a = mine_triplets(idx, y, 0.3, 2, make_rng(7))
    b = mine_triplets(idx, y, 0.3, 2, make_rng(7))
    assert np.array_equal(a.triples, b.triples)


def test_positives_closer_in_causal_latents():
    ds = generate(ScmParams(n=2000, y_noise_std=0.0)).train()
    idx = build_index(ds.x, linear_projection(ds.x, ds.y), buckets_per_dim=10)
    eps = set_epsilon_by_quantile(ds.y, 0.1, idx)
    batch = mine_triplets(idx, ds.y, eps, 1, make_rng(0))
    a, p, n = batch.triples.T
    d_pos = np.linalg.norm(ds.t_causal[a] - ds.t_causal[p], axis=1).mean()
    d_neg = np.linalg.norm(ds.t_causal[a] - ds.t_causal[n], axis=1).mean()
    print(f"mean |dT_C| positives {d_pos:.3f} negatives {d_neg:.3f}")
    assert d_pos < d_neg


def test_epsilon_quantile_examples():
    assert set_epsilon_by_quantile(np.array([0.0, 1.0, 3.0]), 0.5) == 2.0
    with pytest.warns(UserWarning):
        assert set_epsilon_by_quantile(np.full(6, 2.5), 0.1) == 0.0
    with pytest.raises(ConfigurationError):
        set_epsilon_by_quantile(np.arange(3.0), 1.0)


def test_triplet_csv(tmp_path):
    idx = build_index(np.zeros((3, 1)), buckets_per_dim=1)
    batch = mine_triplets(idx, np.array([0.0, 0.05, 5.0]), 0.1, rng=make_rng(0))
    batch.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "anchor,positive,negative" and len(lines) == len(batch) + 1
