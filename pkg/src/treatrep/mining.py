"""Triplet mining over covariate buckets.

Samples are "close in x" when they share a bucket of a quantile grid laid
over ``g(x)``. Inside a bucket, an outcome gap of at most ``epsilon`` makes a
positive and a larger gap makes a negative.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .nn import ConfigurationError

MAX_EPSILON_PAIRS = 200_000


@dataclass
class BucketIndex:
    bucket_edges: list[np.ndarray]
    bucket_of: np.ndarray
    members: dict[int, np.ndarray]

    @property
    def n_buckets(self) -> int:
        return len(self.members)


@dataclass
class TripletBatch:
    triples: np.ndarray  # (k, 3) int: anchor, positive, negative
    epsilon: float

    def __len__(self) -> int:
        return self.triples.shape[0]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["anchor", "positive", "negative"])
            w.writerows(self.triples.tolist())


def first_dims(k: int) -> Callable[[np.ndarray], np.ndarray]:
    """``g`` that keeps the first ``k`` covariate columns."""
    return lambda x: np.asarray(x)[:, :k]


def linear_projection(x: np.ndarray, y: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """``g`` = the least-squares linear predictor of ``y`` from ``x`` (one column)."""
    design = np.column_stack([x, np.ones(len(x))])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    w = coef[:-1].copy()
    return lambda z: (np.asarray(z) @ w)[:, None]


def build_index(covariates: np.ndarray, g: Callable | None = None, buckets_per_dim: int = 3) -> BucketIndex:
    if buckets_per_dim < 1:
        raise ConfigurationError(f"buckets_per_dim must be >= 1, got {buckets_per_dim}")
    z = np.asarray(covariates if g is None else g(covariates), dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    if n == 0:
        raise ConfigurationError("cannot index an empty covariate matrix")
    nb = buckets_per_dim
    if nb > n:
        warnings.warn(f"{n} samples < {nb} buckets per dim; using {n}", stacklevel=2)
        nb = n
    qs = np.arange(1, nb) / nb
    edges, bins = [], np.empty(z.shape, dtype=np.int64)
    for j in range(z.shape[1]):
        e = np.unique(np.quantile(z[:, j], qs)) if nb > 1 else np.empty(0)
        edges.append(e)
        bins[:, j] = np.searchsorted(e, z[:, j], side="right")
    _, bucket_of = np.unique(bins, axis=0, return_inverse=True)
    bucket_of = bucket_of.reshape(-1)
    members = {int(b): np.flatnonzero(bucket_of == b) for b in np.unique(bucket_of)}
    return BucketIndex(edges, bucket_of, members)


def _pick(mask: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``k`` uniformly chosen True columns per row; -1 pads missing picks."""
    if k == 1:
        counts = mask.sum(axis=1)
        r = np.floor(rng.random(mask.shape[0]) * counts)
        idx = np.argmax(np.cumsum(mask, axis=1) > r[:, None], axis=1)
        return np.where(counts > 0, idx, -1)[:, None]
    keys = rng.random(mask.shape)
    keys[~mask] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")[:, :k]
    ok = np.take_along_axis(keys, order, axis=1) < np.inf
    return np.where(ok, order, -1)


def mine_triplets(index: BucketIndex, outcomes: np.ndarray, epsilon: float, per_anchor: int = 1,
                  rng: np.random.Generator | None = None) -> TripletBatch:
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    if per_anchor < 1:
        raise ConfigurationError(f"per_anchor must be >= 1, got {per_anchor}")
    rng = rng if rng is not None else np.random.default_rng(0)
    y = np.asarray(outcomes, dtype=np.float64)
    chunks = []
    for b in sorted(index.members):
        idx = index.members[b]
        if idx.size < 3:
            continue
        gap = np.abs(y[idx, None] - y[None, idx])
        pos = gap <= epsilon
        np.fill_diagonal(pos, False)
        neg = gap > epsilon
        p = _pick(pos, per_anchor, rng)
        q = _pick(neg, per_anchor, rng)
        for r in range(per_anchor):
            ok = (p[:, r] >= 0) & (q[:, r] >= 0)
            if ok.any():
                chunks.append(np.column_stack([idx[ok], idx[p[ok, r]], idx[q[ok, r]]]))
    triples = np.concatenate(chunks) if chunks else np.empty((0, 3), dtype=np.int64)
    if len(triples) == 0:
        warnings.warn(
            f"no valid triplets at epsilon={epsilon:.4g} over {index.n_buckets} buckets; "
            "contrastive term disabled", stacklevel=2,
        )
    return TripletBatch(triples.astype(np.int64), float(epsilon))


def set_epsilon_by_quantile(outcomes: np.ndarray, q: float = 0.1, index: BucketIndex | None = None,
                            rng: np.random.Generator | None = None,
                            max_pairs: int = MAX_EPSILON_PAIRS) -> float:
    """``q``-quantile of within-bucket outcome gaps; 0.0 signals "do not mine"."""
    if not 0 < q < 1:
        raise ConfigurationError(f"quantile must lie in (0, 1), got {q}")
    y = np.asarray(outcomes, dtype=np.float64)
    groups = [np.arange(len(y))] if index is None else [index.members[b] for b in sorted(index.members)]
    gaps = []
    for idx in groups:
        i, j = np.triu_indices(idx.size, k=1)
        gaps.append(np.abs(y[idx[i]] - y[idx[j]]))
    gaps = np.concatenate(gaps) if gaps else np.empty(0)
    if gaps.size > max_pairs:
        rng = rng if rng is not None else np.random.default_rng(0)
        gaps = rng.choice(gaps, size=max_pairs, replace=False)
    if gaps.size == 0 or np.all(gaps == 0):
        warnings.warn("outcomes are degenerate within buckets; mining disabled", stacklevel=2)
        return 0.0
    return float(np.quantile(gaps, q))
