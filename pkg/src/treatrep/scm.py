"""Synthetic structural causal models with latent ground truth.

Two generators share the same DAG: covariates ``x`` drive both the causal
treatment latents ``t_causal`` and the non-causal ones ``t_noncausal``; the
observed treatment is their concatenation (optionally rotated) and the
outcome only reads ``t_causal`` and ``x``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from .nn import ConfigurationError, make_rng, split_seed

TRAIN_FRACTION = 0.7
MIN_SAMPLES = 10
OUTCOME_NOISE_GRID = tuple(round(0.1 * i, 1) for i in range(11))


class UnsupportedOracleError(ValueError):
    """No analytic effect is available for this data provenance."""


class UnsupportedPerturbationError(ValueError):
    """The sample carries no latent ground truth to perturb."""


@dataclass(frozen=True)
class ScmParams:
    n: int = 1000
    dim_causal: int = 5
    dim_noncausal: int = 5
    alpha: float = 1.0
    beta: float = 1.0
    rho: float = 1.0
    delta: float = 1.0
    y_noise_std: float = 0.5
    latent_noise_std: float = 1.0
    x_std: float = 1.0
    seed: int = 0
    kind: str = "synthetic"  # "synthetic" | "linear"
    rotate: bool = False

    def validate(self) -> None:
        if self.kind not in ("synthetic", "linear"):
            raise ConfigurationError(f"kind: unknown generator {self.kind!r}")
        if self.n < MIN_SAMPLES:
            raise ConfigurationError(f"n: {self.n} samples cannot be split 70/30 (need >= {MIN_SAMPLES})")
        if self.dim_causal < 1 or self.dim_noncausal < 1:
            raise ConfigurationError("dim_causal and dim_noncausal must be >= 1")
        if self.latent_noise_std < 0 or self.y_noise_std < 0 or self.x_std < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if self.kind == "linear" and self.dim_causal != self.dim_noncausal:
            raise ConfigurationError("linear SCM needs dim_causal == dim_noncausal (one X per latent pair)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    x: np.ndarray
    t: np.ndarray
    y: float
    t_causal: np.ndarray | None = None
    t_noncausal: np.ndarray | None = None


@dataclass
class Dataset:
    """Column-oriented collection of samples.

    ``mixing`` maps ``concat(t_causal, t_noncausal)`` to ``t``; ``None`` means
    plain concatenation.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    train_mask: np.ndarray
    t_causal: np.ndarray | None = None
    t_noncausal: np.ndarray | None = None
    mixing: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def has_latents(self) -> bool:
        return self.t_causal is not None and self.t_noncausal is not None

    def sample(self, i: int) -> Sample:
        return Sample(
            self.x[i].copy(),
            self.t[i].copy(),
            float(self.y[i]),
            None if self.t_causal is None else self.t_causal[i].copy(),
            None if self.t_noncausal is None else self.t_noncausal[i].copy(),
        )

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(
            self.x[idx], self.t[idx], self.y[idx], self.train_mask[idx],
            pick(self.t_causal), pick(self.t_noncausal), self.mixing, dict(self.provenance),
        )

    def train(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.train_mask))

    def eval(self) -> "Dataset":
        return self.subset(np.flatnonzero(~self.train_mask))

    def compose(self, t_causal: np.ndarray, t_noncausal: np.ndarray) -> np.ndarray:
        return mix(t_causal, t_noncausal, self.mixing)


def mix(t_causal: np.ndarray, t_noncausal: np.ndarray, mixing: np.ndarray | None = None) -> np.ndarray:
    t = np.concatenate([t_causal, t_noncausal], axis=-1)
    return t if mixing is None else t @ mixing


def split_mask(n: int, seed: int | np.random.SeedSequence) -> np.ndarray:
    """Deterministic 70/30 train/eval assignment."""
    if n < MIN_SAMPLES:
        raise ConfigurationError(f"n: {n} samples cannot be split 70/30 (need >= {MIN_SAMPLES})")
    order = make_rng(seed).permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[order[: int(round(TRAIN_FRACTION * n))]] = True
    return mask


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def generate_synthetic(params: ScmParams) -> Dataset:
    """Additive synthetic set: ``y = sum(t_causal) + sum(x) + noise``.

    ``x`` has ``dim_causal + dim_noncausal`` columns; each latent block is
    its covariate slice plus Gaussian noise. Outcome noise is one scalar
    draw per sample.
    """
    params = replace(params, kind="synthetic")
    params.validate()
    m, d = params.dim_causal, params.dim_noncausal
    s_x, s_tc, s_tn, s_y, s_split, s_rot = split_seed(params.seed, 6)
    n = params.n
    x = make_rng(s_x).normal(0.0, 1.0, size=(n, m + d))
    t_causal = x[:, :m] + make_rng(s_tc).normal(0.0, params.latent_noise_std, size=(n, m))
    t_noncausal = x[:, m:] + make_rng(s_tn).normal(0.0, params.latent_noise_std, size=(n, d))
    mixing = _random_rotation(m + d, make_rng(s_rot)) if params.rotate else None
    t = mix(t_causal, t_noncausal, mixing)
    y_noise = make_rng(s_y).normal(0.0, params.y_noise_std, size=n)
    y = structural_outcome(params, t_causal, x, y_noise)
    return Dataset(x, t, y, split_mask(n, s_split), t_causal, t_noncausal, mixing,
                   {"generator": "synthetic", "params": params.to_dict()})


def generate_linear_scm(params: ScmParams, x: np.ndarray | None = None) -> Dataset:
    """``X = eps``; ``T_C = alpha X + eps``; ``T_nC = beta X + eps``; ``Y = rho T_C + delta X + eps``.

    With several dimensions each coordinate pair is independent and ``Y``
    sums over coordinates. ``x`` overrides the covariate draw.
    """
    params = replace(params, kind="linear")
    params.validate()
    k = params.dim_causal
    s_x, s_tc, s_tn, s_y, s_split, s_rot = split_seed(params.seed, 6)
    n = params.n
    if x is None:
        x = make_rng(s_x).normal(0.0, params.x_std, size=(n, k))
    else:
        x = np.broadcast_to(np.asarray(x, dtype=np.float64).reshape(-1, k), (n, k)).copy()
    t_causal = params.alpha * x + make_rng(s_tc).normal(0.0, params.latent_noise_std, size=(n, k))
    t_noncausal = params.beta * x + make_rng(s_tn).normal(0.0, params.latent_noise_std, size=(n, k))
    mixing = _random_rotation(2 * k, make_rng(s_rot)) if params.rotate else None
    t = mix(t_causal, t_noncausal, mixing)
    y_noise = make_rng(s_y).normal(0.0, params.y_noise_std, size=n)
    y = structural_outcome(params, t_causal, x, y_noise)
    return Dataset(x, t, y, split_mask(n, s_split), t_causal, t_noncausal, mixing,
                   {"generator": "linear", "params": params.to_dict()})


def generate_causal_core(n: int = 5000, dim: int = 8, seed: int = 0, y_noise_std: float = 0.5) -> Dataset:
    """Treatment made only of causal columns, ``t = x + noise`` and ``y = sum(t) + sum(x) + noise``.

    Stands in for a real dataset before non-causal columns are appended
    with :func:`treatrep.dataio.augment_noncausal`.
    """
    if n < MIN_SAMPLES:
        raise ConfigurationError(f"n: {n} samples cannot be split 70/30 (need >= {MIN_SAMPLES})")
    s_x, s_t, s_y, s_split = split_seed(seed, 4)
    x = make_rng(s_x).normal(size=(n, dim))
    t = x + make_rng(s_t).normal(size=(n, dim))
    y = t.sum(axis=1) + x.sum(axis=1) + make_rng(s_y).normal(0.0, y_noise_std, size=n)
    return Dataset(x, t, y, split_mask(n, s_split), t.copy(), None, None,
                   {"generator": "core", "n": n, "dim": dim, "seed": seed, "y_noise_std": y_noise_std})


def structural_outcome(params: ScmParams, t_causal, x, noise) -> np.ndarray:
    """Outcome equation of either generator for given latents, covariates and noise."""
    t_causal, x = np.atleast_2d(t_causal), np.atleast_2d(x)
    if params.kind == "linear":
        return params.rho * t_causal.sum(axis=1) + params.delta * x.sum(axis=1) + noise
    return t_causal.sum(axis=1) + x.sum(axis=1) + noise


def monte_carlo_cate(params: ScmParams, t_causal, t_causal_other, x, draws: int = 100_000,
                     rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean and standard error of ``Y(do t_causal) - Y(do t_causal_other)`` at ``x``, independent noise."""
    rng = rng if rng is not None else make_rng(params.seed)
    reps = lambda a: np.repeat(np.atleast_2d(np.asarray(a, dtype=np.float64)), draws, axis=0)
    y1 = structural_outcome(params, reps(t_causal), reps(x), rng.normal(0.0, params.y_noise_std, draws))
    y2 = structural_outcome(params, reps(t_causal_other), reps(x), rng.normal(0.0, params.y_noise_std, draws))
    d = y1 - y2
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(draws))


def generate(params: ScmParams) -> Dataset:
    return generate_linear_scm(params) if params.kind == "linear" else generate_synthetic(params)


def true_cate(params: ScmParams | dict | None, t_causal, t_causal_other, x=None) -> float:
    """Analytic ``E[Y | do(T_C), x] - E[Y | do(T_C'), x]``.

    Both generators are additive in ``x``, so ``x`` cancels; it is accepted
    to keep the oracle's signature honest.
    """
    if isinstance(params, dict):
        kind = params.get("generator") or params.get("kind")
        if kind == "augmented":
            kind = (params.get("base") or {}).get("generator")
        rho = params.get("params", params).get("rho", 1.0)
    elif isinstance(params, ScmParams):
        kind, rho = params.kind, params.rho
    else:
        kind = None
    diff = np.sum(np.asarray(t_causal, dtype=np.float64) - np.asarray(t_causal_other, dtype=np.float64), axis=-1)
    if kind in ("synthetic", "core"):
        return diff
    if kind == "linear":
        return rho * diff
    raise UnsupportedOracleError(f"no analytic CATE for provenance {kind!r}")


def perturb_noncausal(sample: Sample, rng: np.random.Generator, noise_scale: float,
                      mixing: np.ndarray | None = None) -> Sample:
    """Add Gaussian noise to the non-causal latents only; ``x``, ``y`` and ``t_causal`` are kept."""
    if sample.t_causal is None or sample.t_noncausal is None:
        raise UnsupportedPerturbationError("sample has no latent ground truth")
    if noise_scale < 0:
        raise ConfigurationError(f"noise_scale must be >= 0, got {noise_scale}")
    if noise_scale == 0:
        return replace(sample, x=sample.x.copy(), t=sample.t.copy(),
                       t_causal=sample.t_causal.copy(), t_noncausal=sample.t_noncausal.copy())
    tn = sample.t_noncausal + rng.normal(0.0, noise_scale, size=sample.t_noncausal.shape)
    return Sample(sample.x.copy(), mix(sample.t_causal, tn, mixing), sample.y,
                  sample.t_causal.copy(), tn)


def perturb_noncausal_dataset(dataset: Dataset, rng: np.random.Generator, noise_scale: float) -> Dataset:
    """Vectorised :func:`perturb_noncausal` over every row; outcomes are kept."""
    if not dataset.has_latents:
        raise UnsupportedPerturbationError("dataset has no latent ground truth")
    if noise_scale < 0:
        raise ConfigurationError(f"noise_scale must be >= 0, got {noise_scale}")
    out = dataset.subset(np.arange(len(dataset)))
    if noise_scale > 0:
        out.t_noncausal = dataset.t_noncausal + rng.normal(0.0, noise_scale, size=dataset.t_noncausal.shape)
        out.t = dataset.compose(out.t_causal, out.t_noncausal)
    return out


def perturb_outcome_noise(dataset: Dataset, std: float, rng: np.random.Generator) -> Dataset:
    if std < 0:
        raise ConfigurationError(f"outcome noise std must be >= 0, got {std}")
    out = dataset.subset(np.arange(len(dataset)))
    if std > 0:
        out.y = dataset.y + rng.normal(0.0, std, size=len(dataset))
    out.provenance["extra_outcome_noise"] = float(std)
    return out
