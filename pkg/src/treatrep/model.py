"""Two-branch CATE estimator with an optional triplet term on the treatment branch.

``f(x, t) = head([t_branch(t), x_branch(x)])``. In contrastive mode the
treatment representation ``h_t = t_branch(t)`` of mined anchor, positive and
negative rows is pushed through a triplet loss in the same forward pass as
the outcome loss.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import mining
from .nn import (
    AdamState,
    ConfigurationError,
    Sequential,
    TrainingError,
    adam_step,
    huber_loss,
    make_rng,
    split_seed,
    triplet_loss,
)
from .scm import Dataset

log = logging.getLogger(__name__)

MODES = ("plain", "contrastive")


@dataclass
class MiningConfig:
    g: str = "ols"  # "ols" (fitted linear outcome projection) | "first" (first g_dims covariates) | "identity"
    g_dims: int = 2
    buckets_per_dim: int = 10
    epsilon: float | None = None
    epsilon_quantile: float = 0.1
    per_anchor: int = 1
    remine_each_epoch: bool = True


@dataclass
class TrainConfig:
    mode: str = "plain"
    model: str = "network"  # "network" | "linear"
    epochs: int = 500
    batch_size: int = 32
    lr: float = 1e-4
    huber_delta: float = 1.0
    contrastive_weight: float = 0.1
    margin: float = 30.0
    seed: int = 0
    t_hidden: int = 32
    x_hidden: int = 32
    head_sizes: tuple[int, ...] = (64, 32)
    standardize: bool = False
    mining: MiningConfig = field(default_factory=MiningConfig)

    @classmethod
    def synthetic(cls, **kw) -> "TrainConfig":
        """Hyperparameters for the fully synthetic set (triplet weight 0.1, margin 30)."""
        return cls(**kw)

    @classmethod
    def semi_synthetic(cls, **kw) -> "TrainConfig":
        """Hyperparameters for augmented real-style sets (triplet weight 1, margin 100)."""
        kw.setdefault("contrastive_weight", 1.0)
        kw.setdefault("margin", 100.0)
        return cls(**kw)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.model not in ("network", "linear"):
            raise ConfigurationError(f"model: expected 'network' or 'linear', got {self.model!r}")
        for name in ("epochs", "batch_size", "t_hidden", "x_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1")
        for name in ("lr", "huber_delta", "margin"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name}: must be > 0")
        if self.contrastive_weight < 0:
            raise ConfigurationError("contrastive_weight: must be >= 0")
        if self.mining.g not in ("first", "identity", "ols"):
            raise ConfigurationError(f"mining.g: unknown covariate map {self.mining.g!r}")

    @property
    def uses_triplets(self) -> bool:
        return self.mode == "contrastive" and self.contrastive_weight > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_sizes"] = list(self.head_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        m = d.pop("mining", {}) or {}
        mknown = {f.name for f in fields(MiningConfig)}
        if set(m) - mknown:
            raise ConfigurationError(f"unknown mining config keys: {sorted(set(m) - mknown)}")
        if "head_sizes" in d:
            d["head_sizes"] = tuple(d["head_sizes"])
        return cls(mining=MiningConfig(**m), **d)


class CateModel:
    def __init__(self, t_branch: Sequential, x_branch: Sequential, head: Sequential,
                 mode: str = "plain", contrastive_weight: float = 0.0, margin: float = 30.0,
                 y_mean: float = 0.0, y_scale: float = 1.0):
        if head.in_dim != t_branch.out_dim + x_branch.out_dim:
            raise ConfigurationError(
                f"head expects {head.in_dim} inputs, branches give {t_branch.out_dim}+{x_branch.out_dim}"
            )
        self.t_branch, self.x_branch, self.head = t_branch, x_branch, head
        self.mode, self.contrastive_weight, self.margin = mode, contrastive_weight, margin
        # the head predicts (y - y_mean) / y_scale
        self.y_mean, self.y_scale = float(y_mean), float(y_scale)

    @classmethod
    def init(cls, x_dim: int, t_dim: int, config: TrainConfig, rng: np.random.Generator) -> "CateModel":
        t_branch = Sequential.mlp([t_dim, config.t_hidden, config.t_hidden], rng)
        x_branch = Sequential.mlp([x_dim, config.x_hidden], rng, out_activation="relu")
        head = Sequential.mlp([config.t_hidden + config.x_hidden, *config.head_sizes, 1], rng)
        return cls(t_branch, x_branch, head, config.mode, config.contrastive_weight, config.margin)

    @property
    def x_dim(self) -> int:
        return self.x_branch.in_dim

    @property
    def t_dim(self) -> int:
        return self.t_branch.in_dim

    def params(self) -> dict[str, np.ndarray]:
        return {**self.t_branch.params("t."), **self.x_branch.params("x."), **self.head.params("head.")}

    def grads(self) -> dict[str, np.ndarray]:
        return {**self.t_branch.grads("t."), **self.x_branch.grads("x."), **self.head.grads("head.")}

    def _check(self, x: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, t = np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(t, float))
        if x.shape[1] != self.x_dim or t.shape[1] != self.t_dim:
            raise ConfigurationError(
                f"model takes x[{self.x_dim}], t[{self.t_dim}]; got x[{x.shape[1]}], t[{t.shape[1]}]"
            )
        return x, t

    def representation(self, t: np.ndarray) -> np.ndarray:
        t = np.atleast_2d(np.asarray(t, float))
        return self.t_branch.forward(t)

    def predict(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        x, t = self._check(x, t)
        z = np.concatenate([self.t_branch.forward(t), self.x_branch.forward(x)], axis=1)
        return self.head.forward(z)[:, 0] * self.y_scale + self.y_mean

    def copy(self) -> "CateModel":
        return copy.deepcopy(self)


class LinearCateModel:
    """``f(x, t) = w_t . t + w_x . x + b`` with representation ``w_t * t``."""

    def __init__(self, w_t, w_x, bias: float = 0.0, mode: str = "plain",
                 contrastive_weight: float = 0.0, margin: float = 30.0, flagged: bool = False):
        self.w_t = np.asarray(w_t, dtype=np.float64).reshape(-1).copy()
        self.w_x = np.asarray(w_x, dtype=np.float64).reshape(-1).copy()
        self.bias = np.array([float(bias)])
        self.mode, self.contrastive_weight, self.margin = mode, contrastive_weight, margin
        self.flagged = flagged  # True when the fit needed the ridge fallback
        self._grads: dict[str, np.ndarray] | None = None

    @property
    def x_dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def t_dim(self) -> int:
        return self.w_t.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"w_t": self.w_t, "w_x": self.w_x, "b": self.bias}

    def representation(self, t: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(t, float)) * self.w_t

    def predict(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        x, t = np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(t, float))
        if x.shape[1] != self.x_dim or t.shape[1] != self.t_dim:
            raise ConfigurationError(
                f"model takes x[{self.x_dim}], t[{self.t_dim}]; got x[{x.shape[1]}], t[{t.shape[1]}]"
            )
        return t @ self.w_t + x @ self.w_x + self.bias[0]

    def copy(self) -> "LinearCateModel":
        return copy.deepcopy(self)


def predict(model, x, t):
    """Scalar prediction for one ``(x, t)``, or a vector for stacked rows."""
    out = model.predict(x, t)
    return float(out[0]) if np.ndim(x) == 1 else out


def treatment_representation(model, t) -> np.ndarray:
    out = model.representation(t)
    return out[0] if np.ndim(t) == 1 else out


# --------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: CateModel | LinearCateModel
    log: list[dict]
    epsilon: float | None = None
    bucket_edges: list[list[float]] | None = None


def _covariate_map(cfg: MiningConfig, x: np.ndarray, y: np.ndarray):
    if cfg.g == "identity":
        return None
    if cfg.g == "first":
        return mining.first_dims(cfg.g_dims)
    return mining.linear_projection(x, y)


def _network_step(model: CateModel, x, t, y, trip_t, weight, delta):
    nb = x.shape[0]
    t_in = t if trip_t is None else np.concatenate([t, trip_t], axis=0)
    h_all = model.t_branch.forward(t_in)
    h_t = h_all[:nb]
    h_x = model.x_branch.forward(x)
    pred = model.head.forward(np.concatenate([h_t, h_x], axis=1))
    hub, g_pred = huber_loss(pred, y[:, None], delta)
    g_z = model.head.backward(g_pred)
    model.x_branch.backward(g_z[:, h_t.shape[1]:])
    g_h = g_z[:, : h_t.shape[1]]
    trip = 0.0
    if trip_t is not None:
        k = (h_all.shape[0] - nb) // 3
        a, p, n = h_all[nb:nb + k], h_all[nb + k:nb + 2 * k], h_all[nb + 2 * k:]
        trip, (ga, gp, gn) = triplet_loss(a, p, n, model.margin)
        g_h = np.concatenate([g_h, weight * ga, weight * gp, weight * gn], axis=0)
    model.t_branch.backward(g_h)
    return hub, trip, model.grads()


def _linear_step(model: LinearCateModel, x, t, y, trip_t, weight, delta):
    pred = model.predict(x, t)
    hub, g = huber_loss(pred, y, delta)
    grads = {"w_t": t.T @ g, "w_x": x.T @ g, "b": np.array([g.sum()])}
    trip = 0.0
    if trip_t is not None:
        k = trip_t.shape[0] // 3
        ta, tp, tn = trip_t[:k], trip_t[k:2 * k], trip_t[2 * k:]
        w = model.w_t
        trip, (ga, gp, gn) = triplet_loss(ta * w, tp * w, tn * w, model.margin)
        grads["w_t"] = grads["w_t"] + weight * (ga * ta + gp * tp + gn * tn).sum(axis=0)
    return hub, trip, grads


def train(dataset: Dataset, config: TrainConfig, callback=None) -> TrainResult:
    """Adam on mean Huber loss plus ``contrastive_weight`` times the triplet loss.

    Minibatches are reshuffled every epoch. Triplets are mined inside the
    training split and spread evenly over the epoch's minibatches. With
    ``contrastive_weight == 0`` no mining happens and the trajectory is the
    plain one bit for bit.
    """
    config.validate()
    tr = dataset.train()
    x, t, y = tr.x, tr.t, tr.y
    n = len(y)
    if n == 0:
        raise ConfigurationError("dataset has no training rows")
    s_init, s_shuffle, s_mine = split_seed(config.seed, 3)
    init_rng, shuffle_rng, mine_rng = make_rng(s_init), make_rng(s_shuffle), make_rng(s_mine)
    if config.model == "network":
        model = CateModel.init(x.shape[1], t.shape[1], config, init_rng)
        if config.standardize and np.std(y) > 0:
            model.y_mean, model.y_scale = float(np.mean(y)), float(np.std(y))
        y = (y - model.y_mean) / model.y_scale
        step_fn = _network_step
    else:
        model = LinearCateModel(np.zeros(t.shape[1]), np.zeros(x.shape[1]), 0.0)
        model.w_t[:] = init_rng.normal(0.0, 0.1, size=t.shape[1])
        model.w_x[:] = init_rng.normal(0.0, 0.1, size=x.shape[1])
        step_fn = _linear_step
    model.mode, model.contrastive_weight, model.margin = config.mode, config.contrastive_weight, config.margin

    state = AdamState(lr=config.lr)
    result = TrainResult(model, [])
    index, epsilon = None, None
    if config.uses_triplets:
        mc = config.mining
        index = mining.build_index(x, _covariate_map(mc, x, y), mc.buckets_per_dim)
        epsilon = mc.epsilon if mc.epsilon is not None else mining.set_epsilon_by_quantile(
            y, mc.epsilon_quantile, index, mine_rng)
        result.epsilon = epsilon
        result.bucket_edges = [e.tolist() for e in index.bucket_edges]
    n_steps = max(1, -(-n // config.batch_size))
    batch = None
    last_good = model.copy()
    for epoch in range(config.epochs):
        triples = np.empty((0, 3), dtype=np.int64)
        if index is not None and epsilon and epsilon > 0:
            if batch is None or config.mining.remine_each_epoch:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    batch = mining.mine_triplets(index, y, epsilon, config.mining.per_anchor, mine_rng)
                for w in caught:
                    log.warning("epoch %d: %s", epoch, w.message)
            triples = batch.triples[mine_rng.permutation(len(batch))] if len(batch) else batch.triples
        chunks = np.array_split(triples, n_steps) if len(triples) else [None] * n_steps
        perm = shuffle_rng.permutation(n)
        hub_sum = trip_sum = 0.0
        for s in range(n_steps):
            rows = perm[s * config.batch_size:(s + 1) * config.batch_size]
            trip_t = None
            if chunks[s] is not None and len(chunks[s]):
                c = chunks[s]
                trip_t = t[np.concatenate([c[:, 0], c[:, 1], c[:, 2]])]
            hub, trip, grads = step_fn(model, x[rows], t[rows], y[rows], trip_t,
                                       config.contrastive_weight, config.huber_delta)
            if not (np.isfinite(hub) and np.isfinite(trip)):
                result.model = last_good
                raise TrainingError(f"loss diverged at epoch {epoch}, step {s}", result)
            try:
                adam_step(state, model.params(), grads)
            except TrainingError as exc:
                result.model = last_good
                raise TrainingError(str(exc), result) from exc
            hub_sum += hub
            trip_sum += trip
        result.log.append({
            "epoch": epoch,
            "huber_loss": hub_sum / n_steps,
            "triplet_loss": trip_sum / n_steps,
            "n_triples": int(len(triples)),
        })
        if epoch % 10 == 9:
            last_good = model.copy()
        if callback is not None:
            callback(epoch, model, result.log[-1])
    result.model = model
    return result


# ------------------------------------------------------------------ exact OLS


def fit_ols(dataset: Dataset, include_noncausal: bool = True, ridge: float = 1e-8,
            rcond: float = 1e-10) -> LinearCateModel:
    """Least squares of ``y`` on ``(t, x, 1)`` via the normal equations.

    With ``include_noncausal=False`` the design uses ``t_causal`` instead of
    ``t``; the returned ``w_t`` then spans the causal block only. A
    numerically singular Gram matrix switches to a ridge solve and sets
    ``flagged``.
    """
    if include_noncausal:
        t = dataset.t
    else:
        if dataset.t_causal is None:
            raise ConfigurationError("include_noncausal=False needs latent t_causal")
        t = dataset.t_causal
    x = dataset.x
    design = np.column_stack([t, x, np.ones(len(dataset))])
    gram = design.T @ design
    rhs = design.T @ dataset.y
    s = np.linalg.svd(gram, compute_uv=False)
    flagged = s[-1] <= rcond * s[0]
    if flagged:
        gram = gram + ridge * np.eye(gram.shape[0])
    coef = np.linalg.solve(gram, rhs)
    dt = t.shape[1]
    return LinearCateModel(coef[:dt], coef[dt:-1], coef[-1], flagged=bool(flagged))
