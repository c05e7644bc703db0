"""Metrics, perturbation sweeps, linear identifiability probes and the backdoor-bias demo."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import TrainConfig, train
from .nn import ConfigurationError, TrainingError, make_rng
from .scm import (
    OUTCOME_NOISE_GRID,
    Dataset,
    Sample,
    ScmParams,
    generate,
    perturb_noncausal_dataset,
    perturb_outcome_noise,
)

NONCAUSAL_NOISE_GRID = (0.5, 1.0, 1.5, 2.0, 2.5)
DEFAULT_SEEDS = tuple(range(10))
PAIR_STREAM = 7919  # child-stream tag for evaluation perturbations
METRICS = ("mae", "rmse", "pehe")


class ProbeError(ValueError):
    """R^2 is undefined (target without variance)."""


# ------------------------------------------------------------------ metrics


def pehe_from_arrays(model, x, t, t_prime, y, y_prime) -> float:
    if len(y) == 0:
        raise ConfigurationError("PEHE needs at least one pair")
    est = model.predict(x, t) - model.predict(x, t_prime)
    true = np.asarray(y, dtype=np.float64) - np.asarray(y_prime, dtype=np.float64)
    return float(np.sqrt(np.mean((est - true) ** 2)))


def pehe(model, eval_pairs: Sequence[tuple[Sample, Sample]]) -> float:
    """RMSE between predicted and true outcome differences over ``(s, s')`` pairs.

    Each pair shares ``x``; the effect is read at the first sample's ``x``.
    """
    if not eval_pairs:
        raise ConfigurationError("PEHE needs at least one pair")
    x = np.stack([a.x for a, _ in eval_pairs])
    t = np.stack([a.t for a, _ in eval_pairs])
    tp = np.stack([b.t for _, b in eval_pairs])
    y = np.array([a.y for a, _ in eval_pairs])
    yp = np.array([b.y for _, b in eval_pairs])
    return pehe_from_arrays(model, x, t, tp, y, yp)


def mae_rmse(model, dataset: Dataset, split: str = "eval") -> tuple[float, float]:
    ds = dataset.eval() if split == "eval" else dataset.train() if split == "train" else dataset
    if len(ds) == 0:
        raise ConfigurationError(f"{split} split is empty")
    r = model.predict(ds.x, ds.t) - ds.y
    return float(np.mean(np.abs(r))), float(np.sqrt(np.mean(r * r)))


def eval_pairs(dataset: Dataset, rng: np.random.Generator, noise_scale: float, draws: int = 1) -> tuple[Dataset, Dataset]:
    """Eval rows and their non-causally perturbed twins (``draws`` twins per row)."""
    ev = dataset.eval()
    if draws > 1:
        ev = ev.subset(np.tile(np.arange(len(ev)), draws))
    return ev, perturb_noncausal_dataset(ev, rng, noise_scale)


def evaluate(model, dataset: Dataset, noise_scale: float = 1.0, seed: int = 0, draws: int = 1) -> dict[str, float]:
    mae, rmse = mae_rmse(model, dataset)
    orig, pert = eval_pairs(dataset, make_rng(np.random.SeedSequence([seed, PAIR_STREAM])), noise_scale, draws)
    return {"mae": mae, "rmse": rmse, "pehe": pehe_from_arrays(model, orig.x, orig.t, pert.t, orig.y, pert.y)}


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    pehe: float
    per_seed: list[tuple[int, float, float, float]] = field(default_factory=list)
    stderr: dict[str, float] | None = None

    @classmethod
    def from_runs(cls, runs: Iterable[tuple[int, float, float, float]]) -> "MetricsReport":
        """Mean and standard error over seeds; non-finite (failed) runs are left out of both."""
        runs = sorted(runs, key=lambda r: r[0])
        ok = np.array([r[1:] for r in runs if all(np.isfinite(r[1:]))], dtype=np.float64).reshape(-1, 3)
        means = ok.mean(axis=0) if len(ok) else np.full(3, np.nan)
        stderr = None
        if len(ok) >= 2:
            se = ok.std(axis=0, ddof=1) / math.sqrt(len(ok))
            stderr = dict(zip(METRICS, map(float, se)))
        return cls(*map(float, means), per_seed=[tuple(r) for r in runs], stderr=stderr)

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "pehe": self.pehe, "stderr": self.stderr,
                "per_seed": [dict(zip(("seed", *METRICS), r)) for r in self.per_seed]}


# ------------------------------------------------------------------ sweeps


@dataclass
class SweepResult:
    axis_name: str
    axis_values: list[float]
    reports: dict[str, list[MetricsReport]]
    failed: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.axis_values, self.axis_values[1:])):
            raise ConfigurationError("sweep axis must be strictly increasing")

    def metric(self, variant: str, name: str = "pehe") -> np.ndarray:
        return np.array([getattr(r, name) for r in self.reports[variant]])

    def rows(self) -> list[tuple]:
        out = []
        for variant in sorted(self.reports):
            for v, rep in zip(self.axis_values, self.reports[variant]):
                for seed, *vals in rep.per_seed:
                    out.extend((variant, v, seed, m, val) for m, val in zip(METRICS, vals))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", self.axis_name, "seed", "metric", "value"])
            for variant, v, seed, m, val in self.rows():
                w.writerow([variant, repr(float(v)), seed, m, repr(float(val))])

    def to_dict(self) -> dict:
        return {
            "axis": self.axis_name,
            "values": list(self.axis_values),
            "variants": {k: [r.to_dict() for r in reps] for k, reps in sorted(self.reports.items())},
            "failed": self.failed,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    def write_svg(self, path: str | Path, metric: str = "pehe") -> None:
        Path(path).write_text(line_plot_svg(self.axis_name, self.axis_values,
                                            {k: self.metric(k, metric) for k in sorted(self.reports)}, metric),
                              encoding="utf-8")


def _train_and_eval(task: dict) -> dict:
    """One (variant, seed, point) job; module-level so worker processes can pickle it."""
    out = dict(task["key"])
    try:
        result = train(task["dataset"], task["config"])
    except TrainingError as exc:
        out["error"] = str(exc)
        return out
    out["metrics"] = [evaluate(result.model, task["dataset"], s, task["seed"], task["draws"])
                      for s in task["scales"]]
    return out


def _run_tasks(tasks: list[dict], jobs: int) -> list[dict]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_train_and_eval(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_and_eval, tasks))


def _collect(results: list[dict], variants, axis_values, seeds) -> tuple[dict, list]:
    table: dict[tuple, tuple] = {}
    failed = []
    for r in results:
        if "error" in r:
            failed.append({k: r[k] for k in ("variant", "point", "seed", "error") if k in r})
            continue
        for p, m in r["metrics"]:
            table[(r["variant"], p, r["seed"])] = (m["mae"], m["rmse"], m["pehe"])
    nan = (math.nan,) * 3
    reports = {
        v: [MetricsReport.from_runs((s, *table.get((v, p, s), nan)) for s in seeds) for p in range(len(axis_values))]
        for v in variants
    }
    return reports, failed


def irreducible_sweep(variants: Mapping[str, TrainConfig], params: ScmParams,
                      stds: Sequence[float] = OUTCOME_NOISE_GRID, seeds: Sequence[int] = DEFAULT_SEEDS,
                      noise_scale: float = 1.0, draws: int = 1, jobs: int = 1) -> SweepResult:
    """Extra outcome noise before training; PEHE on non-causal perturbations of the eval rows."""
    tasks = []
    for p, std in enumerate(stds):
        for seed in seeds:
            base = generate(replace(params, seed=seed))
            data = perturb_outcome_noise(base, std, make_rng(np.random.SeedSequence([seed, p])))
            for name, cfg in variants.items():
                tasks.append({
                    "key": {"variant": name, "point": p, "seed": seed},
                    "dataset": data, "config": replace(cfg, seed=seed), "seed": seed,
                    "scales": [noise_scale], "draws": draws,
                })
    results = _run_tasks(tasks, jobs)
    for r in results:
        if "metrics" in r:
            r["metrics"] = [(r["point"], r["metrics"][0])]
    reports, failed = _collect(results, variants, stds, seeds)
    return SweepResult("outcome_noise_std", list(stds), reports, failed)


def reducible_sweep(variants: Mapping[str, TrainConfig], dataset: Dataset | Callable[[int], Dataset],
                    noise_scales: Sequence[float] = NONCAUSAL_NOISE_GRID, seeds: Sequence[int] = DEFAULT_SEEDS,
                    draws: int = 1, jobs: int = 1) -> SweepResult:
    """Train once per (variant, seed), then PEHE at every test-time non-causal noise scale.

    ``dataset`` may be a callable mapping a seed to a dataset (fresh data per seed).
    """
    tasks = []
    for seed in seeds:
        data = dataset(seed) if callable(dataset) else dataset
        if not data.has_latents:
            raise ConfigurationError("reducible sweep needs latent ground truth")
        for name, cfg in variants.items():
            tasks.append({
                "key": {"variant": name, "seed": seed}, "dataset": data,
                "config": replace(cfg, seed=seed), "seed": seed, "scales": list(noise_scales), "draws": draws,
            })
    results = _run_tasks(tasks, jobs)
    for r in results:
        if "metrics" in r:
            r["metrics"] = list(enumerate(r["metrics"]))
    reports, failed = _collect(results, variants, noise_scales, seeds)
    return SweepResult("noncausal_noise_scale", list(noise_scales), reports, failed)


# ------------------------------------------------------------------ probes


def r2_score(features: np.ndarray, target: np.ndarray) -> float:
    """Pooled R^2 of an affine least-squares fit (all target columns together)."""
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    sst = ((target - target.mean(axis=0)) ** 2).sum()
    if not sst > 1e-12 * target.size:
        raise ProbeError("target has no variance; R^2 undefined")
    design = np.column_stack([np.asarray(features, dtype=np.float64).reshape(len(target), -1), np.ones(len(target))])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    return float(max(0.0, 1.0 - (resid**2).sum() / sst))


def noncausal_residual(dataset: Dataset) -> np.ndarray:
    """Part of ``t_noncausal`` not explained linearly by ``x``."""
    design = np.column_stack([dataset.x, np.ones(len(dataset))])
    coef, *_ = np.linalg.lstsq(design, dataset.t_noncausal, rcond=None)
    return dataset.t_noncausal - design @ coef


def identifiability_probe(model, dataset: Dataset, representation: Callable | None = None) -> tuple[float, float]:
    """R^2 of linear probes from the treatment representation to each latent block.

    The non-causal target has ``x`` regressed out first; otherwise the
    confounder path alone would make it predictable.
    """
    if not dataset.has_latents:
        raise ConfigurationError("probe needs latent ground truth")
    psi = (representation or model.representation)(dataset.t)
    return r2_score(psi, dataset.t_causal), r2_score(psi, noncausal_residual(dataset))


def representation_ratio(model, dataset: Dataset, rng: np.random.Generator, noise_scale: float = 1.0) -> float:
    """Mean ``|psi(t) - psi(t_perturbed)|`` over mean ``|psi(t) - psi(t_other)|``.

    ``t_other`` is another row's treatment (a random derangement), so the
    ratio compares non-causal sensitivity with the typical spread.
    """
    n = len(dataset)
    if n < 2:
        raise ConfigurationError("need at least two rows")
    pert = perturb_noncausal_dataset(dataset, rng, noise_scale)
    shift = rng.integers(1, n)
    other = (np.arange(n) + shift) % n
    psi = model.representation(dataset.t)
    num = np.linalg.norm(psi - model.representation(pert.t), axis=1).mean()
    den = np.linalg.norm(psi - psi[other], axis=1).mean()
    return float(num / den)


# ------------------------------------------------------------------ backdoor bias


@dataclass
class Theorem1Result:
    lam: float
    delta_tnc: float
    conditional_mean_gap: float
    intervention_gap: float
    mc_conditional_mean_gap: float | None = None
    mc_conditional_mean_se: float | None = None
    mc_intervention_gap: float | None = None
    mc_intervention_se: float | None = None
    draws: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def biased_family_predict(params: ScmParams, lam: float, t_causal, t_noncausal, x):
    """``rho T_C + lam (delta/beta) T_nC + (1 - lam) delta X``: matches ``E[Y | T_C, X]`` on-distribution."""
    if params.beta == 0:
        raise ConfigurationError("beta must be non-zero for the bias construction")
    k = lam * params.delta / params.beta
    return params.rho * np.asarray(t_causal) + k * np.asarray(t_noncausal) + (1 - lam) * params.delta * np.asarray(x)


def theorem1_demo(params: ScmParams, lam: float, delta_tnc: float, draws: int = 0,
                  rng: np.random.Generator | None = None) -> Theorem1Result:
    """Analytic and (optionally) Monte-Carlo gaps of the lambda-family regression model.

    The conditional-mean gap compares the model with ``E[Y | T_C, X]`` on
    observational draws; the intervention gap is the model's effect
    estimate for two treatments that differ only by ``delta_tnc`` in the
    non-causal latent, against the true effect of 0.
    """
    if params.beta == 0:
        raise ConfigurationError("beta must be non-zero for the bias construction")
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
    res = Theorem1Result(lam, delta_tnc, 0.0, lam * (params.delta / params.beta) * delta_tnc)
    if draws <= 0:
        return res
    rng = rng if rng is not None else make_rng(params.seed)
    p = params
    x = rng.normal(0.0, p.x_std, size=draws)
    tc = p.alpha * x + rng.normal(0.0, p.latent_noise_std, size=draws)
    tn = p.beta * x + rng.normal(0.0, p.latent_noise_std, size=draws)
    cm = biased_family_predict(p, lam, tc, tn, x) - (p.rho * tc + p.delta * x)
    # outcomes under do(T) and do(T') with independent outcome noise; T' shifts only T_nC
    y1 = p.rho * tc + p.delta * x + rng.normal(0.0, p.y_noise_std, size=draws)
    y2 = p.rho * tc + p.delta * x + rng.normal(0.0, p.y_noise_std, size=draws)
    model_effect = biased_family_predict(p, lam, tc, tn, x) - biased_family_predict(p, lam, tc, tn - delta_tnc, x)
    gap = model_effect - (y1 - y2)
    res.mc_conditional_mean_gap = float(cm.mean())
    res.mc_conditional_mean_se = float(cm.std(ddof=1) / math.sqrt(draws))
    res.mc_intervention_gap = float(gap.mean())
    res.mc_intervention_se = float(gap.std(ddof=1) / math.sqrt(draws))
    res.draws = draws
    return res


# ------------------------------------------------------------------ plots


def line_plot_svg(xlabel: str, xs: Sequence[float], series: Mapping[str, Sequence[float]], ylabel: str,
                  width: int = 480, height: int = 320) -> str:
    """Minimal dependency-free SVG: one polyline per series."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    pad = 48
    xs = np.asarray(xs, dtype=float)
    ys = np.concatenate([np.asarray(v, dtype=float) for v in series.values()]) if series else np.zeros(1)
    ys = ys[np.isfinite(ys)]
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if y1 == y0:
        y1 = y0 + 1.0
    x0, x1 = float(xs.min()), float(xs.max()) if len(xs) > 1 else float(xs.min()) + 1.0
    sx = lambda v: pad + (v - x0) / (x1 - x0) * (width - 2 * pad)
    sy = lambda v: height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2})">{ylabel}</text>',
        f'<text x="{pad - 4}" y="{sy(y0):.1f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{pad - 4}" y="{sy(y1):.1f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
    ]
    for i, (name, vals) in enumerate(series.items()):
        c = colors[i % len(colors)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, vals) if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{pts}"><title>{name}</title></polyline>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" font-size="11" fill="{c}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
