"""Synthetic benchmark table: MAE, RMSE and PEHE (mean ± standard error over seeds).

    python scripts/table1.py --seeds 10 --out runs/table1
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass, replace
from pathlib import Path

from treatrep.evaluation import MetricsReport, evaluate
from treatrep.model import TrainConfig, fit_ols, train
from treatrep.scm import ScmParams, generate


@dataclass
class Table1Settings:
    seeds: int = 10
    epochs: int = 500
    noise_scale: float = 1.0
    model: str = "network"
    out: Path = Path("runs/table1")


def run(s: Table1Settings) -> dict[str, MetricsReport]:
    rows: dict[str, list] = {"OLS (t, x)": [], "plain": [], "contrastive": []}
    for seed in range(s.seeds):
        ds = generate(ScmParams(seed=seed))
        m = evaluate(fit_ols(ds.train()), ds, s.noise_scale, seed)
        rows["OLS (t, x)"].append((seed, m["mae"], m["rmse"], m["pehe"]))
        for mode in ("plain", "contrastive"):
            cfg = TrainConfig.synthetic(mode=mode, epochs=s.epochs, seed=seed, model=s.model)
            m = evaluate(train(ds, cfg).model, ds, s.noise_scale, seed)
            rows[mode].append((seed, m["mae"], m["rmse"], m["pehe"]))
            print(f"seed {seed} {mode:<12} mae {m['mae']:.3f} pehe {m['pehe']:.3f}", flush=True)
    reports = {k: MetricsReport.from_runs(v) for k, v in rows.items()}
    s.out.mkdir(parents=True, exist_ok=True)
    (s.out / "table1.json").write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2))
    print(f"\n{'model':<12} {'MAE':>14} {'RMSE':>14} {'PEHE':>14}")
    for k, r in reports.items():
        cells = [f"{getattr(r, m):.3f} ± {r.stderr[m]:.3f}" for m in ("mae", "rmse", "pehe")]
        print(f"{k:<12} " + " ".join(f"{c:>14}" for c in cells))
    return reports


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--model", choices=["network", "linear"], default="network")
    p.add_argument("--out", type=Path, default=Path("runs/table1"))
    a = p.parse_args()
    run(Table1Settings(a.seeds, a.epochs, a.noise_scale, a.model, a.out))


if __name__ == "__main__":
    main()
