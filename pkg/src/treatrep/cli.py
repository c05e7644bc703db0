"""Command line entry point: ``treatrep {generate,train,eval,sweep,theorem1,probe}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import dataio, evaluation
from .model import TrainConfig, train
from .nn import ConfigurationError, TrainingError
from .scm import OUTCOME_NOISE_GRID, ScmParams, UnsupportedOracleError, UnsupportedPerturbationError, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("treatrep")


@dataclass
class EvalConfig:
    noise_scale: float = 1.0
    draws: int = 1


@dataclass
class SweepConfig:
    axis: str = "outcome-noise"  # | "noncausal-noise"
    grid: list[float] | None = None
    seeds: int = 10
    variants: list[str] = field(default_factory=lambda: ["plain", "contrastive"])


@dataclass
class Theorem1Config:
    lam: float = 1.0
    delta_tnc: float = 2.0
    draws: int = 100_000


@dataclass
class RunConfig:
    scm: ScmParams = field(default_factory=ScmParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    theorem1: Theorem1Config = field(default_factory=Theorem1Config)

    def to_dict(self) -> dict:
        return {"scm": self.scm.to_dict(), "train": self.train.to_dict(), "eval": asdict(self.eval),
                "sweep": asdict(self.sweep), "theorem1": asdict(self.theorem1)}


def _section(cls, data, name):
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{name}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{name}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def load_config(path: str | None) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config: cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config: top level must be a mapping")
    unknown = sorted(set(raw) - {"scm", "train", "eval", "sweep", "theorem1"})
    if unknown:
        raise ConfigurationError(f"config: unknown section(s) {', '.join(unknown)}")
    try:
        tc = TrainConfig.from_dict(raw.get("train") or {})
    except TypeError as exc:
        raise ConfigurationError(f"train: {exc}") from None
    cfg = RunConfig(_section(ScmParams, raw.get("scm"), "scm"), tc,
                    _section(EvalConfig, raw.get("eval"), "eval"),
                    _section(SweepConfig, raw.get("sweep"), "sweep"),
                    _section(Theorem1Config, raw.get("theorem1"), "theorem1"))
    return cfg


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    get = lambda name: getattr(args, name, None)
    scm, tr, sw, t1 = cfg.scm, cfg.train, cfg.sweep, cfg.theorem1
    if get("seed") is not None:
        scm, tr = replace(scm, seed=args.seed), replace(tr, seed=args.seed)
    if get("n") is not None:
        scm = replace(scm, n=args.n)
    if get("kind") is not None:
        scm = replace(scm, kind=args.kind)
    if get("y_noise_std") is not None:
        scm = replace(scm, y_noise_std=args.y_noise_std)
    for flag, name in (("mode", "mode"), ("weight", "contrastive_weight"), ("margin", "margin"),
                       ("epochs", "epochs"), ("batch_size", "batch_size"), ("model_kind", "model")):
        if get(flag) is not None:
            tr = replace(tr, **{name: getattr(args, flag)})
    if get("axis") is not None:
        sw = replace(sw, axis=args.axis)
    if get("seeds") is not None:
        sw = replace(sw, seeds=args.seeds)
    if get("lam") is not None:
        t1 = replace(t1, lam=args.lam)
    if get("delta_tnc") is not None:
        t1 = replace(t1, delta_tnc=args.delta_tnc)
    if get("draws") is not None:
        t1 = replace(t1, draws=args.draws)
    cfg = RunConfig(scm, tr, cfg.eval, sw, t1)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    cfg.scm.validate()
    cfg.train.validate()
    if cfg.eval.noise_scale < 0 or cfg.eval.draws < 1:
        raise ConfigurationError("eval: noise_scale must be >= 0 and draws >= 1")
    if cfg.sweep.axis not in ("outcome-noise", "noncausal-noise"):
        raise ConfigurationError(f"sweep.axis: expected outcome-noise or noncausal-noise, got {cfg.sweep.axis!r}")
    if cfg.sweep.seeds < 1:
        raise ConfigurationError("sweep.seeds: must be >= 1")
    bad = set(cfg.sweep.variants) - {"plain", "contrastive"}
    if bad:
        raise ConfigurationError(f"sweep.variants: unknown {sorted(bad)}")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(dataio._jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset(args, cfg: RunConfig):
    if getattr(args, "data", None):
        schema = None
        if getattr(args, "schema", None):
            schema = dataio.TabularSchema.from_dict(json.loads(Path(args.schema).read_text()))
        return dataio.load_csv(args.data, schema, split_seed=cfg.scm.seed)
    return generate(cfg.scm)


# ------------------------------------------------------------------ commands


def cmd_generate(args, cfg: RunConfig) -> int:
    out = _out(args)
    ds = generate(cfg.scm)
    dataio.save_csv(ds, out / "data.csv")
    dataio.write_manifest(out / "manifest.json", cfg.to_dict(), [cfg.scm.seed], ds)
    print(f"wrote {len(ds)} rows to {out / 'data.csv'}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out(args)
    ds = _dataset(args, cfg)
    result = train(ds, cfg.train)
    dataio.save_model(result.model, out / "model.bin")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "huber_loss", "triplet_loss", "n_triples"])
        for row in result.log:
            w.writerow([row["epoch"], repr(row["huber_loss"]), repr(row["triplet_loss"]), row["n_triples"]])
    metrics = evaluation.evaluate(result.model, ds, cfg.eval.noise_scale, cfg.train.seed, cfg.eval.draws) \
        if ds.has_latents else dict(zip(("mae", "rmse"), evaluation.mae_rmse(result.model, ds)))
    _dump(out / "metrics.json", metrics)
    dataio.write_manifest(out / "manifest.json", cfg.to_dict(), [cfg.train.seed], ds,
                          {"epsilon": result.epsilon, "bucket_edges": result.bucket_edges})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out(args)
    ds = _dataset(args, cfg)
    runs = []
    for i, path in enumerate(args.model):
        model = dataio.load_model(path)
        if ds.has_latents:
            m = evaluation.evaluate(model, ds, cfg.eval.noise_scale, cfg.scm.seed, cfg.eval.draws)
        else:
            mae, rmse = evaluation.mae_rmse(model, ds)
            m = {"mae": mae, "rmse": rmse, "pehe": float("nan")}
        runs.append((i, m["mae"], m["rmse"], m["pehe"]))
    report = evaluation.MetricsReport.from_runs(runs)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "model_sha256", "mae", "rmse", "pehe"])
        for (i, *vals), path in zip(report.per_seed, args.model):
            # content hash, not the path, so reruns from another directory match byte for byte
            w.writerow([i, hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16], *map(repr, vals)])
        w.writerow(["mean", "", repr(report.mae), repr(report.rmse), repr(report.pehe)])
        if report.stderr:
            w.writerow(["stderr", "", *(repr(report.stderr[k]) for k in evaluation.METRICS)])
    _dump(out / "metrics.json", report.to_dict())
    dataio.write_manifest(out / "manifest.json", cfg.to_dict(), [cfg.scm.seed], ds,
                          {"models": [str(m) for m in args.model]})
    se = report.stderr or {}
    for k in evaluation.METRICS:
        print(f"{k}: {getattr(report, k):.4f}" + (f" ± {se[k]:.4f}" if k in se else ""))
    return EXIT_OK


def _variants(cfg: RunConfig) -> dict[str, TrainConfig]:
    return {name: replace(cfg.train, mode=name) for name in cfg.sweep.variants}


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = _out(args)
    seeds = list(range(cfg.scm.seed, cfg.scm.seed + cfg.sweep.seeds))
    variants = _variants(cfg)
    if cfg.sweep.axis == "outcome-noise":
        grid = cfg.sweep.grid or list(OUTCOME_NOISE_GRID)
        result = evaluation.irreducible_sweep(variants, cfg.scm, grid, seeds, cfg.eval.noise_scale,
                                              cfg.eval.draws, args.jobs)
    else:
        grid = cfg.sweep.grid or list(evaluation.NONCAUSAL_NOISE_GRID)
        if getattr(args, "data", None):
            ds = _dataset(args, cfg)
            source = ds
        else:
            source = lambda s: generate(replace(cfg.scm, seed=s))
        result = evaluation.reducible_sweep(variants, source, grid, seeds, cfg.eval.draws, args.jobs)
    result.write_csv(out / "sweep.csv")
    result.write_json(out / "sweep.json")
    if args.plot:
        result.write_svg(out / "sweep.svg")
    dataio.write_manifest(out / "manifest.json", cfg.to_dict(), seeds, None, {"jobs": args.jobs})
    for name in sorted(result.reports):
        print(name, " ".join(f"{v:.4f}" for v in result.metric(name)))
    return EXIT_OK


def cmd_theorem1(args, cfg: RunConfig) -> int:
    out = _out(args)
    params = replace(cfg.scm, kind="linear", dim_causal=1, dim_noncausal=1)
    t1 = cfg.theorem1
    res = evaluation.theorem1_demo(params, t1.lam, t1.delta_tnc, t1.draws, np.random.default_rng(params.seed))
    _dump(out / "theorem1.json", res.to_dict())
    dataio.write_manifest(out / "manifest.json", cfg.to_dict(), [params.seed])
    print(json.dumps(res.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_probe(args, cfg: RunConfig) -> int:
    out = _out(args)
    ds = _dataset(args, cfg)
    model = dataio.load_model(args.model[0])
    ev = ds.eval()
    r2c, r2n = evaluation.identifiability_probe(model, ev)
    ratio = evaluation.representation_ratio(model, ev, np.random.default_rng(cfg.scm.seed), cfg.eval.noise_scale)
    res = {"r2_causal": r2c, "r2_noncausal": r2n, "representation_ratio": ratio}
    _dump(out / "probe.json", res)
    dataio.write_manifest(out / "manifest.json", cfg.to_dict(), [cfg.scm.seed], ds, {"model": str(args.model[0])})
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "theorem1": cmd_theorem1, "probe": cmd_probe}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/out")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="CSV dataset (default: generate from the scm config)")
    data.add_argument("--schema", help="JSON TabularSchema for --data")

    scm = argparse.ArgumentParser(add_help=False)
    scm.add_argument("--n", type=int)
    scm.add_argument("--kind", choices=["synthetic", "linear"])
    scm.add_argument("--y-noise-std", type=float, dest="y_noise_std")

    trainp = argparse.ArgumentParser(add_help=False)
    trainp.add_argument("--mode", choices=["plain", "contrastive"])
    trainp.add_argument("--weight", type=float, help="triplet loss weight")
    trainp.add_argument("--margin", type=float)
    trainp.add_argument("--epochs", type=int)
    trainp.add_argument("--batch-size", type=int, dest="batch_size")
    trainp.add_argument("--model-kind", choices=["network", "linear"], dest="model_kind")

    p = argparse.ArgumentParser(prog="treatrep", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common, scm], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common, scm, data, trainp], help="train a plain or contrastive model")
    pe = sub.add_parser("eval", parents=[common, scm, data], help="MAE/RMSE/PEHE of saved models")
    pe.add_argument("--model", action="append", required=True, help="snapshot path (repeat per seed)")
    ps = sub.add_parser("sweep", parents=[common, scm, data, trainp], help="noise sweeps")
    ps.add_argument("--axis", choices=["outcome-noise", "noncausal-noise"])
    ps.add_argument("--seeds", type=int, help="number of seeds")
    ps.add_argument("--plot", action="store_true", help="also write sweep.svg")
    pt = sub.add_parser("theorem1", parents=[common, scm], help="backdoor bias demonstration")
    pt.add_argument("--lambda", type=float, dest="lam")
    pt.add_argument("--delta-tnc", type=float, dest="delta_tnc")
    pt.add_argument("--draws", type=int)
    pp = sub.add_parser("probe", parents=[common, scm, data], help="linear identifiability probe")
    pp.add_argument("--model", action="append", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, dataio.SchemaError, dataio.ParseError, dataio.SnapshotError,
            UnsupportedOracleError, UnsupportedPerturbationError, evaluation.ProbeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numeric failure: {exc.args[0]}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
