"""CSV datasets, non-causal augmentation, model snapshots and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .model import CateModel, LinearCateModel
from .nn import DenseLayer, Sequential
from .scm import Dataset, split_mask

SNAPSHOT_MAGIC = b"TRTREP\x00\x01"
SNAPSHOT_VERSION = 1


class SchemaError(ValueError):
    """CSV header does not match the declared schema."""


class ParseError(ValueError):
    """A CSV cell could not be read as a number."""


class SnapshotError(ValueError):
    """Corrupt or truncated model snapshot."""


class IncompatibleSnapshotError(SnapshotError):
    """Snapshot written by an unsupported format version."""


@dataclass
class TabularSchema:
    covariates: list[str]
    treatments: list[str]
    outcome: str
    t_causal: list[str] = field(default_factory=list)
    t_noncausal: list[str] = field(default_factory=list)
    split: str | None = None

    def __post_init__(self):
        groups = [self.covariates, self.treatments, [self.outcome]]
        if self.split:
            groups.append([self.split])
        flat = [c for g in groups for c in g]
        if len(flat) != len(set(flat)):
            raise SchemaError("covariate, treatment, outcome and split columns must be disjoint")
        if not self.covariates or not self.treatments:
            raise SchemaError("schema needs at least one covariate and one treatment column")
        if bool(self.t_causal) != bool(self.t_noncausal):
            raise SchemaError("latent columns come in pairs: give both t_causal and t_noncausal or neither")

    def columns(self) -> list[str]:
        cols = [*self.covariates, *self.treatments, self.outcome]
        for c in [*self.t_causal, *self.t_noncausal]:
            if c not in cols:
                cols.append(c)
        if self.split:
            cols.append(self.split)
        return cols

    def to_dict(self) -> dict:
        return {"covariates": self.covariates, "treatments": self.treatments, "outcome": self.outcome,
                "t_causal": self.t_causal, "t_noncausal": self.t_noncausal, "split": self.split}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        return cls(**d)

    @classmethod
    def for_dataset(cls, ds: Dataset, with_split: bool = True) -> "TabularSchema":
        latents = ds.has_latents
        return cls(
            [f"x{i}" for i in range(ds.x.shape[1])],
            [f"t{i}" for i in range(ds.t.shape[1])],
            "y",
            [f"tc{i}" for i in range(ds.t_causal.shape[1])] if latents else [],
            [f"tn{i}" for i in range(ds.t_noncausal.shape[1])] if latents else [],
            "split" if with_split else None,
        )

    @classmethod
    def infer(cls, header: list[str]) -> "TabularSchema":
        """Schema for files written by :func:`save_csv` (prefixes x, t, tc, tn)."""
        def cols(prefix):
            return sorted((c for c in header if c.startswith(prefix) and c[len(prefix):].isdigit()),
                          key=lambda c: int(c[len(prefix):]))
        if "y" not in header:
            raise SchemaError("missing column 'y'")
        return cls(cols("x"), cols("t"), "y", cols("tc"), cols("tn"), "split" if "split" in header else None)


def _fmt(v: float) -> str:
    return repr(float(v))  # shortest repr round-trips float64 exactly


def save_csv(dataset: Dataset, path: str | Path, schema: TabularSchema | None = None) -> TabularSchema:
    schema = schema or TabularSchema.for_dataset(dataset)
    blocks = [dataset.x, dataset.t, dataset.y[:, None]]
    if schema.t_causal:
        blocks += [dataset.t_causal, dataset.t_noncausal]
    data = np.column_stack(blocks)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [*schema.covariates, *schema.treatments, schema.outcome, *schema.t_causal, *schema.t_noncausal]
    if schema.split:
        header.append(schema.split)
    w.writerow(header)
    for i, row in enumerate(data):
        cells = [_fmt(v) for v in row]
        if schema.split:
            cells.append("train" if dataset.train_mask[i] else "eval")
        w.writerow(cells)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return schema


def load_csv(path: str | Path, schema: TabularSchema | None = None, split_seed: int = 0) -> Dataset:
    """Read a CSV into a :class:`Dataset`.

    Without a split column in the schema, rows get a fresh 70/30 split from
    ``split_seed``.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    schema = schema or TabularSchema.infer(header)
    pos = {c: i for i, c in enumerate(header)}
    for c in schema.columns():
        if c not in pos:
            raise SchemaError(f"{path}: missing column {c!r}")

    def block(cols):
        out = np.empty((len(body), len(cols)))
        for r, row in enumerate(body):
            for k, c in enumerate(cols):
                cell = row[pos[c]] if pos[c] < len(row) else ""
                try:
                    out[r, k] = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {r + 2}, column {c!r}: not a number: {cell!r}") from None
        return out

    x, t, y = block(schema.covariates), block(schema.treatments), block([schema.outcome])[:, 0]
    tc = block(schema.t_causal) if schema.t_causal else None
    tn = block(schema.t_noncausal) if schema.t_noncausal else None
    if schema.split:
        labels = [row[pos[schema.split]] for row in body]
        bad = [i for i, v in enumerate(labels) if v not in ("train", "eval")]
        if bad:
            raise ParseError(f"{path}: row {bad[0] + 2}, column {schema.split!r}: expected train/eval")
        mask = np.array([v == "train" for v in labels])
    else:
        mask = split_mask(len(body), split_seed)
    return Dataset(x, t, y, mask, tc, tn, None,
                   {"generator": "external", "path": str(path), "schema": schema.to_dict()})


def dataset_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for a in (dataset.x, dataset.t, dataset.y, dataset.train_mask, dataset.t_causal, dataset.t_noncausal):
        if a is not None:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def augment_noncausal(dataset: Dataset, extra_dims: int = 8, coupling: float = 1.0, noise_std: float = 1.0,
                      rng: np.random.Generator | None = None) -> Dataset:
    """Append ``extra_dims`` treatment columns driven by ``x`` but not by ``y``.

    New columns are ``coupling * x @ P + N(0, noise_std)`` where ``P`` has
    Gaussian directions normalised to unit length, so each new column carries
    the same signal variance for standardised ``x``. The existing treatment
    columns become the causal block.
    """
    if extra_dims < 1:
        raise ValueError(f"extra_dims must be >= 1, got {extra_dims}")
    rng = rng if rng is not None else np.random.default_rng(0)
    dx = dataset.x.shape[1]
    proj = rng.normal(size=(dx, extra_dims))
    proj /= np.linalg.norm(proj, axis=0)
    extra = coupling * (dataset.x @ proj) + rng.normal(0.0, noise_std, size=(len(dataset), extra_dims))
    t_causal = dataset.t.copy()
    prov = {"generator": "augmented", "base": dataset.provenance, "extra_dims": extra_dims,
            "coupling": coupling, "noise_std": noise_std, "projection": proj.tolist()}
    return Dataset(dataset.x.copy(), np.concatenate([t_causal, extra], axis=1), dataset.y.copy(),
                   dataset.train_mask.copy(), t_causal, extra, None, prov)


def principal_components(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Scores and loadings of the top-``k`` principal components (covariance eigendecomposition)."""
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order]
    # fix sign so results are reproducible across LAPACK builds
    comps *= np.where(comps[np.argmax(np.abs(comps), axis=0), np.arange(comps.shape[1])] < 0, -1.0, 1.0)
    return xc @ comps, comps


# ------------------------------------------------------------------ snapshots


def _model_arrays(model) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(model, LinearCateModel):
        meta = {"kind": "linear", "flagged": model.flagged}
        arrays = dict(model.params())
    else:
        meta = {
            "kind": "network",
            "y_mean": model.y_mean,
            "y_scale": model.y_scale,
            "activations": {
                part: [layer.activation for layer in net.layers]
                for part, net in (("t", model.t_branch), ("x", model.x_branch), ("head", model.head))
            },
        }
        arrays = model.params()
    meta.update(mode=model.mode, contrastive_weight=model.contrastive_weight, margin=model.margin)
    return meta, arrays


def save_model(model, path: str | Path) -> None:
    """Versioned binary snapshot: magic, header JSON, raw little-endian float64, SHA-256 trailer."""
    meta, arrays = _model_arrays(model)
    meta["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    head = json.dumps(meta, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    payload = SNAPSHOT_MAGIC + struct.pack("<II", SNAPSHOT_VERSION, len(head)) + head + body
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_model(path: str | Path):
    raw = Path(path).read_bytes()
    if len(raw) < len(SNAPSHOT_MAGIC) + 8 + 32 or not raw.startswith(SNAPSHOT_MAGIC):
        raise SnapshotError(f"{path}: not a model snapshot")
    payload, digest = raw[:-32], raw[-32:]
    version, hlen = struct.unpack_from("<II", payload, len(SNAPSHOT_MAGIC))
    if version != SNAPSHOT_VERSION:
        raise IncompatibleSnapshotError(f"{path}: snapshot version {version}, this build reads {SNAPSHOT_VERSION}")
    if hashlib.sha256(payload).digest() != digest:
        raise SnapshotError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = len(SNAPSHOT_MAGIC) + 8
    meta = json.loads(payload[off:off + hlen])
    off += hlen
    arrays = {}
    for spec in meta["arrays"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(payload, dtype="<f8", count=size, offset=off).reshape(spec["shape"]).astype(np.float64)
        off += 8 * size
    if off != len(payload):
        raise SnapshotError(f"{path}: trailing bytes after arrays")
    common = dict(mode=meta["mode"], contrastive_weight=meta["contrastive_weight"], margin=meta["margin"])
    if meta["kind"] == "linear":
        return LinearCateModel(arrays["w_t"], arrays["w_x"], arrays["b"][0], flagged=meta["flagged"], **common)

    def stack(prefix, acts):
        return Sequential([DenseLayer(arrays[f"{prefix}{i}.w"], arrays[f"{prefix}{i}.b"], a) for i, a in enumerate(acts)])

    acts = meta["activations"]
    return CateModel(stack("t.", acts["t"]), stack("x.", acts["x"]), stack("head.", acts["head"]),
                     y_mean=meta["y_mean"], y_scale=meta["y_scale"], **common)


# ------------------------------------------------------------------ manifests


def write_manifest(path: str | Path, config: dict, seeds: list[int], dataset: Dataset | None = None,
                   derived: dict | None = None) -> dict:
    manifest = {
        "software": {"package": "treatrep", "version": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        "config": config,
        "seeds": list(seeds),
        "dataset_sha256": dataset_hash(dataset) if dataset is not None else None,
        "dataset_provenance": _jsonable(dataset.provenance) if dataset is not None else None,
        "derived": _jsonable(derived or {}),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
