"""CSV ingestion, model artifacts and run configuration documents.

Numbers are written with Python's shortest round-trip ``repr`` so that a
save/load/save cycle reproduces the same bytes.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .factor_model import FactorConfig, ItemSchema, ResponseDataset
from .latent_effects import FactorITE
from .maximin import DriftModel
from .on_target import Representation
from .simulation import SimConfig

FORMAT_VERSION = "drift-model/1"


class DataFormatError(ValueError):
    """Malformed input file; the message names the offending location."""


# ----------------------------------------------------------------------------
# datasets

def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataFormatError(f"{path}: file is empty")
    return [c.strip() for c in rows[0]], rows[1:]


def load_schema_csv(path) -> List[ItemSchema]:
    header, rows = _read_rows(path)
    if header[:2] != ["name", "kind"]:
        raise DataFormatError(f"{path}: header must be 'name,kind'")
    out = []
    for i, row in enumerate(rows, start=2):
        if len(row) < 2:
            raise DataFormatError(f"{path}: row {i} needs a name and a kind")
        try:
            out.append(ItemSchema(row[0].strip(), row[1].strip()))
        except ValueError as err:
            raise DataFormatError(f"{path}: row {i}: {err}") from None
    return out


def load_dataset_csv(path_data, path_schema) -> ResponseDataset:
    """Read a study from a data CSV and an item-schema CSV.

    The data header is ``id, a, x1..xp, y1..yJ`` with an optional ``o``
    column for the GEO. The schema lists ``name,kind`` for every ``y``
    column; an extra row named ``o`` sets the GEO kind (binary by default).
    """
    header, rows = _read_rows(path_data)
    schema_rows = load_schema_csv(path_schema)
    for required in ("id", "a"):
        if required not in header:
            raise DataFormatError(f"{path_data}: missing column '{required}'")
    x_cols = [c for c in header if re.fullmatch(r"x\d+", c)]
    y_cols = [c for c in header if re.fullmatch(r"y\d+", c)]
    if not x_cols:
        raise DataFormatError(f"{path_data}: no covariate columns x1..xp")
    if not y_cols:
        raise DataFormatError(f"{path_data}: no item columns y1..yJ")
    unknown = set(header) - set(x_cols) - set(y_cols) - {"id", "a", "o"}
    if unknown:
        raise DataFormatError(f"{path_data}: unexpected columns {sorted(unknown)}")

    kinds = {s.name: s.kind for s in schema_rows}
    geo_kind = kinds.pop("o", "binary")
    if set(kinds) != set(y_cols):
        missing = sorted(set(y_cols) - set(kinds))
        extra = sorted(set(kinds) - set(y_cols))
        raise DataFormatError(f"schema mismatch: items without schema {missing}, schema without items {extra}")
    schema = [ItemSchema(c, kinds[c]) for c in y_cols]

    col = {name: j for j, name in enumerate(header)}
    data = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path_data}: row {i} has {len(row)} cells, expected {len(header)}")
        for name, j in col.items():
            if name == "id":
                continue
            try:
                data[i - 2, j] = float(row[j])
            except ValueError:
                raise DataFormatError(f"{path_data}: row {i}, column '{name}': non-numeric value {row[j]!r}") from None
            if not math.isfinite(data[i - 2, j]):
                raise DataFormatError(f"{path_data}: row {i}, column '{name}': non-finite value")

    def check_binary(name):
        bad = np.flatnonzero(~np.isin(data[:, col[name]], (0.0, 1.0)))
        if bad.size:
            i = bad[0]
            raise DataFormatError(
                f"{path_data}: row {i + 2}, column '{name}': value {rows[i][col[name]]!r} is not 0 or 1")

    check_binary("a")
    for c in y_cols:
        if kinds[c] == "binary":
            check_binary(c)
    if "o" in col and geo_kind == "binary":
        check_binary("o")

    return ResponseDataset(
        X=data[:, [col[c] for c in x_cols]],
        A=data[:, col["a"]],
        Y=data[:, [col[c] for c in y_cols]],
        schema=schema,
        O=data[:, col["o"]] if "o" in col else None,
        geo_kind=geo_kind,
    )


def write_dataset_csv(dataset: ResponseDataset, path_data, path_schema):
    """Inverse of ``load_dataset_csv``."""
    header = ["id", "a"] + [f"x{k + 1}" for k in range(dataset.X.shape[1])]
    header += [s.name for s in dataset.schema]
    if dataset.O is not None:
        header.append("o")
    with open(path_data, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.N):
            row = [i + 1, _num(dataset.A[i])] + [_num(v) for v in dataset.X[i]] + [_num(v) for v in dataset.Y[i]]
            if dataset.O is not None:
                row.append(_num(dataset.O[i]))
            w.writerow(row)
    with open(path_schema, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "kind"])
        for s in dataset.schema:
            w.writerow([s.name, s.kind])
        if dataset.O is not None:
            w.writerow(["o", dataset.geo_kind])


def _num(v):
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2 ** 53 else repr(v)


# ----------------------------------------------------------------------------
# model artifacts

@dataclass
class ModelArtifact:
    schema: List[ItemSchema]
    W: np.ndarray
    zeta: np.ndarray
    B: np.ndarray
    anchor_gamma: np.ndarray
    anchor_zeta: float
    delta: float
    gamma_star: np.ndarray
    provenance: dict = field(default_factory=dict)
    seed: Optional[int] = None
    method: str = "randomized_ols"
    format_version: str = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: DriftModel, schema, seed=None) -> "ModelArtifact":
        if model.factor_fit is None:
            raise ValueError("model has no factor fit to persist")
        return cls(schema=list(schema), W=model.factor_fit.W, zeta=model.factor_fit.zeta,
                   B=model.ite.B, anchor_gamma=model.anchor.gamma, anchor_zeta=model.anchor.zeta,
                   delta=model.delta, gamma_star=model.gamma_star,
                   provenance=dict(model.provenance), seed=seed, method=model.ite.method)

    def to_model(self) -> DriftModel:
        """Model usable for prediction; latent scores are not stored, so
        ``factor_fit`` is ``None``."""
        prov = dict(self.provenance)
        return DriftModel(ite=FactorITE(B=self.B, method=self.method),
                          anchor=Representation(self.anchor_gamma, self.anchor_zeta),
                          delta=self.delta, gamma_star=np.asarray(self.gamma_star, dtype=float),
                          provenance=prov)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "schema": [{"name": s.name, "kind": s.kind} for s in self.schema],
            "W": np.asarray(self.W, dtype=float).tolist(),
            "zeta": np.asarray(self.zeta, dtype=float).tolist(),
            "B": np.asarray(self.B, dtype=float).tolist(),
            "method": self.method,
            "anchor": {"gamma": np.asarray(self.anchor_gamma, dtype=float).tolist(),
                       "zeta": float(self.anchor_zeta)},
            "delta": float(self.delta),
            "gamma_star": np.asarray(self.gamma_star, dtype=float).tolist(),
            "provenance": self.provenance,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ModelArtifact":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise DataFormatError(f"model file is not valid JSON: {err}") from None
        if not isinstance(doc, dict):
            raise DataFormatError("model file must hold a JSON object")
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported model format {version!r}; expected {FORMAT_VERSION!r}")
        try:
            art = cls(
                schema=[ItemSchema(s["name"], s["kind"]) for s in doc["schema"]],
                W=_matrix(doc["W"]), zeta=_vector(doc["zeta"]), B=_matrix(doc["B"]),
                anchor_gamma=_vector(doc["anchor"]["gamma"]), anchor_zeta=float(doc["anchor"]["zeta"]),
                delta=float(doc["delta"]), gamma_star=_vector(doc["gamma_star"]),
                provenance=dict(doc["provenance"]), seed=doc["seed"], method=doc["method"],
                format_version=version,
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DataFormatError(f"model file is malformed: {err!r}") from None
        K = art.anchor_gamma.size
        if art.W.shape != (len(art.schema), K) or art.zeta.shape != (len(art.schema),):
            raise DataFormatError("model file: item parameters disagree with the schema")
        if art.B.shape[1] != K or art.gamma_star.shape != (K,):
            raise DataFormatError("model file: factor dimensions disagree")
        return art


def _vector(v):
    out = np.asarray(v, dtype=float)
    if out.ndim != 1:
        raise ValueError("expected a list of numbers")
    return out


def _matrix(v):
    out = np.asarray(v, dtype=float)
    if out.ndim != 2:
        raise ValueError("expected a list of rows")
    return out


def save_model(model_or_artifact, path, schema=None, seed=None) -> ModelArtifact:
    art = model_or_artifact
    if isinstance(art, DriftModel):
        if schema is None:
            raise ValueError("schema is required to save a model")
        art = ModelArtifact.from_model(art, schema, seed=seed)
    Path(path).write_text(art.dumps())
    return art


def load_artifact(path) -> ModelArtifact:
    return ModelArtifact.loads(Path(path).read_text())


# ----------------------------------------------------------------------------
# run configuration

@dataclass
class DriftOptions:
    geo: str = "observed"
    method: str = "randomized"
    delta: object = "auto"
    split_seed: int = 0

    def __post_init__(self):
        if self.geo not in ("observed", "unobserved"):
            raise ValueError("drift.geo must be 'observed' or 'unobserved'")
        if self.method not in ("randomized", "dr"):
            raise ValueError("drift.method must be 'randomized' or 'dr'")
        if self.delta != "auto" and not (isinstance(self.delta, (int, float)) and self.delta >= 0):
            raise ValueError("drift.delta must be 'auto' or a nonnegative number")


@dataclass
class RunConfig:
    """Structured run document with sections ``factor``, ``simulation``,
    ``sweep``, ``drift`` and ``paths`` plus top-level ``seed`` and
    ``threads``. Unknown keys are rejected."""

    factor: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    sweep: Optional[dict] = None
    drift: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 0

    def __post_init__(self):
        _check_keys("factor", self.factor, {f.name for f in fields(FactorConfig)} - {"seed"})
        _check_keys("simulation", self.simulation, {f.name for f in fields(SimConfig)} - {"seed"})
        _check_keys("drift", self.drift, {f.name for f in fields(DriftOptions)})
        _check_keys("paths", self.paths, {"data", "schema", "covariates", "model", "out"})
        if self.sweep is not None:
            _check_keys("sweep", self.sweep, {"param", "values"})
            if self.sweep.get("param") not in ("r", "sigma_v") or not isinstance(self.sweep.get("values"), list):
                raise ValueError("sweep needs param 'r' or 'sigma_v' and a list of values")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if not isinstance(self.threads, int) or self.threads < 0:
            raise ValueError("threads must be a nonnegative integer")
        # validate eagerly so that errors surface at load time
        self.factor_config(K=self.factor.get("K", 1))
        self.sim_config()
        self.drift_options()

    def factor_config(self, K=None) -> FactorConfig:
        opts = dict(self.factor)
        if K is not None:
            opts.setdefault("K", K)
        opts.setdefault("seed", self.seed)
        return FactorConfig(**opts)

    def sim_config(self) -> SimConfig:
        return SimConfig(**{**self.simulation, "seed": self.seed})

    def drift_options(self) -> DriftOptions:
        return DriftOptions(**self.drift)

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
        _check_keys("config", doc, {f.name for f in fields(cls)})
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise DataFormatError(f"{path}: invalid JSON: {err}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_keys(section, doc, allowed):
    if not isinstance(doc, dict):
        raise ValueError(f"{section} must be an object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ValueError(f"unknown key(s) in {section}: {sorted(unknown)}")
