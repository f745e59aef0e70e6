"""
Storage - on-disk formats
Dataset directories (manifest.json + per-individual CSV files), parameter
files (theta.bin + theta.meta.json) and truth directories.

theta.bin holds little-endian float64 arrays back to back, each in C
(row-major) order; theta.meta.json lists every array's name, shape and
offset in elements.
"""
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from homopursuit import __version__
from homopursuit.errors import ConfigError, DatasetError
from homopursuit.metrics import TrueParamPack, truth_from_parameters
from homopursuit.model import DatasetBundle, ParameterSet, coefficient_tensor
from homopursuit.optim import FitReport, HeteroFit
from homopursuit.tensor_core import Tensor3

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
DTYPE = "<f8"

Parameters = Union[ParameterSet, HeteroFit, np.ndarray]


class DatasetLayout(BaseModel):
    model_config = ConfigDict(extra="forbid")

    covariates: str = Field(default="X_{i}.csv", description="Covariate file pattern, 0-based i")
    responses: str = Field(default="y_{i}.csv", description="Response file pattern, 0-based i")
    vectorization: Literal["row-major"] = Field(
        default="row-major", description="Entry (a, b) of X_ij sits in column a*p2 + b"
    )


class DatasetManifest(BaseModel):
    """Description of a dataset directory"""
    model_config = ConfigDict(extra="forbid")

    n: int = Field(ge=1, description="Number of individuals")
    p1: int = Field(ge=1, description="Covariate rows")
    p2: int = Field(ge=1, description="Covariate columns")
    m: List[int] = Field(description="Samples per individual")
    model: Literal["linear", "logistic"] = Field(default="linear", description="Response model")
    layout: DatasetLayout = Field(default_factory=DatasetLayout)
    version: str = Field(default=__version__, description="Writer version")


class ArraySpec(BaseModel):
    name: str
    shape: List[int]
    offset: int


class ParameterMeta(BaseModel):
    """Contents of theta.meta.json"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["homogeneous", "heterogeneous", "tensor"]
    dtype: Literal["<f8"] = DTYPE
    arrays: List[ArraySpec]
    ranks: Optional[List[int]] = None


def _write_json(path: Path, payload: dict) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
    return path


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path}: {e}") from e


def _write_csv(path: Path, values: np.ndarray) -> None:
    pd.DataFrame(values).to_csv(path, header=False, index=False, float_format=FLOAT_FORMAT)


def _read_csv(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        values = pd.read_csv(path, header=None, dtype=np.float64, float_precision="round_trip").to_numpy()
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"cannot parse {path}: {e}") from e
    if values.shape != (rows, cols):
        raise DatasetError(f"{path}: expected {rows} rows x {cols} columns, found {values.shape[0]} x {values.shape[1]}")
    return values


def write_dataset(data: DatasetBundle, out_dir: Union[str, Path], model: str = "linear") -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p1, p2 = data.dims
    manifest = DatasetManifest(n=data.n, p1=p1, p2=p2, m=data.m, model=model)
    for i in range(data.n):
        _write_csv(out / manifest.layout.covariates.format(i=i), data.flat(i))
        _write_csv(out / manifest.layout.responses.format(i=i), data.ys[i].reshape(-1, 1))
    _write_json(out / "manifest.json", manifest.model_dump(mode="json"))
    logger.info(f"Dataset written: {out} (n={data.n}, dims={data.dims})")
    return manifest


def read_dataset(data_dir: Union[str, Path]) -> Tuple[DatasetBundle, DatasetManifest]:
    root = Path(data_dir)
    try:
        manifest = DatasetManifest.model_validate(_read_json(root / "manifest.json"))
    except ValidationError as e:
        raise DatasetError(f"invalid dataset manifest {root / 'manifest.json'}: {e}") from e
    if len(manifest.m) != manifest.n or min(manifest.m) < 1:
        raise DatasetError(f"{root / 'manifest.json'}: m must list {manifest.n} positive counts")
    xs, ys = [], []
    for i, m_i in enumerate(manifest.m):
        X = _read_csv(root / manifest.layout.covariates.format(i=i), m_i, manifest.p1 * manifest.p2)
        y = _read_csv(root / manifest.layout.responses.format(i=i), m_i, 1)
        xs.append(X.reshape(m_i, manifest.p1, manifest.p2))
        ys.append(y[:, 0])
    return DatasetBundle(xs, ys), manifest


def _named_arrays(params: Parameters) -> Tuple[str, List[Tuple[str, np.ndarray]], Optional[List[int]]]:
    if isinstance(params, ParameterSet):
        arrays = [("C", params.C), ("R", params.R)]
        arrays += [(f"L1_{i}", a) for i, a in enumerate(params.L1)]
        arrays += [(f"L2_{i}", b) for i, b in enumerate(params.L2)]
        return "homogeneous", arrays, list(params.ranks)
    if isinstance(params, HeteroFit):
        arrays = [(f"C_{i}", c) for i, c in enumerate(params.C)]
        arrays += [(f"R_{i}", r) for i, r in enumerate(params.R)]
        return "heterogeneous", arrays, [params.rank]
    B = np.asarray(params, dtype=np.float64)
    if B.ndim != 3:
        raise DatasetError(f"coefficient tensor must be 3-D, got shape {B.shape}")
    return "tensor", [("B", B)], None


def write_parameters(params: Parameters, out_dir: Union[str, Path], stem: str = "theta") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind, arrays, ranks = _named_arrays(params)
    specs, offset = [], 0
    with open(out / f"{stem}.bin", "wb") as f:
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr, dtype=DTYPE)
            f.write(arr.tobytes(order="C"))
            specs.append(ArraySpec(name=name, shape=list(arr.shape), offset=offset))
            offset += arr.size
    meta = ParameterMeta(kind=kind, arrays=specs, ranks=ranks)
    _write_json(out / f"{stem}.meta.json", meta.model_dump(mode="json"))
    logger.info(f"Parameters written: {out / (stem + '.bin')} ({kind}, {len(specs)} arrays)")
    return out / f"{stem}.bin"


def read_parameters(in_dir: Union[str, Path], stem: str = "theta") -> Parameters:
    root = Path(in_dir)
    try:
        meta = ParameterMeta.model_validate(_read_json(root / f"{stem}.meta.json"))
    except ValidationError as e:
        raise DatasetError(f"invalid parameter metadata {root / (stem + '.meta.json')}: {e}") from e
    bin_path = root / f"{stem}.bin"
    if not bin_path.exists():
        raise DatasetError(f"missing file: {bin_path}")
    flat = np.fromfile(bin_path, dtype=DTYPE)
    arrays: Dict[str, np.ndarray] = {}
    for spec in meta.arrays:
        size = int(np.prod(spec.shape))
        if spec.offset + size > flat.size:
            raise DatasetError(f"{bin_path}: array {spec.name} runs past the end of the file")
        arrays[spec.name] = flat[spec.offset: spec.offset + size].reshape(spec.shape).astype(np.float64)

    if meta.kind == "tensor":
        return np.asfortranarray(arrays["B"])
    try:
        if meta.kind == "homogeneous":
            n = sum(1 for name in arrays if name.startswith("L1_"))
            return ParameterSet(
                C=arrays["C"],
                R=arrays["R"],
                L1=[arrays[f"L1_{i}"] for i in range(n)],
                L2=[arrays[f"L2_{i}"] for i in range(n)],
            )
        n = sum(1 for name in arrays if name.startswith("C_"))
        return HeteroFit(C=[arrays[f"C_{i}"] for i in range(n)], R=[arrays[f"R_{i}"] for i in range(n)])
    except KeyError as e:
        raise DatasetError(f"{root / (stem + '.meta.json')}: missing array {e}") from e


def coefficients_of(params: Parameters) -> Tensor3:
    """Coefficient tensor of any stored parameter kind"""
    if isinstance(params, ParameterSet):
        return coefficient_tensor(params)
    if isinstance(params, HeteroFit):
        return params.coefficients()
    return np.asarray(params, dtype=np.float64)


def write_truth(truth: TrueParamPack, out_dir: Union[str, Path], config: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    write_parameters(truth.theta_star, out)
    _write_json(out / "truth.json", {"config": config or {}, "version": __version__})
    return out


def read_truth(truth_dir: Union[str, Path]) -> TrueParamPack:
    params = read_parameters(truth_dir)
    if not isinstance(params, ParameterSet):
        raise DatasetError(f"{truth_dir}: truth must be stored as homogeneous parameters")
    return truth_from_parameters(params)


def write_loss_trace(fit: Union[FitReport, HeteroFit], out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / "loss_trace.csv"
    if isinstance(fit, FitReport):
        df = pd.DataFrame({"iteration": np.arange(len(fit.loss_trace)), "loss": fit.loss_trace})
    else:
        df = pd.DataFrame(
            [
                {"individual": i, "iteration": t, "loss": loss}
                for i, trace in enumerate(fit.loss_traces)
                for t, loss in enumerate(trace)
            ],
            columns=["individual", "iteration", "loss"],
        )
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_active_rows(fit: Union[FitReport, HeteroFit], out_dir: Union[str, Path]) -> Optional[Path]:
    if fit.active_rows is None:
        return None
    if isinstance(fit, FitReport):
        payload = {"S1": list(fit.active_rows[0]), "S2": list(fit.active_rows[1])}
    else:
        payload = {"individuals": [{"S1": list(s1), "S2": list(s2)} for s1, s2 in fit.active_rows]}
    return _write_json(Path(out_dir) / "active_rows.json", payload)


def load_config(path: Union[str, Path], model: type) -> BaseModel:
    """Parse a JSON config file into the given pydantic model"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        return model.model_validate(payload)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
