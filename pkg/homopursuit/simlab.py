"""
SimLab - seeded synthetic data and Monte-Carlo experiments
Rank-selection consistency and convergence-rate experiments over a grid of
(n, m) cells; every replication owns a random stream derived from the
master seed, so results do not depend on scheduling.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Tuple, Union
import logging
import time

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from homopursuit.errors import ArgumentError, HomoPursuitError
from homopursuit.metrics import TrueParamPack, proj_frob_error, tensor_errors, truth_from_parameters
from homopursuit.model import DatasetBundle, ParameterSet, get_link, map_individuals
from homopursuit.pipeline import FitJobConfig, choose_ranks, estimate

logger = logging.getLogger(__name__)

Setting = Literal["dense", "first_five_rows"]


class SimConfig(BaseModel):
    """One simulation design; defaults follow the reference experiment"""
    model_config = ConfigDict(extra="forbid")

    p1: int = Field(default=20, ge=1, description="Rows of each coefficient matrix")
    p2: int = Field(default=20, ge=1, description="Columns of each coefficient matrix")
    n: int = Field(default=16, ge=1, description="Number of individuals")
    m: int = Field(default=128, ge=1, description="Samples per individual")
    ranks: Tuple[int, int, int] = Field(default=(2, 4, 4), description="(r, K1, K2)")
    model: Literal["linear", "logistic"] = Field(default="linear", description="Response model")
    noise_sd: float = Field(default=1.0, ge=0, description="Noise standard deviation (linear only)")
    core_scale: Tuple[float, ...] = Field(default=(5.0, 5.0), description="Diagonal of the core scale")
    setting: Setting = Field(default="dense", description="dense or row-sparse shared factors")
    support_size: int = Field(default=5, ge=1, description="Nonzero rows of C*, R* when sparse")
    reps: int = Field(default=100, ge=1, description="Replications per cell")
    seed: int = Field(default=0, ge=0, description="Master seed")
    rbar: int = Field(default=5, ge=2, description="Rank of the fits used to select r")
    eta: Optional[float] = Field(default=None, gt=0, description="Step size")
    max_iters: int = Field(default=500, ge=0, description="Iteration budget per fit")
    tol: float = Field(default=1e-10, ge=0, description="Relative loss change for early stopping")
    delta_factors: Tuple[float, float] = Field(default=(0.1, 0.1), description="Ridge constant factors")

    @model_validator(mode="after")
    def _check(self):
        r, K1, K2 = self.ranks
        if min(self.ranks) < 1 or r > min(K1, K2):
            raise ValueError(f"ranks must satisfy 1 <= r <= min(K1, K2), got {self.ranks}")
        if K1 > self.p1 or K2 > self.p2:
            raise ValueError(f"K1={K1}, K2={K2} exceed dims ({self.p1}, {self.p2})")
        if len(self.core_scale) != r or min(self.core_scale) <= 0:
            raise ValueError(f"core_scale needs {r} positive values, got {self.core_scale}")
        return self

    @property
    def sparsity(self) -> Optional[Tuple[int, int]]:
        if self.setting == "dense":
            return None
        return self.support_size, self.support_size

    def job(self, algorithm: str, ranks) -> FitJobConfig:
        return FitJobConfig(
            algorithm=algorithm,
            ranks=ranks,
            link=self.model,
            eta=self.eta,
            max_iters=self.max_iters,
            tol=self.tol,
            sparsity=self.sparsity,
            rbar=self.rbar,
            delta_factors=self.delta_factors,
        )


class ExperimentConfig(BaseModel):
    """A grid of cells sharing a base design"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["rank", "rate"] = Field(default="rank", description="Experiment type")
    base: SimConfig = Field(default_factory=SimConfig, description="Base design")
    n_values: Optional[List[int]] = Field(default=None, description="Grid over n (default: base n)")
    m_values: Optional[List[int]] = Field(default=None, description="Grid over m (default: base m)")
    settings: Optional[List[Setting]] = Field(default=None, description="Settings (default: base setting)")

    @model_validator(mode="after")
    def _check(self):
        for name in ("n_values", "m_values"):
            values = getattr(self, name)
            if values is not None and (not values or min(values) < 1):
                raise ValueError(f"{name} must be a non-empty list of positive integers")
        if self.kind == "rate" and len(self.ns) > 1 and len(self.ms) > 1:
            raise ValueError("a rate experiment varies either n or m, not both")
        return self

    @property
    def ns(self) -> List[int]:
        return list(self.n_values) if self.n_values else [self.base.n]

    @property
    def ms(self) -> List[int]:
        return list(self.m_values) if self.m_values else [self.base.m]

    @property
    def axis(self) -> Optional[str]:
        if len(self.ns) > 1:
            return "n"
        if len(self.ms) > 1:
            return "m"
        return None

    def cells(self) -> List[SimConfig]:
        """Cell designs in grid order: setting, then n, then m"""
        return [
            self.base.model_copy(update={"setting": s, "n": n, "m": m})
            for s in (self.settings or [self.base.setting])
            for n in self.ns
            for m in self.ms
        ]


@dataclass
class ExperimentRecord:
    """Raw per-replication records plus summaries recomputable from them"""
    kind: str
    config: dict
    records: List[dict] = field(default_factory=list)
    summary: List[dict] = field(default_factory=list)
    slopes: List[dict] = field(default_factory=list)
    timing: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "records": self.records,
            "summary": self.summary,
            "slopes": self.slopes,
            "timing": self.timing,
        }


def derive_seed(master: int, cell: int, rep: int) -> int:
    """64-bit sub-seed for replication rep of grid cell cell"""
    state = np.random.SeedSequence([master, cell, rep]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    Q, Rq = np.linalg.qr(rng.standard_normal((rows, cols)))
    return Q * np.where(np.diag(Rq) < 0, -1.0, 1.0)


def _shared_factor(rng: np.random.Generator, p: int, K: int, cfg: SimConfig) -> np.ndarray:
    if cfg.setting == "dense":
        return _orthonormal(rng, p, K)
    if cfg.support_size < K or cfg.support_size > p:
        raise ArgumentError(f"support of {cfg.support_size} rows cannot hold K={K} columns in p={p}")
    F = np.zeros((p, K))
    F[: cfg.support_size] = _orthonormal(rng, cfg.support_size, K)
    return F


def gen_true_params(cfg: SimConfig, rng: np.random.Generator) -> TrueParamPack:
    """
    Random truth: orthonormal C*, R* (row-sparse when configured) and
    B_i* = C* U_i diag(core_scale) V_i^T R*^T with orthonormal U_i, V_i.
    """
    r, K1, K2 = cfg.ranks
    C = _shared_factor(rng, cfg.p1, K1, cfg)
    R = _shared_factor(rng, cfg.p2, K2, cfg)
    root = np.sqrt(np.asarray(cfg.core_scale, dtype=np.float64))
    L1, L2 = [], []
    for _ in range(cfg.n):
        L1.append(_orthonormal(rng, K1, r) * root)
        L2.append(_orthonormal(rng, K2, r) * root)
    return truth_from_parameters(ParameterSet(C=C, R=R, L1=L1, L2=L2))


def gen_dataset(truth: TrueParamPack, cfg: SimConfig, rng: np.random.Generator) -> DatasetBundle:
    """Gaussian covariates; linear responses with N(0, noise_sd^2) noise or Bernoulli responses"""
    link = get_link(cfg.model)
    p1, p2, n = truth.B_star.shape
    xs, ys = [], []
    for i in range(n):
        X = rng.standard_normal((cfg.m, p1, p2))
        t = X.reshape(cfg.m, -1) @ truth.B_star[:, :, i].reshape(-1)
        if cfg.model == "linear":
            y = t + cfg.noise_sd * rng.standard_normal(cfg.m) if cfg.noise_sd > 0 else t.copy()
        else:
            y = (rng.random(cfg.m) < link.g_prime(t)).astype(np.float64)
        xs.append(X)
        ys.append(y)
    return DatasetBundle(xs, ys)


def _neg_log(value: float) -> float:
    return float(-np.log(max(value, np.finfo(np.float64).tiny)))


def _rank_outcome(cell: SimConfig, data: DatasetBundle, truth: TrueParamPack) -> dict:
    algorithm = "hetero" if cell.setting == "dense" else "hetero-sparse"
    choice, fits = choose_ranks(data, cell.job(algorithm, "auto"))
    return {
        "r_hat": choice.r,
        "K1_hat": choice.K1,
        "K2_hat": choice.K2,
        "correct": choice.ranks == tuple(cell.ranks),
        "iters": max(fits.iters),
    }


def _rate_outcome(cell: SimConfig, data: DatasetBundle, truth: TrueParamPack) -> dict:
    algorithm = "homo" if cell.setting == "dense" else "homo-sparse"
    result = estimate(data, cell.job(algorithm, tuple(cell.ranks)))
    err_B = tensor_errors(result.coefficients, truth.B_star)[1]
    err_hetero = tensor_errors(result.hetero.coefficients(), truth.B_star)[1]
    err_C = proj_frob_error(result.fit.theta.C, truth.theta_star.C)
    err_R = proj_frob_error(result.fit.theta.R, truth.theta_star.R)
    return {
        "err_B": err_B,
        "err_C": err_C,
        "err_R": err_R,
        "hetero_err_B": err_hetero,
        "neg_log_err_B": _neg_log(err_B),
        "neg_log_err_C": _neg_log(err_C),
        "neg_log_err_R": _neg_log(err_R),
        "hetero_neg_log_err_B": _neg_log(err_hetero),
        "iters": result.iters,
    }


def _run_cells(
    exp: ExperimentConfig,
    outcome: Callable[[SimConfig, DatasetBundle, TrueParamPack], dict],
    threads: int,
) -> Tuple[List[dict], List[dict]]:
    jobs = [(c, cell, rep) for c, cell in enumerate(exp.cells()) for rep in range(cell.reps)]
    master = exp.base.seed

    def replicate(k: int):
        c, cell, rep = jobs[k]
        seed = derive_seed(master, c, rep)
        record = {"cell": c, "n": cell.n, "m": cell.m, "setting": cell.setting, "rep": rep, "seed": seed}
        start = time.perf_counter()
        try:
            rng = np.random.default_rng(seed)
            truth = gen_true_params(cell, rng)
            data = gen_dataset(truth, cell, rng)
            record.update(outcome(cell, data, truth))
            record["error"] = None
        except (HomoPursuitError, np.linalg.LinAlgError) as e:
            logger.warning(f"Replication {rep} of cell {c} failed: {e}")
            record["error"] = str(e)
        elapsed = time.perf_counter() - start
        return record, {"cell": c, "rep": rep, "seconds": elapsed}

    logger.info(f"Running {len(jobs)} replications over {len(exp.cells())} cells with {threads} threads")
    results = map_individuals(replicate, len(jobs), threads)
    return [r for r, _ in results], [t for _, t in results]


def _group(records: List[dict]):
    df = pd.DataFrame(records)
    return df.groupby(["cell", "n", "m", "setting"], sort=True)


def summarize_rank(records: List[dict]) -> List[dict]:
    """Proportion of exactly correct (r, K1, K2) per cell; failures count as incorrect"""
    summary = []
    for (_, n, m, setting), group in _group(records):
        ok = group[group["error"].isna()]
        correct = int(ok["correct"].astype(bool).sum()) if "correct" in ok else 0
        summary.append({
            "n": int(n),
            "m": int(m),
            "setting": setting,
            "prop_correct": correct / len(group),
            "reps": int(len(group)),
            "failures": int(len(group) - len(ok)),
        })
    return summary


RATE_METRICS = ("neg_log_err_B", "neg_log_err_C", "neg_log_err_R", "hetero_neg_log_err_B")


def summarize_rate(records: List[dict]) -> List[dict]:
    """Mean negative log errors per cell over the successful replications"""
    summary = []
    for (_, n, m, setting), group in _group(records):
        ok = group[group["error"].isna()]
        row = {"n": int(n), "m": int(m), "setting": setting}
        for metric in RATE_METRICS:
            row[metric] = float(ok[metric].mean()) if len(ok) and metric in ok else float("nan")
        row["reps"] = int(len(group))
        row["failures"] = int(len(group) - len(ok))
        summary.append(row)
    return summary


def rate_slopes(summary: List[dict], axis: Optional[str]) -> List[dict]:
    """Least-squares slope of each metric against log n (or log m) per setting"""
    if axis is None:
        return []
    df = pd.DataFrame(summary)
    slopes = []
    for setting, group in df.groupby("setting", sort=False):
        x = np.log(group[axis].to_numpy(dtype=np.float64))
        for metric in RATE_METRICS:
            y = group[metric].to_numpy(dtype=np.float64)
            finite = np.isfinite(y)
            slope = float(np.polyfit(x[finite], y[finite], 1)[0]) if finite.sum() >= 2 else float("nan")
            slopes.append({"setting": setting, "axis": axis, "metric": metric, "slope": slope})
    return slopes


def _as_experiment(cfg: Union[SimConfig, ExperimentConfig], kind: str) -> ExperimentConfig:
    if isinstance(cfg, SimConfig):
        return ExperimentConfig(kind=kind, base=cfg)
    if cfg.kind != kind:
        raise ArgumentError(f"expected a '{kind}' experiment, got '{cfg.kind}'")
    return cfg


def run_rank_experiment(cfg: Union[SimConfig, ExperimentConfig], threads: int = 1) -> ExperimentRecord:
    """Rank-selection consistency: share of replications recovering (r, K1, K2) exactly"""
    exp = _as_experiment(cfg, "rank")
    records, timing = _run_cells(exp, _rank_outcome, threads)
    summary = summarize_rank(records)
    for row in summary:
        logger.info(f"Cell n={row['n']}, m={row['m']}, {row['setting']}: prop_correct={row['prop_correct']:.3f}")
    return ExperimentRecord(
        kind="rank", config=exp.model_dump(mode="json"), records=records, summary=summary, timing=timing
    )


def run_rate_experiment(cfg: Union[SimConfig, ExperimentConfig], threads: int = 1) -> ExperimentRecord:
    """Estimation errors of the homogeneous fit (and its heterogeneous start) across the grid"""
    exp = _as_experiment(cfg, "rate")
    records, timing = _run_cells(exp, _rate_outcome, threads)
    summary = summarize_rate(records)
    slopes = rate_slopes(summary, exp.axis)
    for row in slopes:
        logger.info(f"Slope of {row['metric']} vs log {row['axis']} ({row['setting']}): {row['slope']:.3f}")
    return ExperimentRecord(
        kind="rate",
        config=exp.model_dump(mode="json"),
        records=records,
        summary=summary,
        slopes=slopes,
        timing=timing,
    )


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentRecord:
    runners: Dict[str, Callable] = {"rank": run_rank_experiment, "rate": run_rate_experiment}
    return runners[cfg.kind](cfg, threads)
