"""
Pipeline - select-then-fit estimation
Heterogeneous fits at rbar, rank selection, shared initialization and the
final homogeneous fit; baseline algorithms run through the same entry point.
"""
from dataclasses import dataclass
from typing import Literal, Optional, Tuple, Union
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from homopursuit.baselines import hetero_ols, homo_ols, pooled_low_rank
from homopursuit.errors import ArgumentError, NumericError
from homopursuit.model import DatasetBundle, coefficient_tensor
from homopursuit.optim import (
    DEFAULT_DAMPING,
    FitConfig,
    FitReport,
    HeteroFit,
    fit_heterogeneous,
    fit_heterogeneous_sparse,
    fit_homogeneous,
    fit_homogeneous_sparse,
)
from homopursuit.selection import RankChoice, default_deltas, initialize_shared, select_ranks, spectral_pairs
from homopursuit.tensor_core import Tensor3

logger = logging.getLogger(__name__)

Algorithm = Literal["homo", "hetero", "homo-sparse", "hetero-sparse", "homo-ols", "hetero-ols", "pooled-lr"]

SPARSE_ALGORITHMS = ("homo-sparse", "hetero-sparse")
OLS_ALGORITHMS = ("homo-ols", "hetero-ols")


class FitJobConfig(BaseModel):
    """Configuration of a fit job read by the `fit` command"""
    model_config = ConfigDict(extra="forbid")

    algorithm: Algorithm = Field(default="homo", description="Fitting algorithm")
    ranks: Union[Literal["auto"], Tuple[int, int, int]] = Field(
        default="auto", description="(r, K1, K2) or 'auto' for data-driven selection"
    )
    link: Literal["linear", "logistic"] = Field(default="linear", description="GLM link")
    eta: Optional[float] = Field(default=None, gt=0, description="Step size")
    max_iters: int = Field(default=500, ge=0, description="Iteration budget per fit")
    tol: float = Field(default=1e-10, ge=0, description="Relative loss change for early stopping")
    sparsity: Optional[Tuple[int, int]] = Field(default=None, description="Row sparsity (s1, s2)")
    ridge_eps: float = Field(default=1e-10, ge=0, description="Gram ridge")
    damping: float = Field(
        default=DEFAULT_DAMPING, ge=0, description="Preconditioner ridge floor, relative to the largest Gram eigenvalue"
    )
    rbar: int = Field(default=5, ge=2, description="Rank of the heterogeneous fits used to select r")
    delta_factors: Tuple[float, float] = Field(
        default=(0.1, 0.1), description="Leading factors of the ridge constants delta1, delta2"
    )
    search_max: Optional[int] = Field(default=None, ge=1, description="Largest K considered")
    threads: int = Field(default=1, ge=1, description="Worker threads")

    @field_validator("ranks")
    @classmethod
    def _consistent_ranks(cls, v):
        if v != "auto" and (min(v) < 1 or v[0] > min(v[1], v[2])):
            raise ValueError(f"ranks must satisfy 1 <= r <= min(K1, K2), got {v}")
        return v

    @field_validator("delta_factors")
    @classmethod
    def _positive_factors(cls, v):
        if min(v) <= 0:
            raise ValueError(f"delta factors must be positive, got {v}")
        return v

    @property
    def sparse(self) -> bool:
        return self.algorithm in SPARSE_ALGORITHMS

    def fit_config(self, ranks: Tuple[int, int, int]) -> FitConfig:
        return FitConfig(
            link=self.link,
            eta=self.eta,
            max_iters=self.max_iters,
            tol=self.tol,
            ranks=ranks,
            sparsity=self.sparsity if self.sparse else None,
            ridge_eps=self.ridge_eps,
            damping=self.damping,
            threads=self.threads,
        )


@dataclass
class EstimateResult:
    """Outcome of `estimate`: the final fit plus what was selected on the way"""
    algorithm: str
    fit: Union[FitReport, HeteroFit, None]
    coefficients: Tensor3
    ranks: Optional[Tuple[int, int, int]] = None
    rank_choice: Optional[RankChoice] = None
    hetero: Optional[HeteroFit] = None

    @property
    def iters(self) -> int:
        if isinstance(self.fit, FitReport):
            return self.fit.iters
        if isinstance(self.fit, HeteroFit):
            return max(self.fit.iters) if self.fit.iters else 0
        return 0


def _hetero(data: DatasetBundle, r: int, job: FitJobConfig) -> HeteroFit:
    # only r matters for heterogeneous fits; K1 = K2 = r satisfies the config checks
    cfg = job.fit_config((r, r, r))
    init = spectral_pairs(data, r, cfg.link_spec, cfg.sparsity, cfg.ridge_eps)
    if cfg.sparsity is not None:
        return fit_heterogeneous_sparse(data, init, cfg)
    return fit_heterogeneous(data, init, cfg)


def _check_sparsity(data: DatasetBundle, job: FitJobConfig) -> None:
    if job.sparse and job.sparsity is None:
        raise ArgumentError(f"algorithm '{job.algorithm}' needs sparsity levels (s1, s2)")
    if job.sparsity is not None:
        s1, s2 = job.sparsity
        if not (1 <= s1 <= data.dims[0] and 1 <= s2 <= data.dims[1]):
            raise ArgumentError(f"sparsity {job.sparsity} out of range for dims {data.dims}")


def tuning_deltas(data: DatasetBundle, job: FitJobConfig) -> Tuple[float, float]:
    """Ridge constants at the data's n, mean m and p-bar (or s-bar for sparse fits)"""
    scale = max(job.sparsity) if job.sparse and job.sparsity is not None else max(data.dims)
    return default_deltas(data.n, data.mean_m, scale, job.delta_factors)


def choose_ranks(data: DatasetBundle, job: FitJobConfig) -> Tuple[RankChoice, HeteroFit]:
    """Rank selection: r from fits at rbar, (K1, K2) from the aggregates of fits at r"""
    if job.rbar > min(data.dims):
        raise ArgumentError(f"rbar={job.rbar} exceeds min(p1, p2)={min(data.dims)}")
    delta1, delta2 = tuning_deltas(data, job)
    logger.info(f"Selecting ranks with rbar={job.rbar}, delta1={delta1:.4g}, delta2={delta2:.4g}")
    fits_rbar = _hetero(data, job.rbar, job)
    return select_ranks(
        fits_rbar,
        lambda r: _hetero(data, r, job),
        delta1,
        delta2,
        job.rbar,
        job.search_max,
    )


def _hetero_result(data: DatasetBundle, job: FitJobConfig) -> EstimateResult:
    choice = None
    if job.ranks == "auto":
        choice, fit = choose_ranks(data, job)
        r = choice.r
    else:
        r = job.ranks[0]
        fit = _hetero(data, r, job)
    return EstimateResult(
        algorithm=job.algorithm,
        fit=fit,
        coefficients=fit.coefficients(),
        ranks=(r, r, r) if choice is None else choice.ranks,
        rank_choice=choice,
        hetero=fit,
    )


def _homo_result(data: DatasetBundle, job: FitJobConfig) -> EstimateResult:
    choice = None
    if job.ranks == "auto":
        choice, hetero = choose_ranks(data, job)
        ranks = choice.ranks
    else:
        ranks = tuple(job.ranks)
        hetero = _hetero(data, ranks[0], job)
    init = initialize_shared(hetero, ranks[1], ranks[2])
    cfg = job.fit_config(ranks)
    if job.sparse:
        report = fit_homogeneous_sparse(data, init, cfg)
    else:
        report = fit_homogeneous(data, init, cfg)
    return EstimateResult(
        algorithm=job.algorithm,
        fit=report,
        coefficients=coefficient_tensor(report.theta),
        ranks=ranks,
        rank_choice=choice,
        hetero=hetero,
    )


def _baseline_result(data: DatasetBundle, job: FitJobConfig) -> EstimateResult:
    if job.algorithm in OLS_ALGORITHMS:
        if job.link != "linear":
            raise ArgumentError(f"'{job.algorithm}' needs the linear link, got '{job.link}'")
        B = homo_ols(data) if job.algorithm == "homo-ols" else hetero_ols(data)
        return EstimateResult(algorithm=job.algorithm, fit=None, coefficients=B)

    choice = None
    if job.ranks == "auto":
        choice, _ = choose_ranks(data.pooled(), job)
        r = choice.r
    else:
        r = job.ranks[0]
    fit = pooled_low_rank(data, job.fit_config((r, r, r)))
    return EstimateResult(
        algorithm=job.algorithm,
        fit=fit,
        coefficients=fit.coefficients(),
        ranks=(r, r, r),
        rank_choice=choice,
    )


def estimate(data: DatasetBundle, job: FitJobConfig) -> EstimateResult:
    """Run the configured algorithm, selecting ranks first when they are 'auto'"""
    _check_sparsity(data, job)
    logger.info(
        f"Estimating with {job.algorithm}: n={data.n}, dims={data.dims}, "
        f"mean m={data.mean_m:.1f}, ranks={job.ranks}"
    )
    if job.algorithm in ("homo", "homo-sparse"):
        result = _homo_result(data, job)
    elif job.algorithm in ("hetero", "hetero-sparse"):
        result = _hetero_result(data, job)
    else:
        result = _baseline_result(data, job)
    if not np.all(np.isfinite(result.coefficients)):
        raise NumericError(f"{job.algorithm} produced non-finite coefficients")
    return result
