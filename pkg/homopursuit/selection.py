"""
Selection - spectral initialization and ridge-type ratio rank selection
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from numpy.typing import NDArray

from homopursuit.errors import ArgumentError
from homopursuit.model import DatasetBundle, LinkSpec, ParameterSet, individual_loss_and_gradient
from homopursuit.optim import HeteroFit, scaled_hard_threshold_step
from homopursuit.tensor_core import Matrix, sym_eig_desc, thin_svd

logger = logging.getLogger(__name__)


@dataclass
class AggregateSubspace:
    """M_C = sum_i C_i C_i^T and M_R = sum_i R_i R_i^T with their eigenpairs"""
    M_C: Matrix
    M_R: Matrix
    eigvalsC: NDArray[np.float64]
    eigvalsR: NDArray[np.float64]
    eigvecsC: Matrix
    eigvecsR: Matrix


@dataclass
class RankChoice:
    """Selected ranks and the ratio sequences they were read from"""
    r: int
    K1: int
    K2: int
    ratio_traces: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def ranks(self) -> Tuple[int, int, int]:
        return self.r, self.K1, self.K2

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "K1": self.K1,
            "K2": self.K2,
            "ratio_traces": {k: list(v) for k, v in self.ratio_traces.items()},
        }


def default_deltas(n: int, m: float, scale_dim: int, factors: Tuple[float, float] = (0.1, 0.1)) -> Tuple[float, float]:
    """
    Ridge constants delta1 = a n p m^{-1/4} and delta2 = b n p m^{-1/2}.

    scale_dim is max(p1, p2) for dense fits and max(s1, s2) for sparse ones.
    """
    if n < 1 or m <= 0 or scale_dim < 1:
        raise ArgumentError(f"need positive n, m and dimension, got {n}, {m}, {scale_dim}")
    base = n * scale_dim
    return factors[0] * base * m ** -0.25, factors[1] * base * m ** -0.5


def ridge_ratios(values: Sequence[float], delta: float, upto: int) -> NDArray[np.float64]:
    """(v_k + delta) / (v_{k+1} + delta) for k = 1..upto; missing trailing values count as zero"""
    if delta <= 0:
        raise ArgumentError(f"delta must be positive, got {delta}")
    v = np.zeros(upto + 1)
    given = np.asarray(values, dtype=np.float64)[: upto + 1]
    v[: given.size] = given
    return (v[:-1] + delta) / (v[1:] + delta)


def _argmax_from(ratios: NDArray[np.float64], start: int) -> int:
    # np.argmax returns the first maximum, so ties go to the smaller index
    return start + int(np.argmax(ratios[start - 1:]))


def aggregate_subspaces(fits: HeteroFit) -> AggregateSubspace:
    p1, p2 = fits.dims
    M_C = np.zeros((p1, p1))
    M_R = np.zeros((p2, p2))
    for C_i, R_i in zip(fits.C, fits.R):
        M_C += C_i @ C_i.T
        M_R += R_i @ R_i.T
    M_C = 0.5 * (M_C + M_C.T)
    M_R = 0.5 * (M_R + M_R.T)
    wC, VC = sym_eig_desc(M_C)
    wR, VR = sym_eig_desc(M_R)
    return AggregateSubspace(M_C=M_C, M_R=M_R, eigvalsC=wC, eigvalsR=wR, eigvecsC=VC, eigvecsR=VR)


def initialize_shared(
    fits: HeteroFit, K1: int, K2: int, agg: Optional[AggregateSubspace] = None
) -> ParameterSet:
    """Top eigenvectors of the aggregates as C, R; loadings by projecting the individual factors"""
    p1, p2 = fits.dims
    if not (1 <= K1 <= p1 and 1 <= K2 <= p2):
        raise ArgumentError(f"K1={K1}, K2={K2} out of range for dims ({p1}, {p2})")
    if fits.rank > min(K1, K2):
        raise ArgumentError(f"rank {fits.rank} exceeds min(K1, K2)={min(K1, K2)}")
    agg = agg or aggregate_subspaces(fits)
    C0 = agg.eigvecsC[:, :K1].copy()
    R0 = agg.eigvecsR[:, :K2].copy()
    return ParameterSet(
        C=C0,
        R=R0,
        L1=[C0.T @ C_i for C_i in fits.C],
        L2=[R0.T @ R_i for R_i in fits.R],
    )


def singular_value_sums(fits: HeteroFit) -> NDArray[np.float64]:
    """sum_i sigma_k(C_i R_i^T) for k = 1..rank"""
    k = fits.rank
    total = np.zeros(k)
    for i in range(fits.n):
        s = np.linalg.svd(fits.slice(i), compute_uv=False)
        total[: min(k, s.size)] += s[:k]
    return total


def select_rank_r(fits: HeteroFit, delta1: float, rbar: int) -> int:
    """Ridge-type ratio estimate of r from heterogeneous fits at rank rbar"""
    return _select_rank_r(fits, delta1, rbar)[0]


def _select_rank_r(fits: HeteroFit, delta1: float, rbar: int) -> Tuple[int, NDArray[np.float64]]:
    if rbar < 2:
        raise ArgumentError(f"rbar must be at least 2, got {rbar}")
    if fits.rank != rbar:
        raise ArgumentError(f"fits have rank {fits.rank}, expected rbar={rbar}")
    ratios = ridge_ratios(singular_value_sums(fits), delta1, rbar - 1)
    return _argmax_from(ratios, 1), ratios


def _search_limits(
    agg: AggregateSubspace, r: int, search_max: Union[int, Tuple[int, int], None]
) -> Tuple[int, int]:
    p1, p2 = agg.M_C.shape[0], agg.M_R.shape[0]
    if search_max is None:
        limits = (min(4 * r, p1 - 1), min(4 * r, p2 - 1))
    elif isinstance(search_max, int):
        if search_max > min(p1, p2):
            raise ArgumentError(f"searchMax={search_max} exceeds min(p1, p2)={min(p1, p2)}")
        limits = (search_max, search_max)
    else:
        limits = tuple(int(s) for s in search_max)
        if limits[0] > p1 or limits[1] > p2:
            raise ArgumentError(f"search limits {limits} exceed dims ({p1}, {p2})")
    if min(limits) < r:
        raise ArgumentError(f"search limits {limits} smaller than r={r}")
    return limits


def select_subspace_ranks(
    agg: AggregateSubspace,
    r: int,
    delta2: float,
    search_max: Union[int, Tuple[int, int], None] = None,
) -> Tuple[int, int]:
    """
    Ridge-type ratio estimates of (K1, K2) over consecutive aggregate eigenvalues.

    The argmax runs over k = r..search_max, not k = 1..search_max: a
    shared subspace holding rank-r slices has dimension at least r, so
    ratios below r are computed (and kept in the traces) but never
    selected. search_max defaults to min(4r, p - 1) per mode.
    """
    K1, K2, _ = _select_subspace_ranks(agg, r, delta2, search_max)
    return K1, K2


def _select_subspace_ranks(agg, r, delta2, search_max):
    if r < 1:
        raise ArgumentError(f"r must be positive, got {r}")
    lim1, lim2 = _search_limits(agg, r, search_max)
    ratios_C = ridge_ratios(np.clip(agg.eigvalsC, 0.0, None), delta2, lim1)
    ratios_R = ridge_ratios(np.clip(agg.eigvalsR, 0.0, None), delta2, lim2)
    K1 = _argmax_from(ratios_C, r)
    K2 = _argmax_from(ratios_R, r)
    return K1, K2, {"K1": ratios_C.tolist(), "K2": ratios_R.tolist()}


def select_ranks(
    fits_rbar: HeteroFit,
    refit,
    delta1: float,
    delta2: float,
    rbar: int,
    search_max: Union[int, Tuple[int, int], None] = None,
) -> Tuple[RankChoice, HeteroFit]:
    """
    r from the rank-rbar fits, then (K1, K2) from fits refitted at r.

    refit is called with the selected r and returns the heterogeneous fits
    used for the aggregates.
    """
    r, ratios_r = _select_rank_r(fits_rbar, delta1, rbar)
    fits_r = refit(r)
    agg = aggregate_subspaces(fits_r)
    K1, K2, traces = _select_subspace_ranks(agg, r, delta2, search_max)
    traces["r"] = ratios_r.tolist()
    choice = RankChoice(r=r, K1=K1, K2=K2, ratio_traces=traces)
    logger.info(f"Selected ranks r={r}, K1={K1}, K2={K2}")
    return choice, fits_r


def spectral_pairs(
    data: DatasetBundle,
    r: int,
    link: LinkSpec,
    sparsity: Optional[Tuple[int, int]] = None,
    ridge_eps: float = 1e-10,
) -> HeteroFit:
    """
    Per-individual factors from the rank-r SVD of the moment matrix
    -grad L(0) / (m_i g''(0)), split as (U S^{1/2}, V S^{1/2}).

    With sparsity the factors are hard thresholded in their scaled form.
    """
    p1, p2 = data.dims
    if not 1 <= r <= min(p1, p2):
        raise ArgumentError(f"rank r={r} out of range for dims ({p1}, {p2})")
    zero = np.zeros(data.dims)
    Cs: List[Matrix] = []
    Rs: List[Matrix] = []
    for i in range(data.n):
        _, G = individual_loss_and_gradient(zero, data, i, link)
        moment = -G / (data.m[i] * link.curvature_at_zero)
        svd = thin_svd(moment, r)
        root = np.sqrt(svd.S)
        C_i, R_i = svd.U * root, svd.V * root
        if sparsity is not None:
            C_new, _ = scaled_hard_threshold_step(C_i, R_i.T @ R_i, sparsity[0], ridge_eps)
            R_new, _ = scaled_hard_threshold_step(R_i, C_i.T @ C_i, sparsity[1], ridge_eps)
            C_i, R_i = C_new, R_new
        Cs.append(C_i)
        Rs.append(R_i)
    return HeteroFit(C=Cs, R=Rs)
