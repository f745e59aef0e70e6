"""
Optim - scaled gradient descent fits
Homogeneity pursuit (shared C, R), the per-individual baseline, and the
scaled hard thresholding variants of both.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from homopursuit.errors import ArgumentError, DivergenceError, SingularityError
from homopursuit.model import (
    DatasetBundle,
    GradientBundle,
    LinkSpec,
    ParameterSet,
    get_link,
    individual_loss_and_gradient,
    map_individuals,
    partial_gradients,
)
from homopursuit.tensor_core import (
    SPD_FLOOR,
    Matrix,
    Tensor3,
    as_matrix,
    spd_sqrt,
    sym_eig_desc,
)

logger = logging.getLogger(__name__)

IndexSet = Tuple[int, ...]

DEFAULT_ETA = {"linear": 0.1, "logistic": 0.5}
RIDGE_RETRY = 1e-6
DEFAULT_DAMPING = 1e-4
# loss rising this many multiples of (1 + |initial loss|) above its start counts as divergence
BLOWUP_FACTOR = 1e3


class FitConfig(BaseModel):
    """Configuration of a scaled gradient descent fit"""
    model_config = ConfigDict(extra="forbid")

    link: Literal["linear", "logistic"] = Field(default="linear", description="GLM link")
    eta: Optional[float] = Field(
        default=None, gt=0, description="Step size; defaults to 0.1 (linear) or 0.5 (logistic)"
    )
    max_iters: int = Field(default=500, ge=0, description="Iteration budget T")
    tol: float = Field(default=1e-10, ge=0, description="Relative loss change for early stopping")
    ranks: Tuple[int, int, int] = Field(default=(2, 4, 4), description="(r, K1, K2)")
    sparsity: Optional[Tuple[int, int]] = Field(default=None, description="Row sparsity (s1, s2)")
    ridge_eps: float = Field(default=1e-10, ge=0, description="Gram ridge, relative to trace/dim")
    damping: float = Field(
        default=DEFAULT_DAMPING, ge=0, description="Preconditioner ridge floor, relative to the largest Gram eigenvalue"
    )
    threads: int = Field(default=1, ge=1, description="Worker threads for per-individual work")

    @model_validator(mode="after")
    def _check_ranks(self):
        r, K1, K2 = self.ranks
        if min(self.ranks) < 1:
            raise ValueError(f"ranks must be positive, got {self.ranks}")
        if r > min(K1, K2):
            raise ValueError(f"r={r} must not exceed min(K1, K2)={min(K1, K2)}")
        if self.sparsity is not None and min(self.sparsity) < 1:
            raise ValueError(f"sparsity levels must be positive, got {self.sparsity}")
        return self

    @property
    def step_size(self) -> float:
        return self.eta if self.eta is not None else DEFAULT_ETA[self.link]

    @property
    def link_spec(self) -> LinkSpec:
        return get_link(self.link)


@dataclass
class FitReport:
    """Result of a homogeneity pursuit fit"""
    theta: ParameterSet
    loss_trace: List[float]
    iters: int
    converged: bool
    active_rows: Optional[Tuple[IndexSet, IndexSet]] = None


@dataclass
class HeteroFit:
    """Per-individual factor pairs B_i = C_i R_i^T"""
    C: List[Matrix]
    R: List[Matrix]
    loss_traces: List[List[float]] = field(default_factory=list)
    iters: List[int] = field(default_factory=list)
    converged: List[bool] = field(default_factory=list)
    active_rows: Optional[List[Tuple[IndexSet, IndexSet]]] = None

    def __post_init__(self):
        self.C = [as_matrix(c, "C_i") for c in self.C]
        self.R = [as_matrix(r, "R_i") for r in self.R]
        if len(self.C) == 0 or len(self.C) != len(self.R):
            raise ArgumentError(f"need matching factor pairs, got {len(self.C)} and {len(self.R)}")
        p1, r = self.C[0].shape
        p2 = self.R[0].shape[0]
        for i, (c, rr) in enumerate(zip(self.C, self.R)):
            if c.shape != (p1, r) or rr.shape != (p2, r):
                raise ArgumentError(f"individual {i}: factors {c.shape}, {rr.shape} inconsistent")

    @property
    def n(self) -> int:
        return len(self.C)

    @property
    def rank(self) -> int:
        return self.C[0].shape[1]

    @property
    def dims(self) -> Tuple[int, int]:
        return self.C[0].shape[0], self.R[0].shape[0]

    def slice(self, i: int) -> Matrix:
        return self.C[i] @ self.R[i].T

    def coefficients(self) -> Tensor3:
        return np.stack([self.slice(i) for i in range(self.n)], axis=2)

    def subset(self, indices) -> "HeteroFit":
        return HeteroFit([self.C[i] for i in indices], [self.R[i] for i in indices])


def _with_ridge(gram: Matrix, ridge_eps: float, solve: Callable[[Matrix], object], damping: float = 0.0):
    """
    Apply solve to the symmetrized Gram, retrying once with a larger ridge.

    The ridge is max(eps * trace/dim, damping * largest eigenvalue); the
    damping floor bounds steps along near-null directions of the Gram,
    which appear when the fitted rank exceeds the signal rank.
    """
    A = 0.5 * (gram + gram.T)
    scale = float(np.trace(A)) / A.shape[0]
    if not np.isfinite(scale) or scale <= 0.0:
        raise SingularityError("Gram matrix is zero or not finite")
    floor = damping * float(np.linalg.eigvalsh(A)[-1]) if damping > 0 else 0.0
    eye = np.eye(A.shape[0])
    for attempt, eps in enumerate((ridge_eps, RIDGE_RETRY)):
        ridge = max(eps * scale, floor)
        try:
            return solve(A + ridge * eye if ridge > 0 else A)
        except SingularityError:
            if attempt == 0:
                logger.warning(f"Gram matrix near singular, retrying with ridge {RIDGE_RETRY:g}")
    raise SingularityError(f"Gram matrix singular after ridge {RIDGE_RETRY:g}")


def _spd_inverse(A: Matrix) -> Matrix:
    w, V = sym_eig_desc(A)
    if w[-1] <= SPD_FLOOR * float(np.trace(A)) / A.shape[0] or w[-1] <= 0.0:
        raise SingularityError(f"matrix is not positive definite (smallest eigenvalue {w[-1]:.3e})")
    return (V / w) @ V.T


def precondition_inverse(gram: Matrix, ridge_eps: float, damping: float = 0.0) -> Matrix:
    """Inverse of a Gram preconditioner via a ridged symmetric eigensolve"""
    return _with_ridge(gram, ridge_eps, _spd_inverse, damping)


def hard_threshold_rows(M: Matrix, s: int) -> Tuple[Matrix, IndexSet]:
    """Keep the s rows of largest Euclidean norm, ties to the smaller index"""
    M = as_matrix(M)
    rows = M.shape[0]
    if not 1 <= s <= rows:
        raise ArgumentError(f"sparsity level must lie in [1, {rows}], got {s}")
    norms = np.linalg.norm(M, axis=1)
    order = np.lexsort((np.arange(rows), -norms))
    keep = np.sort(order[:s])
    out = np.zeros_like(M)
    out[keep] = M[keep]
    return out, tuple(int(k) for k in keep)


def scaled_hard_threshold_step(
    C: Matrix, gram: Matrix, s: int, ridge_eps: float = 0.0, damping: float = 0.0
) -> Tuple[Matrix, IndexSet]:
    """
    HT(C gram^{1/2}, s) gram^{-1/2}.

    Row norms of C gram^{1/2} do not depend on the gauge of C, so the
    selected rows are the same for every equivalent parameterization.
    A full support returns C unchanged.
    """
    C = as_matrix(C)
    p = C.shape[0]
    if not 1 <= s <= p:
        raise ArgumentError(f"sparsity level must lie in [1, {p}], got {s}")
    if s == p:
        return C.copy(), tuple(range(p))
    half, inv_half = _with_ridge(gram, ridge_eps, spd_sqrt, damping)
    thresholded, keep = hard_threshold_rows(C @ half, s)
    return thresholded @ inv_half, keep


def _stalled(trace: List[float], tol: float) -> bool:
    return abs(trace[-1] - trace[-2]) <= tol * (1.0 + abs(trace[-2]))


def _blown_up(trace: List[float]) -> bool:
    """Non-finite, or risen far above the starting loss"""
    current, start = trace[-1], trace[0]
    return not np.isfinite(current) or current - start > BLOWUP_FACTOR * (1.0 + abs(start))


def _scaled_step(theta: ParameterSet, grads: GradientBundle, step: float, cfg: FitConfig) -> ParameterSet:
    """Simultaneous preconditioned update of all blocks from the same iterate"""
    def inv(gram):
        return precondition_inverse(gram, cfg.ridge_eps, cfg.damping)

    inv_C = inv(grads.gramC)
    inv_R = inv(grads.gramR)
    return ParameterSet(
        C=theta.C - step * grads.gC @ inv(grads.gramCtilde),
        R=theta.R - step * grads.gR @ inv(grads.gramRtilde),
        L1=[L1 - step * inv_C @ g1 @ inv(gram) for L1, g1, gram in zip(theta.L1, grads.g1, grads.gramRi)],
        L2=[L2 - step * inv_R @ g2 @ inv(gram) for L2, g2, gram in zip(theta.L2, grads.g2, grads.gramCi)],
    )


def _composite_grams(theta: ParameterSet) -> Tuple[Matrix, Matrix]:
    """Grams of the composite matrices built from the current C, R and loadings"""
    RtR = theta.R.T @ theta.R
    CtC = theta.C.T @ theta.C
    gram_c = sum(L1 @ L2.T @ RtR @ L2 @ L1.T for L1, L2 in zip(theta.L1, theta.L2))
    gram_r = sum(L2 @ L1.T @ CtC @ L1 @ L2.T for L1, L2 in zip(theta.L1, theta.L2))
    return gram_c, gram_r


def _check_homogeneous(data: DatasetBundle, init: ParameterSet, cfg: FitConfig) -> None:
    init.check_data(data)
    if init.ranks != tuple(cfg.ranks):
        raise ArgumentError(f"initial ranks {init.ranks} differ from configured {tuple(cfg.ranks)}")


def _check_sparsity(sparsity, dims: Tuple[int, int]) -> Tuple[int, int]:
    if sparsity is None:
        raise ArgumentError("sparsity levels (s1, s2) are required for thresholded fits")
    s1, s2 = sparsity
    if not (1 <= s1 <= dims[0] and 1 <= s2 <= dims[1]):
        raise ArgumentError(f"sparsity {tuple(sparsity)} out of range for dims {dims}")
    return s1, s2


def _run_homogeneous(
    data: DatasetBundle, init: ParameterSet, cfg: FitConfig, sparsity: Optional[Tuple[int, int]]
) -> FitReport:
    link = cfg.link_spec
    eta = cfg.step_size
    step = eta / data.mean_m
    theta = init
    active = None
    if sparsity is not None:
        active = (
            tuple(int(k) for k in np.flatnonzero(np.any(theta.C != 0, axis=1))),
            tuple(int(k) for k in np.flatnonzero(np.any(theta.R != 0, axis=1))),
        )

    grads = partial_gradients(theta, data, link, cfg.threads)
    if not np.isfinite(grads.loss):
        raise DivergenceError(eta, 0)
    trace = [grads.loss]
    converged = False
    iters = 0
    for t in range(cfg.max_iters):
        theta = _scaled_step(theta, grads, step, cfg)
        if sparsity is not None:
            gram_c, gram_r = _composite_grams(theta)
            C, S1 = scaled_hard_threshold_step(theta.C, gram_c, sparsity[0], cfg.ridge_eps, cfg.damping)
            R, S2 = scaled_hard_threshold_step(theta.R, gram_r, sparsity[1], cfg.ridge_eps, cfg.damping)
            theta = ParameterSet(C=C, R=R, L1=theta.L1, L2=theta.L2)
            active = (S1, S2)
        grads = partial_gradients(theta, data, link, cfg.threads)
        iters = t + 1
        trace.append(grads.loss)
        if _blown_up(trace):
            raise DivergenceError(eta, iters)
        if iters % 50 == 0:
            logger.debug(f"iteration {iters}: loss={grads.loss:.10g}")
        if _stalled(trace, cfg.tol):
            converged = True
            break

    logger.info(
        f"Homogeneous fit finished: iters={iters}, loss={trace[-1]:.6g}, converged={converged}"
    )
    return FitReport(theta=theta, loss_trace=trace, iters=iters, converged=converged, active_rows=active)


def fit_homogeneous(data: DatasetBundle, init: ParameterSet, cfg: FitConfig) -> FitReport:
    """Scaled gradient descent with shared factors C, R"""
    _check_homogeneous(data, init, cfg)
    if cfg.sparsity is not None:
        raise ArgumentError("sparsity is configured; use fit_homogeneous_sparse")
    return _run_homogeneous(data, init, cfg, None)


def fit_homogeneous_sparse(data: DatasetBundle, init: ParameterSet, cfg: FitConfig) -> FitReport:
    """
    Scaled gradient descent followed by scaled hard thresholding of C and R.

    The thresholding Grams are recomputed at the half-step values: the
    updated loadings together with the unthresholded R (for C) or C (for R).
    """
    _check_homogeneous(data, init, cfg)
    sparsity = _check_sparsity(cfg.sparsity, data.dims)
    return _run_homogeneous(data, init, cfg, sparsity)


def _fit_individual(
    i: int,
    C: Matrix,
    R: Matrix,
    data: DatasetBundle,
    cfg: FitConfig,
    sparsity: Optional[Tuple[int, int]],
):
    link = cfg.link_spec
    eta = cfg.step_size
    step = eta / data.m[i]
    active = None
    if sparsity is not None:
        active = (
            tuple(int(k) for k in np.flatnonzero(np.any(C != 0, axis=1))),
            tuple(int(k) for k in np.flatnonzero(np.any(R != 0, axis=1))),
        )
    loss, G = individual_loss_and_gradient(C @ R.T, data, i, link)
    if not np.isfinite(loss):
        raise DivergenceError(eta, 0, individual=i)
    trace = [loss]
    converged = False
    iters = 0
    for t in range(cfg.max_iters):
        C_half = C - step * (G @ R) @ precondition_inverse(R.T @ R, cfg.ridge_eps, cfg.damping)
        R_half = R - step * (G.T @ C) @ precondition_inverse(C.T @ C, cfg.ridge_eps, cfg.damping)
        if sparsity is not None:
            C, S1 = scaled_hard_threshold_step(C_half, R_half.T @ R_half, sparsity[0], cfg.ridge_eps, cfg.damping)
            R, S2 = scaled_hard_threshold_step(R_half, C_half.T @ C_half, sparsity[1], cfg.ridge_eps, cfg.damping)
            active = (S1, S2)
        else:
            C, R = C_half, R_half
        loss, G = individual_loss_and_gradient(C @ R.T, data, i, link)
        iters = t + 1
        trace.append(loss)
        if _blown_up(trace):
            raise DivergenceError(eta, iters, individual=i)
        if _stalled(trace, cfg.tol):
            converged = True
            break
    return C, R, trace, iters, converged, active


def _run_heterogeneous(
    data: DatasetBundle, init: HeteroFit, cfg: FitConfig, sparsity: Optional[Tuple[int, int]]
) -> HeteroFit:
    if init.n != data.n or init.dims != data.dims:
        raise ArgumentError(
            f"initial pairs for n={init.n}, dims={init.dims} do not match data n={data.n}, dims={data.dims}"
        )
    results = map_individuals(
        lambda i: _fit_individual(i, init.C[i], init.R[i], data, cfg, sparsity),
        data.n,
        cfg.threads,
    )
    fit = HeteroFit(
        C=[res[0] for res in results],
        R=[res[1] for res in results],
        loss_traces=[res[2] for res in results],
        iters=[res[3] for res in results],
        converged=[res[4] for res in results],
        active_rows=[res[5] for res in results] if sparsity is not None else None,
    )
    logger.info(
        f"Heterogeneous fit finished: n={fit.n}, rank={fit.rank}, "
        f"max iters={max(fit.iters)}, converged={sum(fit.converged)}/{fit.n}"
    )
    return fit


def fit_heterogeneous(data: DatasetBundle, init_pairs: HeteroFit, cfg: FitConfig) -> HeteroFit:
    """Independent scaled gradient descent per individual, B_i = C_i R_i^T"""
    return _run_heterogeneous(data, init_pairs, cfg, None)


def fit_heterogeneous_sparse(data: DatasetBundle, init_pairs: HeteroFit, cfg: FitConfig) -> HeteroFit:
    """Per-individual scaled gradient descent with scaled hard thresholding"""
    sparsity = _check_sparsity(cfg.sparsity, data.dims)
    return _run_heterogeneous(data, init_pairs, cfg, sparsity)
