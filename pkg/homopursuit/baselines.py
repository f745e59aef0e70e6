"""
Baselines - comparison estimators
Pooled and per-individual least squares, and a single low-rank fit on the
pooled data shared by every individual.
"""
import logging

import numpy as np

from homopursuit.model import DatasetBundle
from homopursuit.optim import FitConfig, HeteroFit, fit_heterogeneous, fit_heterogeneous_sparse
from homopursuit.selection import spectral_pairs
from homopursuit.tensor_core import Tensor3

logger = logging.getLogger(__name__)


def homo_ols(data: DatasetBundle) -> Tensor3:
    """One least-squares coefficient matrix for all individuals"""
    X = np.concatenate([data.flat(i) for i in range(data.n)])
    y = np.concatenate(data.ys)
    coef = np.linalg.lstsq(X, y, rcond=None)[0].reshape(data.dims)
    return np.asfortranarray(np.repeat(coef[:, :, None], data.n, axis=2))


def hetero_ols(data: DatasetBundle) -> Tensor3:
    """Per-individual least squares; minimum-norm when m_i < p1*p2"""
    B = np.zeros((*data.dims, data.n), order="F")
    for i in range(data.n):
        B[:, :, i] = np.linalg.lstsq(data.flat(i), data.ys[i], rcond=None)[0].reshape(data.dims)
    return B


def pooled_low_rank(data: DatasetBundle, cfg: FitConfig) -> HeteroFit:
    """Rank-r fit on all samples pooled, repeated for every individual"""
    r = cfg.ranks[0]
    pooled = data.pooled()
    init = spectral_pairs(pooled, r, cfg.link_spec, cfg.sparsity, cfg.ridge_eps)
    if cfg.sparsity is not None:
        fit = fit_heterogeneous_sparse(pooled, init, cfg)
    else:
        fit = fit_heterogeneous(pooled, init, cfg)
    logger.info(f"Pooled rank-{r} fit finished after {fit.iters[0]} iterations")
    return HeteroFit(
        C=[fit.C[0]] * data.n,
        R=[fit.R[0]] * data.n,
        loss_traces=fit.loss_traces,
        iters=fit.iters,
        converged=fit.converged,
        active_rows=fit.active_rows,
    )

