"""
Metrics - gauge-invariant evaluation against a known truth
Aligned factor distance, projection subspace errors, tensor errors and RMSE.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
from numpy.typing import NDArray

from homopursuit.errors import ArgumentError, SingularityError
from homopursuit.model import LINEAR, DatasetBundle, LinkSpec, ParameterSet, coefficient_tensor, predict
from homopursuit.tensor_core import Matrix, Tensor3, as_tensor3, matricize, orthonormalize, spd_sqrt, thin_svd

logger = logging.getLogger(__name__)

MAX_ALIGN = 200
ALIGN_TOL = 1e-12
_MAX_COND = 1e12


@dataclass
class TrueParamPack:
    """Canonical truth: orthonormal C*, R*, balanced loadings and the scale vectors"""
    theta_star: ParameterSet
    B_star: Tensor3
    sigma_C: NDArray[np.float64]
    sigma_R: NDArray[np.float64]
    sigma_I: List[NDArray[np.float64]]

    @property
    def sigma_min(self) -> float:
        return float(min(self.sigma_C[-1], self.sigma_R[-1]))

    @property
    def ranks(self) -> Tuple[int, int, int]:
        return self.theta_star.ranks


@dataclass
class AlignmentTransforms:
    Q1: Matrix
    Q2: Matrix
    P: List[Matrix]
    objective: float = float("nan")
    sweeps: int = 0
    converged: bool = True


def _canonical_basis(F: Matrix, unfolding: Matrix, k: int) -> Tuple[Matrix, NDArray[np.float64]]:
    # Q = F (F^T F)^{-1/2} keeps zero rows of F exactly zero
    _, inv_half = spd_sqrt(F.T @ F)
    Q = F @ inv_half
    svd = thin_svd(Q.T @ unfolding, k)
    return Q @ svd.U, svd.S


def truth_from_parameters(theta: ParameterSet) -> TrueParamPack:
    """
    Canonical representative of theta's equivalence class.

    C*, R* are the leading left singular vectors of the mode-1 and mode-2
    unfoldings of B, and L1_i* = U_i S_i^{1/2}, L2_i* = V_i S_i^{1/2}
    from the SVD of the core slice C*^T B_i R*.
    """
    r, K1, K2 = theta.ranks
    B = coefficient_tensor(theta)
    C_star, sigma_C = _canonical_basis(theta.C, matricize(B, 1), K1)
    R_star, sigma_R = _canonical_basis(theta.R, matricize(B, 2), K2)
    L1, L2, sigma_I = [], [], []
    for i in range(theta.n):
        svd = thin_svd(C_star.T @ B[:, :, i] @ R_star, r)
        root = np.sqrt(svd.S)
        L1.append(svd.U * root)
        L2.append(svd.V * root)
        sigma_I.append(svd.S)
    return TrueParamPack(
        theta_star=ParameterSet(C=C_star, R=R_star, L1=L1, L2=L2),
        B_star=B,
        sigma_C=sigma_C,
        sigma_R=sigma_R,
        sigma_I=sigma_I,
    )


def _check_alignable(theta: ParameterSet, truth: TrueParamPack) -> None:
    if theta.ranks != truth.ranks or theta.dims != truth.theta_star.dims or theta.n != truth.theta_star.n:
        raise ArgumentError(
            f"cannot align ranks {theta.ranks}, dims {theta.dims}, n={theta.n} "
            f"with truth ranks {truth.ranks}, dims {truth.theta_star.dims}, n={truth.theta_star.n}"
        )


def _inverse(Q: Matrix, what: str) -> Matrix:
    if not np.all(np.isfinite(Q)):
        raise SingularityError(f"{what} is not finite")
    cond = np.linalg.cond(Q)
    if not np.isfinite(cond) or cond > _MAX_COND:
        raise SingularityError(f"{what} is singular")
    return np.linalg.inv(Q)


def _shared_term(F: Matrix, Q: Matrix, F_star: Matrix, sigma: NDArray[np.float64]) -> float:
    return float(np.sum(np.square((F @ Q - F_star) * sigma)))


def _loading_term(L1, L2, Q1_inv, Q2_inv, P, L1_star, L2_star, sigma) -> float:
    w = np.sqrt(sigma)
    P_inv_T = _inverse(P, "P_i").T
    first = np.sum(np.square((Q1_inv @ L1 @ P - L1_star) * w))
    second = np.sum(np.square((Q2_inv @ L2 @ P_inv_T - L2_star) * w))
    return float(first + second)


def dist_objective(theta: ParameterSet, truth: TrueParamPack, t: AlignmentTransforms) -> float:
    """Weighted factor distance between theta and the truth under the given transforms"""
    _check_alignable(theta, truth)
    star = truth.theta_star
    Q1_inv = _inverse(t.Q1, "Q1")
    Q2_inv = _inverse(t.Q2, "Q2")
    total = _shared_term(theta.C, t.Q1, star.C, truth.sigma_C)
    total += _shared_term(theta.R, t.Q2, star.R, truth.sigma_R)
    for i in range(theta.n):
        total += _loading_term(
            theta.L1[i], theta.L2[i], Q1_inv, Q2_inv, t.P[i], star.L1[i], star.L2[i], truth.sigma_I[i]
        )
    return total


def _geometric_blend(A: Matrix, B: Matrix) -> Optional[Matrix]:
    """A (A^{-1} B)^{1/2} when the principal square root is real, else None"""
    try:
        w, V = np.linalg.eig(np.linalg.solve(A, B))
        if np.any(np.abs(w.imag) > 1e-10 * (1.0 + np.abs(w.real))) or np.any(w.real <= 0.0):
            return None
        root = (V * np.sqrt(w.real)) @ np.linalg.inv(V)
    except np.linalg.LinAlgError:
        return None
    root = np.real(root)
    return A @ root if np.all(np.isfinite(root)) else None


def _lstsq(A: Matrix, B: Matrix) -> Optional[Matrix]:
    try:
        return np.linalg.lstsq(A, B, rcond=None)[0]
    except np.linalg.LinAlgError:
        return None


def _pick(candidates: Sequence[Optional[Matrix]], score) -> Tuple[Matrix, float]:
    """Lowest-scoring candidate; the first one is the incumbent and always valid"""
    best, best_val = candidates[0], score(candidates[0])
    for cand in candidates[1:]:
        if cand is None:
            continue
        try:
            val = score(cand)
        except SingularityError:
            continue
        if val < best_val:
            best, best_val = cand, val
    return best, best_val


def _weighted_inverse_solve(targets, sources, weights) -> Optional[Matrix]:
    """N minimizing sum_i ||(N A_i - T_i) W_i||^2, returned as its inverse"""
    lhs = sum(T @ np.diag(w) @ A.T for T, A, w in zip(targets, sources, weights))
    gram = sum(A @ np.diag(w) @ A.T for A, w in zip(sources, weights))
    try:
        N = np.linalg.solve(gram, lhs.T).T
        return _inverse(N, "loading transform")
    except (np.linalg.LinAlgError, SingularityError):
        return None


def _update_loadings(theta: ParameterSet, truth: TrueParamPack, t: AlignmentTransforms) -> None:
    """Per-individual P_i step with Q1, Q2 held fixed"""
    star = truth.theta_star
    Q1_inv = _inverse(t.Q1, "Q1")
    Q2_inv = _inverse(t.Q2, "Q2")
    for i in range(theta.n):
        P_a = _lstsq(Q1_inv @ theta.L1[i], star.L1[i])
        M_b = _lstsq(Q2_inv @ theta.L2[i], star.L2[i])
        P_b = None
        if M_b is not None:
            try:
                P_b = _inverse(M_b, "P_i").T
            except SingularityError:
                pass
        blend = _geometric_blend(P_a, P_b) if P_a is not None and P_b is not None else None

        def score(P, i=i):
            return _loading_term(
                theta.L1[i], theta.L2[i], Q1_inv, Q2_inv, P, star.L1[i], star.L2[i], truth.sigma_I[i]
            )

        t.P[i], _ = _pick([t.P[i], P_a, P_b, blend], score)


def _update_shared(
    F: Matrix,
    F_star: Matrix,
    sigma: NDArray[np.float64],
    loadings: List[Matrix],
    loadings_star: List[Matrix],
    sigma_I: List[NDArray[np.float64]],
    Q: Matrix,
    Q_closed: Optional[Matrix],
) -> Matrix:
    """Q step for one mode; loadings already carry their P_i factor"""

    def score(Qc):
        Q_inv = _inverse(Qc, "Q")
        value = _shared_term(F, Qc, F_star, sigma)
        for L, L_star, s in zip(loadings, loadings_star, sigma_I):
            value += float(np.sum(np.square((Q_inv @ L - L_star) * np.sqrt(s))))
        return value

    Q_load = _weighted_inverse_solve(loadings_star, loadings, sigma_I)
    blend = _geometric_blend(Q_closed, Q_load) if Q_closed is not None and Q_load is not None else None
    best, _ = _pick([Q, Q_closed, Q_load, blend], score)
    return best


def align_and_dist(
    theta: ParameterSet,
    truth: TrueParamPack,
    max_align: int = MAX_ALIGN,
    tol: float = ALIGN_TOL,
) -> Tuple[AlignmentTransforms, float]:
    """
    Upper bound on the gauge-invariant distance by alternating minimization.

    Starts from the closed-form minimizers of the C and R terms, then sweeps
    over Q1, Q2 and every P_i, keeping the best of the incumbent, the
    closed-form minimizers of the separate terms and their geometric blend.
    The objective never increases, so the returned value bounds the
    infimum from above.
    """
    _check_alignable(theta, truth)
    star = truth.theta_star
    r, K1, K2 = theta.ranks
    identity = AlignmentTransforms(Q1=np.eye(K1), Q2=np.eye(K2), P=[np.eye(r) for _ in range(theta.n)])
    t = identity
    objective = dist_objective(theta, truth, identity)

    Q1_c = _lstsq(theta.C, star.C)
    Q2_c = _lstsq(theta.R, star.R)
    if Q1_c is not None and Q2_c is not None:
        try:
            start = AlignmentTransforms(Q1=Q1_c, Q2=Q2_c, P=[np.eye(r) for _ in range(theta.n)])
            _update_loadings(theta, truth, start)
            start_objective = dist_objective(theta, truth, start)
            if start_objective < objective:
                t, objective = start, start_objective
        except SingularityError:
            logger.debug("closed-form start is singular, aligning from the identity")

    converged = False
    sweep = 0
    for sweep in range(1, max_align + 1):
        previous = objective
        t.Q1 = _update_shared(
            theta.C, star.C, truth.sigma_C,
            [theta.L1[i] @ t.P[i] for i in range(theta.n)], star.L1, truth.sigma_I,
            t.Q1, Q1_c,
        )
        t.Q2 = _update_shared(
            theta.R, star.R, truth.sigma_R,
            [theta.L2[i] @ _inverse(t.P[i], "P_i").T for i in range(theta.n)], star.L2, truth.sigma_I,
            t.Q2, Q2_c,
        )
        _update_loadings(theta, truth, t)
        objective = dist_objective(theta, truth, t)
        if previous - objective < tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Alignment did not converge in {max_align} sweeps; objective={objective:.6g}")
    t.objective = objective
    t.sweeps = sweep
    t.converged = converged
    return t, objective


def proj_frob_error(U_hat: Matrix, U_star: Matrix) -> float:
    """||P_hat - P_star||_F^2 between the projectors onto the column spaces"""
    U1 = orthonormalize(U_hat)
    U2 = orthonormalize(U_star)
    if U1.shape[0] != U2.shape[0]:
        raise ArgumentError(f"ambient dimensions differ: {U1.shape[0]} vs {U2.shape[0]}")
    cross = float(np.sum(np.square(U1.T @ U2)))
    return max(U1.shape[1] + U2.shape[1] - 2.0 * cross, 0.0)


def tensor_errors(B_hat: Tensor3, B_star: Tensor3) -> Tuple[float, float]:
    """(||B_hat - B*||_F^2, the same divided by n)"""
    B_hat = as_tensor3(B_hat, "B_hat")
    B_star = as_tensor3(B_star, "B_star")
    if B_hat.shape != B_star.shape:
        raise ArgumentError(f"shape mismatch: {B_hat.shape} vs {B_star.shape}")
    total = float(np.sum(np.square(B_hat - B_star)))
    return total, total / B_star.shape[2]


def rmse(B: Tensor3, data: DatasetBundle, link: LinkSpec = LINEAR) -> float:
    """Root mean squared prediction error over all samples"""
    fitted = predict(B, data, link)
    sq = sum(float(np.sum(np.square(y - f))) for y, f in zip(data.ys, fitted))
    return float(np.sqrt(sq / data.total))
