"""
Tensor Core - dense order-3 tensor algebra
Matricization, folding, mode products, Tucker composition, thin SVD
and SPD square roots.

Storage order: a Tensor3 is a float64 array of shape (p1, p2, n) whose
frontal slice i is ``T[:, :, i]``. Folded tensors are Fortran-contiguous,
so entry (i1, i2, i3) sits at offset i1 + p1*i2 + p1*p2*i3. The mode-k
unfolding puts mode k on the rows and orders the columns with the earlier
remaining mode varying fastest.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from homopursuit.errors import ArgumentError, NumericError, SingularityError

Matrix = NDArray[np.float64]
Tensor3 = NDArray[np.float64]

# eigenvalues below this fraction of trace/dim count as singular
SPD_FLOOR = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """Top-k singular triplets, singular values nonincreasing"""
    U: Matrix
    S: NDArray[np.float64]
    V: Matrix
    k: int

    def reconstruct(self) -> Matrix:
        return (self.U * self.S) @ self.V.T


def as_matrix(M, name: str = "matrix") -> Matrix:
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ArgumentError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    return arr


def as_tensor3(T, name: str = "tensor") -> Tensor3:
    arr = np.asarray(T, dtype=np.float64)
    if arr.ndim != 3 or arr.size == 0:
        raise ArgumentError(f"{name} must be a non-empty 3-D array, got shape {arr.shape}")
    return arr


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ArgumentError(f"mode must be 1, 2 or 3, got {mode}")
    return mode - 1


def matricize(T: Tensor3, mode: int) -> Matrix:
    """Mode-k unfolding: p_mode x (product of the remaining dims)"""
    axis = _check_mode(mode)
    T = as_tensor3(T)
    return np.reshape(np.moveaxis(T, axis, 0), (T.shape[axis], -1), order="F")


def fold(M: Matrix, mode: int, dims: Sequence[int]) -> Tensor3:
    """Inverse of matricize"""
    axis = _check_mode(mode)
    M = as_matrix(M)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ArgumentError(f"dims must be three positive integers, got {dims}")
    rest = [d for a, d in enumerate(dims) if a != axis]
    if M.shape != (dims[axis], rest[0] * rest[1]):
        raise ArgumentError(
            f"matrix of shape {M.shape} cannot fold along mode {mode} into {dims}"
        )
    folded = np.reshape(M, (dims[axis], *rest), order="F")
    return np.asfortranarray(np.moveaxis(folded, 0, axis))


def mode_product(T: Tensor3, M: Matrix, mode: int) -> Tensor3:
    """T x_mode M, computed through the unfolding identity"""
    axis = _check_mode(mode)
    T = as_tensor3(T)
    M = as_matrix(M)
    if M.shape[1] != T.shape[axis]:
        raise ArgumentError(
            f"mode-{mode} product needs {T.shape[axis]} columns, matrix has {M.shape[1]}"
        )
    dims = list(T.shape)
    dims[axis] = M.shape[0]
    return fold(M @ matricize(T, mode), mode, dims)


def tucker_compose(G: Tensor3, C: Matrix, R: Matrix) -> Tensor3:
    """G x_1 C x_2 R, i.e. slice i equals C @ G_i @ R.T"""
    G = as_tensor3(G, "core")
    C = as_matrix(C, "C")
    R = as_matrix(R, "R")
    if C.shape[1] != G.shape[0] or R.shape[1] != G.shape[1]:
        raise ArgumentError(
            f"core {G.shape} incompatible with C {C.shape} and R {R.shape}"
        )
    return mode_product(mode_product(G, C, 1), R, 2)


def _check_finite(M: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(M)):
        raise NumericError(f"{what} contains non-finite entries")


def _fix_signs(U: Matrix) -> NDArray[np.float64]:
    """Signs making the largest-magnitude entry of every column positive"""
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def thin_svd(M: Matrix, k: int) -> SvdResult:
    M = as_matrix(M)
    if not 1 <= k <= min(M.shape):
        raise ArgumentError(f"k must lie in [1, {min(M.shape)}], got {k}")
    _check_finite(M, "SVD input")
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    U, S, V = U[:, :k], S[:k], Vt[:k].T
    signs = _fix_signs(U)
    return SvdResult(U=U * signs, S=S.copy(), V=V * signs, k=k)


def sym_eig_desc(A: Matrix) -> Tuple[NDArray[np.float64], Matrix]:
    """Eigenpairs of a symmetric matrix, eigenvalues nonincreasing"""
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ArgumentError(f"expected a square matrix, got {A.shape}")
    _check_finite(A, "eigensolver input")
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    w, V = w[::-1], V[:, ::-1]
    return w.copy(), V * _fix_signs(V)


def spd_sqrt(A: Matrix) -> Tuple[Matrix, Matrix]:
    """Returns (A^{1/2}, A^{-1/2}) for a symmetric positive definite A"""
    w, V = sym_eig_desc(A)
    floor = SPD_FLOOR * max(float(np.trace(A)), 0.0) / A.shape[0]
    if w[-1] <= floor or w[-1] <= 0.0:
        raise SingularityError(
            f"matrix is not positive definite (smallest eigenvalue {w[-1]:.3e})"
        )
    root = np.sqrt(w)
    return (V * root) @ V.T, (V / root) @ V.T


def orthonormalize(U: Matrix) -> Matrix:
    """Thin QR basis of the column space, diag(R) made nonnegative"""
    U = as_matrix(U)
    _check_finite(U, "orthonormalization input")
    Q, Rq = np.linalg.qr(U, mode="reduced")
    signs = np.sign(np.diag(Rq))
    signs[signs == 0] = 1.0
    return Q * signs


def frob_inner(A: Union[Matrix, Tensor3], B: Union[Matrix, Tensor3]) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ArgumentError(f"shape mismatch: {A.shape} vs {B.shape}")
    return float(np.sum(A * B))


def frob_norm(A: Union[Matrix, Tensor3]) -> float:
    return float(np.linalg.norm(np.asarray(A, dtype=np.float64).ravel()))
