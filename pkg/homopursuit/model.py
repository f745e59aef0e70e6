"""
Model - losses, link functions and partial gradients
Trace regression Y ~ g'(<X_ij, B_i>) with B_i = C L1_i L2_i^T R^T.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple, TypeVar
import logging

import numpy as np
from numpy.typing import NDArray

from homopursuit.errors import ArgumentError, NumericError
from homopursuit.tensor_core import Matrix, Tensor3, as_matrix, tucker_compose

logger = logging.getLogger(__name__)

T = TypeVar("T")

_ONE_BELOW = 1.0 - 2.0 ** -53
_TINY = np.finfo(np.float64).tiny


def _linear_g(t):
    return 0.5 * np.square(t)


def _linear_g_prime(t):
    return np.asarray(t, dtype=np.float64)


def _logistic_g(t):
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def _logistic_g_prime(t):
    # sigmoid without overflow, kept strictly inside (0, 1)
    s = np.exp(-np.logaddexp(0.0, -np.asarray(t, dtype=np.float64)))
    return np.clip(s, _TINY, _ONE_BELOW)


@dataclass(frozen=True)
class LinkSpec:
    """Cumulant function g of the GLM and its derivative"""
    kind: str
    g: Callable
    g_prime: Callable
    curvature_at_zero: float


LINEAR = LinkSpec("linear", _linear_g, _linear_g_prime, 1.0)
LOGISTIC = LinkSpec("logistic", _logistic_g, _logistic_g_prime, 0.25)

LINKS = {"linear": LINEAR, "logistic": LOGISTIC}


def get_link(kind: str) -> LinkSpec:
    try:
        return LINKS[kind]
    except KeyError:
        raise ArgumentError(f"Unknown link '{kind}'. Allowed: {sorted(LINKS)}") from None


@dataclass
class DatasetBundle:
    """
    Per-individual covariates and responses.

    xs[i] has shape (m_i, p1, p2) and ys[i] has shape (m_i,).
    """
    xs: List[NDArray[np.float64]]
    ys: List[NDArray[np.float64]]

    def __post_init__(self):
        if len(self.xs) == 0 or len(self.xs) != len(self.ys):
            raise ArgumentError(
                f"need one response vector per individual, got {len(self.xs)} and {len(self.ys)}"
            )
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.ys = [np.asarray(y, dtype=np.float64).reshape(-1) for y in self.ys]
        dims = self.xs[0].shape[1:]
        for i, (x, y) in enumerate(zip(self.xs, self.ys)):
            if x.ndim != 3 or x.shape[1:] != dims:
                raise ArgumentError(f"individual {i}: covariates of shape {x.shape}, expected (m, {dims[0]}, {dims[1]})")
            if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
                raise ArgumentError(f"individual {i}: {x.shape[0]} covariates but {y.shape[0]} responses")

    @property
    def n(self) -> int:
        return len(self.xs)

    @property
    def dims(self) -> Tuple[int, int]:
        return self.xs[0].shape[1], self.xs[0].shape[2]

    @property
    def m(self) -> List[int]:
        return [x.shape[0] for x in self.xs]

    @property
    def total(self) -> int:
        return sum(self.m)

    @property
    def mean_m(self) -> float:
        return self.total / self.n

    def flat(self, i: int) -> NDArray[np.float64]:
        """Covariates of individual i as an (m_i, p1*p2) row-major matrix"""
        x = self.xs[i]
        return x.reshape(x.shape[0], -1)

    def subset(self, indices: Sequence[int]) -> "DatasetBundle":
        return DatasetBundle([self.xs[i] for i in indices], [self.ys[i] for i in indices])

    def pooled(self) -> "DatasetBundle":
        """All samples as a single individual"""
        return DatasetBundle([np.concatenate(self.xs)], [np.concatenate(self.ys)])

    def split(self, train_fraction: float) -> Tuple["DatasetBundle", "DatasetBundle"]:
        """Split each individual's samples in order; the first part is the train set"""
        if not 0.0 < train_fraction < 1.0:
            raise ArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
        train_x, train_y, test_x, test_y = [], [], [], []
        for x, y in zip(self.xs, self.ys):
            cut = int(round(train_fraction * x.shape[0]))
            if cut < 1 or cut >= x.shape[0]:
                raise ArgumentError(f"cannot split {x.shape[0]} samples at fraction {train_fraction}")
            train_x.append(x[:cut])
            train_y.append(y[:cut])
            test_x.append(x[cut:])
            test_y.append(y[cut:])
        return DatasetBundle(train_x, train_y), DatasetBundle(test_x, test_y)


@dataclass
class ParameterSet:
    """Shared factors C, R and per-individual loadings L1_i, L2_i"""
    C: Matrix
    R: Matrix
    L1: List[Matrix]
    L2: List[Matrix]

    def __post_init__(self):
        self.C = as_matrix(self.C, "C")
        self.R = as_matrix(self.R, "R")
        self.L1 = [as_matrix(a, "L1") for a in self.L1]
        self.L2 = [as_matrix(a, "L2") for a in self.L2]
        if len(self.L1) == 0 or len(self.L1) != len(self.L2):
            raise ArgumentError(f"need matching loadings, got {len(self.L1)} and {len(self.L2)}")
        K1, K2 = self.C.shape[1], self.R.shape[1]
        r = self.L1[0].shape[1]
        for i, (a, b) in enumerate(zip(self.L1, self.L2)):
            if a.shape != (K1, r) or b.shape != (K2, r):
                raise ArgumentError(
                    f"individual {i}: loadings {a.shape}, {b.shape} do not match (K1, K2, r)=({K1}, {K2}, {r})"
                )

    @property
    def n(self) -> int:
        return len(self.L1)

    @property
    def ranks(self) -> Tuple[int, int, int]:
        return self.L1[0].shape[1], self.C.shape[1], self.R.shape[1]

    @property
    def dims(self) -> Tuple[int, int]:
        return self.C.shape[0], self.R.shape[0]

    def slice(self, i: int) -> Matrix:
        return self.C @ (self.L1[i] @ self.L2[i].T) @ self.R.T

    def core(self) -> Tensor3:
        return np.stack([a @ b.T for a, b in zip(self.L1, self.L2)], axis=2)

    def transformed(self, Q1: Matrix, Q2: Matrix, P: Sequence[Matrix]) -> "ParameterSet":
        """(C Q1, R Q2, {Q1^-1 L1_i P_i, Q2^-1 L2_i P_i^-T}), same coefficient tensor"""
        Q1i, Q2i = np.linalg.inv(Q1), np.linalg.inv(Q2)
        return ParameterSet(
            C=self.C @ Q1,
            R=self.R @ Q2,
            L1=[Q1i @ a @ p for a, p in zip(self.L1, P)],
            L2=[Q2i @ b @ np.linalg.inv(p).T for b, p in zip(self.L2, P)],
        )

    def check_data(self, data: "DatasetBundle") -> None:
        if self.dims != data.dims or self.n != data.n:
            raise ArgumentError(
                f"parameters for n={self.n}, dims={self.dims} do not match data n={data.n}, dims={data.dims}"
            )


@dataclass
class GradientBundle:
    """Partial gradients plus the Gram matrices used as preconditioners"""
    gC: Matrix
    gR: Matrix
    g1: List[Matrix]
    g2: List[Matrix]
    gramCtilde: Matrix
    gramRtilde: Matrix
    gramC: Matrix
    gramR: Matrix
    gramRi: List[Matrix]
    gramCi: List[Matrix]
    loss: float = field(default=float("nan"))


def map_individuals(fn: Callable[[int], T], n: int, threads: int = 1) -> List[T]:
    """fn over 0..n-1, results in index order regardless of thread count"""
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=min(threads, n)) as executor:
        return list(executor.map(fn, range(n)))


def coefficient_tensor(theta: ParameterSet) -> Tensor3:
    return tucker_compose(theta.core(), theta.C, theta.R)


def linear_predictor(B_i: Matrix, data: DatasetBundle, i: int) -> NDArray[np.float64]:
    """<X_ij, B_i> for every sample j of individual i"""
    return data.flat(i) @ np.asarray(B_i, dtype=np.float64).reshape(-1)


def individual_loss(B_i: Matrix, data: DatasetBundle, i: int, link: LinkSpec) -> float:
    t = linear_predictor(B_i, data, i)
    return float(np.sum(link.g(t) - data.ys[i] * t))


def individual_loss_and_gradient(
    B_i: Matrix, data: DatasetBundle, i: int, link: LinkSpec
) -> Tuple[float, Matrix]:
    """Loss of individual i and its gradient w.r.t. B_i, both summed over samples"""
    X = data.flat(i)
    t = X @ np.asarray(B_i, dtype=np.float64).reshape(-1)
    y = data.ys[i]
    loss = float(np.sum(link.g(t) - y * t))
    weights = link.g_prime(t) - y
    return loss, (weights @ X).reshape(data.dims)


def slice_gradient(B_i: Matrix, X_ij: Matrix, Y_ij: float, link: LinkSpec) -> Matrix:
    B_i = as_matrix(B_i, "B_i")
    X_ij = as_matrix(X_ij, "X_ij")
    if B_i.shape != X_ij.shape:
        raise ArgumentError(f"shape mismatch: B_i {B_i.shape} vs X_ij {X_ij.shape}")
    t = float(np.sum(X_ij * B_i))
    return (float(link.g_prime(t)) - Y_ij) * X_ij


def loss_at(theta: ParameterSet, data: DatasetBundle, link: LinkSpec) -> float:
    theta.check_data(data)
    total = 0.0
    for i in range(data.n):
        total += individual_loss(theta.slice(i), data, i, link)
    if not np.isfinite(total):
        raise NumericError("loss is not finite")
    return total


def partial_gradients(
    theta: ParameterSet, data: DatasetBundle, link: LinkSpec, threads: int = 1
) -> GradientBundle:
    """
    Partial gradients of the summed loss w.r.t. C, R, L1_i and L2_i.

    The Kronecker-structured shared gradients are accumulated per individual,
    so the p2*n-column composite matrices are never formed; only their
    K x K Grams are. Reductions run in individual order.
    """
    theta.check_data(data)
    C, R = theta.C, theta.R
    gramC = C.T @ C
    gramR = R.T @ R

    def contribution(i: int):
        L1, L2 = theta.L1[i], theta.L2[i]
        B_i = C @ (L1 @ L2.T) @ R.T
        loss, G = individual_loss_and_gradient(B_i, data, i, link)
        RL2 = R @ L2
        CL1 = C @ L1
        GRL2 = G @ RL2
        GtCL1 = G.T @ CL1
        L2RtRL2 = RL2.T @ RL2
        L1CtCL1 = CL1.T @ CL1
        return (
            loss,
            GRL2 @ L1.T,
            GtCL1 @ L2.T,
            C.T @ GRL2,
            R.T @ GtCL1,
            L1 @ L2RtRL2 @ L1.T,
            L2 @ L1CtCL1 @ L2.T,
            L2RtRL2,
            L1CtCL1,
        )

    parts = map_individuals(contribution, data.n, threads)

    loss = 0.0
    gC = np.zeros_like(C)
    gR = np.zeros_like(R)
    gramCtilde = np.zeros_like(gramC)
    gramRtilde = np.zeros_like(gramR)
    for part in parts:
        loss += part[0]
        gC += part[1]
        gR += part[2]
        gramCtilde += part[5]
        gramRtilde += part[6]

    return GradientBundle(
        gC=gC,
        gR=gR,
        g1=[p[3] for p in parts],
        g2=[p[4] for p in parts],
        gramCtilde=0.5 * (gramCtilde + gramCtilde.T),
        gramRtilde=0.5 * (gramRtilde + gramRtilde.T),
        gramC=gramC,
        gramR=gramR,
        gramRi=[0.5 * (p[7] + p[7].T) for p in parts],
        gramCi=[0.5 * (p[8] + p[8].T) for p in parts],
        loss=loss,
    )


def predict(B: Tensor3, data: DatasetBundle, link: LinkSpec) -> List[NDArray[np.float64]]:
    """Fitted means g'(<X_ij, B_i>) per individual"""
    B = np.asarray(B, dtype=np.float64)
    if B.shape != (*data.dims, data.n):
        raise ArgumentError(f"coefficient tensor {B.shape} does not match data {(*data.dims, data.n)}")
    return [link.g_prime(linear_predictor(B[:, :, i], data, i)) for i in range(data.n)]
