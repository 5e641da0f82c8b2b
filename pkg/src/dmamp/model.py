"""Problem instances for y = A x + n.

Builds right-unitarily-invariant transforms with a prescribed condition
number, Bernoulli-Gaussian signals, noisy observations, and the row
partition that hands each network node its own block of (A, y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circular complex Gaussian samples with E|z|^2 = var."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * math.sqrt(var / 2.0)


@dataclass(frozen=True)
class SignalPrior:
    """Bernoulli-Gaussian law: zero w.p. 1-mu, else CN(0, power/mu)."""

    mu: float = 0.1
    power: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if not self.power > 0:
            raise ValueError(f"power must be positive, got {self.power}")

    @property
    def active_variance(self) -> float:
        return self.power / self.mu if self.mu > 0 else 0.0


@dataclass
class LinearSystem:
    A: np.ndarray
    x_true: np.ndarray
    y: np.ndarray
    sigma2: float
    partition: tuple[int, ...]
    kappa: float = 1.0
    noise: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        M, N = self.A.shape
        if self.x_true.shape != (N,) or self.y.shape != (M,):
            raise ValueError("shape mismatch between A, x_true and y")
        if sum(self.partition) != M:
            raise ValueError(f"partition {self.partition} does not sum to M={M}")

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.A.shape[1]

    @property
    def delta(self) -> float:
        return self.M / self.N

    @property
    def K(self) -> int:
        return len(self.partition)


@dataclass(frozen=True)
class NodeShard:
    """Rows of (A, y) observed by one node. ``node_id`` runs from 1 to K."""

    node_id: int
    A_k: np.ndarray
    y_k: np.ndarray

    @property
    def M_k(self) -> int:
        return self.A_k.shape[0]


def gen_signal(N: int, prior: SignalPrior, seed=None) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = _rng(seed)
    active = rng.random(N) < prior.mu
    values = complex_normal(rng, N, prior.active_variance) if prior.mu > 0 else np.zeros(N, complex)
    return np.where(active, values, 0.0 + 0.0j)


def haar_isometry(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """First k columns of an n x n Haar unitary (QR of a Gaussian matrix, phase-fixed)."""
    g = complex_normal(rng, (n, k))
    q, r = np.linalg.qr(g)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def singular_profile(J: int, kappa: float, N: int) -> np.ndarray:
    """Geometric singular values with max/min = kappa and sum of squares = N."""
    if J == 1:
        s = np.ones(1)
    else:
        s = kappa ** (-np.arange(J) / (J - 1))
    return s * math.sqrt(N / np.sum(s**2))


def gen_matrix(M: int, N: int, kappa: float, seed=None, return_singular_values: bool = False):
    """A = U diag(s) V^H with Haar U, V and a geometric spectrum of ratio kappa.

    Normalized so that tr(A^H A) = N.
    """
    if M < 1 or N < 1:
        raise ValueError("M and N must be >= 1")
    if not kappa >= 1:
        raise ValueError(f"condition number must be >= 1, got {kappa}")
    J = min(M, N)
    if J == 1 and kappa != 1:
        raise ValueError("a rank-one matrix cannot have condition number != 1")
    rng = _rng(seed)
    s = singular_profile(J, kappa, N)
    U = haar_isometry(M, J, rng)
    V = haar_isometry(N, J, rng)
    A = (U * s) @ V.conj().T
    if return_singular_values:
        return A, s
    return A


def add_noise(Ax: np.ndarray, snr_db: float, seed=None) -> tuple[np.ndarray, float]:
    """Return (y, sigma2) with sigma2 = (|Ax|^2 / M) 10^(-snr_db/10).

    ``snr_db = inf`` gives the noiseless observation.
    """
    M = Ax.shape[0]
    if math.isinf(snr_db) and snr_db > 0:
        return Ax.copy(), 0.0
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    sigma2 = float(np.vdot(Ax, Ax).real) / M * 10.0 ** (-snr_db / 10.0)
    n = complex_normal(_rng(seed), M, sigma2)
    return Ax + n, sigma2


def equal_partition(M: int, K: int) -> tuple[int, ...]:
    if K < 1:
        raise ValueError("K must be >= 1")
    if M % K:
        raise ValueError(f"M={M} is not divisible by K={K}; pass explicit sizes")
    return (M // K,) * K


def make_system(M: int, N: int, kappa: float, snr_db: float, prior: SignalPrior,
                K: int = 1, seed: int = 0, sizes: Sequence[int] | None = None) -> LinearSystem:
    """Synthesize a full instance from one integer seed."""
    ss = np.random.SeedSequence(seed)
    s_mat, s_sig, s_noise = (np.random.default_rng(c) for c in ss.spawn(3))
    A, sv = gen_matrix(M, N, kappa, s_mat, return_singular_values=True)
    x = gen_signal(N, prior, s_sig)
    Ax = A @ x
    y, sigma2 = add_noise(Ax, snr_db, s_noise)
    part = tuple(int(m) for m in sizes) if sizes is not None else equal_partition(M, K)
    return LinearSystem(A=A, x_true=x, y=y, sigma2=sigma2, partition=part, kappa=kappa,
                        noise=y - Ax, seed=seed, meta={"singular_values": sv})


def partition(sys: LinearSystem, K: int | None = None,
              sizes: Sequence[int] | None = None) -> list[NodeShard]:
    """Contiguous row blocks in node-id order."""
    if sizes is None:
        sizes = sys.partition if K is None or K == sys.K else equal_partition(sys.M, K)
    sizes = [int(m) for m in sizes]
    if sum(sizes) != sys.M or any(m < 0 for m in sizes):
        raise ValueError(f"row counts {sizes} do not sum to M={sys.M}")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    # copies, so a shard never keeps a handle on the global matrix
    return [NodeShard(node_id=k + 1, A_k=sys.A[bounds[k]:bounds[k + 1]].copy(),
                      y_k=sys.y[bounds[k]:bounds[k + 1]].copy())
            for k in range(len(sizes))]


def _pairs(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


def _unpair(a: np.ndarray) -> np.ndarray:
    return a[..., 0] + 1j * a[..., 1]


def save_instance(path, sys: LinearSystem) -> None:
    """Write an instance as an uncompressed ``.npz`` container.

    Keys: ``A`` float64 (M, N, 2) row-major real/imag pairs, ``x_true``
    (N, 2), ``y`` (M, 2), ``sigma2`` scalar, ``partition`` int64 (K,),
    ``kappa`` scalar, ``seed`` int64 (-1 when unknown), ``format_version``.
    """
    np.savez(Path(path), A=_pairs(sys.A), x_true=_pairs(sys.x_true), y=_pairs(sys.y),
             sigma2=np.float64(sys.sigma2), partition=np.asarray(sys.partition, dtype=np.int64),
             kappa=np.float64(sys.kappa), seed=np.int64(-1 if sys.seed is None else sys.seed),
             format_version=np.int64(FORMAT_VERSION))


def load_instance(path) -> LinearSystem:
    with np.load(Path(path)) as f:
        if int(f["format_version"]) != FORMAT_VERSION:
            raise ValueError(f"unsupported instance format {int(f['format_version'])}")
        A = np.ascontiguousarray(_unpair(f["A"]))
        x = _unpair(f["x_true"])
        y = _unpair(f["y"])
        seed = int(f["seed"])
        return LinearSystem(A=A, x_true=x, y=y, sigma2=float(f["sigma2"]),
                            partition=tuple(int(m) for m in f["partition"]),
                            kappa=float(f["kappa"]), noise=y - A @ x,
                            seed=None if seed < 0 else seed)
