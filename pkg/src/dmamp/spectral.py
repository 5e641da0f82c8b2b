"""Eigenvalue moments of A A^H and the polynomial coefficients built on them.

``lambda_t = tr((A A^H)^t) / N``.  The solver needs the shift
``lambda_dagger = (lambda_max + lambda_min) / 2`` and the normalized traces

    b_t = tr(B^t) / N,   w_t = tr(A^H B^t A) / N,   B = lambda_dagger I - A A^H.

Two routes produce them: dense eigenvalues (exact, desk scale) and a single
random probe pushed through alternating A / A^H products, which needs only
shard-local matrix-vector work plus global sums.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import NodeShard, complex_normal

logger = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


def gram_eigenvalues(A: np.ndarray) -> np.ndarray:
    """All M eigenvalues of A A^H (zeros included when M > N), ascending."""
    M, N = A.shape
    if M <= N:
        ev = np.linalg.eigvalsh(A @ A.conj().T)
    else:
        ev = np.concatenate([np.zeros(M - N), np.linalg.eigvalsh(A.conj().T @ A)])
    return np.clip(ev, 0.0, None)


def exact_moments(A: np.ndarray, tau_max: int) -> np.ndarray:
    """lambda_1..lambda_tau_max from a dense eigendecomposition."""
    if tau_max < 1:
        raise ValueError("tau_max must be >= 1")
    N = A.shape[1]
    ev = gram_eigenvalues(A)
    return np.array([np.sum(ev**t) / N for t in range(1, tau_max + 1)])


def draw_probe(N: int, seed=None) -> np.ndarray:
    """s_0 ~ CN(0, I/N)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return complex_normal(rng, N, 1.0 / N)


def recursion_moments(A: np.ndarray, tau_max: int, s0: np.ndarray) -> np.ndarray:
    """Centralized probe recursion: s_t = A s_{t-1} (t odd), A^H s_{t-1} (t even)."""
    s = s0
    out = np.empty(tau_max)
    for t in range(1, tau_max + 1):
        s = A @ s if t % 2 else A.conj().T @ s
        out[t - 1] = np.vdot(s, s).real
    return out


def approx_moments_distributed(shards: Sequence[NodeShard], graph, tau_max: int, seed=None,
                               s0: np.ndarray | None = None) -> np.ndarray:
    """Probe recursion with every product split over the row shards.

    Odd steps stack the local blocks A_k s_{t-1} in node-id order; even steps
    add the local A_k^H s_{t-1,k} in ascending node-id order.
    """
    if graph is not None and graph.K != len(shards):
        raise ValueError("graph size does not match the number of shards")
    N = shards[0].A_k.shape[1]
    s = draw_probe(N, seed) if s0 is None else s0
    blocks: list[np.ndarray] = []
    out = np.empty(tau_max)
    for t in range(1, tau_max + 1):
        if t % 2:
            blocks = [sh.A_k @ s for sh in shards]
            out[t - 1] = sum(np.vdot(b, b).real for b in blocks)
        else:
            s = shards[0].A_k.conj().T @ blocks[0]
            for sh, b in zip(shards[1:], blocks[1:]):
                s = s + sh.A_k.conj().T @ b
            out[t - 1] = np.vdot(s, s).real
    return out


def lambda_bounds(lambda_tau: float, tau: int, N: int) -> tuple[float, float]:
    """(0, (N lambda_tau)^(1/tau)): valid bracket for the spectrum of A A^H."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if lambda_tau < 0:
        raise ValueError("lambda_tau must be non-negative")
    return 0.0, float((N * lambda_tau) ** (1.0 / tau))


def b_coeffs(moments: Sequence[float], lambda_dagger: float, t_max: int) -> np.ndarray:
    """b_t = sum_i C(t, i) (-1)^i lambda_dagger^(t-i) lambda_i for t = 0..t_max.

    ``moments[0]`` must be lambda_0 = delta.
    """
    lam = np.asarray(moments, dtype=float)
    if len(lam) < t_max + 1:
        raise ValueError(f"need lambda_0..lambda_{t_max}, got {len(lam)} values")
    b = np.empty(t_max + 1)
    for t in range(t_max + 1):
        b[t] = math.fsum(math.comb(t, i) * (-1) ** i * lambda_dagger ** (t - i) * lam[i]
                         for i in range(t + 1))
    return b


def b_cancellation(moments: Sequence[float], lambda_dagger: float, t_max: int) -> np.ndarray:
    """Sum of absolute binomial terms behind each b_t (rounding-error scale)."""
    lam = np.abs(np.asarray(moments, dtype=float))
    return np.array([sum(math.comb(t, i) * abs(lambda_dagger) ** (t - i) * lam[i] for i in range(t + 1))
                     for t in range(t_max + 1)])


def w_coeffs(b: Sequence[float], lambda_dagger: float) -> np.ndarray:
    """w_i = lambda_dagger b_i - b_{i+1}."""
    b = np.asarray(b, dtype=float)
    return lambda_dagger * b[:-1] - b[1:]


def ortho_coeffs(theta: Sequence[float], xi: Sequence[float], w: Sequence[float]):
    """Memory weights of the orthogonal linear estimator at iteration t = len(theta).

    vartheta_{t,i} = xi_i prod_{tau=i+1..t} theta_tau,  p_{t,i} = vartheta_{t,i} w_{t-i},
    epsilon_t = sum_i p_{t,i}.  Returns (p, epsilon) with p[i-1] = p_{t,i}.
    """
    t = len(theta)
    if len(xi) != t:
        raise ValueError("theta and xi must have equal length")
    if len(w) < t:
        raise ValueError(f"need w_0..w_{t - 1}")
    vartheta = np.empty(t)
    prod = 1.0
    for i in range(t, 0, -1):
        vartheta[i - 1] = xi[i - 1] * prod
        prod *= theta[i - 1]
    p = np.array([vartheta[i - 1] * w[t - i] for i in range(1, t + 1)])
    eps = math.fsum(p)
    if eps == 0.0:
        logger.warning("epsilon_%d vanished; the linear estimator cannot be normalized", t)
    return p, eps


@dataclass
class SpectralStats:
    """Moment data consumed by every solver variant.

    ``b`` and ``w`` hold b_0..b_T and w_0..w_{T-1}.  ``w_error`` is a
    rounding-error estimate for each w_i (zero when evaluated from eigenvalues).
    """

    lambda_moments: np.ndarray
    delta: float
    N: int
    lambda_min: float
    lambda_max: float
    lambda_dagger: float
    b: np.ndarray
    w: np.ndarray
    tau: int
    mode: str
    w_error: np.ndarray | None = None

    def __post_init__(self):
        if self.lambda_dagger < 0:
            raise ValueError("lambda_dagger must be non-negative")

    @property
    def T_max(self) -> int:
        return len(self.w)

    def header(self) -> dict:
        return {"mode": self.mode, "tau": self.tau, "lambda_min": self.lambda_min,
                "lambda_max": self.lambda_max, "lambda_dagger": self.lambda_dagger,
                "lambda_1": float(self.lambda_moments[0]) if len(self.lambda_moments) else 0.0,
                "w_0": float(self.w[0])}


def stats_from_moments(moments: Sequence[float], delta: float, N: int, T: int,
                       tau: int | None = None, lambda_min: float = 0.0,
                       lambda_max: float | None = None, mode: str = "recursion") -> SpectralStats:
    """Binomial route: b and w from lambda_1..lambda_T, bounds from lambda_tau."""
    tau = 2 * T if tau is None else tau
    lam = np.asarray(moments, dtype=float)
    if len(lam) < max(T, tau):
        raise ValueError(f"need {max(T, tau)} moments, got {len(lam)}")
    if lambda_max is None:
        lambda_min, lambda_max = lambda_bounds(lam[tau - 1], tau, N)
    ld = 0.5 * (lambda_max + lambda_min)
    full = np.concatenate([[delta], lam])
    b = b_coeffs(full, ld, T)
    w = w_coeffs(b, ld)
    scale = b_cancellation(full, ld, T)
    w_err = 4 * _EPS * (abs(ld) * scale[:-1] + scale[1:])
    rel = w_err / np.maximum(np.abs(w), np.finfo(float).tiny)
    shaky = np.nonzero(rel > 1e-6)[0]
    if len(shaky):
        lost = np.nonzero(rel > 1e-2)[0]
        log = logger.warning if len(lost) else logger.info
        log("binomial cancellation: w_%d onward keep fewer than six digits%s", shaky[0],
            f", w_{lost[0]} onward fewer than two" if len(lost) else "")
    return SpectralStats(lam, delta, N, float(lambda_min), float(lambda_max), ld, b, w, tau, mode, w_err)


def stats_from_eigenvalues(eigenvalues: np.ndarray, N: int, T: int, tau: int | None = None) -> SpectralStats:
    """Exact route: b_t, w_t summed directly over the eigenvalues of A A^H.

    Algebraically identical to the binomial route but free of its cancellation.
    """
    tau = 2 * T if tau is None else tau
    ev = np.asarray(eigenvalues, dtype=float)
    M = len(ev)
    lmin, lmax = float(ev.min()), float(ev.max())
    ld = 0.5 * (lmin + lmax)
    lam = np.array([np.sum(ev**t) / N for t in range(1, max(T, tau) + 1)])
    shifted = ld - ev
    b = np.array([np.sum(shifted**t) / N for t in range(T + 1)])
    w = np.array([np.sum(ev * shifted**t) / N for t in range(T)])
    return SpectralStats(lam, M / N, N, lmin, lmax, ld, b, w, tau, "exact", np.zeros(T))
