"""Memory AMP: long-memory linear estimator, orthogonal denoiser, damping.

Two centralized drivers live here.  ``run_centralized`` materializes
B = lambda_dagger I - A A^H and follows the original recursion; it is kept
deliberately independent of ``MampEngine`` and serves as the reference.
``run_variational`` uses the matrix-by-vector form that the distributed
runtime splits across nodes, and shares ``MampEngine`` with it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .model import LinearSystem, SignalPrior
from .spectral import SpectralStats, ortho_coeffs

logger = logging.getLogger(__name__)

V_FLOOR = 1e-12
# near the fixed point the window estimates become collinear; past this the two
# linear-stage forms drift apart by rounding alone
COND_MAX = 1e8


class MampError(RuntimeError):
    """Raised when an iteration cannot proceed (e.g. epsilon_t = 0)."""


def _matvec(A, v):
    return A @ v


def _rmatvec(A, v):
    return A.conj().T @ v


# --- relaxation -----------------------------------------------------------

def relaxation_theta(lambda_dagger: float, sigma2: float, v_bar_tt: float) -> float:
    if not v_bar_tt > V_FLOOR:
        logger.debug("v_bar=%g clamped to the variance floor", v_bar_tt)
        v_bar_tt = V_FLOOR
    return 1.0 / (lambda_dagger + sigma2 / v_bar_tt)


class ConstantXi:
    """xi_t = value for every t; value 1 is the default policy."""

    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def __call__(self, t: int, context=None) -> float:
        return self.value

    def __repr__(self):
        return f"ConstantXi({self.value})"


XiPolicy = Callable[[int, object], float]
UNIT_XI = ConstantXi(1.0)


def relaxation_xi(t: int, context=None, policy: XiPolicy | None = None) -> float:
    return float((policy or UNIT_XI)(t, context))


# --- linear stage ---------------------------------------------------------

@dataclass
class MleOutput:
    z_hat: np.ndarray
    r_hat: np.ndarray
    r: np.ndarray


def memory_term(p: Sequence[float], estimates: Sequence[np.ndarray]) -> np.ndarray:
    """sum_i p_i x_i, accumulated left to right."""
    acc = p[0] * estimates[0]
    for pi, xi in zip(p[1:], estimates[1:]):
        acc = acc + pi * xi
    return acc


def mle_variational(A, y, x_t, z_hat_prev, r_hat_prev, theta, xi, lambda_dagger,
                    p, estimates, eps) -> MleOutput:
    """z_t = theta lambda_dagger z_{t-1} + xi y - A(theta r_hat_{t-1} + xi x_t);
    r_hat_t = A^H z_t;  r_t = (r_hat_t + sum_i p_i x_i) / eps."""
    if eps == 0:
        raise MampError("epsilon_t = 0; linear estimator output undefined")
    z_hat = theta * lambda_dagger * z_hat_prev + xi * y - _matvec(A, theta * r_hat_prev + xi * x_t)
    r_hat = _rmatvec(A, z_hat)
    r = (r_hat + memory_term(p, estimates)) / eps
    return MleOutput(z_hat, r_hat, r)


def mle_original(B, A, y, x_t, z_prev, theta, xi, p, estimates, eps) -> MleOutput:
    """Reference form with an explicit B: z_t = theta B z_{t-1} + xi (y - A x_t)."""
    if eps == 0:
        raise MampError("epsilon_t = 0; linear estimator output undefined")
    z = theta * (B @ z_prev) + xi * (y - A @ x_t)
    r_hat = A.conj().T @ z
    return MleOutput(z, r_hat, (r_hat + memory_term(p, estimates)) / eps)


def output_variance(r_hat_sq: float, memory_residual_sq: float, eps: float, delta: float,
                    sigma2: float, w0: float, N: int) -> float:
    """Error variance of r_t from quantities the iteration already holds.

    |r_hat|^2/N splits into the memory part p^T V p, recovered from the
    residual combination |sum_i p_i h_i|^2, plus eps^2 times the wanted variance.
    """
    mem = (memory_residual_sq / N - delta * sigma2 * eps**2) / w0
    v = (r_hat_sq / N - mem) / eps**2
    return max(v, V_FLOOR)


# --- nonlinear stage ------------------------------------------------------

@dataclass
class DenoiserOutput:
    x_post: np.ndarray
    v_post: float
    x_orth: np.ndarray
    v_orth: float
    alpha: float


def bg_posterior(r: np.ndarray, v_in: float, prior: SignalPrior):
    """Elementwise posterior mean and variance of x given r = x + CN(0, v_in)."""
    mu = prior.mu
    if mu == 0:
        return np.zeros_like(r), np.zeros(r.shape)
    s = prior.active_variance
    m = (s / (s + v_in)) * r
    c = s * v_in / (s + v_in)
    if mu == 1:
        return m, np.full(r.shape, c)
    llr = (math.log((1 - mu) / mu) + math.log((s + v_in) / v_in)
           - np.abs(r) ** 2 * (1.0 / v_in - 1.0 / (s + v_in)))
    pi = expit(-llr)
    return pi * m, pi * c + pi * (1 - pi) * np.abs(m) ** 2


def denoiser_bg(r: np.ndarray, v_in: float, prior: SignalPrior) -> DenoiserOutput:
    """MMSE denoiser for the Bernoulli-Gaussian prior, plus its orthogonalized form."""
    if not v_in > 0:
        raise ValueError(f"input variance must be positive, got {v_in}")
    x_post, var = bg_posterior(r, v_in, prior)
    v_post = max(float(np.mean(var)), V_FLOOR)
    alpha = v_post / v_in
    gap = 1.0 - alpha
    if gap < V_FLOOR:
        logger.debug("divergence %.3g too close to one; floored", alpha)
        gap = V_FLOOR
    x_orth = (x_post - alpha * r) / gap
    return DenoiserOutput(x_post, v_post, x_orth, v_post / gap, alpha)


# --- damping --------------------------------------------------------------

def _cov(raw: complex, N: int, delta: float, sigma2: float, w0: float) -> complex:
    return (raw / N - delta * sigma2) / w0


def damping_covariance(h_new: np.ndarray, h_past: Sequence[np.ndarray], delta: float,
                       sigma2: float, w0: float, N: int) -> np.ndarray:
    """Covariance matrix over [past estimates..., new candidate] from residuals.

    Entry (a, b) is [h_a^H h_b / N - delta sigma2] / w0; diagonals are floored.
    """
    hs = list(h_past) + [h_new]
    s = len(hs)
    V = np.empty((s, s), dtype=complex)
    for a in range(s):
        for b in range(a, s):
            v = _cov(np.vdot(hs[a], hs[b]), N, delta, sigma2, w0)
            V[a, b] = v
            V[b, a] = np.conj(v)
    for a in range(s):
        V[a, a] = max(V[a, a].real, V_FLOOR)
    return V


@dataclass
class DampingResult:
    zeta: np.ndarray
    v_bar: float
    dropped: int = 0


def damping_vector(V: np.ndarray, cond_max: float = COND_MAX) -> DampingResult:
    """zeta = V^-1 1 / (1^T V^-1 1), v_bar = 1 / (1^T V^-1 1).

    Singular or ill-conditioned V: drop the oldest entry and retry.  The
    returned zeta spans the full window, with zeros for dropped entries.
    """
    V = np.asarray(V)
    s = V.shape[0]
    for drop in range(s):
        sub = V[drop:, drop:]
        if sub.shape[0] == 1:
            v = max(float(sub[0, 0].real), V_FLOOR)
            zeta = np.zeros(s, dtype=complex)
            zeta[-1] = 1.0
            return DampingResult(zeta, v, drop)
        if np.linalg.cond(sub) > cond_max:
            continue
        u = np.linalg.solve(sub, np.ones(sub.shape[0]))
        total = u.sum()
        if not total.real > 0:
            continue
        zeta = np.zeros(s, dtype=complex)
        zeta[drop:] = u / total
        return DampingResult(zeta, max(1.0 / total.real, V_FLOOR), drop)
    raise AssertionError("unreachable: a window of size one always succeeds")


def nle_step(window: Sequence[np.ndarray], zeta: Sequence[complex]) -> np.ndarray:
    if len(window) != len(zeta):
        raise ValueError(f"window has {len(window)} entries but zeta has {len(zeta)}")
    acc = zeta[0] * window[0]
    for z, e in zip(zeta[1:], window[1:]):
        acc = acc + z * e
    return acc


# --- shared iteration state ---------------------------------------------

@dataclass
class Coefficients:
    t: int
    theta: float
    xi: float
    p: np.ndarray
    eps: float


@dataclass
class MampState:
    """Quantities every node replicates: the estimate history, the relaxation
    history and the error covariance over the damping window."""

    estimates: list[np.ndarray]
    thetas: list[float] = field(default_factory=list)
    xis: list[float] = field(default_factory=list)
    cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), complex))
    cov_index: list[int] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.estimates)

    @property
    def v_bar(self) -> float:
        return float(self.cov[-1, -1].real)


class MampEngine:
    """Parameter bookkeeping and the nonlinear stage, independent of how the
    linear-stage products and global sums are carried out."""

    def __init__(self, prior: SignalPrior, stats: SpectralStats, sigma2: float, L: int = 3,
                 xi_policy: XiPolicy | None = None):
        if L < 1:
            raise ValueError("damping window L must be >= 1")
        self.prior = prior
        self.stats = stats
        self.sigma2 = float(sigma2)
        self.L = L
        self.xi_policy = xi_policy or UNIT_XI
        self.N = stats.N
        self.delta = stats.delta
        self.w0 = float(stats.w[0])

    def cov_value(self, raw) -> complex:
        return _cov(raw, self.N, self.delta, self.sigma2, self.w0)

    def new_state(self, y_norm_sq: float) -> MampState:
        """x_1 = 0, whose error variance follows from the residual h_1 = y."""
        v11 = max(self.cov_value(y_norm_sq).real, V_FLOOR)
        return MampState(estimates=[np.zeros(self.N, dtype=complex)],
                         cov=np.array([[v11]], dtype=complex), cov_index=[0])

    def coefficients(self, state: MampState) -> Coefficients:
        t = state.t
        if t > self.stats.T_max:
            raise MampError(f"spectral stats cover {self.stats.T_max} iterations, asked for {t}")
        theta = relaxation_theta(self.stats.lambda_dagger, self.sigma2, state.v_bar)
        xi = relaxation_xi(t, state, self.xi_policy)
        state.thetas.append(theta)
        state.xis.append(xi)
        p, eps = ortho_coeffs(state.thetas, state.xis, self.stats.w)
        return Coefficients(t, theta, xi, p, eps)

    def linear_output(self, state: MampState, c: Coefficients, r_hat: np.ndarray,
                      memory_residual_sq: float) -> tuple[np.ndarray, float]:
        if c.eps == 0:
            raise MampError(f"epsilon_{c.t} = 0")
        r = (r_hat + memory_term(c.p, state.estimates)) / c.eps
        v = output_variance(float(np.vdot(r_hat, r_hat).real), memory_residual_sq, c.eps,
                            self.delta, self.sigma2, self.w0, self.N)
        return r, v

    def denoise(self, r: np.ndarray, v: float) -> DenoiserOutput:
        return denoiser_bg(r, v, self.prior)

    def window(self, state: MampState) -> list[int]:
        """Indices of the past estimates that join the damping window."""
        return state.cov_index[-(self.L - 1):] if self.L > 1 else []

    def damp(self, state: MampState, candidate: np.ndarray, row_raw: Sequence[complex],
             diag_raw: float) -> DampingResult:
        """Damp the candidate against the window and append x_{t+1}.

        ``row_raw[j]`` is hbar^H h_j for the j-th window estimate and
        ``diag_raw`` is |hbar|^2, both summed over all M rows.
        """
        win = self.window(state)
        if len(row_raw) != len(win):
            raise ValueError("covariance row does not match the damping window")
        pos = [state.cov_index.index(i) for i in win]
        s = len(win) + 1
        V = np.empty((s, s), dtype=complex)
        V[:-1, :-1] = state.cov[np.ix_(pos, pos)]
        row = np.array([self.cov_value(v) for v in row_raw], dtype=complex)
        V[-1, :-1] = row
        V[:-1, -1] = row.conj()
        V[-1, -1] = max(self.cov_value(diag_raw).real, V_FLOOR)
        res = damping_vector(V)
        x_new = nle_step([state.estimates[i] for i in win] + [candidate], res.zeta)
        # covariance of the damped estimate with the window: v_bar for every member that
        # took part in the solve (optimality of zeta), by linearity for dropped ones
        g = res.zeta.conj() @ V
        g[res.dropped:] = res.v_bar
        keep = (win + [state.t])[-(max(self.L - 1, 1)):]
        new_idx = state.t
        state.estimates.append(x_new)
        members = win + [-1]
        size = len(keep)
        C = np.empty((size, size), dtype=complex)
        for a, ia in enumerate(keep):
            for b, ib in enumerate(keep):
                if ia == new_idx and ib == new_idx:
                    C[a, b] = res.v_bar
                elif ia == new_idx:
                    C[a, b] = g[members.index(ib)]
                elif ib == new_idx:
                    C[a, b] = np.conj(g[members.index(ia)])
                else:
                    C[a, b] = V[members.index(ia), members.index(ib)]
        state.cov = C
        state.cov_index = keep
        return res


# --- trajectories ---------------------------------------------------------

@dataclass
class IterationRecord:
    iteration: int
    mse_linear: float
    v_hat: float
    theta: float
    eps: float
    window: int
    v_in: float = float("nan")
    v_bar: float = float("nan")

    @property
    def mse_db(self) -> float:
        return 10.0 * math.log10(self.mse_linear) if self.mse_linear > 0 else -math.inf


@dataclass
class Trajectory:
    variant: str
    records: list[IterationRecord] = field(default_factory=list)
    x_hat: np.ndarray | None = None
    x_next: np.ndarray | None = None
    estimates: list[np.ndarray] = field(default_factory=list)
    diverged: bool = False
    extras: dict = field(default_factory=dict)

    def mse(self) -> np.ndarray:
        return np.array([r.mse_linear for r in self.records])

    def mse_db(self) -> np.ndarray:
        return np.array([r.mse_db for r in self.records])

    @property
    def final_mse(self) -> float:
        return self.records[-1].mse_linear


def mse(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    d = x_hat - x_true
    return float(np.vdot(d, d).real) / len(x_true)


def null_trajectory(variant: str, sys: LinearSystem, prior: SignalPrior, T: int) -> Trajectory:
    """A carries no information (w_0 = 0): every estimate is the prior mean."""
    logger.warning("w_0 = 0: the transform is null, returning prior-mean estimates")
    zero = np.zeros(sys.N, dtype=complex)
    tr = Trajectory(variant, x_hat=zero, x_next=zero)
    e = mse(zero, sys.x_true)
    for t in range(1, T + 1):
        tr.records.append(IterationRecord(t, e, prior.power, float("nan"), 0.0, 1))
    return tr


def run_variational(sys: LinearSystem, prior: SignalPrior, stats: SpectralStats, T: int,
                    L: int = 3, xi_policy: XiPolicy | None = None,
                    keep_estimates: bool = False) -> Trajectory:
    """Matrix-by-vector MAMP: two products in the linear stage, two residuals."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if stats.w[0] <= 0:
        return null_trajectory("variational", sys, prior, T)
    A, y, N, M = sys.A, sys.y, sys.N, sys.M
    eng = MampEngine(prior, stats, sys.sigma2, L, xi_policy)
    state = eng.new_state(float(np.vdot(y, y).real))
    z_hat = np.zeros(M, dtype=complex)
    r_hat = np.zeros(N, dtype=complex)
    residuals: list[np.ndarray] = []
    tr = Trajectory("variational")
    for _ in range(T):
        c = eng.coefficients(state)
        x_t = state.estimates[-1]
        residuals.append(y - _matvec(A, x_t))
        out = mle_variational(A, y, x_t, z_hat, r_hat, c.theta, c.xi, stats.lambda_dagger,
                              c.p, state.estimates, c.eps)
        z_hat, r_hat = out.z_hat, out.r_hat
        ph = memory_term(c.p, residuals)
        r, v_in = eng.linear_output(state, c, r_hat, float(np.vdot(ph, ph).real))
        d = eng.denoise(r, v_in)
        hbar = y - _matvec(A, d.x_orth)
        row = [np.vdot(hbar, residuals[j]) for j in eng.window(state)]
        res = eng.damp(state, d.x_orth, row, float(np.vdot(hbar, hbar).real))
        tr.records.append(IterationRecord(c.t, mse(d.x_post, sys.x_true), d.v_post, c.theta,
                                          c.eps, len(res.zeta) - res.dropped, v_in, res.v_bar))
        tr.x_hat = d.x_post
    tr.x_next = state.estimates[-1]
    if keep_estimates:
        tr.estimates = list(state.estimates)
    return tr


def run_centralized(sys: LinearSystem, prior: SignalPrior, stats: SpectralStats, T: int,
                    L: int = 3, xi_policy: XiPolicy | None = None,
                    keep_estimates: bool = False) -> Trajectory:
    """Original-form MAMP with a materialized B; the desk-scale reference."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if stats.w[0] <= 0:
        return null_trajectory("centralized", sys, prior, T)
    A, y, N, M = sys.A, sys.y, sys.N, sys.M
    delta, sigma2, w0, ld = sys.delta, sys.sigma2, float(stats.w[0]), stats.lambda_dagger
    policy = xi_policy or UNIT_XI
    B = ld * np.eye(M) - A @ A.conj().T
    xs = [np.zeros(N, dtype=complex)]
    thetas: list[float] = []
    xis: list[float] = []
    z = np.zeros(M, dtype=complex)
    v_bar = max(_cov(np.vdot(y, y).real, N, delta, sigma2, w0).real, V_FLOOR)
    tr = Trajectory("centralized")
    for t in range(1, T + 1):
        thetas.append(relaxation_theta(ld, sigma2, v_bar))
        xis.append(relaxation_xi(t, None, policy))
        p, eps = ortho_coeffs(thetas, xis, stats.w)
        out = mle_original(B, A, y, xs[-1], z, thetas[-1], xis[-1], p, xs, eps)
        z = out.z_hat
        hs = [y - A @ x for x in xs]
        ph = memory_term(p, hs)
        v_in = output_variance(float(np.vdot(out.r_hat, out.r_hat).real), float(np.vdot(ph, ph).real),
                               eps, delta, sigma2, w0, N)
        d = denoiser_bg(out.r, v_in, prior)
        win = list(range(max(0, t - (L - 1)), t)) if L > 1 else []
        V = damping_covariance(y - A @ d.x_orth, [hs[j] for j in win], delta, sigma2, w0, N)
        res = damping_vector(V)
        x_new = nle_step([xs[j] for j in win] + [d.x_orth], res.zeta)
        xs.append(x_new)
        h_new = y - A @ x_new
        v_bar = max(_cov(np.vdot(h_new, h_new).real, N, delta, sigma2, w0).real, V_FLOOR)
        tr.records.append(IterationRecord(t, mse(d.x_post, sys.x_true), d.v_post, thetas[-1], eps,
                                          len(res.zeta) - res.dropped, v_in, res.v_bar))
        tr.x_hat = d.x_post
    tr.x_next = xs[-1]
    if keep_estimates:
        tr.estimates = xs
    return tr
