"""Seeded experiments, CSV output and the desk-scale reference solvers."""
from __future__ import annotations

import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .consensus import NetworkGraph, make_graph, star_graph
from .mamp import IterationRecord, denoiser_bg, mse, run_centralized, run_variational
from .model import LinearSystem, SignalPrior, make_system, partition
from .runtime import run_dmamp, run_fdmamp
from .spectral import (SpectralStats, approx_moments_distributed, draw_probe, gram_eigenvalues,
                       stats_from_eigenvalues, stats_from_moments)

logger = logging.getLogger(__name__)

VARIANTS = ("centralized", "variational", "dmamp", "fdmamp")
DISTRIBUTED = ("dmamp", "fdmamp")
MOMENT_MODES = ("exact", "recursion")
CSV_COLUMNS = ("variant", "seed", "iter", "mse_linear", "mse_db", "comm_exact", "comm_table")
CONVERGENCE_TOL = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    M: int = 1000
    N: int = 2000
    K: int = 8
    kappa: float = 10.0
    snr_db: float = 30.0
    mu: float = 0.1
    T: int = 30
    L: int = 3
    Dprime: int | None = None
    tau: int | None = None
    topology: str = "caterpillar"
    topology_params: dict = field(default_factory=lambda: {"diameter": 3})
    seeds: tuple[int, ...] = tuple(range(20))
    variants: tuple[str, ...] = VARIANTS
    moment_mode: str = "recursion"
    probe_repeats: int = 1
    output: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.variants = tuple(self.variants)

    @property
    def tau_eff(self) -> int:
        return 2 * self.T if self.tau is None else self.tau

    @property
    def needs_shards(self) -> bool:
        return any(v in DISTRIBUTED for v in self.variants)

    def validate(self) -> "ExperimentConfig":
        errs = []
        for name in ("M", "N", "T", "L", "probe_repeats"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.K < 1:
            errs.append("K must be >= 1")
        elif self.needs_shards and self.M % self.K:
            errs.append(f"M={self.M} not divisible by K={self.K}")
        if not self.kappa >= 1:
            errs.append("kappa must be >= 1")
        if min(self.M, self.N) == 1 and self.kappa != 1:
            errs.append("rank-one A needs kappa = 1")
        if not 0 <= self.mu <= 1:
            errs.append("mu must lie in [0, 1]")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            errs.append("snr_db must be finite or +inf")
        if self.Dprime is not None and self.Dprime < 1:
            errs.append("Dprime must be >= 1")
        if self.tau is not None and self.tau < 1:
            errs.append("tau must be >= 1")
        if not self.seeds:
            errs.append("at least one seed is required")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            errs.append(f"variants must be a non-empty subset of {VARIANTS}, got {self.variants}")
        if self.moment_mode not in MOMENT_MODES:
            errs.append(f"moment_mode must be one of {MOMENT_MODES}")
        if "fdmamp" in self.variants and not errs:
            try:
                self.graph()
            except ValueError as e:
                errs.append(f"topology: {e}")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def graph(self) -> NetworkGraph:
        return make_graph(self.topology, self.K, **self.topology_params)

    def prior(self) -> SignalPrior:
        return SignalPrior(self.mu)

    # flat key=value form
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "topology_params":
                lines += [f"topology.{k}={p}" for k, p in sorted(v.items())]
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        cfg.topology_params = dict(cfg.topology_params)
        types = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in pairs:
            key, raw = key.strip(), raw.strip()
            if key.startswith("topology."):
                cfg.topology_params[key.split(".", 1)[1]] = _scalar(raw)
                continue
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw))
        cfg.__post_init__()
        return cfg

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            pairs.append(tuple(line.split("=", 1)))
        return cls.from_pairs(pairs, base)

    @classmethod
    def from_file(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), base)


_INT_KEYS = {"M", "N", "K", "T", "L", "probe_repeats"}
_OPT_INT_KEYS = {"Dprime", "tau"}
_FLOAT_KEYS = {"kappa", "snr_db", "mu"}


def _scalar(raw: str):
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def _coerce(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _OPT_INT_KEYS:
            return None if raw.lower() in ("", "none") else int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key == "seeds":
            if ".." in raw:
                lo, hi = raw.split("..")
                return tuple(range(int(lo), int(hi) + 1))
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if key == "variants":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if key == "output":
            return raw or None
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


# --- results -------------------------------------------------------------------

@dataclass
class TrialResult:
    variant: str
    seed: int
    records: list[IterationRecord]
    comm_exact: list[int]
    comm_table: list[int]
    diverged: bool = False

    def mse(self) -> np.ndarray:
        return np.array([r.mse_linear for r in self.records])

    @property
    def final_mse(self) -> float:
        return self.records[-1].mse_linear

    @property
    def final_mse_db(self) -> float:
        return self.records[-1].mse_db

    @property
    def iters_to_minus30(self) -> int | None:
        return next((r.iteration for r in self.records if r.mse_db <= -30.0), None)

    @property
    def converged_at(self) -> int | None:
        return convergence_iteration(self.mse())


def convergence_iteration(mses: Sequence[float], tol: float = CONVERGENCE_TOL) -> int | None:
    for t in range(1, len(mses)):
        if mses[t] > 0 and abs(mses[t] - mses[t - 1]) / mses[t] < tol:
            return t + 1
    return None


def _cumulative(ledger, T: int, mode: str) -> list[int]:
    per = ledger.per_iteration(mode)
    run = per.get(0, 0)
    out = []
    for t in range(1, T + 1):
        run += per.get(t, 0)
        out.append(run)
    return out


# --- spectral stats per moment mode ------------------------------------------

def probe_seed(seed: int) -> np.random.Generator:
    """Probe stream, independent of the instance streams drawn from the same seed."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])


def compute_stats(sys: LinearSystem, T: int, mode: str, tau: int | None = None, seed: int = 0,
                  repeats: int = 1, shards=None) -> SpectralStats:
    tau = 2 * T if tau is None else tau
    if mode == "exact":
        return stats_from_eigenvalues(gram_eigenvalues(sys.A), sys.N, T, tau)
    rng = probe_seed(seed)
    shards = shards if shards is not None else partition(sys, K=1)
    need = max(T, tau)
    lam = np.mean([approx_moments_distributed(shards, None, need, s0=draw_probe(sys.N, rng))
                   for _ in range(repeats)], axis=0)
    return stats_from_moments(lam, sys.delta, sys.N, T, tau)


# --- experiment driver -------------------------------------------------------

def run_trial(cfg: ExperimentConfig, seed: int) -> tuple[SpectralStats, list[TrialResult]]:
    prior = cfg.prior()
    K = cfg.K if cfg.needs_shards else 1
    sys = make_system(cfg.M, cfg.N, cfg.kappa, cfg.snr_db, prior, K=K, seed=seed)
    shards = partition(sys)
    stats = compute_stats(sys, cfg.T, cfg.moment_mode, cfg.tau, seed, cfg.probe_repeats, shards)
    out = []
    zero = [0] * cfg.T
    for variant in cfg.variants:
        if variant == "centralized":
            tr, led = run_centralized(sys, prior, stats, cfg.T, cfg.L), None
        elif variant == "variational":
            tr, led = run_variational(sys, prior, stats, cfg.T, cfg.L), None
        elif variant == "dmamp":
            tr, led = run_dmamp(shards, star_graph(K), prior, stats, cfg.T, cfg.L,
                                sigma2=sys.sigma2, x_true=sys.x_true)
        else:
            tr, led = run_fdmamp(shards, cfg.graph(), prior, stats, cfg.T, cfg.L, cfg.Dprime,
                                 sigma2=sys.sigma2, x_true=sys.x_true)
        out.append(TrialResult(variant, seed, tr.records,
                               _cumulative(led, cfg.T, "exact") if led else zero,
                               _cumulative(led, cfg.T, "table") if led else zero, tr.diverged))
    return stats, out


def _fmt(x: float) -> str:
    return repr(float(x))


def results_csv(cfg: ExperimentConfig, trials: Sequence[tuple[int, SpectralStats, list[TrialResult]]]) -> str:
    buf = io.StringIO()
    buf.write("# dmamp experiment; comm columns are cumulative scalars sent through each iteration\n")
    for seed, stats, _ in trials:
        hdr = " ".join(f"{k}={_fmt(v) if isinstance(v, float) else v}" for k, v in stats.header().items())
        buf.write(f"# seed={seed} {hdr}\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for _, _, results in trials:
        for res in results:
            for r, ce, ct in zip(res.records, res.comm_exact, res.comm_table):
                buf.write(f"{res.variant},{res.seed},{r.iteration},{_fmt(r.mse_linear)},"
                          f"{_fmt(r.mse_db)},{ce},{ct}\n")
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig) -> list[TrialResult]:
    """Every requested variant on the same instance and stats, per seed.

    With ``cfg.output`` set, writes the CSV there and the resolved config
    beside it (``<output>.config``).
    """
    cfg.validate()
    trials = []
    for seed in cfg.seeds:
        stats, results = run_trial(cfg, seed)
        trials.append((seed, stats, results))
        logger.info("seed %d: %s", seed, ", ".join(f"{r.variant} {r.final_mse_db:.2f} dB" for r in results))
    if cfg.output:
        out = Path(cfg.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(results_csv(cfg, trials))
        Path(str(out) + ".config").write_text(cfg.to_text())
    return [r for _, _, results in trials for r in results]


def read_results_csv(path) -> list[dict]:
    rows = []
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    head = lines[0].strip().split(",")
    if tuple(head) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV columns {head}")
    for ln in lines[1:]:
        v = ln.strip().split(",")
        rows.append({"variant": v[0], "seed": int(v[1]), "iter": int(v[2]), "mse_linear": float(v[3]),
                     "mse_db": float(v[4]), "comm_exact": int(v[5]), "comm_table": int(v[6])})
    return rows


def group_results(rows: Iterable[dict]) -> list[TrialResult]:
    """Rebuild TrialResults (MSE and comm only) from CSV rows."""
    buckets: dict[tuple[str, int], list[dict]] = {}
    for r in rows:
        buckets.setdefault((r["variant"], r["seed"]), []).append(r)
    out = []
    for (variant, seed), rs in buckets.items():
        rs.sort(key=lambda r: r["iter"])
        recs = [IterationRecord(r["iter"], r["mse_linear"], math.nan, math.nan, math.nan, 0) for r in rs]
        out.append(TrialResult(variant, seed, recs, [r["comm_exact"] for r in rs], [r["comm_table"] for r in rs]))
    return out


# --- reports -------------------------------------------------------------------

def relative_deviation(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("trajectories differ in length")
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(a - b) / np.abs(b)
    d = np.where((a == b), 0.0, d)
    return float(np.max(d)) if len(d) else 0.0


@dataclass
class Agreement:
    seed: int
    variant: str
    reference: str
    max_rel_dev: float


def agreement_report(results: Sequence[TrialResult]) -> list[Agreement]:
    """Max per-iteration relative MSE deviation of each variant from the
    variational run (or the centralized one when variational is absent)."""
    by_seed: dict[int, dict[str, TrialResult]] = {}
    for r in results:
        by_seed.setdefault(r.seed, {})[r.variant] = r
    out = []
    for seed, runs in sorted(by_seed.items()):
        ref = "variational" if "variational" in runs else "centralized" if "centralized" in runs else None
        if ref is None:
            continue
        for v, r in runs.items():
            if v != ref:
                out.append(Agreement(seed, v, ref, relative_deviation(r.mse(), runs[ref].mse())))
    return out


def agreement_tolerance(variant: str, reference: str, cfg: ExperimentConfig | None = None) -> float | None:
    """Tolerance at which a mismatch counts as an invariant violation (None: not checked)."""
    if {variant, reference} == {"centralized", "variational"}:
        return 1e-9
    if variant == "dmamp":
        return 1e-8
    if variant == "fdmamp":
        if cfg is None:
            return 1e-8
        D = cfg.graph().diameter
        return 1e-8 if (cfg.Dprime is None or cfg.Dprime >= D) else None
    return None


def mean_curves(results: Sequence[TrialResult]) -> dict[str, np.ndarray]:
    """Seed-averaged linear MSE per variant."""
    acc: dict[str, list[np.ndarray]] = {}
    for r in results:
        acc.setdefault(r.variant, []).append(r.mse())
    return {v: np.mean(np.stack(ms), axis=0) for v, ms in acc.items()}


def to_db(x) -> np.ndarray:
    return 10.0 * np.log10(np.asarray(x, float))


# --- OAMP/VAMP reference --------------------------------------------------------

@dataclass
class OracleResult:
    mse_fp: float
    mses: np.ndarray
    converged: bool
    iterations: int

    @property
    def mse_fp_db(self) -> float:
        return float(10.0 * np.log10(self.mse_fp))


def oamp_fixed_point_oracle(sys: LinearSystem, prior: SignalPrior, T: int = 100,
                            tol: float = CONVERGENCE_TOL) -> OracleResult:
    """OAMP/VAMP with an exact LMMSE stage (dense SVD) and the same denoiser.

    The LMMSE step is evaluated in the right singular basis, so each
    iteration costs two N-by-min(M,N) products.
    """
    if sys.M > 2000 or sys.N > 4000:
        raise ValueError("dense reference limited to desk-scale problems")
    A, y, N = sys.A, sys.y, sys.N
    sigma2 = max(sys.sigma2, 1e-30)
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    d2 = np.zeros(N)
    d2[:len(s)] = s**2
    y_rot = s * (U.conj().T @ y) / sigma2
    x_pri = np.zeros(N, dtype=complex)
    v_pri = prior.power
    mses = []
    converged = False
    for t in range(T):
        q = Vh @ x_pri
        coeff = (y_rot + q / v_pri) / (s**2 / sigma2 + 1.0 / v_pri)
        x_lin = x_pri + Vh.conj().T @ (coeff - q)
        eta = float(np.mean(1.0 / (d2 / sigma2 + 1.0 / v_pri)))
        v_ext = 1.0 / (1.0 / eta - 1.0 / v_pri)
        r = v_ext * (x_lin / eta - x_pri / v_pri)
        d = denoiser_bg(r, v_ext, prior)
        mses.append(mse(d.x_post, sys.x_true))
        if t and abs(mses[-1] - mses[-2]) / mses[-1] < tol:
            converged = True
            break
        x_pri, v_pri = d.x_orth, d.v_orth
    if not converged:
        logger.warning("OAMP reference did not converge within %d iterations", T)
    return OracleResult(mses[-1], np.array(mses), converged, len(mses))


# --- approximate vs exact moments ------------------------------------------

@dataclass
class LambdaReport:
    kappa: float
    seeds: tuple[int, ...]
    exact_db: np.ndarray
    approx_db: np.ndarray
    per_seed_final_gap_db: np.ndarray
    upper_bound_ok: bool

    @property
    def gap_db(self) -> np.ndarray:
        return np.abs(self.approx_db - self.exact_db)

    @property
    def final_gap_db(self) -> float:
        return float(self.gap_db[-1])


def approx_vs_exact_lambda_report(cfg: ExperimentConfig) -> LambdaReport:
    """D-MAMP under dense-exact spectral data and under probe-recursion data.

    Curves are seed-averaged in linear MSE before conversion to dB; the
    per-seed final gaps are kept alongside.
    """
    cfg.validate()
    prior = cfg.prior()
    ex_runs, ap_runs, gaps = [], [], []
    bound_ok = True
    for seed in cfg.seeds:
        sys = make_system(cfg.M, cfg.N, cfg.kappa, cfg.snr_db, prior, K=cfg.K, seed=seed)
        shards = partition(sys)
        graph = star_graph(cfg.K)
        st_ex = compute_stats(sys, cfg.T, "exact", cfg.tau)
        st_ap = compute_stats(sys, cfg.T, "recursion", cfg.tau, seed, cfg.probe_repeats, shards)
        bound_ok &= st_ap.lambda_max >= st_ex.lambda_max * (1 - 1e-12)
        a, _ = run_dmamp(shards, graph, prior, st_ex, cfg.T, cfg.L, sigma2=sys.sigma2, x_true=sys.x_true)
        b, _ = run_dmamp(shards, graph, prior, st_ap, cfg.T, cfg.L, sigma2=sys.sigma2, x_true=sys.x_true)
        ex_runs.append(a.mse())
        ap_runs.append(b.mse())
        gaps.append(abs(b.mse_db()[-1] - a.mse_db()[-1]))
    return LambdaReport(cfg.kappa, cfg.seeds, to_db(np.mean(ex_runs, axis=0)), to_db(np.mean(ap_runs, axis=0)),
                        np.array(gaps), bool(bound_ok))
