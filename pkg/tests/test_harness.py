import dataclasses
from pathlib import Path

import numpy as np
import pytest

import dmamp.harness as harness
from dmamp.harness import (CSV_COLUMNS, ConfigError, ExperimentConfig, TrialResult, agreement_report,
                           agreement_tolerance, approx_vs_exact_lambda_report, compute_stats,
                           convergence_iteration, group_results, mean_curves, oamp_fixed_point_oracle,
                           read_results_csv, relative_deviation, run_experiment, run_trial, to_db)
from dmamp.mamp import IterationRecord, run_variational
from dmamp.model import SignalPrior, make_system
from dmamp.runtime import table_dmamp

GOLDEN = Path(__file__).parent / "golden"


def small(**kw):
    base = dict(M=64, N=128, K=4, T=6, seeds=(0,), topology_params={"diameter": 2})
    base.update(kw)
    return ExperimentConfig(**base)


def records(mses):
    return [IterationRecord(t, m, np.nan, np.nan, np.nan, 0) for t, m in enumerate(mses, 1)]


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig().validate()
        assert (cfg.M, cfg.N, cfg.K, cfg.kappa, cfg.T, cfg.L) == (1000, 2000, 8, 10.0, 30, 3)
        assert cfg.tau_eff == 60 and len(cfg.seeds) == 20
        assert cfg.graph().diameter == 3

    def test_text_roundtrip(self):
        cfg = small(seeds=(3, 5), Dprime=2, variants=("dmamp", "fdmamp"), snr_db=float("inf"))
        back = ExperimentConfig.from_text(cfg.to_text())
        assert dataclasses.asdict(back) == dataclasses.asdict(cfg)

    def test_parse_comments_ranges_topology(self):
        cfg = ExperimentConfig.from_text("# c\nK=4  # nodes\nseeds=2..4\ntopology=path\ntopology.x=1.5\ntau=\n")
        assert cfg.seeds == (2, 3, 4) and cfg.topology == "path"
        assert cfg.topology_params["x"] == 1.5 and cfg.tau is None

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_text("speed=3")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text("M=many")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            ExperimentConfig.from_text("M=8\nN\n")

    @pytest.mark.parametrize("change", [dict(M=1000, K=7), dict(kappa=0.5), dict(mu=2.0), dict(T=0),
                                        dict(variants=("lmmse",)), dict(moment_mode="guess"),
                                        dict(Dprime=0), dict(seeds=()), dict(snr_db=float("nan")),
                                        dict(K=4, topology_params={"diameter": 9})])
    def test_validation(self, change):
        with pytest.raises(ConfigError):
            dataclasses.replace(ExperimentConfig(), **change).validate()

    def test_centralized_ignores_k(self):
        small(M=63, K=4, variants=("centralized",)).validate()


class TestExperiment:
    def test_all_variants_share_the_instance(self):
        stats, results = run_trial(small(moment_mode="exact"), 0)
        mses = {r.variant: r.mse() for r in results}
        assert set(mses) == {"centralized", "variational", "dmamp", "fdmamp"}
        for v in ("centralized", "dmamp", "fdmamp"):
            assert relative_deviation(mses[v], mses["variational"]) <= 1e-8

    def test_comm_columns_cumulative(self):
        _, results = run_trial(small(variants=("dmamp",)), 0)
        ct = results[0].comm_table
        assert ct[-1] == table_dmamp(6, 128, 4) and np.all(np.diff(ct) == 2 * 129 * 3)
        assert results[0].comm_exact[0] == 2 * 3 + 2 * 3 * (129 + 2)

    def test_centralized_only_runs(self, tmp_path):
        out = tmp_path / "c.csv"
        res = run_experiment(small(M=63, K=4, variants=("centralized",), output=str(out)))
        assert len(res) == 1 and len(res[0].records) == 6
        assert (tmp_path / "c.csv.config").exists()

    def test_byte_identical_reruns(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            run_experiment(small(seeds=(0, 1), output=str(tmp_path / name)))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_golden_csv(self, tmp_path):
        cfg = ExperimentConfig.from_file(GOLDEN / "small.config")
        cfg.output = str(tmp_path / "g.csv")
        run_experiment(cfg)
        want, got = read_results_csv(GOLDEN / "small.csv"), read_results_csv(cfg.output)
        assert [(r["variant"], r["seed"], r["iter"], r["comm_exact"], r["comm_table"]) for r in got] == \
               [(r["variant"], r["seed"], r["iter"], r["comm_exact"], r["comm_table"]) for r in want]
        assert np.allclose([r["mse_linear"] for r in got], [r["mse_linear"] for r in want], rtol=1e-9, atol=0)

    def test_csv_schema(self):
        lines = [ln for ln in (GOLDEN / "small.csv").read_text().splitlines() if not ln.startswith("#")]
        assert tuple(lines[0].split(",")) == CSV_COLUMNS

    def test_db_column(self):
        for r in read_results_csv(GOLDEN / "small.csv"):
            assert r["mse_db"] == pytest.approx(10 * np.log10(r["mse_linear"]), rel=1e-12)

    def test_read_rejects_other_columns(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_results_csv(tmp_path / "x.csv")

    def test_group_roundtrip(self, tmp_path):
        out = tmp_path / "r.csv"
        res = run_experiment(small(seeds=(0, 1), variants=("variational", "dmamp"), output=str(out)))
        back = {(r.variant, r.seed): r for r in group_results(read_results_csv(out))}
        for r in res:
            assert np.array_equal(back[(r.variant, r.seed)].mse(), r.mse())
            assert back[(r.variant, r.seed)].comm_exact == r.comm_exact


class TestSummaries:
    def test_convergence_iteration(self):
        assert convergence_iteration([1.0, 0.5, 0.5 * (1 + 1e-7)]) == 3
        assert convergence_iteration([1.0, 0.5, 0.25]) is None

    def test_trial_summary(self):
        r = TrialResult("x", 0, records([0.1, 1e-3, 5e-4]), [0] * 3, [0] * 3)
        assert r.iters_to_minus30 == 2 and r.final_mse_db == pytest.approx(10 * np.log10(5e-4))

    def test_relative_deviation(self):
        assert relative_deviation([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert relative_deviation([1.1, 2.0], [1.0, 2.0]) == pytest.approx(0.1)
        with pytest.raises(ValueError):
            relative_deviation([1.0], [1.0, 2.0])

    def test_agreement_report_reference(self):
        rs = [TrialResult("centralized", 0, records([1.0, 0.5]), [0, 0], [0, 0]),
              TrialResult("dmamp", 0, records([1.0, 0.55]), [0, 0], [0, 0])]
        (a,) = agreement_report(rs)
        assert a.reference == "centralized" and a.max_rel_dev == pytest.approx(0.1)

    def test_tolerances(self):
        cfg = small(K=8, topology_params={"diameter": 3}, Dprime=2)
        assert agreement_tolerance("centralized", "variational") == 1e-9
        assert agreement_tolerance("dmamp", "variational") == 1e-8
        assert agreement_tolerance("fdmamp", "variational", cfg) is None
        assert agreement_tolerance("fdmamp", "variational", dataclasses.replace(cfg, Dprime=3)) == 1e-8

    def test_mean_curves_are_linear_averages(self):
        rs = [TrialResult("v", s, records(m), [0, 0], [0, 0]) for s, m in enumerate([[1.0, 0.01], [1.0, 0.03]])]
        assert np.allclose(mean_curves(rs)["v"], [1.0, 0.02])
        assert np.allclose(to_db([1.0, 0.01]), [0.0, -20.0])


class TestOamp:
    def test_uninformative_limit(self):
        prior = SignalPrior(0.1)
        sys = make_system(128, 256, 10.0, -60.0, prior, seed=0)
        st = compute_stats(sys, 10, "exact")
        oamp = oamp_fixed_point_oracle(sys, prior, 50)
        mamp = run_variational(sys, prior, st, 10).mse()[-1]
        x_pow = np.mean(np.abs(sys.x_true) ** 2)
        assert oamp.mse_fp == pytest.approx(x_pow, rel=0.02)
        assert mamp == pytest.approx(x_pow, rel=0.02)

    def test_rejects_large_problems(self):
        sys = make_system(2001, 8, 1.0, 30.0, SignalPrior(0.1), seed=0)
        with pytest.raises(ValueError):
            oamp_fixed_point_oracle(sys, SignalPrior(0.1))

    @pytest.mark.derived
    @pytest.mark.parametrize("kappa", [1.0, 10.0])
    def test_fixed_point_agreement(self, kappa):
        prior = SignalPrior(0.1)
        sys = make_system(1000, 2000, kappa, 30.0, prior, seed=0)
        oamp = oamp_fixed_point_oracle(sys, prior)
        mamp = run_variational(sys, prior, compute_stats(sys, 50, "exact"), 50).mse_db()[-1]
        assert oamp.converged and abs(mamp - oamp.mse_fp_db) <= 0.5


class TestLambdaReport:
    @pytest.mark.derived
    @pytest.mark.parametrize("kappa,tol", [(1.0, 0.5), (10.0, 1.0)])
    def test_final_gap(self, kappa, tol):
        rep = approx_vs_exact_lambda_report(ExperimentConfig(kappa=kappa, seeds=(0, 1, 2)))
        assert rep.final_gap_db <= tol

    def test_exact_moments_injected(self, monkeypatch):
        orig = harness.compute_stats
        monkeypatch.setattr(harness, "compute_stats", lambda sys, T, mode, *a, **k: orig(sys, T, "exact", a[0]))
        rep = approx_vs_exact_lambda_report(small(seeds=(0,), T=8))
        assert np.max(rep.gap_db) == 0.0 and rep.upper_bound_ok
