import csv
import json
import math

import numpy as np
import pytest

from krylovgp.diagnostics import mse
from krylovgp.experiments import (CONFIG_SCHEMA, ConfigError, ExperimentConfig, MethodSpec,
                                  TimingReport, cggp_steps, fit_method, generate_data, loglog_slope,
                                  resolve_threads, run_experiment, scenario_kernel, sqexp_bandwidth,
                                  timing_harness)
from krylovgp.kernels import kernel_matrix, matern
from krylovgp.posterior import exact_posterior, predict
from krylovgp.rng import stream


class TestRng:
    def test_reproducible(self):
        a = stream("MaternStudy", 10, 3, "design").standard_normal(5)
        b = stream("MaternStudy", 10, 3, "design").standard_normal(5)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("other", [("SqExpStudy", 10, 3, "design"), ("MaternStudy", 11, 3, "design"),
                                       ("MaternStudy", 10, 4, "design"), ("MaternStudy", 10, 3, "noise")])
    def test_streams_differ(self, other):
        a = stream("MaternStudy", 10, 3, "design").standard_normal(5)
        assert not np.array_equal(a, stream(*other).standard_normal(5))


class TestGenerateData:
    def test_deterministic(self):
        a, b = generate_data("MaternStudy", 50, 1), generate_data("MaternStudy", 50, 1)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.Y, b.Y)

    def test_truth_values(self):
        assert generate_data("MaternStudy", 3, 0).truth(np.array([[0.4]]))[0] == pytest.approx(-0.2 ** 0.6, abs=1e-12)
        assert generate_data("SqExpStudy", 3, 0).truth(np.array([[1.5]]))[0] == pytest.approx(2.5 ** 0.8, abs=1e-12)
        assert -0.2 ** 0.6 == pytest.approx(-0.38073, abs=1e-5)
        assert 2.5 ** 0.8 == pytest.approx(2.081383, abs=1e-6)

    def test_designs(self):
        assert np.all((generate_data("MaternStudy", 200, 0).X >= 0) & (generate_data("MaternStudy", 200, 0).X <= 1))
        assert generate_data("SqExpStudy", 200, 0).X.min() < 0
        d = generate_data("Custom", 30, 0, design="normal", truth="sine", sigma=0.1, dimension=2)
        assert d.X.shape == (30, 2) and d.sigma == 0.1

    def test_noise_level(self):
        d = generate_data("MaternStudy", 4000, 0)
        resid = d.Y - d.truth(d.X)
        assert np.std(resid) == pytest.approx(0.2, rel=0.05)

    @pytest.mark.parametrize("kwargs", [dict(scenario="Nope"), dict(scenario="Custom", design="grid"),
                                        dict(scenario="Custom", truth="cubic"), dict(scenario="MaternStudy", n=0)])
    def test_invalid(self, kwargs):
        args = dict(scenario="MaternStudy", n=5, seed=0)
        args.update(kwargs)
        with pytest.raises(ConfigError):
            generate_data(args.pop("scenario"), args.pop("n"), args.pop("seed"), **args)

    def test_scenario_kernels(self):
        assert scenario_kernel("MaternStudy", 10).alpha == 0.6
        assert scenario_kernel("SqExpStudy", 5000).bandwidth == pytest.approx(4 * 5000 ** (-1 / 2.6))
        assert sqexp_bandwidth(1) == 4.0
        with pytest.raises(ConfigError):
            scenario_kernel("Custom", 10)


class TestMethodSpec:
    @pytest.mark.parametrize("text, expected", [
        ("Exact", MethodSpec("Exact")),
        ("CGGP(20)", MethodSpec("CGGP", 20)),
        ("EVGP( 4 )", MethodSpec("EVGP", 4)),
        ("LGP(5, 12, Z)", MethodSpec("LGP", 5, 12, "Z")),
        ("LGP(5,,Y)", MethodSpec("LGP", 5, None, "Y")),
        ({"method": "LGP", "m": 3, "krylov_dim": 7}, MethodSpec("LGP", 3, 7)),
    ])
    def test_parse(self, text, expected):
        assert MethodSpec.parse(text) == expected

    @pytest.mark.parametrize("text", ["Exact(3)", "CGGP", "GP(3)", "CGGP(x)", "LGP(3, 4, W)", "CGGP(-1)",
                                      {"m": 3}, 12])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            MethodSpec.parse(text)

    def test_labels(self):
        assert MethodSpec("CGGP", 20).label == "CGGP(20)"
        assert MethodSpec("CGGP", 20).slug == "cggp_20"
        assert MethodSpec("Exact").slug == "exact"
        assert MethodSpec.parse(MethodSpec("LGP", 2).to_dict()) == MethodSpec("LGP", 2)


class TestConfig:
    def base(self, **kw):
        obj = {"scenario": "MaternStudy", "n": 40, "methods": ["Exact", "CGGP(5)"], "seeds": [0, 1]}
        obj.update(kw)
        return obj

    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict(self.base(grid={"points": 50}, level=0.9))
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_custom_round_trip(self):
        cfg = ExperimentConfig.from_dict(self.base(scenario="Custom", kernel={"kind": "sqexp", "bandwidth": 0.3},
                                                   design="normal", truth="zero"))
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.grid()[0, 0] == -3.0

    @pytest.mark.parametrize("change", [
        {"scenario": "Other"}, {"n": 0}, {"n": 2.5}, {"n": True}, {"methods": []}, {"methods": "Exact"},
        {"methods": ["CGGP(50)"]}, {"methods": ["CGGP(5)", "CGGP(5)"]}, {"seeds": []}, {"seeds": ["a"]},
        {"level": 1.5}, {"grid": {"points": 0}}, {"grid": [1]}, {"cg_variant": "fast"}, {"bogus": 1},
        {"scenario": "Custom"}, {"scenario": "Custom", "kernel": {"kind": "matern", "alpha": -1}},
        {"methods": ["LGP(5, 3)"]},
    ])
    def test_invalid(self, change):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(self.base(**change))

    def test_missing_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"scenario": "MaternStudy", "n": 5})

    def test_json_and_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "missing.json")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json("[1, 2]")

    def test_quick(self):
        cfg = ExperimentConfig.from_dict(self.base(n=3000, methods=["Exact", "CGGP(80)", "EVGP(1000)"]))
        q = cfg.quick()
        assert q.n == 600
        assert [m.label for m in q.methods] == ["Exact", "CGGP(80)", "EVGP(600)"]
        assert ExperimentConfig.from_dict(self.base(scenario="InconsistencyDemo")).quick().n == 40

    def test_schema_mentions_every_key(self):
        for key in ("scenario", "methods", "seeds", "grid", "kl", "cg_tol", "cg_variant", "timings"):
            assert key in CONFIG_SCHEMA


class TestFitMethod:
    def setup_method(self):
        self.data = generate_data("MaternStudy", 60, 2)
        self.spec = matern(0.6)
        self.K = kernel_matrix(self.spec, self.data.X)

    @pytest.mark.parametrize("label", ["EVGP(60)", "LGP(60)"])
    def test_full_rank_matches_exact(self, label):
        grid = np.linspace(0, 1, 30)
        post, _ = fit_method(self.data, self.spec, MethodSpec.parse(label), self.K)
        a, b = predict(post, grid), predict(exact_posterior(self.data, self.spec, self.K), grid)
        np.testing.assert_allclose(a[0], b[0], atol=1e-5)
        np.testing.assert_allclose(a[1], b[1], atol=1e-5)

    def test_full_rank_cggp_on_small_instance(self):
        data = generate_data("MaternStudy", 20, 2)
        grid = np.linspace(0, 1, 30)
        post, steps = fit_method(data, self.spec, MethodSpec("CGGP", 20), cg_tol=0.0,
                                 cg_variant="reorthogonalized")
        assert steps == 20
        a, b = predict(post, grid), predict(exact_posterior(data, self.spec), grid)
        np.testing.assert_allclose(a[0], b[0], atol=1e-8)
        np.testing.assert_allclose(a[1], b[1], atol=1e-8)

    def test_cggp_stops_when_krylov_space_is_exhausted(self):
        # the residual reaches rounding level long before n steps; the run stops
        # there with a converged mean and a conservative variance
        grid = np.linspace(0, 1, 30)
        post, steps = fit_method(self.data, self.spec, MethodSpec("CGGP", 60), self.K, cg_tol=0.0,
                                 cg_variant="reorthogonalized")
        exact = exact_posterior(self.data, self.spec, self.K)
        assert steps < 60
        np.testing.assert_allclose(post.w, exact.w, rtol=1e-8)
        assert np.all(predict(post, grid)[1] >= predict(exact, grid)[1] - 1e-8)

    @pytest.mark.parametrize("label", ["EVGP(0)", "LGP(0)", "CGGP(0)"])
    def test_zero_actions_is_prior(self, label):
        post, steps = fit_method(self.data, self.spec, MethodSpec.parse(label), self.K)
        assert steps == 0
        np.testing.assert_array_equal(post.w, np.zeros(60))

    def test_lgp_cggp_identity(self):
        data = generate_data("MaternStudy", 10, 0)
        grid = np.linspace(0, 1, 200)
        lgp, kd = fit_method(data, self.spec, MethodSpec("LGP", 5, 5), cg_variant="reorthogonalized")
        cggp, _ = fit_method(data, self.spec, MethodSpec("CGGP", 5), cg_variant="reorthogonalized")
        assert kd == 5
        a, b = predict(lgp, grid), predict(cggp, grid)
        np.testing.assert_allclose(a[0], b[0], atol=1e-8)
        np.testing.assert_allclose(a[1], b[1], atol=1e-8)

    def test_cg_variants_share_precision(self):
        a, _ = fit_method(self.data, self.spec, MethodSpec("CGGP", 6), self.K, cg_variant="standard")
        b, _ = fit_method(self.data, self.spec, MethodSpec("CGGP", 6), self.K, cg_variant="reorthogonalized")
        np.testing.assert_array_equal(a.precision.dense(), b.precision.dense())
        np.testing.assert_allclose(a.w, b.w, rtol=1e-6)

    def test_lgp_random_start_uses_rng(self):
        m = MethodSpec("LGP", 4, 8, "Z")
        a, _ = fit_method(self.data, self.spec, m, self.K, v0_rng=np.random.default_rng(1))
        b, _ = fit_method(self.data, self.spec, m, self.K, v0_rng=np.random.default_rng(1))
        np.testing.assert_array_equal(a.w, b.w)


def small_config(tmp_path, **kw):
    obj = {"scenario": "MaternStudy", "n": 80, "methods": ["Exact", "EVGP(10)", "LGP(5)", "CGGP(10)"],
           "seeds": [0, 1], "grid": {"points": 25}, "timings": False, "output_dir": str(tmp_path)}
    obj.update(kw)
    return ExperimentConfig.from_dict(obj)


class TestRunExperiment:
    def test_files_and_schema(self, tmp_path):
        rep = run_experiment(small_config(tmp_path))
        assert set(rep.files) == {"summary.csv", "summary.json"} | {
            f"pred_{s}_seed{k}.csv" for s in ("exact", "evgp_10", "lgp_5", "cggp_10") for k in (0, 1)}
        rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
        assert list(rows[0]) == ["method", "m", "seed", "mse", "kl", "mean_bandwidth", "wall_ms"]
        assert len(rows) == 8
        assert all(r["wall_ms"] == "" for r in rows)
        header = next(csv.reader(open(tmp_path / "pred_cggp_10_seed1.csv")))
        assert header == ["x", "mean", "var", "lo", "hi"]
        js = json.loads((tmp_path / "summary.json").read_text())
        assert js["methods"]["CGGP(10)"]["cells"] == 2

    def test_byte_identical_reruns(self, tmp_path):
        names = ("summary.csv", "summary.json", "pred_lgp_5_seed0.csv", "pred_cggp_10_seed1.csv")
        run_experiment(small_config(tmp_path), threads=1)
        first = {name: (tmp_path / name).read_bytes() for name in names}
        run_experiment(small_config(tmp_path), threads=1)
        for name in names:
            assert (tmp_path / name).read_bytes() == first[name]

    def test_thread_count_does_not_change_results(self, tmp_path):
        one = run_experiment(small_config(tmp_path, output_dir=None), threads=1)
        four = run_experiment(small_config(tmp_path, output_dir=None), threads=4)
        for c1, c4 in zip(one.cells, four.cells):
            assert (c1.method, c1.m, c1.seed) == (c4.method, c4.m, c4.seed)
            assert c1.mse == pytest.approx(c4.mse, rel=1e-9)

    def test_exact_mse_independent_of_other_methods(self, tmp_path):
        alone = run_experiment(small_config(tmp_path, methods=["Exact"], output_dir=None))
        mixed = run_experiment(small_config(tmp_path, output_dir=None))
        assert [c.mse for c in alone.cells] == [c.mse for c in mixed.cells if c.method == "Exact"]

    def test_exact_mse_matches_direct(self, tmp_path):
        rep = run_experiment(small_config(tmp_path, methods=["Exact"], seeds=[3], output_dir=None))
        d = generate_data("MaternStudy", 80, 3)
        post = exact_posterior(d, matern(0.6))
        assert rep.cells[0].mse == pytest.approx(mse(post.design_mean(), d.truth(d.X)), rel=1e-12)

    def test_kl_recorded_and_ordered(self, tmp_path):
        rep = run_experiment(small_config(tmp_path, methods=["Exact", "EVGP(2)", "EVGP(20)"], output_dir=None))
        agg = rep.aggregates
        assert agg["Exact"]["kl_mean"] == 0.0
        assert agg["EVGP(2)"]["kl_mean"] > agg["EVGP(20)"]["kl_mean"] > 0.0

    def test_kl_skipped_above_cap(self, tmp_path):
        rep = run_experiment(small_config(tmp_path, kl_max_n=50, output_dir=None))
        assert all(math.isnan(c.kl) for c in rep.cells)

    def test_failing_cell_is_recorded(self, tmp_path, monkeypatch):
        import krylovgp.experiments as ex

        real = ex.fit_method

        def flaky(data, spec, method, *a, **k):
            if method.method == "LGP":
                raise np.linalg.LinAlgError("synthetic failure")
            return real(data, spec, method, *a, **k)

        monkeypatch.setattr(ex, "fit_method", flaky)
        rep = run_experiment(small_config(tmp_path))
        assert len(rep.cells) == 8
        assert len(rep.errors) == 2 and all("synthetic" in c.error for c in rep.errors)
        assert rep.aggregates["LGP(5)"]["failed"] == 2
        rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
        assert sum(r["method"] == "LGP" and r["mse"] == "" for r in rows) == 2

    def test_timings_recorded_when_enabled(self, tmp_path):
        rep = run_experiment(small_config(tmp_path, timings=True, methods=["Exact"]))
        assert all(c.wall_ms > 0 for c in rep.cells)
        rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
        assert all(float(r["wall_ms"]) > 0 for r in rows)


class TestThreads:
    def test_resolution(self, monkeypatch):
        monkeypatch.delenv("ITERGP_THREADS", raising=False)
        assert resolve_threads(None) == 1
        assert resolve_threads(3) == 3
        monkeypatch.setenv("ITERGP_THREADS", "2")
        assert resolve_threads(None) == 2
        monkeypatch.setenv("ITERGP_THREADS", "two")
        with pytest.raises(ConfigError):
            resolve_threads(None)
        with pytest.raises(ConfigError):
            resolve_threads(0)


class TestTiming:
    def test_loglog_slope(self):
        n = np.array([100, 200, 400, 800])
        b, a = loglog_slope(n, 3e-9 * n ** 3.0)
        assert b == pytest.approx(3.0, abs=1e-12)
        assert a == pytest.approx(math.log(3e-9), abs=1e-9)

    def test_cggp_steps(self):
        assert cggp_steps(1000) == math.ceil(2 * 1000 ** (1 / 2.2))
        assert cggp_steps(8000) == 119

    def test_small_harness(self, tmp_path):
        rep = timing_harness([100, 200, 400], repetitions=2)
        assert isinstance(rep, TimingReport)
        assert set(rep.medians) == {"Exact", "CGGP"}
        assert rep.m_values["CGGP"] == [cggp_steps(n) for n in (100, 200, 400)]
        rep.write_csv(tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["method", "n", "m", "median_s", "under_resolved"]
        assert rows[-1][0] == "CGGP:slope"

    def test_timed_kernels_compute_the_posterior(self):
        from krylovgp.experiments import _time_cggp, _time_exact
        d = generate_data("TimingStudy", 150, 0)
        K = kernel_matrix(matern(0.6), d.X)
        _, w, var = _time_exact(K, d.Y, d.sigma2)
        post = exact_posterior(d, matern(0.6), K)
        np.testing.assert_allclose(w, post.w, rtol=1e-10)
        np.testing.assert_allclose(var, np.diag(post.design_cov()), atol=1e-10)
        _, wc, varc = _time_cggp(K, d.Y, d.sigma2, 25)
        cggp, _ = fit_method(d, matern(0.6), MethodSpec("CGGP", 25), K, cg_tol=0.0, cg_variant="reorthogonalized")
        np.testing.assert_allclose(wc, cggp.w, rtol=1e-10)
        np.testing.assert_allclose(varc, np.diag(cggp.design_cov()), atol=1e-10)

    def test_rejects_bad_input(self):
        with pytest.raises(ConfigError):
            timing_harness([200, 100])
        with pytest.raises(ConfigError):
            timing_harness([100], methods=["EVGP"])
