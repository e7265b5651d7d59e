import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dckf.errors import ConfigError, DegenerateCovariance
from dckf.harness import (
    DESENSITIZED, FILTER_NAMES, IMPERFECT, PERFECT, FilterArtifacts, ScenarioConfig, _aggregate,
    filter_configs, nme_statistic, run_filter_batch, run_scenario, sample_parameters, simulate_runs,
    summarize, summary_value,
)
from dckf.models import get_model
from dckf.scenarios import builtin_scenarios


def small(name="helicopter", runs=6, **kw):
    cfg = builtin_scenarios()[name]
    cfg.mc_runs = runs
    if name == "falling-body":
        cfg.duration = 5.0
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class TestScenarioConfig:
    def test_builtins_valid(self):
        for cfg in builtin_scenarios().values():
            cfg.validate()

    def test_roundtrip(self):
        cfg = builtin_scenarios()["helicopter"]
        d = cfg.to_dict()
        assert d["spec_version"] == 1
        assert ScenarioConfig.from_dict(d) == cfg

    @pytest.mark.parametrize("key,value", [
        ("dt", -0.1), ("dt", 0.07), ("duration", 0.0), ("mc_runs", 0), ("rng_seed", -1),
        ("c_ref", [1.0]), ("P0", [[1.0]]), ("R", np.zeros((4, 4)).tolist()), ("filters", ["EKF"]),
        ("param_low", [0.0, 1.0]), ("jacobian_mode", "symbolic"), ("covariance_jitter", -1.0),
        ("model", "pendulum"), ("Q", (-np.eye(4)).tolist()),
    ])
    def test_invalid_names_key(self, key, value):
        cfg = builtin_scenarios()["helicopter"]
        setattr(cfg, key, value)
        with pytest.raises(ConfigError, match=f"^{key}:"):
            cfg.validate()

    def test_unknown_key(self):
        d = builtin_scenarios()["helicopter"].to_dict()
        d["colour"] = "red"
        with pytest.raises(ConfigError, match="^colour:"):
            ScenarioConfig.from_dict(d)

    def test_missing_key(self):
        d = builtin_scenarios()["helicopter"].to_dict()
        del d["R"]
        with pytest.raises(ConfigError, match="^R:"):
            ScenarioConfig.from_dict(d)

    def test_schema_version(self):
        d = builtin_scenarios()["helicopter"].to_dict()
        d["spec_version"] = 99
        with pytest.raises(ConfigError, match="spec_version"):
            ScenarioConfig.from_dict(d)

    def test_steps(self):
        assert builtin_scenarios()["falling-body"].steps == 600
        assert builtin_scenarios()["helicopter"].steps == 80


class TestBuiltins:
    def test_exactly_two(self):
        assert sorted(builtin_scenarios()) == ["falling-body", "helicopter"]

    def test_falling_body_values(self):
        cfg = builtin_scenarios()["falling-body"]
        assert cfg.x0_true == [3e5, -2e4, 1e-3]
        assert cfg.x0_hat == [3e5, -2e4, 3e-5]
        assert np.array_equal(np.diag(cfg.P0), [1e6, 4e6, 1e-4])
        assert cfg.c_ref == [2e4] and cfg.param_low == [1.5e4] and cfg.param_high == [2.5e4]
        assert cfg.R == [[1e4]] and not np.any(cfg.Q)
        assert np.array_equal(np.diag(cfg.weights[0]), [3e4, 6e3, 1e5])
        assert (cfg.dt, cfg.duration, cfg.mc_runs) == (0.1, 60.0, 200)

    def test_helicopter_values(self):
        cfg = builtin_scenarios()["helicopter"]
        assert cfg.x0_true == cfg.x0_hat == [0.7929, -0.0466, -0.1871, 0.5780]
        assert np.array_equal(cfg.P0, np.eye(4))
        assert cfg.c_ref == [-0.1, 0.1]
        assert cfg.param_low == [-0.15, 0.05] and cfg.param_high == [-0.05, 0.15]
        for W in cfg.weights:
            assert np.array_equal(np.diag(W), [3e-3, 2e-3, 1e-2, 2e-2])
        assert (cfg.dt, cfg.duration, cfg.mc_runs) == (0.05, 4.0, 200)
        assert "c2_distribution" in cfg.assumptions


class TestSimulation:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_parameters_within_bounds(self, seed):
        c = sample_parameters([-0.15, 0.05], [-0.05, 0.15], np.random.default_rng(seed), size=50)
        assert c.shape == (50, 2)
        assert np.all(c[:, 0] >= -0.15) and np.all(c[:, 0] < -0.05)
        assert np.all(c[:, 1] >= 0.05) and np.all(c[:, 1] < 0.15)

    def test_runs_independent_of_batch(self):
        cfg = small(runs=8)
        model = get_model(cfg.model)
        c_all, x_all, z_all = simulate_runs(cfg, model, list(range(8)))
        c5, x5, z5 = simulate_runs(cfg, model, [5])
        assert np.array_equal(c_all[5], c5[0])
        assert np.array_equal(z_all[5], z5[0])
        assert np.array_equal(x_all[5], x5[0])

    def test_shapes(self):
        cfg = small(runs=3)
        c, x, z = simulate_runs(cfg, get_model(cfg.model), [0, 1, 2])
        assert c.shape == (3, 2) and x.shape == (3, 80, 4) and z.shape == (3, 80, 4)

    def test_perfect_filter_gets_true_parameters(self):
        cfg = small(runs=3)
        model = get_model(cfg.model)
        c, _, _ = simulate_runs(cfg, model, [0, 1, 2])
        fc = filter_configs(cfg, model, c)
        assert np.array_equal(fc[PERFECT].c_ref, c)
        assert np.array_equal(fc[IMPERFECT].c_ref, cfg.c_ref)
        assert fc[DESENSITIZED].mode == "DCKF"


class TestNME:
    def test_consistent_errors_pass(self):
        rng = np.random.default_rng(3)
        M, N, n = 400, 50, 2
        P = np.broadcast_to(np.diag([4.0, 0.25]), (M, N, n, n))
        e = rng.standard_normal((M, N, n)) * np.array([2.0, 0.5])
        stat = nme_statistic(e, P)
        assert stat.shape == (N, n)
        assert np.mean(stat < 1.96) >= 0.9

    def test_bias_detected(self):
        M = 100
        e = np.full((M, 5, 1), 0.1)
        P = np.full((M, 5, 1), 1e-4)
        stat = nme_statistic(e, P)
        assert np.allclose(stat, np.sqrt(M) * 0.1 / 1e-2)
        assert np.all(stat > 1.96)

    def test_needs_two_runs(self):
        with pytest.raises(ValueError):
            nme_statistic(np.zeros((1, 3, 2)), np.ones((1, 3, 2)))

    def test_degenerate(self):
        with pytest.raises(DegenerateCovariance):
            nme_statistic(np.zeros((3, 2, 1)), np.zeros((3, 2, 1)))


class TestAggregation:
    def _artifacts(self, rng, M=5, N=4, n=2, ell=1):
        return FilterArtifacts(
            errors=rng.standard_normal((M, N, n)), P_diag=rng.uniform(0.5, 2, (M, N, n)),
            cost=rng.uniform(1, 2, (M, N)), gain_norm=rng.uniform(0, 1, (M, N)),
            sens=rng.standard_normal((M, N, ell, n)), diverged=np.zeros(M, bool),
        )

    def test_rmse(self, rng):
        fa = _aggregate(self._artifacts(rng))
        assert np.allclose(fa.rmse, np.sqrt(np.mean(fa.errors**2, axis=0)), rtol=1e-14)
        assert np.all(fa.rmse >= 0)
        assert np.allclose(fa.nme, nme_statistic(fa.errors, fa.P_diag), rtol=1e-13)

    def test_diverged_runs_excluded(self, rng):
        fa = self._artifacts(rng)
        fa.diverged[1] = True
        fa.errors[1] = np.nan
        agg = _aggregate(fa)
        keep = [0, 2, 3, 4]
        assert np.all(np.isfinite(agg.rmse))
        assert np.allclose(agg.rmse, np.sqrt(np.mean(fa.errors[keep] ** 2, axis=0)), rtol=1e-14)
        assert np.allclose(agg.mean_cost, fa.cost[keep].mean(axis=0), rtol=1e-14)

    def test_divergent_member_is_dropped(self):
        cfg = small(runs=4)
        model = get_model(cfg.model)
        c, truth, z = simulate_runs(cfg, model, range(4))
        z[2, 10] = np.nan
        fcfg = filter_configs(cfg, model, c)[DESENSITIZED]
        weights = [np.asarray(W) for W in cfg.weights]
        est, P_diag, cost, gain, sens, diverged = run_filter_batch(DESENSITIZED, fcfg, cfg, z, weights)
        assert list(diverged) == [False, False, True, False]
        assert np.all(np.isnan(est[2, 10:])) and np.all(np.isfinite(est[[0, 1, 3]]))


class TestRunScenario:
    def test_shapes_and_summary(self):
        cfg = small(runs=4)
        art = run_scenario(cfg)
        assert set(art.filters) == set(FILTER_NAMES)
        for fa in art.filters.values():
            assert fa.errors.shape == (4, 80, 4)
            assert fa.rmse.shape == (80, 4)
            assert fa.mean_abs_sens.shape == (80, 2, 4)
            assert fa.nme.shape == (80, 4)
        rows = summarize(art)
        assert summary_value(rows, DESENSITIZED, "x1", "rmse") > 0
        assert summary_value(rows, PERFECT, "all", "diverged_runs") == 0
        with pytest.raises(KeyError):
            summary_value(rows, DESENSITIZED, "x9", "rmse")

    def test_metadata(self):
        art = run_scenario(small(runs=2))
        md = art.metadata
        assert md["seed"] == builtin_scenarios()["helicopter"].rng_seed
        assert md["config"]["spec_version"] == 1
        assert md["defaults"]["assumptions"]["c2_distribution"]
        assert md["diverged_runs"] == {name: 0 for name in FILTER_NAMES}

    def test_independent_of_worker_count(self):
        cfg = small(runs=60)
        a = run_scenario(cfg, jobs=1)
        b = run_scenario(cfg, jobs=2)
        for name in FILTER_NAMES:
            assert np.array_equal(a.filters[name].rmse, b.filters[name].rmse)
            assert np.array_equal(a.filters[name].nme, b.filters[name].nme)

    def test_subset_of_filters(self):
        art = run_scenario(small(runs=2, filters=[DESENSITIZED]))
        assert list(art.filters) == [DESENSITIZED]

    def test_seed_changes_results(self):
        a = run_scenario(small(runs=3))
        b = run_scenario(small(runs=3, rng_seed=7))
        assert not np.array_equal(a.c_true, b.c_true)
