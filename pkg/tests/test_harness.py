import json
import os

import numpy as np
import pytest

from noisecov.analysis import participation_ratio
from noisecov.harness import (
    Axis,
    ConditionGrid,
    Dataset,
    SyntheticParams,
    build_spec,
    cv_select,
    generate_synthetic,
    load_config,
    load_posterior,
    read_dataset,
    read_moments,
    run_experiment,
    save_posterior,
    split,
    write_dataset,
    write_moments,
)
from noisecov.harness.bundle import write_elbo_trace
from noisecov.harness.data import read_matrix_csv, write_matrix_csv
from noisecov.harness.experiment import gaussian_heldout_loglik
from noisecov.inference import FitConfig, fit

TWO_PI = 2 * np.pi
QUICK = FitConfig(iterations=30, step=0.01, family="delta")


def small_data(seed=0, **kw):
    params = dict(N=4, C=6, K=10, seed=seed)
    params.update(kw)
    return generate_synthetic(**params)


def file_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestConditionGrid:
    """Coordinates and axis topology."""

    def test_periodic_wrap(self):
        g = ConditionGrid([Axis("a", "periodic", TWO_PI)], [-0.5, TWO_PI, 7.0, -1e-18])
        np.testing.assert_allclose(g.coords[:, 0], [TWO_PI - 0.5, 0.0, 7.0 - TWO_PI, 0.0])
        assert np.all((g.coords >= 0) & (g.coords < TWO_PI))

    def test_linear_untouched(self):
        g = ConditionGrid([Axis("r")], [[-3.0], [10.0]])
        np.testing.assert_array_equal(g.coords, [[-3.0], [10.0]])

    def test_periodic_1d(self):
        g = ConditionGrid.periodic_1d(4)
        np.testing.assert_allclose(g.coords[:, 0], [0, np.pi / 2, np.pi, 3 * np.pi / 2])

    def test_round_trip(self):
        g = ConditionGrid([Axis("a", "periodic", 3.0), Axis("b")], [[1.0, 2.0], [4.0, -1.0]])
        h = ConditionGrid.from_dict(json.loads(json.dumps(g.to_dict())))
        assert h.axes == g.axes
        np.testing.assert_array_equal(h.coords, g.coords)

    def test_rejections(self):
        with pytest.raises(ValueError):
            Axis("a", "periodic")
        with pytest.raises(ValueError):
            Axis("a", "circular", 1.0)
        with pytest.raises(ValueError):
            ConditionGrid([Axis("a")], np.zeros((3, 2)))


class TestDataset:
    """Invariants of the trial container."""

    def test_ragged_counts(self):
        ds = Dataset(ConditionGrid.periodic_1d(2), [np.zeros((3, 2)), np.ones((5, 2))])
        assert (ds.N, ds.C) == (2, 2)
        np.testing.assert_array_equal(ds.counts, [3, 5])

    def test_rejections(self):
        g = ConditionGrid.periodic_1d(2)
        with pytest.raises(ValueError):
            Dataset(g, [np.zeros((3, 2))])
        with pytest.raises(ValueError):
            Dataset(g, [np.zeros((3, 2)), np.zeros((3, 3))])
        with pytest.raises(ValueError):
            Dataset(g, [np.zeros((3, 2)), np.zeros((0, 2))])

    def test_take_trials_drops_empty(self):
        ds = small_data()
        idx = [[0, 1]] + [[]] * 4 + [[2]]
        sub = ds.take_trials(idx)
        assert sub.C == 2
        np.testing.assert_array_equal(sub.trials[1], ds.trials[5][[2]])
        np.testing.assert_array_equal(sub.grid.coords, ds.grid.coords[[0, 5]])
        np.testing.assert_array_equal(sub.truth.Sigma, ds.truth.Sigma[[0, 5]])


class TestSynthetic:
    """Benchmark generator."""

    def test_default_shape(self):
        p = SyntheticParams()
        assert (p.N, p.C, p.K) == (100, 30, 10)
        ds = generate_synthetic(N=8)
        assert ds.C == 30 and np.all(ds.counts == 10)

    def test_structured_scale_spectrum(self):
        from noisecov.harness.synthetic import scale_factor_for

        L = scale_factor_for(SyntheticParams(N=12), np.random.default_rng(0))
        s = np.linalg.svd(L, compute_uv=False)
        assert s[0] / s[-1] == pytest.approx(np.sqrt(1e5), rel=1e-8)
        ev = np.linalg.eigvalsh(L @ L.T)
        np.testing.assert_allclose(np.sort(ev), np.logspace(0, -5, 12)[::-1], rtol=1e-8, atol=1e-14)

    def test_seed_determinism(self):
        a, b = small_data(3), small_data(3)
        for x, y in zip(a.trials, b.trials):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.truth.Sigma, b.truth.Sigma)
        assert not np.array_equal(small_data(4).trials[0], a.trials[0])

    def test_truth_spd(self):
        ds = small_data(1, N=6)
        for S in ds.truth.Sigma:
            np.testing.assert_allclose(S, S.T, atol=1e-14)
            assert np.linalg.eigvalsh(S)[0] > 0

    def test_low_participation_ratio(self):
        ds = generate_synthetic(N=50, C=5, K=2, seed=0)
        assert all(participation_ratio(S) <= 25 for S in ds.truth.Sigma)

    def test_poisson_counts(self):
        ds = small_data(observation="poisson")
        Y = np.vstack(ds.trials)
        assert ds.observation == "poisson"
        np.testing.assert_array_equal(Y, np.round(Y))
        assert Y.min() >= 0

    def test_mean_scale(self):
        a = small_data(2)
        b = small_data(2, mean_scale=0.5)
        # same latent draws, so the mean field scales exactly
        np.testing.assert_allclose(b.truth.mu, 0.5 * a.truth.mu, rtol=1e-6, atol=1e-9)
        with pytest.raises(ValueError):
            SyntheticParams(mean_scale=0.0)


class TestSplit:
    """Trial and condition splits."""

    def test_fraction_counts(self):
        ds = small_data(K=20)
        fold = split(ds, fractions=(0.6, 0.25, 0.15), seed=0).folds[0]
        for c in range(ds.C):
            assert (len(fold.train[c]), len(fold.val[c]), len(fold.test[c])) == (12, 5, 3)

    def test_exact_partition(self):
        ds = Dataset(ConditionGrid.periodic_1d(3), [np.zeros((k, 2)) for k in (7, 11, 13)])
        fold = split(ds, fractions=(0.5, 0.3, 0.2), seed=5).folds[0]
        for c, K in enumerate(ds.counts):
            allidx = np.concatenate([fold.train[c], fold.val[c], fold.test[c]])
            np.testing.assert_array_equal(np.sort(allidx), np.arange(K))

    def test_deterministic(self):
        ds = small_data()
        assert split(ds, seed=9).to_dict() == split(ds, seed=9).to_dict()
        assert split(ds, seed=9).to_dict() != split(ds, seed=10).to_dict()

    def test_holdout(self):
        ds = generate_synthetic(N=3, C=40, K=2, seed=0)
        idx = np.random.default_rng(0).choice(40, 8, replace=False)
        plan = split(ds, "holdout_conditions", indices=idx)
        assert plan.part(ds, "train").C == 32
        assert plan.part(ds, "test").C == 8
        assert set(plan.train_conditions) | set(plan.test_conditions) == set(range(40))
        with pytest.raises(ValueError):
            plan.part(ds, "val")

    def test_rejections(self):
        ds = small_data()
        with pytest.raises(ValueError):
            split(ds, fractions=(0.5, 0.3, 0.1))
        with pytest.raises(ValueError):
            split(ds, fractions=(0.05, 0.5, 0.45))
        with pytest.raises(ValueError):
            split(ds, "holdout_conditions")
        with pytest.raises(ValueError):
            split(ds, "holdout_conditions", indices=[6])
        with pytest.raises(ValueError):
            split(ds, "holdout_conditions", indices=range(6))
        with pytest.raises(ValueError):
            split(ds, "bootstrap")


class TestFiles:
    """CSV and JSON round trips."""

    def test_matrix_csv_exact(self, tmp_path):
        M = np.random.default_rng(0).normal(size=(4, 3)) * 1e-7
        write_matrix_csv(tmp_path / "m.csv", M, ["a", "b", "c"])
        np.testing.assert_array_equal(read_matrix_csv(tmp_path / "m.csv"), M)

    def test_dataset_round_trip(self, tmp_path):
        ds = small_data(1)
        write_dataset(ds, tmp_path)
        back = read_dataset(tmp_path)
        assert back.observation == ds.observation
        np.testing.assert_array_equal(back.grid.coords, ds.grid.coords)
        for x, y in zip(back.trials, ds.trials):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(back.truth.Sigma, ds.truth.Sigma)

    def test_checksum(self, tmp_path):
        write_dataset(small_data(), tmp_path)
        with open(tmp_path / "trials_002.csv", "a") as fh:
            fh.write("0,0,0,0\n")
        with pytest.raises(ValueError):
            read_dataset(tmp_path)
        assert read_dataset(tmp_path, verify=False).counts[2] == 11

    def test_moments_round_trip(self, tmp_path):
        ds = small_data()
        write_moments(tmp_path, ds.truth)
        back = read_moments(tmp_path)
        np.testing.assert_array_equal(back.mu, ds.truth.mu)
        np.testing.assert_array_equal(back.Sigma, ds.truth.Sigma)

    def test_posterior_bundle(self, tmp_path):
        ds = small_data()
        spec = build_spec(ds.grid, ds.N, P=1, use_diag=True)
        post = fit(spec, ds.grid.coords, ds.trials, FitConfig(iterations=5, step=0.01))
        save_posterior(post, tmp_path / "a.npz")
        back = load_posterior(tmp_path / "a.npz")
        assert back.spec == post.spec
        assert back.config == post.config
        for k in post.q.loc:
            np.testing.assert_array_equal(back.q.loc[k], post.q.loc[k])
            np.testing.assert_array_equal(back.q.log_scale[k], post.q.log_scale[k])
        np.testing.assert_array_equal(back.q.L_raw, post.q.L_raw)
        np.testing.assert_array_equal(back.elbo_trace, post.elbo_trace)
        save_posterior(back, tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_elbo_trace_csv(self, tmp_path):
        write_elbo_trace(tmp_path / "t.csv", [1.5, -2.0])
        assert (tmp_path / "t.csv").read_text() == "iteration,elbo\n0,1.5\n1,-2.0\n"


class TestGaussianHeldout:
    def test_hand_value(self):
        ds = Dataset(ConditionGrid.periodic_1d(2), [[[0.0]], [[1.0], [0.0]]])
        ll = gaussian_heldout_loglik(ds, np.zeros((2, 1)), np.ones((2, 1, 1)), per_condition=True)
        c = -0.5 * np.log(TWO_PI)
        np.testing.assert_allclose(ll, [c, 2 * c - 0.5], atol=1e-15)

    def test_singular_is_minus_inf(self):
        ds = Dataset(ConditionGrid.periodic_1d(1), [[[0.0, 0.0]]])
        assert gaussian_heldout_loglik(ds, np.zeros((1, 2)), np.ones((1, 2, 2))) == -np.inf


class TestCvSelect:
    """Hyperparameter sweep contract."""

    def test_one_point(self):
        ds = small_data()
        r = cv_select(ds, {"lambda_sigma": [1.0]}, folds=2, config=QUICK)
        assert r.best == {"lambda_sigma": 1.0}
        assert len(r.table) == 2
        assert r.best_score == pytest.approx(np.mean([t["score"] for t in r.table]))

    def test_table_shape_and_failures(self):
        ds = small_data()
        grid = [{"P": 1, "variant": "lrd"}, {"P": 1, "variant": "vanilla"}]
        r = cv_select(ds, grid, folds=3, config=QUICK)
        assert len(r.table) == 6
        for t in r.table:
            if t["params"]["variant"] == "vanilla":
                assert t["score"] == -np.inf and "ValueError" in t["error"]
            else:
                assert np.isfinite(t["score"]) and t["error"] is None
        assert r.best["variant"] == "lrd"

    def test_parallel_matches_serial(self):
        ds = small_data()
        grid = {"lambda_sigma": [0.5, 2.0]}
        a = cv_select(ds, grid, folds=2, config=QUICK, seed=3)
        b = cv_select(ds, grid, folds=2, config=QUICK, seed=3, n_jobs=2)
        assert a.to_dict() == b.to_dict()

    @pytest.mark.slow
    def test_recovers_generating_bandwidth(self):
        hits = 0
        for seed in range(5):
            ds = generate_synthetic(N=20, C=30, K=10, lambda_sigma=1.0, seed=seed)
            cfg = FitConfig(iterations=4000, step=0.005, seed=seed)
            r = cv_select(ds, {"lambda_sigma": [0.1, 1.0, 10.0]}, folds=2, seed=seed, config=cfg)
            hits += r.best["lambda_sigma"] == 1.0
        assert hits >= 4

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            cv_select(small_data(), [], config=QUICK)


def quick_config(**over):
    cfg = {
        "seed": 1,
        "data": {"synthetic": {"N": 4, "C": 6, "K": 12}},
        "fit": {"iterations": 40, "step": 0.01, "family": "delta"},
        "fisher": {"points": 5, "S": 3},
    }
    cfg.update(over)
    return cfg


class TestRunExperiment:
    """Orchestration and reproducibility."""

    def test_config_validation(self):
        with pytest.raises(ValueError):
            load_config({"schema_version": 99})
        with pytest.raises(ValueError):
            load_config({"methods": ["svm"]})
        assert load_config({})["methods"][0] == "wishart"

    def test_baselines_finite(self):
        rep = run_experiment(quick_config(methods=["grand", "lw"]))
        for m in ("grand", "lw"):
            assert np.isfinite(rep["methods"][m]["loglik"])
            assert rep["methods"][m]["opnorm"]["available"]
        assert rep["incomplete"] == []

    def test_empirical_minus_inf(self):
        cfg = quick_config(methods=["empirical"], data={"synthetic": {"N": 8, "C": 4, "K": 10}})
        assert run_experiment(cfg)["methods"]["empirical"]["loglik"] == -np.inf

    def test_byte_identical(self, tmp_path):
        cfg = quick_config()
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        a, b = file_bytes(tmp_path / "a"), file_bytes(tmp_path / "b")
        assert sorted(a) == sorted(b)
        assert "wishart/posterior.npz" in a and "report.json" in a
        for k in a:
            assert a[k] == b[k], k

    def test_no_truth(self, tmp_path):
        ds = small_data()
        ds.truth = None
        write_dataset(ds, tmp_path / "d")
        rep = run_experiment(quick_config(data={"path": str(tmp_path / "d")}, methods=["grand"]))
        assert rep["methods"]["grand"]["opnorm"]["available"] is False

    def test_failure_recorded(self):
        cfg = quick_config(methods=[{"kind": "wishart", "name": "bad", "model": {"variant": "vanilla"}}, "grand"])
        rep = run_experiment(cfg)
        assert rep["incomplete"] == ["bad"]
        assert rep["methods"]["bad"]["status"] == "failed"
        assert rep["methods"]["grand"]["status"] == "ok"

    def test_holdout(self):
        cfg = quick_config(methods=["wishart", "grand"], metrics=["loglik", "opnorm"],
                           split={"scheme": "holdout_conditions", "indices": [1, 4]})
        rep = run_experiment(cfg)
        assert rep["split"]["test_conditions"] == 2
        assert len(rep["methods"]["wishart"]["opnorm"]["per_condition"]) == 2
        assert np.isfinite(rep["methods"]["wishart"]["loglik"])
