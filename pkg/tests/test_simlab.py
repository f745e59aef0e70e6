"""Tests for synthetic data generation and experiments"""
import math

import pytest
import numpy as np
from numpy.testing import assert_allclose
from pydantic import ValidationError

from homopursuit.errors import ArgumentError
from homopursuit.model import coefficient_tensor
from homopursuit.simlab import (
    ExperimentConfig,
    SimConfig,
    derive_seed,
    gen_dataset,
    gen_true_params,
    rate_slopes,
    run_rank_experiment,
    run_rate_experiment,
    summarize_rank,
    summarize_rate,
)


def small_config(**overrides) -> SimConfig:
    values = dict(p1=6, p2=6, n=3, m=40, ranks=(1, 2, 2), core_scale=(5.0,), reps=2, rbar=3, max_iters=20)
    values.update(overrides)
    return SimConfig(**values)


class TestSeeds:
    def test_deterministic(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)

    def test_distinct_streams(self):
        seeds = {derive_seed(0, c, rep) for c in range(3) for rep in range(50)}
        assert len(seeds) == 150

    def test_fits_in_64_bits(self):
        assert 0 <= derive_seed(2 ** 40, 7, 9) < 2 ** 64


class TestSimConfig:
    def test_defaults(self):
        cfg = SimConfig()
        assert (cfg.p1, cfg.p2, cfg.n, cfg.m) == (20, 20, 16, 128)
        assert cfg.ranks == (2, 4, 4)
        assert cfg.sparsity is None

    def test_sparse_setting(self):
        assert SimConfig(setting="first_five_rows").sparsity == (5, 5)

    def test_core_scale_length(self):
        with pytest.raises(ValidationError):
            SimConfig(ranks=(2, 4, 4), core_scale=(5.0,))

    def test_subspace_above_dimension(self):
        with pytest.raises(ValidationError):
            SimConfig(p1=3, ranks=(2, 4, 4))

    def test_job(self):
        job = small_config(setting="first_five_rows").job("homo-sparse", (1, 2, 2))
        assert job.sparsity == (5, 5)
        assert job.rbar == 3
        assert job.max_iters == 20


class TestExperimentConfig:
    def test_cells_in_grid_order(self):
        exp = ExperimentConfig(
            kind="rank", base=small_config(), n_values=[2, 4], m_values=[10, 20],
            settings=["dense", "first_five_rows"],
        )
        cells = exp.cells()
        assert len(cells) == 8
        assert [(c.setting, c.n, c.m) for c in cells[:3]] == [
            ("dense", 2, 10), ("dense", 2, 20), ("dense", 4, 10)
        ]
        assert cells[4].setting == "first_five_rows"

    def test_rate_varies_one_axis(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(kind="rate", n_values=[2, 4], m_values=[10, 20])

    def test_axis(self):
        assert ExperimentConfig(kind="rate", m_values=[10, 20]).axis == "m"
        assert ExperimentConfig(kind="rate", n_values=[2, 4]).axis == "n"
        assert ExperimentConfig(kind="rate").axis is None

    def test_empty_grid_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(n_values=[])


class TestGenerators:
    def test_truth_is_canonical(self):
        cfg = SimConfig(p1=8, p2=7, n=5)
        truth = gen_true_params(cfg, np.random.default_rng(1))
        assert truth.B_star.shape == (8, 7, 5)
        assert truth.ranks == (2, 4, 4)
        assert_allclose(truth.theta_star.C.T @ truth.theta_star.C, np.eye(4), atol=1e-10)
        assert_allclose(coefficient_tensor(truth.theta_star), truth.B_star, atol=1e-10)
        for s in truth.sigma_I:
            assert_allclose(s, [5.0, 5.0], rtol=1e-8)

    def test_same_seed_same_truth(self):
        cfg = small_config()
        a = gen_true_params(cfg, np.random.default_rng(42))
        b = gen_true_params(cfg, np.random.default_rng(42))
        assert np.array_equal(a.B_star, b.B_star)

    def test_sparse_rows(self):
        cfg = SimConfig(p1=10, p2=9, n=3, setting="first_five_rows")
        truth = gen_true_params(cfg, np.random.default_rng(3))
        assert np.all(truth.theta_star.C[5:] == 0.0)
        assert np.all(truth.theta_star.R[5:] == 0.0)
        assert np.all(truth.B_star[5:, :, :] == 0.0)
        assert np.all(truth.B_star[:, 5:, :] == 0.0)

    def test_support_too_small(self):
        cfg = SimConfig(p1=10, p2=10, setting="first_five_rows", support_size=3)
        with pytest.raises(ArgumentError):
            gen_true_params(cfg, np.random.default_rng(0))

    def test_noiseless_linear_responses(self):
        cfg = small_config(noise_sd=0.0)
        rng = np.random.default_rng(8)
        truth = gen_true_params(cfg, rng)
        data = gen_dataset(truth, cfg, rng)
        assert data.n == 3
        assert data.m == [40, 40, 40]
        for i in range(data.n):
            assert_allclose(data.flat(i) @ truth.B_star[:, :, i].reshape(-1), data.ys[i], atol=1e-12)

    def test_logistic_responses_are_binary(self):
        cfg = small_config(model="logistic")
        rng = np.random.default_rng(8)
        data = gen_dataset(gen_true_params(cfg, rng), cfg, rng)
        for y in data.ys:
            assert set(np.unique(y)) <= {0.0, 1.0}


class TestSummaries:
    def test_failures_count_as_incorrect(self):
        records = [
            {"cell": 0, "n": 4, "m": 10, "setting": "dense", "rep": 0, "correct": True, "error": None},
            {"cell": 0, "n": 4, "m": 10, "setting": "dense", "rep": 1, "correct": False, "error": None},
            {"cell": 0, "n": 4, "m": 10, "setting": "dense", "rep": 2, "error": "diverged"},
            {"cell": 0, "n": 4, "m": 10, "setting": "dense", "rep": 3, "correct": True, "error": None},
        ]
        (row,) = summarize_rank(records)
        assert row["prop_correct"] == 0.5
        assert row["reps"] == 4
        assert row["failures"] == 1

    def test_rate_means_skip_failures(self):
        base = {"cell": 0, "n": 4, "m": 10, "setting": "dense"}
        records = [
            dict(base, rep=0, error=None, neg_log_err_B=2.0, neg_log_err_C=1.0, neg_log_err_R=1.0,
                 hetero_neg_log_err_B=0.5),
            dict(base, rep=1, error=None, neg_log_err_B=4.0, neg_log_err_C=3.0, neg_log_err_R=1.0,
                 hetero_neg_log_err_B=1.5),
            dict(base, rep=2, error="singular"),
        ]
        (row,) = summarize_rate(records)
        assert row["neg_log_err_B"] == 3.0
        assert row["neg_log_err_C"] == 2.0
        assert row["hetero_neg_log_err_B"] == 1.0
        assert row["failures"] == 1

    def test_slopes(self):
        summary = [
            {"n": n, "m": 10, "setting": "dense", "neg_log_err_B": 2.0 * math.log(n) + 1.0,
             "neg_log_err_C": 1.0, "neg_log_err_R": -math.log(n), "hetero_neg_log_err_B": float("nan")}
            for n in (2, 4, 8)
        ]
        slopes = {row["metric"]: row["slope"] for row in rate_slopes(summary, "n")}
        assert slopes["neg_log_err_B"] == pytest.approx(2.0)
        assert slopes["neg_log_err_C"] == pytest.approx(0.0, abs=1e-12)
        assert slopes["neg_log_err_R"] == pytest.approx(-1.0)
        assert math.isnan(slopes["hetero_neg_log_err_B"])

    def test_no_axis_no_slopes(self):
        assert rate_slopes([], None) == []


class TestExperiments:
    def test_rank_experiment_is_deterministic(self):
        cfg = small_config()
        one = run_rank_experiment(cfg, threads=1)
        two = run_rank_experiment(cfg, threads=2)
        assert one.records == two.records
        assert one.summary == two.summary
        assert len(one.records) == 2
        assert len(one.timing) == 2
        assert {"r_hat", "K1_hat", "K2_hat", "correct", "seed"} <= set(one.records[0])

    def test_noiseless_rank_selection(self):
        cfg = SimConfig(p1=10, p2=10, n=8, m=200, noise_sd=0.0, reps=2, max_iters=300, seed=3)
        record = run_rank_experiment(cfg)
        (row,) = record.summary
        assert row["failures"] == 0
        assert row["prop_correct"] == 1.0

    def test_noiseless_rank_selection_row_sparse(self):
        cfg = SimConfig(
            p1=10, p2=10, n=8, m=200, noise_sd=0.0, reps=2, max_iters=300, seed=3,
            setting="first_five_rows",
        )
        record = run_rank_experiment(cfg)
        (row,) = record.summary
        assert row["setting"] == "first_five_rows"
        assert row["failures"] == 0
        assert row["prop_correct"] == 1.0
        for rec in record.records:
            assert (rec["r_hat"], rec["K1_hat"], rec["K2_hat"]) == (2, 4, 4)

    def test_rate_experiment_grid(self):
        base = small_config(reps=1, max_iters=50)
        exp = ExperimentConfig(kind="rate", base=base, n_values=[2, 4])
        record = run_rate_experiment(exp)
        assert record.kind == "rate"
        assert [row["n"] for row in record.summary] == [2, 4]
        assert len(record.slopes) == 4
        assert {row["axis"] for row in record.slopes} == {"n"}
        for rec in record.records:
            assert rec["error"] is None
            assert rec["err_B"] >= 0.0
            assert 0.0 <= rec["err_C"] <= 4.0

    def test_wrong_experiment_kind(self):
        with pytest.raises(ArgumentError):
            run_rate_experiment(ExperimentConfig(kind="rank", base=small_config()))
