"""Tests for dataset, parameter and truth files"""
import json

import pytest
import numpy as np
from numpy.testing import assert_allclose

from homopursuit.errors import ConfigError, DatasetError
from homopursuit.model import DatasetBundle, ParameterSet, coefficient_tensor
from homopursuit.optim import FitConfig, FitReport, HeteroFit
from homopursuit.reports import ReportWriter
from homopursuit.simlab import ExperimentRecord, SimConfig, gen_true_params
from homopursuit.storage import (
    coefficients_of,
    load_config,
    read_dataset,
    read_parameters,
    read_truth,
    write_active_rows,
    write_dataset,
    write_loss_trace,
    write_parameters,
    write_truth,
)


@pytest.fixture
def rng():
    return np.random.default_rng(17)


@pytest.fixture
def dataset(rng):
    xs = [rng.standard_normal((m, 3, 2)) for m in (4, 6)]
    ys = [rng.standard_normal(m) for m in (4, 6)]
    return DatasetBundle(xs, ys)


@pytest.fixture
def theta(rng):
    return ParameterSet(
        C=rng.standard_normal((3, 2)),
        R=rng.standard_normal((2, 2)),
        L1=[rng.standard_normal((2, 1)) for _ in range(2)],
        L2=[rng.standard_normal((2, 1)) for _ in range(2)],
    )


class TestDatasetFiles:
    def test_round_trip_is_exact(self, tmp_path, dataset):
        write_dataset(dataset, tmp_path, model="linear")
        back, manifest = read_dataset(tmp_path)
        assert manifest.n == 2
        assert manifest.m == [4, 6]
        for a, b in zip(dataset.xs, back.xs):
            assert np.array_equal(a, b)
        for a, b in zip(dataset.ys, back.ys):
            assert np.array_equal(a, b)

    def test_row_major_layout(self, tmp_path):
        X = np.arange(6.0).reshape(1, 2, 3)
        write_dataset(DatasetBundle([X], [np.zeros(1)]), tmp_path)
        line = (tmp_path / "X_0.csv").read_text().strip()
        assert [float(v) for v in line.split(",")] == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]

    def test_missing_file_named(self, tmp_path, dataset):
        write_dataset(dataset, tmp_path)
        (tmp_path / "y_1.csv").unlink()
        with pytest.raises(DatasetError, match="y_1.csv"):
            read_dataset(tmp_path)

    def test_wrong_row_count(self, tmp_path, dataset):
        write_dataset(dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["m"] = [5, 6]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="X_0.csv"):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)

    def test_manifest_count_mismatch(self, tmp_path, dataset):
        write_dataset(dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["n"] = 3
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)


class TestParameterFiles:
    def test_homogeneous(self, tmp_path, theta):
        write_parameters(theta, tmp_path)
        back = read_parameters(tmp_path)
        assert isinstance(back, ParameterSet)
        assert np.array_equal(back.C, theta.C)
        assert np.array_equal(back.L2[1], theta.L2[1])
        meta = json.loads((tmp_path / "theta.meta.json").read_text())
        assert meta["kind"] == "homogeneous"
        assert meta["ranks"] == [1, 2, 2]
        assert (tmp_path / "theta.bin").stat().st_size == 8 * (6 + 4 + 2 * (2 + 2))

    def test_heterogeneous(self, tmp_path, rng):
        fit = HeteroFit(C=[rng.standard_normal((3, 1)) for _ in range(2)], R=[rng.standard_normal((2, 1)) for _ in range(2)])
        write_parameters(fit, tmp_path)
        back = read_parameters(tmp_path)
        assert isinstance(back, HeteroFit)
        assert np.array_equal(coefficients_of(back), fit.coefficients())

    def test_tensor(self, tmp_path, rng):
        B = rng.standard_normal((3, 2, 4))
        write_parameters(B, tmp_path)
        back = read_parameters(tmp_path)
        assert np.array_equal(back, B)

    def test_truncated_binary(self, tmp_path, theta):
        write_parameters(theta, tmp_path)
        data = (tmp_path / "theta.bin").read_bytes()
        (tmp_path / "theta.bin").write_bytes(data[:-8])
        with pytest.raises(DatasetError):
            read_parameters(tmp_path)

    def test_truth_round_trip(self, tmp_path):
        truth = gen_true_params(SimConfig(p1=6, p2=5, n=3), np.random.default_rng(2))
        write_truth(truth, tmp_path, config={"seed": 2})
        back = read_truth(tmp_path)
        assert_allclose(back.B_star, truth.B_star, atol=1e-12)
        assert_allclose(back.sigma_C, truth.sigma_C, rtol=1e-10)
        assert json.loads((tmp_path / "truth.json").read_text())["config"] == {"seed": 2}

    def test_truth_must_be_homogeneous(self, tmp_path, rng):
        write_parameters(rng.standard_normal((2, 2, 2)), tmp_path)
        with pytest.raises(DatasetError):
            read_truth(tmp_path)


class TestFitArtifacts:
    def test_loss_trace_homogeneous(self, tmp_path, theta):
        report = FitReport(theta=theta, loss_trace=[3.0, 2.0, 1.5], iters=2, converged=False)
        path = write_loss_trace(report, tmp_path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,loss"
        assert len(lines) == 4

    def test_loss_trace_heterogeneous(self, tmp_path, rng):
        fit = HeteroFit(
            C=[rng.standard_normal((3, 1))], R=[rng.standard_normal((2, 1))], loss_traces=[[2.0, 1.0]]
        )
        lines = write_loss_trace(fit, tmp_path).read_text().strip().splitlines()
        assert lines[0] == "individual,iteration,loss"
        assert len(lines) == 3

    def test_active_rows(self, tmp_path, theta):
        report = FitReport(theta=theta, loss_trace=[1.0], iters=0, converged=False, active_rows=((0, 2), (1,)))
        path = write_active_rows(report, tmp_path)
        assert json.loads(path.read_text()) == {"S1": [0, 2], "S2": [1]}

    def test_no_active_rows_for_dense(self, tmp_path, theta):
        report = FitReport(theta=theta, loss_trace=[1.0], iters=0, converged=False)
        assert write_active_rows(report, tmp_path) is None
        assert not (tmp_path / "active_rows.json").exists()


class TestLoadConfig:
    def test_valid(self, tmp_path):
        path = tmp_path / "fit.json"
        path.write_text(json.dumps({"eta": 0.2, "ranks": [1, 2, 2]}))
        cfg = load_config(path, FitConfig)
        assert cfg.eta == 0.2
        assert cfg.ranks == (1, 2, 2)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "fit.json"
        path.write_text("{eta: ")
        with pytest.raises(ConfigError):
            load_config(path, FitConfig)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "fit.json"
        path.write_text(json.dumps({"etaa": 0.2}))
        with pytest.raises(ConfigError):
            load_config(path, FitConfig)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json", FitConfig)


class TestReportWriter:
    @pytest.fixture
    def record(self):
        records = [
            {"cell": 0, "n": 4, "m": 10, "setting": "dense", "rep": 0, "seed": 2 ** 60, "correct": True, "error": None},
            {"cell": 0, "n": 4, "m": 10, "setting": "dense", "rep": 1, "seed": 5, "error": "diverged"},
        ]
        summary = [{"n": 4, "m": 10, "setting": "dense", "prop_correct": 0.5, "reps": 2, "failures": 1}]
        return ExperimentRecord(kind="rank", config={"kind": "rank"}, records=records, summary=summary)

    def test_csv_and_json(self, tmp_path, record):
        paths = ReportWriter(tmp_path).write_experiment(record, "csv")
        assert set(paths) == {"json", "csv"}
        lines = (tmp_path / "summary.csv").read_text().strip().splitlines()
        assert lines[0] == "n,m,setting,prop_correct,reps,failures"
        assert lines[1] == "4,10,dense,0.5,2,1"
        payload = json.loads((tmp_path / "records.json").read_text())
        assert payload["records"][0]["seed"] == 2 ** 60

    def test_excel(self, tmp_path, record):
        from openpyxl import load_workbook

        path = ReportWriter(tmp_path).generate_excel(record)
        wb = load_workbook(path)
        assert wb.sheetnames == ["Podsumowanie", "Replikacje"]
        ws = wb["Replikacje"]
        header = [cell.value for cell in ws[1]]
        assert header[:6] == ["cell", "n", "m", "setting", "rep", "seed"]
        assert ws.cell(row=2, column=6).value == str(2 ** 60)

    def test_metrics(self, tmp_path):
        path = ReportWriter(tmp_path).write_metrics({"total_error": 0.25, "test_rmse": float("nan")})
        lines = open(path).read().strip().splitlines()
        assert lines[0].startswith("total_error,per_individual_avg")
        assert lines[1].startswith("0.25,")
