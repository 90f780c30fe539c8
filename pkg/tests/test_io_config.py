import json

import numpy as np
import pytest

from odelaplace import io
from odelaplace.config import ExperimentConfig, config_hash, load_config, preset
from odelaplace.errors import InputError
from odelaplace.laplace import CovarianceReport
from odelaplace.pipeline import simulate
from odelaplace.posterior import Dataset


def test_presets_build():
    for name in ("fn-s3.1", "lorenz96-s3.2", "sir-s4-synthetic"):
        cfg = preset(name)
        model = cfg.build_model()
        prior = cfg.build_prior()
        assert prior.q == model.q and prior.p == model.p
        assert len(cfg.simulate.theta) == model.q
    with pytest.raises(InputError):
        preset("nope")


def test_preset_settings():
    fn = preset("fn-s3.1")
    assert (fn.simulate.n_points, fn.simulate.noise_variance, fn.tau) == (201, 0.25, 1e-5)
    assert fn.mcmc.draws_per_chain == 1000
    l96 = preset("lorenz96-s3.2")
    assert (l96.tau, l96.m, l96.mcmc.chains, l96.simulate.n_points) == (1e-4, 2, 4, 51)
    assert l96.mcmc.chains * l96.mcmc.draws_per_chain == 1000


def test_config_round_trip_and_hash():
    cfg = preset("fn-s3.1")
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict(), default=list)))
    assert config_hash(back) == config_hash(cfg)
    other = cfg.with_overrides(**{"simulate.seed": 99})
    assert config_hash(other) != config_hash(cfg)
    assert len(config_hash(cfg)) == 16


def test_config_validation(tmp_path):
    with pytest.raises(InputError):
        preset("fn-s3.1").with_overrides(tau=0.0)
    with pytest.raises(InputError):
        preset("fn-s3.1").with_overrides(m=0)
    with pytest.raises(InputError):
        preset("fn-s3.1").with_overrides(**{"simulate.n_points": 1})
    bad = tmp_path / "bad.json"
    bad.write_text('{"preset": "fn-s3.1", "colour": 1}')
    with pytest.raises(InputError):
        load_config(bad)
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.json")


def test_preset_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "fn-s3.1", "simulate": {"noise_variance": 0.0}, "mcmc": {"seed": 3}}))
    cfg = load_config(path)
    assert cfg.simulate.noise_variance == 0.0 and cfg.simulate.n_points == 201
    assert cfg.mcmc.seed == 3 and cfg.mcmc.thin == 30


def test_simulate_shapes_and_noise_free():
    data, truth = simulate(preset("fn-s3.1"))
    assert data.Y.shape == (201, 2)
    data, truth = simulate(preset("lorenz96-s3.2"))
    assert data.Y.shape == (51, 4)
    clean, truth = simulate(preset("fn-s3.1").with_overrides(**{"simulate.noise_variance": 0.0}))
    assert np.array_equal(clean.Y, truth["states"])
    again, _ = simulate(preset("fn-s3.1"))
    first, _ = simulate(preset("fn-s3.1"))
    assert np.array_equal(again.Y, first.Y)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = Dataset(np.linspace(0, 1, 7), rng.standard_normal((7, 3)))
    path = tmp_path / "d.csv"
    io.write_dataset(path, data, "abc")
    assert path.read_text().splitlines()[1] == "t,x1,x2,x3"
    assert io.read_config_hash(path) == "abc"
    back, report = io.ingest_csv(path)
    assert np.array_equal(back.times, data.times) and np.array_equal(back.Y, data.Y)
    assert report["rows"] == 7 and report["states"] == 3


def test_ingest_reports_rows(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("t,I,R\n0,10,0\n1,-3,1\n2,5,2\n2,4,3\n")
    with pytest.raises(io.IngestError) as info:
        io.ingest_csv(path, "sir")
    rows = {r for r, _ in info.value.problems}
    assert rows == {3, 5}
    assert any("negative" in m for _, m in info.value.problems)
    path.write_text("0,1\n1,x\n")
    with pytest.raises(io.IngestError, match="row 2"):
        io.ingest_csv(path)
    with pytest.raises(InputError):
        io.ingest_csv(tmp_path / "none.csv")


def test_report_round_trip(tmp_path):
    rep = CovarianceReport.build("laplace-relaxed", ["a", "b"], np.array([[2.0, 0.5], [0.5, 1.0]]), meta={"k": 1})
    path = tmp_path / "r.json"
    io.write_report(path, rep, "h1")
    back = io.read_report(path)
    assert back.labels == rep.labels and np.array_equal(back.covariance.array, rep.covariance.array)
    assert np.array_equal(back.correlation.array, rep.correlation.array)
    assert io.read_config_hash(path) == "h1"
    bad = CovarianceReport.build("laplace-original", ["a", "b"], np.array([[1.0, 0.0], [0.0, -1.0]]))
    io.write_report(path, bad)
    assert "nonpositive-variance" in io.read_report(path).flags
    assert json.loads(path.read_text())["variances"] == [1.0, -1.0]
