import datetime as dt
import json

import numpy as np
import pytest

from esmc2.enkf import EnKFEngine
from esmc2.errors import ConfigError, DataValidationError
from esmc2.io import (
    ExperimentConfig, IncidenceSeries, bands_nested, load_incidence, parse_incidence, read_manifest,
    read_param_history, read_state_bands, write_incidence, write_results,
)
from esmc2.model import SEIRModel
from esmc2.products import marginal_state_posterior
from esmc2.scenarios import EXAMPLE1
from esmc2.smc2 import run

MODEL = SEIRModel(EXAMPLE1.cfg)
_, Y = EXAMPLE1.simulate(5)


# incidence data -----------------------------------------------------------------

def test_date_series():
    s = parse_incidence("2022-05-06,1\n2022-05-07,0")
    assert len(s) == 2 and s.uses_dates
    assert s.times[0] == dt.date(2022, 5, 6)
    assert list(s.counts) == [1, 0]


def test_header_and_integer_times():
    s = parse_incidence("t,count\n1,5\n2,7\n")
    assert s.times == (1, 2) and list(s.counts) == [5, 7]
    s = parse_incidence("date,count\n2022-01-31,3\n2022-02-01,4\n")
    assert len(s) == 2


@pytest.mark.parametrize("text,line,fragment", [
    ("t,count\n1,5\n3,7", 3, "gap"),
    ("1,-2", 1, "negative"),
    ("1,2\n1,3", 2, "increasing"),
    ("1,2\n2,NA", 2, "missing"),
    ("1,2\n2,1.5", 2, "integer"),
    ("1,2\n2,x", 2, "number"),
    ("1,2\n2022-01-01,3", 2, "mixed"),
    ("1,2,3", 1, "fields"),
    ("2022-01-02,1\n2022-01-01,1", 2, "increasing"),
])
def test_validation_errors_name_the_line(text, line, fragment):
    with pytest.raises(DataValidationError) as err:
        parse_incidence(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)
    assert fragment in str(err.value)


def test_empty_file_rejected(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("date,count\n")
    with pytest.raises(DataValidationError):
        load_incidence(p)
    with pytest.raises(DataValidationError):
        load_incidence(tmp_path / "absent.csv")


def test_incidence_round_trip_and_weekly(tmp_path):
    days = tuple(dt.date(2022, 5, 1) + dt.timedelta(days=k) for k in range(16))
    s = IncidenceSeries(days, np.arange(16))
    write_incidence(tmp_path / "d.csv", s)
    back = load_incidence(tmp_path / "d.csv")
    assert back.times == s.times and np.array_equal(back.counts, s.counts)
    wk = load_incidence(tmp_path / "d.csv", aggregate_weekly=True)
    assert list(wk.counts) == [21, 70] and wk.interval_days == 7
    assert wk.times == (days[0], days[7])


# configuration ------------------------------------------------------------------

def test_config_text_and_unknown_key():
    cfg = ExperimentConfig.from_text("engine = bpf\nntheta = 50  # comment\nprior.alpha = uniform(0, 1)\n")
    assert cfg.engine == "bpf" and cfg.ntheta == 50 and cfg.prior["alpha"] == "uniform(0, 1)"
    with pytest.raises(ConfigError, match="line 2"):
        ExperimentConfig.from_text("engine = enkf\nntheta_typo = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig().set("prior.kappa", "uniform(0, 1)")
    with pytest.raises(ConfigError):
        ExperimentConfig().set("prior.alpha", "gamma(1, 1)")


def test_config_dict_round_trip():
    cfg = ExperimentConfig(example="example1", ntheta=40, seed=9)
    cfg.set("fixed.nu_beta", "0.05")
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


@pytest.mark.parametrize("key,value", [("rho", "0"), ("nx", "3"), ("engine", "ukf"), ("delta", "1.5"),
                                       ("ess_threshold", "0")])
def test_config_validation(key, value):
    cfg = ExperimentConfig(example="example1")
    cfg.set(key, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_requires_existing_data(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(data=str(tmp_path / "nope.csv")).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig().validate()


def test_weekly_config_rescales_time_step():
    cfg = ExperimentConfig(example="example1", aggregate_weekly=True, substeps=2)
    mc = cfg.model_config()
    assert mc.dt == 7 and mc.n_substeps == 14


# results --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run():
    eng = EnKFEngine(MODEL, 10)
    res = run(Y[:10], EXAMPLE1.prior, eng, 20, rng=0)
    p = res.particles
    sp = marginal_state_posterior(Y[:10], p.theta, p.weights, EXAMPLE1.prior, eng, n_c=5, rng=1)
    return res, sp


def test_results_round_trip(tmp_path, tiny_run):
    res, sp = tiny_run
    man = write_results(res, tmp_path, {"seed": 0}, state_posterior=sp)
    assert set(man["files"]) == {"param_history.csv", "state_bands.csv", "posterior_samples.csv", "checkpoint.npz"}
    hist = read_param_history(tmp_path / "param_history.csv")
    for rec in res.history:
        assert hist[rec.t] == rec.params
    bands = read_state_bands(tmp_path / "state_bands.csv")
    assert bands_nested(bands)
    for name, b in sp.quantities.items():
        assert np.array_equal(bands[name]["mean"], b.mean)
        assert np.array_equal(bands[name]["q97.5"], b.upper[0.95])
    assert read_manifest(tmp_path)["seed"] == 0
    ck = np.load(tmp_path / "checkpoint.npz")
    assert np.array_equal(ck["theta"], res.particles.theta)


def test_band_table_from_run_history_is_nested(tmp_path, tiny_run):
    res, _ = tiny_run
    write_results(res, tmp_path)
    assert bands_nested(read_state_bands(tmp_path / "state_bands.csv"))


def test_empty_history_writes_manifest_only(tmp_path):
    res = run([], EXAMPLE1.prior, EnKFEngine(MODEL, 10), 5, rng=0)
    man = write_results(res, tmp_path, {"seed": 1})
    assert man["files"] == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"]
