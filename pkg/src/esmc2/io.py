"""Incidence data, experiment configuration and result files.

Config files are flat ``key = value`` text with ``#`` comments.  Prior
marginals are given as ``prior.<name> = normal(m, sd)``,
``tnormal(m, sd, lo, hi)`` or ``uniform(lo, hi)``; fixed parameters as
``fixed.<name> = value``.  Unknown keys are rejected.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataValidationError, DomainError
from .model import InitialCondition, ModelConfig, ObsModel, SEIRModel
from .params import PARAM_NAMES
from .scenarios import PRIOR_PRESETS, SCENARIOS, mpox_prior
from .stochastic import PriorSpec, marginal_from_string

MISSING_MARKERS = {"", "na", "nan", "null", "none", "?", "."}

PARAM_COLUMNS = ("time", "param", "mean", "sd", "q2.5", "q25", "q50", "q75", "q97.5")
BAND_COLUMNS = ("time", "quantity", "mean", "q2.5", "q5", "q12.5", "q25", "q50", "q75", "q87.5", "q95", "q97.5")
# (level, lower column, upper column)
BAND_PAIRS = ((0.5, "q25", "q75"), (0.75, "q12.5", "q87.5"), (0.9, "q5", "q95"), (0.95, "q2.5", "q97.5"))


# ---------------------------------------------------------------------------
# incidence data


@dataclass(frozen=True)
class IncidenceSeries:
    """Consecutive reporting intervals with non-negative counts.

    ``times`` are ISO dates or integers; ``interval_days`` is the length of
    one reporting interval.
    """

    times: tuple
    counts: np.ndarray
    interval_days: int = 1

    def __len__(self):
        return len(self.times)

    @property
    def uses_dates(self) -> bool:
        return bool(self.times) and isinstance(self.times[0], _dt.date)

    def aggregate_weekly(self) -> "IncidenceSeries":
        """Sum counts over consecutive 7-interval windows.

        A trailing incomplete window is dropped.  Each window is labelled by
        its first time.
        """
        n = len(self.times) // 7
        if n == 0:
            raise DataValidationError("fewer than 7 records; cannot aggregate weekly")
        counts = self.counts[: 7 * n].reshape(n, 7).sum(axis=1)
        return IncidenceSeries(tuple(self.times[::7][:n]), counts, self.interval_days * 7)


def _parse_time(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return _dt.date.fromisoformat(text)
    except ValueError:
        return None


def _parse_count(text: str, line: int) -> int:
    if text.strip().lower() in MISSING_MARKERS:
        raise DataValidationError("missing count (explicit gaps are not supported)", line)
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(f"count {text!r} is not a number", line) from None
    if not np.isfinite(value) or value != int(value):
        raise DataValidationError(f"count {text!r} is not an integer", line)
    if value < 0:
        raise DataValidationError(f"negative count {text}", line)
    return int(value)


def parse_incidence(text: str) -> IncidenceSeries:
    """Parse ``time,count`` records; see :func:`load_incidence`."""
    times, counts = [], []
    kind = None
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in next(csv.reader([raw]))]
        if len(parts) != 2:
            raise DataValidationError(f"expected 2 fields, got {len(parts)}", lineno)
        t = _parse_time(parts[0])
        if t is None:
            if not times and kind is None and parts[1].lower() == "count":
                kind = "header"
                continue
            raise DataValidationError(f"cannot parse time {parts[0]!r}", lineno)
        this_kind = "date" if isinstance(t, _dt.date) else "int"
        if kind in (None, "header"):
            kind = this_kind
        elif kind != this_kind:
            raise DataValidationError("mixed date and integer time labels", lineno)
        count = _parse_count(parts[1], lineno)
        if times:
            step = (t - times[-1]).days if this_kind == "date" else t - times[-1]
            if step <= 0:
                raise DataValidationError("times are not strictly increasing", lineno)
            if step != 1:
                raise DataValidationError(f"gap of {step - 1} missing interval(s) before this record", lineno)
        times.append(t)
        counts.append(count)
    if not times:
        raise DataValidationError("no data records")
    return IncidenceSeries(tuple(times), np.array(counts, dtype=np.int64))


def load_incidence(path, aggregate_weekly: bool = False) -> IncidenceSeries:
    """Read a ``date,count`` (or ``t,count``) CSV file.

    The header line is optional.  Times are ISO-8601 dates or integers and
    must be consecutive.  Errors name the offending 1-based line.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataValidationError(f"cannot read {path}: {exc}") from exc
    series = parse_incidence(text)
    return series.aggregate_weekly() if aggregate_weekly else series


def write_incidence(path, series: IncidenceSeries):
    with open(path, "w", newline="") as fh:
        fh.write("date,count\n" if series.uses_dates else "t,count\n")
        for t, c in zip(series.times, series.counts):
            fh.write(f"{t.isoformat() if isinstance(t, _dt.date) else t},{int(c)}\n")


# ---------------------------------------------------------------------------
# configuration


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(cast):
    def conv(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return cast(text)
    return conv


@dataclass
class ExperimentConfig:
    """All knobs of a run.  ``prior`` and ``fixed`` hold per-parameter overrides."""

    # model
    N: float = 500_000.0
    rho: float = 1.0
    obs: str = "poisson"
    dt: float = 1.0
    substeps: int = 1
    i0: float = 10.0
    i0_sd: float = 0.2
    s0_sd: float = 0.2
    # algorithm
    engine: str = "enkf"
    ntheta: int = 300
    nx: int = 100
    moves: int = 5
    ess_threshold: float | None = None
    proposal_scale: float = 1.0
    eta: float = 0.1
    unbiased: bool = True
    nc: int = 100
    horizon: int = 14
    delta: float = 0.99
    workers: int = 1
    seed: int = 0
    # data
    example: str | None = None
    data: str | None = None
    T: int | None = None
    aggregate_weekly: bool = False
    prior_preset: str = "informative"
    out: str = "results"
    prior: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)

    _CASTS = {
        "N": float, "rho": float, "obs": str, "dt": float, "substeps": int, "i0": float, "i0_sd": float,
        "s0_sd": float, "engine": str, "ntheta": int, "nx": int, "moves": int,
        "ess_threshold": _opt(float), "proposal_scale": float, "eta": float, "unbiased": _bool, "nc": int,
        "horizon": int, "delta": float, "workers": int, "seed": int, "example": _opt(str), "data": _opt(str),
        "T": _opt(int), "aggregate_weekly": _bool, "prior_preset": str, "out": str,
    }

    def set(self, key: str, value):
        """Apply one ``key=value`` setting (value as text or native type)."""
        key = key.strip()
        if key.startswith("prior."):
            name = key[6:]
            if name not in PARAM_NAMES:
                raise ConfigError(f"unknown parameter in {key!r}")
            try:
                marginal_from_string(str(value))
            except (DomainError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
            self.prior[name] = str(value).strip()
            self.fixed.pop(name, None)
            return
        if key.startswith("fixed."):
            name = key[6:]
            if name not in PARAM_NAMES:
                raise ConfigError(f"unknown parameter in {key!r}")
            try:
                self.fixed[name] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
            self.prior.pop(name, None)
            return
        if key not in self._CASTS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(self, key, self._CASTS[key](value) if value is not None else None)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    def update(self, mapping: dict):
        for k, v in mapping.items():
            if k in ("prior", "fixed") and isinstance(v, dict):
                for name, val in v.items():
                    self.set(f"{k}.{name}", val)
            else:
                self.set(k, v)
        return self

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = line.split("=", 1)
            try:
                cfg.set(key, value.strip())
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from exc
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["prior"] = dict(self.prior)
        out["fixed"] = dict(self.fixed)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls().update(d)

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.N > 0, "N must be positive")
        need(0 < self.rho <= 1, "rho must lie in (0, 1]")
        need(self.obs in ("poisson", "negbin"), "obs must be poisson or negbin")
        need(self.dt > 0, "dt must be positive")
        need(self.substeps >= 1, "substeps must be >= 1")
        need(self.engine in ("enkf", "bpf"), "engine must be enkf or bpf")
        need(self.ntheta >= 2, "ntheta must be >= 2")
        need(self.nx >= (5 if self.engine == "enkf" else 1), "nx too small (EnKF needs nx >= 5)")
        need(self.moves >= 0, "moves must be >= 0")
        need(self.ess_threshold is None or 0 < self.ess_threshold <= self.ntheta,
             "ess_threshold must lie in (0, ntheta]")
        need(self.proposal_scale > 0, "proposal_scale must be positive")
        need(self.eta > 0, "eta must be positive")
        need(self.nc >= 1, "nc must be >= 1")
        need(self.horizon >= 1, "horizon must be >= 1")
        need(0 < self.delta <= 1, "delta must lie in (0, 1]")
        need(self.workers >= 1, "workers must be >= 1")
        need(self.T is None or self.T >= 1, "T must be >= 1")
        need(self.prior_preset in (*PRIOR_PRESETS, "mpox"), f"unknown prior_preset {self.prior_preset!r}")
        need(self.example is None or self.example in SCENARIOS, f"unknown example {self.example!r}")
        need((self.example is None) != (self.data is None), "give exactly one of example or data")
        if self.data is not None:
            need(os.path.isfile(self.data), f"data file not found: {self.data}")
        try:
            self.prior_spec()
        except DomainError as exc:
            raise ConfigError(f"prior: {exc}") from exc
        return self

    # builders --------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        dt, sub = self.dt, self.substeps
        if self.aggregate_weekly:
            dt, sub = dt * 7, sub * 7
        return ModelConfig(N=self.N, rho=self.rho, obs_model=ObsModel(self.obs), dt=dt, n_substeps=sub)

    def model(self) -> SEIRModel:
        return SEIRModel(self.model_config(), InitialCondition(self.i0, self.i0_sd, self.s0_sd))

    def prior_spec(self) -> PriorSpec:
        if self.prior_preset == "mpox":
            base = mpox_prior()
        else:
            scen = SCENARIOS[self.example or "example1"]
            base = PRIOR_PRESETS[self.prior_preset](scen.prior)
        marginals = dict(base.marginals)
        fixed = dict(base.fixed)
        for name, text in self.prior.items():
            fixed.pop(name, None)
            marginals[name] = marginal_from_string(text)
        for name, value in self.fixed.items():
            marginals.pop(name, None)
            fixed[name] = value
        if self.obs == "poisson" and "phi" in marginals and "phi" not in self.prior:
            # phi has no effect on a Poisson likelihood
            marginals.pop("phi")
            fixed["phi"] = 0.0
        return PriorSpec(marginals, fixed)

    def make_engine(self, model=None):
        from .bpf import BPFEngine
        from .enkf import EnKFEngine

        model = model or self.model()
        if self.engine == "enkf":
            return EnKFEngine(model, self.nx, eta=self.eta, unbiased=self.unbiased, workers=self.workers)
        return BPFEngine(model, self.nx, workers=self.workers)

    def load_observations(self):
        """Observed counts and, for simulated examples, the latent truth path."""
        if self.example is not None:
            scen = SCENARIOS[self.example]
            cfg = self.model_config()
            path, y = scen.simulate(self.seed, T=self.T or scen.T, cfg=cfg)
            return y.astype(float), path
        series = load_incidence(self.data, self.aggregate_weekly)
        y = series.counts.astype(float)
        return (y[: self.T] if self.T else y), None


# ---------------------------------------------------------------------------
# result files


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(r if isinstance(r, str) else _fmt(r) for r in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def param_history_rows(history):
    for rec in history:
        for name, s in rec.params.items():
            yield [rec.t, name] + [s[c] for c in PARAM_COLUMNS[2:]]


def state_band_rows_from_history(history):
    for rec in history:
        for name, s in (rec.states or {}).items():
            yield [rec.t, name] + [s[c] for c in BAND_COLUMNS[2:]]


def state_band_rows_from_bands(times, quantities: dict):
    for k, t in enumerate(times):
        for name, b in quantities.items():
            row = {"mean": b.mean[k], "q50": b.median[k]}
            for lv, lo, up in BAND_PAIRS:
                row[lo] = b.lower[lv][k]
                row[up] = b.upper[lv][k]
            yield [int(t), name] + [row[c] for c in BAND_COLUMNS[2:]]


def write_results(result, out_dir, config: dict | None = None, state_posterior=None, extra: dict | None = None,
                  status: str = "ok") -> dict:
    """Write CSV summaries, a JSON manifest and a checkpoint.

    Files: ``param_history.csv``, ``state_bands.csv`` (from ``state_posterior``
    when given, else from per-step summaries), ``posterior_samples.csv``,
    ``checkpoint.npz`` and ``manifest.json``.  With an empty history only the
    manifest is written.

    Returns the manifest dictionary.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    files = []
    history = result.history if result is not None else []
    if history:
        _write_csv(out / "param_history.csv", PARAM_COLUMNS, param_history_rows(history))
        files.append("param_history.csv")
        if state_posterior is not None:
            rows = list(state_band_rows_from_bands(state_posterior.times, state_posterior.quantities))
        else:
            rows = list(state_band_rows_from_history(history))
        if rows:
            _write_csv(out / "state_bands.csv", BAND_COLUMNS, rows)
            files.append("state_bands.csv")
        p = result.particles
        w = p.weights
        header = ("particle",) + tuple(p.prior.names) + ("weight", "loglik")
        _write_csv(out / "posterior_samples.csv", header,
                   ([i] + list(p.theta[i]) + [w[i], p.cum_loglik[i]] for i in range(p.n)))
        files.append("posterior_samples.csv")
        ckpt = {"theta": p.theta, "log_weights": p.log_weights, "cum_loglik": p.cum_loglik,
                "obs": np.asarray(result.obs)}
        if state_posterior is not None:
            ckpt.update(fc_theta=state_posterior.theta, fc_states=state_posterior.final_states,
                        fc_weights=state_posterior.final_weights)
        np.savez(out / "checkpoint.npz", **ckpt)
        files.append("checkpoint.npz")
    manifest = {
        "status": status,
        "config": config or {},
        "seed": (config or {}).get("seed"),
        "files": files,
        "diagnostics": result.diagnostics.as_dict() if result is not None else {},
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return manifest


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        return json.load(fh)


def read_param_history(path) -> dict:
    """``{t: {param: {stat: value}}}`` from ``param_history.csv``."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            stats = {c: float(row[c]) for c in PARAM_COLUMNS[2:]}
            out.setdefault(int(row["time"]), {})[row["param"]] = stats
    return out


def read_state_bands(path) -> dict:
    """``{quantity: {column: array over time}}`` from ``state_bands.csv``."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            q = out.setdefault(row["quantity"], {c: [] for c in BAND_COLUMNS if c != "quantity"})
            q["time"].append(int(row["time"]))
            for c in BAND_COLUMNS[2:]:
                q[c].append(float(row[c]))
    return {name: {c: np.array(v) for c, v in cols.items()} for name, cols in out.items()}


def bands_nested(table: dict, tol: float = 0.0) -> bool:
    """Check 50% within 75% within 90% within 95% for every row of a band table."""
    ok = True
    for cols in table.values():
        for (_, lo_a, up_a), (_, lo_b, up_b) in zip(BAND_PAIRS[:-1], BAND_PAIRS[1:]):
            ok &= bool(np.all(cols[lo_b] <= cols[lo_a] + tol) and np.all(cols[up_a] <= cols[up_b] + tol))
        ok &= bool(np.all(cols["q25"] <= cols["q50"] + tol) and np.all(cols["q50"] <= cols["q75"] + tol))
    return ok


def write_forecast(path, fan):
    """``horizon,quantity,...`` table; quantity ``y`` is the observed count."""
    rows = list(state_band_rows_from_bands(fan.horizons, {"y": fan.observations, **fan.quantities}))
    header = ("horizon",) + BAND_COLUMNS[1:]
    _write_csv(Path(path), header, rows)


__all__ = [
    "IncidenceSeries", "parse_incidence", "load_incidence", "write_incidence", "ExperimentConfig",
    "write_results", "read_manifest", "read_param_history", "read_state_bands", "bands_nested",
    "write_forecast", "PARAM_COLUMNS", "BAND_COLUMNS",
]
