"""Command-line entry point: ``esmc2 {simulate,fit,forecast,bench,liuwest}``.

Exit status: 0 on success, 2 for configuration or data errors, 3 when a run
degenerates (partial outputs are written and flagged in the manifest).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, smc2
from .errors import ConfigError, DataValidationError, DegenerateWeightsError, DomainError, SingularProposalError
from .io import (
    PARAM_COLUMNS, ExperimentConfig, _write_csv, param_history_rows, read_manifest, write_forecast, write_results,
)
from .liuwest import liu_west_filter
from .model import STATE_FIELDS, Z
from .products import forecast, marginal_state_posterior, metrics
from .scenarios import SCENARIOS

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE = 0, 2, 3

# flag -> config key
FLAG_KEYS = {
    "engine": "engine", "ntheta": "ntheta", "nx": "nx", "moves": "moves", "ess_threshold": "ess_threshold",
    "proposal_scale": "proposal_scale", "eta": "eta", "obs": "obs", "rho": "rho", "seed": "seed",
    "out": "out", "example": "example", "data": "data", "aggregate_weekly": "aggregate_weekly",
    "horizon": "horizon", "workers": "workers", "nc": "nc", "T": "T", "prior_preset": "prior_preset",
    "delta": "delta",
}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--manifest", help="rerun from the config echoed in a manifest.json")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--engine", choices=["enkf", "bpf"])
    p.add_argument("--ntheta", type=int)
    p.add_argument("--nx", type=int)
    p.add_argument("--moves", type=int, help="PMMH moves R per rejuvenation")
    p.add_argument("--ess-threshold", dest="ess_threshold", type=float)
    p.add_argument("--proposal-scale", dest="proposal_scale",
                   help="proposal covariance multiplier c (number or 'optimal' for 2.38^2/d)")
    p.add_argument("--eta", type=float)
    p.add_argument("--obs", choices=["poisson", "negbin"])
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--example", choices=sorted(SCENARIOS))
    p.add_argument("--data", help="incidence CSV (date,count)")
    p.add_argument("--aggregate-weekly", dest="aggregate_weekly", action="store_const", const=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--nc", type=int, help="parameter draws for the marginal state posterior")
    p.add_argument("--T", type=int, help="use only the first T observations")
    p.add_argument("--prior-preset", dest="prior_preset", choices=["informative", "flat", "mpox"])
    p.add_argument("--delta", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esmc2", description="Sequential Bayesian inference for SEIR models")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("simulate", "simulate a built-in example"),
        ("fit", "run SMC^2 with the configured inner filter"),
        ("forecast", "forecast from a fit checkpoint"),
        ("bench", "run both engines on the same data and compare"),
        ("liuwest", "run the Liu-West filter"),
    ]:
        p = sub.add_parser(name, help=text)
        _add_common(p)
        if name == "forecast":
            p.add_argument("--checkpoint", required=True, help="output directory of a fit")
            p.add_argument("--diffusive", action="store_true", help="keep the log-beta random walk")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.manifest:
        cfg = ExperimentConfig.from_dict(read_manifest(args.manifest)["config"])
    elif args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if key == "example":
            cfg.data = None
        if key == "data":
            cfg.example = None
        cfg.set(key, value)
    if args.proposal_scale is not None:
        if str(args.proposal_scale).lower() == "optimal":
            cfg.proposal_scale = 2.38**2 / cfg.prior_spec().dim
        else:
            cfg.set("proposal_scale", args.proposal_scale)
    if cfg.example is None and cfg.data is None:
        cfg.example = "example1"
    return cfg.validate()


def _write_path_csv(path: Path, latent: np.ndarray):
    rows = ([t] + list(latent[t]) + [float(np.exp(latent[t, -1]))] for t in range(latent.shape[0]))
    _write_csv(path, ("t",) + STATE_FIELDS + ("beta",), rows)


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    y, latent = cfg.load_observations()
    if latent is None:
        raise ConfigError("simulate needs --example")
    _write_path_csv(out / "latent_path.csv", latent)
    _write_csv(out / "observations.csv", ("t", "count"), ([t + 1, int(c)] for t, c in enumerate(y)))
    scen = SCENARIOS[cfg.example]
    manifest = {"command": "simulate", "config": cfg.to_dict(), "truth": scen.truth.as_dict(),
                "files": ["latent_path.csv", "observations.csv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(y)} observations to {out}")
    return EXIT_OK


def _fit(cfg: ExperimentConfig, engine_name: str, y, out: Path | None):
    cfg_e = ExperimentConfig.from_dict(cfg.to_dict())
    cfg_e.engine = engine_name
    model = cfg_e.model()
    engine = cfg_e.make_engine(model)
    prior = cfg_e.prior_spec()
    try:
        res = smc2.run(y, prior, engine, cfg_e.ntheta, R=cfg_e.moves, ess_threshold=cfg_e.ess_threshold,
                       rng=cfg_e.seed, proposal_scale=cfg_e.proposal_scale)
    except DegenerateWeightsError as exc:
        if out is not None:
            partial = smc2.RunResult(None, getattr(exc, "history", None) or [], exc.diagnostics, engine, y)
            _write_partial(partial, out, cfg_e, str(exc))
        raise
    sp = None
    if res.history and cfg_e.nc > 0:
        sp = marginal_state_posterior(y, res.particles.theta, res.particles.weights, prior, engine,
                                      cfg_e.nc, rng=cfg_e.seed)
    return res, sp, cfg_e


def _write_partial(result, out: Path, cfg: ExperimentConfig, message: str):
    out.mkdir(parents=True, exist_ok=True)
    if result.history:
        _write_csv(out / "param_history.csv", PARAM_COLUMNS, param_history_rows(result.history))
    diag = result.diagnostics.as_dict() if hasattr(result.diagnostics, "as_dict") else {}
    manifest = {"status": "degenerate", "message": message, "config": cfg.to_dict(), "seed": cfg.seed,
                "files": ["param_history.csv"] if result.history else [], "diagnostics": diag}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_fit(cfg: ExperimentConfig, args) -> int:
    y, latent = cfg.load_observations()
    out = Path(cfg.out)
    res, sp, _ = _fit(cfg, cfg.engine, y, out)
    extra = {"command": "fit", "n_obs": int(y.size)}
    if sp is not None:
        inc = sp.quantities["incidence"]
        extra["incidence_vs_obs"] = metrics(inc.mean, y, inc.lower[0.95], inc.upper[0.95])
    write_results(res, out, cfg.to_dict(), sp, extra)
    last = res.history[-1].params if res.history else {}
    for name, s in last.items():
        print(f"{name:8s} mean={s['mean']:.4f} sd={s['sd']:.4f} 95%=[{s['q2.5']:.4f}, {s['q97.5']:.4f}]")
    print(f"{cfg.engine}: {res.diagnostics.total_seconds:.1f}s, "
          f"{len(res.diagnostics.rejuvenation_times)} rejuvenations; results in {out}")
    return EXIT_OK


def cmd_forecast(cfg: ExperimentConfig, args) -> int:
    src = Path(args.checkpoint)
    manifest = read_manifest(src)
    fit_cfg = ExperimentConfig.from_dict(manifest["config"])
    ck = np.load(src / "checkpoint.npz")
    if "fc_states" not in ck:
        raise ConfigError("checkpoint has no end-of-series ensembles (fit with nc >= 1)")
    model = fit_cfg.model()
    prior = fit_cfg.prior_spec()
    theta = prior.to_params(ck["fc_theta"], trailing=1)
    fan = forecast(ck["fc_states"], theta, model, cfg.horizon, rng=cfg.seed, weights=ck["fc_weights"],
                   diffusive=args.diffusive)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_forecast(out / "forecast.csv", fan)
    man = {"command": "forecast", "checkpoint": str(src), "config": cfg.to_dict(), "fit_config": fit_cfg.to_dict(),
           "horizon": cfg.horizon, "diffusive": bool(args.diffusive), "files": ["forecast.csv"]}
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    lo, up = fan.observations.lower[0.95], fan.observations.upper[0.95]
    for h in range(cfg.horizon):
        print(f"h={h + 1:3d} mean={fan.observations.mean[h]:9.2f} 95%=[{lo[h]:.0f}, {up[h]:.0f}]")
    return EXIT_OK


def _bench_row(name, res, sp, y, latent, truth):
    row = {"method": name, "cpu_seconds": res.diagnostics.total_seconds,
           "rejuvenations": len(res.diagnostics.rejuvenation_times),
           "acceptance": res.diagnostics.mean_acceptance}
    last = res.history[-1].params
    for p, s in last.items():
        row[f"{p}_mean"] = s["mean"]
        row[f"{p}_sd"] = s["sd"]
    inc = res.state_trace("incidence")
    m = metrics(inc, y)
    row["incidence_MAE_obs"], row["incidence_RMSE_obs"] = m["MAE"], m["RMSE"]
    if latent is not None:
        m = metrics(inc, latent[1:, Z])
        row["incidence_MAE_truth"], row["incidence_RMSE_truth"] = m["MAE"], m["RMSE"]
        beta_true = np.exp(latent[1:, -1])
        m = metrics(res.state_trace("beta"), beta_true)
        row["beta_MAE"], row["beta_RMSE"] = m["MAE"], m["RMSE"]
        reff_true = beta_true * latent[1:, 0] / (truth.gamma * latent[1:, :4].sum(axis=1))
        m = metrics(res.state_trace("Reff"), reff_true)
        row["Reff_MAE"], row["Reff_RMSE"] = m["MAE"], m["RMSE"]
        for p in ("alpha", "gamma"):
            if p in last:
                row[f"{p}_abs_error"] = abs(last[p]["mean"] - getattr(truth, p))
    return row


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    y, latent = cfg.load_observations()
    out = Path(cfg.out)
    truth = SCENARIOS[cfg.example].truth if cfg.example else None
    rows, status = [], "ok"
    for name in ("enkf", "bpf"):
        try:
            res, _, _ = _fit(cfg, name, y, None)
        except DegenerateWeightsError as exc:
            rows.append({"method": name, "error": str(exc)})
            status = "degenerate"
            continue
        rows.append(_bench_row("eSMC2" if name == "enkf" else "SMC2", res, None, y, latent, truth))
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in rows for k in r} - {"method"})
    _write_csv(out / "bench.csv", ("method",) + tuple(keys),
               ([r["method"]] + [r.get(k, "") if isinstance(r.get(k, ""), str) else r[k] for k in keys]
                for r in rows))
    ratio = None
    if all("cpu_seconds" in r for r in rows):
        ratio = rows[1]["cpu_seconds"] / rows[0]["cpu_seconds"]
    man = {"command": "bench", "status": status, "config": cfg.to_dict(), "rows": rows,
           "wallclock_ratio_smc2_over_esmc2": ratio, "files": ["bench.csv"]}
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=float) + "\n")
    for r in rows:
        if "error" in r:
            print(f"{r['method']:6s} FAILED: {r['error']}")
            continue
        print(f"{r['method']:6s} cpu={r['cpu_seconds']:.1f}s incidence MAE(obs)={r['incidence_MAE_obs']:.3f} "
              + " ".join(f"{p}={r[p + '_mean']:.4f}({r[p + '_sd']:.4f})" for p in ("alpha", "gamma") if p + "_mean" in r))
    if ratio is not None:
        print(f"wall-clock ratio SMC2/eSMC2 = {ratio:.2f}")
    return EXIT_OK if status == "ok" else EXIT_DEGENERATE


def cmd_liuwest(cfg: ExperimentConfig, args) -> int:
    y, _ = cfg.load_observations()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = liu_west_filter(y, cfg.prior_spec(), cfg.model(), cfg.nx, cfg.delta, rng=cfg.seed)
    seconds = time.perf_counter() - t0
    _write_csv(out / "param_history.csv", PARAM_COLUMNS, param_history_rows(res.history))
    man = {"command": "liuwest", "config": cfg.to_dict(), "seconds": seconds, "files": ["param_history.csv"]}
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    for name, s in res.history[-1].params.items():
        print(f"{name:8s} mean={s['mean']:.4f} 95%=[{s['q2.5']:.4f}, {s['q97.5']:.4f}]")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "forecast": cmd_forecast, "bench": cmd_bench,
            "liuwest": cmd_liuwest}


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DataValidationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateWeightsError, SingularProposalError) as exc:
        print(f"run degenerated: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


def main(argv=None):
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
