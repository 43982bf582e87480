"""Command-line front end: simulate | fit | select | replicate.

Settings come from built-in defaults, then an optional YAML file
(``--config``), then flags. The resolved settings are echoed to
``config.yaml`` in the output directory; passing that file back with
``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .exceptions import DomainError, NumericError
from .model import Dataset, Theta
from .optimizer import SpgOptions, StepSchedule, sg_fim, spg_fim
from .pipeline import (PathConfig, StudyConfig, initial_theta, replicate_study,
                       scalar_params, select_and_refit)
from .simulator import SimConfig, simulate, table1_theta

log = logging.getLogger("jmlasso")

OUTPUT_ROOT_ENV = "JMLASSO_OUTPUT_ROOT"
EXIT_CONFIG = 2


class ConfigError(Exception):
    """Invalid configuration or missing input; maps to exit code 2."""


_SPG_KEYS = ("damping", "shrinkage", "beta_block", "prox_metric", "identity_iters",
             "identity_step", "target_accept", "adapt_window", "adapt_kappa", "adapt_until",
             "quad_order")
_PATH_KEYS = tuple(f.name for f in fields(PathConfig) if f.name not in ("spg", "refit"))

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": None,
    "data": None,
    "runs": 1,
    "sim": {
        "preset": "table1",
        "n": 100, "j": 20, "p": 100,
        "obs_window": [50.0, 110.0],
        "covariate_bounds": [-1.0, 1.0],
        # missing entries fall back to the preset
        "theta": {},
    },
    "init": {"beta_bound": 1.0, "jitter": 0.1, "log_var_jitter": 0.5},
    "fit": {"lambda": 0.1, "support": None, "iterations": 2000, "warmup": 1100},
    "path": {"grid": "auto", **{k: getattr(PathConfig(), k) for k in _PATH_KEYS}},
    "spg": {k: getattr(SpgOptions(), k) for k in _SPG_KEYS},
    "refit": {k: getattr(SpgOptions(beta_block="full"), k) for k in _SPG_KEYS},
}

_THETA_KEYS = ("a", "b", "alpha", "mu", "gamma_sq", "sigma_sq", "beta")


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{key}'")
        if key == "sim.theta":
            if not isinstance(v, dict):
                raise ConfigError("config key 'sim.theta' must be a mapping")
            bad = sorted(set(v) - set(_THETA_KEYS))
            if bad:
                raise ConfigError(f"unknown config key 'sim.theta.{bad[0]}'")
            out[k] = {**base[k], **v}
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{key}' must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p} must contain a mapping")
    doc.pop("command", None)
    return doc


def _flag_overrides(args) -> dict:
    over: dict = {}

    def put(section, key, value):
        if value is not None:
            (over.setdefault(section, {}) if section else over)[key] = value

    put(None, "seed", args.seed)
    put(None, "threads", args.threads)
    put(None, "out", args.out)
    put(None, "data", getattr(args, "data", None))
    put(None, "runs", getattr(args, "runs", None))
    put("sim", "preset", getattr(args, "preset", None))
    for key in ("n", "j", "p"):
        put("sim", key, getattr(args, key, None))
    put("fit", "lambda", getattr(args, "lam", None))
    sup = getattr(args, "support", None)
    if sup is not None:
        put("fit", "support", _parse_index_list(sup, "--support"))
    put("fit", "iterations", getattr(args, "iterations", None))
    put("fit", "warmup", getattr(args, "warmup", None))
    grid = getattr(args, "grid", None)
    if grid is not None:
        put("path", "grid", "auto" if grid == "auto" else _parse_float_list(grid, "--grid"))
    put("path", "bic_point", getattr(args, "bic_point", None))
    put("path", "S", getattr(args, "mc_samples", None))
    return over


def _parse_index_list(text: str, flag: str) -> list:
    if text.strip() == "":
        return []
    try:
        return [int(s) for s in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from exc


def _parse_float_list(text: str, flag: str) -> list:
    try:
        return [float(s) for s in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects 'auto' or comma-separated numbers") from exc


def resolve(args) -> dict:
    cfg = _merge(DEFAULTS, _load_config(args.config))
    cfg = _merge(cfg, _flag_overrides(args))
    if cfg["out"] is None:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        cfg["out"] = str(Path(root) / f"{args.command}-{cfg['seed']}")
    _check(cfg)
    return cfg


def _check(cfg: dict) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"invalid '{key}': {msg}")

    def is_int(x):
        return isinstance(x, (int, np.integer)) and not isinstance(x, bool)

    need(is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "must be a nonnegative integer")
    need(is_int(cfg["threads"]) and cfg["threads"] >= 1, "threads", "must be an integer >= 1")
    need(is_int(cfg["runs"]) and cfg["runs"] >= 1, "runs", "must be an integer >= 1")
    sim = cfg["sim"]
    need(sim["preset"] == "table1", "sim.preset", "only 'table1' is available")
    for k in ("n", "j", "p"):
        need(is_int(sim[k]) and sim[k] >= 1, f"sim.{k}", f"{k.upper()} must be an integer >= 1")
    fit = cfg["fit"]
    need(isinstance(fit["lambda"], (int, float)) and fit["lambda"] >= 0, "fit.lambda",
         "must be a nonnegative number")
    for k in ("iterations", "warmup"):
        need(is_int(fit[k]) and fit[k] >= (1 if k == "iterations" else 0), f"fit.{k}",
             "must be a positive integer")
    if fit["support"] is not None:
        need(all(is_int(j) and j >= 1 for j in fit["support"]), "fit.support",
             "indices are 1-based positive integers")
    grid = cfg["path"]["grid"]
    need(grid == "auto" or (isinstance(grid, list) and grid and all(
        isinstance(x, (int, float)) and x >= 0 for x in grid)), "path.grid",
        "must be 'auto' or a non-empty list of nonnegative numbers")
    need(cfg["path"]["bic_point"] in ("lasso", "refit"), "path.bic_point", "'lasso' or 'refit'")
    for sec in ("spg", "refit"):
        need(cfg[sec]["beta_block"] in ("diagonal", "full"), f"{sec}.beta_block",
             "'diagonal' or 'full'")
        need(cfg[sec]["prox_metric"] in ("preconditioned", "euclidean"), f"{sec}.prox_metric",
             "'preconditioned' or 'euclidean'")


# -- object construction ----------------------------------------------------

def _theta_from(entries: dict, p: int) -> Theta:
    ref = table1_theta(p) if p >= 4 else table1_theta(4).with_(beta=np.zeros(p))
    beta = ref.beta
    if "beta" in entries:
        given = np.asarray(entries["beta"], dtype=float)
        if given.size > p:
            raise ConfigError(f"invalid 'sim.theta.beta': {given.size} entries for p={p}")
        beta = np.zeros(p)
        beta[:given.size] = given
    try:
        return Theta(
            baseline_a=float(entries.get("a", ref.baseline_a)),
            baseline_b=float(entries.get("b", ref.baseline_b)),
            beta=beta,
            alpha=float(entries.get("alpha", ref.alpha)),
            mu=np.asarray(entries.get("mu", ref.mu), dtype=float),
            gamma_sq=np.asarray(entries.get("gamma_sq", ref.gamma_sq), dtype=float),
            sigma_sq=float(entries.get("sigma_sq", ref.sigma_sq)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid 'sim.theta': {exc}") from exc


def sim_config(cfg: dict, seed: int | None = None) -> SimConfig:
    s = cfg["sim"]
    try:
        return SimConfig(n=s["n"], j=s["j"], p=s["p"], theta_true=_theta_from(s["theta"], s["p"]),
                         obs_window=tuple(float(x) for x in s["obs_window"]),
                         covariate_bounds=tuple(float(x) for x in s["covariate_bounds"]),
                         seed=cfg["seed"] if seed is None else seed)
    except DomainError as exc:
        raise ConfigError(f"invalid 'sim': {exc}") from exc


def spg_options(section: dict) -> SpgOptions:
    return SpgOptions(**section)


def path_config(cfg: dict) -> PathConfig:
    kw = {k: v for k, v in cfg["path"].items() if k != "grid"}
    return PathConfig(**kw, spg=spg_options(cfg["spg"]), refit=spg_options(cfg["refit"]))


# -- dataset bundle ------------------------------------------------------------

def _g(x) -> str:
    return f"{float(x):.17g}"


def write_bundle(out: Path, sim, cfg: dict) -> None:
    data = sim.data
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "longitudinal.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "y"])
        for i in range(data.n):
            for t, y in zip(data.obs_times, data.y[i]):
                w.writerow([i + 1, _g(t), _g(y)])
    with open(out / "survival.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time"])
        for i, t in enumerate(data.survival):
            w.writerow([i + 1, _g(t)])
    with open(out / "covariates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *[f"u{k + 1}" for k in range(data.p)]])
        for i, row in enumerate(data.covariates):
            w.writerow([i + 1, *map(_g, row)])
    with open(out / "latents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "z1", "z2", "z3", "uniform"])
        for i, (z, u) in enumerate(zip(sim.latents, sim.uniforms)):
            w.writerow([i + 1, *map(_g, z), _g(u)])
    meta = {"config": _plain(cfg), "seed": cfg["seed"],
            "theta_true": theta_dict(sim.config.theta_true)}
    (out / "meta.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))


def read_bundle(path) -> tuple[Dataset, dict]:
    d = Path(path)
    for name in ("longitudinal.csv", "survival.csv", "covariates.csv"):
        if not (d / name).is_file():
            raise ConfigError(f"dataset file not found: {d / name}")
    try:
        lon = np.genfromtxt(d / "longitudinal.csv", delimiter=",", skip_header=1, ndmin=2)
        surv = np.genfromtxt(d / "survival.csv", delimiter=",", skip_header=1, ndmin=2)
        cov = np.genfromtxt(d / "covariates.csv", delimiter=",", skip_header=1, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"malformed dataset in {d}: {exc}") from exc
    ids = np.unique(surv[:, 0]).astype(int)
    n = len(ids)
    times = lon[lon[:, 0] == ids[0], 1]
    y = np.empty((n, len(times)))
    for k, i in enumerate(ids):
        rows = lon[lon[:, 0] == i]
        if rows.shape[0] != len(times) or not np.array_equal(rows[:, 1], times):
            raise ConfigError(f"individual {i} does not share the common observation grid")
        y[k] = rows[:, 2]
    order = np.argsort(surv[:, 0])
    cov = cov[np.argsort(cov[:, 0])]
    if not np.array_equal(cov[:, 0].astype(int), ids):
        raise ConfigError("covariates.csv and survival.csv list different ids")
    meta = {}
    if (d / "meta.yaml").is_file():
        meta = yaml.safe_load((d / "meta.yaml").read_text()) or {}
    try:
        data = Dataset(times, y, surv[order, 1], cov[:, 1:])
    except ValueError as exc:
        raise ConfigError(f"invalid dataset in {d}: {exc}") from exc
    return data, meta


def theta_dict(theta: Theta) -> dict:
    return {"a": float(theta.baseline_a), "b": float(theta.baseline_b),
            "alpha": float(theta.alpha), "mu": [float(x) for x in theta.mu],
            "gamma_sq": [float(x) for x in theta.gamma_sq], "sigma_sq": float(theta.sigma_sq),
            "beta": [float(x) for x in theta.beta]}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_estimate(path, theta: Theta) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value"])
        for k, b in enumerate(theta.beta):
            w.writerow([f"beta{k + 1}", _g(b)])
        for name, v in scalar_params(theta).items():
            w.writerow([name, _g(v)])


def _finite(theta: Theta) -> bool:
    return all(np.all(np.isfinite(x)) for x in
               (theta.beta, theta.mu, theta.gamma_sq, [theta.alpha, theta.sigma_sq]))


def _start(cfg: dict, data: Dataset, meta: dict) -> Theta:
    entries = dict(cfg["sim"]["theta"])
    if "theta_true" in meta and not entries:
        entries = meta["theta_true"]
    ref = _theta_from(entries, data.p)
    ini = cfg["init"]
    rng = np.random.default_rng([cfg["seed"], 991])
    return initial_theta(ref, rng, ini["beta_bound"], ini["jitter"], ini["log_var_jitter"])


def _echo(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **_plain(cfg)}
    (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg: dict) -> int:
    out = Path(cfg["out"])
    sim = simulate(sim_config(cfg))
    write_bundle(out, sim, cfg)
    _echo(out, "simulate", cfg)
    print(f"wrote dataset with N={sim.data.n}, J={sim.data.j}, p={sim.data.p} to {out}")
    return 0


def _need_data(cfg: dict):
    if cfg["data"] is None:
        raise ConfigError("invalid 'data': a dataset directory is required")
    return read_bundle(cfg["data"])


def cmd_fit(cfg: dict) -> int:
    data, meta = _need_data(cfg)
    out = Path(cfg["out"])
    fit = cfg["fit"]
    theta0 = _start(cfg, data, meta)
    sched = StepSchedule(fit["warmup"])
    opts = spg_options(cfg["spg"])
    if fit["support"] is not None:
        support = [j - 1 for j in fit["support"]]
        if any(j >= data.p for j in support):
            raise ConfigError(f"invalid 'fit.support': indices must be <= p={data.p}")
        if fit["lambda"] != 0:
            log.warning("--support given: running the unpenalised refit, lambda ignored")
        theta, trace = sg_fim(data, theta0, support, fit["iterations"], sched, cfg["seed"],
                              spg_options(cfg["refit"]))
    else:
        theta, trace = spg_fim(data, theta0, float(fit["lambda"]), fit["iterations"], sched,
                               cfg["seed"], opts)
    _echo(out, "fit", cfg)
    write_estimate(out / "estimate.csv", theta)
    trace.write_csv(out / "trace.csv")
    nz = np.flatnonzero(theta.beta)
    print(f"support: {' '.join(str(j + 1) for j in nz) or '(empty)'}")
    return 0 if _finite(theta) else 1


def cmd_select(cfg: dict) -> int:
    data, meta = _need_data(cfg)
    out = Path(cfg["out"])
    theta0 = _start(cfg, data, meta)
    grid = cfg["path"]["grid"]
    res = select_and_refit(data, theta0, None if grid == "auto" else np.asarray(grid, float),
                           path_config(cfg), cfg["seed"])
    _echo(out, "select", cfg)
    res.path.write_csv(out / "path.csv")
    write_estimate(out / "estimate.csv", res.theta)
    write_estimate(out / "lasso_estimate.csv", res.lasso_theta)
    res.trace.write_csv(out / "refit_trace.csv")
    sup = " ".join(str(j + 1) for j in res.support) or "(empty)"
    (out / "selection.txt").write_text(f"lambda_m: {res.lam:.17g}\nsupport: {sup}\n")
    print(f"lambda_m = {res.lam:.6g}; support: {sup}")
    return 0 if _finite(res.theta) else 1


def cmd_replicate(cfg: dict) -> int:
    out = Path(cfg["out"])
    ini = cfg["init"]
    study = StudyConfig(sim=sim_config(cfg), path=path_config(cfg),
                        beta_bound=ini["beta_bound"], jitter=ini["jitter"],
                        log_var_jitter=ini["log_var_jitter"])
    if cfg["path"]["grid"] != "auto":
        raise ConfigError("invalid 'path.grid': replicate derives its grid per run; use 'auto'")
    report = replicate_study(study, cfg["runs"], cfg["seed"], cfg["threads"],
                             progress=lambda r: log.info("run %d done in %.1fs", r.index, r.seconds))
    _echo(out, "replicate", cfg)
    report.write(out)
    print(report.summary(), end="")
    finite = all(_finite(r.theta) for r in report.ok)
    return 0 if report.ok and finite else 1


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "select": cmd_select,
            "replicate": cmd_replicate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jmlasso", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML settings file (e.g. a previous config.yaml)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>-<seed>)")
    common.add_argument("--threads", type=int, help="worker processes (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset bundle")
    s.add_argument("--preset", choices=["table1"])
    s.add_argument("--n", type=int)
    s.add_argument("--j", type=int)
    s.add_argument("--p", type=int)

    f = sub.add_parser("fit", parents=[common], help="SPG-FIM at one lambda, or a refit")
    f.add_argument("--data", help="dataset bundle directory")
    f.add_argument("--lambda", dest="lam", type=float)
    f.add_argument("--support", help="1-based comma-separated indices; runs the unpenalised refit")
    f.add_argument("--iterations", type=int)
    f.add_argument("--warmup", type=int)

    c = sub.add_parser("select", parents=[common], help="lambda path, BIC selection and refit")
    c.add_argument("--data", help="dataset bundle directory")
    c.add_argument("--grid", help="'auto' or comma-separated lambdas")
    c.add_argument("--bic-point", choices=["lasso", "refit"])
    c.add_argument("--mc-samples", type=int, help="Monte-Carlo draws for the marginal likelihood")

    r = sub.add_parser("replicate", parents=[common], help="multi-replicate simulation study")
    r.add_argument("--runs", type=int)
    r.add_argument("--preset", choices=["table1"])
    r.add_argument("--n", type=int)
    r.add_argument("--j", type=int)
    r.add_argument("--p", type=int)
    r.add_argument("--bic-point", choices=["lasso", "refit"])
    r.add_argument("--mc-samples", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
