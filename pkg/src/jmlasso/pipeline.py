"""Select-then-refit methodology and the multi-replicate study.

1. run SPG-FIM along a decreasing lambda grid, warm-starting each fit from
   the previous solution;
2. score every fit by BIC with a Monte-Carlo marginal likelihood;
3. take the support of the BIC-optimal fit (ties go to the larger lambda);
4. refit without penalty on that support with SG-FIM.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import hazard as hz
from . import marginal as mg
from .exceptions import DomainError
from .model import Dataset, Layout, Theta, flatten, full_latents, individual_grad
from .optimizer import SpgOptions, StepSchedule, sg_fim, spg_fim
from .sampler import IndividualStreams, MhState, mh_step
from .simulator import SimConfig, simulate

log = logging.getLogger(__name__)

REPORT_PARAMS = ("alpha", "gamma1_sq", "gamma2_sq", "mu1", "mu2", "mu3", "sigma_sq")


def scalar_params(theta: Theta) -> dict:
    return {
        "alpha": theta.alpha,
        "gamma1_sq": float(theta.gamma_sq[0]),
        "gamma2_sq": float(theta.gamma_sq[1]),
        "mu1": float(theta.mu[0]),
        "mu2": float(theta.mu[1]),
        "mu3": float(theta.mu[2]),
        "sigma_sq": theta.sigma_sq,
    }


@dataclass
class PathConfig:
    K_select: int = 2000
    warmup: int = 1100
    # budget for fits warm-started from the previous grid point
    K_warm: int = 1000
    warm_warmup: int = 550
    K_refit: int = 2000
    K_pilot: int = 1000
    n_grid: int = 20
    grid_ratio: float = 1e-3
    S: int = 1000
    zero_tol: float = 1e-8
    # "lasso": BIC at the penalised estimate; "refit": at a short unpenalised
    # refit on each distinct path support
    bic_point: str = "lasso"
    K_bic_refit: int = 600
    spg: SpgOptions = field(default_factory=SpgOptions)
    # options for the low-dimensional refit: full FIM
    refit: SpgOptions = field(default_factory=lambda: SpgOptions(beta_block="full"))


@dataclass
class PathRecord:
    lam: float
    theta: Theta | None
    bic: mg.BicRecord | None
    support: tuple
    error: str | None = None


@dataclass
class SelectionPath:
    records: list

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.records])

    def best_index(self) -> int:
        """Index of the BIC minimiser; ties go to the larger lambda."""
        ok = [i for i, r in enumerate(self.records) if r.bic is not None]
        if not ok:
            raise RuntimeError("no lambda on the path produced a fit")
        return min(ok, key=lambda i: (self.records[i].bic.bic, -self.records[i].lam))

    def best(self) -> PathRecord:
        return self.records[self.best_index()]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            names = None
            for r in self.records:
                if r.theta is not None:
                    names = Layout(r.theta.p).names()
                    break
            w.writerow(["lambda", "log_marginal", "mc_se", "k", "bic", "support", "error",
                        *(names or [])])
            for r in self.records:
                b = r.bic
                vals = [f"{x:.17g}" for x in flatten(r.theta)] if r.theta is not None else []
                w.writerow([f"{r.lam:.17g}",
                            f"{b.log_marginal:.17g}" if b else "",
                            f"{b.mc_se:.17g}" if b else "",
                            b.active_count if b else "",
                            f"{b.bic:.17g}" if b else "",
                            " ".join(str(j + 1) for j in r.support),
                            r.error or "", *vals])


def _seed(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(x) for x in parts])


def support_of(beta, zero_tol: float = 1e-8) -> tuple:
    return tuple(int(j) for j in np.flatnonzero(np.abs(beta) > zero_tol))


def lambda_max(data: Dataset, theta0: Theta, config: PathConfig | None = None, seed=0,
               sweeps: int = 200) -> float:
    """Smallest lambda keeping beta at zero, estimated on a pilot fit.

    The pilot is an SG-FIM fit with an empty support. At its solution the
    per-individual beta scores are averaged over ``sweeps`` further MH sweeps;
    with the preconditioned-metric proximal step, beta = 0 is a fixed point
    exactly when every averaged score is at most lambda in magnitude.
    """
    config = config or PathConfig()
    theta, trace = sg_fim(data, theta0, (), config.K_pilot, StepSchedule(config.K_pilot // 2 + 50),
                          _seed(*np.atleast_1d(seed), 1), config.spg)
    rule = hz.gauss_legendre(config.spg.quad_order)
    mh = MhState.initial(trace.final_latents[:, :2], trace.final_proposal_sd)
    streams = IndividualStreams(_seed(*np.atleast_1d(seed), 2), data.n)
    acc = np.zeros(data.p)
    for _ in range(sweeps):
        mh, _ = mh_step(mh, theta, data, streams, rule)
        G = individual_grad(theta, data, full_latents(mh.current, theta.mu[2]), rule)
        acc += G[:, :data.p].mean(axis=0)
    return float(np.max(np.abs(acc / sweeps)))


def lambda_grid(lam_max: float, n: int = 20, ratio: float = 1e-3) -> np.ndarray:
    """Decreasing log-spaced grid from ``lam_max`` to ``lam_max * ratio``."""
    if lam_max <= 0 or n < 1:
        raise DomainError("need lam_max > 0 and n >= 1")
    return np.geomspace(lam_max, lam_max * ratio, n) if n > 1 else np.array([lam_max])


def fit_path(data: Dataset, theta0: Theta, lambda_grid, config: PathConfig | None = None,
             seed=0) -> SelectionPath:
    """SPG-FIM along the grid (largest lambda first) plus BIC for every fit.

    All BIC evaluations share one Monte-Carlo seed so that differences along
    the path are not dominated by sampling noise.
    """
    config = config or PathConfig()
    if config.bic_point not in ("lasso", "refit"):
        raise DomainError(f"bic_point must be 'lasso' or 'refit', got {config.bic_point!r}")
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        raise DomainError("lambda grid is empty")
    refit_cache: dict = {}
    order = np.argsort(-grid, kind="stable")
    seed = tuple(np.atleast_1d(seed))
    bic_seed = _seed(*seed, 3)
    records: list = [None] * len(grid)
    current, opts, first = theta0, config.spg, True
    for step, i in enumerate(order):
        lam = float(grid[i])
        if first:
            K, sched = config.K_select, StepSchedule(config.warmup)
        else:
            K, sched = config.K_warm, StepSchedule(config.warm_warmup)
        try:
            est, trace = spg_fim(data, current, lam, K, sched, _seed(*seed, 4, step), opts)
            if config.bic_point == "lasso":
                rec = mg.bic(est, data, lam, config.S, bic_seed, config.zero_tol)
            else:
                rec = _refit_bic(data, est, trace, lam, config, bic_seed, refit_cache,
                                 _seed(*seed, 7, step))
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("fit failed at lambda=%g: %s", lam, exc)
            records[i] = PathRecord(lam, None, None, (), str(exc))
            continue
        records[i] = PathRecord(lam, est, rec, support_of(est.beta, config.zero_tol))
        current, first = est, False
        opts = replace(config.spg, init_latents=trace.final_latents,
                       init_proposal_sd=trace.final_proposal_sd)
    return SelectionPath(records)


def _refit_bic(data, est, trace, lam, config, bic_seed, cache, seed):
    support = support_of(est.beta, config.zero_tol)
    if support not in cache:
        opts = replace(config.refit, init_latents=trace.final_latents,
                       init_proposal_sd=trace.final_proposal_sd)
        K = config.K_bic_refit
        refit, _ = sg_fim(data, est, support, K, StepSchedule(K // 2), seed, opts)
        cache[support] = mg.bic(refit, data, lam, config.S, bic_seed, config.zero_tol)
    r = cache[support]
    return mg.BicRecord.build(lam, r.log_marginal, len(support), data.n, r.mc_se)


@dataclass
class SelectionResult:
    theta: Theta
    path: SelectionPath
    trace: object
    lam: float
    lasso_theta: Theta
    support: tuple


def select_and_refit(data: Dataset, theta0: Theta, lambda_grid=None,
                     config: PathConfig | None = None, seed=0) -> SelectionResult:
    """BIC-selected support followed by an unpenalised refit on it."""
    config = config or PathConfig()
    seed = tuple(np.atleast_1d(seed))
    if lambda_grid is None:
        lam_max = lambda_max(data, theta0, config, _seed(*seed, 5).generate_state(2))
        lambda_grid = lambda_grid_default(lam_max, config)
    path = fit_path(data, theta0, lambda_grid, config, seed)
    best = path.best()
    if not best.support:
        log.warning("empty support at the selected lambda; refitting with beta = 0")
    theta, trace = sg_fim(data, theta0, best.support, config.K_refit,
                          StepSchedule(config.warmup), _seed(*seed, 6), config.refit)
    return SelectionResult(theta, path, trace, best.lam, best.theta, best.support)


def lambda_grid_default(lam_max: float, config: PathConfig) -> np.ndarray:
    # a little headroom so the first grid point zeroes beta despite MC noise
    return lambda_grid(1.05 * lam_max, config.n_grid, config.grid_ratio)


def initial_theta(reference: Theta, rng, beta_bound: float = 1.0, jitter: float = 0.1,
                  log_var_jitter: float = 0.5) -> Theta:
    """Random starting point around ``reference``.

    beta is drawn uniformly on ``[-beta_bound, beta_bound]``; alpha and mu are
    scaled by ``1 + U(-jitter, jitter)``; variances by ``exp(U(-l, l))``.
    """
    rng = np.random.default_rng(rng)
    scale = lambda n: 1.0 + rng.uniform(-jitter, jitter, n)
    vscale = lambda n: np.exp(rng.uniform(-log_var_jitter, log_var_jitter, n))
    return reference.with_(
        beta=rng.uniform(-beta_bound, beta_bound, reference.p),
        alpha=float(reference.alpha * scale(1)[0]),
        mu=reference.mu * scale(3),
        gamma_sq=reference.gamma_sq * vscale(2),
        sigma_sq=float(reference.sigma_sq * vscale(1)[0]),
    )


@dataclass
class RunResult:
    index: int
    seed: tuple
    theta: Theta | None = None
    lasso_theta: Theta | None = None
    lam: float = float("nan")
    support: tuple = ()
    seconds: float = 0.0
    error: str | None = None


@dataclass
class StudyReport:
    """Aggregates over replicate runs; everything is recomputable from ``runs``."""

    truth: Theta
    runs: list

    @property
    def ok(self) -> list:
        return [r for r in self.runs if r.error is None]

    @property
    def failed(self) -> int:
        return len(self.runs) - len(self.ok)

    def estimates(self, which: str = "refit") -> np.ndarray:
        attr = "theta" if which == "refit" else "lasso_theta"
        return np.array([flatten(getattr(r, attr)) for r in self.ok]).reshape(-1, Layout(self.truth.p).d)

    def scalar_table(self) -> list:
        """Rows of (name, true, mean, sd, relative RMSE) for the scalar parameters."""
        truth = scalar_params(self.truth)
        rows = []
        for name in REPORT_PARAMS:
            est = np.array([scalar_params(r.theta)[name] for r in self.ok])
            t = truth[name]
            if est.size == 0:
                rows.append((name, t, math.nan, math.nan, math.nan))
                continue
            sd = float(est.std(ddof=1)) if est.size > 1 else math.nan
            rmse = float(np.sqrt(np.mean((est - t) ** 2)))
            rows.append((name, t, float(est.mean()), sd, rmse / abs(t) if t != 0 else math.nan))
        return rows

    def selection_frequency(self) -> np.ndarray:
        freq = np.zeros(self.truth.p)
        for r in self.ok:
            freq[list(r.support)] += 1
        return freq / max(len(self.ok), 1)

    def write(self, out_dir) -> None:
        """report.csv, beta.csv, runs.csv, summary.txt and (separately) timings.csv."""
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fmt = lambda x: f"{x:.17g}"
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "true", "mean", "sd", "rel_rmse"])
            for name, *vals in self.scalar_table():
                w.writerow([name, *map(fmt, vals)])
        p = self.truth.p
        refit = self.estimates("refit")[:, :p] if self.ok else np.zeros((0, p))
        lasso = self.estimates("lasso")[:, :p] if self.ok else np.zeros((0, p))
        freq = self.selection_frequency()
        with open(out / "beta.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coordinate", "true", "selection_freq", "mean_refit", "mean_lasso"])
            for j in range(p):
                mr = refit[:, j].mean() if len(refit) else math.nan
                ml = lasso[:, j].mean() if len(lasso) else math.nan
                w.writerow([j + 1, fmt(self.truth.beta[j]), fmt(freq[j]), fmt(mr), fmt(ml)])
        names = Layout(p).names()
        with open(out / "runs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "seed", "status", "lambda", "support",
                        *[f"refit_{n}" for n in names], *[f"lasso_{n}" for n in names]])
            for r in self.runs:
                seed = "-".join(map(str, r.seed))
                if r.error is not None:
                    w.writerow([r.index, seed, "failed: " + r.error])
                    continue
                w.writerow([r.index, seed, "ok", fmt(r.lam), " ".join(str(j + 1) for j in r.support),
                            *map(fmt, flatten(r.theta)), *map(fmt, flatten(r.lasso_theta))])
        with open(out / "timings.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "seconds"])
            for r in self.runs:
                w.writerow([r.index, f"{r.seconds:.3f}"])
        (out / "summary.txt").write_text(self.summary())

    def summary(self) -> str:
        lines = [f"runs: {len(self.runs)} (failed: {self.failed})", "",
                 f"{'parameter':<10} {'true':>12} {'mean':>12} {'rel_rmse':>10}"]
        for name, t, m, _, rr in self.scalar_table():
            lines.append(f"{name:<10} {t:>12.6g} {m:>12.6g} {rr:>10.4g}")
        freq = self.selection_frequency()
        sel = [(j + 1, freq[j]) for j in np.flatnonzero(freq)]
        lines += ["", "selected beta coordinates (frequency):"]
        lines += [f"  beta{j}: {f:.2f}" for j, f in sel] or ["  none"]
        return "\n".join(lines) + "\n"


@dataclass
class StudyConfig:
    sim: SimConfig = field(default_factory=SimConfig.table1)
    path: PathConfig = field(default_factory=PathConfig)
    beta_bound: float = 1.0
    jitter: float = 0.1
    log_var_jitter: float = 0.5


def run_replicate(config: StudyConfig, index: int, seed: tuple) -> RunResult:
    """One simulation plus select-then-refit; failures are captured, not raised."""
    t0 = time.perf_counter()
    ss = np.random.SeedSequence(list(seed))
    sim_ss, init_ss, fit_ss = ss.spawn(3)
    res = RunResult(index, tuple(seed))
    try:
        sim = simulate(replace(config.sim, seed=int(sim_ss.generate_state(1)[0])))
        theta0 = initial_theta(config.sim.theta_true, init_ss, config.beta_bound,
                               config.jitter, config.log_var_jitter)
        sel = select_and_refit(sim.data, theta0, None, config.path,
                               tuple(int(x) for x in fit_ss.generate_state(2)))
        res.theta, res.lasso_theta = sel.theta, sel.lasso_theta
        res.lam, res.support = sel.lam, sel.support
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.warning("replicate %d failed: %s", index, exc)
        res.error = f"{type(exc).__name__}: {exc}"
    res.seconds = time.perf_counter() - t0
    return res


def _run_replicate_args(args):
    return run_replicate(*args)


def replicate_study(config: StudyConfig, R: int, master_seed: int = 0, threads: int = 1,
                    progress=None) -> StudyReport:
    """R independent replicates; results do not depend on ``threads``."""
    if R < 1:
        raise DomainError("R must be >= 1")
    jobs = [(config, r, (int(master_seed), r)) for r in range(R)]
    if threads <= 1:
        runs = []
        for job in jobs:
            runs.append(run_replicate(*job))
            if progress:
                progress(runs[-1])
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            runs = list(ex.map(_run_replicate_args, jobs))
    runs.sort(key=lambda r: r.index)
    return StudyReport(config.sim.theta_true, runs)
