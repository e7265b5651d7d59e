"""Monte Carlo comparison of the perfect CKF, the imperfect CKF and the DCKF.

Each run draws true parameters, integrates the truth with them, and synthesizes
one measurement record that every filter in the run consumes (paired
comparison).  The perfect CKF is given the true parameters; the other two only
know the reference values.  Runs are advanced together as one batch per
filter; a run whose filter fails numerically is dropped from that filter's
aggregates and counted.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, DckfError, DegenerateCovariance, FilterError
from .filter import CKF, DCKF, FilterConfig, desensitized_cost, dckf_step, init_state, with_params
from .linalg import PIVOT_RTOL
from .models import MODELS, NoiseSpec, get_model, rk4_step

log = logging.getLogger(__name__)

PERFECT = "perfect-CKF"
IMPERFECT = "imperfect-CKF"
DESENSITIZED = "DCKF"
FILTER_NAMES = (PERFECT, IMPERFECT, DESENSITIZED)

NME_THRESHOLD = 1.96
# runs per batch; fixed so results do not depend on the worker count
CHUNK_RUNS = 50
SCHEMA_VERSION = 1


@dataclass
class ScenarioConfig:
    name: str
    model: str
    duration: float
    dt: float
    mc_runs: int
    rng_seed: int
    param_low: list
    param_high: list
    c_ref: list
    x0_true: list
    x0_hat: list
    P0: list
    Q: list
    R: list
    weights: list
    filters: list = field(default_factory=lambda: list(FILTER_NAMES))
    covariance_jitter: float = 0.0
    jacobian_mode: str = "analytic"
    nme_threshold: float = NME_THRESHOLD
    assumptions: dict = field(default_factory=dict)

    @property
    def steps(self):
        return int(round(self.duration / self.dt))

    def validate(self):
        """Raise ``ConfigError`` naming the first offending key."""

        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.model not in MODELS:
            bad("model", f"unknown model {self.model!r}; known: {sorted(MODELS)}")
        model = get_model(self.model)
        n, m, ell = model.state_dim, model.meas_dim, model.param_dim
        if not np.isfinite(self.dt) or self.dt <= 0:
            bad("dt", f"must be positive, got {self.dt}")
        if not np.isfinite(self.duration) or self.duration <= 0:
            bad("duration", f"must be positive, got {self.duration}")
        if abs(self.duration / self.dt - self.steps) > 1e-9 * max(1.0, self.steps) or self.steps < 1:
            bad("dt", f"{self.dt} does not divide duration {self.duration}")
        if int(self.mc_runs) != self.mc_runs or self.mc_runs < 1:
            bad("mc_runs", f"must be a positive integer, got {self.mc_runs}")
        if int(self.rng_seed) != self.rng_seed or not 0 <= self.rng_seed < 2**64:
            bad("rng_seed", f"must be a 64-bit unsigned integer, got {self.rng_seed}")
        for key, shape in [
            ("param_low", (ell,)), ("param_high", (ell,)), ("c_ref", (ell,)),
            ("x0_true", (n,)), ("x0_hat", (n,)), ("P0", (n, n)), ("Q", (n, n)), ("R", (m, m)),
            ("weights", (ell, n, n)),
        ]:
            try:
                a = np.asarray(getattr(self, key), dtype=float)
            except (TypeError, ValueError):
                bad(key, "must be numeric")
            if a.shape != shape:
                bad(key, f"expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                bad(key, "entries must be finite")
        lo, hi = np.asarray(self.param_low, float), np.asarray(self.param_high, float)
        if np.any(lo > hi):
            bad("param_low", "each lower bound must not exceed its upper bound")
        for key in ("P0", "R"):
            try:
                np.linalg.cholesky(np.asarray(getattr(self, key), float))
            except np.linalg.LinAlgError:
                bad(key, "must be symmetric positive definite")
        for key in ("Q",):
            Q = np.asarray(self.Q, float)
            if np.max(np.abs(Q - Q.T)) > 0 or np.min(np.linalg.eigvalsh(Q)) < -1e-12 * max(1.0, np.abs(Q).max()):
                bad(key, "must be symmetric positive semi-definite")
        unknown = [f for f in self.filters if f not in FILTER_NAMES]
        if unknown or not self.filters:
            bad("filters", f"must be a non-empty subset of {list(FILTER_NAMES)}, got {self.filters}")
        if self.covariance_jitter < 0:
            bad("covariance_jitter", "must be non-negative")
        if self.jacobian_mode not in ("analytic", "finite-difference"):
            bad("jacobian_mode", f"unknown mode {self.jacobian_mode!r}")
        if self.nme_threshold <= 0:
            bad("nme_threshold", "must be positive")
        return self

    def to_dict(self):
        d = {"spec_version": SCHEMA_VERSION}
        d.update(asdict(self))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("spec_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"spec_version: unsupported schema version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown configuration key")
        required = [f.name for f in fields(cls) if f.default is MISSING and f.default_factory is MISSING]
        missing = [k for k in required if k not in d]
        if missing:
            raise ConfigError(f"{missing[0]}: missing required key")
        return cls(**d)


@dataclass
class FilterArtifacts:
    """Per-run logs (``runs x steps x ...``) and their run-aggregates (``steps x ...``)."""

    errors: np.ndarray
    P_diag: np.ndarray
    cost: np.ndarray
    gain_norm: np.ndarray
    sens: Optional[np.ndarray]
    diverged: np.ndarray
    rmse: np.ndarray = None
    mean_abs_sens: Optional[np.ndarray] = None
    mean_cost: np.ndarray = None
    mean_gain_norm: np.ndarray = None
    nme: np.ndarray = None


@dataclass
class RunArtifacts:
    scenario: ScenarioConfig
    times: np.ndarray
    c_true: np.ndarray
    filters: dict
    metadata: dict


def sample_parameters(low, high, rng, size=None):
    """Uniform draws of the true parameter vector."""
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    shape = low.shape if size is None else (size,) + low.shape
    return low + (high - low) * rng.random(shape)


def _psd_sqrt(Q):
    w, V = np.linalg.eigh(Q)
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_runs(cfg, model, run_ids):
    """True parameters, true trajectories and measurements for the given run indices.

    Each run uses its own random stream spawned from the scenario seed, so a
    run's draws do not depend on which other runs share its batch.
    """
    N, n, m = cfg.steps, model.state_dim, model.meas_dim
    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.mc_runs)
    sqrt_R = np.linalg.cholesky(np.asarray(cfg.R, float))
    Q = np.asarray(cfg.Q, float)
    sqrt_Q = _psd_sqrt(Q) if np.any(Q) else None
    c_true, v, w = [], [], []
    for r in run_ids:
        rng = np.random.default_rng(children[r])
        c_true.append(sample_parameters(cfg.param_low, cfg.param_high, rng))
        v.append(rng.standard_normal((N, m)) @ sqrt_R.T)
        w.append(rng.standard_normal((N, n)) @ sqrt_Q.T if sqrt_Q is not None else np.zeros((N, n)))
    c_true, v, w = np.array(c_true), np.array(v), np.array(w)

    x = np.tile(np.asarray(cfg.x0_true, float), (len(run_ids), 1))
    truth = np.empty((len(run_ids), N, n))
    for k in range(N):
        x = rk4_step(model, x, c_true, None, k * cfg.dt, cfg.dt) + w[:, k]
        truth[:, k] = x
    z = model.h(truth, c_true[:, None, :], None) + v
    return c_true, truth, z


def filter_configs(cfg, model, c_true):
    """The three filter variants for one batch of runs."""
    n = model.state_dim
    Q = np.asarray(cfg.Q, float) + cfg.covariance_jitter * np.eye(n)
    noise = NoiseSpec(Q, np.asarray(cfg.R, float))
    weights = [np.asarray(W, float) for W in cfg.weights]
    common = dict(model=model, noise=noise, jacobian_mode=cfg.jacobian_mode)
    return {
        PERFECT: FilterConfig(c_ref=c_true, mode=CKF, **common),
        IMPERFECT: FilterConfig(c_ref=np.asarray(cfg.c_ref, float), mode=CKF, **common),
        DESENSITIZED: FilterConfig(c_ref=np.asarray(cfg.c_ref, float), weights=weights, mode=DCKF, **common),
    }


def _subset(fcfg, idx):
    if fcfg.c_ref.ndim > 1:
        return with_params(fcfg, fcfg.c_ref[idx])
    return fcfg


def _failing_members(exc, state, fcfg, z, t, dt):
    """Batch positions responsible for ``exc``; probes members one by one if unknown."""
    if exc.batch_index:
        return sorted({idx[0] for idx in exc.batch_index})
    bad = []
    for b in range(state.x_hat.shape[0]):
        try:
            dckf_step(state.take([b]), _subset(fcfg, [b]), z[[b]], None, t, dt)
        except DckfError:
            bad.append(b)
    return bad


def run_filter_batch(name, fcfg, cfg, z, weights):
    """Run one filter over a batch of measurement records ``z`` (runs x steps x m)."""
    B, N = z.shape[:2]
    n, ell = fcfg.model.state_dim, fcfg.model.param_dim
    errors_est = np.full((B, N, n), np.nan)
    P_diag = np.full((B, N, n), np.nan)
    cost = np.full((B, N), np.nan)
    gain_norm = np.full((B, N), np.nan)
    sens = np.full((B, N, ell, n), np.nan)
    diverged = np.zeros(B, dtype=bool)

    active = np.arange(B)
    state = init_state(
        np.tile(np.asarray(cfg.x0_hat, float), (B, 1)), np.tile(np.asarray(cfg.P0, float), (B, 1, 1)), ell
    )
    sub = fcfg
    for k in range(N):
        t = k * cfg.dt
        while True:
            try:
                new = dckf_step(state, sub, z[active, k], None, t, cfg.dt)
                break
            except FilterError as exc:
                bad = _failing_members(exc, state, sub, z[active, k], t, cfg.dt)
                if not bad:
                    raise
                log.warning("%s: dropping runs %s at step %d (%s)", name, list(active[bad]), k + 1, exc)
                keep = np.setdiff1d(np.arange(len(active)), bad)
                diverged[active[bad]] = True
                active = active[keep]
                state = state.take(keep)
                sub = _subset(sub, keep)
                if len(active) == 0:
                    break
        if len(active) == 0:
            break
        state = new
        errors_est[active, k] = state.x_hat
        P_diag[active, k] = np.diagonal(state.P, axis1=-2, axis2=-1)
        gain_norm[active, k] = np.sqrt(np.sum(state.gain**2, axis=(-2, -1)))
        sens[active, k] = state.sens
        if name == PERFECT:
            cost[active, k] = np.trace(state.P, axis1=-2, axis2=-1)
        else:
            cost[active, k] = desensitized_cost(state.P, state.sens, weights)
    return errors_est, P_diag, cost, gain_norm, sens, diverged


def _run_chunk(args):
    cfg, run_ids = args
    model = get_model(cfg.model)
    c_true, truth, z = simulate_runs(cfg, model, run_ids)
    fcfgs = filter_configs(cfg, model, c_true)
    weights = [np.asarray(W, float) for W in cfg.weights]
    out = {}
    for name in cfg.filters:
        est, P_diag, cost, gain_norm, sens, diverged = run_filter_batch(name, fcfgs[name], cfg, z, weights)
        out[name] = (est - truth, P_diag, cost, gain_norm, sens, diverged)
    return c_true, out


def nme_statistic(errors, P):
    """Normalized mean error per step and state.

    ``|mean_r e_r| / sqrt(mean_r P_r,jj / M)``: the across-run mean error
    divided by the standard error of the mean the filters claim.

    Args:
        errors: ``(M, N, n)`` estimation errors.
        P: ``(M, N, n)`` covariance diagonals or ``(M, N, n, n)`` covariances.

    Returns:
        ``(N, n)`` statistics, to be compared against a normal quantile.
    """
    errors = np.asarray(errors, dtype=float)
    P = np.asarray(P, dtype=float)
    if P.ndim == errors.ndim + 1:
        P = np.diagonal(P, axis1=-2, axis2=-1)
    M = errors.shape[0]
    if M < 2:
        raise ValueError(f"the NME test needs at least 2 runs, got {M}")
    P_bar = P.mean(axis=0)
    if np.any(P_bar <= 0):
        raise DegenerateCovariance("mean filter variance is not positive")
    return np.abs(errors.mean(axis=0)) / np.sqrt(P_bar / M)


def _aggregate(fa):
    """Streaming per-step aggregates over the valid runs, accumulated in run order."""
    M, N, n = fa.errors.shape
    sq = np.zeros((N, n))
    err_sum = np.zeros((N, n))
    P_sum = np.zeros((N, n))
    cost_sum = np.zeros(N)
    gain_sum = np.zeros(N)
    sens_sum = np.zeros(fa.sens.shape[1:]) if fa.sens is not None else None
    count = 0
    for r in range(M):
        if fa.diverged[r]:
            continue
        e = fa.errors[r]
        sq += e * e
        err_sum += e
        P_sum += fa.P_diag[r]
        cost_sum += fa.cost[r]
        gain_sum += fa.gain_norm[r]
        if sens_sum is not None:
            sens_sum += np.abs(fa.sens[r])
        count += 1
    if count == 0:
        raise FilterError(DckfError("every run diverged"))
    fa.rmse = np.sqrt(sq / count)
    fa.mean_cost = cost_sum / count
    fa.mean_gain_norm = gain_sum / count
    fa.mean_abs_sens = None if sens_sum is None else sens_sum / count
    if count >= 2:
        P_bar = P_sum / count
        if np.any(P_bar <= 0):
            raise DegenerateCovariance("mean filter variance is not positive")
        fa.nme = np.abs(err_sum / count) / np.sqrt(P_bar / count)
    else:
        fa.nme = np.full((N, n), np.nan)
    return fa


def design_metadata(cfg):
    """Defaults and assumptions in force for a run, for the metadata record."""
    return {
        "sensitivity_initialization": "s0 = 0, dP0/dc = 0",
        "gain_sensitivity": "dK/dc = 0 (gain held fixed when differentiating)",
        "sqrt_factor_convention": "lower-triangular Cholesky; factor derivative is its unique triangular solution",
        "cholesky_pivot_rtol": PIVOT_RTOL,
        "cholesky_pivot_reference": "own diagonal entry",
        "tangent_propagation": "variational RK4" if cfg.jacobian_mode == "analytic" else "central finite differences",
        "jacobian_mode": cfg.jacobian_mode,
        "noise_parameter_dependence": "dQ/dc = dR/dc = 0",
        "covariance_jitter": cfg.covariance_jitter,
        "covariance_update": "P+ = P- - Pxz K^T - K Pxz^T + K Pzz K^T, then symmetrized",
        "nme_definition": "|mean error| / sqrt(mean P_jj / M), two-sided normal threshold",
        "nme_threshold": cfg.nme_threshold,
        "measurement_pairing": "one measurement record per run shared by all filters",
        "diverged_runs": "excluded from aggregates and counted",
        "cost_perfect_ckf": "trace(P+)",
        "cost_other_filters": "trace(P+) + sum_i s_i^T W_i s_i",
        "truth_integration": "RK4 on the filter grid",
        "weights_constant_in_time": True,
        "assumptions": dict(cfg.assumptions),
    }


def run_scenario(cfg, jobs=1):
    """Run every configured filter over ``cfg.mc_runs`` Monte Carlo runs."""
    cfg.validate()
    chunks = [
        (cfg, list(range(s, min(s + CHUNK_RUNS, cfg.mc_runs)))) for s in range(0, cfg.mc_runs, CHUNK_RUNS)
    ]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_chunk, chunks))
    else:
        results = [_run_chunk(c) for c in chunks]

    c_true = np.concatenate([r[0] for r in results])
    filters = {}
    for name in cfg.filters:
        parts = [r[1][name] for r in results]
        err, P_diag, cost, gain_norm, sens, diverged = (np.concatenate(p) for p in zip(*parts))
        filters[name] = _aggregate(FilterArtifacts(err, P_diag, cost, gain_norm, sens, diverged))

    times = cfg.dt * np.arange(1, cfg.steps + 1)
    metadata = {
        "version": __version__,
        "scenario": cfg.name,
        "seed": int(cfg.rng_seed),
        "mc_runs": int(cfg.mc_runs),
        "steps": cfg.steps,
        "diverged_runs": {name: int(filters[name].diverged.sum()) for name in cfg.filters},
        "config": cfg.to_dict(),
        "defaults": design_metadata(cfg),
    }
    return RunArtifacts(cfg, times, c_true, filters, metadata)


def summarize(artifacts):
    """Flatten per-step aggregates into per-filter scalars.

    Returns rows ``{"filter", "component", "metric", "value"}`` in a fixed
    order: filters as configured, then states, then metrics.
    """
    cfg = artifacts.scenario
    labels = get_model(cfg.model).labels()
    rows = []

    def add(f, comp, metric, value):
        rows.append({"filter": f, "component": comp, "metric": metric, "value": float(value)})

    for name, fa in artifacts.filters.items():
        for j, lab in enumerate(labels):
            add(name, lab, "rmse", fa.rmse[:, j].mean())
            if fa.mean_abs_sens is not None:
                for i in range(fa.mean_abs_sens.shape[1]):
                    add(name, lab, f"mean_abs_sensitivity_c{i + 1}", fa.mean_abs_sens[:, i, j].mean())
            add(name, lab, "nme", fa.nme[:, j].mean())
            add(name, lab, "nme_violation_fraction", np.mean(fa.nme[:, j] > cfg.nme_threshold))
        add(name, "all", "mean_cost", fa.mean_cost.mean())
        add(name, "all", "gain_norm", fa.mean_gain_norm.mean())
        add(name, "all", "diverged_runs", fa.diverged.sum())
    return rows


def summary_value(rows, filter_name, component, metric):
    for r in rows:
        if (r["filter"], r["component"], r["metric"]) == (filter_name, component, metric):
            return r["value"]
    raise KeyError((filter_name, component, metric))
