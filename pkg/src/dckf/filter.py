"""Cubature Kalman filter and its desensitized variant.

The desensitized filter carries, for every uncertain parameter ``c_i``, the
sensitivity of the state estimate ``s_i = d x_hat / d c_i`` and of the
covariance ``dP/dc_i`` through both the time and the measurement update, and
picks the gain that minimizes ``trace(P+) + sum_i s_i+^T W_i s_i+`` instead of
``trace(P+)`` alone.  The gain is treated as independent of ``c`` when
differentiating, so the sensitivity recursion is the exact derivative of the
filter with its gain sequence frozen.

Shapes: ``x_hat (..., n)``, ``P (..., n, n)``, sensitivities ``(..., l, n)``,
covariance sensitivities ``(..., l, n, n)``, cubature points ``(..., 2n, n)``
(one point per row), point sensitivities ``(..., l, 2n, n)``.  Leading axes
are independent filters (e.g. Monte Carlo runs) advanced in lockstep; a
single filter simply has no leading axes.
"""

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .errors import ConfigError, DckfError, FilterError
from .linalg import transpose
from .models import NoiseSpec, ParametricModel, jacobians_h, rk4_step, rk4_step_with_tangent

CKF = "CKF"
DCKF = "DCKF"


@dataclass
class FilterConfig:
    """Filter settings.  ``c_ref`` may carry leading batch axes (one value set per filter)."""

    model: ParametricModel
    noise: NoiseSpec
    c_ref: np.ndarray
    weights: Sequence[np.ndarray] = ()
    mode: str = DCKF
    jacobian_mode: str = "analytic"
    # CKF mode may still carry sensitivities for reporting; the gain ignores them
    track_sensitivity: bool = True

    def __post_init__(self):
        self.c_ref = np.atleast_1d(np.asarray(self.c_ref, dtype=float))
        if self.mode not in (CKF, DCKF):
            raise ConfigError(f"mode must be {CKF!r} or {DCKF!r}, got {self.mode!r}")
        if self.jacobian_mode not in ("analytic", "finite-difference"):
            raise ConfigError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        n, ell = self.model.state_dim, self.model.param_dim
        if self.c_ref.shape[-1] != ell:
            raise ConfigError(f"c_ref must have {ell} entries, got shape {self.c_ref.shape}")
        if self.mode == DCKF:
            if not self.track_sensitivity:
                raise ConfigError("DCKF mode requires sensitivity tracking")
            if len(self.weights) != ell:
                raise ConfigError(f"expected {ell} weight matrices, got {len(self.weights)}")
        self.weights = tuple(np.asarray(W, dtype=float) for W in self.weights)
        for W in self.weights:
            if W.shape != (n, n):
                raise ConfigError(f"weight matrices must be {n}x{n}, got {W.shape}")

    @property
    def active_weights(self):
        """Weights entering the gain; all zero in CKF mode."""
        n, ell = self.model.state_dim, self.model.param_dim
        if self.mode == CKF or not self.weights:
            return tuple(np.zeros((n, n)) for _ in range(ell))
        return self.weights


@dataclass
class FilterState:
    """Posterior at one step.  ``sens``/``sens_P`` are ``None`` when not tracked."""

    x_hat: np.ndarray
    P: np.ndarray
    sens: Optional[np.ndarray] = None
    sens_P: Optional[np.ndarray] = None
    step_index: int = 0
    gain: Optional[np.ndarray] = None
    innovation: Optional[np.ndarray] = None
    cost: Optional[np.ndarray] = None

    def take(self, idx):
        """Sub-batch of a batched state (``idx`` indexes the leading axis)."""
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return FilterState(
            self.x_hat[idx], self.P[idx], pick(self.sens), pick(self.sens_P), self.step_index,
            pick(self.gain), pick(self.innovation), pick(self.cost),
        )


@dataclass
class CubatureSet:
    points: np.ndarray
    point_sens: Optional[np.ndarray] = None


@dataclass
class Prior:
    """Output of the time update."""

    x_hat: np.ndarray
    P: np.ndarray
    sens: Optional[np.ndarray]
    sens_P: Optional[np.ndarray]
    propagated: CubatureSet
    step_index: int


@dataclass
class MeasurementUpdateIntermediates:
    z_hat: np.ndarray
    Pzz: np.ndarray
    Pxz: np.ndarray
    points: CubatureSet
    Z: np.ndarray
    gamma: Optional[np.ndarray] = None
    dPzz: Optional[np.ndarray] = None
    dPxz: Optional[np.ndarray] = None
    dZ: Optional[np.ndarray] = field(default=None, repr=False)


def init_state(x0, P0, param_dim, track_sensitivity=True):
    """Initial posterior; sensitivities start at zero since the prior does not depend on ``c``."""
    x0 = np.array(x0, dtype=float)
    P0 = np.array(P0, dtype=float)
    if not track_sensitivity:
        return FilterState(x0, P0)
    batch, n = x0.shape[:-1], x0.shape[-1]
    return FilterState(x0, P0, np.zeros(batch + (param_dim, n)), np.zeros(batch + (param_dim, n, n)))


@lru_cache(maxsize=None)
def cubature_directions(n):
    """Unit directions scaled by sqrt(n): rows are +sqrt(n) e_j then -sqrt(n) e_j."""
    eye = np.sqrt(n) * np.eye(n)
    xi = np.vstack([eye, -eye])
    xi.flags.writeable = False
    return xi


def generate_cubature_points(x_hat, L):
    """Points ``L xi_j + x_hat`` for the 2n cubature directions, one per row."""
    L = np.asarray(L, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    return cubature_directions(L.shape[-1]) @ transpose(L) + x_hat[..., None, :]


def generate_point_sensitivities(dL, s):
    """Point sensitivities ``dL xi_j + s``, one per row.  ``dL``/``s`` may carry leading axes."""
    dL = np.asarray(dL, dtype=float)
    s = np.asarray(s, dtype=float)
    return cubature_directions(dL.shape[-1]) @ transpose(dL) + s[..., None, :]


def _cov(A, a_mean, B, b_mean):
    """(1/N) sum_j (A_j - a)(B_j - b)^T over row-stacked samples."""
    return transpose(A - a_mean[..., None, :]) @ (B - b_mean[..., None, :]) / A.shape[-2]


def _cov_sensitivity(A, a_mean, dA, da_mean, B, b_mean, dB, db_mean):
    """Derivative of ``_cov`` given the derivatives of the samples and their means."""
    return _cov(dA, da_mean, B, b_mean) + _cov(A, a_mean, dB, db_mean)


def _redraw(x_hat, P, sens, sens_P):
    """Cubature points (and their parameter sensitivities) for N(x_hat, P)."""
    L = linalg.cholesky(P)
    points = generate_cubature_points(x_hat, L)
    if sens is None:
        return CubatureSet(points)
    dL = linalg.sqrt_sensitivity(L[..., None, :, :], sens_P)
    return CubatureSet(points, generate_point_sensitivities(dL, sens))


def _point_params(c):
    # one parameter set per filter, shared by its 2n points
    return c[..., None, :]


def time_update(state, cfg, u=None, t=0.0, dt=1.0):
    """Propagate the posterior at ``t`` through one RK4 step to the prior at ``t + dt``."""
    model = cfg.model
    c = _point_params(cfg.c_ref)
    track = cfg.track_sensitivity and state.sens is not None
    drawn = _redraw(state.x_hat, state.P, state.sens if track else None, state.sens_P)

    if track:
        step = rk4_step_with_tangent(model, drawn.points, c, u, t, dt, cfg.jacobian_mode)
        X = step.x_next
        # dX*_ij = phi_x,j dX_ij + phi_c,j[:, i]
        dX = np.einsum("...jab,...ijb->...ija", step.phi_x, drawn.point_sens)
        dX = dX + np.moveaxis(step.phi_c, -1, -3)
    else:
        X = rk4_step(model, drawn.points, c, u, t, dt)
        dX = None

    x_prior = X.mean(axis=-2)
    P_prior = linalg.symmetrize(_cov(X, x_prior, X, x_prior) + cfg.noise.Q)

    sens = sens_P = None
    if track:
        sens = dX.mean(axis=-2)
        Xi, xi = X[..., None, :, :], x_prior[..., None, :]
        sens_P = linalg.symmetrize(_cov_sensitivity(Xi, xi, dX, sens, Xi, xi, dX, sens))
    return Prior(x_prior, P_prior, sens, sens_P, CubatureSet(X, dX), state.step_index + 1)


def measurement_moments(prior, cfg, u=None):
    """Predicted measurement, innovation/cross covariances and their sensitivities."""
    model = cfg.model
    c = _point_params(cfg.c_ref)
    drawn = _redraw(prior.x_hat, prior.P, prior.sens, prior.sens_P)
    X = drawn.points
    Z = np.asarray(model.h(X, c, u), dtype=float)

    z_hat = Z.mean(axis=-2)
    Pzz = linalg.symmetrize(_cov(Z, z_hat, Z, z_hat) + cfg.noise.R)
    Pxz = _cov(X, prior.x_hat, Z, z_hat)
    out = MeasurementUpdateIntermediates(z_hat, Pzz, Pxz, drawn, Z)

    if drawn.point_sens is not None:
        Hx, Hc = jacobians_h(model, X, c, u, cfg.jacobian_mode)
        dX = drawn.point_sens
        dZ = np.einsum("...jab,...ijb->...ija", Hx, dX) + np.moveaxis(Hc, -1, -3)
        gamma = dZ.mean(axis=-2)
        Xi, xi = X[..., None, :, :], prior.x_hat[..., None, :]
        Zi, zi = Z[..., None, :, :], z_hat[..., None, :]
        out.gamma = gamma
        out.dPzz = linalg.symmetrize(_cov_sensitivity(Zi, zi, dZ, gamma, Zi, zi, dZ, gamma))
        out.dPxz = _cov_sensitivity(Xi, xi, dX, prior.sens, Zi, zi, dZ, gamma)
        out.dZ = dZ
    return out


def compute_gain(prior, moments, cfg):
    """CKF gain ``Pxz Pzz^-1``, or the desensitized gain in DCKF mode."""
    # Pzz must factorize in either mode; a failure here means divergence
    linalg.cholesky(moments.Pzz)
    if cfg.mode == CKF:
        return linalg.kalman_gain(moments.Pzz, moments.Pxz)
    return linalg.solve_desensitized_gain(
        moments.Pzz, moments.Pxz, cfg.active_weights, prior.sens, moments.gamma
    )


def posterior_covariance(P_prior, Pxz, Pzz, K):
    return linalg.symmetrize(P_prior - Pxz @ transpose(K) - K @ transpose(Pxz) + K @ Pzz @ transpose(K))


def posterior_sensitivities(prior, moments, K):
    """``s+ = s- - K gamma`` and the matching covariance sensitivities (gain held fixed)."""
    sens = prior.sens - np.einsum("...am,...im->...ia", K, moments.gamma)
    sens_P = posterior_covariance(prior.sens_P, moments.dPxz, moments.dPzz, K[..., None, :, :])
    return sens, sens_P


def desensitized_cost(P_plus, sens, weights):
    """``trace(P) + sum_i s_i^T W_i s_i``; the plain trace when no sensitivities are given."""
    P_plus = np.asarray(P_plus, dtype=float)
    J = np.trace(P_plus, axis1=-2, axis2=-1)
    if sens is not None:
        sens = np.asarray(sens, dtype=float)
        for i, W in enumerate(weights):
            s = sens[..., i, :]
            J = J + np.einsum("...a,ab,...b->...", s, np.asarray(W, dtype=float), s)
    return J


def measurement_update(prior, z, cfg, u=None, gain=None):
    """Fold measurement ``z`` into the prior.

    Args:
        gain: optional fixed gain overriding the one the filter would compute.
            Used to differentiate the filter with its gain sequence frozen.
    """
    moments = measurement_moments(prior, cfg, u)
    K = compute_gain(prior, moments, cfg) if gain is None else np.asarray(gain, dtype=float)
    innovation = np.asarray(z, dtype=float) - moments.z_hat
    x_post = prior.x_hat + (K @ innovation[..., None])[..., 0]
    P_post = posterior_covariance(prior.P, moments.Pxz, moments.Pzz, K)
    sens = sens_P = None
    if moments.gamma is not None:
        sens, sens_P = posterior_sensitivities(prior, moments, K)
    cost = desensitized_cost(P_post, sens, cfg.active_weights)
    return FilterState(x_post, P_post, sens, sens_P, prior.step_index, K, innovation, cost)


def dckf_step(state, cfg, z, u=None, t=0.0, dt=1.0, gain=None):
    """One full filter cycle: time update over ``[t, t + dt]`` then the measurement at ``t + dt``.

    Numerical failures are re-raised as ``FilterError`` carrying the step index.
    """
    try:
        prior = time_update(state, cfg, u, t, dt)
        return measurement_update(prior, z, cfg, u, gain)
    except DckfError as exc:
        if isinstance(exc, FilterError):
            raise
        raise FilterError(exc, step=state.step_index + 1) from exc


def run_filter(cfg, x0, P0, measurements, dt, t0=0.0, u=None, gains=None):
    """Run the filter over ``measurements[k]`` taken at ``t0 + (k + 1) dt``.

    Returns the list of posteriors, one per measurement.
    """
    state = init_state(x0, P0, cfg.model.param_dim, cfg.track_sensitivity)
    out = []
    for k, z in enumerate(measurements):
        K = None if gains is None else gains[k]
        state = dckf_step(state, cfg, z, u, t0 + k * dt, dt, K)
        out.append(state)
    return out


def with_params(cfg, c):
    """Copy of ``cfg`` using parameter values ``c`` instead of the reference."""
    return replace(cfg, c_ref=np.asarray(c, dtype=float))
