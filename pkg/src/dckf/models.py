"""Parametric system models and the RK4 discretization with tangent propagation.

Model callables take a state ``x`` of shape ``(..., n)`` and parameters ``c``
of shape ``(..., l)`` whose leading axes broadcast against those of ``x``
(a plain ``(l,)`` vector is shared by every state).  Jacobians carry the
batch axes in front: ``dfdx`` returns ``(..., n, n)``, ``dfdc`` returns
``(..., n, l)``.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteState

FD_REL_STEP = 1e-6


@dataclass(frozen=True)
class ParametricModel:
    """Continuous-time dynamics ``x' = f(x, c, u, t)`` with measurement ``z = h(x, c, u)``.

    Jacobians may be omitted; the filter then falls back to central finite
    differences.
    """

    name: str
    state_dim: int
    meas_dim: int
    param_dim: int
    f_cont: Callable
    h: Callable
    dfdx: Optional[Callable] = None
    dfdc: Optional[Callable] = None
    dhdx: Optional[Callable] = None
    dhdc: Optional[Callable] = None
    state_labels: tuple = ()

    @property
    def has_analytic_jacobians(self):
        return None not in (self.dfdx, self.dfdc, self.dhdx, self.dhdc)

    def labels(self):
        return self.state_labels or tuple(f"x{j + 1}" for j in range(self.state_dim))


@dataclass(frozen=True)
class NoiseSpec:
    """Discrete-time process noise ``Q`` (n x n) and measurement noise ``R`` (m x m)."""

    Q: np.ndarray
    R: np.ndarray


@dataclass
class DiscreteStepResult:
    x_next: np.ndarray
    phi_x: np.ndarray
    phi_c: np.ndarray


def _fd_steps(v):
    return FD_REL_STEP * np.maximum(1.0, np.abs(v))


def fd_jacobian_x(fun, x, *args):
    """Central-difference Jacobian of ``fun(x, *args)`` w.r.t. the last axis of ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.shape[-1]):
        h = _fd_steps(x[..., j])
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        cols.append((fun(xp, *args) - fun(xm, *args)) / (2.0 * h[..., None]))
    return np.stack(cols, axis=-1)


def fd_jacobian_c(fun, x, c, *args):
    """Central-difference Jacobian of ``fun(x, c, *args)`` w.r.t. ``c``."""
    c = np.asarray(c, dtype=float)
    cols = []
    for i in range(c.shape[-1]):
        h = _fd_steps(c[..., i])
        cp = c.copy()
        cm = c.copy()
        cp[..., i] += h
        cm[..., i] -= h
        cols.append((fun(x, cp, *args) - fun(x, cm, *args)) / (2.0 * h[..., None]))
    return np.stack(cols, axis=-1)


def jacobians_f(model, x, c, u, t, mode="analytic"):
    if mode == "analytic" and model.dfdx is not None and model.dfdc is not None:
        return model.dfdx(x, c, u, t), model.dfdc(x, c, u, t)
    return (
        fd_jacobian_x(lambda xx: model.f_cont(xx, c, u, t), x),
        fd_jacobian_c(lambda xx, cc: model.f_cont(xx, cc, u, t), x, c),
    )


def jacobians_h(model, x, c, u, mode="analytic"):
    if mode == "analytic" and model.dhdx is not None and model.dhdc is not None:
        return model.dhdx(x, c, u), model.dhdc(x, c, u)
    return (
        fd_jacobian_x(lambda xx: model.h(xx, c, u), x),
        fd_jacobian_c(lambda xx, cc: model.h(xx, cc, u), x, c),
    )


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteState("RK4 stage produced a non-finite value")


def rk4_step(model, x, c, u, t, dt):
    """One classic fourth-order Runge-Kutta step of the continuous dynamics."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    f = model.f_cont
    k1 = f(x, c, u, t)
    k2 = f(x + 0.5 * dt * k1, c, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, c, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, c, u, t + dt)
    _check_finite(k1, k2, k3, k4)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_with_tangent(model, x, c, u, t, dt, jacobian_mode="analytic"):
    """RK4 step plus its exact Jacobians w.r.t. the state and the parameters.

    The stage Jacobians are chained through the stage arguments (variational
    RK4), so ``phi_x``/``phi_c`` are the derivatives of the discrete map that
    ``rk4_step`` actually computes.  With ``jacobian_mode="finite-difference"``
    they are instead central differences of ``rk4_step``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)

    if jacobian_mode != "analytic" or model.dfdx is None or model.dfdc is None:
        x_next = rk4_step(model, x, c, u, t, dt)
        phi_x = fd_jacobian_x(lambda xx: rk4_step(model, xx, c, u, t, dt), x)
        phi_c = fd_jacobian_c(lambda xx, cc: rk4_step(model, xx, cc, u, t, dt), x, c)
        return DiscreteStepResult(x_next, phi_x, phi_c)

    n = x.shape[-1]
    eye = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n))
    f, fx, fc = model.f_cont, model.dfdx, model.dfdc

    def stage(xs, ts, dx_prev, dc_prev, a):
        # stage argument xs = x + a*dt*k_prev; its tangents are I + a*dt*dk_prev, a*dt*dc_prev
        A = fx(xs, c, u, ts)
        C = fc(xs, c, u, ts)
        if dx_prev is None:
            return A, C
        return A @ (eye + a * dt * dx_prev), A @ (a * dt * dc_prev) + C

    k1 = f(x, c, u, t)
    k2 = f(x + 0.5 * dt * k1, c, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, c, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, c, u, t + dt)
    _check_finite(k1, k2, k3, k4)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    d1x, d1c = stage(x, t, None, None, 0.0)
    d2x, d2c = stage(x + 0.5 * dt * k1, t + 0.5 * dt, d1x, d1c, 0.5)
    d3x, d3c = stage(x + 0.5 * dt * k2, t + 0.5 * dt, d2x, d2c, 0.5)
    d4x, d4c = stage(x + dt * k3, t + dt, d3x, d3c, 1.0)
    phi_x = eye + (dt / 6.0) * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
    phi_c = (dt / 6.0) * (d1c + 2.0 * d2c + 2.0 * d3c + d4c)
    _check_finite(phi_x, phi_c)
    return DiscreteStepResult(x_next, phi_x, phi_c)


def propagate_with_tangent(model, x, c, u, t, dt, steps, jacobian_mode="analytic"):
    """Compose ``steps`` RK4 steps, accumulating the flow Jacobians."""
    x = np.asarray(x, dtype=float)
    n, ell = model.state_dim, model.param_dim
    phi_x = np.eye(n)
    phi_c = np.zeros((n, ell))
    for k in range(steps):
        r = rk4_step_with_tangent(model, x, c, u, t + k * dt, dt, jacobian_mode)
        phi_c = r.phi_x @ phi_c + r.phi_c
        phi_x = r.phi_x @ phi_x
        x = r.x_next
    return DiscreteStepResult(x, phi_x, phi_c)


# --- falling body with range-only radar -------------------------------------

FALLING_BODY_G = 32.2  # ft/s^2
RADAR_M = 1e5  # ft, horizontal offset of the radar from the fall line
RADAR_H = 1e5  # ft, radar altitude


def _fb_drag(x, c):
    return x[..., 1] ** 2 * x[..., 2] * np.exp(-x[..., 0] / c[..., 0])


def _fb_f(x, c, u, t):
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    out = np.zeros_like(x)
    out[..., 0] = x[..., 1]
    out[..., 1] = _fb_drag(x, c) - FALLING_BODY_G
    return out


def _fb_dfdx(x, c, u, t):
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    e = np.exp(-x[..., 0] / c[..., 0])
    J = np.zeros(x.shape + (3,))
    J[..., 0, 1] = 1.0
    J[..., 1, 0] = -x[..., 1] ** 2 * x[..., 2] * e / c[..., 0]
    J[..., 1, 1] = 2.0 * x[..., 1] * x[..., 2] * e
    J[..., 1, 2] = x[..., 1] ** 2 * e
    return J


def _fb_dfdc(x, c, u, t):
    x = np.asarray(x, dtype=float)
    c = np.asarray(c, dtype=float)
    J = np.zeros(x.shape + (1,))
    J[..., 1, 0] = _fb_drag(x, c) * x[..., 0] / c[..., 0] ** 2
    return J


def _fb_h(x, c, u):
    x = np.asarray(x, dtype=float)
    return np.sqrt(RADAR_M**2 + (x[..., 0] - RADAR_H) ** 2)[..., None]


def _fb_dhdx(x, c, u):
    x = np.asarray(x, dtype=float)
    J = np.zeros(x.shape[:-1] + (1, 3))
    J[..., 0, 0] = (x[..., 0] - RADAR_H) / _fb_h(x, c, u)[..., 0]
    return J


def _fb_dhdc(x, c, u):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1] + (1, 1))


def falling_body_model():
    """Vertically falling body: altitude, velocity, ballistic coefficient.

    The drag term ``x2^2 x3 exp(-x1/c)`` depends on the uncertain density
    scale height ``c``.  Range is measured by a radar offset ``M`` from the
    fall line at altitude ``H``.
    """
    return ParametricModel(
        name="falling-body",
        state_dim=3,
        meas_dim=1,
        param_dim=1,
        f_cont=_fb_f,
        h=_fb_h,
        dfdx=_fb_dfdx,
        dfdc=_fb_dfdc,
        dhdx=_fb_dhdx,
        dhdc=_fb_dhdc,
        state_labels=("x1", "x2", "x3"),
    )


# --- hovering helicopter under LQR feedback ---------------------------------

HELI_G = 0.322
HELI_B = np.array([0.086, -7.408, 0.0, 0.0])
HELI_K_LQR = np.array([1.989, -0.256, -0.7589, 1.0])


_HELI_A_FIXED = np.array(
    [
        [0.0, 0.0, -HELI_G, 0.0],
        [1.26, -1.765, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ]
) - np.outer(HELI_B, HELI_K_LQR)


def helicopter_system_matrix(c):
    """Closed-loop matrix ``A(c) - B K_lqr``; ``c`` of shape ``(..., 2)`` gives ``(..., 4, 4)``."""
    c = np.asarray(c, dtype=float)
    A = np.broadcast_to(_HELI_A_FIXED, c.shape[:-1] + (4, 4)).copy()
    A[..., 0, 0] += c[..., 0]
    A[..., 0, 1] += c[..., 1]
    return A


def _heli_f(x, c, u, t):
    x = np.asarray(x, dtype=float)
    return (helicopter_system_matrix(c) @ x[..., None])[..., 0]


def _heli_dfdx(x, c, u, t):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(helicopter_system_matrix(c), x.shape[:-1] + (4, 4)).copy()


def _heli_dfdc(x, c, u, t):
    x = np.asarray(x, dtype=float)
    J = np.zeros(x.shape + (2,))
    J[..., 0, 0] = x[..., 0]
    J[..., 0, 1] = x[..., 1]
    return J


def _heli_h(x, c, u):
    return np.array(x, dtype=float)


def _heli_dhdx(x, c, u):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.eye(4), x.shape[:-1] + (4, 4)).copy()


def _heli_dhdc(x, c, u):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1] + (4, 2))


def helicopter_model():
    """Linearized hovering helicopter with two uncertain aerodynamic derivatives.

    State: horizontal velocity, pitch angle, pitch rate, position offset.
    All four states are measured directly.
    """
    return ParametricModel(
        name="helicopter",
        state_dim=4,
        meas_dim=4,
        param_dim=2,
        f_cont=_heli_f,
        h=_heli_h,
        dfdx=_heli_dfdx,
        dfdc=_heli_dfdc,
        dhdx=_heli_dhdx,
        dhdc=_heli_dhdc,
        state_labels=("x1", "x2", "x3", "x4"),
    )


MODELS = {
    "falling-body": falling_body_model,
    "helicopter": helicopter_model,
}


def get_model(name):
    try:
        return MODELS[name]()
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
