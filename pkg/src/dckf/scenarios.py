"""Built-in benchmark scenarios."""

import numpy as np

from .harness import ScenarioConfig


def _diag(*v):
    return np.diag(v).tolist()


def falling_body_scenario():
    c_ref = 2e4
    return ScenarioConfig(
        name="falling-body",
        model="falling-body",
        duration=60.0,
        dt=0.1,
        mc_runs=200,
        rng_seed=20160401,
        param_low=[0.75 * c_ref],
        param_high=[1.25 * c_ref],
        c_ref=[c_ref],
        x0_true=[3e5, -2e4, 1e-3],
        x0_hat=[3e5, -2e4, 3e-5],
        P0=_diag(1e6, 4e6, 1e-4),
        Q=_diag(0.0, 0.0, 0.0),
        R=[[1e4]],
        weights=[_diag(3e4, 6e3, 1e5)],
    )


def helicopter_scenario():
    x0 = [0.7929, -0.0466, -0.1871, 0.5780]
    W = _diag(3e-3, 2e-3, 1e-2, 2e-2)
    return ScenarioConfig(
        name="helicopter",
        model="helicopter",
        duration=4.0,
        dt=0.05,
        mc_runs=200,
        rng_seed=20160402,
        param_low=[-0.15, 0.05],
        param_high=[-0.05, 0.15],
        c_ref=[-0.1, 0.1],
        x0_true=x0,
        x0_hat=list(x0),
        P0=np.eye(4).tolist(),
        Q=np.zeros((4, 4)).tolist(),
        R=(1e-2 * np.eye(4)).tolist(),
        weights=[W, [row[:] for row in W]],
        assumptions={
            "c2_distribution": "U(0.05, 0.15), mirroring the +/-50% spread of c1",
            "measurement_noise": "R = 1e-2 I4",
            "process_noise": "Q = 0",
        },
    )


BUILTIN_SCENARIOS = {
    "falling-body": falling_body_scenario,
    "helicopter": helicopter_scenario,
}


def builtin_scenarios():
    """Name -> fresh ``ScenarioConfig`` for every built-in scenario."""
    return {name: make() for name, make in BUILTIN_SCENARIOS.items()}
