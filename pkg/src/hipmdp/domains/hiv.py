"""Six-compartment HIV treatment simulator.

State order is ``(T1, T2, T1*, T2*, V, E)``. Actions index the four on/off
combinations of the two drugs::

    0: none   1: RTI only   2: PI only   3: RTI + PI

Dynamics are integrated with fixed-step RK4 at a nominal ``dt``. When the
virus load makes the infection terms stiff, each nominal step is split into
equal substeps so that ``rate * h`` stays below ``max_stiffness_step``. The
split depends only on the state, so trajectories stay bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

import numpy as np
from numba import njit

from ..exceptions import NumericalFailure

STATE_NAMES = ("T1", "T2", "T1*", "T2*", "V", "E")
COEFFICIENT_NAMES = (
    "lambda1", "lambda2", "d1", "d2", "f", "k1", "k2", "delta", "m1", "m2",
    "NT", "c", "rho1", "rho2", "lambdaE", "bE", "Kb", "d_E", "Kd", "deltaE",
)
N_ACTIONS = 4


@dataclass(frozen=True)
class HivParams:
    """Patient physiology: ODE coefficients plus the multipliers that produced them."""

    coefficients: MappingProxyType
    multipliers: MappingProxyType

    def __post_init__(self):
        coeffs = {k: float(self.coefficients[k]) for k in COEFFICIENT_NAMES}
        if any(v <= 0 or not np.isfinite(v) for v in coeffs.values()):
            raise ValueError("HIV coefficients must be finite and positive")
        object.__setattr__(self, "coefficients", MappingProxyType(coeffs))
        object.__setattr__(self, "multipliers", MappingProxyType({k: float(v) for k, v in self.multipliers.items()}))

    @classmethod
    def nominal(cls, cfg: dict) -> HivParams:
        return cls(dict(cfg["coefficients"]), {})

    def as_array(self) -> np.ndarray:
        return np.array([self.coefficients[k] for k in COEFFICIENT_NAMES])

    def to_dict(self):
        return {"coefficients": dict(self.coefficients), "multipliers": dict(self.multipliers)}


def action_efficacies(action: int, cfg: dict) -> tuple[float, float]:
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"invalid HIV action {action}")
    a = int(action)
    return (cfg["eps1_max"] if a & 1 else 0.0), (cfg["eps2_max"] if a & 2 else 0.0)


@njit(cache=True)
def _derivatives(s, p, eps1, eps2):
    lambda1, lambda2, d1, d2, f, k1, k2, delta, m1, m2 = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]
    NT, c, rho1, rho2, lambdaE, bE, Kb, d_E, Kd, deltaE = p[10], p[11], p[12], p[13], p[14], p[15], p[16], p[17], p[18], p[19]
    T1, T2, T1s, T2s, V, E = s[0], s[1], s[2], s[3], s[4], s[5]
    inf1 = (1.0 - eps1) * k1 * V * T1
    inf2 = (1.0 - f * eps1) * k2 * V * T2
    infected = T1s + T2s
    out = np.empty(6)
    out[0] = lambda1 - d1 * T1 - inf1
    out[1] = lambda2 - d2 * T2 - inf2
    out[2] = inf1 - delta * T1s - m1 * E * T1s
    out[3] = inf2 - delta * T2s - m2 * E * T2s
    out[4] = ((1.0 - eps2) * NT * delta * infected - c * V
              - ((1.0 - eps1) * rho1 * k1 * T1 + (1.0 - f * eps1) * rho2 * k2 * T2) * V)
    out[5] = (lambdaE + bE * infected / (infected + Kb) * E
              - d_E * infected / (infected + Kd) * E - deltaE * E)
    return out


@njit(cache=True)
def _stiffness(s, p, eps1, eps2):
    # Largest per-compartment loss rate; bounds the fastest decaying mode here.
    d1, d2, f, k1, k2, delta, m1, m2 = p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9]
    c, rho1, rho2 = p[11], p[12], p[13]
    T1, T2, V, E = s[0], s[1], s[4], s[5]
    r = d1 + (1.0 - eps1) * k1 * V
    r = max(r, d2 + (1.0 - f * eps1) * k2 * V)
    r = max(r, delta + max(m1, m2) * E)
    r = max(r, c + (1.0 - eps1) * rho1 * k1 * T1 + (1.0 - f * eps1) * rho2 * k2 * T2)
    return r


@njit(cache=True)
def _rk4_interval(s, p, eps1, eps2, dt, n_steps, max_rate_step):
    for _ in range(n_steps):
        n_sub = 1
        if max_rate_step > 0:
            n_sub = max(1, int(np.ceil(_stiffness(s, p, eps1, eps2) * dt / max_rate_step)))
        h = dt / n_sub
        for _ in range(n_sub):
            k1 = _derivatives(s, p, eps1, eps2)
            k2 = _derivatives(s + 0.5 * h * k1, p, eps1, eps2)
            k3 = _derivatives(s + 0.5 * h * k2, p, eps1, eps2)
            k4 = _derivatives(s + h * k3, p, eps1, eps2)
            s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            for i in range(6):
                if s[i] < 0.0:
                    s[i] = 0.0
            if not np.all(np.isfinite(s)):
                return s
    return s


def hiv_derivatives(state, params: HivParams, eps1: float, eps2: float) -> np.ndarray:
    return _derivatives(np.asarray(state, dtype=float), params.as_array(), float(eps1), float(eps2))


def integrate(state, params: HivParams, eps1, eps2, days: float, dt: float, max_stiffness_step: float = 0.0):
    """RK4 over ``days`` at step ``dt``; ``max_stiffness_step=0`` disables refinement."""
    n = int(round(days / dt))
    if n < 1 or abs(n * dt - days) > 1e-9 * days:
        raise ValueError(f"days={days} is not a multiple of dt={dt}")
    return _rk4_interval(np.asarray(state, dtype=float).copy(), params.as_array(), float(eps1), float(eps2),
                         float(dt), n, float(max_stiffness_step))


def hiv_reward(state, action, cfg: dict) -> float:
    """Per-interval reward: penalize virus and drug use, reward immune effectors."""
    state = np.asarray(state, dtype=float)
    eps1, eps2 = action_efficacies(action, cfg) if np.isscalar(action) else action
    rc = cfg["reward"]
    return float(-rc["c_V"] * state[4] - rc["c_1"] * eps1**2 - rc["c_2"] * eps2**2 + rc["c_E"] * state[5])


def hiv_step(state, action, params: HivParams, cfg: dict, t: int = 0):
    """Apply ``action`` for one decision interval starting at decision index ``t``.

    Returns ``(next_state, reward, done)`` with ``done`` set once the episode
    reaches ``n_decisions`` intervals.
    """
    state = np.asarray(state, dtype=float)
    if state.shape != (6,) or np.any(state < 0):
        raise ValueError(f"HIV state must be six nonnegative values, got {state}")
    eps1, eps2 = action_efficacies(action, cfg)
    nxt = integrate(state, params, eps1, eps2, cfg["interval_days"], cfg["dt"], cfg["max_stiffness_step"])
    if not np.all(np.isfinite(nxt)):
        raise NumericalFailure(f"non-finite HIV state during decision step {t} (action {action})")
    return nxt, hiv_reward(nxt, (eps1, eps2), cfg), t + 1 >= cfg["n_decisions"]


def observe(state, cfg: dict) -> np.ndarray:
    return np.log10(np.maximum(np.asarray(state, dtype=float), cfg["observation_floor"]))


def unobserve(obs, cfg: dict) -> np.ndarray:
    return np.power(10.0, np.asarray(obs, dtype=float))


class HivEnv:
    """One patient; ``step`` returns log10 observations."""

    def __init__(self, params: HivParams, cfg: dict):
        self.params = params
        self.cfg = cfg
        self.state = None
        self.t = 0

    def reset(self):
        self.state = np.array(self.cfg["initial_state"], dtype=float)
        self.t = 0
        return observe(self.state, self.cfg)

    def step(self, action):
        self.state, reward, done = hiv_step(self.state, action, self.params, self.cfg, self.t)
        self.t += 1
        # The horizon is a time limit, not an absorbing state.
        return observe(self.state, self.cfg), reward, False, done
