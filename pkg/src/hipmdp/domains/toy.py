"""Two-class gated navigation on the unit square.

The goal box sits at the top of the square. Its lower edge is split into two
gates: the left half (blue) admits only blue instances, the right half (red)
only red instances. Every other goal-box edge blocks everyone. A blocked move
leaves the agent where it was.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

UP, DOWN, LEFT, RIGHT = range(4)
N_ACTIONS = 4
_DIRECTIONS = np.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]])


class ToyClass(str, enum.Enum):
    RED = "red"
    BLUE = "blue"


@dataclass(frozen=True)
class ToyParams:
    """Hidden parameters of one toy instance."""

    latent_class: ToyClass
    noise_scale: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "latent_class", ToyClass(self.latent_class))
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")

    def to_dict(self):
        return {"latent_class": self.latent_class.value, "noise_scale": self.noise_scale}


@dataclass(frozen=True)
class ToyGeometry:
    step_size: float = 0.05
    goal_box: tuple = (0.4, 0.6, 0.8, 1.0)
    gate_split: float = 0.5
    start_box: tuple = (0.0, 1.0, 0.0, 0.3)
    max_steps: int = 100
    goal_reward: float = 1.0
    step_reward: float = -0.01

    @classmethod
    def from_config(cls, cfg: dict) -> ToyGeometry:
        return cls(
            step_size=cfg["step_size"],
            goal_box=tuple(cfg["goal_box"]),
            gate_split=cfg["gate_split"],
            start_box=tuple(cfg["start_box"]),
            max_steps=cfg["max_steps"],
            goal_reward=cfg["goal_reward"],
            step_reward=cfg["step_reward"],
        )

    def in_goal(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        x0, x1, y0, y1 = self.goal_box
        x, y = xy[..., 0], xy[..., 1]
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


DEFAULT_GEOMETRY = ToyGeometry()


def gate_crossed(p, q, geometry: ToyGeometry = DEFAULT_GEOMETRY):
    """Classify the move p -> q against the goal box.

    Returns ``None`` when q is outside the goal box, ``"blue"`` or ``"red"``
    when the move enters through that gate, and ``"wall"`` when it enters
    through any other edge.
    """
    if not geometry.in_goal(q):
        return None
    x0, x1, y0, _ = geometry.goal_box
    if p[1] < y0 <= q[1]:
        t = (y0 - p[1]) / (q[1] - p[1])
        xc = p[0] + t * (q[0] - p[0])
        if x0 <= xc <= x1:
            return ToyClass.BLUE.value if xc < geometry.gate_split else ToyClass.RED.value
    return "wall"


def toy_step(state, action, params: ToyParams, rng=None, geometry: ToyGeometry = DEFAULT_GEOMETRY):
    """Advance one step. Returns ``(next_state, reward, done)``."""
    state = np.asarray(state, dtype=float)
    if state.shape != (2,) or np.any(state < 0) or np.any(state > 1):
        raise ValueError(f"toy state must lie in the unit square, got {state}")
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"invalid toy action {action}")
    move = geometry.step_size * _DIRECTIONS[int(action)]
    if params.noise_scale > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_scale > 0")
        move = move + rng.normal(0.0, params.noise_scale, size=2)
    proposed = np.clip(state + move, 0.0, 1.0)

    crossing = gate_crossed(state, proposed, geometry)
    if crossing is None:
        return proposed, geometry.step_reward, False
    if crossing == params.latent_class.value:
        return proposed, geometry.goal_reward, True
    return state.copy(), geometry.step_reward, False


class ToyEnv:
    """Stateful episode wrapper around :func:`toy_step`.

    ``step`` returns ``(obs, reward, terminal, truncated)``; reaching the goal
    is terminal, hitting ``max_steps`` only truncates.
    """

    def __init__(self, params: ToyParams, rng: np.random.Generator, geometry: ToyGeometry = DEFAULT_GEOMETRY):
        self.params = params
        self.rng = rng
        self.geometry = geometry
        self.state = None
        self.t = 0
        self.last_entry = None

    def reset(self):
        x0, x1, y0, y1 = self.geometry.start_box
        self.state = np.array([self.rng.uniform(x0, x1), self.rng.uniform(y0, y1)])
        self.t = 0
        self.last_entry = None
        return self.state.copy()

    def step(self, action):
        prev = self.state
        nxt, reward, done = toy_step(prev, action, self.params, self.rng, self.geometry)
        if done:
            self.last_entry = gate_crossed(prev, nxt, self.geometry)
        self.state = nxt
        self.t += 1
        return nxt.copy(), reward, done, (not done) and self.t >= self.geometry.max_steps
