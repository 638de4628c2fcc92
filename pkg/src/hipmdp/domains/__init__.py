"""Simulated task families: the gated toy navigation and the HIV treatment model."""

from __future__ import annotations

import copy
from importlib import resources

import numpy as np
import yaml

from . import hiv, toy
from .hiv import HivEnv, HivParams, hiv_reward, hiv_step
from .toy import ToyClass, ToyEnv, ToyGeometry, ToyParams, toy_step

DOMAINS = ("toy", "hiv")


def load_domain_config(overrides: dict | None = None) -> dict:
    """Packaged domain constants, with ``overrides`` merged in per domain."""
    text = resources.files(__package__).joinpath("domains.yaml").read_text()
    cfg = yaml.safe_load(text)
    for name, values in (overrides or {}).items():
        if name not in cfg:
            raise ValueError(f"unknown domain {name!r} in domain overrides")
        _deep_update(cfg[name], values)
    return cfg


def _deep_update(base: dict, upd: dict):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = copy.deepcopy(v)


def sample_task(domain: str, prior_config: dict, seed):
    """Draw hidden parameters for one task instance; a deterministic function of ``seed``.

    ``prior_config`` is the section of the domain config for ``domain``.
    """
    rng = np.random.default_rng(seed)
    if domain == "toy":
        red = rng.random() < prior_config.get("red_probability", 0.5)
        return ToyParams(ToyClass.RED if red else ToyClass.BLUE, prior_config["noise_scale"])
    if domain == "hiv":
        delta = float(prior_config["delta"])
        if not 0 <= delta < 1:
            raise ValueError("HIV perturbation delta must lie in [0, 1)")
        coeffs = dict(prior_config["coefficients"])
        multipliers = {}
        for name in prior_config["perturbed"]:
            m = rng.uniform(1.0 - delta, 1.0 + delta) if delta > 0 else 1.0
            multipliers[name] = m
            coeffs[name] = coeffs[name] * m
        return HivParams(coeffs, multipliers)
    raise ValueError(f"unknown domain {domain!r}")


class ToyDomain:
    """Adapter giving the agent loop a uniform view of the toy domain."""

    name = "toy"
    n_actions = toy.N_ACTIONS
    state_dim = 2

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.geometry = ToyGeometry.from_config(cfg)
        self.max_steps = self.geometry.max_steps

    def sample_task(self, seed):
        return sample_task("toy", self.cfg, seed)

    def make_env(self, params, rng):
        return ToyEnv(params, rng, self.geometry)

    def model_reward(self, states, actions, next_states):
        """Reward and terminal flags for (possibly imagined) transitions."""
        in_goal = self.geometry.in_goal(next_states)
        r = np.where(in_goal, self.geometry.goal_reward, self.geometry.step_reward)
        return r, in_goal

    def clip_state(self, states):
        return np.clip(states, 0.0, 1.0)

    def train_reward(self, r):
        return np.asarray(r, dtype=float)

    def simulate(self, params, states, actions, rng):
        out, rewards, dones = [], [], []
        for s, a in zip(states, actions):
            nxt, r, d = toy_step(np.clip(s, 0, 1), a, params, rng, self.geometry)
            out.append(nxt)
            rewards.append(r)
            dones.append(d)
        return np.array(out), np.array(rewards), np.array(dones)

    def describe(self, params) -> dict:
        return params.to_dict()


class HivDomain:
    """Adapter for the HIV simulator; the agent sees log10 states."""

    name = "hiv"
    n_actions = hiv.N_ACTIONS
    state_dim = 6

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.max_steps = int(cfg["n_decisions"])
        self._eps = np.array([hiv.action_efficacies(a, cfg) for a in range(self.n_actions)])

    def sample_task(self, seed):
        return sample_task("hiv", self.cfg, seed)

    def make_env(self, params, rng):
        return HivEnv(params, self.cfg)

    def model_reward(self, states, actions, next_states):
        raw = hiv.unobserve(next_states, self.cfg)
        eps = self._eps[np.asarray(actions, dtype=int)]
        rc = self.cfg["reward"]
        r = -rc["c_V"] * raw[..., 4] - rc["c_1"] * eps[..., 0] ** 2 - rc["c_2"] * eps[..., 1] ** 2 + rc["c_E"] * raw[..., 5]
        return r, np.zeros(r.shape, dtype=bool)

    def clip_state(self, states):
        return np.maximum(states, np.log10(self.cfg["observation_floor"]))

    def train_reward(self, r):
        r = np.asarray(r, dtype=float)
        return np.sign(r) * np.log10(1.0 + np.abs(r) / self.cfg["reward_scale"])

    def simulate(self, params, states, actions, rng):
        out, rewards = [], []
        for s, a in zip(states, actions):
            nxt, r, _ = hiv_step(hiv.unobserve(s, self.cfg), a, params, self.cfg)
            out.append(hiv.observe(nxt, self.cfg))
            rewards.append(r)
        return np.array(out), np.array(rewards), np.zeros(len(out), dtype=bool)

    def describe(self, params) -> dict:
        return params.to_dict()


def make_domain(name: str, domain_config: dict | None = None):
    cfg = domain_config if domain_config is not None else load_domain_config()
    if name == "toy":
        return ToyDomain(cfg["toy"])
    if name == "hiv":
        return HivDomain(cfg["hiv"])
    raise ValueError(f"unknown domain {name!r}")


__all__ = [
    "DOMAINS", "HivDomain", "HivEnv", "HivParams", "ToyClass", "ToyDomain", "ToyEnv", "ToyGeometry",
    "ToyParams", "hiv_reward", "hiv_step", "load_domain_config", "make_domain", "sample_task", "toy_step",
]
