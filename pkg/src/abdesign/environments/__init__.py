"""Concrete data-generating processes and their ground truth."""
from __future__ import annotations

import numpy as np

from ..core import CapabilityError, ConfigError, Environment, make_rng, stack_noise
from .binary import BinaryChainEnv
from .continuous import ContinuousEnv
from .dispatch import DispatchEnv
from .tabular import TabularNmdpEnv

ENVIRONMENTS = {
    "binary": BinaryChainEnv,
    "continuous": ContinuousEnv,
    "dispatch": DispatchEnv,
    "tabular": TabularNmdpEnv,
}


def make_environment(name: str, **params) -> Environment:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}") from None
    if cls is TabularNmdpEnv:
        seed = int(params.pop("instance_seed", 0))
        return TabularNmdpEnv.random(make_rng(seed, 0x7AB), **params)
    return cls(**params)


def true_ate(env: Environment, episodes: int = 0, seed: int = 0) -> float:
    """Ground-truth ATE: exact where available, otherwise paired Monte Carlo.

    The Monte Carlo path runs ``episodes`` days per arm with the same day
    content under both arms, which removes most of the noise in the
    difference.
    """
    try:
        return env.true_ate()
    except CapabilityError:
        if episodes <= 0:
            raise
    return monte_carlo_ate(env, episodes, seed)[0]


def monte_carlo_ate(env: Environment, episodes: int, seed: int = 0, chunk: int = 2000):
    """Paired Monte Carlo ATE and its standard error."""
    T = env.horizon
    diffs = []
    done = 0
    while done < episodes:
        b = min(chunk, episodes - done)
        noise = stack_noise([env.draw_day_noise(make_rng(seed, 0xA7E, done + i)) for i in range(b)])
        _, r1 = env.rollout(noise, np.ones((b, T), dtype=np.int8))
        _, r0 = env.rollout(noise, np.zeros((b, T), dtype=np.int8))
        diffs.append((r1.sum(1) - r0.sum(1)) / T)
        done += b
    d = np.concatenate(diffs)
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0


def true_value_function(env: Environment, a: int, t: int, h_or_o) -> float:
    if not hasattr(env, "value"):
        raise CapabilityError(f"{env.name} has no exact value function")
    return env.value(a, t, h_or_o)


def true_td_variance(env: Environment, a: int, t: int, conditioning) -> float:
    if not hasattr(env, "td_variance"):
        raise CapabilityError(f"{env.name} has no exact TD-error variance")
    return env.td_variance(a, t, conditioning)


__all__ = [
    "BinaryChainEnv", "ContinuousEnv", "DispatchEnv", "TabularNmdpEnv", "ENVIRONMENTS",
    "make_environment", "true_ate", "monte_carlo_ate", "true_value_function", "true_td_variance",
]
