"""Binary-observation chain.

The next observation depends only on the current action:
``P(O_{t+1} = 1 | A_t = 1) = p_s`` and ``1 - p_s`` under control.
Rewards are ``mu[o, a]`` plus Gaussian noise with sd ``s0 + delta`` under
treatment and ``s0`` under control.
"""
from __future__ import annotations

import numpy as np

from ..core import DomainError, Environment, ObservationSpace


class BinaryChainEnv(Environment):
    """Binary observation chain; treatment moves O toward 1 and inflates reward noise."""

    name = "binary"
    process = "mdp"

    def __init__(self, p_s: float = 0.8, delta: float = 0.0, T: int = 50, s0: float = 1.0,
                 mu=None, p_init: float = 0.5):
        super().__init__(T, ObservationSpace("discrete", 2))
        if not 0.0 < p_s < 1.0:
            raise DomainError("p_s must lie in (0, 1)")
        if delta < 0 or s0 < 0:
            raise DomainError("noise scales must be non-negative")
        if not 0.0 <= p_init <= 1.0:
            raise DomainError("p_init must lie in [0, 1]")
        self.p_s = float(p_s)
        self.delta = float(delta)
        self.s0 = float(s0)
        self.p_init = float(p_init)
        # mu[o, a]; default 1 + a + o, i.e. mu(o,1) = 2 + o and mu(o,0) = 1 + o
        self.mu = np.array([[1.0, 2.0], [2.0, 3.0]]) if mu is None else np.asarray(mu, float)
        if self.mu.shape != (2, 2):
            raise DomainError("mu must be a 2x2 table indexed [o, a]")
        self.sd = np.array([self.s0, self.s0 + self.delta])
        self.q = np.array([1.0 - self.p_s, self.p_s])

    def describe(self) -> dict:
        return {"name": self.name, "T": self.horizon, "p_s": self.p_s, "delta": self.delta,
                "s0": self.s0, "p_init": self.p_init}

    # -- kernel --------------------------------------------------------------
    def draw_initial_noise(self, rng):
        return {"u": rng.random()}

    def draw_step_noise(self, rng, steps):
        return {"u": rng.random(steps), "z": rng.standard_normal(steps)}

    def initial_obs(self, init_noise):
        return (np.asarray(init_noise["u"]) < self.p_init).astype(np.int64)

    def transition(self, obs_hist, act_hist, t, step_noise):
        o = obs_hist[:, -1]
        a = act_hist[:, -1].astype(np.int64)
        r = self.mu[o, a] + self.sd[a] * step_noise["z"]
        nxt = (step_noise["u"] < self.q[a]).astype(np.int64)
        return r, nxt

    # -- ground truth ----------------------------------------------------------
    def _stationary_mean(self, a: int) -> float:
        q = self.q[a]
        return q * self.mu[1, a] + (1.0 - q) * self.mu[0, a]

    def mean_reward(self, a: int, t: int) -> float:
        if t == 1:
            return self.p_init * self.mu[1, a] + (1.0 - self.p_init) * self.mu[0, a]
        return self._stationary_mean(a)

    def true_ate(self) -> float:
        T = self.horizon
        return sum(self.mean_reward(1, t) - self.mean_reward(0, t) for t in range(1, T + 1)) / T

    def value(self, a: int, t: int, o) -> float:
        o = _last_obs(o)
        return float(self.mu[o, a] + (self.horizon - t) * self._stationary_mean(a))

    def td_variance(self, a: int, t: int, o) -> float:
        _last_obs(o)
        var = self.sd[a] ** 2
        if t < self.horizon:
            q = self.q[a]
            var += q * (1.0 - q) * (self.mu[1, a] - self.mu[0, a]) ** 2
        return float(var)

    def arm_variance_sum(self, a: int) -> float:
        """sum_t E^a[sigma_t^2(O_t, a)]."""
        return float(sum(self.td_variance(a, t, 0) for t in range(1, self.horizon + 1)))

    def cumulative_variance(self, a: int, o1) -> float:
        """Var^a(sum_t R_t | O_1 = o1); the TD errors are martingale differences."""
        return self.arm_variance_sum(a)

    def ate_init_variance(self) -> float:
        """Var[V_1^1(O_1) - V_1^0(O_1)]."""
        d = [self.value(1, 1, o) - self.value(0, 1, o) for o in (0, 1)]
        return self.p_init * (1.0 - self.p_init) * (d[1] - d[0]) ** 2

    def initial_distribution(self) -> np.ndarray:
        return np.array([1.0 - self.p_init, self.p_init])

    def reward_bound(self) -> float:
        """Loose |R| bound holding with overwhelming probability (8 sd)."""
        return float(np.abs(self.mu).max() + 8.0 * self.sd.max())


def _last_obs(o) -> int:
    """Accept an observation or a history (sequence whose last entry is O_t)."""
    if isinstance(o, (tuple, list)):
        o = o[-1]
    o = int(o)
    if o not in (0, 1):
        raise DomainError("binary observation must be 0 or 1")
    return o
