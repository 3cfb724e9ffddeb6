"""Linear-Gaussian environment with a three-dimensional observation."""
from __future__ import annotations

import numpy as np

from ..core import DomainError, Environment, ObservationSpace

DEFAULT_B1 = np.array([[0.5, 0.1, 0.0], [0.0, 0.4, 0.1], [0.1, 0.0, 0.3]])
DEFAULT_B0 = np.array([[0.3, 0.0, 0.1], [0.1, 0.4, 0.0], [0.0, 0.1, 0.5]])
DEFAULT_W1 = np.array([0.5, 0.3, 0.2])
DEFAULT_W0 = np.array([0.3, 0.2, 0.2])


class ContinuousEnv(Environment):
    """``O_{t+1} = B_a O_t + N(0, s_obs(a)^2 I)``, ``R_t = c_a + w_a'O_t + N(0, sd(a)^2)``.

    Treatment inflates the observation noise sd by ``delta_s`` and the reward
    noise sd by ``delta``.  ``O_1 ~ N(init_mean, init_sd^2 I)``.
    """

    name = "continuous"
    process = "mdp"

    def __init__(self, delta_s: float = 1.0, delta: float = 0.0, T: int = 50, s0: float = 1.0,
                 B1=None, B0=None, w1=None, w0=None, c1: float = 1.0, c0: float = 0.0,
                 init_mean=(1.0, 1.0, 1.0), init_sd: float = 1.0):
        super().__init__(T, ObservationSpace("continuous", 3))
        if delta < 0 or delta_s < 0 or s0 < 0 or init_sd < 0:
            raise DomainError("noise scales must be non-negative")
        self.delta_s = float(delta_s)
        self.delta = float(delta)
        self.s0 = float(s0)
        self.B = np.stack([
            DEFAULT_B0 if B0 is None else np.asarray(B0, float),
            DEFAULT_B1 if B1 is None else np.asarray(B1, float),
        ])
        self.w = np.stack([
            DEFAULT_W0 if w0 is None else np.asarray(w0, float),
            DEFAULT_W1 if w1 is None else np.asarray(w1, float),
        ])
        if self.B.shape != (2, 3, 3) or self.w.shape != (2, 3):
            raise DomainError("B_a must be 3x3 and w_a 3-vectors")
        for a in (0, 1):
            if np.max(np.abs(np.linalg.eigvals(self.B[a]))) >= 1.0:
                raise DomainError(f"B_{a} must have spectral radius < 1")
        self.c = np.array([float(c0), float(c1)])
        self.init_mean = np.asarray(init_mean, float)
        self.init_sd = float(init_sd)
        self.sd = np.array([self.s0, self.s0 + self.delta])
        self.s_obs = np.array([1.0, 1.0 + self.delta_s])
        self._grad = self._value_gradients()

    def describe(self) -> dict:
        return {"name": self.name, "T": self.horizon, "delta_s": self.delta_s,
                "delta": self.delta, "s0": self.s0}

    # -- kernel --------------------------------------------------------------
    def draw_initial_noise(self, rng):
        return {"z": rng.standard_normal(3)}

    def draw_step_noise(self, rng, steps):
        return {"z": rng.standard_normal(steps), "e": rng.standard_normal((steps, 3))}

    def initial_obs(self, init_noise):
        return self.init_mean + self.init_sd * np.asarray(init_noise["z"])

    def transition(self, obs_hist, act_hist, t, step_noise):
        o = obs_hist[:, -1]
        a = act_hist[:, -1].astype(np.int64)
        r = self.c[a] + np.einsum("bi,bi->b", self.w[a], o) + self.sd[a] * step_noise["z"]
        nxt = np.einsum("bij,bj->bi", self.B[a], o) + self.s_obs[a][:, None] * step_noise["e"]
        return r, nxt

    # -- ground truth ----------------------------------------------------------
    def _value_gradients(self) -> np.ndarray:
        """g[a, t] with V_t^a(o) = (T - t + 1) c_a + g[a, t]'o; row T + 1 is zero."""
        T = self.horizon
        g = np.zeros((2, T + 2, 3))
        for a in (0, 1):
            for t in range(T, 0, -1):
                g[a, t] = self.w[a] + self.B[a].T @ g[a, t + 1]
        return g

    def mean_obs(self, a: int, t: int) -> np.ndarray:
        return np.linalg.matrix_power(self.B[a], t - 1) @ self.init_mean

    def mean_reward(self, a: int, t: int) -> float:
        return float(self.c[a] + self.w[a] @ self.mean_obs(a, t))

    def true_ate(self) -> float:
        T = self.horizon
        return sum(self.mean_reward(1, t) - self.mean_reward(0, t) for t in range(1, T + 1)) / T

    def value(self, a: int, t: int, o) -> float:
        o = _obs_vector(o)
        return float((self.horizon - t + 1) * self.c[a] + self._grad[a, t] @ o)

    def td_variance(self, a: int, t: int, o=None) -> float:
        g_next = self._grad[a, t + 1]
        return float(self.sd[a] ** 2 + self.s_obs[a] ** 2 * g_next @ g_next)

    def arm_variance_sum(self, a: int) -> float:
        return float(sum(self.td_variance(a, t) for t in range(1, self.horizon + 1)))

    def cumulative_variance(self, a: int, o1=None) -> float:
        return self.arm_variance_sum(a)

    def ate_init_variance(self) -> float:
        d = self._grad[1, 1] - self._grad[0, 1]
        return float(self.init_sd ** 2 * d @ d)

    def reward_bound(self) -> float:
        # |O| rarely exceeds a few stationary sds; used only for loose asserts
        obs_scale = np.linalg.norm(self.init_mean) + 8.0 * self.s_obs.max() / (
            1.0 - max(np.max(np.abs(np.linalg.eigvals(self.B[a]))) for a in (0, 1)))
        return float(np.abs(self.c).max() + np.linalg.norm(self.w, axis=1).max() * obs_scale
                     + 8.0 * self.sd.max())


def _obs_vector(o) -> np.ndarray:
    if isinstance(o, (tuple, list)) and len(o) and np.ndim(o[-1]) == 1:
        o = o[-1]
    o = np.asarray(o, float)
    if o.shape != (3,):
        raise DomainError("continuous observation must be a 3-vector")
    return o
