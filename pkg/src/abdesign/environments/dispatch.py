"""Synthetic order-dispatch environment on a 9x9 grid.

Each day has ``n_orders`` orders arriving over ``T`` steps and a fleet of
drivers placed uniformly at random.  At every step the platform matches open
orders to idle drivers with one of two rules:

* action 0, distance-greedy: repeatedly pair the closest driver and order;
* action 1, value-weighted: pair by ``revenue + gamma**duration * V[dest] -
  V[driver cell]`` with a per-cell driver value table ``V`` learned offline by
  TD(0) on days run under the distance rule.

Matched drivers are busy for ``ceil((pickup + trip) / 3)`` steps and reappear
idle at the destination.  An order not matched within ``patience`` steps of
arriving is cancelled.  The observation is ``(open orders, idle drivers)``
and the reward is the revenue dispatched in the step.

All of a day's exogenous randomness (fleet size and positions, order times
and locations) is drawn before the day starts, so the same generator yields
the same day under either rule.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..core import (CapabilityError, DomainError, Environment, HorizonExceeded,
                    ObservationSpace, make_rng)

GRID = 9
MAX_DRIVERS = 50
DRIVER_MODES = ("uniform", "fixed25", "fixed50")


class DispatchEnv(Environment):
    """Order dispatch on a 9x9 grid; treatment switches to value-weighted matching."""

    name = "dispatch"
    process = "nmdp"

    def __init__(self, drivers: str = "uniform", T: int = 20, n_orders: int = 100,
                 patience: int = 3, pickup_radius: int = 2, base_fare: float = 1.0,
                 per_cell_rate: float = 0.2, gamma: float = 0.9, value_seed: int = 2024,
                 value_days: int = 300):
        super().__init__(T, ObservationSpace("continuous", 2))
        if drivers not in DRIVER_MODES:
            raise DomainError(f"drivers must be one of {DRIVER_MODES}, got {drivers!r}")
        if patience < 1 or n_orders < 1 or pickup_radius < 0:
            raise DomainError("patience, n_orders must be positive and pickup_radius >= 0")
        self.drivers = drivers
        self.n_orders = int(n_orders)
        self.patience = int(patience)
        self.pickup_radius = int(pickup_radius)
        self.base_fare = float(base_fare)
        self.per_cell_rate = float(per_cell_rate)
        self.gamma = float(gamma)
        self.value_seed = int(value_seed)
        self.value_days = int(value_days)
        cells = np.arange(GRID * GRID)
        self._cx, self._cy = cells // GRID, cells % GRID
        self._dist = (np.abs(self._cx[:, None] - self._cx[None, :])
                      + np.abs(self._cy[:, None] - self._cy[None, :]))
        center = (GRID - 1) / 2
        hot = np.exp(-((self._cx - center) ** 2 + (self._cy - center) ** 2) / (2 * 1.5 ** 2))
        self._origin_p = 0.4 / cells.size + 0.6 * hot / hot.sum()
        self._values = None

    def describe(self) -> dict:
        return {"name": self.name, "T": self.horizon, "drivers": self.drivers,
                "n_orders": self.n_orders, "patience": self.patience}

    # -- exogenous day content ------------------------------------------------
    def draw_initial_noise(self, rng):
        if self.drivers == "uniform":
            n_drivers = int(rng.integers(25, 31))
        else:
            n_drivers = 25 if self.drivers == "fixed25" else 50
        driver_cells = rng.integers(0, GRID * GRID, size=MAX_DRIVERS)
        times = np.sort(rng.integers(1, self.horizon + 1, size=self.n_orders))
        origins = rng.choice(GRID * GRID, size=self.n_orders, p=self._origin_p)
        dests = rng.integers(0, GRID * GRID, size=self.n_orders)
        return {"n_drivers": np.int64(n_drivers), "driver_cells": driver_cells,
                "times": times, "origins": origins, "dests": dests}

    def draw_step_noise(self, rng, steps):
        return {}

    def initial_obs(self, init_noise):
        times = np.asarray(init_noise["times"])
        n_drivers = np.asarray(init_noise["n_drivers"])
        return np.stack([(times == 1).sum(-1), n_drivers], axis=-1).astype(float)

    def transition(self, obs_hist, act_hist, t, step_noise):
        raise CapabilityError("dispatch state is not a function of the observed history")

    def step(self, history, action, rng):
        raise CapabilityError("dispatch state is not a function of the observed history; "
                              "use episode() instead")

    # -- simulation ------------------------------------------------------------
    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = _learn_values(self.drivers, self.horizon, self.n_orders, self.patience,
                                         self.pickup_radius, self.base_fare, self.per_cell_rate,
                                         self.gamma, self.value_seed, self.value_days)
        return self._values

    def rollout(self, noise, actions):
        actions = np.asarray(actions, dtype=np.int8)
        B, T = actions.shape
        if T != self.horizon:
            raise DomainError(f"expected {self.horizon} actions per day, got {T}")
        obs = np.empty((B, T + 1, 2))
        rewards = np.empty((B, T))
        for b in range(B):
            day = DispatchDay(self, {k: v[b] for k, v in noise["init"].items()})
            obs[b, 0] = day.observation()
            for t in range(T):
                r, o = day.step(int(actions[b, t]))
                rewards[b, t] = r
                obs[b, t + 1] = o
        return obs, rewards

    def episode(self, rng):
        return DispatchEpisode(self, rng)

    def revenue(self, origins, dests):
        return self.base_fare + self.per_cell_rate * self._dist[origins, dests]


class DispatchDay:
    """Mutable state of one simulated day."""

    def __init__(self, env: DispatchEnv, content: dict, values=None):
        self.env = env
        n = int(content["n_drivers"])
        self.cell = np.asarray(content["driver_cells"][:n], dtype=np.int64).copy()
        self.free_at = np.ones(n, dtype=np.int64)  # step at which the driver is idle again
        self.times = np.asarray(content["times"])
        self.origins = np.asarray(content["origins"])
        self.dests = np.asarray(content["dests"])
        # 0 = future, 1 = open, 2 = served, 3 = cancelled
        self.status = np.zeros(env.n_orders, dtype=np.int8)
        self.t = 1
        self.values = env.values if values is None else values
        self.trace = []  # (driver cell, revenue, duration, dest) per match, for value learning
        self._arrive()

    def _arrive(self):
        self.status[(self.times == self.t) & (self.status == 0)] = 1

    def counts(self) -> dict:
        created = int((self.times <= min(self.t, self.env.horizon)).sum())
        return {"created": created, "open": int((self.status == 1).sum()),
                "served": int((self.status == 2).sum()), "cancelled": int((self.status == 3).sum())}

    def observation(self) -> np.ndarray:
        idle = int((self.free_at <= self.t).sum())
        return np.array([float((self.status == 1).sum()), float(idle)])

    def step(self, action: int):
        env = self.env
        if self.t > env.horizon:
            raise HorizonExceeded(f"day already has T={env.horizon} steps")
        open_idx = np.flatnonzero(self.status == 1)
        idle_idx = np.flatnonzero(self.free_at <= self.t)
        reward = 0.0
        if open_idx.size and idle_idx.size:
            reward = self._match(open_idx, idle_idx, action)
        # orders that have waited `patience` steps without a driver are dropped
        waited = self.t - self.times + 1
        self.status[(self.status == 1) & (waited >= env.patience)] = 3
        self.t += 1
        self._arrive()
        return reward, self.observation()

    def _match(self, open_idx, idle_idx, action) -> float:
        env = self.env
        o_cells = self.origins[open_idx]
        d_cells = self.cell[idle_idx]
        pickup = env._dist[d_cells][:, o_cells]  # (drivers, orders)
        eligible = pickup <= env.pickup_radius
        if not eligible.any():
            return 0.0
        trip = env._dist[o_cells, self.dests[open_idx]]
        fare = env.base_fare + env.per_cell_rate * trip
        duration = np.maximum(1, np.ceil((pickup + trip[None, :]) / 3.0)).astype(np.int64)
        if action == 1:
            V = self.values
            score = (fare[None, :] + env.gamma ** duration * V[self.dests[open_idx]][None, :]
                     - V[d_cells][:, None])
        else:
            score = -pickup.astype(float)
        score = np.where(eligible, score, -np.inf)
        order = np.argsort(-score, axis=None, kind="stable")
        n_cand = int(eligible.sum())
        used_d, used_o = set(), set()
        limit = min(len(idle_idx), len(open_idx))
        total = 0.0
        n_o = len(open_idx)
        for flat in order[:n_cand].tolist():
            i, j = divmod(flat, n_o)
            if i in used_d or j in used_o:
                continue
            used_d.add(i)
            used_o.add(j)
            drv = idle_idx[i]
            k = open_idx[j]
            dur = int(duration[i, j])
            self.trace.append((int(self.cell[drv]), float(fare[j]), dur, int(self.dests[k]), self.t))
            self.status[k] = 2
            self.free_at[drv] = self.t + dur
            self.cell[drv] = self.dests[k]
            total += float(fare[j])
            if len(used_d) == limit:
                break
        return total


class DispatchEpisode:
    """Step-by-step interface matching :class:`abdesign.core.Episode`."""

    def __init__(self, env: DispatchEnv, rng):
        self.env = env
        self.day = DispatchDay(env, env.draw_initial_noise(rng))
        self._obs = [self.day.observation()]
        self._actions, self._rewards = [], []

    @property
    def t(self) -> int:
        return len(self._actions) + 1

    @property
    def observation(self):
        return self._obs[-1].copy()

    @property
    def done(self) -> bool:
        return len(self._actions) >= self.env.horizon

    def step(self, action: int):
        if action not in (0, 1):
            raise DomainError("action must be 0 or 1")
        r, o = self.day.step(int(action))
        self._actions.append(int(action))
        self._rewards.append(r)
        self._obs.append(o)
        return r, o.copy()

    def record(self, day: int, p_treat=None):
        from ..core import EpisodeRecord
        return EpisodeRecord(day=day, observations=np.stack(self._obs),
                             actions=np.asarray(self._actions), rewards=np.asarray(self._rewards),
                             p_treat=p_treat)


@lru_cache(maxsize=16)
def _learn_values(drivers, T, n_orders, patience, radius, base_fare, rate, gamma, seed, days):
    """Tabular TD(0) driver values from days run under distance-greedy matching."""
    env = DispatchEnv(drivers=drivers, T=T, n_orders=n_orders, patience=patience,
                      pickup_radius=radius, base_fare=base_fare, per_cell_rate=rate,
                      gamma=gamma, value_seed=seed, value_days=days)
    V = np.zeros(GRID * GRID)
    zeros = V.copy()
    rng = make_rng(seed, 0xD15)
    n_update = np.zeros(GRID * GRID)
    for _ in range(days):
        day = DispatchDay(env, env.draw_initial_noise(rng), values=zeros)
        idle_steps = np.zeros(GRID * GRID)
        for _t in range(T):
            idle = day.free_at <= day.t
            np.add.at(idle_steps, day.cell[idle], 1.0)
            day.step(0)
        matched_from = np.zeros(GRID * GRID)
        for cell, fare, dur, dest, _ in day.trace:
            n_update[cell] += 1
            alpha = max(0.02, 1.0 / n_update[cell])
            V[cell] += alpha * (fare + gamma ** dur * V[dest] - V[cell])
            matched_from[cell] += 1
        # idle steps that did not end in a match: stay put, no revenue
        waits = np.maximum(idle_steps - matched_from, 0.0)
        for cell in np.flatnonzero(waits):
            for _ in range(int(min(waits[cell], 5))):
                n_update[cell] += 1
                alpha = max(0.02, 1.0 / n_update[cell])
                V[cell] += alpha * (gamma * V[cell] - V[cell])
    V.setflags(write=False)
    return V


def conservation_holds(day: DispatchDay) -> bool:
    c = day.counts()
    return c["served"] + c["cancelled"] + c["open"] == c["created"]

