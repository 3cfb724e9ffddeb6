"""Domain types, the environment/design contracts and seeded randomness.

Observations are stored as plain numpy values: a discrete observation is an
integer index, a continuous one a float vector of the environment's declared
dimension.  Whole days are stored as arrays (``observations`` has ``T + 1``
rows when the terminal observation is recorded).
"""
from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np


class AbDesignError(Exception):
    """Base class for errors raised by this package."""


class HorizonExceeded(AbDesignError):
    pass


class CapabilityError(AbDesignError):
    """The environment cannot produce the requested ground-truth quantity."""


class DomainError(AbDesignError, ValueError):
    pass


class StateError(AbDesignError):
    """A design was asked to act before it was fitted."""


class InsufficientData(AbDesignError):
    pass


class ConfigError(AbDesignError):
    pass


# --------------------------------------------------------------------------
# randomness


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``.

    Sub-streams are derived with ``SeedSequence`` spawn keys, so the stream
    for replicate ``r`` does not depend on how many other replicates exist or
    on the order they run in.
    """
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def stable_key(text: str) -> int:
    """Deterministic 32-bit key for a string (``hash()`` is salted per process)."""
    h = 2166136261
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


# --------------------------------------------------------------------------
# observations and records


@dataclass(frozen=True)
class ObservationSpace:
    kind: str  # "discrete" or "continuous"
    size: int  # cardinality (discrete) or dimension (continuous)

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise DomainError(f"unknown observation kind {self.kind!r}")
        if self.size < 1:
            raise DomainError("observation space size must be positive")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def obs_shape(self) -> tuple:
        return () if self.discrete else (self.size,)

    def validate(self, obs) -> None:
        arr = np.asarray(obs)
        if self.discrete:
            if arr.shape != () or not np.issubdtype(arr.dtype, np.integer):
                raise DomainError(f"discrete observation must be an integer, got {obs!r}")
            if not 0 <= int(arr) < self.size:
                raise DomainError(f"observation index {int(arr)} outside [0, {self.size})")
        else:
            if arr.shape != (self.size,):
                raise DomainError(
                    f"continuous observation must have shape ({self.size},), got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise DomainError("continuous observation must be finite")


@dataclass
class EpisodeRecord:
    """One day of data.

    ``p_treat`` is the probability of ``A_1 = 1`` actually used by the design
    when the day was assigned (``None`` when the design does not randomise at
    the day level).
    """

    day: int
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    p_treat: Optional[float] = None

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int8)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.observations = np.asarray(self.observations)
        T = self.rewards.shape[0]
        if self.day < 1:
            raise DomainError("day index must be positive")
        if T < 1 or self.actions.shape != (T,):
            raise DomainError("actions and rewards must both have length T >= 1")
        if self.observations.shape[0] not in (T, T + 1):
            raise DomainError("observations must have length T or T + 1")
        if not np.all((self.actions == 0) | (self.actions == 1)):
            raise DomainError("actions must be binary")
        if not np.all(np.isfinite(self.rewards)):
            raise DomainError("rewards must be finite")

    @property
    def horizon(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def initial_observation(self):
        return self.observations[0]

    @property
    def first_action(self) -> int:
        return int(self.actions[0])

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def has_terminal(self) -> bool:
        return self.observations.shape[0] == self.horizon + 1

    @property
    def constant_action(self) -> bool:
        return bool(np.all(self.actions == self.actions[0]))


@dataclass
class ExperimentLog:
    n: int
    m0: int
    episodes: list = field(default_factory=list)

    def __post_init__(self):
        if self.m0 < 0 or not 2 * self.m0 < self.n:
            raise DomainError(f"need 2*m0 < n, got n={self.n}, m0={self.m0}")

    def append(self, record: EpisodeRecord) -> None:
        if self.episodes and record.day <= self.episodes[-1].day:
            raise DomainError("episodes must be appended in increasing day order")
        if len(self.episodes) >= self.n:
            raise DomainError("log already holds n days")
        self.episodes.append(record)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self) -> Iterator[EpisodeRecord]:
        return iter(self.episodes)

    @property
    def burn_in_days(self) -> int:
        return 2 * self.m0

    def before(self, day: int) -> list:
        return [ep for ep in self.episodes if ep.day < day]


# --------------------------------------------------------------------------
# environments


class Environment(abc.ABC):
    """Data-generating process.

    Subclasses supply the exogenous noise for a day, the initial law and a
    one-step transition kernel that works on a batch of partial histories.
    The same kernel backs the single-episode API (``reset``/``step``) and the
    replicate-batched ``rollout`` used by the benchmark, so both paths draw
    identical numbers from identical generators.
    """

    name = "environment"
    #: "nmdp", "tmdp" or "mdp"
    process = "nmdp"

    def __init__(self, horizon: int, space: ObservationSpace):
        if horizon < 1:
            raise DomainError("horizon T must be >= 1")
        self.horizon = int(horizon)
        self.space = space

    # -- noise ---------------------------------------------------------------
    @abc.abstractmethod
    def draw_initial_noise(self, rng: np.random.Generator) -> dict:
        """Exogenous randomness for O_1."""

    @abc.abstractmethod
    def draw_step_noise(self, rng: np.random.Generator, steps: int) -> dict:
        """Exogenous randomness for ``steps`` transitions; arrays lead with the step axis."""

    def draw_day_noise(self, rng: np.random.Generator) -> dict:
        noise = {"init": self.draw_initial_noise(rng)}
        noise["steps"] = self.draw_step_noise(rng, self.horizon)
        return noise

    # -- kernel --------------------------------------------------------------
    @abc.abstractmethod
    def initial_obs(self, init_noise: dict) -> np.ndarray:
        """Batched O_1 from batched initial noise (leading batch axis)."""

    @abc.abstractmethod
    def transition(self, obs_hist, act_hist, t: int, step_noise: dict):
        """Batched ``(R_t, O_{t+1})``.

        ``obs_hist`` holds O_1..O_t and ``act_hist`` holds A_1..A_t along
        axis 1 (so the current pair is the last column); ``t`` is 1-based and
        ``step_noise`` has the batch axis first.
        """

    # -- batched rollout -----------------------------------------------------
    def rollout(self, noise: dict, actions: np.ndarray):
        """Simulate a batch of days with predetermined action sequences.

        ``noise`` is a stacked day-noise dict (see :func:`stack_noise`) and
        ``actions`` has shape ``(B, T)``.  Returns ``(obs, rewards)`` with
        shapes ``(B, T + 1, *obs_shape)`` and ``(B, T)``.
        """
        actions = np.asarray(actions, dtype=np.int8)
        B, T = actions.shape
        if T != self.horizon:
            raise DomainError(f"expected {self.horizon} actions per day, got {T}")
        o1 = self.initial_obs(noise["init"])
        obs = np.empty((B, T + 1) + self.space.obs_shape, dtype=o1.dtype)
        obs[:, 0] = o1
        rewards = np.empty((B, T))
        for t in range(1, T + 1):
            step = {k: v[:, t - 1] for k, v in noise["steps"].items()}
            r, nxt = self.transition(obs[:, :t], actions[:, :t], t, step)
            rewards[:, t - 1] = r
            obs[:, t] = nxt
        return obs, rewards

    # -- single episode API --------------------------------------------------
    def reset(self, rng: np.random.Generator):
        """Draw O_1."""
        init = self.draw_initial_noise(rng)
        batched = {k: np.asarray(v)[None] for k, v in init.items()}
        return _scalar_obs(self.initial_obs(batched)[0], self.space)

    def step(self, history, action: int, rng: np.random.Generator):
        """One transition from a partial day.

        ``history`` is ``(observations, actions)`` with observations O_1..O_t
        and actions A_1..A_{t-1}; ``action`` is A_t.
        """
        observations, past_actions = history
        observations = np.asarray(observations)
        t = observations.shape[0]
        if t > self.horizon:
            raise HorizonExceeded(f"step {t} beyond horizon T={self.horizon}")
        if len(past_actions) != t - 1:
            raise DomainError("history must hold one fewer action than observations")
        if action not in (0, 1):
            raise DomainError("action must be 0 or 1")
        acts = np.append(np.asarray(past_actions, dtype=np.int8), np.int8(action))
        step_noise = self.draw_step_noise(rng, 1)
        step_noise = {k: np.asarray(v)[0][None] for k, v in step_noise.items()}
        r, nxt = self.transition(observations[None], acts[None], t, step_noise)
        return float(r[0]), _scalar_obs(nxt[0], self.space)

    def episode(self, rng: np.random.Generator) -> "Episode":
        return Episode(self, rng)

    # -- ground truth (optional) ----------------------------------------------
    def true_ate(self) -> float:
        raise CapabilityError(f"{self.name} has no exact ATE")

    def describe(self) -> dict:
        return {"name": self.name, "T": self.horizon}


def _scalar_obs(obs, space: ObservationSpace):
    return int(obs) if space.discrete else np.array(obs, dtype=float)


def stack_noise(noises: Sequence[dict]) -> dict:
    """Stack per-replicate day noise into one batch."""
    out = {
        "init": {k: np.stack([n["init"][k] for n in noises]) for k in noises[0]["init"]},
        "steps": {k: np.stack([n["steps"][k] for n in noises]) for k in noises[0]["steps"]},
    }
    return out


class Episode:
    """Step-by-step simulation of one day.

    The whole day's exogenous noise is drawn up front, so stepping through an
    ``Episode`` consumes exactly the draws the batched ``rollout`` would.
    """

    def __init__(self, env: Environment, rng: np.random.Generator):
        self.env = env
        noise = env.draw_day_noise(rng)
        self._noise = {
            "init": {k: np.asarray(v)[None] for k, v in noise["init"].items()},
            "steps": {k: np.asarray(v)[None] for k, v in noise["steps"].items()},
        }
        o1 = env.initial_obs(self._noise["init"])
        self._obs = [o1[0]]
        self._actions: list = []
        self._rewards: list = []

    @property
    def t(self) -> int:
        """1-based index of the next step to be taken."""
        return len(self._actions) + 1

    @property
    def observation(self):
        return _scalar_obs(self._obs[-1], self.env.space)

    @property
    def done(self) -> bool:
        return len(self._actions) >= self.env.horizon

    def step(self, action: int):
        if self.done:
            raise HorizonExceeded(f"day already has T={self.env.horizon} steps")
        if action not in (0, 1):
            raise DomainError("action must be 0 or 1")
        t = self.t
        self._actions.append(int(action))
        obs_hist = np.stack(self._obs)[None]
        act_hist = np.asarray(self._actions, dtype=np.int8)[None]
        step = {k: v[:, t - 1] for k, v in self._noise["steps"].items()}
        r, nxt = self.env.transition(obs_hist, act_hist, t, step)
        self._rewards.append(float(r[0]))
        self._obs.append(nxt[0])
        return float(r[0]), _scalar_obs(nxt[0], self.env.space)

    def record(self, day: int, p_treat: Optional[float] = None) -> EpisodeRecord:
        return EpisodeRecord(
            day=day,
            observations=np.stack(self._obs),
            actions=np.asarray(self._actions, dtype=np.int8),
            rewards=np.asarray(self._rewards),
            p_treat=p_treat,
        )


# --------------------------------------------------------------------------
# designs


@dataclass
class DayPlan:
    """Actions chosen for one day at its start.

    None of the allocation rules here look at within-day observations beyond
    O_1, so the whole action sequence is fixed once O_1 is seen.
    """

    actions: np.ndarray
    p_treat: Optional[float] = None
    fitted: bool = False


class Design(abc.ABC):
    """Sequential allocation rule owned by a single replicate."""

    name = "design"
    #: True when every post-burn-in day holds its first action all day
    in_class = False

    def __init__(self, n: int, horizon: int, m0: int = 0):
        if n < 1 or horizon < 1:
            raise DomainError("n and T must be positive")
        self.n = int(n)
        self.horizon = int(horizon)
        self.m0 = int(m0)

    @abc.abstractmethod
    def start_day(self, day: int, o1, rng: np.random.Generator) -> DayPlan:
        """Choose the day's action sequence after seeing O_1."""

    def finish_day(self, record: EpisodeRecord) -> None:
        """Consume the completed day (refit nuisances, update estimators)."""

    def constant(self, a: int) -> np.ndarray:
        return np.full(self.horizon, a, dtype=np.int8)


def run_episode(env: Environment, design: Design, day: int, rng: np.random.Generator,
                design_rng: Optional[np.random.Generator] = None) -> EpisodeRecord:
    """Simulate one day under ``design`` and hand the record back to it.

    ``rng`` drives the environment and ``design_rng`` the design's own coins
    (defaults to ``rng``).
    """
    if design.horizon != env.horizon:
        raise DomainError("design and environment disagree on T")
    ep = env.episode(rng)
    plan = design.start_day(day, ep.observation, design_rng if design_rng is not None else rng)
    for a in plan.actions:
        ep.step(int(a))
    record = ep.record(day, plan.p_treat)
    design.finish_day(record)
    return record
