"""Treatment-allocation designs.

Baselines (random, half-half, epsilon-greedy) and the adaptive designs that
randomise only the first action of a day and hold it until the day ends.
The adaptive designs run each global policy for ``m0`` days (treatment
first), then allocate day ``m`` with probability proportional to the fitted
standard deviations of the two arms, using fits on days ``< m`` only.

All three adaptive designs also accumulate the day-level doubly-robust terms
as days finish, using the probability that was actually drawn with.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (ConfigError, DayPlan, Design, DomainError, EpisodeRecord, InsufficientData,
                   ObservationSpace, StateError)
from .estimation import AteEstimate, PointEstimate, fqe_ate, psi_nmdp, psi_tmdp
from .regression import RIDGE, features, n_features, predict, ridge_fit

CLIP = 0.05
SIGMA_FLOOR = 1e-3
EPSILON = 0.1


# --------------------------------------------------------------------------
# allocation rule


@dataclass(frozen=True)
class AllocationProbability:
    p1: float
    provenance: str = "fitted"  # or "burn-in"

    def __float__(self):
        return self.p1


def _check_clip(clip: float) -> float:
    if not 0.0 < clip < 0.5:
        raise DomainError("clip must lie in (0, 0.5)")
    return float(clip)


def nmdp_allocation_probability(sigma1: float, sigma0: float, clip: float = CLIP) -> AllocationProbability:
    """``sigma1 / (sigma0 + sigma1)`` clipped to ``[clip, 1 - clip]``; 0.5 when both are 0."""
    clip = _check_clip(clip)
    s1, s0 = float(sigma1), float(sigma0)
    if not (math.isfinite(s1) and math.isfinite(s0)):
        raise DomainError("standard deviations must be finite")
    if s1 < 0 or s0 < 0:
        raise DomainError("standard deviations must be non-negative")
    p = 0.5 if s1 + s0 == 0 else s1 / (s0 + s1)
    return AllocationProbability(min(max(p, clip), 1.0 - clip), "fitted")


BURN_IN_TREAT = AllocationProbability(1.0, "burn-in")
BURN_IN_CONTROL = AllocationProbability(0.0, "burn-in")


# --------------------------------------------------------------------------
# nuisance fits


def _stack(records, space):
    if not records:
        raise InsufficientData("no prior days")
    T = records[0].horizon
    if any(r.horizon != T for r in records):
        raise DomainError("all days must share the horizon")
    terminal = all(r.has_terminal for r in records)
    k = T + 1 if terminal else T
    obs = np.stack([np.asarray(r.observations[:k]) for r in records])
    rewards = np.stack([r.rewards for r in records])
    a1 = np.array([r.first_action for r in records])
    return obs, rewards, a1, terminal


def _arm_counts(a1):
    for a in (0, 1):
        if int((a1 == a).sum()) < 2:
            raise InsufficientData(f"arm {a} has fewer than 2 prior days")


@dataclass
class NmdpFit:
    """Per-arm value and squared-residual regressions on features of O_1."""

    beta_v: np.ndarray  # (2, q)
    beta_s: np.ndarray  # (2, q)
    sigma_floor: float

    def value(self, a: int, x) -> np.ndarray:
        return predict(x, self.beta_v[a])

    def sigma2(self, a: int, x) -> np.ndarray:
        return np.maximum(predict(x, self.beta_s[a]), self.sigma_floor ** 2)

    def sigma(self, a: int, x) -> np.ndarray:
        return np.sqrt(self.sigma2(a, x))


def _arm_weights(a1) -> np.ndarray:
    a1 = np.asarray(a1)
    _arm_counts(a1)
    return np.stack([a1 == 0, a1 == 1]).astype(float)  # (2, m)


def fit_nmdp_arrays(X1, G, a1, sigma_floor=SIGMA_FLOOR, ridge=RIDGE) -> NmdpFit:
    X1 = np.asarray(X1, float)
    G = np.asarray(G, float)
    W = _arm_weights(a1)
    Xb = np.broadcast_to(X1, (2,) + X1.shape)
    beta_v = ridge_fit(Xb, np.broadcast_to(G, W.shape), ridge, weights=W)
    resid2 = (G - predict(Xb, beta_v[:, None, :])) ** 2
    beta_s = ridge_fit(Xb, resid2, ridge, weights=W)
    return NmdpFit(beta_v, beta_s, float(sigma_floor))


def fit_nmdp_sigma(records, space: ObservationSpace, degree: int = 2,
                   sigma_floor: float = SIGMA_FLOOR, ridge: float = RIDGE) -> NmdpFit:
    """Regress the day total on features of O_1, then the squared residuals, per arm."""
    obs, rewards, a1, _ = _stack(list(records), space)
    return fit_nmdp_arrays(features(obs[:, 0], space, degree), rewards.sum(1), a1, sigma_floor, ridge)


@dataclass
class TmdpFit:
    beta_v: np.ndarray  # (2, T, q): V_t^a(o) = phi(o)' beta_v[a, t - 1]
    sigma2_star: np.ndarray  # (2,)
    sigma_floor: float

    def value(self, a: int, t: int, x) -> np.ndarray:
        return predict(x, self.beta_v[a, t - 1])

    @property
    def sigma_star(self) -> np.ndarray:
        return np.sqrt(self.sigma2_star)


def fit_tmdp_arrays(X, R, a1, sigma_floor=SIGMA_FLOOR, ridge=RIDGE) -> TmdpFit:
    """``X`` is ``(m, >=T, q)`` features of O_1..O_T(+1), ``R`` is ``(m, T)``."""
    X = np.asarray(X, float)
    R = np.asarray(R, float)
    W = _arm_weights(a1)
    m, T = R.shape
    togo = np.cumsum(R[:, ::-1], axis=1)[:, ::-1]  # sum_{j >= t} R_j
    Xt = np.swapaxes(X[:, :T], 0, 1)  # (T, m, q)
    Xb = np.broadcast_to(Xt, (2,) + Xt.shape)
    Wb = np.broadcast_to(W[:, None, :], (2, T, m))
    beta = ridge_fit(Xb, np.broadcast_to(togo.T, (2, T, m)), ridge, weights=Wb)  # (2, T, q)
    v = predict(Xb, beta[:, :, None, :])  # (2, T, m)
    v_next = np.concatenate([v[:, 1:], np.zeros((2, 1, m))], axis=1)
    td2 = ((R.T[None] + v_next - v) ** 2).sum(1)  # (2, m)
    s2 = (td2 * W).sum(1) / W.sum(1)
    return TmdpFit(beta, np.maximum(s2, sigma_floor ** 2), float(sigma_floor))


def fit_tmdp_sigma(records, space: ObservationSpace, degree: int = 2,
                   sigma_floor: float = SIGMA_FLOOR, ridge: float = RIDGE) -> TmdpFit:
    """Per-time regressions of reward-to-go on O_t; sigma2_star is the mean daily sum of squared TD errors.

    The most recent fit is used for every prior day inside the sum.
    """
    obs, rewards, a1, _ = _stack(list(records), space)
    return fit_tmdp_arrays(features(obs, space, degree), rewards, a1, sigma_floor, ridge)


@dataclass
class MdpFit:
    eta: np.ndarray  # (2,) average reward per step
    beta: np.ndarray  # (2, p) relative value coefficients
    sigma2_star: np.ndarray  # (2,)
    sigma_floor: float

    @property
    def sigma_star(self) -> np.ndarray:
        return np.sqrt(self.sigma2_star)


def relative_features(obs, space: ObservationSpace, degree: int = 2) -> np.ndarray:
    """Basis without its constant direction (the offset is carried by eta)."""
    return drop_constant(features(obs, space, degree), space)


def drop_constant(phi: np.ndarray, space: ObservationSpace) -> np.ndarray:
    return phi[..., 1:]


def fit_mdp_arrays(Psi, R, a1, terminal: bool = True, sigma_floor=SIGMA_FLOOR,
                   ridge=RIDGE) -> MdpFit:
    """Average-reward LSTD per arm.

    Solves ``sum z_t (R_t - eta - (psi_t - psi_{t+1})'beta) = 0`` with
    instruments ``z_t = [1, psi_t]``, pooling every step of every arm-``a``
    day, with a small ridge so a singular system never fails.
    """
    Psi = np.asarray(Psi, float)
    R = np.asarray(R, float)
    W = _arm_weights(a1)
    m, T = R.shape
    steps = T if terminal else T - 1
    p = Psi.shape[-1]
    if steps < 1:
        # one step and no O_2: there is no transition, only eta is identified
        eta = (W @ R[:, 0]) / W.sum(1)
        s2 = (W * (R[None, :, 0] - eta[:, None]) ** 2).sum(1) / W.sum(1)
        return MdpFit(eta, np.zeros((2, p)), np.maximum(s2, sigma_floor ** 2), float(sigma_floor))
    cur = Psi[:, :steps].reshape(-1, p)
    ones = np.ones((cur.shape[0], 1))
    Z = np.hstack([ones, cur])
    D = np.hstack([ones, cur - Psi[:, 1:steps + 1].reshape(-1, p)])
    r = R[:, :steps].reshape(-1)
    w = np.repeat(W, steps, axis=1)  # (2, m * steps)
    ZwT = Z.T[None] * w[:, None, :]
    A = ZwT @ D
    b = ZwT @ r
    scale = np.abs(np.diagonal(A, axis1=1, axis2=2)).mean(1) + 1.0
    theta = np.linalg.solve(A + (ridge * scale)[:, None, None] * np.eye(p + 1), b[..., None])[..., 0]
    td = r[None] - theta @ D.T  # (2, m * steps)
    td2 = (td ** 2).reshape(2, m, steps).sum(2)
    s2 = (td2 * W).sum(1) / W.sum(1) * T / steps
    return MdpFit(theta[:, 0], theta[:, 1:], np.maximum(s2, sigma_floor ** 2), float(sigma_floor))


def fit_mdp_sigma(records, space: ObservationSpace, degree: int = 2,
                  sigma_floor: float = SIGMA_FLOOR, ridge: float = RIDGE) -> MdpFit:
    obs, rewards, a1, terminal = _stack(list(records), space)
    return fit_mdp_arrays(relative_features(obs, space, degree), rewards, a1, terminal,
                          sigma_floor, ridge)


# --------------------------------------------------------------------------
# baselines


def baseline_estimate(records, space, degree: int = 2, alpha: float = 0.05, rng=None,
                      n_boot: int = 100) -> PointEstimate:
    """Value-based estimate for logs that are not day-level randomised."""
    return fqe_ate(records, space, degree, alpha, n_boot, rng)


class FqeReporting:
    space: Optional[ObservationSpace] = None
    degree = 2
    fqe_suffix: Optional[str] = ""  # design-id suffix of the fitted-Q readout, None if absent

    def estimates(self, log, alpha: float = 0.05, rng=None, fqe: bool = True) -> dict:
        """``fqe=False`` leaves the fitted-Q readout to the caller (batched runs)."""
        if self.space is None:
            raise ConfigError("baseline estimation needs the observation space")
        if not fqe:
            return {}
        return {"": baseline_estimate(list(log), self.space, self.degree, alpha, rng)}


class ConstantDesign(FqeReporting, Design):
    in_class = True

    def __init__(self, n: int, horizon: int, action: int = 1, **_):
        super().__init__(n, horizon)
        if action not in (0, 1):
            raise DomainError("action must be 0 or 1")
        self.action = action
        self.name = "always_treat" if action == 1 else "always_control"

    def start_day(self, day, o1, rng):
        return DayPlan(self.constant(self.action), float(self.action))


class RandomDesign(FqeReporting, Design):
    """Independent fair coin at every step of every day."""

    name = "random"

    def start_day(self, day, o1, rng):
        return DayPlan((rng.random(self.horizon) < 0.5).astype(np.int8))


class HalfHalfDesign(FqeReporting, Design):
    """Global treatment on days ``1..ceil(n/2)``, global control afterwards."""

    name = "half_half"
    in_class = True

    def action(self, day: int) -> int:
        if not 1 <= day <= self.n:
            raise DomainError(f"day must lie in [1, {self.n}]")
        return 1 if day <= (self.n + 1) // 2 else 0

    def start_day(self, day, o1, rng):
        a = self.action(day)
        return DayPlan(self.constant(a), float(a))


class EpsilonGreedyDesign(FqeReporting, Design):
    """Per-step epsilon-greedy over day-level arm means.

    ``Q(a)`` is the running mean of ``T^-1 sum_t R_t`` over days whose
    majority action was ``a`` (a tied day goes to its first action).  Burn-in
    days are fully random per step.  Ties between arms go to action 1 and an
    arm with no attributed day is chosen first.
    """

    name = "epsilon_greedy"

    def __init__(self, n: int, horizon: int, m0: int = 0, epsilon: float = EPSILON, **_):
        super().__init__(n, horizon, m0)
        if not 0.0 <= epsilon <= 1.0:
            raise DomainError("epsilon must lie in [0, 1]")
        self.epsilon = float(epsilon)
        self.q_sum = np.zeros(2)
        self.q_count = np.zeros(2, dtype=np.int64)

    @property
    def q(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.q_count > 0, self.q_sum / np.maximum(self.q_count, 1), np.nan)

    def greedy_action(self) -> int:
        q = self.q
        if np.isnan(q[1]):
            return 1
        if np.isnan(q[0]):
            return 0
        return 1 if q[1] >= q[0] else 0

    def start_day(self, day, o1, rng):
        T = self.horizon
        coin = (rng.random(T) < 0.5).astype(np.int8)
        if day <= 2 * self.m0:
            return DayPlan(coin)
        explore = rng.random(T) < self.epsilon
        return DayPlan(np.where(explore, coin, np.int8(self.greedy_action())).astype(np.int8))

    def finish_day(self, record: EpisodeRecord):
        ones = int(record.actions.sum())
        T = record.horizon
        if 2 * ones == T:
            a = record.first_action
        else:
            a = 1 if 2 * ones > T else 0
        self.q_sum[a] += record.total_reward / T
        self.q_count[a] += 1


# --------------------------------------------------------------------------
# adaptive designs


class AdaptiveDesign(Design):
    """Burn-in, daily refits and online psi accumulation shared by the three variants."""

    in_class = True
    fit_name = "nmdp"

    def __init__(self, n: int, horizon: int, m0: Optional[int] = None,
                 space: Optional[ObservationSpace] = None, clip: float = CLIP,
                 sigma_floor: float = SIGMA_FLOOR, degree: int = 2, ridge: float = RIDGE,
                 alpha: float = 0.05, fqe_readout: bool = True, **_):
        m0 = n // 4 if m0 is None else m0
        super().__init__(n, horizon, m0)
        if space is None:
            raise ConfigError("adaptive designs need the observation space")
        if sigma_floor <= 0:
            raise DomainError("sigma_floor must be positive")
        self.space = space
        self.clip = _check_clip(clip)
        self.sigma_floor = float(sigma_floor)
        self.degree = int(degree)
        self.ridge = float(ridge)
        self.records: list = []
        q = n_features(space, self.degree)
        self._feat = np.zeros((n, horizon + 1, q))
        self._rewards = np.zeros((n, horizon))
        self._a1 = np.zeros(n, dtype=np.int8)
        self._terminal = True
        self.value_fit: Optional[NmdpFit] = None
        self.sigma_fit = None
        self.fitted_through = 0
        self.alpha = alpha
        self.fqe_readout = bool(fqe_readout)
        self.estimate = AteEstimate(alpha=alpha)
        self.post_terms: list = []
        self.estimate_is = AteEstimate(alpha=alpha)
        self.estimate_value = AteEstimate(alpha=alpha)
        self._pending = None
        self.probabilities: list = []

    # -- fitting -------------------------------------------------------------
    def _arrays(self):
        k = len(self.records)
        steps = self.horizon + 1 if self._terminal else self.horizon
        return self._feat[:k, :steps], self._rewards[:k], self._a1[:k]

    def refit(self) -> None:
        X, R, a1 = self._arrays()
        self.value_fit = fit_nmdp_arrays(X[:, 0], R.sum(1), a1, self.sigma_floor, self.ridge)
        self.sigma_fit = self.fit_sigma(X, R, a1)
        self.fitted_through = self.records[-1].day

    def fit_sigma(self, X, R, a1):
        return self.value_fit

    def arm_sigmas(self, x1) -> tuple:
        raise NotImplementedError

    # -- allocation ----------------------------------------------------------
    def allocation(self, day: int, o1) -> AllocationProbability:
        if day <= self.m0:
            return BURN_IN_TREAT
        if day <= 2 * self.m0:
            return BURN_IN_CONTROL
        if self.value_fit is None or self.fitted_through != day - 1:
            raise StateError(f"design not fitted on days before {day}")
        s1, s0 = self.arm_sigmas(self._x1(o1))
        return nmdp_allocation_probability(s1, s0, self.clip)

    def _x1(self, o1):
        return features(np.asarray(o1), self.space, self.degree)

    def start_day(self, day, o1, rng):
        prob = self.allocation(day, o1)
        self.probabilities.append(prob)
        if prob.provenance == "burn-in":
            self._pending = None
            return DayPlan(self.constant(int(prob.p1)), prob.p1)
        a = int(rng.random() < prob.p1)
        x1 = self._x1(o1)
        self._pending = (day, float(self.value_fit.value(1, x1)), float(self.value_fit.value(0, x1)),
                         prob.p1)
        return DayPlan(self.constant(a), prob.p1, fitted=True)

    def finish_day(self, record: EpisodeRecord):
        if self.records and record.day <= self.records[-1].day:
            raise DomainError("days must be finished in increasing order")
        if record.day > 2 * self.m0:
            if self._pending is None or self._pending[0] != record.day:
                raise StateError(f"day {record.day} was not started by this design")
            _, v1, v0, p1 = self._pending
            psi = self.psi(record, v1, v0, p1)
            self.estimate.update(psi)
            self.post_terms.append(psi)
            self.estimate_is.update(self.psi(record, v1, v0, p1, "is"))
            self.estimate_value.update(self.psi(record, v1, v0, p1, "value"))
            self._pending = None
        k = len(self.records)
        if k >= self.n:
            raise DomainError("design already holds n days")
        steps = record.observations.shape[0]
        self._feat[k, :steps] = features(record.observations, self.space, self.degree)
        self._terminal = self._terminal and record.has_terminal
        self._rewards[k] = record.rewards
        self._a1[k] = record.first_action
        self.records.append(record)
        if record.day >= 2 * self.m0 and self.m0 > 0:
            self.refit()

    def psi(self, record, v1, v0, p1, kind="dr"):
        return psi_nmdp(record, v1, v0, p1, kind)

    def burn_in_terms(self) -> list:
        """Burn-in days scored with their deterministic probabilities.

        With ``pi(A_1) = 1`` the observed arm's bracket is just ``G / T`` and
        the other arm contributes its fitted value, so a treated day adds
        ``(G - V^0(O_1)) / T`` and a control day ``(V^1(O_1) - G) / T``.
        Each arm's value fit only uses that arm's days, so the latest fit
        never contains the day it scores.
        """
        if self.value_fit is None:
            return []
        T = self.horizon
        out = []
        for r in self.records[:2 * self.m0]:
            x1 = self._x1(r.initial_observation)
            if r.first_action == 1:
                out.append((r.total_reward - float(self.value_fit.value(0, x1))) / T)
            else:
                out.append((float(self.value_fit.value(1, x1)) - r.total_reward) / T)
        return out

    @property
    def estimate_pooled(self) -> AteEstimate:
        """Post-burn-in terms together with the burn-in days."""
        est = AteEstimate(alpha=self.alpha)
        for v in self.burn_in_terms() + self.post_terms:
            est.update(v)
        return est

    # -- reporting -----------------------------------------------------------
    @property
    def fqe_suffix(self) -> Optional[str]:
        return "+fqe" if self.fqe_readout else None

    def estimates(self, log=None, alpha: float = 0.05, rng=None, fqe: bool = True) -> dict:
        out = {"": self.estimate, "+burnin": self.estimate_pooled}
        if fqe and self.fqe_readout and log is not None:
            out["+fqe"] = baseline_estimate(list(log), self.space, self.degree, alpha, rng)
        return out


class NmdpDesign(AdaptiveDesign):
    """Observation-dependent first-action probability from per-arm sd regressions."""

    name = "nmdp"

    def arm_sigmas(self, x1):
        return float(self.value_fit.sigma(1, x1)), float(self.value_fit.sigma(0, x1))


class TmdpDesign(AdaptiveDesign):
    """Observation-free probability from per-time TD-error variance sums."""

    name = "tmdp"

    def fit_sigma(self, X, R, a1):
        return fit_tmdp_arrays(X, R, a1, self.sigma_floor, self.ridge)

    def arm_sigmas(self, x1):
        s = self.sigma_fit.sigma_star
        return float(s[1]), float(s[0])

    def psi(self, record, v1, v0, p1, kind="dr"):
        return psi_tmdp(record, v1, v0, p1, kind)


class MdpDesign(TmdpDesign):
    """As :class:`TmdpDesign` with one stationary value per arm from average-reward LSTD."""

    name = "mdp"

    def fit_sigma(self, X, R, a1):
        return fit_mdp_arrays(drop_constant(X, self.space), R, a1, self._terminal,
                              self.sigma_floor, self.ridge)


DESIGNS = {
    "random": RandomDesign,
    "half_half": HalfHalfDesign,
    "epsilon_greedy": EpsilonGreedyDesign,
    "nmdp": NmdpDesign,
    "tmdp": TmdpDesign,
    "mdp": MdpDesign,
    "always_treat": ConstantDesign,
    "always_control": ConstantDesign,
}

HYPERPARAMETERS = {
    "random": (),
    "half_half": (),
    "epsilon_greedy": ("epsilon",),
    "nmdp": ("clip", "sigma_floor", "degree", "ridge", "fqe_readout"),
    "tmdp": ("clip", "sigma_floor", "degree", "ridge", "fqe_readout"),
    "mdp": ("clip", "sigma_floor", "degree", "ridge", "fqe_readout"),
    "always_treat": (),
    "always_control": (),
}


def make_design(name: str, n: int, horizon: int, space: ObservationSpace, m0: Optional[int] = None,
                alpha: float = 0.05, degree: int = 2, **hyper) -> Design:
    try:
        cls = DESIGNS[name]
    except KeyError:
        raise ConfigError(f"unknown design {name!r}") from None
    unknown = set(hyper) - set(HYPERPARAMETERS[name])
    if unknown:
        raise ConfigError(f"design {name!r} does not take {sorted(unknown)}")
    m0 = n // 4 if m0 is None else m0
    if name in ("always_treat", "always_control"):
        d = ConstantDesign(n, horizon, action=int(name == "always_treat"))
    elif cls in (NmdpDesign, TmdpDesign, MdpDesign):
        d = cls(n, horizon, m0=m0, space=space, alpha=alpha, degree=degree, **hyper)
    else:
        d = cls(n, horizon, m0=m0, **hyper) if cls is EpsilonGreedyDesign else cls(n, horizon, m0)
    d.space = space
    d.degree = degree
    return d
