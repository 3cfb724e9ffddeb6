"""Online doubly-robust ATE estimation and Wald intervals.

The day-level term for day ``i`` is

    psi_i = T^-1 * sum_a (-1)^(a+1) [V_a(O_1) + 1{A_1 = a} / pi(a) * (G_i - V_a(O_1))]

with ``G_i`` the day's total reward and ``V_a``, ``pi`` fitted on earlier
days only.  The ATE estimate is the running mean of the terms and its
variance the running sample variance, so nothing but three numbers needs to
be kept between days.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional

import numpy as np

from .core import DomainError, EpisodeRecord, ObservationSpace
from .regression import features, solve_normal

PSI_KINDS = ("dr", "is", "value")


@dataclass(frozen=True)
class PsiTerm:
    day: int
    value: float
    treated: float  # the a = 1 bracket
    control: float  # the a = 0 bracket


def _psi(total: float, a1: int, T: int, v1: float, v0: float, p1: float, p0: float,
         day: int, kind: str) -> PsiTerm:
    if kind not in PSI_KINDS:
        raise DomainError(f"unknown psi kind {kind!r}")
    if kind != "value" and (not p1 > 0 or not p0 > 0):
        raise DomainError("allocation probabilities must be positive for both arms")
    if kind == "is":
        v1 = v0 = 0.0
    treated, control = v1, v0
    if kind != "value":
        if a1 == 1:
            treated = v1 + (total - v1) / p1
        else:
            control = v0 + (total - v0) / p0
    treated /= T
    control /= T
    return PsiTerm(day=day, value=treated - control, treated=treated, control=control)


def psi_nmdp(record: EpisodeRecord, v1: float, v0: float, p1: float, kind: str = "dr") -> PsiTerm:
    """Day-level term with an allocation that may depend on O_1.

    ``v1``/``v0`` are the fitted values at this day's O_1 and ``p1`` the
    probability of treatment that was used for this day.  ``kind="is"``
    zeroes the value model and ``kind="value"`` drops the weighting term.
    """
    return _psi(record.total_reward, record.first_action, record.horizon, v1, v0, p1, 1.0 - p1,
                record.day, kind)


def psi_tmdp(record: EpisodeRecord, v1: float, v0: float, p1: float, kind: str = "dr") -> PsiTerm:
    """Same term with an observation-free allocation ``pi(a)``.

    Under a design that holds its first action all day the marginal
    observation-action ratio at every step reduces to ``1{A_1 = a} / pi(a)``,
    which leaves exactly the NMDP form.
    """
    return psi_nmdp(record, v1, v0, p1, kind)


def normal_quantile(q: float) -> float:
    return NormalDist().inv_cdf(q)


@dataclass
class AteEstimate:
    """Running mean/variance of psi terms (Welford) with a Wald interval."""

    alpha: float = 0.05
    n_eff: int = 0
    psi_mean: float = 0.0
    psi_m2: float = 0.0
    days: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")

    @property
    def point(self) -> float:
        return self.psi_mean

    @property
    def variance_hat(self) -> float:
        return self.psi_m2 / (self.n_eff - 1) if self.n_eff > 1 else 0.0

    @property
    def se(self) -> float:
        return math.sqrt(self.variance_hat / self.n_eff) if self.n_eff > 0 else math.nan

    @property
    def ci(self) -> tuple:
        return confidence_interval(self, self.alpha)

    def update(self, psi) -> "AteEstimate":
        x = float(psi.value if isinstance(psi, PsiTerm) else psi)
        if not math.isfinite(x):
            raise DomainError("psi term must be finite")
        if isinstance(psi, PsiTerm):
            self.days.append(psi.day)
        self.n_eff += 1
        delta = x - self.psi_mean
        self.psi_mean += delta / self.n_eff
        self.psi_m2 += delta * (x - self.psi_mean)
        return self


def update_estimate(est: AteEstimate, psi) -> AteEstimate:
    return est.update(psi)


def confidence_interval(est: AteEstimate, alpha: Optional[float] = None) -> tuple:
    alpha = est.alpha if alpha is None else alpha
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    if est.n_eff < 2:
        return (est.point, est.point)
    half = normal_quantile(1.0 - alpha / 2.0) * math.sqrt(est.variance_hat / est.n_eff)
    return (est.point - half, est.point + half)


def batch_estimate(terms, alpha: float = 0.05) -> AteEstimate:
    """Two-pass reference computation over a finished psi stream."""
    x = np.asarray([t.value if isinstance(t, PsiTerm) else t for t in terms], dtype=float)
    est = AteEstimate(alpha=alpha)
    est.n_eff = int(x.size)
    if x.size:
        est.psi_mean = float(x.mean())
        est.psi_m2 = float(((x - est.psi_mean) ** 2).sum())
    return est


# --------------------------------------------------------------------------
# value-based estimate for arbitrary logs


@dataclass
class PointEstimate:
    """Estimate with a normal-approximation interval from a standard error."""

    point: float
    se: float
    alpha: float = 0.05

    @property
    def ci(self) -> tuple:
        if not math.isfinite(self.se):
            return (math.nan, math.nan)
        half = normal_quantile(1.0 - self.alpha / 2.0) * self.se
        return (self.point - half, self.point + half)


IQR_PER_SD = 1.3489795003921634  # interquartile range of N(0, 1)


def fqe_ate(records, space: ObservationSpace, degree: int = 2, alpha: float = 0.05,
            n_boot: int = 100, rng: Optional[np.random.Generator] = None) -> PointEstimate:
    """ATE by backward fitted-Q evaluation of both global policies.

    For each arm ``a`` and ``t = T..1`` regress ``R_t + V_{t+1}^a(O_{t+1})``
    on the basis of ``O_t`` over the steps with ``A_t = a``; then average
    ``V_1^1(O_1) - V_1^0(O_1)`` over days.  Works for any within-day
    allocation pattern.  The standard error comes from a day-level
    multinomial bootstrap, solved in one batch, scaled by the interquartile
    range: a resample that nearly empties one (arm, step) cell gives a wild
    draw that would swamp a plain standard deviation.
    """
    return fqe_ate_batch([records], space, degree, alpha, n_boot, [rng])[0]


FQE_CHUNK = 64  # logs solved together; bounds the (T, logs, days, q*q) buffer


def fqe_ate_batch(logs, space: ObservationSpace, degree: int = 2, alpha: float = 0.05,
                  n_boot: int = 100, rngs=None) -> list:
    """``fqe_ate`` for several logs, one bootstrap generator per log.

    Logs of equal shape are solved together, which removes most of the
    per-log overhead when a benchmark cell has hundreds of replicates.
    The result for each log equals ``fqe_ate`` on it alone up to rounding.
    """
    logs = [list(r) for r in logs]
    rngs = [None] * len(logs) if rngs is None else list(rngs)
    if len(rngs) != len(logs):
        raise DomainError("need one generator per log")
    for r in logs:
        if len(r) < 2:
            raise DomainError("need at least two days")
    groups: dict = {}
    for k, r in enumerate(logs):
        groups.setdefault((len(r), r[0].horizon), []).append(k)
    out = [None] * len(logs)
    for ks in groups.values():
        for j in range(0, len(ks), FQE_CHUNK):
            part = ks[j:j + FQE_CHUNK]
            for k, est in zip(part, _fqe_group([logs[k] for k in part], space, degree, alpha,
                                               n_boot, [rngs[k] for k in part])):
                out[k] = est
    return out


def _fqe_group(logs, space, degree, alpha, n_boot, rngs) -> list:
    m, T = len(logs[0]), logs[0][0].horizon
    obs = np.stack([np.stack([r.observations[:T] for r in log]) for log in logs])
    X = features(obs, space, degree)  # (B, m, T, q)
    A = np.stack([[r.actions for r in log] for log in logs]).astype(float)
    R = np.stack([[r.rewards for r in log] for log in logs])
    W = np.stack([_boot_weights(m, n_boot, rng) for rng in rngs])  # (B, nb, m)
    B, nb, q = len(logs), W.shape[1], X.shape[-1]
    outer = np.einsum("bmti,bmtj->tbmij", X, X).reshape(T, B, m, q * q)
    v_next = np.zeros((2, B, nb, m))
    for t in range(T - 1, -1, -1):
        Xt = X[:, :, t]  # (B, m, q)
        At = A[:, :, t]
        Wa = W[None] * np.stack([1.0 - At, At])[:, :, None, :]  # (2, B, nb, m)
        gram = (Wa @ outer[t]).reshape(2, B, nb, q, q)
        rhs = (Wa * (R[None, :, None, :, t] + v_next)) @ Xt
        beta = solve_normal(gram, rhs[..., None])[..., 0]
        v_next = beta @ np.swapaxes(Xt, -1, -2)
    diff = (v_next[1] - v_next[0]) / T  # V_1 at O_1
    ates = (W * diff).sum(-1) / W.sum(-1)  # (B, nb)
    res = []
    for b in range(B):
        if nb > 2:
            q25, q75 = np.percentile(ates[b, 1:], [25.0, 75.0])
            se = float((q75 - q25) / IQR_PER_SD)
        else:
            se = math.nan
        res.append(PointEstimate(point=float(ates[b, 0]), se=se, alpha=alpha))
    return res


def _boot_weights(m: int, n_boot: int, rng) -> np.ndarray:
    """Row 0 is the original sample, the rest multinomial resample counts."""
    if n_boot and rng is not None:
        W = np.vstack([np.ones(m), rng.multinomial(m, np.full(m, 1.0 / m), size=n_boot)])
    else:
        W = np.ones((1, m))
    return W.astype(float)
