"""Small enumerable non-Markov decision process.

A history at time ``t`` is ``(o_1, a_1, ..., a_{t-1}, o_t)``.  Histories are
indexed in mixed radix: ``idx_1 = o_1`` and
``idx_{t+1} = (idx_t * 2 + a_t) * K + o_{t+1}``, so table ``t`` has
``K * (2K)**(t-1)`` rows.  Transition and reward laws are explicit
finite-support tables per ``(history, action)``; rewards and the next
observation are drawn independently given the history and action.
"""
from __future__ import annotations

from functools import cached_property
from itertools import product

import numpy as np

from ..core import CapabilityError, DomainError, Environment, ObservationSpace


def history_index(obs, acts, K: int) -> int:
    """Index of the history ``(o_1, a_1, ..., a_{t-1}, o_t)``."""
    idx = int(obs[0])
    for a, o in zip(acts, obs[1:]):
        idx = (idx * 2 + int(a)) * K + int(o)
    return idx


def decode_history(idx: int, t: int, K: int) -> tuple:
    """Inverse of :func:`history_index`; returns the flat history tuple."""
    items = []
    for _ in range(t - 1):
        o = idx % K
        idx //= K
        a = idx % 2
        idx //= 2
        items = [a, o] + items
    return tuple([idx] + items)


class TabularNmdpEnv(Environment):
    """Small tabular non-Markov process with exact enumeration of every path."""

    name = "tabular"
    process = "nmdp"

    def __init__(self, p0, trans, rew_vals, rew_probs):
        """``trans[t-1]`` has shape ``(H_t, 2, K)``; reward tables ``(H_t, 2, S)``."""
        p0 = np.asarray(p0, float)
        K = p0.shape[0]
        T = len(trans)
        super().__init__(T, ObservationSpace("discrete", K))
        if K > 3 or T > 4:
            raise DomainError("tabular NMDP is limited to |O| <= 3 and T <= 4")
        self.K = K
        self.p0 = p0
        self.trans = [np.asarray(x, float) for x in trans]
        self.rew_vals = [np.asarray(x, float) for x in rew_vals]
        self.rew_probs = [np.asarray(x, float) for x in rew_probs]
        self._check_tables()
        self._cp0 = np.cumsum(self.p0)
        self._ctrans = [np.cumsum(x, axis=-1) for x in self.trans]
        self._crew = [np.cumsum(x, axis=-1) for x in self.rew_probs]

    def _check_tables(self):
        if not np.isclose(self.p0.sum(), 1.0) or np.any(self.p0 < 0):
            raise DomainError("initial law must be a probability vector")
        for t in range(1, self.horizon + 1):
            H = self.n_histories(t)
            P, V, Q = self.trans[t - 1], self.rew_vals[t - 1], self.rew_probs[t - 1]
            if P.shape != (H, 2, self.K):
                raise DomainError(f"transition table {t} must have shape {(H, 2, self.K)}")
            if V.shape != Q.shape or V.shape[:2] != (H, 2):
                raise DomainError(f"reward tables {t} have inconsistent shapes")
            for arr in (P, Q):
                if np.any(arr < 0) or not np.allclose(arr.sum(-1), 1.0):
                    raise DomainError("conditional probability tables must row-sum to 1")

    def n_histories(self, t: int) -> int:
        return self.K * (2 * self.K) ** (t - 1)

    # -- constructors ------------------------------------------------------
    @classmethod
    def random(cls, rng: np.random.Generator, K: int = 2, T: int = 2, support: int = 3,
               markov: bool = False, noise_scale=(1.0, 1.0), deterministic: bool = False,
               deterministic_init: bool = False):
        """Random instance.

        ``noise_scale`` multiplies the reward-support spread per arm
        ``(control, treatment)`` so arm variances can be made unequal.
        ``markov=True`` makes every table depend on the history only through
        ``(o_t, t)``.  ``deterministic=True`` puts every reward and transition
        law on a single point (O_1 stays random unless ``deterministic_init``).
        """
        S = 1 if deterministic else support
        if deterministic_init:
            p0 = np.eye(K)[rng.integers(K)]
        else:
            p0 = rng.dirichlet(np.ones(K))
        trans, vals, probs = [], [], []
        for t in range(1, T + 1):
            H = K * (2 * K) ** (t - 1)
            rows = K if markov else H
            P = rng.dirichlet(np.ones(K), size=(rows, 2))
            if deterministic:
                P = np.eye(K)[P.argmax(-1)]
            mean = rng.normal(0.0, 1.0, size=(rows, 2, 1)) + np.array([0.0, 0.5])[None, :, None]
            spread = rng.gamma(2.0, 0.5, size=(rows, 2, 1)) * np.asarray(noise_scale)[None, :, None]
            V = mean + spread * rng.normal(size=(rows, 2, S))
            Q = rng.dirichlet(np.ones(S), size=(rows, 2)) if S > 1 else np.ones((rows, 2, 1))
            if markov:
                last = np.arange(H) % K
                P, V, Q = P[last], V[last], Q[last]
            trans.append(P)
            vals.append(V)
            probs.append(Q)
        return cls(p0, trans, vals, probs)

    def describe(self) -> dict:
        return {"name": self.name, "T": self.horizon, "K": self.K}

    # -- kernel --------------------------------------------------------------
    def draw_initial_noise(self, rng):
        return {"u": rng.random()}

    def draw_step_noise(self, rng, steps):
        return {"u_obs": rng.random(steps), "u_rew": rng.random(steps)}

    def initial_obs(self, init_noise):
        u = np.asarray(init_noise["u"])
        return np.minimum(np.searchsorted(self._cp0, u, side="right"), self.K - 1).astype(np.int64)

    def _batch_index(self, obs_hist, act_hist):
        idx = obs_hist[:, 0].astype(np.int64)
        for k in range(1, obs_hist.shape[1]):
            idx = (idx * 2 + act_hist[:, k - 1]) * self.K + obs_hist[:, k]
        return idx

    def transition(self, obs_hist, act_hist, t, step_noise):
        h = self._batch_index(obs_hist, act_hist)
        a = act_hist[:, -1].astype(np.int64)
        cp = self._ctrans[t - 1][h, a]
        nxt = (step_noise["u_obs"][:, None] >= cp).sum(-1)
        nxt = np.minimum(nxt, self.K - 1).astype(np.int64)
        cq = self._crew[t - 1][h, a]
        s = np.minimum((step_noise["u_rew"][:, None] >= cq).sum(-1), cq.shape[-1] - 1)
        r = self.rew_vals[t - 1][h, a, s]
        return r, nxt

    # -- exact recursions ----------------------------------------------------
    def reward_mean(self, t: int) -> np.ndarray:
        return (self.rew_vals[t - 1] * self.rew_probs[t - 1]).sum(-1)

    def reward_var(self, t: int) -> np.ndarray:
        m = self.reward_mean(t)
        return (self.rew_vals[t - 1] ** 2 * self.rew_probs[t - 1]).sum(-1) - m ** 2

    def _children(self, t: int, a: int) -> np.ndarray:
        """Row indices at t+1 of (h, a, o') for every h at t; shape (H_t, K)."""
        H = self.n_histories(t)
        return (np.arange(H)[:, None] * 2 + a) * self.K + np.arange(self.K)[None, :]

    @cached_property
    def _values(self) -> list:
        """``V[t-1][h, a]`` = value of always-a from history h at time t."""
        T = self.horizon
        V = [None] * T
        for t in range(T, 0, -1):
            out = self.reward_mean(t).copy()
            if t < T:
                for a in (0, 1):
                    nxt = V[t][self._children(t, a), a]
                    out[:, a] += (self.trans[t - 1][:, a] * nxt).sum(-1)
            V[t - 1] = out
        return V

    @cached_property
    def _td_variances(self) -> list:
        T = self.horizon
        out = []
        for t in range(1, T + 1):
            var = np.maximum(self.reward_var(t), 0.0)
            if t < T:
                for a in (0, 1):
                    nxt = self._values[t][self._children(t, a), a]
                    P = self.trans[t - 1][:, a]
                    m = (P * nxt).sum(-1)
                    var[:, a] += np.maximum((P * nxt ** 2).sum(-1) - m ** 2, 0.0)
            out.append(var)
        return out

    @cached_property
    def _arm_path_probs(self) -> list:
        """``P[t-1][h, a]``: probability of the observations in h when every action is a.

        Zero for histories whose recorded actions are not all equal to a.
        """
        T = self.horizon
        out = [np.stack([self.p0, self.p0], axis=1)]
        for t in range(1, T):
            H_next = self.n_histories(t + 1)
            nxt = np.zeros((H_next, 2))
            for a in (0, 1):
                child = self._children(t, a)
                nxt[child.ravel(), a] = (out[t - 1][:, a][:, None] * self.trans[t - 1][:, a]).ravel()
            out.append(nxt)
        return out

    def _index(self, h) -> tuple:
        h = tuple(int(x) for x in np.atleast_1d(h)) if not isinstance(h, tuple) else h
        if len(h) % 2 != 1:
            raise DomainError("history must have the form (o_1, a_1, ..., o_t)")
        t = (len(h) + 1) // 2
        return t, history_index(h[0::2], h[1::2], self.K)

    def value(self, a: int, t: int, h) -> float:
        t_h, idx = self._index(h)
        if t_h != t:
            raise DomainError(f"history has length for t={t_h}, not t={t}")
        return float(self._values[t - 1][idx, a])

    def td_variance(self, a: int, t: int, h) -> float:
        t_h, idx = self._index(h)
        if t_h != t:
            raise DomainError(f"history has length for t={t_h}, not t={t}")
        return float(self._td_variances[t - 1][idx, a])

    def td_variance_table(self, t: int) -> np.ndarray:
        return self._td_variances[t - 1]

    def path_prob_table(self, t: int) -> np.ndarray:
        return self._arm_path_probs[t - 1]

    def value_table(self, t: int) -> np.ndarray:
        return self._values[t - 1]

    def cumulative_variance(self, a: int, o1) -> float:
        """sigma_*^2(o1, a) = sum_t E^a[sigma_t^2(H_t, a) | O_1 = o1]."""
        total = 0.0
        for t in range(1, self.horizon + 1):
            root = np.arange(self.n_histories(t)) // (2 * self.K) ** (t - 1)
            mask = root == int(o1)
            P = self._arm_path_probs[t - 1][mask, a]
            total += (P * self._td_variances[t - 1][mask, a]).sum()
        if self.p0[int(o1)] == 0:
            return float(total)
        return float(total / self.p0[int(o1)])

    def arm_variance_sum(self, a: int) -> float:
        return float(sum((self._arm_path_probs[t - 1][:, a] * self._td_variances[t - 1][:, a]).sum()
                         for t in range(1, self.horizon + 1)))

    def true_ate(self) -> float:
        d = self._values[0][:, 1] - self._values[0][:, 0]
        return float(self.p0 @ d) / self.horizon

    def ate_init_variance(self) -> float:
        d = self._values[0][:, 1] - self._values[0][:, 0]
        m = self.p0 @ d
        return float(self.p0 @ (d - m) ** 2)

    def initial_distribution(self) -> np.ndarray:
        return self.p0.copy()

    def reward_bound(self) -> float:
        return float(max(np.abs(v).max() for v in self.rew_vals))

    # -- Markov view ---------------------------------------------------------
    def is_markov(self) -> bool:
        for t in range(1, self.horizon + 1):
            last = np.arange(self.n_histories(t)) % self.K
            for table in (self.trans[t - 1], self.rew_vals[t - 1], self.rew_probs[t - 1]):
                first = table[:self.K]
                if not np.allclose(table, first[last]):
                    return False
        return True

    def markov_tables(self):
        """Per-time ``(P[o, a, o'], reward mean[o, a], reward var[o, a])``."""
        if not self.is_markov():
            raise CapabilityError("tables depend on more than the current observation")
        return [(self.trans[t - 1][:self.K], self.reward_mean(t)[:self.K], self.reward_var(t)[:self.K])
                for t in range(1, self.horizon + 1)]

    def all_histories(self, t: int):
        """Iterate over every history tuple at time t (in index order)."""
        for idx in range(self.n_histories(t)):
            yield decode_history(idx, t, self.K)


def enumerate_paths(env: TabularNmdpEnv, a: int):
    """Every (probability, observations, rewards) path when always playing ``a``.

    Brute force over observation and reward supports; independent of the
    recursions above and used by the tests as the enumeration oracle.
    """
    T, K = env.horizon, env.K
    S = [env.rew_vals[t].shape[-1] for t in range(T)]
    for obs in product(range(K), repeat=T + 1):
        p_obs = env.p0[obs[0]]
        idx = obs[0]
        idxs = [idx]
        for t in range(1, T + 1):
            p_obs *= env.trans[t - 1][idx, a, obs[t]]
            idx = (idx * 2 + a) * K + obs[t]
            idxs.append(idx)
        if p_obs == 0:
            continue
        for rs in product(*[range(s) for s in S]):
            p = p_obs
            rewards = []
            for t in range(1, T + 1):
                h = idxs[t - 1]
                p *= env.rew_probs[t - 1][h, a, rs[t - 1]]
                rewards.append(env.rew_vals[t - 1][h, a, rs[t - 1]])
            if p > 0:
                yield p, obs, rewards

