"""Exit criteria, each at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line (also collected in the pytest
terminal summary).  Run alone with ``pytest -m acceptance``.
"""
import math
import time

import numpy as np
import pytest

from abdesign.bench.harness import run_design
from abdesign.core import EpisodeRecord, make_rng, stack_noise
from abdesign.environments import (BinaryChainEnv, ContinuousEnv, DispatchEnv, TabularNmdpEnv,
                                   make_environment, monte_carlo_ate)
from abdesign.environments.dispatch import DispatchDay, conservation_holds
from abdesign.estimation import AteEstimate, batch_estimate, psi_nmdp
from abdesign.oracle import (PolicyTables, compute_eb1, optimal_nmdp_probabilities,
                             optimal_tmdp_probability, simulate_oracle_dr, verify_theorem1,
                             verify_theorem3)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def test_criterion_1_theorem1(criterion):
    t0 = time.perf_counter()
    reports = []
    for i in range(20):
        T = 2 + i % 2
        env = TabularNmdpEnv.random(make_rng(0, 0x7AB, i), K=2, T=T)
        reports.append(verify_theorem1(env, 0.01))
    good = sum(r.passed for r in reports)
    dt = time.perf_counter() - t0
    ok = criterion(1, good == 20 and dt < 120,
                   f"analytic NMDP design <= grid EB1 on {good}/20 instances ({dt:.1f}s)")
    assert ok, "\n".join(r.text() for r in reports if not r.passed)


def test_criterion_2_theorem3(criterion):
    t0 = time.perf_counter()
    parts, good = [], 0
    for delta in (0.0, 3.0, 6.0, 9.0):
        env = BinaryChainEnv(delta=delta, T=50)
        rep = verify_theorem3(env, 0.01)
        good += rep.passed
        p_grid = min((r for r in rep.rows if r["design"] == "grid"), key=lambda r: r["eb_total"])["p"]
        parts.append(f"d={delta:g}: p*={optimal_tmdp_probability(env):.4f} grid={p_grid:.2f}")
    dt = time.perf_counter() - t0
    assert criterion(2, good == 4 and dt < 120, "; ".join(parts) + f" ({dt:.1f}s)")


def _held_days(env, n, seed, pi, chunk=20_000):
    """``n`` days with ``A_1 ~ pi(O_1)`` held all day; yields (o1, a1, p1, G) chunks."""
    done = 0
    while done < n:
        b = min(chunk, n - done)
        noise = stack_noise([env.draw_day_noise(make_rng(seed, done + i)) for i in range(b)])
        o1 = env.initial_obs(noise["init"])
        p1 = pi(o1)
        a1 = (make_rng(seed, 0xC0, done).random(b) < p1).astype(np.int8)
        _, rew = env.rollout(noise, np.repeat(a1[:, None], env.horizon, axis=1))
        yield o1, a1, p1, rew.sum(1)
        done += b


def _psi_mean(env, days, values, p_used):
    T = env.horizon
    psi = []
    for o1, a1, p1, G in days:
        v = values(o1)
        q = p_used(o1, p1)
        for k in range(o1.shape[0]):
            rec = EpisodeRecord(1, np.zeros(T + 1, dtype=int), np.full(T, a1[k]), np.full(T, G[k] / T))
            psi.append(psi_nmdp(rec, v[k, 1], v[k, 0], q[k]).value)
    psi = np.asarray(psi)
    return psi.mean(), psi.std(ddof=1) / math.sqrt(psi.size)


def test_criterion_3_double_robustness(criterion):
    t0 = time.perf_counter()
    n = 100_000
    envs = {
        "binary": (BinaryChainEnv(delta=3.0, T=50), lambda o: 0.3 + 0.4 * o),
        "continuous": (ContinuousEnv(delta=3.0, T=50),
                       lambda o: 0.2 + 0.6 / (1.0 + np.exp(-o[:, 0]))),
    }
    results, good = [], 0
    for name, (env, pi) in envs.items():
        if env.space.discrete:
            table = np.array([[env.value(a, 1, o) for a in (0, 1)] for o in (0, 1)])
            values = lambda o1, tab=table: tab[o1]  # noqa: E731
        else:
            values = lambda o1, e=env: np.array([[e.value(a, 1, o) for a in (0, 1)]  # noqa: E731
                                                 for o in o1])
        cases = {
            "true V, true pi": (values, lambda o1, p: p),
            "IS only": (lambda o1: np.zeros((o1.shape[0], 2)), lambda o1, p: p),
            # misspecified propensities clipped to [0.05, 0.95], true values
            "wrong pi": (values, lambda o1, p: np.clip(1.0 - p + 0.2, 0.05, 0.95)),
        }
        for case, (vf, pf) in cases.items():
            mean, se = _psi_mean(env, _held_days(env, n, 31, pi), vf, pf)
            gap = abs(mean - env.true_ate())
            good += gap < 3 * se
            results.append(f"{name}/{case}: |mean-ATE|={gap:.4f} < 3SE={3 * se:.4f}")
    dt = time.perf_counter() - t0
    assert criterion(3, good == 6 and dt < 180, "; ".join(results) + f" ({dt:.1f}s)")


def test_criterion_4_oracle_mse(criterion):
    t0 = time.perf_counter()
    env = make_environment("tabular", K=2, T=2, instance_seed=0)
    p = optimal_nmdp_probabilities(env)
    eb = compute_eb1(env, PolicyTables.in_class(env, p)).total
    nmse, se = simulate_oracle_dr(env, p, n_eff=10, replicates=1_000_000, seed=4)
    rel = abs(nmse - eb) / eb
    dt = time.perf_counter() - t0
    assert criterion(4, rel < 0.02 and dt < 300,
                     f"n_eff*MSE={nmse:.6g} (se {se:.2g}) vs EB1={eb:.6g}, rel diff {rel:.4f} "
                     f"({dt:.1f}s)")


def test_criterion_5_coverage(criterion):
    t0 = time.perf_counter()
    env = BinaryChainEnv(T=10)
    cell = run_design(env, "nmdp", 200, 2000, 7, "binary:coverage", env.true_ate(),
                      hyper={"fqe_readout": False})["nmdp"]
    dt = time.perf_counter() - t0
    ok = cell.ok and 0.93 <= cell.coverage <= 0.97 and dt < 180
    assert criterion(5, ok, f"95% Wald coverage {cell.coverage:.4f} over {cell.R} replicates "
                            f"({dt:.1f}s)")


BASELINES = ("random", "half_half", "epsilon_greedy")


def _meta_mse(env, truth, tag, designs, seed, n=50, R=200, degree=1):
    out = {}
    for d in designs:
        for k, c in run_design(env, d, n, R, seed, tag, truth, degree=degree).items():
            assert c.ok, c.errors[0].error
            out[k] = c.mse
    return out


def test_criterion_6_simulated_ordering(criterion):
    t0 = time.perf_counter()
    lines, good = [], 0
    for name, cls in (("binary", BinaryChainEnv), ("continuous", ContinuousEnv)):
        for delta in (3.0, 6.0, 9.0):
            env = cls(delta=delta, T=50)
            wins = 0
            for meta in range(5):
                mse = _meta_mse(env, env.true_ate(), f"{name}:{delta}", BASELINES + ("mdp",),
                                1000 + meta)
                wins += all(mse["mdp+fqe"] < mse[b] for b in BASELINES)
            good += wins >= 4
            lines.append(f"{name} d={delta:g} {wins}/5")
    dt = time.perf_counter() - t0
    assert criterion(6, good == 6 and dt < 600,
                     "mdp design beats random, half-half and eps-greedy: " + ", ".join(lines)
                     + f" ({dt:.0f}s)")


def test_criterion_7_streaming_identity(criterion):
    t0 = time.perf_counter()
    rng = make_rng(77)
    worst = 0.0
    for _ in range(10_000):
        k = int(rng.integers(1, 200))
        scale = 10.0 ** rng.uniform(-3, 3)
        xs = rng.normal(rng.normal() * scale, scale, size=k)
        est = AteEstimate()
        for x in xs:
            est.update(x)
        ref = batch_estimate(xs)
        # relative to the stream's magnitude, so a mean near zero is not a 0/0 test
        mag = float(np.abs(xs).max())
        worst = max(worst, abs(est.point - ref.point) / max(abs(ref.point), mag),
                    abs(est.variance_hat - ref.variance_hat) / max(ref.variance_hat, mag ** 2))
    dt = time.perf_counter() - t0
    assert criterion(7, worst <= 1e-12 and dt < 60,
                     f"max relative deviation {worst:.2e} over 10^4 streams ({dt:.1f}s)")


def test_criterion_8_dispatch(criterion):
    t0 = time.perf_counter()
    env = DispatchEnv(drivers="uniform", T=20, n_orders=100)
    rng = make_rng(88)
    conserved = 0
    for _ in range(1000):
        day = DispatchDay(env, env.draw_initial_noise(rng))
        ok = True
        for _ in range(env.horizon):
            day.step(int(rng.random() < 0.5))
            ok = ok and conservation_holds(day)
        conserved += ok
    truth = monte_carlo_ate(env, 4000, seed=5)[0]
    wins = 0
    for meta in range(5):
        mse = _meta_mse(env, truth, "dispatch", ("random", "mdp"), 2000 + meta, R=100)
        wins += mse["mdp+fqe"] <= mse["random"]
    dt = time.perf_counter() - t0
    assert criterion(8, conserved == 1000 and wins >= 4 and dt < 600,
                     f"conservation on {conserved}/1000 days; mdp design MSE <= random in "
                     f"{wins}/5 ({dt:.0f}s)")
