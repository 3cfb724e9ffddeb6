import math

import numpy as np
import pytest

from abdesign.core import DomainError, make_rng
from abdesign.environments import BinaryChainEnv, TabularNmdpEnv
from abdesign.oracle import (PolicyTables, UnboundedBound, compute_eb1, compute_eb1_enumerated,
                             compute_eb2, eb2_curve, init_variance_monte_carlo,
                             optimal_nmdp_probabilities, optimal_tmdp_probability,
                             probability_grid, simulate_oracle_dr, verify_theorem1,
                             verify_theorem3, write_report_csv)


def _tab(seed=0, **kw):
    return TabularNmdpEnv.random(make_rng(seed, 0x7AB), **kw)


def _spread_env(c0, c1, K=2, T=2, seed=0):
    """Rewards ``m_t +- c_a`` with equal odds, means shared by the arms and free of history.

    Values are then observation-free, so the cumulative-reward variance of
    arm ``a`` is exactly ``T c_a^2`` at every O_1.
    """
    rng = make_rng(seed, 0x5E)
    trans, vals, probs = [], [], []
    for t in range(1, T + 1):
        H = K * (2 * K) ** (t - 1)
        P = rng.dirichlet(np.ones(K), size=(H, 1)).repeat(2, axis=1)
        m = rng.normal()
        V = np.stack([np.array([[m - c0, m + c0], [m - c1, m + c1]])] * H)
        trans.append(P)
        vals.append(V)
        probs.append(np.full((H, 2, 2), 0.5))
    return TabularNmdpEnv(rng.dirichlet(np.ones(K)), trans, vals, probs)


# -- EB1 -----------------------------------------------------------------------------------

def test_eb1_deterministic_rewards_leave_init_term():
    env = _tab(1, K=2, T=3, deterministic=True)
    eb = compute_eb1(env, PolicyTables.in_class(env, 0.3))
    assert eb.is_term == 0.0 and eb.total == eb.init_var_term
    assert eb.init_var_term > 0


def test_eb1_deterministic_o1_is_zero():
    env = _tab(1, K=2, T=3, deterministic=True, deterministic_init=True)
    assert compute_eb1(env, PolicyTables.in_class(env, 0.3)).total == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_eb1_recursion_matches_enumeration(seed):
    env = _tab(seed, K=2, T=3)
    policy = PolicyTables.with_continuation(env, [0.3, 0.8], lambda t, o, a: 0.6 + 0.1 * o + 0.1 * a)
    fast, slow = compute_eb1(env, policy), compute_eb1_enumerated(env, policy)
    assert fast.is_term == pytest.approx(slow.is_term, rel=1e-12)
    assert fast.total == pytest.approx(slow.total, rel=1e-12)


def test_eb1_zero_probability_on_needed_path():
    env = _tab(2, K=2, T=2)
    policy = PolicyTables.in_class(env, [1.0, 0.5])  # arm 0 never tried from O_1 = 0
    with pytest.raises(UnboundedBound):
        compute_eb1(env, policy)
    with pytest.raises(UnboundedBound):
        compute_eb1_enumerated(env, policy)


def test_eb1_markov_matches_eb2():
    for seed in range(4):
        env = _tab(seed, K=2, T=3, markov=True)
        for p in (0.2, 0.5, 0.9):
            eb1 = compute_eb1(env, PolicyTables.in_class(env, p)).total
            assert eb1 == pytest.approx(compute_eb2(env, p).total, rel=1e-9)


def test_init_term_against_monte_carlo():
    for env in (_tab(3, K=3, T=2), BinaryChainEnv(delta=3.0, T=10, mu=[[1.0, 2.0], [2.0, 5.0]])):
        v, se = init_variance_monte_carlo(env, 400_000, seed=1)
        assert abs(v - env.ate_init_variance() / env.horizon ** 2) < 3 * se


def test_oracle_dr_variance_matches_eb1():
    env = _tab(5, K=2, T=2)
    p = optimal_nmdp_probabilities(env)
    nmse, se = simulate_oracle_dr(env, p, n_eff=5, replicates=40_000, seed=2)
    eb = compute_eb1(env, PolicyTables.in_class(env, p)).total
    assert abs(nmse - eb) < 4 * se


# -- EB2 -----------------------------------------------------------------------------------

def test_eb2_zero_variance():
    env = _tab(1, K=2, T=3, markov=True, deterministic=True)
    eb = compute_eb2(env, 0.4)
    assert eb.is_term == 0.0 and eb.total == eb.init_var_term


def test_eb2_equal_arm_variances():
    env = BinaryChainEnv(delta=0.0, T=10)
    s = env.arm_variance_sum(1)
    assert s == pytest.approx(env.arm_variance_sum(0))
    assert compute_eb2(env, 0.5).is_term == pytest.approx(4 * s / 100, rel=1e-12)
    grid = probability_grid(0.01)
    assert grid[int(eb2_curve(env, grid).argmin())] == pytest.approx(0.5)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.5, 1.2])
def test_eb2_rejects_boundary_probability(p):
    with pytest.raises(DomainError):
        compute_eb2(BinaryChainEnv(), p)


def test_eb2_blows_up_at_the_boundary():
    env = BinaryChainEnv(delta=3.0, T=10)
    edge = eb2_curve(env, [1e-9, 1 - 1e-9])
    assert np.all(edge > 1e6 * compute_eb2(env, optimal_tmdp_probability(env)).total)
    lo = [compute_eb2(env, p).total for p in (0.1, 0.01, 0.001)]
    assert lo[0] < lo[1] < lo[2]


# -- verification reports ------------------------------------------------------------------

def _argmin_p(report):
    return [r["p"] for r in report.rows if r["design"] == "grid_argmin"]


def test_theorem1_symmetric_instance():
    env = _spread_env(1.0, 1.0)
    assert np.allclose(optimal_nmdp_probabilities(env), 0.5)
    rep = verify_theorem1(env)
    assert rep.passed
    assert _argmin_p(rep) == pytest.approx([0.5, 0.5])


def test_theorem1_threefold_sd():
    env = _spread_env(1.0, 3.0)
    for o in (0, 1):
        assert env.cumulative_variance(1, o) == pytest.approx(9 * env.cumulative_variance(0, o))
    assert optimal_nmdp_probabilities(env) == pytest.approx([0.75, 0.75], abs=1e-12)
    rep = verify_theorem1(env)
    assert rep.passed
    assert all(abs(p - 0.75) <= 0.01 + 1e-12 for p in _argmin_p(rep))


@pytest.mark.parametrize("seed", range(3))
def test_theorem1_random_instances(seed):
    rep = verify_theorem1(_tab(seed, K=2, T=2 + seed % 2))
    assert rep.passed, rep.text()
    assert rep.text().startswith("PASS")


@pytest.mark.parametrize("delta", [0.0, 3.0, 6.0, 9.0])
def test_theorem3_binary(delta):
    env = BinaryChainEnv(delta=delta, T=50)
    rep = verify_theorem3(env)
    assert rep.passed, rep.text()
    s = np.sqrt([env.arm_variance_sum(0), env.arm_variance_sum(1)])
    assert optimal_tmdp_probability(env) == pytest.approx(s[1] / s.sum(), rel=1e-12)


def test_report_csv(tmp_path):
    rep = verify_theorem3(BinaryChainEnv(delta=3.0, T=5))
    path = tmp_path / "r.csv"
    write_report_csv([rep], path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "check,design,o1,p,hold,eb_total,is_term,init_var_term"
    assert len(lines) == 1 + len(rep.rows)
    bad = tmp_path / "missing" / "r.csv"
    with pytest.raises(OSError, match=str(bad).replace("\\", "\\\\")):
        write_report_csv([rep], bad)


def test_probability_grid():
    g = probability_grid(0.01)
    assert g.size == 99 and g[0] == 0.01 and g[-1] == 0.99
    assert math.isclose(g[49], 0.5)
