import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abdesign.core import (ConfigError, DomainError, EpisodeRecord, InsufficientData,
                           ObservationSpace, StateError, make_rng, run_episode, stack_noise)
from abdesign.designs import (EpsilonGreedyDesign, HalfHalfDesign, RandomDesign, fit_mdp_sigma,
                              fit_nmdp_arrays, fit_nmdp_sigma, fit_tmdp_sigma, make_design,
                              nmdp_allocation_probability)
from abdesign.environments import BinaryChainEnv, ContinuousEnv
from abdesign.regression import features

BIN = ObservationSpace("discrete", 2)


def _records(env, n, a, seed, day0=1):
    """``n`` global-policy days of arm ``a`` as records."""
    noise = stack_noise([env.draw_day_noise(make_rng(seed, i)) for i in range(n)])
    obs, rew = env.rollout(noise, np.full((n, env.horizon), a, dtype=np.int8))
    return [EpisodeRecord(day0 + i, obs[i], np.full(env.horizon, a), rew[i]) for i in range(n)]


def _both_arms(env, n, seed):
    return _records(env, n, 1, seed) + _records(env, n, 0, seed + 1, day0=n + 1)


def _run(env, design, n, seed):
    return [run_episode(env, design, d, make_rng(seed, d), make_rng(seed, 0xD, d))
            for d in range(1, n + 1)]


# -- allocation rule ----------------------------------------------------------

@pytest.mark.parametrize("s1,s0,p", [(1, 1, 0.5), (3, 1, 0.75), (100, 1, 0.95), (0, 0, 0.5),
                                     (1, 100, 0.05)])
def test_nmdp_allocation_examples(s1, s0, p):
    out = nmdp_allocation_probability(s1, s0, clip=0.05)
    assert out.p1 == pytest.approx(p, abs=1e-15)
    assert out.provenance == "fitted"


@pytest.mark.parametrize("args", [(-1, 1), (1, -0.1), (math.inf, 1), (math.nan, 1)])
def test_nmdp_allocation_rejects_bad_sigmas(args):
    with pytest.raises(DomainError):
        nmdp_allocation_probability(*args)


@pytest.mark.parametrize("clip", [0.0, 0.5, -0.1])
def test_nmdp_allocation_rejects_bad_clip(clip):
    with pytest.raises(DomainError):
        nmdp_allocation_probability(1, 1, clip)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-4, 1e4))
def test_allocation_scale_equivariance(s1, s0, c):
    p = nmdp_allocation_probability(s1, s0, clip=1e-9).p1
    q = nmdp_allocation_probability(c * s1, c * s0, clip=1e-9).p1
    assert abs(p - q) <= 4e-16


# -- baselines ------------------------------------------------------------------

def test_random_design_frequency_and_autocorrelation():
    d = RandomDesign(1000, 100)
    rng = make_rng(3)
    acts = np.stack([d.start_day(i, 0, rng).actions for i in range(1, 1001)]).astype(float)
    assert abs(acts.mean() - 0.5) < 0.005
    x = acts - acts.mean()
    ac = (x[:, 1:] * x[:, :-1]).mean() / x.var()
    assert abs(ac) < 0.01


def test_random_design_is_deterministic_given_seed():
    d = RandomDesign(5, 20)
    a = [d.start_day(i, 0, make_rng(4, i)).actions for i in range(1, 6)]
    b = [d.start_day(i, 0, make_rng(4, i)).actions for i in range(1, 6)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("n,day,a", [(50, 1, 1), (50, 25, 1), (50, 26, 0), (50, 50, 0),
                                     (1, 1, 1), (5, 3, 1), (5, 4, 0)])
def test_half_half_action(n, day, a):
    d = HalfHalfDesign(n, 4)
    assert d.action(day) == a
    plan = d.start_day(day, 0, make_rng(0))
    assert np.all(plan.actions == a)


def test_half_half_rejects_day_out_of_range():
    with pytest.raises(DomainError):
        HalfHalfDesign(10, 3).action(11)


def _feed(design, a, mean_reward, T=4, day=1):
    design.finish_day(EpisodeRecord(day, np.zeros(T + 1, dtype=int), np.full(T, a),
                                    np.full(T, mean_reward)))


def test_epsilon_one_is_random():
    d = EpsilonGreedyDesign(2000, 50, m0=0, epsilon=1.0)
    _feed(d, 1, 5.0, T=50)
    _feed(d, 0, 1.0, T=50, day=2)
    rng = make_rng(1)
    acts = np.stack([d.start_day(i, 0, rng).actions for i in range(3, 2003)])
    assert abs(acts.mean() - 0.5) < 0.005


def test_epsilon_zero_is_greedy():
    d = EpsilonGreedyDesign(100, 10, m0=0, epsilon=0.0)
    _feed(d, 1, 2.0, T=10)
    _feed(d, 0, 1.0, T=10, day=2)
    rng = make_rng(2)
    assert all(np.all(d.start_day(i, 0, rng).actions == 1) for i in range(3, 50))
    d2 = EpsilonGreedyDesign(100, 10, m0=0, epsilon=0.0)
    _feed(d2, 1, 1.0, T=10)
    _feed(d2, 0, 2.0, T=10, day=2)
    assert all(np.all(d2.start_day(i, 0, rng).actions == 0) for i in range(3, 50))


def test_epsilon_tie_goes_to_treatment():
    d = EpsilonGreedyDesign(10, 4, m0=0, epsilon=0.0)
    _feed(d, 1, 1.5)
    _feed(d, 0, 1.5, day=2)
    assert d.greedy_action() == 1
    assert EpsilonGreedyDesign(10, 4).greedy_action() == 1  # no data yet


def test_epsilon_attribution_by_majority():
    d = EpsilonGreedyDesign(10, 4, m0=0, epsilon=0.0)
    d.finish_day(EpisodeRecord(1, np.zeros(5, dtype=int), [0, 1, 1, 1], [1.0] * 4))
    d.finish_day(EpisodeRecord(2, np.zeros(5, dtype=int), [0, 0, 1, 1], [3.0] * 4))
    assert d.q_count.tolist() == [1, 1]
    assert d.q.tolist() == [3.0, 1.0]


def test_epsilon_burn_in_is_random_and_validation():
    d = EpsilonGreedyDesign(100, 50, m0=10, epsilon=0.0)
    _feed(d, 1, 9.0, T=50)
    acts = np.stack([d.start_day(i, 0, make_rng(5, i)).actions for i in range(2, 21)])
    assert 0 < acts.mean() < 1
    with pytest.raises(DomainError):
        EpsilonGreedyDesign(10, 4, epsilon=1.5)


# -- adaptive designs: protocol -------------------------------------------------------

@pytest.mark.parametrize("name", ["nmdp", "tmdp", "mdp"])
def test_burn_in_ordering(name):
    d = make_design(name, 20, 5, BIN, m0=5)
    probs = [d.allocation(day, 0) for day in range(1, 11)]
    assert [p.p1 for p in probs] == [1.0] * 5 + [0.0] * 5
    assert all(p.provenance == "burn-in" for p in probs)


@pytest.mark.parametrize("name", ["nmdp", "tmdp", "mdp"])
def test_unfitted_design_raises_state_error(name):
    d = make_design(name, 20, 5, BIN, m0=5)
    with pytest.raises(StateError):
        d.start_day(11, 0, make_rng(0))


def test_finishing_a_day_that_was_not_started():
    env = BinaryChainEnv(T=4, delta=1.0)
    d = make_design("nmdp", 20, 4, BIN, m0=3)
    _run(env, d, 6, 0)
    rec = _records(env, 1, 1, 9, day0=7)[0]
    with pytest.raises(StateError):
        d.finish_day(rec)


@pytest.mark.parametrize("name", ["nmdp", "tmdp", "mdp"])
@pytest.mark.parametrize("env", [BinaryChainEnv(T=8, delta=6.0), ContinuousEnv(T=8, delta=6.0)])
def test_adaptive_days_are_constant_and_clipped(name, env):
    d = make_design(name, 60, env.horizon, env.space, clip=0.1, degree=1)
    recs = _run(env, d, 60, 1)
    assert all(r.constant_action for r in recs)
    fitted = [p for p in d.probabilities if p.provenance == "fitted"]
    assert len(fitted) == 60 - 2 * 15
    assert all(0.1 <= p.p1 <= 0.9 for p in fitted)
    assert [r.p_treat for r in recs[30:]] == [p.p1 for p in fitted]
    assert d.estimate.n_eff == 30


@pytest.mark.parametrize("name", ["nmdp", "tmdp", "mdp"])
def test_probability_uses_only_prior_days(name):
    env = ContinuousEnv(T=6, delta=3.0)
    d = make_design(name, 40, 6, env.space, m0=8, degree=1)
    recs = _run(env, d, 40, 2)
    for m in (17, 25, 40):
        fresh = make_design(name, 40, 6, env.space, m0=8, degree=1)
        for r in recs[:m - 1]:
            if r.day > 16:
                fresh._pending = (r.day, 0.0, 0.0, r.p_treat)
            fresh.finish_day(r)
        assert fresh.allocation(m, recs[m - 1].initial_observation).p1 == recs[m - 1].p_treat


def test_tmdp_probability_ignores_initial_observation():
    env = BinaryChainEnv(T=6, delta=3.0)
    d = make_design("tmdp", 30, 6, BIN, m0=6)
    _run(env, d, 12, 3)
    assert d.allocation(13, 0).p1 == d.allocation(13, 1).p1


def test_equal_sd_models_give_fair_coin():
    env = BinaryChainEnv(T=3, s0=1.0, delta=0.0, mu=[[1.0, 1.0], [1.0, 1.0]], p_s=0.5)
    d = make_design("nmdp", 20, 3, BIN, m0=3)
    _run(env, d, 6, 4)
    # overwrite the fitted sd models with a common constant
    d.value_fit.beta_s[:] = [[2.0, 0.0], [2.0, 0.0]]
    assert d.allocation(7, 0).p1 == 0.5 and d.allocation(7, 1).p1 == 0.5
    draws = [d.start_day(7, 0, make_rng(5, i)).actions[0] for i in range(20_000)]
    assert abs(np.mean(draws) - 0.5) < 0.015


def test_estimates_report_three_readouts():
    env = BinaryChainEnv(T=5, delta=3.0)
    d = make_design("nmdp", 24, 5, BIN, m0=4)
    log = _run(env, d, 24, 6)
    out = d.estimates(log, 0.05, make_rng(1))
    assert set(out) == {"", "+burnin", "+fqe"}
    assert out["+burnin"].n_eff == 24
    assert set(make_design("nmdp", 24, 5, BIN, m0=4, fqe_readout=False).estimates(log)) == {
        "", "+burnin"}


def test_make_design_errors():
    with pytest.raises(ConfigError):
        make_design("bandit", 10, 3, BIN)
    with pytest.raises(ConfigError):
        make_design("random", 10, 3, BIN, epsilon=0.2)
    with pytest.raises(DomainError):
        make_design("nmdp", 10, 3, BIN, clip=0.6)
    with pytest.raises(DomainError):
        make_design("tmdp", 10, 3, BIN, sigma_floor=0.0)


# -- nuisance fits --------------------------------------------------------------------

def _noiseless():
    return BinaryChainEnv(T=5, s0=0.0, delta=0.0, mu=[[1.0, 2.0], [1.0, 2.0]])


def test_fit_nmdp_noiseless_hits_floor():
    fit = fit_nmdp_sigma(_both_arms(_noiseless(), 20, 0), BIN, sigma_floor=1e-3)
    x = features(np.array([0, 1]), BIN)
    for a in (0, 1):
        assert np.all(fit.sigma(a, x) == 1e-3)


def test_fit_nmdp_intercept_only_is_mean_squared_residual():
    rng = make_rng(7)
    m = 200
    G = rng.normal(size=m) * 3 + 1
    a1 = np.arange(m) % 2
    fit = fit_nmdp_arrays(np.ones((m, 1)), G, a1, sigma_floor=1e-6)
    for a in (0, 1):
        g = G[a1 == a]
        assert fit.sigma2(a, np.ones(1)) == pytest.approx(((g - g.mean()) ** 2).mean(), rel=1e-8)


def test_fit_nmdp_needs_two_days_per_arm():
    env = BinaryChainEnv(T=3)
    with pytest.raises(InsufficientData):
        fit_nmdp_sigma(_records(env, 5, 1, 0) + _records(env, 1, 0, 1, day0=6), BIN)
    with pytest.raises(InsufficientData):
        fit_nmdp_sigma([], BIN)


def test_fit_nmdp_sd_ratio_matches_truth():
    env = BinaryChainEnv(T=10, delta=3.0)
    fit = fit_nmdp_sigma(_both_arms(env, 10_000, 11), BIN)
    truth = math.sqrt(env.cumulative_variance(1, 0) / env.cumulative_variance(0, 0))
    for o in (0, 1):
        x = features(np.array(o), BIN)
        assert float(fit.sigma(1, x) / fit.sigma(0, x)) == pytest.approx(truth, rel=0.05)


def test_fit_tmdp_noiseless_hits_floor():
    fit = fit_tmdp_sigma(_both_arms(_noiseless(), 20, 0), BIN, sigma_floor=1e-3)
    assert np.all(fit.sigma2_star == 1e-6)


def test_fit_tmdp_horizon_one_matches_nmdp():
    env = BinaryChainEnv(T=1, delta=2.0, mu=[[1.0, 2.0], [3.0, 5.0]])
    recs = _both_arms(env, 300, 12)
    tm = fit_tmdp_sigma(recs, BIN, sigma_floor=1e-9)
    nm = fit_nmdp_sigma(recs, BIN, sigma_floor=1e-9)
    for a in (0, 1):
        x1 = features(np.array([r.initial_observation for r in recs if r.first_action == a]), BIN)
        assert tm.sigma2_star[a] == pytest.approx(nm.sigma2(a, x1).mean(), rel=1e-8)


def test_fit_tmdp_variance_ratio_matches_truth():
    env = BinaryChainEnv(T=10, delta=3.0)
    fit = fit_tmdp_sigma(_both_arms(env, 5_000, 13), BIN)
    truth = env.arm_variance_sum(1) / env.arm_variance_sum(0)
    assert fit.sigma2_star[1] / fit.sigma2_star[0] == pytest.approx(truth, rel=0.10)


def test_fit_tmdp_equal_variance_gives_half():
    env = BinaryChainEnv(T=10, delta=0.0)
    fit = fit_tmdp_sigma(_both_arms(env, 1_000, 14), BIN)
    s = fit.sigma_star
    assert abs(nmdp_allocation_probability(s[1], s[0]).p1 - 0.5) < 0.05


def test_fit_mdp_noiseless_hits_floor():
    fit = fit_mdp_sigma(_both_arms(_noiseless(), 20, 0), BIN, sigma_floor=1e-3)
    assert np.all(fit.sigma2_star == 1e-6)
    assert fit.eta == pytest.approx([1.0, 2.0], abs=1e-8)


def test_fit_mdp_iid_observations_match_per_time_fit():
    env = BinaryChainEnv(T=10, delta=3.0, p_s=0.5)  # O_{t+1} independent of (O_t, A_t)
    recs = _both_arms(env, 3_000, 15)
    pooled = fit_mdp_sigma(recs, BIN).sigma2_star
    per_t = fit_tmdp_sigma(recs, BIN).sigma2_star
    assert pooled == pytest.approx(per_t, rel=0.03)


def test_fit_mdp_equal_arms_gives_half():
    env = BinaryChainEnv(T=10, delta=0.0, p_s=0.5, mu=[[1.0, 1.0], [2.0, 2.0]])
    s = fit_mdp_sigma(_both_arms(env, 1_000, 16), BIN).sigma_star
    assert abs(nmdp_allocation_probability(s[1], s[0]).p1 - 0.5) < 0.05


def test_fit_mdp_singular_system_does_not_fail():
    # every day lands in the same state: the relative-value block is all zeros
    env = BinaryChainEnv(T=4, p_s=0.5, p_init=1.0)
    recs = _both_arms(env, 5, 17)
    for r in recs:
        r.observations[:] = 1
    fit = fit_mdp_sigma(recs, BIN)
    assert np.all(np.isfinite(fit.beta)) and np.all(np.isfinite(fit.eta))
