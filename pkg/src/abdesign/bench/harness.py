"""Replicated experiments.

All replicates of a cell advance in lockstep, one day at a time, so the
environment simulates every replicate's day in a single batched rollout
while each replicate keeps its own design object.  Environment noise for
replicate ``r`` on day ``i`` comes from the stream ``(seed, env key, r, i)``
and is therefore shared by every design run against the same environment.
Design coins come from ``(seed, design key, r)``.
"""
from __future__ import annotations

import math
import traceback
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import EpisodeRecord, ExperimentLog, make_rng, stable_key, stack_noise
from ..designs import make_design
from ..estimation import fqe_ate, fqe_ate_batch

ENV_STREAM = 0xE1
DESIGN_STREAM = 0xD0
BOOT_STREAM = 0xB0


@dataclass
class ReplicateResult:
    replicate: int
    ate_hat: float
    ci_lo: float
    ci_hi: float
    covered: bool
    error: Optional[str] = None


@dataclass
class CellResult:
    env_id: str
    design_id: str
    true_ate: float
    n: int
    T: int
    seed: int
    replicates: list = field(default_factory=list)

    @property
    def R(self) -> int:
        return len(self.replicates)

    @property
    def errors(self) -> list:
        return [r for r in self.replicates if r.error is not None]

    @property
    def ok(self) -> bool:
        return not self.errors

    def _good(self):
        return sorted((r for r in self.replicates if r.error is None), key=lambda r: r.replicate)

    @property
    def mse(self) -> float:
        good = self._good()
        if not good:
            return math.nan
        return math.fsum((r.ate_hat - self.true_ate) ** 2 for r in good) / len(good)

    @property
    def rmse(self) -> float:
        """MSE relative to the squared true effect."""
        return self.mse / self.true_ate ** 2 if self.true_ate != 0 else math.inf

    @property
    def coverage(self) -> float:
        good = self._good()
        if not good:
            return math.nan
        return sum(r.covered for r in good) / len(good)


def _covered(lo, hi, truth) -> bool:
    return bool(lo <= truth <= hi)


def run_design(env, design_name: str, n: int, R: int, seed: int, env_id: str, true_ate: float,
               m0: Optional[int] = None, alpha: float = 0.05, degree: int = 2,
               hyper: Optional[dict] = None, replicates=None) -> dict:
    """Run ``R`` replicates of one design; returns ``{design_id: CellResult}``.

    Adaptive designs yield up to three ids: the plain one (online DR over
    post-burn-in days), ``<name>+burnin`` (burn-in days added with their
    deterministic probabilities) and ``<name>+fqe`` (the baselines' value
    estimator applied to the whole log).  A replicate that raises is recorded with its traceback
    and dropped from later days.
    """
    hyper = dict(hyper or {})
    T = env.horizon
    m0 = n // 4 if m0 is None else m0
    ids = list(range(R)) if replicates is None else list(replicates)
    env_key = stable_key(env_id)
    design_key = stable_key(f"{env_id}/{design_name}")
    designs, logs, rngs, errors = {}, {}, {}, {}
    for r in ids:  # construction errors are configuration errors and propagate
        designs[r] = make_design(design_name, n, T, env.space, m0=m0, alpha=alpha, degree=degree,
                                 **hyper)
        logs[r] = ExperimentLog(n, m0)
        rngs[r] = make_rng(seed, DESIGN_STREAM, design_key, r)
    for day in range(1, n + 1):
        live = [r for r in ids if r not in errors]
        if not live:
            break
        noise = stack_noise([env.draw_day_noise(make_rng(seed, ENV_STREAM, env_key, r, day))
                             for r in live])
        o1 = env.initial_obs(noise["init"])
        actions = np.zeros((len(live), T), dtype=np.int8)
        p_treat = [None] * len(live)
        for k, r in enumerate(live):
            try:
                plan = designs[r].start_day(day, _obs(o1[k], env.space), rngs[r])
                actions[k] = plan.actions
                p_treat[k] = plan.p_treat
            except Exception:
                errors[r] = traceback.format_exc(limit=3)
        obs, rewards = env.rollout(noise, actions)
        for k, r in enumerate(live):
            if r in errors:
                continue
            try:
                rec = EpisodeRecord(day, obs[k], actions[k], rewards[k], p_treat[k])
                logs[r].append(rec)
                designs[r].finish_day(rec)
            except Exception:
                errors[r] = traceback.format_exc(limit=3)
    ests: dict = {}
    for r in ids:
        if r in errors:
            continue
        try:
            ests[r] = designs[r].estimates(logs[r], alpha, fqe=False)
        except Exception:
            errors[r] = traceback.format_exc(limit=3)
    _batched_fqe(designs, logs, ests, errors, env.space, degree, alpha,
                 lambda r: make_rng(seed, BOOT_STREAM, design_key, r))
    out: dict = {}
    for r in ids:
        if r in errors:
            continue
        for suffix, est in ests[r].items():
            cell = out.setdefault(design_name + suffix,
                                  CellResult(env_id, design_name + suffix, true_ate, n, T, seed))
            lo, hi = est.ci
            cell.replicates.append(ReplicateResult(r, float(est.point), float(lo), float(hi),
                                                   _covered(lo, hi, true_ate)))
    if not out:
        out[design_name] = CellResult(env_id, design_name, true_ate, n, T, seed)
    for r, tb in errors.items():
        for cell in out.values():
            cell.replicates.append(ReplicateResult(r, math.nan, math.nan, math.nan, False, tb))
    for cell in out.values():
        cell.replicates.sort(key=lambda x: x.replicate)
    return out


def _batched_fqe(designs, logs, ests, errors, space, degree, alpha, boot_rng):
    """Fitted-Q readouts of all surviving replicates in one batched solve.

    Falls back to one replicate at a time if the batch fails, so an error
    is charged to the replicate that caused it.
    """
    want = [r for r in ests if r not in errors and designs[r].fqe_suffix is not None]
    if not want:
        return
    d0 = designs[want[0]]
    deg = getattr(d0, "degree", degree)
    try:
        res = fqe_ate_batch([list(logs[r]) for r in want], space, deg, alpha,
                            rngs=[boot_rng(r) for r in want])
    except Exception:
        res = []
        for r in want:
            try:
                res.append(fqe_ate(list(logs[r]), space, deg, alpha, rng=boot_rng(r)))
            except Exception:
                errors[r] = traceback.format_exc(limit=3)
                res.append(None)
    for r, est in zip(want, res):
        if est is not None:
            ests[r][designs[r].fqe_suffix] = est


def _obs(o, space):
    return int(o) if space.discrete else np.asarray(o, dtype=float)


# --------------------------------------------------------------------------
# whole benchmarks


def cell_environment(cell):
    from ..environments import make_environment
    return make_environment(cell.env_name, **cell.env_params)


def cell_true_ate(env, cfg) -> float:
    from ..core import CapabilityError, ConfigError
    from ..environments import true_ate
    try:
        return true_ate(env, cfg.ate_episodes, cfg.seed)
    except CapabilityError:
        raise ConfigError(f"{env.name} has no exact ATE; set ate_episodes in [experiment]") from None


def _task(args):
    cfg, cell, spec, R, true_ate = args
    env = cell_environment(cell)
    return run_design(env, spec.name, cfg.n, R, cfg.seed, cell.env_id, true_ate, m0=cfg.burn_in,
                      alpha=cfg.alpha, degree=cfg.degree, hyper=spec.params)


def run_cell(cfg, cell, replicates: Optional[int] = None) -> list:
    """Every design of the config on one environment cell; ``CellResult`` list in design order."""
    env = cell_environment(cell)
    ate = cell_true_ate(env, cfg)
    R = cfg.replicates if replicates is None else replicates
    out = []
    for spec in cfg.designs:
        out.extend(_task((cfg, cell, spec, R, ate)).values())
    return out


def run_benchmark(cfg, replicates: Optional[int] = None, jobs: int = 1, progress=None) -> list:
    """All cells of a config.  ``jobs > 1`` spreads (cell, design) pairs over processes;
    the result order and values do not depend on ``jobs``."""
    R = cfg.replicates if replicates is None else replicates
    tasks = []
    for cell in cfg.cells():
        ate = cell_true_ate(cell_environment(cell), cfg)
        tasks.extend((cfg, cell, spec, R, ate) for spec in cfg.designs)
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_task, tasks))
    else:
        parts = []
        for t in tasks:
            parts.append(_task(t))
            if progress is not None:
                progress(t[1].env_id, t[2].name)
    return [cell for part in parts for cell in part.values()]
