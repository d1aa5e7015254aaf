"""
Lower-bound chain instances

The chain family M(x): n states in a line, k actions. In every state the
last action advances one step toward s_n (s_n loops on itself) and every
other action resets to s_1. Rewards are 0.5 everywhere except x at s_n.
A fair learner cannot tell M(0.5) from M(1) until it reaches s_n, which the
uniform walk takes exponentially long to do.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from mdp_core import (
    Mdp,
    MdpError,
    InvalidMdp,
    RewardDist,
    StochasticPolicy,
    sample_index,
)

logger = logging.getLogger("fair_mdp.lowerbound_instances")

try:
    from tqdm import tqdm
    TQDM_AVAILABLE = True
except ImportError:
    TQDM_AVAILABLE = False


@dataclass(frozen=True)
class ChainSpec:
    n: int
    k: int = 2
    x: float = 1.0
    gamma: float = 0.9

    def __post_init__(self):
        if self.n < 2:
            raise InvalidMdp(f"chain needs n >= 2, got {self.n}")
        if self.k < 2:
            raise InvalidMdp(f"chain needs k >= 2, got {self.k}")
        if not 0.0 <= self.x <= 1.0:
            raise InvalidMdp(f"terminal reward x must lie in [0, 1], got {self.x}")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidMdp(f"discount must lie in [0, 1), got {self.gamma}")

    @property
    def advance(self) -> int:
        return self.k - 1

    @property
    def goal(self) -> int:
        return self.n - 1


def make_chain(spec: ChainSpec) -> Mdp:
    n, k = spec.n, spec.k
    P = np.zeros((n, k, n))
    P[:, :spec.advance, 0] = 1.0
    for i in range(n):
        P[i, spec.advance, min(i + 1, n - 1)] = 1.0
    rewards = [RewardDist.point(0.5)] * (n - 1) + [RewardDist.point(spec.x)]
    return Mdp(P, tuple(rewards), spec.gamma)


def chain_vstar(spec: ChainSpec) -> np.ndarray:
    """
    Closed-form optimal values for x >= 0.5, where always advancing is optimal:
    V*(s_i) = 0.5 (1 - g^(n-i)) / (1 - g) + x g^(n-i) / (1 - g).
    """
    if spec.x < 0.5:
        raise MdpError(f"closed form covers x >= 0.5 only, got x={spec.x}; use value_iteration")
    g = spec.gamma
    steps_left = spec.n - np.arange(1, spec.n + 1)
    tail = g ** steps_left
    return (0.5 * (1.0 - tail) + spec.x * tail) / (1.0 - g)


def chain_vstar_bound(spec: ChainSpec) -> np.ndarray:
    """Upper bound (1 + 2 g^(n-i+1)) / (2 (1 - g)) on V*(s_i) for x = 1; strict when g > 0.5."""
    g = spec.gamma
    steps_left = spec.n - np.arange(1, spec.n + 1)
    return (1.0 + 2.0 * g ** (steps_left + 1)) / (2.0 * (1.0 - g))


@dataclass(frozen=True)
class HittingTime:
    value: float
    exact: Optional[int] = None


def chain_hitting_time(n: int, k: int) -> HittingTime:
    """Expected steps for the uniform walk to first reach s_n from s_1: (k^n - k) / (k - 1)."""
    if n < 2 or k < 2:
        raise MdpError(f"need n >= 2 and k >= 2, got n={n}, k={k}")
    exact = (k ** n - k) // (k - 1)
    try:
        value = float(exact)
    except OverflowError:
        return HittingTime(math.inf, None)
    return HittingTime(value, exact if exact < 2 ** 53 else None)


def chain_hitting_time_recurrence(n: int, k: int, advance_prob: Optional[float] = None) -> float:
    """
    Solve E_i = 1 + (1 - p) E_1 + p E_{i+1}, E_n = 0 for E_1.

    p defaults to 1/k (the uniform walk). Each E_i is carried as c_i + d_i E_1
    from the goal backwards.
    """
    if n < 2 or k < 2:
        raise MdpError(f"need n >= 2 and k >= 2, got n={n}, k={k}")
    p = 1.0 / k if advance_prob is None else float(advance_prob)
    if not 0.0 < p <= 1.0:
        raise MdpError(f"advance probability must lie in (0, 1], got {p}")
    c, d = 0.0, 0.0
    for _ in range(n - 1):
        c, d = 1.0 + p * c, (1.0 - p) + p * d
    if d >= 1.0:
        return math.inf
    return c / (1.0 - d)


def choice_fair_chain_policy(spec: ChainSpec, alpha: float) -> StochasticPolicy:
    """
    The most advance-biased alpha-choice-fair play on M(0.5): the advance action
    gets 1/k + alpha (k-1)/k, every reset action (1 - alpha)/k, so each pair of
    actions differs by exactly alpha.
    """
    if not 0.0 <= alpha <= 1.0:
        raise MdpError(f"alpha must lie in [0, 1], got {alpha}")
    k = spec.k
    row = np.full(k, (1.0 - alpha) / k)
    row[spec.advance] = 1.0 / k + alpha * (k - 1) / k
    return StochasticPolicy(np.tile(row, (spec.n, 1)))


def action_fair_chain_length(alpha: float, gamma: float) -> int:
    """Chain length ceil(log(1/(2 alpha)) / (1 - gamma)) used for the action-fair scaling runs."""
    if not 0.0 < alpha < 0.5:
        raise MdpError(f"alpha must lie in (0, 0.5), got {alpha}")
    if not 0.0 <= gamma < 1.0:
        raise MdpError(f"discount must lie in [0, 1), got {gamma}")
    return max(2, math.ceil(math.log(1.0 / (2.0 * alpha)) / (1.0 - gamma)))


# ----------------------------------------------------------------------------
# Coupling experiment


@dataclass(frozen=True)
class CouplingRecord:
    """
    first_hit is the step index at which the learner first stands on s_n and
    sees its reward; censored runs report t_cap.
    """

    seed: int
    first_hit: int
    censored: bool

    @property
    def distinguished(self) -> bool:
        return not self.censored


def _first_hit_stationary(spec: ChainSpec, advance_prob: float, seed: int, t_cap: int) -> int:
    # State-independent play: the walk sits at s_n exactly when the last n-1
    # transitions all advanced, so only the advance coin flips matter.
    rng = np.random.default_rng(seed)
    need = spec.n - 1
    transitions = t_cap - 1
    carry, offset = 0, 0
    chunk = 4096
    while offset < transitions:
        size = min(chunk, transitions - offset)
        adv = rng.random(size) < advance_prob
        idx = np.arange(size)
        last_reset = np.maximum.accumulate(np.where(adv, -1, idx))
        run = np.where(last_reset >= 0, idx - last_reset, carry + idx + 1)
        hits = np.flatnonzero(run >= need)
        if hits.size:
            return int(offset + hits[0] + 1)
        carry = int(run[-1])
        offset += size
        chunk *= 2
    return t_cap


def _first_hit_generic(m: Mdp, learner, goal: int, seed: int, t_cap: int) -> int:
    rng = np.random.default_rng(seed)
    cdfs = np.cumsum(m.P, axis=2)
    s = 0
    for t in range(t_cap):
        if s == goal:
            return t
        dist = np.asarray(learner.act(s), dtype=float)
        a = sample_index(np.cumsum(dist), rng)
        r = m.rewards[s].sample(rng)
        s_next = sample_index(cdfs[s, a], rng)
        learner.observe(s, a, r, s_next)
        s = s_next
    return t_cap


def _stationary_advance_prob(learner, spec: ChainSpec) -> Optional[float]:
    if not isinstance(learner, StochasticPolicy) or learner.dist.shape != (spec.n, spec.k):
        return None
    if not (learner.dist == learner.dist[0]).all():
        return None
    return float(learner.dist[0, spec.advance])


def _run_seeds(spec: ChainSpec, learner_factory: Callable, seeds: Sequence[int], t_cap: int) -> list:
    m = make_chain(spec)
    records = []
    for seed in seeds:
        learner = learner_factory()
        p = _stationary_advance_prob(learner, spec)
        if p is not None:
            hit = _first_hit_stationary(spec, p, seed, t_cap) if p > 0 else t_cap
        else:
            hit = _first_hit_generic(m, learner, spec.goal, seed, t_cap)
        records.append(CouplingRecord(int(seed), hit, hit >= t_cap))
    return records


def coupling_experiment(spec: ChainSpec, learner_factory: Callable, seeds: Sequence[int],
                        t_cap: int, jobs: int = 1, progress: bool = False) -> list:
    """
    Run a fresh learner per seed on make_chain(spec) from s_1 and record the
    first step at which it stands on s_n. Deterministic per seed; with
    jobs > 1 the seeds are split across worker processes, so the factory
    must be picklable.
    """
    if t_cap < 1:
        raise MdpError(f"t_cap must be at least 1, got {t_cap}")
    seeds = list(seeds)
    if jobs <= 1 or len(seeds) < 2:
        it = seeds
        if progress and TQDM_AVAILABLE:
            it = tqdm(seeds, desc=f"chain n={spec.n}", leave=False)
        return _run_seeds(spec, learner_factory, it, t_cap)
    batches = [seeds[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_run_seeds, [spec] * jobs, [learner_factory] * jobs, batches, [t_cap] * jobs))
    by_seed = {r.seed: r for part in parts for r in part}
    return [by_seed[int(s)] for s in seeds]


@dataclass(frozen=True)
class CouplingSummary:
    runs: int
    mean: float
    sem: float
    censored: int

    def to_dict(self) -> dict:
        return {"runs": self.runs, "mean": self.mean, "sem": self.sem, "censored": self.censored}


def summarize_coupling(records: Sequence[CouplingRecord]) -> CouplingSummary:
    if not records:
        raise MdpError("no coupling records to summarize")
    hits = np.array([r.first_hit for r in records], dtype=float)
    sem = float(stats.sem(hits)) if len(hits) > 1 else 0.0
    return CouplingSummary(len(hits), float(hits.mean()), sem, sum(r.censored for r in records))


@dataclass(frozen=True)
class GrowthFit:
    factor: float
    slope: float
    intercept: float
    rvalue: float


def growth_factor(ns: Sequence[int], means: Sequence[float]) -> GrowthFit:
    """Log-linear fit of mean first-hit against n; factor is the per-state growth exp(slope)."""
    if len(ns) < 2 or len(ns) != len(means):
        raise MdpError("need at least two (n, mean) points of equal length")
    fit = stats.linregress(np.asarray(ns, dtype=float), np.log(np.asarray(means, dtype=float)))
    return GrowthFit(float(np.exp(fit.slope)), float(fit.slope), float(fit.intercept), float(fit.rvalue))
