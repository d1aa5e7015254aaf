"""
Induced MDPs and the exploit-or-explore decision

For a known set Gamma, two MDPs over Gamma plus one absorbing state s0
(always the last local index):

  exploitation  Gamma-internal transitions kept, mass leaving Gamma sent to
                s0; rewards are the source means on Gamma and 0 at s0.
  exploration   same transitions; reward 0 on Gamma and 1 at s0, so its
                optimal policy maximizes the chance of leaving Gamma.

Both are planned inside the alpha-restriction given by the task's own Q
estimates, so whichever policy the decision picks is action-fair.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from estimation import EmpiricalModel
from fairness_audit import TIE_TOL, allowed_mask
from mdp_core import (
    Mdp,
    MdpError,
    PLANNER_TOL,
    RewardDist,
    StochasticPolicy,
    state_transition_matrix,
    value_iteration,
)

logger = logging.getLogger("fair_mdp.induced_planning")

EXPLOITATION = "exploitation"
EXPLORATION = "exploration"

# Largest policy space verify_exploit_or_explore accepts (3 actions, 5 states)
MAX_DETERMINISTIC_POLICIES = 3 ** 5


class EmptyKnownSet(MdpError):
    pass


class NotKnownState(MdpError):
    pass


class InstanceTooLarge(MdpError):
    pass


class ExploitExploreCounterexample(MdpError):
    pass


@dataclass
class InducedMdp:
    mdp: Mdp
    kind: str
    states: tuple

    @property
    def s0(self) -> int:
        return len(self.states)

    def local(self, s: int) -> int:
        try:
            return self.states.index(int(s))
        except ValueError:
            raise NotKnownState(f"state {s} is not in the known set {list(self.states)}")


def _gammaset(gammaset: Sequence[int], n: int) -> tuple:
    gs = tuple(sorted({int(s) for s in gammaset}))
    if not gs:
        raise EmptyKnownSet("known set is empty")
    if gs[0] < 0 or gs[-1] >= n:
        raise MdpError(f"known set {list(gs)} has states outside 0..{n - 1}")
    return gs


def _source_rows(source: Union[Mdp, EmpiricalModel], gs: tuple):
    """Transition rows (|Gamma|, k, n) and mean rewards for the known states."""
    if isinstance(source, EmpiricalModel):
        have = [int(s) for s in source.gammaset]
        missing = [s for s in gs if s not in have]
        if missing:
            raise NotKnownState(f"empirical model has no rows for states {missing}")
        rows = [have.index(s) for s in gs]
        return source.P[rows], source.rbar[rows], source.gamma, source.n
    idx = list(gs)
    return source.P[idx], source.rbar[idx], source.gamma, source.n


def _build(source, gammaset, kind: str) -> InducedMdp:
    n_source = source.n
    gs = _gammaset(gammaset, n_source)
    rows, rbar, gamma, n = _source_rows(source, gs)
    g, k = len(gs), rows.shape[1]
    inside = np.zeros(n, dtype=bool)
    inside[list(gs)] = True
    P = np.zeros((g + 1, k, g + 1))
    P[:g, :, :g] = rows[:, :, list(gs)]
    P[:g, :, g] = rows[:, :, ~inside].sum(axis=2)
    P[g, :, g] = 1.0
    if kind == EXPLOITATION:
        rewards = [RewardDist.point(float(r)) for r in rbar] + [RewardDist.point(0.0)]
    else:
        rewards = [RewardDist.point(0.0)] * g + [RewardDist.point(1.0)]
    return InducedMdp(Mdp(P, tuple(rewards), gamma), kind, gs)


def build_exploitation(source: Union[Mdp, EmpiricalModel], gammaset: Sequence[int]) -> InducedMdp:
    return _build(source, gammaset, EXPLOITATION)


def build_exploration(source: Union[Mdp, EmpiricalModel], gammaset: Sequence[int]) -> InducedMdp:
    return _build(source, gammaset, EXPLORATION)


def fair_greedy_policy(q: np.ndarray, allowed: Optional[np.ndarray] = None,
                       tie_tol: float = TIE_TOL) -> StochasticPolicy:
    """Uniform over the best actions (within tie_tol) among the allowed ones."""
    q = np.asarray(q, dtype=float)
    masked = q if allowed is None else np.where(allowed, q, -np.inf)
    best = masked >= masked.max(axis=1, keepdims=True) - tie_tol
    if allowed is not None:
        best &= allowed
    best = best.astype(float)
    return StochasticPolicy(best / best.sum(axis=1, keepdims=True))


@dataclass
class RestrictedInduced:
    """An InducedMdp with the task-fairness mask applied to its Gamma rows."""

    induced: InducedMdp
    allowed: np.ndarray
    alpha: float
    tol: float = PLANNER_TOL

    @cached_property
    def values(self):
        return value_iteration(self.induced.mdp, self.tol, self.allowed)

    def policy(self, tie_tol: float = TIE_TOL) -> StochasticPolicy:
        _, q = self.values
        return fair_greedy_policy(q, self.allowed, tie_tol)


def restrict_induced(induced: InducedMdp, task_q: np.ndarray, alpha: float,
                     tie_tol: float = TIE_TOL, tol: float = PLANNER_TOL) -> RestrictedInduced:
    """
    Restrict an induced MDP with the original task's Q estimates (rows for
    base states); s0 gets a zero row, which leaves all its actions allowed.
    """
    if alpha < 0:
        raise MdpError(f"alpha must be nonnegative, got {alpha}")
    task_q = np.asarray(task_q, dtype=float)
    lifted = np.vstack([task_q[list(induced.states)], np.zeros((1, task_q.shape[1]))])
    return RestrictedInduced(induced, allowed_mask(lifted, alpha, tie_tol), float(alpha), tol)


# ----------------------------------------------------------------------------
# Escape probabilities


def escape_probability(induced: InducedMdp, pi: StochasticPolicy, s: int, steps: int) -> float:
    """Exact probability that a `steps`-transition walk from base state s under pi ends in s0."""
    if steps < 1:
        raise MdpError(f"steps must be at least 1, got {steps}")
    i = induced.local(s)
    P_pi = state_transition_matrix(induced.mdp, pi)
    d = np.zeros(induced.mdp.n)
    d[i] = 1.0
    for _ in range(steps):
        d = d @ P_pi
    return float(min(max(d[induced.s0], 0.0), 1.0))


def escape_probability_mc(induced: InducedMdp, pi: StochasticPolicy, s: int, steps: int,
                          runs: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of escape_probability from `runs` simulated walks."""
    if steps < 1 or runs < 1:
        raise MdpError("steps and runs must be at least 1")
    i = induced.local(s)
    m = induced.mdp
    pol_cdf = np.cumsum(pi.dist, axis=1)
    cdfs = np.cumsum(m.P, axis=2)
    states = np.full(runs, i)
    for _ in range(steps):
        a = (pol_cdf[states] <= rng.random(runs)[:, None] * pol_cdf[states, -1:]).sum(axis=1)
        a = np.minimum(a, m.k - 1)
        row_cdf = cdfs[states, a]
        states = (row_cdf <= rng.random(runs)[:, None] * row_cdf[:, -1:]).sum(axis=1)
        states = np.minimum(states, m.n - 1)
    return float(np.mean(states == induced.s0))


def max_escape_probability(induced: InducedMdp, allowed: Optional[np.ndarray], s: int, steps: int):
    """
    Best probability over all (non-stationary) allowed policies of being in
    s0 after `steps` transitions from s, by backward induction. Returns
    (probability, per-step action tables).
    """
    i = induced.local(s)
    P = induced.mdp.P
    W = np.zeros(induced.mdp.n)
    W[induced.s0] = 1.0
    plan = []
    for _ in range(steps):
        Q = P @ W
        if allowed is not None:
            Q = np.where(allowed, Q, -np.inf)
        plan.append(np.argmax(Q, axis=1))
        W = Q.max(axis=1)
    plan.reverse()
    return float(min(W[i], 1.0)), plan


# ----------------------------------------------------------------------------
# Decisions


@dataclass
class Decision:
    variant: str
    policy: StochasticPolicy
    induced: InducedMdp
    state: int
    p: float
    threshold: float
    T: int

    @property
    def explore(self) -> bool:
        return self.variant == "explore"

    @property
    def phase_length(self) -> int:
        return 2 * self.T if self.explore else self.T

    def dist(self, s: int) -> np.ndarray:
        return self.policy.dist[self.induced.local(s)]

    @cached_property
    def policy_id(self) -> str:
        return hashlib.sha1(self.policy.dist.tobytes()).hexdigest()[:10]

    def to_event(self, t: int) -> dict:
        return {
            "t": t,
            "state": self.state,
            "variant": self.variant,
            "p": self.p,
            "threshold": self.threshold,
            "policy_id": self.policy_id,
        }


def decide(s: int, exploit: RestrictedInduced, explore: RestrictedInduced, T: int, eps: float,
           beta: Optional[float] = None, tie_tol: float = TIE_TOL, allow_explore: bool = True,
           mc_runs: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> Decision:
    """
    Explore when the restricted escape policy leaves Gamma within 2T steps
    with probability at least beta/(4T) (beta defaults to eps); otherwise
    exploit. With mc_runs the escape chance is estimated by simulation.
    """
    if T < 1:
        raise MdpError(f"T must be at least 1, got {T}")
    if exploit.induced.states != explore.induced.states:
        raise MdpError("exploitation and exploration MDPs were built from different known sets")
    threshold = (eps if beta is None else beta) / (4.0 * T)
    pi_explore = explore.policy(tie_tol)
    if mc_runs:
        rng = rng if rng is not None else np.random.default_rng(0)
        p = escape_probability_mc(explore.induced, pi_explore, s, 2 * T, mc_runs, rng)
    else:
        p = escape_probability(explore.induced, pi_explore, s, 2 * T)
    if allow_explore and p >= threshold:
        return Decision("explore", pi_explore, explore.induced, int(s), p, threshold, T)
    return Decision("exploit", exploit.policy(tie_tol), exploit.induced, int(s), p, threshold, T)


# ----------------------------------------------------------------------------
# Exploit-or-explore verification


@dataclass(frozen=True)
class Witness:
    disjunct: str
    state: int
    measure: float
    bound: float
    plan: tuple


def path_average_value(mdp: Mdp, actions: Sequence[int], s: int, T: int) -> float:
    """
    (1/T) E sum_{t=1..T} U(s_t) for the deterministic stationary policy
    `actions`, where s_1 = s and U is the policy's own discounted T-step value.
    """
    P_pi = mdp.P[np.arange(mdp.n), np.asarray(actions)]
    U = np.zeros(mdp.n)
    for _ in range(T):
        U = mdp.rbar + mdp.gamma * (P_pi @ U)
    d = np.zeros(mdp.n)
    d[s] = 1.0
    total = 0.0
    for _ in range(T):
        total += float(d @ U)
        d = d @ P_pi
    return total / T


def best_path_average(mdp: Mdp, allowed: Optional[np.ndarray], s: int, T: int):
    """Largest path_average_value over the allowed deterministic stationary policies."""
    mask = np.ones((mdp.n, mdp.k), dtype=bool) if allowed is None else allowed
    choices = [np.flatnonzero(row) for row in mask]
    best, best_actions = -np.inf, None
    for actions in itertools.product(*choices):
        value = path_average_value(mdp, actions, s, T)
        if value > best:
            best, best_actions = value, actions
    return best, tuple(int(a) for a in best_actions)


def verify_exploit_or_explore(m: Mdp, gammaset: Sequence[int], T: int, beta: float,
                              alpha: Optional[float] = None, start: Optional[int] = None,
                              tie_tol: float = TIE_TOL) -> Witness:
    """
    Certify from `start` (default: the smallest known state) one of:

      exploit  some policy of the exploitation MDP has a path-averaged
               T-step value within beta of the best path average in m
      explore  some policy leaves Gamma within 2T steps with probability
               above beta/T

    The path average is (1/T) E sum_t U(s_t) over the first T visited states,
    with U the policy's own T-step value; both sides range over deterministic
    stationary policies. With alpha=None nothing is restricted. With alpha,
    m is first cut down to its alpha-restriction under the exact Q*, and the
    benchmark, the exploitation side and the escape policies all live there.
    """
    if m.k ** m.n > MAX_DETERMINISTIC_POLICIES:
        raise InstanceTooLarge(f"{m.k}^{m.n} deterministic policies exceeds {MAX_DETERMINISTIC_POLICIES}")
    if T < 1 or beta <= 0:
        raise MdpError(f"need T >= 1 and beta > 0, got T={T}, beta={beta}")
    if alpha is not None and alpha < 0:
        raise MdpError(f"alpha must be nonnegative, got {alpha}")
    gs = _gammaset(gammaset, m.n)
    s = gs[0] if start is None else int(start)
    if alpha is None:
        allowed = np.ones((m.n, m.k), dtype=bool)
    else:
        _, qstar = value_iteration(m)
        allowed = allowed_mask(qstar, alpha, tie_tol)
    exploit = build_exploitation(m, gs)
    # s0 rows are identical for every action
    s0_row = np.zeros((1, m.k), dtype=bool)
    s0_row[0, 0] = True
    lifted = np.vstack([allowed[list(gs)], s0_row])

    best_m, _ = best_path_average(m, allowed, s, T)
    best_gamma, plan = best_path_average(exploit.mdp, lifted, exploit.local(s), T)
    deficit = best_m - best_gamma
    if deficit <= beta:
        return Witness("exploit", s, float(deficit), float(beta), plan)

    explore = build_exploration(m, gs)
    p, steps = max_escape_probability(explore, lifted, s, 2 * T)
    if p > beta / T:
        return Witness("explore", s, p, beta / T, tuple(steps))
    raise ExploitExploreCounterexample(
        f"state {s}: path-averaged deficit {deficit:.6g} > {beta} and best escape {p:.6g} <= {beta / T:.6g}"
    )
