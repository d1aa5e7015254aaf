"""
Fair-E3 learner

Online, auditable learner for tabular MDPs. It plays uniformly at random on
states it does not know yet (length-H random trajectories rooted there), and
from known states follows either an escape policy or an exploitation policy,
both planned inside the alpha-restriction of its own Q estimates. Every step
it commits a full action distribution before the simulator samples from it.

Also provides the contrast baselines: uniform play and an optimistic,
deterministic E3-style learner that is fast on chain instances but unfair.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from estimation import (
    KnownModel,
    Thresholds,
    Trajectory,
    UnvisitedPair,
    empirical_model,
    known_thresholds,
    q_estimates,
)
from fairness_audit import TIE_TOL, audit_action, fair_optimal_policy
from induced_planning import (
    Decision,
    build_exploitation,
    build_exploration,
    decide,
    restrict_induced,
)
from mdp_core import (
    Mdp,
    MdpError,
    NonConvergence,
    PLANNER_TOL,
    RewardDist,
    StochasticPolicy,
    UnichainViolation,
    epsilon_optimality_gap,
    horizon_time,
    simulate,
    stationary_distribution,
    value_iteration,
)

logger = logging.getLogger("fair_mdp.fair_e3")

DECIDING = "deciding"
RANDOM = "random"
EXPLORING = "exploring"
EXPLOITING = "exploiting"
SAMPLING = "sampling"

RESTRICTIONS = ("plugin", "pessimistic")

# Recent decision events kept on the learner
EVENT_HISTORY = 1000


class InvalidConfig(MdpError):
    pass


class OutOfOrderObservation(MdpError):
    pass


@dataclass
class FairE3Config:
    """
    Attributes:
        eps, alpha, delta, gamma: accuracy, fairness slack, failure budget, discount
        tstar: mixing-time guess T*; None runs the sequential guess 1, 2, ...
        mq_override: known-state threshold used instead of the formula
        scale: multiplier on the formula thresholds
        horizon: random-trajectory length H (default horizon_time(eps, gamma))
        beta: exploit/explore threshold numerator (default eps)
        escape_mc_runs: estimate escape chances by simulation instead of exactly
        restriction: Q table the alpha-restriction is built from, "plugin"
            (every recorded count) or "pessimistic" (states outside Gamma worth 0)
    """

    eps: float = 0.1
    alpha: float = 0.3
    delta: float = 0.1
    gamma: float = 0.9
    tstar: Optional[int] = None
    mq_override: Optional[int] = None
    scale: float = 1.0
    horizon: Optional[int] = None
    beta: Optional[float] = None
    tie_tol: float = TIE_TOL
    escape_mc_runs: Optional[int] = None
    restriction: str = "plugin"

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidConfig(f"eps must be positive, got {self.eps}")
        if not self.alpha > 0:
            raise InvalidConfig(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.delta < 0.5:
            raise InvalidConfig(f"delta must lie in (0, 0.5), got {self.delta}")
        if not 0 <= self.gamma < 1:
            raise InvalidConfig(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.tstar is not None and self.tstar < 1:
            raise InvalidConfig(f"tstar must be at least 1, got {self.tstar}")
        if self.mq_override is not None and self.mq_override < 1:
            raise InvalidConfig(f"mq override must be at least 1, got {self.mq_override}")
        if self.horizon is not None and self.horizon < 1:
            raise InvalidConfig(f"horizon must be at least 1, got {self.horizon}")
        if not self.scale > 0:
            raise InvalidConfig(f"scale must be positive, got {self.scale}")
        if self.beta is not None and not self.beta > 0:
            raise InvalidConfig(f"beta must be positive, got {self.beta}")
        if self.restriction not in RESTRICTIONS:
            raise InvalidConfig(f"restriction must be one of {RESTRICTIONS}, got {self.restriction!r}")

    @property
    def sequential(self) -> bool:
        return self.tstar is None

    @property
    def H(self) -> int:
        if self.horizon is not None:
            return self.horizon
        if self.gamma == 0 or self.eps * (1 - self.gamma) >= 1:
            return 1
        return horizon_time(self.eps, self.gamma)

    @property
    def min_exploit_phases(self) -> int:
        return math.ceil(math.log(1.0 / self.delta) / self.eps ** 2)

    def thresholds(self, n: int, k: int) -> Thresholds:
        if self.mq_override is not None:
            return Thresholds.override(self.mq_override)
        # a quarter of delta for estimation, shared across the n states
        return known_thresholds(n, k, self.H, self.alpha, self.eps, self.gamma,
                                self.delta / (4 * n), self.scale)

    def exploration_budget(self, n: int, mq: int, tstar: int) -> int:
        return math.ceil(tstar * n * mq / self.eps * math.log(n / self.delta))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Phase:
    kind: str
    remaining: int = 0
    decision: Optional[Decision] = None


class FairE3Learner:
    """
    Phase machine: Deciding -> RandomTrajectory(H) | UniformStep(1) | Exploring(2T) | Exploiting(T).

    A random trajectory always runs its full H steps. A policy phase stops
    as soon as it lands on an unknown state, which roots the next random
    trajectory there. A uniform step is taken from a known state while some
    known state still has an untried action, so the plan cannot be built.
    """

    def __init__(self, n: int, k: int, config: FairE3Config,
                 known_model: Optional[KnownModel] = None, oracle: Optional[Mdp] = None,
                 seed: int = 0):
        self.n, self.k = n, k
        self.config = config
        if known_model is None:
            known_model = KnownModel(n, k, config.thresholds(n, k), horizon=config.H)
        elif (known_model.n, known_model.k) != (n, k):
            raise InvalidConfig("known model shape does not match the learner")
        self.km = known_model
        self.oracle = oracle
        self._oracle_q = value_iteration(oracle)[1] if oracle is not None else None

        self.tstar = config.tstar or 1
        self.budget = config.exploration_budget(n, self.km.thresholds.mq, self.tstar)
        self.phase = Phase(DECIDING)
        self.t = 0
        self.steps = {RANDOM: 0, SAMPLING: 0, EXPLORING: 0, EXPLOITING: 0}
        self.explorations = 0
        self.exploit_phases = 0
        self.known_curve = [(0, int(self.km.known.sum()))]
        self.events = deque(maxlen=EVENT_HISTORY)

        self._pending = None
        self._traj = ([], [], [])
        self._plan_key = None
        self._planned = None
        self._decisions = {}
        self._untried_logged = set()
        self._rng = np.random.default_rng(seed)
        self._cycle_phases = 0
        self._window = deque(maxlen=config.min_exploit_phases * self.tstar)

    # -- learner protocol ----------------------------------------------------

    def act(self, s: int) -> np.ndarray:
        if self._pending is not None:
            raise OutOfOrderObservation("act() called twice without observe()")
        if self.phase.kind == DECIDING:
            self._start_phase(s)
        if self.phase.kind in (RANDOM, SAMPLING):
            dist = np.full(self.k, 1.0 / self.k)
        else:
            dist = self.phase.decision.dist(s)
        self._pending = (int(s), dist)
        return dist

    def observe(self, s: int, a: int, r: float, s_next: int) -> None:
        if self._pending is None or self._pending[0] != s:
            raise OutOfOrderObservation(f"observation for state {s} does not follow act({s})")
        dist = self._pending[1]
        if not 0 <= a < self.k or dist[a] <= 0:
            raise OutOfOrderObservation(f"action {a} had zero committed probability at state {s}")
        self._pending = None
        kind = self.phase.kind
        self.steps[kind] += 1
        self.t += 1

        if kind == SAMPLING:
            # feeds the pair counts only; trajectory_count stays with rooted trajectories
            self.km.record_transition(int(s), int(a), float(r), int(s_next))
            self.phase = Phase(DECIDING)
            return

        if kind == RANDOM:
            states, actions, rewards = self._traj
            states.append(s)
            actions.append(a)
            rewards.append(r)
            self.phase.remaining -= 1
            if self.phase.remaining == 0:
                self._finish_trajectory(s_next)
            return

        if kind == EXPLOITING and self.config.sequential:
            self._window.append(s)
        self.phase.remaining -= 1
        if not self.km.is_known(s_next):
            self._begin_random()
            return
        if self.phase.remaining == 0:
            if kind == EXPLOITING:
                self.exploit_phases += 1
                self._after_exploit_phase()
            self.phase = Phase(DECIDING)

    # -- phases --------------------------------------------------------------

    def _begin_random(self) -> None:
        self._traj = ([], [], [])
        self.phase = Phase(RANDOM, self.config.H)

    def _finish_trajectory(self, s_next: int) -> None:
        states, actions, rewards = self._traj
        fresh = self.km.record_trajectory(Trajectory(states, actions, rewards, s_next))
        if fresh:
            self.known_curve.append((self.t, int(self.km.known.sum())))
            logger.info("t=%d: states %s known, |Gamma|=%d", self.t, fresh, self.known_curve[-1][1])
        self.phase = Phase(DECIDING)

    def _start_phase(self, s: int) -> None:
        if not self.km.is_known(s):
            self._begin_random()
            return
        decision = self._decision(s)
        if decision is None:
            self.phase = Phase(SAMPLING, 1)
            return
        if decision.explore:
            self.explorations += 1
            self.phase = Phase(EXPLORING, decision.phase_length, decision)
        else:
            self.phase = Phase(EXPLOITING, decision.phase_length, decision)
        self.events.append(decision.to_event(self.t))

    # -- planning ------------------------------------------------------------

    def _plan(self):
        key = self.km.version
        if key == self._plan_key:
            return self._planned
        self._decisions.clear()
        gs = self.km.gammaset
        cfg = self.config
        try:
            if self.oracle is not None:
                source, q = self.oracle, self._oracle_q
            else:
                source = empirical_model(self.km, cfg.gamma)
                est = q_estimates(self.km, cfg.gamma)
                q = est.plugin if cfg.restriction == "plugin" else est.pessimistic
        except UnvisitedPair as e:
            if (e.state, e.action) not in self._untried_logged:
                self._untried_logged.add((e.state, e.action))
                logger.warning("%s; taking uniform single steps until it is tried", e)
            planned = None
        else:
            exploit = restrict_induced(build_exploitation(source, gs), q, cfg.alpha, cfg.tie_tol)
            explore = restrict_induced(build_exploration(source, gs), q, cfg.alpha, cfg.tie_tol)
            planned = (exploit, explore)
        self._plan_key, self._planned = key, planned
        return planned

    def _decision(self, s: int) -> Optional[Decision]:
        planned = self._plan()
        if planned is None:
            return None
        can_explore = self.explorations < self.budget
        key = (int(s), self.tstar, can_explore)
        decision = self._decisions.get(key)
        if decision is None:
            cfg = self.config
            exploit, explore = planned
            decision = decide(s, exploit, explore, self.tstar, cfg.eps, cfg.beta, cfg.tie_tol,
                              allow_explore=can_explore, mc_runs=cfg.escape_mc_runs, rng=self._rng)
            self._decisions[key] = decision
            if not can_explore and decision.p >= decision.threshold:
                logger.debug("exploration budget %d spent; exploiting at state %d", self.budget, s)
        return decision

    # -- sequential T* -------------------------------------------------------

    def _after_exploit_phase(self) -> None:
        if not self.config.sequential:
            return
        self._cycle_phases += 1
        if self._cycle_phases < self.config.min_exploit_phases:
            return
        self._cycle_phases = 0
        gap = self.estimated_gap()
        limit = self.config.eps / (1.0 - self.config.gamma)
        if gap is not None and gap > limit:
            self.tstar += 1
            self.budget = self.config.exploration_budget(self.n, self.km.thresholds.mq, self.tstar)
            self._window = deque(maxlen=self.config.min_exploit_phases * self.tstar)
            logger.info("t=%d: estimated gap %.3f > %.3f, mixing-time guess now %d",
                        self.t, gap, limit, self.tstar)

    def estimated_gap(self) -> Optional[float]:
        """
        Estimated epsilon-optimality gap over the rolling window of exploitation
        states: the long-run value of the exploitation policy on the empirical
        model (kept inside Gamma) minus the window's average value.
        """
        if not self._window:
            return None
        planned = self._plan()
        if planned is None:
            return None
        exploit, _ = planned
        V, _ = exploit.values
        pi = exploit.policy(self.config.tie_tol)
        induced = exploit.induced
        g = induced.s0
        inner = np.einsum("sa,sat->st", pi.dist[:g], induced.mdp.P[:g, :, :g])
        mass = inner.sum(axis=1, keepdims=True)
        inner = np.where(mass > 0, inner / np.where(mass > 0, mass, 1.0), np.eye(g))
        chain = Mdp(inner[:, None, :], tuple(RewardDist.point(0.0) for _ in range(g)), self.config.gamma)
        try:
            mu = stationary_distribution(chain, StochasticPolicy(np.ones((g, 1))))
        except (UnichainViolation, NonConvergence):
            return None
        seen = np.array([V[induced.local(s)] for s in self._window])
        return float(mu @ V[:g] - seen.mean())

    def snapshot(self) -> dict:
        return {
            "t": self.t,
            "phase": self.phase.kind,
            "tstar": self.tstar,
            "gammaset": self.km.gammaset.tolist(),
            "explorations": self.explorations,
            "exploit_phases": self.exploit_phases,
        }


def fair_e3_new(config: FairE3Config, n: int, k: int, **kwargs) -> FairE3Learner:
    return FairE3Learner(n, k, config, **kwargs)


# ----------------------------------------------------------------------------
# Baselines


class GreedyE3Learner:
    """
    Optimistic, deterministic contrast learner. Pairs tried fewer than
    `known_after` times lead to an absorbing state worth 1/(1-gamma), unseen
    state rewards count as 1, and play is the lowest-index argmax of the
    resulting plan. Replans when the tried set changes or the sample count
    doubles.
    """

    def __init__(self, n: int, k: int, gamma: float, known_after: int = 1, tol: float = PLANNER_TOL):
        self.n, self.k, self.gamma = n, k, gamma
        self.known_after = known_after
        self.tol = tol
        self.sas = np.zeros((n, k, n))
        self.sa = np.zeros((n, k))
        self.r_sum = np.zeros(n)
        self.r_cnt = np.zeros(n)
        self._actions = None
        self._key = None

    def _plan_key(self):
        total = int(self.sa.sum())
        return ((self.sa >= self.known_after).tobytes(), (self.r_cnt > 0).tobytes(), int(math.log2(total + 1)))

    def _replan(self) -> None:
        n, k = self.n, self.k
        tried = self.sa >= self.known_after
        P = np.zeros((n + 1, k, n + 1))
        P[:n, :, :n] = np.where(tried[:, :, None], self.sas / np.maximum(self.sa, 1)[:, :, None], 0.0)
        P[:n, :, n] = np.where(tried, 0.0, 1.0)
        P[n, :, n] = 1.0
        rbar = np.where(self.r_cnt > 0, self.r_sum / np.maximum(self.r_cnt, 1), 1.0)
        rewards = tuple(RewardDist.point(float(r)) for r in rbar) + (RewardDist.point(1.0),)
        _, Q = value_iteration(Mdp(P, rewards, self.gamma), self.tol)
        self._actions = np.argmax(Q[:n], axis=1)

    def act(self, s: int) -> np.ndarray:
        key = self._plan_key()
        if key != self._key:
            self._replan()
            self._key = key
        dist = np.zeros(self.k)
        dist[self._actions[s]] = 1.0
        return dist

    def observe(self, s: int, a: int, r: float, s_next: int) -> None:
        self.sa[s, a] += 1
        self.sas[s, a, s_next] += 1
        self.r_sum[s] += r
        self.r_cnt[s] += 1


def baseline_uniform(n: int, k: int) -> StochasticPolicy:
    return StochasticPolicy.uniform(n, k)


def baseline_greedy_e3(n: int, k: int, gamma: float, known_after: int = 1) -> GreedyE3Learner:
    return GreedyE3Learner(n, k, gamma, known_after)


# ----------------------------------------------------------------------------
# End-to-end runs


@dataclass
class RunMetrics:
    seed: int
    T: int
    gap: float
    steps_random: int
    steps_explore: int
    steps_exploit: int
    explorations: int
    exploit_phases: int
    tstar: int
    steps_sample: int = 0
    known_curve: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)

    @property
    def audit_passed(self) -> bool:
        return self.audit.get("verdict") == "pass"

    def to_dict(self) -> dict:
        data = asdict(self)
        data["known_curve"] = [list(p) for p in self.known_curve]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def run_fair_e3(m: Mdp, config: FairE3Config, T: int, seed: int, oracle: bool = False,
                start: int = 0, known_model: Optional[KnownModel] = None):
    """
    Run Fair-E3 for T steps and score it against the true model.

    The gap uses V* and the stationary distribution of the fair optimal
    policy; the embedded audit is approximate-action fairness at the
    configured alpha. Returns (trace, metrics).
    """
    if abs(m.gamma - config.gamma) > 1e-12:
        raise InvalidConfig(f"config discount {config.gamma} differs from the MDP's {m.gamma}")
    learner = FairE3Learner(m.n, m.k, config, known_model=known_model,
                            oracle=m if oracle else None, seed=seed)
    trace = simulate(m, learner, T, seed, start)
    vstar, qstar = value_iteration(m)
    mustar = stationary_distribution(m, fair_optimal_policy(m, qstar, config.tie_tol))
    report = audit_action(trace, qstar, config.alpha, config.tie_tol)
    metrics = RunMetrics(
        seed=seed,
        T=T,
        gap=epsilon_optimality_gap(m, trace, vstar, mustar),
        steps_random=learner.steps[RANDOM],
        steps_sample=learner.steps[SAMPLING],
        steps_explore=learner.steps[EXPLORING],
        steps_exploit=learner.steps[EXPLOITING],
        explorations=learner.explorations,
        exploit_phases=learner.exploit_phases,
        tstar=learner.tstar,
        known_curve=list(learner.known_curve),
        audit=report.summary(),
    )
    logger.debug("seed %d: gap %.4f, audit %s", seed, metrics.gap, report.verdict)
    return trace, metrics
