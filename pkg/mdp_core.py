"""
Tabular MDP core

Finite MDPs with state rewards, exact planning (value iteration, policy
evaluation, finite-horizon backups), stationary distributions, mixing times,
seeded simulation and the epsilon-optimality metric.

Reward convention used everywhere in this repo: the reward of the current
state accrues undiscounted at the current step, so a path s_1, s_2, ... is
worth sum_t gamma^(t-1) * Rbar(s_t), and Q(s, a) = Rbar(s) + gamma * E[V(s')].
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Protocol, Sequence

import numpy as np

logger = logging.getLogger("fair_mdp.mdp_core")

# Planner config (env overridable)
PLANNER_TOL = float(os.getenv("FAIR_MDP_TOL", "1e-9"))
MAX_ITERATIONS = int(os.getenv("FAIR_MDP_MAX_ITER", "1000000"))
MIXING_CAP = int(os.getenv("FAIR_MDP_MIXING_CAP", "1000000"))

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10
# Learner distributions are accepted with a looser sum check than stored policies
DIST_SUM_TOL = 1e-9


class MdpError(ValueError):
    """Base class for every domain error raised by this package."""


class InvalidMdp(MdpError):
    pass


class MdpFormatError(MdpError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class UnichainViolation(MdpError):
    pass


class NonConvergence(MdpError):
    pass


@dataclass(frozen=True)
class RewardDist:
    """Bounded state reward: a point mass at `param` or Bernoulli(`param`)."""

    kind: str
    param: float

    KINDS = ("point", "bernoulli")

    def __post_init__(self):
        kind = self.kind.lower()
        if kind == "pointmass":
            kind = "point"
        object.__setattr__(self, "kind", kind)

    @property
    def mean(self) -> float:
        return float(self.param)

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "bernoulli":
            return 1.0 if rng.random() < self.param else 0.0
        return float(self.param)

    @classmethod
    def point(cls, value: float) -> "RewardDist":
        return cls("point", float(value))

    @classmethod
    def bernoulli(cls, p: float) -> "RewardDist":
        return cls("bernoulli", float(p))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param}


@dataclass
class Mdp:
    """
    Finite MDP with per-state reward distributions.

    Attributes:
        P: transition tensor indexed (state, action, next_state)
        rewards: one RewardDist per state
        gamma: discount factor in [0, 1)
    """

    P: np.ndarray
    rewards: tuple
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.rewards = tuple(self.rewards)
        self.gamma = float(self.gamma)

    @property
    def n(self) -> int:
        return int(self.P.shape[0])

    @property
    def k(self) -> int:
        return int(self.P.shape[1])

    @property
    def rbar(self) -> np.ndarray:
        return np.array([r.mean for r in self.rewards], dtype=float)

    @property
    def vmax(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.P.copy(), self.rewards, gamma)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "gamma": self.gamma,
            "P": self.P.tolist(),
            "R": [r.to_dict() for r in self.rewards],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mdp":
        for key in ("n", "k", "gamma", "P", "R"):
            if key not in data:
                raise MdpFormatError(key, "missing field")
        try:
            n, k = int(data["n"]), int(data["k"])
        except (TypeError, ValueError):
            raise MdpFormatError("n/k", "must be integers")
        try:
            P = np.asarray(data["P"], dtype=float)
        except (TypeError, ValueError):
            raise MdpFormatError("P", "must be a nested list of numbers")
        if P.shape != (n, k, n):
            raise MdpFormatError("P", f"expected shape ({n}, {k}, {n}), got {P.shape}")
        if not isinstance(data["R"], list) or len(data["R"]) != n:
            raise MdpFormatError("R", f"expected a list of {n} reward entries")
        rewards = []
        for i, entry in enumerate(data["R"]):
            try:
                dist = RewardDist(str(entry["kind"]), float(entry["param"]))
            except (KeyError, TypeError, ValueError):
                raise MdpFormatError(f"R[{i}]", "expected {kind, param}")
            if dist.kind not in RewardDist.KINDS:
                raise MdpFormatError(f"R[{i}].kind", f"unknown reward kind {entry['kind']!r}")
            rewards.append(dist)
        try:
            gamma = float(data["gamma"])
        except (TypeError, ValueError):
            raise MdpFormatError("gamma", "must be a number")
        return cls(P, tuple(rewards), gamma)


@dataclass
class ValidationReport:
    ok: bool
    problems: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def validate_mdp(m: Mdp) -> ValidationReport:
    """Check every Mdp invariant and list the violations with indices."""
    problems = []
    if m.P.ndim != 3 or m.P.shape[0] != m.P.shape[2]:
        problems.append(f"P has shape {m.P.shape}, expected (n, k, n)")
        return ValidationReport(False, problems)
    if m.n < 1 or m.k < 1:
        problems.append("need at least one state and one action")
    for s, a, s2 in zip(*np.nonzero(m.P < 0)):
        problems.append(f"negative probability at ({s}, {a}, {s2})")
    sums = m.P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)):
        problems.append(f"row ({s}, {a}) sums to {sums[s, a]!r}")
    if len(m.rewards) != m.n:
        problems.append(f"{len(m.rewards)} reward entries for {m.n} states")
    for s, r in enumerate(m.rewards):
        if r.kind not in RewardDist.KINDS:
            problems.append(f"reward {s} has unknown kind {r.kind!r}")
        if not 0.0 <= r.param <= 1.0:
            problems.append(f"reward {s} parameter {r.param!r} outside [0, 1]")
    if not 0.0 <= m.gamma < 1.0:
        problems.append(f"discount {m.gamma!r} outside [0, 1)")
    return ValidationReport(not problems, problems)


def require_valid(m: Mdp) -> None:
    report = validate_mdp(m)
    if not report.ok:
        raise InvalidMdp("; ".join(report.problems))


def load_mdp(path) -> Mdp:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise MdpFormatError(f"{path.name}:{e.lineno}", e.msg)
    if not isinstance(data, dict):
        raise MdpFormatError(path.name, "top level must be an object")
    return Mdp.from_dict(data)


def save_mdp(m: Mdp, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2) + "\n")


# ----------------------------------------------------------------------------
# Policies and learners


class Learner(Protocol):
    """Anything that commits to a full action distribution before sampling."""

    def act(self, s: int) -> np.ndarray: ...

    def observe(self, s: int, a: int, r: float, s_next: int) -> None: ...


@dataclass
class StochasticPolicy:
    dist: np.ndarray

    def __post_init__(self):
        self.dist = np.asarray(self.dist, dtype=float)
        if self.dist.ndim != 2:
            raise MdpError(f"policy table must be 2-D, got shape {self.dist.shape}")
        if (self.dist < 0).any() or (np.abs(self.dist.sum(axis=1) - 1.0) > ROW_SUM_TOL).any():
            raise MdpError("policy rows must be probability vectors")

    @property
    def n(self) -> int:
        return int(self.dist.shape[0])

    @property
    def k(self) -> int:
        return int(self.dist.shape[1])

    @classmethod
    def uniform(cls, n: int, k: int) -> "StochasticPolicy":
        return cls(np.full((n, k), 1.0 / k))

    @classmethod
    def deterministic(cls, actions: Sequence[int], k: int) -> "StochasticPolicy":
        actions = np.asarray(actions, dtype=int)
        dist = np.zeros((len(actions), k))
        dist[np.arange(len(actions)), actions] = 1.0
        return cls(dist)

    def is_deterministic(self) -> bool:
        return bool(np.all(self.dist.max(axis=1) == 1.0))

    def act(self, s: int) -> np.ndarray:
        return self.dist[s]

    def observe(self, s: int, a: int, r: float, s_next: int) -> None:
        pass


def state_transition_matrix(m: Mdp, pi: StochasticPolicy) -> np.ndarray:
    """P_pi[s, s'] = sum_a pi(a|s) P(s, a, s')."""
    if pi.dist.shape != (m.n, m.k):
        raise MdpError(f"policy shape {pi.dist.shape} does not match MDP ({m.n}, {m.k})")
    return np.einsum("sa,sat->st", pi.dist, m.P)


def greedy_policy(q: np.ndarray, allowed: Optional[np.ndarray] = None) -> StochasticPolicy:
    """Deterministic argmax policy; ties go to the lowest action index."""
    masked = _masked(q, allowed)
    return StochasticPolicy.deterministic(np.argmax(masked, axis=1), q.shape[1])


def _masked(q: np.ndarray, allowed: Optional[np.ndarray]) -> np.ndarray:
    if allowed is None:
        return q
    return np.where(allowed, q, -np.inf)


# ----------------------------------------------------------------------------
# Planning


def _check_tol(tol: float) -> None:
    if not tol > 0:
        raise MdpError(f"tolerance must be positive, got {tol!r}")


def value_iteration(m: Mdp, tol: float = PLANNER_TOL, allowed: Optional[np.ndarray] = None):
    """
    Optimal values V*, Q* by value iteration.

    Stops once the sup-norm change is at most tol*(1-gamma)/(2*gamma), which
    puts the returned V within tol of the fixed point. With `allowed` (a
    boolean (n, k) mask) the max runs over allowed actions only; disallowed
    Q entries are still reported as their one-step backups.
    """
    require_valid(m)
    _check_tol(tol)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (m.n, m.k) or not allowed.any(axis=1).all():
            raise MdpError("allowed mask must be (n, k) with a nonempty row per state")
    rbar, gamma = m.rbar, m.gamma
    threshold = tol * (1.0 - gamma) / (2.0 * gamma) if gamma > 0 else math.inf
    V = np.zeros(m.n)
    for _ in range(MAX_ITERATIONS):
        Q = rbar[:, None] + gamma * (m.P @ V)
        V_new = _masked(Q, allowed).max(axis=1)
        delta = np.max(np.abs(V_new - V)) if m.n else 0.0
        V = V_new
        if delta <= threshold:
            break
    else:
        raise NonConvergence(f"value iteration did not converge in {MAX_ITERATIONS} sweeps")
    Q = rbar[:, None] + gamma * (m.P @ V)
    V = _masked(Q, allowed).max(axis=1)
    return V, Q


def policy_evaluation(m: Mdp, pi: StochasticPolicy, tol: float = PLANNER_TOL):
    """V^pi, Q^pi by solving (I - gamma P_pi) V = Rbar; residual checked against tol."""
    require_valid(m)
    _check_tol(tol)
    P_pi = state_transition_matrix(m, pi)
    rbar = m.rbar
    V = np.linalg.solve(np.eye(m.n) - m.gamma * P_pi, rbar)
    residual = np.max(np.abs(rbar + m.gamma * P_pi @ V - V))
    if residual > tol:
        raise NonConvergence(f"policy evaluation residual {residual:.3g} exceeds {tol:.3g}")
    Q = rbar[:, None] + m.gamma * (m.P @ V)
    return V, Q


def bellman_residual(m: Mdp, V: np.ndarray, allowed: Optional[np.ndarray] = None) -> float:
    Q = m.rbar[:, None] + m.gamma * (m.P @ V)
    return float(np.max(np.abs(_masked(Q, allowed).max(axis=1) - V)))


def finite_horizon_values(m: Mdp, T: int, allowed: Optional[np.ndarray] = None):
    """
    Optimal discounted T-step values by backward induction.

    Returns (U, actions) where U[s] = max E[sum_{t=1..T} gamma^(t-1) Rbar(s_t)]
    from s_1 = s, and actions[t] is the lowest-index greedy action table used
    at step t+1 of the walk.
    """
    if T < 1:
        raise MdpError("horizon must be at least 1")
    rbar = m.rbar
    U = np.zeros(m.n)
    plan = []
    for _ in range(T):
        Q = rbar[:, None] + m.gamma * (m.P @ U)
        masked = _masked(Q, allowed)
        plan.append(np.argmax(masked, axis=1))
        U = masked.max(axis=1)
    plan.reverse()
    return U, plan


def horizon_time(eps: float, gamma: float) -> int:
    """H = ceil(log(eps*(1-gamma)) / log(gamma))."""
    if not (eps > 0 and 0 < gamma < 1 and eps * (1 - gamma) < 1):
        raise MdpError(f"horizon_time needs eps > 0, 0 < gamma < 1, eps*(1-gamma) < 1; got eps={eps}, gamma={gamma}")
    value = math.log(eps * (1 - gamma)) / math.log(gamma)
    # absorb rounding noise when the formula lands on an integer
    return max(1, math.ceil(value - 1e-12))


# ----------------------------------------------------------------------------
# Stationarity and mixing


def _tv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(a - b).sum(axis=-1)


def stationary_distribution(m: Mdp, pi: StochasticPolicy, tol: float = STATIONARY_TOL) -> np.ndarray:
    """
    Stationary distribution mu^pi, checking the unichain assumption.

    Powers of the lazy chain (I + P_pi)/2 are iterated from every start state
    at once (repeated squaring); the lazy chain shares mu^pi and converges
    even when P_pi is periodic. All start-state limits must agree within
    10*tol or UnichainViolation is raised.
    """
    _check_tol(tol)
    P_pi = state_transition_matrix(m, pi)
    D = 0.5 * (np.eye(m.n) + P_pi)
    for _ in range(64):
        D_next = D @ D
        if np.max(np.abs(D_next - D)) <= tol / 10:
            D = D_next
            break
        D = D_next
    else:
        raise NonConvergence("stationary distribution iteration did not settle")
    spread = np.max(_tv(D, D[0][None, :]))
    if spread > 10 * tol:
        raise UnichainViolation(f"start-state limits differ by {spread:.3g} in total variation")
    mu = D.mean(axis=0)
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    if _tv(mu @ P_pi, mu) > tol:
        raise NonConvergence("limit is not a fixed point of the policy's transition matrix")
    return mu


def mixing_time(m: Mdp, pi: StochasticPolicy, eps: float, cap: int = MIXING_CAP) -> int:
    """
    Mixing time counted in transitions: the smallest T such that after T
    transitions from every start state the state distribution is within eps
    of mu^pi in L1 (always-advance on a 3-state chain gives 2, not 3).

    Exact distribution evolution; the max-over-starts distance is
    nonincreasing in T, so the first T that satisfies the bound is minimal.
    """
    if not 0 < eps < 1:
        raise MdpError(f"eps must lie in (0, 1), got {eps}")
    mu = stationary_distribution(m, pi)
    P_pi = state_transition_matrix(m, pi)
    D = np.eye(m.n)
    for T in range(1, cap + 1):
        D = D @ P_pi
        if np.max(np.abs(D - mu[None, :]).sum(axis=1)) <= eps:
            return T
    raise NonConvergence(f"mixing time exceeds cap {cap} (periodic chain or eps too small)")


# ----------------------------------------------------------------------------
# Simulation


@dataclass(frozen=True)
class TraceStep:
    t: int
    state: int
    dist: np.ndarray
    action: int
    reward: float


@dataclass
class Trace:
    """Columnar record of a run: states, committed distributions, actions, rewards."""

    states: np.ndarray
    dists: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    seed: Optional[int] = None

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @property
    def k(self) -> int:
        return int(self.dists.shape[1])

    @property
    def steps(self) -> Iterator[TraceStep]:
        for t in range(len(self)):
            yield TraceStep(t, int(self.states[t]), self.dists[t], int(self.actions[t]), float(self.rewards[t]))

    def head(self, T: int) -> "Trace":
        return Trace(self.states[:T], self.dists[:T], self.actions[:T], self.rewards[:T], self.seed)

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for step in self.steps:
                fh.write(json.dumps({
                    "t": step.t,
                    "state": step.state,
                    "dist": [float(p) for p in step.dist],
                    "action": step.action,
                    "reward": step.reward,
                }) + "\n")


def load_trace(path) -> Trace:
    states, dists, actions, rewards = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                states.append(int(row["state"]))
                dists.append([float(p) for p in row["dist"]])
                actions.append(int(row["action"]))
                rewards.append(float(row["reward"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise MdpFormatError(f"line {lineno}", f"bad trace step ({e})")
    if not states:
        raise MdpFormatError("trace", "no steps")
    if len({len(d) for d in dists}) != 1:
        raise MdpFormatError("dist", "distributions have different lengths")
    return Trace(np.array(states, dtype=int), np.array(dists, dtype=float),
                 np.array(actions, dtype=int), np.array(rewards, dtype=float))


def split_seed(root_seed: int, index: int) -> int:
    """Per-run seed: root XOR run index, then fed to numpy's default_rng."""
    return int(root_seed) ^ int(index)


def sample_index(cdf: np.ndarray, rng: np.random.Generator) -> int:
    """Draw from a cumulative table; zero-probability entries are never returned."""
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


def _check_dist(dist: np.ndarray, k: int, t: int) -> np.ndarray:
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (k,) or (dist < 0).any() or abs(dist.sum() - 1.0) > DIST_SUM_TOL:
        raise MdpError(f"step {t}: agent emitted an invalid action distribution {dist!r}")
    return dist


def simulate(m: Mdp, agent, T: int, seed: int, start: int = 0) -> Trace:
    """
    Run `agent` on `m` for exactly T steps from `start`.

    The agent commits to a full distribution via act(s) before the action is
    sampled here; the realized transition is then fed back via observe().
    """
    if T < 1:
        raise MdpError("T must be at least 1")
    require_valid(m)
    rng = np.random.default_rng(seed)
    cdfs = np.cumsum(m.P, axis=2)
    states = np.empty(T, dtype=int)
    dists = np.empty((T, m.k))
    actions = np.empty(T, dtype=int)
    rewards = np.empty(T)
    s = int(start)
    for t in range(T):
        dist = _check_dist(agent.act(s), m.k, t)
        a = sample_index(np.cumsum(dist), rng)
        r = m.rewards[s].sample(rng)
        s_next = sample_index(cdfs[s, a], rng)
        states[t], actions[t], rewards[t] = s, a, r
        dists[t] = dist
        agent.observe(s, a, r, s_next)
        s = s_next
    return Trace(states, dists, actions, rewards, seed)


# ----------------------------------------------------------------------------
# Metrics


def epsilon_optimality_gap(m: Mdp, trace: Trace, vstar: np.ndarray, mustar: np.ndarray) -> float:
    """E_{s~mu*}[V*(s)] - (1/T) sum_t V*(s_t) over the visited states."""
    vstar, mustar = np.asarray(vstar, dtype=float), np.asarray(mustar, dtype=float)
    if vstar.shape != (m.n,) or mustar.shape != (m.n,):
        raise MdpError("value table and stationary distribution must have one entry per state")
    if len(trace) == 0:
        raise MdpError("trace is empty")
    if trace.states.max() >= m.n or trace.k != m.k:
        raise MdpError("trace does not match the MDP's state/action counts")
    return float(mustar @ vstar - vstar[trace.states].mean())


def stationary_value_residual(m: Mdp, pi: StochasticPolicy, tol: float = PLANNER_TOL) -> float:
    """|mu^pi . Rbar - (1 - gamma) mu^pi . V^pi|; zero for any unichain policy."""
    mu = stationary_distribution(m, pi)
    V, _ = policy_evaluation(m, pi, tol)
    return float(abs(mu @ m.rbar - (1.0 - m.gamma) * (mu @ V)))
