"""
Known-state bookkeeping

Sample thresholds, the count tables behind the empirical model, plug-in Q
estimates bracketing the states outside Gamma and the unvisited pairs, and the
beta-approximation check between two MDPs.

A state becomes known once mQ uniformly random trajectories have been rooted
at it. Every step of every recorded trajectory feeds the transition and
reward counts, but only the root's trajectory_count advances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mdp_core import (
    Mdp,
    MdpError,
    MdpFormatError,
    PLANNER_TOL,
    RewardDist,
    value_iteration,
)

logger = logging.getLogger("fair_mdp.estimation")


class MalformedTrajectory(MdpError):
    pass


class UnvisitedPair(MdpError):
    def __init__(self, s: int, a: int):
        self.state, self.action = s, a
        super().__init__(f"known state {s} has never tried action {a}")


@dataclass(frozen=True)
class Thresholds:
    m1: int
    m2: int
    mq: int
    scale: float = 1.0
    mode: str = "formula"

    def __post_init__(self):
        if min(self.m1, self.m2, self.mq) < 1:
            raise MdpError(f"thresholds must be positive, got ({self.m1}, {self.m2}, {self.mq})")
        if self.mode not in ("formula", "override"):
            raise MdpError(f"unknown threshold mode {self.mode!r}")

    @classmethod
    def override(cls, mq: int) -> "Thresholds":
        return cls(int(mq), int(mq), int(mq), 1.0, "override")

    def to_dict(self) -> dict:
        return {"m1": self.m1, "m2": self.m2, "mq": self.mq, "scale": self.scale, "mode": self.mode}


def known_thresholds(n: int, k: int, H: int, alpha: float, eps: float, gamma: float,
                     delta: float, scale: float = 1.0) -> Thresholds:
    """
    m1 = scale k^(H+3) n (1/((1-gamma) alpha))^2 ln(k/delta)
    m2 = scale (n / min(eps, alpha))^4 H^8 ln(1/delta)
    mQ = k max(m1, m2), every term rounded up.
    """
    if n < 1 or k < 1 or H < 1:
        raise MdpError(f"need n, k, H >= 1, got n={n}, k={k}, H={H}")
    if not (alpha > 0 and eps > 0):
        raise MdpError(f"alpha and eps must be positive, got alpha={alpha}, eps={eps}")
    if not 0 <= gamma < 1:
        raise MdpError(f"discount must lie in [0, 1), got {gamma}")
    if not 0 < delta < 1:
        raise MdpError(f"delta must lie in (0, 1), got {delta}")
    if not scale > 0:
        raise MdpError(f"scale must be positive, got {scale}")
    try:
        m1 = math.ceil(scale * k ** (H + 3) * n * (1.0 / ((1.0 - gamma) * alpha)) ** 2 * math.log(k / delta))
        m2 = math.ceil(scale * (n / min(eps, alpha)) ** 4 * H ** 8 * math.log(1.0 / delta))
    except OverflowError:
        raise MdpError(f"thresholds overflow for n={n}, k={k}, H={H}; use an mQ override")
    # k = 1 makes ln(k/delta) the only factor keeping m1 positive
    m1, m2 = max(m1, 1), max(m2, 1)
    return Thresholds(m1, m2, k * max(m1, m2), float(scale), "formula")


def packnown_beta(eps: float, alpha: float, n: int, H: int) -> float:
    """Model accuracy min(eps, alpha)^2 / (n^2 H^4) that keeps plug-in values within min(alpha/2, eps)."""
    return min(eps, alpha) ** 2 / (n ** 2 * H ** 4)


@dataclass
class Trajectory:
    states: Sequence[int]
    actions: Sequence[int]
    rewards: Sequence[float]
    next_state: int

    @property
    def root(self) -> int:
        return int(self.states[0])

    def __len__(self) -> int:
        return len(self.states)

    def transitions(self):
        nexts = list(self.states[1:]) + [self.next_state]
        return zip(self.states, self.actions, self.rewards, nexts)


class KnownModel:
    """Visit statistics and the known set Gamma for an n-state, k-action MDP."""

    def __init__(self, n: int, k: int, thresholds: Thresholds, horizon: Optional[int] = None):
        self.n, self.k = n, k
        self.thresholds = thresholds
        self.horizon = horizon
        self.trajectory_count = np.zeros(n, dtype=np.int64)
        self.sa_count = np.zeros((n, k), dtype=np.int64)
        self.sas_count = np.zeros((n, k, n), dtype=np.int64)
        self.reward_count = np.zeros(n, dtype=np.int64)
        self.reward_sum = np.zeros(n)
        self.reward_sq = np.zeros(n)
        self.known = np.zeros(n, dtype=bool)
        # bumped on every count change; planners cache on it
        self.version = 0

    @property
    def gammaset(self) -> np.ndarray:
        return np.flatnonzero(self.known)

    def is_known(self, s: int) -> bool:
        return bool(self.known[s])

    def record_transition(self, s: int, a: int, r: float, s_next: int) -> None:
        if not (0 <= s < self.n and 0 <= s_next < self.n and 0 <= a < self.k):
            raise MalformedTrajectory(f"transition ({s}, {a}, {s_next}) outside {self.n} states / {self.k} actions")
        if not 0.0 <= r <= 1.0:
            raise MalformedTrajectory(f"reward {r} outside [0, 1]")
        self.sa_count[s, a] += 1
        self.sas_count[s, a, s_next] += 1
        self.reward_count[s] += 1
        self.reward_sum[s] += r
        self.reward_sq[s] += r * r
        self.version += 1

    def record_trajectory(self, traj: Trajectory) -> list:
        """Ingest one rooted random trajectory; returns the states that just became known."""
        if len(traj) == 0:
            raise MalformedTrajectory("empty trajectory")
        if not len(traj.states) == len(traj.actions) == len(traj.rewards):
            raise MalformedTrajectory("states, actions and rewards differ in length")
        if self.horizon is not None and len(traj) != self.horizon:
            raise MalformedTrajectory(f"trajectory has {len(traj)} steps, expected {self.horizon}")
        for s, a, r, s_next in traj.transitions():
            self.record_transition(int(s), int(a), float(r), int(s_next))
        root = traj.root
        self.trajectory_count[root] += 1
        return self._refresh_known()

    def _refresh_known(self) -> list:
        now = self.trajectory_count >= self.thresholds.mq
        fresh = np.flatnonzero(now & ~self.known)
        self.known = now | self.known
        if fresh.size:
            logger.debug("states %s became known (|Gamma|=%d)", fresh.tolist(), int(self.known.sum()))
        return [int(s) for s in fresh]

    def merge(self, other: "KnownModel") -> "KnownModel":
        """Sum the counts of two models over the same MDP; Gamma is recomputed."""
        if (self.n, self.k) != (other.n, other.k):
            raise MdpError("cannot merge models of different shapes")
        merged = KnownModel(self.n, self.k, self.thresholds, self.horizon)
        for name in ("trajectory_count", "sa_count", "sas_count", "reward_count", "reward_sum", "reward_sq"):
            setattr(merged, name, getattr(self, name) + getattr(other, name))
        merged.known = self.known | other.known
        merged._refresh_known()
        merged.version = self.version + other.version
        return merged

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "horizon": self.horizon,
            "thresholds": self.thresholds.to_dict(),
            "trajectory_count": self.trajectory_count.tolist(),
            "sas_count": self.sas_count.tolist(),
            "reward_count": self.reward_count.tolist(),
            "reward_sum": self.reward_sum.tolist(),
            "reward_sq": self.reward_sq.tolist(),
            "gammaset": self.gammaset.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KnownModel":
        try:
            km = cls(int(data["n"]), int(data["k"]), Thresholds(**data["thresholds"]), data.get("horizon"))
            km.trajectory_count = np.asarray(data["trajectory_count"], dtype=np.int64)
            km.sas_count = np.asarray(data["sas_count"], dtype=np.int64)
            km.reward_count = np.asarray(data["reward_count"], dtype=np.int64)
            km.reward_sum = np.asarray(data["reward_sum"], dtype=float)
            km.reward_sq = np.asarray(data["reward_sq"], dtype=float)
        except (KeyError, TypeError) as e:
            raise MdpFormatError("known_model", f"bad snapshot ({e})")
        if km.sas_count.shape != (km.n, km.k, km.n):
            raise MdpFormatError("sas_count", f"expected shape ({km.n}, {km.k}, {km.n})")
        km.sa_count = km.sas_count.sum(axis=2)
        if km.trajectory_count.shape != (km.n,):
            raise MdpFormatError("trajectory_count", f"expected {km.n} entries")
        listed = np.zeros(km.n, dtype=bool)
        try:
            listed[np.asarray(data.get("gammaset", []), dtype=int)] = True
        except IndexError:
            raise MdpFormatError("gammaset", f"states outside 0..{km.n - 1}")
        if (listed != (km.trajectory_count >= km.thresholds.mq)).any():
            raise MdpFormatError("gammaset", "does not match trajectory_count against mQ")
        km.known = listed
        return km


# ----------------------------------------------------------------------------
# Empirical model and plug-in estimates


@dataclass
class EmpiricalModel:
    """Maximum-likelihood rows for the known states only (row i is state gammaset[i])."""

    gammaset: np.ndarray
    P: np.ndarray
    rbar: np.ndarray
    gamma: float

    @property
    def n(self) -> int:
        return int(self.P.shape[2])

    @property
    def k(self) -> int:
        return int(self.P.shape[1])


def empirical_model(km: KnownModel, gamma: float) -> EmpiricalModel:
    gs = km.gammaset
    counts = km.sa_count[gs]
    if counts.size and (counts == 0).any():
        i, a = np.argwhere(counts == 0)[0]
        raise UnvisitedPair(int(gs[i]), int(a))
    P = km.sas_count[gs] / np.maximum(counts, 1)[:, :, None]
    rbar = km.reward_sum[gs] / np.maximum(km.reward_count[gs], 1)
    return EmpiricalModel(gs, P, np.clip(rbar, 0.0, 1.0), float(gamma))


@dataclass
class QEstimates:
    pessimistic: np.ndarray
    optimistic: np.ndarray
    gammaset: np.ndarray
    # every recorded count at face value, untried pairs to the zero sink
    plugin: Optional[np.ndarray] = None


def _plugin_mdp(km: KnownModel, gamma: float, sink_reward: float, bracket_unknown: bool = True) -> Mdp:
    # State n is an absorbing sink worth sink_reward per step. Untried pairs
    # lead there; with bracket_unknown every transition into a state outside
    # Gamma is rerouted there too and those states become sink copies.
    n, k = km.n, km.k
    P = np.zeros((n + 1, k, n + 1))
    visited = km.sa_count > 0
    P[:n, :, :n] = km.sas_count / np.maximum(km.sa_count, 1)[:, :, None]
    P[:n, :, n] = np.where(visited, 0.0, 1.0)
    P[n, :, n] = 1.0
    rbar = np.where(km.reward_count > 0, km.reward_sum / np.maximum(km.reward_count, 1), sink_reward)
    if bracket_unknown:
        outside = np.flatnonzero(~km.known)
        P[:n, :, n] += P[:n, :, outside].sum(axis=2)
        P[:n, :, outside] = 0.0
        P[outside] = 0.0
        P[outside, :, n] = 1.0
        rbar[outside] = sink_reward
    rewards = [RewardDist.point(float(np.clip(r, 0.0, 1.0))) for r in rbar]
    rewards.append(RewardDist.point(sink_reward))
    return Mdp(P, tuple(rewards), gamma)


def q_estimates(km: KnownModel, gamma: float, tol: float = PLANNER_TOL) -> QEstimates:
    """
    Bracketed Q estimates over all n states. The pessimistic table values
    every state outside Gamma (and every untried pair) at zero, the
    optimistic one at 1/(1-gamma), so the true Q* sits between them once
    the known rows are accurate. `plugin` keeps the unbracketed estimate
    that uses every recorded count, known or not.
    """
    if km.gammaset.size == 0:
        raise MdpError("no known states to estimate from")
    _, q_lo = value_iteration(_plugin_mdp(km, gamma, 0.0), tol)
    _, q_hi = value_iteration(_plugin_mdp(km, gamma, 1.0), tol)
    _, q_mid = value_iteration(_plugin_mdp(km, gamma, 0.0, bracket_unknown=False), tol)
    return QEstimates(q_lo[:km.n], q_hi[:km.n], km.gammaset, q_mid[:km.n])


@dataclass(frozen=True)
class BetaWitness:
    table: str
    index: tuple
    difference: float


def beta_approx_check(m: Mdp, mhat: Mdp, beta: float):
    """True when every mean reward and every transition entry differs by at most beta."""
    if m.P.shape != mhat.P.shape:
        raise MdpError(f"shape mismatch {m.P.shape} vs {mhat.P.shape}")
    if beta < 0:
        raise MdpError(f"beta must be nonnegative, got {beta}")
    dr = np.abs(m.rbar - mhat.rbar)
    if (dr > beta).any():
        s = int(np.argmax(dr > beta))
        return False, BetaWitness("R", (s,), float(dr[s]))
    dp = np.abs(m.P - mhat.P)
    if (dp > beta).any():
        idx = tuple(int(i) for i in np.argwhere(dp > beta)[0])
        return False, BetaWitness("P", idx, float(dp[idx]))
    return True, None


def perturb_mdp(m: Mdp, beta: float, rng: np.random.Generator) -> Mdp:
    """
    A beta-approximation of m: each row mixed with a random Dirichlet row at
    weight beta, each mean reward shifted by at most beta (clipped to [0, 1]).
    """
    if not 0 <= beta <= 1:
        raise MdpError(f"beta must lie in [0, 1], got {beta}")
    noise = rng.dirichlet(np.ones(m.n), size=(m.n, m.k))
    P = (1.0 - beta) * m.P + beta * noise
    P /= P.sum(axis=2, keepdims=True)
    shifts = rng.uniform(-beta, beta, size=m.n)
    rewards = tuple(RewardDist(r.kind, float(np.clip(r.param + d, 0.0, 1.0))) for r, d in zip(m.rewards, shifts))
    return Mdp(P, rewards, m.gamma)
