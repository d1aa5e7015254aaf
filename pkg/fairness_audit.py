"""
Fairness audits

Pathwise auditors for the three fairness notions (exact, approximate-choice,
approximate-action) over recorded traces, the alpha-restricted MDP and the
fair optimal policy.

Every auditor compares, at each step t and for every ordered action pair
(a, a'), the gap in true optimal quality qgap = Q*(s, a) - Q*(s, a') with the
gap in committed probability pgap = L(s, a') - L(s, a):

    exact    violation iff qgap >= -tie  and pgap > tie
    choice   violation iff qgap >= -tie  and pgap > alpha + tie
    action   violation iff qgap > alpha + tie  and pgap > tie
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from mdp_core import (
    Mdp,
    MdpError,
    PLANNER_TOL,
    StochasticPolicy,
    Trace,
    value_iteration,
)

logger = logging.getLogger("fair_mdp.fairness_audit")

TIE_TOL = float(os.getenv("FAIR_MDP_TIE_TOL", "1e-6"))
VIOLATION_CAP = int(os.getenv("FAIR_MDP_VIOLATION_CAP", "10000"))

DEFINITIONS = ("exact", "choice", "action")

# Steps audited per vectorized block; bounds the (block, k, k) scratch arrays
_BLOCK = 50_000


class AuditInputError(MdpError):
    pass


@dataclass(frozen=True)
class Violation:
    t: int
    state: int
    action: int
    other: int
    qgap: float
    pgap: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "state": self.state,
            "pair": [self.action, self.other],
            "qgap": self.qgap,
            "pgap": self.pgap,
        }


@dataclass
class FairnessReport:
    definition: str
    alpha: float
    tie_tol: float
    violation_count: int = 0
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violation_count == 0

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def summary(self) -> dict:
        return {
            "definition": self.definition,
            "alpha": self.alpha,
            "verdict": self.verdict,
            "violation_count": self.violation_count,
        }

    def to_dict(self) -> dict:
        data = self.summary()
        data["violations"] = [v.to_dict() for v in self.violations]
        return data


def _check_inputs(trace: Trace, qstar: np.ndarray, alpha: float, tie_tol: float) -> np.ndarray:
    qstar = np.asarray(qstar, dtype=float)
    if qstar.ndim != 2:
        raise AuditInputError(f"Q table must be 2-D, got shape {qstar.shape}")
    if trace.k != qstar.shape[1]:
        raise AuditInputError(f"trace has {trace.k} actions, Q table has {qstar.shape[1]}")
    if len(trace) and (trace.states.min() < 0 or trace.states.max() >= qstar.shape[0]):
        raise AuditInputError(f"trace visits states outside the Q table's {qstar.shape[0]} rows")
    if alpha < 0:
        raise AuditInputError(f"alpha must be nonnegative, got {alpha}")
    if tie_tol < 0:
        raise AuditInputError(f"tie tolerance must be nonnegative, got {tie_tol}")
    return qstar


def _violation_mask(qgap: np.ndarray, pgap: np.ndarray, definition: str, alpha: float, tie: float) -> np.ndarray:
    if definition == "exact":
        return (qgap >= -tie) & (pgap > tie)
    if definition == "choice":
        return (qgap >= -tie) & (pgap > alpha + tie)
    if definition == "action":
        return (qgap > alpha + tie) & (pgap > tie)
    raise AuditInputError(f"unknown fairness definition {definition!r}")


def _audit(trace: Trace, qstar, definition: str, alpha: float, tie_tol: float) -> FairnessReport:
    qstar = _check_inputs(trace, qstar, alpha, tie_tol)
    report = FairnessReport(definition, float(alpha), float(tie_tol))
    cap = VIOLATION_CAP
    for lo in range(0, len(trace), _BLOCK):
        states = trace.states[lo:lo + _BLOCK]
        dists = trace.dists[lo:lo + _BLOCK]
        q = qstar[states]
        qgap = q[:, :, None] - q[:, None, :]
        pgap = dists[:, None, :] - dists[:, :, None]
        mask = _violation_mask(qgap, pgap, definition, alpha, tie_tol)
        hits = np.argwhere(mask)
        report.violation_count += len(hits)
        room = cap - len(report.violations)
        for t, a, a2 in hits[:max(room, 0)]:
            report.violations.append(Violation(
                int(lo + t), int(states[t]), int(a), int(a2),
                float(qgap[t, a, a2]), float(pgap[t, a, a2]),
            ))
    if report.violation_count > len(report.violations):
        logger.debug("%s audit: %d violations, report capped at %d",
                     definition, report.violation_count, len(report.violations))
    return report


def audit_exact(trace: Trace, qstar, tie_tol: float = TIE_TOL) -> FairnessReport:
    """Exact fairness: never favour an action whose optimal quality is no higher."""
    return _audit(trace, qstar, "exact", 0.0, tie_tol)


def audit_choice(trace: Trace, qstar, alpha: float, tie_tol: float = TIE_TOL) -> FairnessReport:
    """Approximate-choice fairness: probability slack alpha on the exact rule."""
    return _audit(trace, qstar, "choice", alpha, tie_tol)


def audit_action(trace: Trace, qstar, alpha: float, tie_tol: float = TIE_TOL) -> FairnessReport:
    """Approximate-action fairness: quality slack alpha before the rule binds."""
    return _audit(trace, qstar, "action", alpha, tie_tol)


def audit(trace: Trace, qstar, definition: str, alpha: float = 0.0, tie_tol: float = TIE_TOL) -> FairnessReport:
    if definition not in DEFINITIONS:
        raise AuditInputError(f"definition must be one of {DEFINITIONS}, got {definition!r}")
    if definition == "exact":
        return audit_exact(trace, qstar, tie_tol)
    return _audit(trace, qstar, definition, alpha, tie_tol)


def delta_compliant(failures: int, runs: int, delta: float) -> bool:
    """
    Seed-level reading of "fair with probability at least 1 - delta".

    A configuration complies when the failing-seed fraction stays within
    delta + 3 * sqrt(delta * (1 - delta) / runs).
    """
    if runs < 1 or not 0 <= failures <= runs:
        raise AuditInputError(f"need 0 <= failures <= runs and runs >= 1, got {failures}/{runs}")
    if not 0 <= delta <= 1:
        raise AuditInputError(f"delta must lie in [0, 1], got {delta}")
    return failures / runs <= delta + 3.0 * math.sqrt(delta * (1.0 - delta) / runs)


# ----------------------------------------------------------------------------
# Restricted MDPs and fair optimal policies


@dataclass
class RestrictedMdp:
    """
    alpha-restricted view of `base`: only actions within alpha of the best
    optimal quality stay allowed. Action indices are the base MDP's own.
    """

    base: Mdp
    allowed: np.ndarray
    alpha: float

    def allowed_actions(self, s: int) -> list:
        return [int(a) for a in np.flatnonzero(self.allowed[s])]

    def plan(self, tol: float = PLANNER_TOL):
        return value_iteration(self.base, tol, self.allowed)


def allowed_mask(qstar: np.ndarray, alpha: float, tie_tol: float = TIE_TOL) -> np.ndarray:
    qstar = np.asarray(qstar, dtype=float)
    return qstar >= qstar.max(axis=1, keepdims=True) - alpha - tie_tol


def restrict_mdp(m: Mdp, qstar, alpha: float, tie_tol: float = TIE_TOL) -> RestrictedMdp:
    qstar = np.asarray(qstar, dtype=float)
    if qstar.shape != (m.n, m.k):
        raise AuditInputError(f"Q table shape {qstar.shape} does not match MDP ({m.n}, {m.k})")
    if alpha < 0:
        raise AuditInputError(f"alpha must be nonnegative, got {alpha}")
    allowed = allowed_mask(qstar, alpha, tie_tol)
    removed = int(allowed.size - allowed.sum())
    if removed:
        logger.debug("alpha=%.3g restriction removed %d of %d actions", alpha, removed, allowed.size)
    return RestrictedMdp(m, allowed, float(alpha))


def fair_optimal_policy(m: Mdp, qstar, tie_tol: float = TIE_TOL) -> StochasticPolicy:
    """Uniform over the optimal action set of each state."""
    qstar = np.asarray(qstar, dtype=float)
    if qstar.shape != (m.n, m.k):
        raise AuditInputError(f"Q table shape {qstar.shape} does not match MDP ({m.n}, {m.k})")
    best = allowed_mask(qstar, 0.0, tie_tol).astype(float)
    return StochasticPolicy(best / best.sum(axis=1, keepdims=True))


def deterministic_optimal_policies(qstar, tie_tol: float = TIE_TOL,
                                   limit: Optional[int] = None) -> Iterator[StochasticPolicy]:
    """Every deterministic tie-break of the optimal action sets (up to `limit`)."""
    qstar = np.asarray(qstar, dtype=float)
    best = allowed_mask(qstar, 0.0, tie_tol)
    choices = [np.flatnonzero(row) for row in best]
    for i, actions in enumerate(itertools.product(*choices)):
        if limit is not None and i >= limit:
            return
        yield StochasticPolicy.deterministic(actions, qstar.shape[1])
