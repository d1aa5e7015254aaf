import numpy as np
import pytest

from estimation import (
    KnownModel,
    MalformedTrajectory,
    Thresholds,
    Trajectory,
    UnvisitedPair,
    beta_approx_check,
    empirical_model,
    known_thresholds,
    packnown_beta,
    perturb_mdp,
    q_estimates,
)
from mdp_core import Mdp, MdpError, MdpFormatError, RewardDist, split_seed, value_iteration

L, R = 0, 1


def one_step(s, a, r, s_next):
    return Trajectory([s], [a], [r], s_next)


def feed_all_pairs(km, m, skip=()):
    """One single-step trajectory per (s, a) of a deterministic MDP."""
    for s in range(m.n):
        for a in range(m.k):
            if (s, a) in skip:
                continue
            km.record_trajectory(one_step(s, a, float(m.rbar[s]), int(m.P[s, a].argmax())))


# -- thresholds -------------------------------------------------------------

def test_formula_thresholds():
    th = known_thresholds(n=2, k=2, H=2, alpha=0.5, eps=0.5, gamma=0.5, delta=0.5)
    assert (th.m1, th.m2, th.mq) == (1420, 45427, 90854)
    assert th.mode == "formula"


def test_scale_multiplies():
    base = known_thresholds(2, 2, 2, 0.5, 0.5, 0.5, 0.5)
    half = known_thresholds(2, 2, 2, 0.5, 0.5, 0.5, 0.5, scale=0.5)
    assert half.m2 == pytest.approx(base.m2 / 2, abs=1)


@pytest.mark.parametrize("kwargs", [
    {"scale": 0.0},
    {"alpha": 0.0},
    {"delta": 1.0},
    {"gamma": 1.0},
])
def test_threshold_errors(kwargs):
    args = {"n": 2, "k": 2, "H": 2, "alpha": 0.5, "eps": 0.5, "gamma": 0.5, "delta": 0.5}
    args.update(kwargs)
    with pytest.raises(MdpError):
        known_thresholds(**args)


def test_threshold_overflow_asks_for_override():
    with pytest.raises(MdpError, match="override"):
        known_thresholds(10, 10, 400, 0.1, 0.1, 0.9, 0.1)


def test_override():
    th = Thresholds.override(200)
    assert (th.m1, th.m2, th.mq, th.mode) == (200, 200, 200, "override")
    with pytest.raises(MdpError):
        Thresholds(0, 1, 1)


def test_packnown_beta():
    assert packnown_beta(0.1, 0.3, 2, 2) == pytest.approx(0.01 / 64)


# -- counts and the known set -----------------------------------------------

def test_root_crosses_threshold():
    km = KnownModel(3, 2, Thresholds.override(3))
    traj = Trajectory([0, 1], [R, R], [0.5, 0.5], 2)
    assert km.record_trajectory(traj) == []
    assert km.record_trajectory(traj) == []
    assert km.record_trajectory(traj) == [0]
    assert km.is_known(0) and not km.is_known(1)
    assert km.gammaset.tolist() == [0]
    # non-root steps feed counts but not trajectory_count
    assert km.trajectory_count.tolist() == [3, 0, 0]
    assert km.sa_count[1, R] == 3
    assert km.sas_count[1, R, 2] == 3
    assert km.record_trajectory(traj) == []


def test_counts_are_consistent():
    rng = np.random.default_rng(0)
    km = KnownModel(4, 3, Thresholds.override(5))
    for _ in range(200):
        states = rng.integers(0, 4, size=6)
        km.record_trajectory(Trajectory(states, rng.integers(0, 3, size=6), rng.random(6), int(rng.integers(4))))
    np.testing.assert_array_equal(km.sas_count.sum(axis=2), km.sa_count)
    assert km.reward_count.sum() == 1200
    assert set(km.gammaset) == set(np.flatnonzero(km.trajectory_count >= 5))


@pytest.mark.parametrize("traj", [
    Trajectory([], [], [], 0),
    Trajectory([0, 1], [0], [0.5, 0.5], 1),
    Trajectory([0], [0], [1.5], 1),
    Trajectory([0], [2], [0.5], 1),
    Trajectory([0], [0], [0.5], 5),
])
def test_malformed_trajectories(traj):
    km = KnownModel(3, 2, Thresholds.override(2))
    with pytest.raises(MalformedTrajectory):
        km.record_trajectory(traj)


def test_horizon_is_enforced():
    km = KnownModel(3, 2, Thresholds.override(2), horizon=2)
    with pytest.raises(MalformedTrajectory):
        km.record_trajectory(one_step(0, 0, 0.5, 1))
    km.record_trajectory(Trajectory([0, 1], [0, 0], [0.5, 0.5], 0))


def test_version_moves_with_counts():
    km = KnownModel(2, 2, Thresholds.override(1))
    before = km.version
    km.record_trajectory(one_step(0, 1, 0.0, 1))
    assert km.version > before


def test_merge_sums_counts():
    a = KnownModel(3, 2, Thresholds.override(2))
    b = KnownModel(3, 2, Thresholds.override(2))
    a.record_trajectory(one_step(0, R, 0.5, 1))
    b.record_trajectory(one_step(0, L, 0.5, 0))
    merged = a.merge(b)
    assert merged.trajectory_count[0] == 2
    assert merged.gammaset.tolist() == [0]
    assert merged.sa_count[0].tolist() == [1, 1]
    with pytest.raises(MdpError):
        a.merge(KnownModel(4, 2, Thresholds.override(2)))


def test_snapshot_restores_model(chain3):
    km = KnownModel(3, 2, Thresholds.override(1))
    feed_all_pairs(km, chain3, skip={(2, R)})
    restored = KnownModel.from_dict(km.to_dict())
    np.testing.assert_array_equal(restored.sas_count, km.sas_count)
    np.testing.assert_array_equal(restored.sa_count, km.sa_count)
    assert restored.gammaset.tolist() == km.gammaset.tolist()
    with pytest.raises(MdpFormatError):
        KnownModel.from_dict({"n": 3})


def test_snapshot_gammaset_must_match_counts():
    km = KnownModel(3, 2, Thresholds.override(2))
    km.record_trajectory(one_step(0, L, 0.5, 0))
    data = km.to_dict()
    data["gammaset"] = [0]
    with pytest.raises(MdpFormatError):
        KnownModel.from_dict(data)
    km.record_trajectory(one_step(0, R, 0.5, 1))
    data = km.to_dict()
    assert data["gammaset"] == [0]
    data["gammaset"] = []
    with pytest.raises(MdpFormatError):
        KnownModel.from_dict(data)
    data["gammaset"] = [0, 7]
    with pytest.raises(MdpFormatError):
        KnownModel.from_dict(data)


def test_bernoulli_reward_mean_concentrates():
    hits = 0
    for i in range(20):
        rng = np.random.default_rng(split_seed(0, i))
        km = KnownModel(1, 1, Thresholds.override(1))
        km.record_trajectory(one_step(0, 0, float(rng.random() < 0.5), 0))
        for r in rng.random(9_999) < 0.5:
            km.record_transition(0, 0, float(r), 0)
        hits += abs(empirical_model(km, 0.9).rbar[0] - 0.5) <= 0.02
    assert hits >= 19


def test_transition_rows_concentrate_in_l1():
    p = np.array([0.5, 0.3, 0.2])
    N, delta = 200, 0.1
    bound = np.sqrt(2 * len(p) * np.log(2 / delta) / N)
    within = 0
    for i in range(1000):
        rng = np.random.default_rng(split_seed(1, i))
        nexts = rng.choice(len(p), size=N, p=p)
        km = KnownModel(3, 1, Thresholds.override(1))
        km.record_trajectory(one_step(0, 0, 0.0, int(nexts[0])))
        for s_next in nexts[1:]:
            km.record_transition(0, 0, 0.0, int(s_next))
        within += np.abs(empirical_model(km, 0.9).P[0, 0] - p).sum() <= bound
    assert within >= (1 - delta) * 1000


# -- empirical model and plug-in estimates ----------------------------------

def test_empirical_model_rows(chain3):
    km = KnownModel(3, 2, Thresholds.override(1))
    feed_all_pairs(km, chain3)
    em = empirical_model(km, 0.9)
    assert em.gammaset.tolist() == [0, 1, 2]
    np.testing.assert_allclose(em.P, chain3.P)
    np.testing.assert_allclose(em.rbar, chain3.rbar)
    assert (em.n, em.k) == (3, 2)


def test_empirical_model_needs_every_action(chain3):
    km = KnownModel(3, 2, Thresholds.override(1))
    feed_all_pairs(km, chain3, skip={(2, R)})
    with pytest.raises(UnvisitedPair) as info:
        empirical_model(km, 0.9)
    assert (info.value.state, info.value.action) == (2, R)


def test_q_estimates_exact_when_fully_sampled(chain3):
    km = KnownModel(3, 2, Thresholds.override(1))
    feed_all_pairs(km, chain3)
    est = q_estimates(km, 0.9)
    _, qstar = value_iteration(chain3)
    np.testing.assert_allclose(est.pessimistic, qstar, atol=1e-6)
    np.testing.assert_allclose(est.optimistic, qstar, atol=1e-6)


def test_q_estimates_bracket_untried_pairs(chain3):
    km = KnownModel(3, 2, Thresholds.override(1))
    feed_all_pairs(km, chain3, skip={(2, R)})
    est = q_estimates(km, 0.9)
    _, qstar = value_iteration(chain3)
    assert (est.pessimistic <= qstar + 1e-6).all()
    assert (qstar <= est.optimistic + 1e-6).all()
    assert est.optimistic[2, R] - est.pessimistic[2, R] > 1.0


def test_q_estimates_bracket_states_outside_gamma(chain3):
    km = KnownModel(3, 2, Thresholds.override(3))
    km.record_trajectory(Trajectory([0, 1], [R, R], [0.5, 0.5], 2))
    km.record_trajectory(Trajectory([0, 0], [L, R], [0.5, 0.5], 1))
    km.record_trajectory(Trajectory([0, 1], [R, L], [0.5, 0.5], 0))
    assert km.gammaset.tolist() == [0]
    est = q_estimates(km, 0.9)
    # Q[s, L], Q[s, R]: s2 is worth 0 below and 1/(1-gamma) above
    np.testing.assert_allclose(est.pessimistic[0], [5.0, 0.5], atol=1e-6)
    np.testing.assert_allclose(est.optimistic[0], [9.05, 9.5], atol=1e-6)
    np.testing.assert_allclose(est.pessimistic[1:], 0.0, atol=1e-9)
    np.testing.assert_allclose(est.optimistic[1:], 10.0, atol=1e-6)
    _, qstar = value_iteration(chain3)
    assert (est.pessimistic[0] <= qstar[0] + 1e-6).all()
    assert (qstar[0] <= est.optimistic[0] + 1e-6).all()
    assert est.plugin.shape == (3, 2)


def test_q_estimates_need_known_states():
    with pytest.raises(MdpError):
        q_estimates(KnownModel(2, 2, Thresholds.override(1)), 0.9)


def test_sampled_estimates_close_to_optimal():
    P = np.array([[[0.8, 0.2], [0.3, 0.7]], [[0.5, 0.5], [0.1, 0.9]]])
    m = Mdp(P, (RewardDist.bernoulli(0.2), RewardDist.bernoulli(0.9)), 0.7)
    rng = np.random.default_rng(9)
    km = KnownModel(2, 2, Thresholds.override(1))
    for s in range(2):
        for a in range(2):
            nexts = rng.choice(2, size=20_000, p=P[s, a])
            rewards = rng.random(20_000) < m.rbar[s]
            for r, s_next in zip(rewards, nexts):
                km.record_trajectory(one_step(s, a, float(r), int(s_next)))
    est = q_estimates(km, 0.7)
    _, qstar = value_iteration(m)
    assert np.abs(est.pessimistic - qstar).max() < 0.15


# -- beta approximation -----------------------------------------------------

def test_beta_check_on_self(chain3):
    assert beta_approx_check(chain3, chain3, 0.0) == (True, None)


def test_perturbation_stays_within_beta(make_random_mdp):
    rng = np.random.default_rng(4)
    m = make_random_mdp(rng, 4, 2, 0.8)
    mhat = perturb_mdp(m, 0.05, rng)
    ok, witness = beta_approx_check(m, mhat, 0.05 + 1e-12)
    assert ok and witness is None
    ok, witness = beta_approx_check(m, mhat, 1e-6)
    assert not ok
    assert witness.table in ("R", "P") and witness.difference > 1e-6


def test_beta_check_errors(chain3):
    with pytest.raises(MdpError):
        beta_approx_check(chain3, chain3, -0.1)
    other = Mdp(np.ones((1, 2, 1)), (RewardDist.point(0.5),), 0.9)
    with pytest.raises(MdpError):
        beta_approx_check(chain3, other, 0.1)
    with pytest.raises(MdpError):
        perturb_mdp(chain3, 1.5, np.random.default_rng(0))
