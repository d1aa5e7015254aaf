import numpy as np
import pytest

from mdp_core import (
    Mdp,
    MdpFormatError,
    InvalidMdp,
    MdpError,
    NonConvergence,
    RewardDist,
    StochasticPolicy,
    Trace,
    UnichainViolation,
    bellman_residual,
    epsilon_optimality_gap,
    finite_horizon_values,
    greedy_policy,
    horizon_time,
    load_mdp,
    load_trace,
    mixing_time,
    policy_evaluation,
    stationary_value_residual,
    save_mdp,
    simulate,
    split_seed,
    stationary_distribution,
    validate_mdp,
    value_iteration,
)

L, R = 0, 1


def always(action, n=3, k=2):
    return StochasticPolicy.deterministic([action] * n, k)


def sitting_trace(state, T=10, k=2):
    return Trace(np.full(T, state), np.full((T, k), 1.0 / k), np.zeros(T, dtype=int), np.zeros(T))


# -- validation and files ----------------------------------------------------

def test_validate_chain_ok(chain3):
    assert validate_mdp(chain3).ok


def test_validate_reports_row_sum(chain3):
    P = chain3.P.copy()
    P[1, 0] = [0.6, 0.6, 0.0]
    report = validate_mdp(Mdp(P, chain3.rewards, 0.9))
    assert not report.ok
    assert any("(1, 0)" in p for p in report.problems)


def test_validate_reports_discount(chain3):
    report = validate_mdp(chain3.with_gamma(1.0))
    assert not report.ok
    assert any("discount" in p for p in report.problems)


def test_invalid_mdp_rejected_by_planner(chain3):
    with pytest.raises(InvalidMdp):
        value_iteration(chain3.with_gamma(1.0))


def test_save_and_load(tmp_path, chain3):
    path = tmp_path / "chain.json"
    save_mdp(chain3, path)
    loaded = load_mdp(path)
    np.testing.assert_array_equal(loaded.P, chain3.P)
    assert loaded.rewards == chain3.rewards
    assert loaded.gamma == chain3.gamma


def test_load_names_missing_field(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"n": 2, "k": 1, "gamma": 0.5, "R": []}')
    with pytest.raises(MdpFormatError) as exc:
        load_mdp(path)
    assert exc.value.field == "P"


def test_load_accepts_capitalized_reward_kinds(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"n": 1, "k": 1, "gamma": 0.5, "P": [[[1.0]]], '
                    '"R": [{"kind": "Bernoulli", "param": 0.25}]}')
    m = load_mdp(path)
    assert m.rewards[0].kind == "bernoulli"
    assert m.rbar[0] == 0.25


# -- planning ----------------------------------------------------------------

def test_value_iteration_chain(chain3):
    V, Q = value_iteration(chain3)
    np.testing.assert_allclose(V, [9.05, 9.5, 10.0], atol=1e-8)
    assert Q[0, R] == pytest.approx(9.05, abs=1e-8)
    assert Q[0, L] == pytest.approx(8.645, abs=1e-8)


def test_value_iteration_constant_reward(chain3_half):
    V, Q = value_iteration(chain3_half)
    np.testing.assert_allclose(V, 5.0, atol=1e-8)
    np.testing.assert_allclose(Q, 5.0, atol=1e-8)


def test_value_iteration_rejects_bad_tol(chain3):
    with pytest.raises(MdpError):
        value_iteration(chain3, tol=0.0)


def test_value_iteration_with_mask_keeps_to_allowed(chain3):
    allowed = np.array([[True, False]] * 3)
    V, _ = value_iteration(chain3, allowed=allowed)
    assert V[0] == pytest.approx(5.0, abs=1e-8)


def test_degenerate_single_state():
    m = Mdp(np.ones((1, 1, 1)), (RewardDist.point(0.3),), 0.5)
    V, Q = value_iteration(m)
    assert V[0] == pytest.approx(0.6, abs=1e-8)
    assert stationary_distribution(m, StochasticPolicy.uniform(1, 1))[0] == pytest.approx(1.0)


def test_policy_evaluation_examples(chain3, chain3_half):
    V, _ = policy_evaluation(chain3, always(R))
    np.testing.assert_allclose(V, [9.05, 9.5, 10.0], atol=1e-8)
    V, _ = policy_evaluation(chain3, always(L))
    assert V[0] == pytest.approx(5.0, abs=1e-8)
    V, _ = policy_evaluation(chain3_half, StochasticPolicy.uniform(3, 2))
    np.testing.assert_allclose(V, 5.0, atol=1e-8)


def test_finite_horizon_values(chain3):
    U, plan = finite_horizon_values(chain3, 1)
    np.testing.assert_allclose(U, chain3.rbar)
    U, plan = finite_horizon_values(chain3, 3)
    assert U[0] == pytest.approx(0.5 + 0.45 + 0.81)
    assert len(plan) == 3
    assert plan[0][0] == R


def test_greedy_policy_breaks_ties_low():
    pi = greedy_policy(np.array([[1.0, 1.0, 0.5]]))
    np.testing.assert_array_equal(pi.dist, [[1.0, 0.0, 0.0]])


@pytest.mark.parametrize("eps,gamma,expected", [(0.1, 0.9, 44), (0.1, 0.5, 5), (1.0, 0.5, 1)])
def test_horizon_time(eps, gamma, expected):
    assert horizon_time(eps, gamma) == expected


@pytest.mark.parametrize("eps,gamma", [(0.0, 0.9), (0.1, 1.0), (0.1, 0.0), (20.0, 0.9)])
def test_horizon_time_out_of_range(eps, gamma):
    with pytest.raises(MdpError):
        horizon_time(eps, gamma)


def test_planner_properties_on_random_mdps(make_random_mdp):
    rng = np.random.default_rng(7)
    tol = 1e-9
    for _ in range(200):
        n, k = rng.integers(1, 7), rng.integers(1, 5)
        m = make_random_mdp(rng, n, k, float(rng.choice([0.5, 0.9])))
        V, Q = value_iteration(m, tol)
        assert bellman_residual(m, V) <= tol
        np.testing.assert_allclose(Q.max(axis=1), V, atol=2 * tol)
        assert (V >= -tol).all() and (V <= m.vmax + tol).all()


def test_reward_bump_never_lowers_values(make_random_mdp):
    rng = np.random.default_rng(11)
    for _ in range(50):
        m = make_random_mdp(rng, 4, 3, 0.9)
        s = int(rng.integers(4))
        bumped = list(m.rewards)
        bumped[s] = RewardDist.bernoulli(min(1.0, m.rewards[s].param + 0.2))
        V, _ = value_iteration(m)
        V2, _ = value_iteration(Mdp(m.P, tuple(bumped), m.gamma))
        assert (V2 >= V - 1e-8).all()


# -- stationarity and mixing ---------------------------------------------------

def test_stationary_uniform_chain(chain3):
    mu = stationary_distribution(chain3, StochasticPolicy.uniform(3, 2))
    np.testing.assert_allclose(mu, [0.5, 0.25, 0.25], atol=1e-9)


def test_stationary_absorbing_chain(chain3):
    mu = stationary_distribution(chain3, always(R))
    np.testing.assert_allclose(mu, [0.0, 0.0, 1.0], atol=1e-9)


def test_stationary_detects_two_closed_classes():
    P = np.zeros((2, 2, 2))
    P[0, :, 0] = 1.0
    P[1, :, 1] = 1.0
    m = Mdp(P, (RewardDist.point(0.0), RewardDist.point(1.0)), 0.9)
    with pytest.raises(UnichainViolation):
        stationary_distribution(m, StochasticPolicy.uniform(2, 2))


def test_mixing_time_fixed_landing_distribution():
    d = np.array([0.2, 0.5, 0.3])
    m = Mdp(np.tile(d, (3, 2, 1)), tuple(RewardDist.point(0.5) for _ in range(3)), 0.9)
    assert mixing_time(m, StochasticPolicy.uniform(3, 2), 0.1) == 1


def test_mixing_time_counts_transitions(chain3):
    # from s1 the walk needs two transitions to reach the absorbing s3
    assert mixing_time(chain3, always(R), 0.1) == 2


def test_mixing_time_is_minimal(chain3):
    pi = StochasticPolicy.uniform(3, 2)
    T = mixing_time(chain3, pi, 0.01)
    mu = stationary_distribution(chain3, pi)
    P_pi = np.einsum("sa,sat->st", pi.dist, chain3.P)

    def worst(t):
        return np.abs(np.linalg.matrix_power(P_pi, t) - mu).sum(axis=1).max()

    assert worst(T) <= 0.01
    assert worst(T - 1) > 0.01


def test_mixing_time_periodic_chain_hits_cap():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    m = Mdp(P, (RewardDist.point(0.0), RewardDist.point(1.0)), 0.9)
    with pytest.raises(NonConvergence):
        mixing_time(m, StochasticPolicy.uniform(2, 1), 0.1, cap=1000)


# -- simulation ------------------------------------------------------------------

def test_simulate_deterministic_path(chain3):
    trace = simulate(chain3, always(R), 5, seed=0)
    assert trace.states.tolist() == [0, 1, 2, 2, 2]
    assert trace.rewards.tolist() == [0.5, 0.5, 1.0, 1.0, 1.0]


def test_simulate_requires_a_step(chain3):
    with pytest.raises(MdpError):
        simulate(chain3, StochasticPolicy.uniform(3, 2), 0, seed=0)


def test_simulate_is_reproducible(make_random_mdp):
    m = make_random_mdp(np.random.default_rng(3), 5, 3, 0.9)
    a = simulate(m, StochasticPolicy.uniform(5, 3), 500, seed=42)
    b = simulate(m, StochasticPolicy.uniform(5, 3), 500, seed=42)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.rewards, b.rewards)


def test_simulate_rejects_bad_distribution(chain3):
    class Broken:
        def act(self, s):
            return np.array([0.7, 0.7])

        def observe(self, s, a, r, s_next):
            pass

    with pytest.raises(MdpError):
        simulate(chain3, Broken(), 3, seed=0)


def test_sampled_actions_have_positive_probability(make_random_mdp):
    m = make_random_mdp(np.random.default_rng(5), 4, 3, 0.9)
    pi = StochasticPolicy(np.tile([0.5, 0.0, 0.5], (4, 1)))
    trace = simulate(m, pi, 2000, seed=1)
    assert (trace.actions != 1).all()


def test_trace_jsonl(tmp_path, chain3):
    trace = simulate(chain3, StochasticPolicy.uniform(3, 2), 20, seed=9)
    path = tmp_path / "trace.jsonl"
    trace.save_jsonl(path)
    loaded = load_trace(path)
    np.testing.assert_array_equal(loaded.states, trace.states)
    np.testing.assert_array_equal(loaded.dists, trace.dists)


def test_split_seed():
    assert split_seed(5, 3) == 6
    assert len({split_seed(1234, i) for i in range(100)}) == 100


# -- metrics ---------------------------------------------------------------------

def test_gap_examples(chain3, chain3_half):
    vstar, _ = value_iteration(chain3)
    mustar = np.array([0.0, 0.0, 1.0])
    assert epsilon_optimality_gap(chain3, sitting_trace(2), vstar, mustar) == pytest.approx(0.0, abs=1e-8)
    assert epsilon_optimality_gap(chain3, sitting_trace(0), vstar, mustar) == pytest.approx(0.95, abs=1e-8)
    vhalf, _ = value_iteration(chain3_half)
    mixed = simulate(chain3_half, StochasticPolicy.uniform(3, 2), 50, seed=2)
    assert epsilon_optimality_gap(chain3_half, mixed, vhalf, mustar) == pytest.approx(0.0, abs=1e-8)


def test_gap_dimension_mismatch(chain3):
    with pytest.raises(MdpError):
        epsilon_optimality_gap(chain3, sitting_trace(0), np.zeros(2), np.ones(3) / 3)


def test_stationary_value_residual(chain3, chain3_half):
    assert stationary_value_residual(chain3_half, StochasticPolicy.uniform(3, 2)) <= 1e-10
    assert stationary_value_residual(chain3, always(R)) <= 1e-8
    assert stationary_value_residual(chain3, StochasticPolicy.uniform(3, 2)) <= 1e-8
