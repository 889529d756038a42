import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertq.capacity import (
    RoutingPolicy,
    degraded_capacity,
    duality_gap,
    loss_capacity,
    multi_capacity_dual,
    multi_capacity_primal,
    routing_policy_violations,
    simplex_grid,
    single_capacity,
)
from expertq.model import ExpertProfile


def specialists(n):
    """n experts, each able to answer exactly one of n topics in one slot."""
    return [
        ExpertProfile.from_success_probs(i, [1.0 if x == i else 0.0 for x in range(n)])
        for i in range(n)
    ]


def generalists(n):
    """n identical experts spreading unit expertise across n topics."""
    return [ExpertProfile.from_success_probs(i, [1.0 / n] * n) for i in range(n)]


def loss_capacity_grid_oracle(p, q, epsilon, resolution=1e-3):
    """Exhaustive search over per-topic admission probabilities (2 topics).

    For each admission vector the largest feasible load is the smaller of
    the service cap 1/sum(mu p/q) and the loss cap epsilon/sum((1-mu) p).
    Independent of the bisection implementation under test.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    assert p.shape == (2,)
    axis = np.arange(0.0, 1.0 + resolution / 2, resolution)
    m0, m1 = np.meshgrid(axis, axis, indexing="ij")
    if q[0] <= 0:
        m0 = np.zeros_like(m0)
    if q[1] <= 0:
        m1 = np.zeros_like(m1)
    with np.errstate(divide="ignore"):
        service = np.zeros_like(m0)
        if q[0] > 0:
            service = service + m0 * p[0] / q[0]
        if q[1] > 0:
            service = service + m1 * p[1] / q[1]
        service_cap = np.where(service > 0, 1.0 / np.where(service > 0, service, 1.0), np.inf)
        lost = (1.0 - m0) * p[0] + (1.0 - m1) * p[1]
        loss_cap = np.where(lost > 0, epsilon / np.where(lost > 0, lost, 1.0), np.inf)
    return float(np.minimum(service_cap, loss_cap).max())


class TestSingleCapacity:
    def test_closed_form_example(self):
        assert single_capacity([0.5, 0.5], [1.0, 0.5]).lambda_star == pytest.approx(
            2 / 3, abs=1e-12
        )

    def test_perfect_expert(self):
        assert single_capacity([1.0], [1.0]).lambda_star == 1.0

    def test_unanswerable_mass_gives_zero(self):
        assert single_capacity([0.5, 0.5], [0.5, 0.0]).lambda_star == 0.0

    def test_zero_mass_topics_ignored(self):
        full = single_capacity([0.5, 0.5], [1.0, 0.5]).lambda_star
        padded = single_capacity([0.5, 0.5, 0.0], [1.0, 0.5, 0.0]).lambda_star
        assert padded == full

    @given(
        st.lists(st.integers(1, 9), min_size=2, max_size=5),
        st.data(),
    )
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_success_probability(self, weights, data):
        p = np.array(weights, dtype=float)
        p /= p.sum()
        q = np.array(
            data.draw(
                st.lists(
                    st.floats(0.05, 1.0), min_size=len(p), max_size=len(p)
                )
            )
        )
        base = single_capacity(p, q).lambda_star
        bumped = q.copy()
        topic = data.draw(st.integers(0, len(p) - 1))
        bumped[topic] = min(1.0, bumped[topic] * 1.5)
        assert single_capacity(p, bumped).lambda_star >= base - 1e-12

    def test_shifting_mass_to_slower_topic_never_helps(self):
        p = np.array([0.5, 0.5])
        q = np.array([1.0, 0.25])
        base = single_capacity(p, q).lambda_star
        shifted = single_capacity([0.4, 0.6], q).lambda_star
        assert shifted <= base + 1e-12

    @given(
        st.lists(st.integers(1, 9), min_size=2, max_size=5),
        st.data(),
    )
    @settings(max_examples=40, deadline=None)
    def test_mass_shift_monotonicity_property(self, weights, data):
        p = np.array(weights, dtype=float)
        p /= p.sum()
        q = np.array(
            data.draw(st.lists(st.floats(0.1, 1.0), min_size=len(p), max_size=len(p)))
        )
        fast = int(np.argmax(q))
        slow = int(np.argmin(q))
        shift = data.draw(st.floats(0.0, 1.0)) * p[fast]
        shifted = p.copy()
        shifted[fast] -= shift
        shifted[slow] += shift
        assert (
            single_capacity(shifted, q).lambda_star
            <= single_capacity(p, q).lambda_star + 1e-12
        )


class TestLossCapacity:
    def test_unanswerable_topic_example(self):
        result = loss_capacity([0.5, 0.5], [0.0, 0.5], 0.5)
        assert result.lambda_star == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(result.certificate.mu, [0.0, 1.0], atol=1e-9)

    def test_zero_budget_reduces_to_lossless(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            p = rng.dirichlet(np.ones(4))
            q = rng.uniform(0.1, 1.0, size=4)
            assert loss_capacity(p, q, 0.0).lambda_star == pytest.approx(
                single_capacity(p, q).lambda_star, abs=1e-12
            )

    def test_matches_admission_grid_oracle(self):
        p, q, eps = [0.5, 0.5], [1.0, 0.25], 0.1
        oracle = loss_capacity_grid_oracle(p, q, eps, resolution=1e-3)
        result = loss_capacity(p, q, eps)
        assert result.lambda_star == pytest.approx(oracle, abs=5e-3)
        # value derived independently by solving the two binding
        # constraints for the partial-admission topic
        assert result.lambda_star == pytest.approx(0.56, abs=1e-9)

    def test_oracle_agreement_on_random_two_topic_problems(self):
        rng = np.random.default_rng(17)
        for _ in range(6):
            p = rng.dirichlet(np.ones(2))
            q = rng.uniform(0.2, 1.0, size=2)
            eps = float(rng.uniform(0.01, 0.4))
            oracle = loss_capacity_grid_oracle(p, q, eps, resolution=1e-3)
            assert loss_capacity(p, q, eps).lambda_star == pytest.approx(
                oracle, abs=5e-3
            )

    def test_monotone_in_budget_and_dominates_lossless(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            p = rng.dirichlet(np.ones(3))
            q = rng.uniform(0.0, 1.0, size=3)
            lossless = single_capacity(p, q).lambda_star
            budgets = sorted(rng.uniform(0.0, 0.5, size=3))
            values = [loss_capacity(p, q, b).lambda_star for b in budgets]
            assert values == sorted(values)
            for v in values:
                assert v >= lossless - 1e-9

    def test_certificate_satisfies_both_constraints(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            p = rng.dirichlet(np.ones(4))
            q = rng.uniform(0.0, 1.0, size=4)
            q[rng.integers(0, 4)] = 0.0
            eps = float(rng.uniform(0.05, 0.5))
            result = loss_capacity(p, q, eps)
            mu = result.certificate.mu
            lam = result.lambda_star
            keep = q > 0
            service = lam * float(np.sum(mu[keep] * p[keep] / q[keep]))
            lost = lam * float(np.sum((1.0 - mu) * p))
            assert service <= 1.0 + 1e-9
            assert lost <= eps + 1e-9
            assert np.all(mu[q <= 0] == 0.0)

    def test_binding_optimum_satisfies_combined_equality(self):
        # when both constraints bind, sum_x mu p (q + eps)/q == 1
        for p, q, eps in (
            ([0.5, 0.5], [1.0, 0.25], 0.1),
            ([0.5, 0.5], [0.0, 0.5], 0.5),
            ([0.3, 0.7], [0.9, 0.3], 0.15),
        ):
            p = np.asarray(p, dtype=float)
            q = np.asarray(q, dtype=float)
            result = loss_capacity(p, q, eps)
            mu, lam = result.certificate.mu, result.lambda_star
            keep = q > 0
            service = lam * float(np.sum(mu[keep] * p[keep] / q[keep]))
            lost = lam * float(np.sum((1.0 - mu) * p))
            assert service == pytest.approx(1.0, abs=1e-6)
            assert lost == pytest.approx(eps, abs=1e-6)
            combined = float(np.sum(mu[keep] * p[keep] * (q[keep] + eps) / q[keep]))
            assert combined == pytest.approx(1.0, abs=1e-6)

    def test_all_unanswerable_caps_at_budget(self):
        result = loss_capacity([0.5, 0.5], [0.0, 0.0], 0.25)
        assert result.lambda_star == pytest.approx(0.25, abs=1e-9)
        assert np.all(result.certificate.mu == 0.0)

    def test_negative_budget_rejected(self):
        with pytest.raises(ValueError):
            loss_capacity([1.0], [1.0], -0.1)


class TestDegradedCapacity:
    def test_no_error_is_identity(self):
        assert degraded_capacity([0.5, 0.5], [1.0, 0.5], 1.0) == pytest.approx(
            2 / 3, abs=1e-12
        )

    def test_half_error_halves_capacity(self):
        assert degraded_capacity([0.5, 0.5], [1.0, 0.5], 0.5) == pytest.approx(
            1 / 3, abs=1e-12
        )

    def test_scales_linearly(self):
        rng = np.random.default_rng(2)
        p = rng.dirichlet(np.ones(3))
        q_hat = rng.uniform(0.2, 1.0, size=3)
        base = single_capacity(p, q_hat).lambda_star
        for gamma in (0.3, 0.8, 1.0):
            value = degraded_capacity(p, q_hat, gamma)
            assert value == pytest.approx(gamma * base, abs=1e-12)
            assert value <= base + 1e-12
            assert (value == base) == (gamma == 1.0)

    def test_gamma_out_of_range(self):
        for gamma in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                degraded_capacity([1.0], [1.0], gamma)


class TestSimplexGrid:
    def test_rows_sum_to_one(self):
        grid = simplex_grid(3, 0.1)
        assert np.allclose(grid.sum(axis=1), 1.0)
        assert grid.shape[0] == 66  # compositions of 10 into 3 parts

    def test_single_coordinate(self):
        assert np.array_equal(simplex_grid(1, 0.25), [[1.0]])


class TestMultiCapacity:
    def test_identical_generalists(self):
        p = [1 / 3] * 3
        experts = generalists(3)
        assert multi_capacity_primal(p, experts, 1e-3).lambda_star == pytest.approx(
            1.0, abs=1e-2
        )
        assert multi_capacity_dual(p, experts).lambda_star == pytest.approx(
            1.0, abs=1e-9
        )

    def test_diverse_specialists(self):
        p = [1 / 3] * 3
        experts = specialists(3)
        assert multi_capacity_primal(p, experts, 1e-3).lambda_star == pytest.approx(
            3.0, abs=1e-2
        )
        dual = multi_capacity_dual(p, experts)
        assert dual.lambda_star == pytest.approx(3.0, abs=1e-9)
        assert dual.certificate.dual_mu == pytest.approx(1 / 3, abs=1e-9)
        # the only finite-ratio assignment routes each topic to its specialist
        assert np.allclose(dual.certificate.s, np.eye(3), atol=1e-9)

    def test_single_expert_reduces_to_closed_form(self):
        p = [0.5, 0.5]
        expert = [ExpertProfile.from_success_probs(0, [1.0, 0.5])]
        closed = single_capacity(p, expert[0].success_prob).lambda_star
        assert multi_capacity_primal(p, expert, 1e-4).lambda_star == pytest.approx(
            closed, rel=1e-3
        )
        dual = multi_capacity_dual(p, expert)
        assert dual.lambda_star == pytest.approx(closed, abs=1e-9)
        assert np.allclose(dual.certificate.s, [[1.0, 1.0]])

    def test_unanswerable_mass(self):
        experts = [ExpertProfile.from_success_probs(0, [1.0, 0.0])]
        assert multi_capacity_primal([0.5, 0.5], experts, 0.1).lambda_star == 0.0
        with pytest.raises(ValueError):
            multi_capacity_primal([0.5, 0.5], experts, 0.1, strict=True)
        with pytest.raises(ValueError, match="infeasible"):
            multi_capacity_dual([0.5, 0.5], experts)

    def test_primal_alpha_is_a_distribution(self):
        result = multi_capacity_primal([0.25, 0.75], generalists(2), 1e-2)
        alpha = result.certificate.alpha
        assert alpha.shape == (2,)
        assert float(alpha.sum()) == pytest.approx(1.0, abs=1e-9)

    def test_adding_an_expert_never_hurts(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            n = int(rng.integers(2, 4))
            n_topics = int(rng.integers(2, 5))
            p = rng.dirichlet(np.ones(n_topics))
            experts = [
                ExpertProfile.from_success_probs(i, rng.uniform(0.2, 1.0, n_topics))
                for i in range(n)
            ]
            combined = multi_capacity_dual(p, experts).lambda_star
            for expert in experts:
                alone = single_capacity(p, expert.success_prob).lambda_star
                assert combined >= alone - 1e-6

    def test_strong_duality_on_random_instances(self):
        rng = np.random.default_rng(29)
        for _ in range(8):
            n = int(rng.integers(1, 4))
            n_topics = int(rng.integers(2, 5))
            p = rng.dirichlet(np.ones(n_topics))
            experts = [
                ExpertProfile.from_success_probs(i, rng.uniform(0.5, 1.0, n_topics))
                for i in range(n)
            ]
            lam = multi_capacity_dual(p, experts).lambda_star
            assert duality_gap(p, experts, 1e-3) <= 10 * 1e-3 * lam

    def test_duality_gap_examples(self):
        assert duality_gap([1 / 3] * 3, specialists(3), 1e-3) <= 0.03
        assert duality_gap([1 / 3] * 3, generalists(3), 1e-3) <= 0.01
        rng = np.random.default_rng(3)
        p = rng.dirichlet(np.ones(3))
        solo = [ExpertProfile.from_success_probs(0, rng.uniform(0.3, 1.0, 3))]
        assert duality_gap(p, solo, 1e-4) <= 1e-6

    def test_scale_covariance(self):
        p = np.array([0.2, 0.8])
        experts = generalists(2)
        base = multi_capacity_dual(p, experts).lambda_star
        scaled = multi_capacity_dual(2.0 * p, experts).lambda_star
        assert scaled == pytest.approx(base / 2.0, rel=1e-9)


class TestRoutingPolicyValidation:
    def test_valid_policy_passes(self):
        q = np.array([[1.0, 0.5], [0.5, 1.0]])
        policy = RoutingPolicy(s=[[0.7, 0.2], [0.3, 0.8]], alpha=[0.4, 0.6])
        assert routing_policy_violations(policy, q) == []

    def test_bad_column_sum_flagged(self):
        q = np.ones((2, 2))
        policy = RoutingPolicy(s=[[0.7, 0.2], [0.2, 0.8]])
        assert any("sums" in v for v in routing_policy_violations(policy, q))

    def test_mass_on_skill_less_expert_flagged(self):
        q = np.array([[1.0, 0.0], [1.0, 1.0]])
        policy = RoutingPolicy(s=[[0.5, 0.5], [0.5, 0.5]])
        violations = routing_policy_violations(policy, q)
        assert any("zero success" in v for v in violations)

    def test_unanswerable_topics_exempt(self):
        q = np.array([[1.0, 0.0], [1.0, 0.0]])
        policy = RoutingPolicy(s=[[1.0, 0.5], [0.0, 0.5]])
        assert routing_policy_violations(policy, q) == []

    def test_alpha_must_be_distribution(self):
        q = np.ones((2, 2))
        policy = RoutingPolicy(alpha=[0.8, 0.8])
        assert any("alpha" in v for v in routing_policy_violations(policy, q))
