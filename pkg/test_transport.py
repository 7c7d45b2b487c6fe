import time

import numpy as np
import pytest
import torch

from craniopy.errors import ShapeError
from craniopy.transport import (
    cosine_cost,
    entropic_objective,
    entropic_plan_limit,
    ot_loss,
    ot_similarity,
    sinkhorn,
    sinkhorn_plain,
    solve,
    uniform_marginals,
    write_plan_csv,
)


def t(array):
    return torch.as_tensor(np.asarray(array), dtype=torch.float64)


def random_feasible_2x2(rng, count):
    """Plans with uniform marginals: [[a, 0.5 - a], [0.5 - a, a]], a in [0, 0.5]."""
    a = rng.uniform(0.0, 0.5, size=count)
    return np.stack([np.stack([a, 0.5 - a], -1), np.stack([0.5 - a, a], -1)], axis=-2)


class TestCosineCost:
    @pytest.mark.parametrize("b, expected", [([1.0, 0.0], 0.0), ([0.0, 1.0], 1.0), ([-1.0, 0.0], 2.0)])
    def test_unit_cases(self, b, expected):
        torch.testing.assert_close(cosine_cost(t([[1.0, 0.0]]), t([b])), t([[expected]]))

    def test_zero_row_costs_one(self, rng):
        cost = cosine_cost(t([[0.0, 0.0, 0.0]]), t(rng.standard_normal((4, 3))))
        torch.testing.assert_close(cost, torch.ones(1, 4, dtype=torch.float64))

    def test_range(self, rng):
        cost = cosine_cost(t(rng.standard_normal((6, 5))), t(rng.standard_normal((7, 5))))
        assert tuple(cost.shape) == (6, 7)
        assert torch.all(cost >= -1e-12) and torch.all(cost <= 2 + 1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_cost(torch.zeros(2, 3), torch.zeros(2, 4))


class TestSinkhorn:
    def test_zero_cost_is_uniform(self):
        transport = sinkhorn(torch.zeros(2, 2, dtype=torch.float64))
        torch.testing.assert_close(transport.plan, torch.full((2, 2), 0.25, dtype=torch.float64))

    def test_small_epsilon_recovers_permutation(self):
        plan = sinkhorn(t([[0.0, 1.0], [1.0, 0.0]]), epsilon=0.01).plan
        np.testing.assert_allclose(plan.numpy(), [[0.5, 0.0], [0.0, 0.5]], atol=1e-3)

    def test_matches_plain_domain(self):
        cost = t([[0.0, 1.0], [1.0, 0.0]])
        log_plan = sinkhorn(cost, epsilon=0.1, iters=80).plan
        torch.testing.assert_close(log_plan, sinkhorn_plain(cost, epsilon=0.1, iters=500), rtol=0, atol=1e-8)

    def test_plain_domain_agrees_on_random_costs(self, rng):
        cost = t(rng.uniform(0, 2, size=(5, 7)))
        torch.testing.assert_close(
            sinkhorn(cost, epsilon=0.5, iters=50).plan, sinkhorn_plain(cost, epsilon=0.5, iters=500), rtol=0, atol=1e-10
        )

    def test_marginals_on_random_costs(self, rng):
        start = time.perf_counter()
        costs = t(rng.uniform(0, 2, size=(50, 16, 16)))
        transport = sinkhorn(costs, epsilon=0.1, iters=80)
        assert transport.marginal_error() <= 1e-6
        assert torch.all(transport.plan >= 0)
        torch.testing.assert_close(transport.plan.sum(dim=(-2, -1)), torch.ones(50, dtype=torch.float64))
        assert time.perf_counter() - start < 5

    def test_marginals_hold_for_larger_epsilon(self, rng):
        for epsilon in (0.05, 0.2, 1.0):
            transport = sinkhorn(t(rng.uniform(0, 2, size=(16, 16))), epsilon=epsilon)
            assert transport.marginal_error() <= 1e-6

    @pytest.mark.parametrize("epsilon", [0.01, 0.05, 0.1])
    def test_near_deterministic_costs_converge(self, epsilon):
        # alternating updates alone close this gap only like 1/iters
        transport = sinkhorn(t([[0.0, 0.0], [0.0, 2.0]]), epsilon=epsilon)
        assert transport.marginal_error() <= 1e-9

    def test_non_uniform_marginals(self, rng):
        mu = t([0.2, 0.3, 0.5])
        nu = t([0.6, 0.4])
        transport = sinkhorn(t(rng.uniform(0, 2, size=(3, 2))), mu, nu, epsilon=0.2, iters=200)
        torch.testing.assert_close(transport.plan.sum(dim=-1), mu, rtol=0, atol=1e-9)
        torch.testing.assert_close(transport.plan.sum(dim=-2), nu, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("shift", [-1.0, 0.5, 3.0])
    def test_constant_shift(self, rng, shift):
        cost = t(rng.uniform(0, 2, size=(6, 6)))
        plan = sinkhorn(cost).plan
        shifted = sinkhorn(cost + shift).plan
        torch.testing.assert_close(shifted, plan, rtol=0, atol=1e-8)
        assert abs(float(ot_loss(plan, cost + shift) - ot_loss(plan, cost)) - shift) <= 1e-8

    def test_permutation_equivariance(self, rng):
        a, b = t(rng.standard_normal((5, 4))), t(rng.standard_normal((6, 4)))
        perm = torch.as_tensor(rng.permutation(6))
        plan = sinkhorn(cosine_cost(a, b)).plan
        torch.testing.assert_close(sinkhorn(cosine_cost(a, b[perm])).plan, plan[:, perm])

    def test_large_epsilon_tends_to_product(self, rng):
        mu, nu = uniform_marginals(torch.zeros(16, 16, dtype=torch.float64))
        plan = sinkhorn(t(rng.uniform(0, 2, size=(16, 16))), epsilon=100.0).plan
        torch.testing.assert_close(plan, entropic_plan_limit(mu, nu), rtol=0, atol=1e-4)

    def test_optimality_against_random_plans(self, rng):
        start = time.perf_counter()
        epsilon = 0.1
        candidates = t(random_feasible_2x2(rng, 10_000))
        for _ in range(20):
            cost = t(rng.uniform(0, 2, size=(2, 2)))
            best = entropic_objective(sinkhorn(cost, epsilon=epsilon).plan, cost, epsilon)
            sampled = entropic_objective(candidates, cost.expand_as(candidates), epsilon)
            assert float(best) <= float(sampled.min()) + 1e-12
        assert time.perf_counter() - start < 10

    def test_early_exit(self, rng):
        transport = sinkhorn(t(rng.uniform(0, 2, size=(8, 8))), epsilon=0.5, iters=500, tol=1e-9)
        assert transport.marginal_error() < 1e-9

    @pytest.mark.parametrize(
        "kwargs, message",
        [({"epsilon": 0.0}, "epsilon"), ({"iters": 0}, "iteration"), ({"mu": t([0.5, 0.6])}, "sum to 1"),
         ({"nu": t([1.0, 0.0])}, "strictly positive")],
    )
    def test_invalid_arguments(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            sinkhorn(torch.zeros(2, 2, dtype=torch.float64), **kwargs)

    def test_gradients_through_unrolled_iterations(self, rng):
        a = t(rng.standard_normal((3, 4))).requires_grad_()
        b = t(rng.standard_normal((4, 4))).requires_grad_()

        def transport_cost(x, y):
            plan, cost = solve(x, y, epsilon=0.2, iters=15)
            return ot_loss(plan.plan, cost)

        assert torch.autograd.gradcheck(transport_cost, (a, b), eps=1e-6, atol=1e-7, rtol=1e-4)


class TestOtScores:
    def test_zero_cost(self):
        plan = torch.full((2, 2), 0.25, dtype=torch.float64)
        assert float(ot_similarity(plan, torch.zeros(2, 2, dtype=torch.float64))) == 0.0

    def test_uniform_plan(self):
        plan = torch.full((2, 2), 0.25, dtype=torch.float64)
        assert float(ot_similarity(plan, t([[0.0, 1.0], [1.0, 0.0]]))) == pytest.approx(-0.5)

    def test_identity_plan_on_zero_diagonal(self):
        assert float(ot_loss(t(np.eye(3) / 3), t(1 - np.eye(3)))) == 0.0

    def test_loop_oracle(self, rng):
        plan, cost = rng.uniform(size=(3, 3)), rng.uniform(0, 2, size=(3, 3))
        expected = sum(plan[i, j] * cost[i, j] for i in range(3) for j in range(3))
        assert float(ot_loss(t(plan), t(cost))) == pytest.approx(expected, abs=1e-14)
        assert float(ot_similarity(t(plan), t(cost))) == pytest.approx(-expected, abs=1e-14)

    def test_unsquashed_at_the_cost_bound(self):
        plan = torch.full((2, 2), 0.25, dtype=torch.float64)
        assert float(ot_similarity(plan, torch.full((2, 2), 2.0, dtype=torch.float64))) == -2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ot_loss(torch.zeros(2, 2), torch.zeros(2, 3))


class TestSolve:
    def test_envelope_plan_carries_no_graph(self, rng):
        a = t(rng.standard_normal((3, 4))).requires_grad_()
        b = t(rng.standard_normal((3, 4)))
        transport, cost = solve(a, b, envelope=True)
        assert not transport.plan.requires_grad
        assert cost.requires_grad
        exact, _ = solve(a, b)
        torch.testing.assert_close(transport.plan, exact.plan.detach())

    def test_plan_csv(self, tmp_path, rng):
        plan = sinkhorn(t(rng.uniform(0, 2, size=(2, 3)))).plan
        path = tmp_path / "plan.csv"
        write_plan_csv(path, plan)
        lines = path.read_text().splitlines()
        assert lines[0] == "skull_landmark,face_0,face_1,face_2"
        assert len(lines) == 3
        assert float(lines[1].split(",")[1]) == pytest.approx(float(plan[0, 0]), rel=1e-9)
