import math

import numpy as np
import pytest

from stlmimic.policy import (
    ControlBox,
    PolicyCell,
    PolicyParams,
    PolicyShape,
    init_policy,
    policy_step_np,
    zero_hidden,
)
from stlmimic.tape import ParamVector, Value, backward, finite_diff_check


def zero_params(n=3, h=4, m=2):
    return PolicyParams(
        w_in=np.zeros((h, n)),
        w_rec=np.zeros((h, h)),
        b_h=np.zeros(h),
        w_out=np.zeros((m, h)),
        b_out=np.zeros(m),
    )


BOX = ControlBox((-1.0, 0.0), (1.0, 2.0))


class TestStep:
    def test_zero_weights_give_box_midpoint(self):
        params = zero_params()
        u, h = policy_step_np(params, np.zeros(3), zero_hidden(params), BOX)
        assert np.allclose(u, [0.0, 1.0])

    def test_saturation_approaches_bounds(self):
        params = zero_params()
        params.b_out = np.array([50.0, -50.0])
        u, _ = policy_step_np(params, np.zeros(3), zero_hidden(params), BOX)
        assert u[0] == pytest.approx(1.0, abs=1e-9)
        assert u[1] == pytest.approx(0.0, abs=1e-9)
        assert BOX.lo[0] < u[0] <= BOX.hi[0] and BOX.lo[1] <= u[1] < BOX.hi[1]

    def test_deterministic(self):
        params = init_policy(PolicyShape(3, 8, 2), seed=5)
        x = np.array([0.3, -0.2, 0.9])
        h = np.full(8, 0.1)
        u1, h1 = policy_step_np(params, x, h, BOX)
        u2, h2 = policy_step_np(params, x, h, BOX)
        assert np.array_equal(u1, u2) and np.array_equal(h1, h2)

    def test_control_always_interior(self):
        rng = np.random.default_rng(7)
        params = init_policy(PolicyShape(3, 8, 2), seed=1)
        h = zero_hidden(params)
        for _ in range(200):
            u, h = policy_step_np(params, rng.uniform(-5, 5, 3), h, BOX)
            assert np.all(u > BOX.lo) and np.all(u < BOX.hi)

    def test_history_dependence(self):
        # Integrator-style cell: hidden state accumulates past inputs, so
        # the same current input under different histories acts differently.
        params = zero_params(n=1, h=1, m=1)
        params.w_in = np.array([[1.0]])
        params.w_rec = np.array([[1.0]])
        params.w_out = np.array([[1.0]])
        box = ControlBox((-1.0,), (1.0,))
        h = np.zeros(1)
        for x in (0.9, 0.9):  # history A: large past inputs
            u_a, h = policy_step_np(params, np.array([x]), h, box)
        h2 = np.zeros(1)
        for x in (-0.9, 0.9):  # history B: same final input
            u_b, h2 = policy_step_np(params, np.array([x]), h2, box)
        assert abs(u_a[0] - u_b[0]) > 1e-3

    def test_cell_matches_numpy_step(self):
        params = init_policy(PolicyShape(3, 6, 2), seed=11)
        cell = PolicyCell(params, BOX)
        x = [0.25, -0.5, 0.75]
        h_np = np.full(6, 0.05)
        u_np, h1_np = policy_step_np(params, np.array(x), h_np, BOX)
        u_g, h1_g = cell.step(x, list(h_np))
        assert np.allclose(u_g, u_np, atol=1e-12)
        assert np.allclose(h1_g, h1_np, atol=1e-12)


class TestInit:
    def test_same_seed_identical(self):
        a = init_policy(PolicyShape(3, 16, 2), seed=3)
        b = init_policy(PolicyShape(3, 16, 2), seed=3)
        assert np.array_equal(a.to_pv().flatten(), b.to_pv().flatten())

    def test_different_seeds_differ(self):
        a = init_policy(PolicyShape(3, 16, 2), seed=3)
        b = init_policy(PolicyShape(3, 16, 2), seed=4)
        assert not np.array_equal(a.to_pv().flatten(), b.to_pv().flatten())

    def test_weights_within_fan_in_bound(self):
        p = init_policy(PolicyShape(4, 9, 2), seed=0)
        assert np.max(np.abs(p.w_in)) <= 1 / math.sqrt(4)
        assert np.max(np.abs(p.w_rec)) <= 1 / math.sqrt(9)
        assert np.max(np.abs(p.w_out)) <= 1 / math.sqrt(9)
        assert np.all(p.b_h == 0) and np.all(p.b_out == 0)


class TestGradients:
    def test_fd_through_three_recurrent_steps(self):
        params = init_policy(PolicyShape(2, 4, 1), seed=13)
        pv = params.to_pv()
        box = ControlBox((-1.0,), (1.0,))
        xs = [[0.3, -0.1], [0.0, 0.4], [-0.2, 0.2]]

        def f(leaves):
            cell = PolicyCell(PolicyParams.from_leaves(leaves), box)
            h = [0.0] * 4
            acc = 0.0
            for x in xs:
                u, h = cell.step(x, h)
                acc = acc + u[0]
            return acc

        assert finite_diff_check(f, pv, h=1e-5) < 1e-4

    def test_roundtrip_pv(self):
        p = init_policy(PolicyShape(3, 5, 2), seed=1)
        q = PolicyParams.from_pv(p.to_pv())
        assert np.array_equal(q.w_rec, p.w_rec)
        assert np.array_equal(q.b_out, p.b_out)
