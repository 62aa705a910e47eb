"""Tests for the diagnostic quadratic family and the problem registry."""

import numpy as np
import pytest

from plmarkov.engine import StepSchedule, run
from plmarkov.errors import InvalidConfig
from plmarkov.problems import build_instance
from plmarkov.problems.quadratic import build_quadratic_instance
from plmarkov.theory import abc_verify
from plmarkov.chain import generator_from


class TestNoiselessQuadratic:
    def test_single_trial_is_deterministic_gradient_descent(self):
        inst = build_quadratic_instance({"dim": 4, "curvature": 2.0, "start_offset": 1.5})
        schedule = StepSchedule(a=1.2, K0=6.0)
        traj = run(inst, schedule, horizon=40, seed=99)
        x = inst.x0.copy()
        for k in range(40):
            x = x - schedule.stepsize(k) * inst.gradient(x)
            np.testing.assert_array_equal(traj.iterates[k + 1], x)

    def test_constants_and_anchor(self):
        inst = build_quadratic_instance({"dim": 3, "curvature": 0.5})
        assert inst.constants.mu == 0.5 and inst.constants.L == 0.5
        assert inst.constants.A == 1.0 and inst.constants.B == 0.0
        assert inst.constants.C == 0.0
        assert inst.f_star == 0.0
        assert inst.tmix == 1 and inst.tmix_certified
        assert inst.initial_gap() == pytest.approx(0.25, rel=1e-12)

    def test_suboptimality_contracts_exactly(self):
        inst = build_quadratic_instance({"dim": 2, "curvature": 1.0})
        schedule = StepSchedule(a=2.0, K0=4.0)
        traj = run(inst, schedule, horizon=30, seed=0)
        for k in range(30):
            factor = (1.0 - schedule.stepsize(k)) ** 2
            assert traj.suboptimality[k + 1] == pytest.approx(
                factor * traj.suboptimality[k], rel=1e-12, abs=1e-300
            )


class TestModulatedQuadratic:
    def test_stationary_mean_is_normalized_to_one(self):
        inst = build_quadratic_instance({"dim": 3, "modulation": [2.0, 0.5]})
        pi = np.array([2.0 / 3.0, 1.0 / 3.0])
        assert float(pi @ inst.meta["modulation"]) == pytest.approx(1.0, rel=1e-12)
        x = np.array([1.0, -2.0, 0.5])
        mean = sum(
            pi[z] * inst.markov_grad(x, z) for z in range(2)
        )
        np.testing.assert_allclose(mean, inst.gradient(x), rtol=1e-12)

    def test_growth_is_purely_multiplicative(self):
        inst = build_quadratic_instance({"dim": 3, "modulation": [2.0, 0.5]})
        assert inst.constants.B == 0.0 and inst.constants.C == 0.0
        assert inst.constants.A == pytest.approx(
            float(np.max(inst.meta["modulation"] ** 2)), rel=1e-12
        )
        for check in abc_verify(inst, 300, generator_from(5)):
            assert check.passed, check.line()

    def test_zero_mean_modulation_rejected(self):
        with pytest.raises(InvalidConfig):
            build_quadratic_instance({"dim": 2, "modulation": [1.0, -2.0]})

    def test_modulation_shape_must_match_chain(self):
        with pytest.raises(InvalidConfig):
            build_quadratic_instance({"dim": 2, "modulation": [1.0, 2.0, 3.0]})


class TestRegistry:
    def test_dispatch_reaches_every_family(self):
        assert build_instance({"kind": "quadratic", "dim": 2}).kind == "quadratic"
        assert (
            build_instance(
                {"kind": "subsample", "n_points": 6, "dim": 3, "b": 2, "rho": 0.5}
            ).kind
            == "subsample"
        )
        assert build_instance({"kind": "sysid", "dim": 2}).kind == "sysid"
        assert (
            build_instance({"kind": "token", "nodes": 3, "dim": 4, "rows_per_node": 6}).kind
            == "token"
        )

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidConfig):
            build_instance({"kind": "mystery"})
        with pytest.raises(InvalidConfig):
            build_instance({})
