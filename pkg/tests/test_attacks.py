"""Tests for FGSM, projected-gradient attacks, the margin objective, and
the eigenvector attack."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fisherlens.attacks import (
    AttackConfig,
    cw_loss,
    fgsm,
    fgsm_batch,
    fisher_eig_attack,
    pgd,
    pgd_batch,
    robust_accuracy,
)
from fisherlens.errors import ContractError, DimensionError
from fisherlens.fisher import fisher_at, fisher_spectral, quadratic_form
from fisherlens.network import forward, forward_batch
from fisherlens.tensor_core import make_rng

from util import build_net, fgsm_example_net, manual_net


def cfg(**kw):
    base = dict(epsilon=8.0 / 255.0, step_size=2.0 / 255.0, num_steps=5,
                rng_seed=0, random_start=False)
    base.update(kw)
    return AttackConfig(**base)


class TestAttackConfig:
    def test_negative_epsilon_rejected(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=-0.1)

    def test_zero_epsilon_allowed(self):
        assert AttackConfig(epsilon=0.0).epsilon == 0.0

    def test_bad_steps(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=0.1, num_steps=0)

    def test_bad_step_size(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=0.1, step_size=-1.0)

    def test_bad_clip_range(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=0.1, clip_range=(1.0, 0.0))

    def test_bad_loss_kind(self):
        with pytest.raises(ContractError):
            AttackConfig(epsilon=0.1, loss_kind="hinge")


class TestFgsm:
    def test_hand_example(self):
        # logits [4.6 x - 2.3, 0] tie at x = 0.5; the class-0 CE gradient
        # there is -2.3, so one 0.1 * sign step moves x to 0.4 exactly
        net = fgsm_example_net()
        res = fgsm(net, np.array([0.5]), 0, cfg(epsilon=0.1, step_size=0.1, num_steps=1))
        np.testing.assert_allclose(res.x_adv, [0.4], atol=1e-12)
        assert len(res.loss_trace) == 2
        assert res.loss_trace[1] >= res.loss_trace[0]

    def test_zero_gradient_identity(self):
        net = manual_net([np.zeros((2, 3))], [np.array([0.1, 0.2, 0.3])])
        x = np.full(2, 0.5)
        res = fgsm(net, x, 0, cfg(epsilon=0.1))
        np.testing.assert_array_equal(res.x_adv, x)

    def test_ball_and_clip_respected(self):
        net = build_net(4, [6, 3], seed=0)
        rng = make_rng(1)
        xs = rng.uniform(0.0, 1.0, size=(20, 4))
        ys = rng.integers(0, 3, size=20)
        c = cfg(epsilon=0.3, step_size=0.3, num_steps=1)
        x_adv, _, _ = fgsm_batch(net, xs, ys, c)
        assert np.all(np.abs(x_adv - xs) <= c.epsilon + 1e-12)
        assert np.all(x_adv >= 0.0) and np.all(x_adv <= 1.0)

    def test_success_flags_match_predictions(self):
        net = build_net(3, [5, 3], seed=2)
        rng = make_rng(3)
        xs = rng.uniform(0.0, 1.0, size=(10, 3))
        ys = rng.integers(0, 3, size=10)
        x_adv, success, _ = fgsm_batch(net, xs, ys, cfg(epsilon=0.2, step_size=0.2, num_steps=1))
        preds = np.argmax(forward_batch(net, x_adv), axis=1)
        np.testing.assert_array_equal(success, preds != ys)


class TestPgd:
    def test_single_full_step_equals_fgsm(self):
        net = build_net(4, [6, 3], seed=4)
        rng = make_rng(5)
        xs = rng.uniform(0.0, 1.0, size=(12, 4))
        ys = rng.integers(0, 3, size=12)
        c = cfg(epsilon=0.1, step_size=0.1, num_steps=1)
        adv_pgd, _, _ = pgd_batch(net, xs, ys, c)
        adv_fgsm, _, _ = fgsm_batch(net, xs, ys, c)
        np.testing.assert_array_equal(adv_pgd, adv_fgsm)

    def test_deterministic_with_seed(self):
        net = build_net(4, [6, 3], seed=6)
        rng = make_rng(7)
        xs = rng.uniform(0.0, 1.0, size=(8, 4))
        ys = rng.integers(0, 3, size=8)
        c = cfg(num_steps=10, random_start=True, rng_seed=11)
        a, _, ta = pgd_batch(net, xs, ys, c)
        b, _, tb = pgd_batch(net, xs, ys, c)
        np.testing.assert_array_equal(a, b)
        assert ta == tb
        c2 = dataclasses.replace(c, rng_seed=12)
        d, _, _ = pgd_batch(net, xs, ys, c2)
        assert not np.array_equal(a, d)

    def test_trace_length_and_growth(self):
        net = build_net(3, [6, 2], activation="tanh", seed=8)
        rng = make_rng(9)
        xs = rng.uniform(0.2, 0.8, size=(16, 3))
        ys = rng.integers(0, 2, size=16)
        c = cfg(epsilon=0.2, step_size=0.02, num_steps=12)
        _, _, trace = pgd_batch(net, xs, ys, c)
        assert len(trace) == 13
        assert trace[-1] >= trace[0]

    def test_iterates_stay_feasible(self):
        """Every prefix of a deterministic run ends inside ball and range."""
        net = build_net(3, [6, 3], seed=10)
        rng = make_rng(11)
        xs = rng.uniform(0.0, 1.0, size=(6, 3))
        ys = rng.integers(0, 3, size=6)
        for steps in (1, 2, 4, 7):
            c = cfg(epsilon=0.15, step_size=0.06, num_steps=steps)
            x_adv, _, _ = pgd_batch(net, xs, ys, c)
            assert np.all(np.abs(x_adv - xs) <= c.epsilon + 1e-12)
            assert np.all(x_adv >= 0.0) and np.all(x_adv <= 1.0)

    def test_missing_labels_rejected(self):
        net = build_net(3, [4, 2], seed=12)
        with pytest.raises(ContractError):
            pgd_batch(net, np.full((2, 3), 0.5), None, cfg())

    def test_kl_loss_needs_no_labels(self):
        net = build_net(3, [4, 2], seed=13)
        xs = np.full((2, 3), 0.5)
        c = cfg(loss_kind="kl_from_clean", num_steps=3)
        x_adv, success, trace = pgd_batch(net, xs, None, c)
        assert x_adv.shape == xs.shape
        assert np.all(np.abs(x_adv - xs) <= c.epsilon + 1e-12)

    def test_wrapper_matches_batch(self):
        net = build_net(3, [5, 3], seed=14)
        x = np.full(3, 0.4)
        c = cfg(num_steps=4, rng_seed=3, random_start=True)
        res = pgd(net, x, 1, c)
        batch_adv, batch_success, batch_trace = pgd_batch(net, x[None, :], np.array([1]), c)
        np.testing.assert_array_equal(res.x_adv, batch_adv[0])
        assert res.success == bool(batch_success[0])
        assert res.loss_trace == batch_trace

    @settings(derandomize=True, max_examples=40, deadline=None)
    @given(st.floats(0.01, 0.5), st.integers(1, 6))
    def test_ball_projection_property(self, eps, steps):
        net = build_net(2, [4, 2], seed=15)
        xs = np.array([[0.1, 0.9], [0.5, 0.5]])
        ys = np.array([0, 1])
        c = cfg(epsilon=eps, step_size=eps, num_steps=steps, random_start=True)
        x_adv, _, _ = pgd_batch(net, xs, ys, c)
        assert np.all(np.abs(x_adv - xs) <= eps + 1e-12)
        assert np.all(x_adv >= 0.0) and np.all(x_adv <= 1.0)


class TestCwLoss:
    def test_wrong_prediction_pays_margin(self):
        # class-1 logit leads by 1, so the true-class margin is -1
        net = manual_net([np.zeros((1, 2))], [np.array([1.0, 2.0])])
        assert cw_loss(net, np.zeros(1), 0, c=500.0) == pytest.approx(500.0)

    def test_correct_prediction_zero(self):
        net = manual_net([np.zeros((1, 2))], [np.array([2.0, 1.0])])
        assert cw_loss(net, np.zeros(1), 0, c=500.0) == pytest.approx(0.0)

    def test_cw_attack_flips_near_boundary(self):
        net = fgsm_example_net()
        x = np.array([0.52])
        c = cfg(epsilon=0.1, step_size=0.02, num_steps=20, loss_kind="cw")
        res = pgd(net, x, 0, c)
        assert res.success
        assert abs(res.x_adv[0] - x[0]) <= 0.1 + 1e-12


class TestFisherEig:
    def test_constant_net_returns_input(self):
        net = manual_net([np.zeros((3, 2))], [np.array([0.3, -0.3])])
        x = np.full(3, 0.5)
        res = fisher_eig_attack(net, x, cfg(epsilon=0.1))
        np.testing.assert_array_equal(res.x_adv, x)
        assert res.loss_trace == (0.0,)
        assert not res.success

    def test_batch_input_rejected(self):
        net = build_net(3, [4, 2], seed=16)
        with pytest.raises(DimensionError):
            fisher_eig_attack(net, np.full((2, 3), 0.5), cfg())

    def test_step_aligns_with_top_eigenvector(self):
        net = manual_net([np.array([[3.0, 0.0], [-2.0, 0.0], [1.0, 0.0]])],
                         [np.zeros(2)])
        x = np.full(3, 0.5)
        res = fisher_eig_attack(net, x, cfg(epsilon=0.05))
        eta = res.x_adv - x
        lam, vec = fisher_spectral(fisher_at(net, x))
        cos = abs(eta @ vec) / (np.linalg.norm(eta) * np.linalg.norm(vec))
        assert cos >= 0.999
        assert np.max(np.abs(eta)) == pytest.approx(0.05, abs=1e-12)

    def test_curvature_beats_random_directions_at_equal_length(self):
        """Per unit L2 length the step direction maximizes the quadratic
        form, so random directions of the same length never exceed it."""
        net = build_net(4, [8, 3], activation="tanh", seed=17)
        x = np.full(4, 0.5)
        res = fisher_eig_attack(net, x, cfg(epsilon=1e-2))
        eta = res.x_adv - x
        fi = fisher_at(net, x)
        own = quadratic_form(fi, eta)
        scale = np.linalg.norm(eta)
        rng = make_rng(18)
        wins = 0
        for _ in range(100):
            u = rng.standard_normal(4)
            u *= scale / np.linalg.norm(u)
            if own + 1e-15 >= quadratic_form(fi, u):
                wins += 1
        assert wins >= 99

    def test_trace_reports_achieved_divergence(self):
        net = build_net(3, [6, 2], activation="tanh", seed=19)
        x = np.full(3, 0.5)
        res = fisher_eig_attack(net, x, cfg(epsilon=0.05))
        from fisherlens.divergences import kl

        expect = kl(forward(net, x), forward(net, res.x_adv))
        assert res.loss_trace == (expect,)


class TestRobustAccuracy:
    def test_zero_epsilon_matches_clean(self):
        net = build_net(4, [6, 3], seed=20)
        rng = make_rng(21)
        xs = rng.uniform(0.0, 1.0, size=(15, 4))
        ys = rng.integers(0, 3, size=15)
        clean = float(np.mean(np.argmax(forward_batch(net, xs), axis=1) == ys))
        c = cfg(epsilon=0.0, num_steps=3, random_start=True)
        for attack in ("pgd", "fgsm", "fisher_eig"):
            assert robust_accuracy(net, xs, ys, c, attack=attack) == clean

    def test_attack_never_helps(self):
        net = build_net(4, [6, 3], seed=22)
        rng = make_rng(23)
        xs = rng.uniform(0.0, 1.0, size=(25, 4))
        ys = np.argmax(forward_batch(net, xs), axis=1)
        c = cfg(epsilon=0.1, step_size=0.025, num_steps=8)
        assert robust_accuracy(net, xs, ys, c, attack="pgd") <= 1.0

    def test_unknown_attack_rejected(self):
        net = build_net(3, [4, 2], seed=24)
        with pytest.raises(ContractError):
            robust_accuracy(net, np.full((2, 3), 0.5), np.zeros(2, dtype=int),
                            cfg(), attack="deepfool")
