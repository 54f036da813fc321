"""Entropy-gated imitation: fits, routing rules and threshold calibration."""

import numpy as np
import pytest

from gatecraft.approx import GateWeakSpec, ModelSpec, OptConfig, forward_batch, init_params
from gatecraft.core import entropy_rows, kl_rows
from gatecraft.epi import (EpiBundle, EpiRule, calibrate_epi1, calibrate_epi2,
                           epi_gate, epi_gate_batch, fit_entropy_regressor,
                           fit_epi_bundle_params, fit_imitation_policy,
                           routed_fraction_epi1)


class TestEpiRule:
    def test_epi2_requires_t2(self):
        with pytest.raises(ValueError):
            EpiRule("epi2", 0.5)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            EpiRule("epi3", 0.5)

    def test_non_finite_threshold(self):
        with pytest.raises(ValueError):
            EpiRule("epi1", float("nan"))


class TestGate:
    uncertain = np.array([0.5, 0.5])
    confident = np.array([0.999, 0.001])

    def test_rule1_boundary_inclusive(self):
        rule = EpiRule("epi1", 0.4)
        assert epi_gate(rule, 0.4, self.uncertain)
        assert epi_gate(rule, 0.39, self.uncertain)
        assert not epi_gate(rule, 0.41, self.uncertain)

    def test_rule2_needs_uncertain_imitator(self):
        rule = EpiRule("epi2", 0.4, 0.3)
        assert epi_gate(rule, 0.2, self.uncertain)       # low g, imitator unsure
        assert not epi_gate(rule, 0.2, self.confident)   # low g, imitator sure
        assert not epi_gate(rule, 0.9, self.uncertain)   # high g always weak

    def test_rule2_literal_variant_flips_ambiguous_case(self):
        rule = EpiRule("epi2", 0.4, 0.3, literal_rule2=True)
        assert not epi_gate(rule, 0.2, self.uncertain)
        assert epi_gate(rule, 0.2, self.confident)

    def test_gate_is_pure(self):
        rule = EpiRule("epi2", 0.4, 0.3)
        results = {epi_gate(rule, 0.2, self.uncertain) for _ in range(5)}
        assert results == {True}

    def test_batch_matches_scalar(self):
        rule = EpiRule("epi2", 0.4, 0.3)
        g = np.array([0.2, 0.2, 0.9])
        dists = np.vstack([self.uncertain, self.confident, self.uncertain])
        batch = epi_gate_batch(rule, g, dists)
        scalar = [epi_gate(rule, gv, d) for gv, d in zip(g, dists)]
        assert list(batch) == scalar


class TestCalibrateEpi1:
    values = np.arange(0.1, 1.05, 0.1)  # {0.1 ... 1.0}

    def test_hits_quantile(self):
        t1 = calibrate_epi1(self.values, 0.3)
        assert t1 == pytest.approx(0.3)
        assert routed_fraction_epi1(self.values, t1) <= 0.3

    def test_p_zero_routes_nothing(self):
        t1 = calibrate_epi1(self.values, 0.0)
        assert routed_fraction_epi1(self.values, t1) == 0.0

    def test_p_one_routes_everything(self):
        t1 = calibrate_epi1(self.values, 1.0)
        assert routed_fraction_epi1(self.values, t1) == 1.0

    def test_next_sample_would_exceed(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=200)
        for p in (0.1, 0.3, 0.5):
            t1 = calibrate_epi1(g, p)
            assert routed_fraction_epi1(g, t1) <= p
            above = np.unique(g[g > t1])
            if above.size:
                assert routed_fraction_epi1(g, above[0]) > p

    def test_monotone_in_t1(self):
        rng = np.random.default_rng(4)
        g = rng.normal(size=100)
        ts = np.linspace(g.min() - 1, g.max() + 1, 25)
        fracs = [routed_fraction_epi1(g, t) for t in ts]
        assert all(b >= a for a, b in zip(fracs, fracs[1:]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            calibrate_epi1(np.array([]), 0.3)


class TestCalibrateEpi2:
    def test_selects_best_feasible(self):
        g = np.linspace(0.0, 1.0, 50)
        s1 = np.linspace(0.0, 1.0, 50)

        def probe(t1, t2):
            frac = float(np.mean((g <= t1) & (s1 > t2)))
            return 10.0 * frac, frac  # higher fraction scores better

        cal = calibrate_epi2(g, s1, 0.3, probe, grid=8)
        assert cal.feasible
        fracs = [r.routed_fraction for r in cal.rows if r.feasible]
        best = max(fracs)
        chosen = float(np.mean((g <= cal.t1) & (s1 > cal.t2)))
        assert chosen == pytest.approx(best)
        assert chosen <= 0.3 + 0.02

    def test_all_good_pair_exists(self):
        g = np.linspace(0.0, 1.0, 20)
        s1 = np.full(20, 0.5)

        def probe(t1, t2):
            frac = float(np.mean((g <= t1) & (s1 > t2)))
            return frac, frac

        cal = calibrate_epi2(g, s1, 1.0, probe, grid=5)
        assert max(r.routed_fraction for r in cal.rows) == 1.0

    def test_infeasible_flagged_and_min_fraction(self):
        g = np.zeros(10)
        s1 = np.ones(10)

        def probe(t1, t2):
            return 1.0, 1.0  # every pair routes everything

        cal = calibrate_epi2(g, s1, 0.1, probe, grid=3, slack=0.0)
        assert not cal.feasible

    def test_probe_budget(self):
        calls = []

        def probe(t1, t2):
            calls.append((t1, t2))
            return 0.0, 0.0

        calibrate_epi2(np.linspace(0, 1, 30), np.linspace(0, 1, 30), 0.3, probe, grid=6)
        assert len(calls) == 36


class TestFits:
    opt = OptConfig(lr=0.01, iterations=400, batch_size=1000, sample_seed=0)

    def test_constant_entropy_target(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 4))
        c = 0.7
        spec = ModelSpec(4, 8, 1, "scalar", init_seed=0)
        opt = OptConfig(lr=0.01, iterations=1500, batch_size=1000)
        params, _ = fit_entropy_regressor(X, np.full(200, c), spec, opt)
        out = forward_batch(spec, params, X)
        assert np.max(np.abs(out - c)) <= 0.05

    def test_regressor_rejects_softmax_head(self):
        with pytest.raises(ValueError):
            fit_entropy_regressor(np.ones((4, 2)), np.ones(4),
                                  ModelSpec(2, 0, 2, "softmax"), self.opt)

    def test_zero_iterations_returns_init(self):
        spec = ModelSpec(3, 0, 1, "scalar", init_seed=7)
        opt = OptConfig(iterations=0)
        params, history = fit_entropy_regressor(np.ones((5, 3)), np.ones(5), spec, opt)
        assert np.array_equal(params, init_params(spec))
        assert history == []

    def test_imitation_of_uniform_target(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(100, 3))
        P = np.full((100, 4), 0.25)
        spec = ModelSpec(3, 0, 4, "softmax", init_seed=0)
        params, _ = fit_imitation_policy(X, P, spec, self.opt)
        out = forward_batch(spec, params, X)
        assert float(np.mean(kl_rows(out, P))) <= 0.01

    def test_imitation_tabular_capacity(self):
        # one-hot inputs give the linear softmax exact per-state logits
        n_states, n_actions = 10, 4
        X = np.eye(n_states)
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(n_states, n_actions))
        P = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        spec = ModelSpec(n_states, 0, n_actions, "softmax", init_seed=0)
        opt = OptConfig(lr=0.02, iterations=2000, batch_size=1000)
        params, _ = fit_imitation_policy(X, P, spec, opt)
        out = forward_batch(spec, params, X)
        assert float(np.mean(kl_rows(out, P))) <= 0.05

    def test_joint_fit_trains_both_heads(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(150, 4))
        P = np.full((150, 3), 1.0 / 3.0)
        for shared in (True, False):
            gw = GateWeakSpec(4, 8, 3, share_trunk=shared, init_seed=0)
            params, history = fit_epi_bundle_params(
                gw, X, P, OptConfig(lr=0.01, iterations=500, batch_size=1000))
            assert history[-1] < history[0]
            from gatecraft.approx import gw_forward
            dists, g = gw_forward(gw, params, X)
            assert float(np.mean(kl_rows(dists, P))) <= 0.02
            # gate head regresses the constant entropy ln 3
            assert np.max(np.abs(g - np.log(3.0))) <= 0.1

    def test_final_loss_not_worse_than_initial(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(80, 3))
        targets = rng.uniform(0.2, 1.0, size=80)
        spec = ModelSpec(3, 4, 1, "scalar", init_seed=1)
        _, history = fit_entropy_regressor(X, targets, spec,
                                           OptConfig(lr=0.005, iterations=300,
                                                     batch_size=1000))
        assert history[-1] <= history[0]
