import math

import numpy as np
import pytest
from scipy import integrate, stats

from latentbnn import bnn
from latentbnn.bnn import TrainConfig
from latentbnn.decompose import (
    ALConfig, DecomposeConfig, acquire, al_loop, aleatoric_entropy, epistemic_score, rank_scores,
    score_inputs, total_entropy, variance_decomposition,
)
from latentbnn.envs import heteroskedastic_env

from helpers import collapsed_posterior, linear_posterior, switch_posterior

CFG = DecomposeConfig(weight_draws=20, samples_per_entropy=2000, neighbor_k=3, seed=0)


def gaussian_entropy(var):
    return 0.5 * math.log(2 * math.pi * math.e * var)


def mixture_information(sep=5.0):
    """Entropy of 0.5 N(-sep, 1) + 0.5 N(sep, 1) minus that of one component, by quadrature."""
    p = lambda y: 0.5 * (stats.norm.pdf(y, -sep) + stats.norm.pdf(y, sep))
    h = integrate.quad(lambda y: -p(y) * math.log(p(y)) if p(y) > 0 else 0.0, -30, 30, limit=200)[0]
    return h - gaussian_entropy(1.0)


class TestEntropyTerms:
    def test_collapsed_total_entropy_analytic(self):
        sigma = 1 / (2 * math.pi * math.e)
        post = collapsed_posterior(sigma)
        assert abs(total_entropy(post, [0.4], CFG) - gaussian_entropy(sigma)) < 0.05
        assert abs(gaussian_entropy(sigma)) < 1e-15

    def test_linear_gaussian_total_entropy(self):
        x, v, s = 1.5, 0.2, 0.05
        post = linear_posterior(1.0, v, sigma=s)
        assert abs(total_entropy(post, [x], CFG) - gaussian_entropy(x * x * v + s)) < 0.05

    def test_aleatoric_equals_total_without_weight_uncertainty(self):
        post = collapsed_posterior(0.3, gamma=0.5)
        assert abs(aleatoric_entropy(post, [0.2], CFG) - total_entropy(post, [0.2], CFG)) < 0.05

    def test_aleatoric_output_noise_only(self):
        post = linear_posterior(1.0, 0.5, latent_weight=1.0, gamma=1e-30, sigma=0.02)
        assert abs(aleatoric_entropy(post, [0.7], CFG) - gaussian_entropy(0.02)) < 0.05

    def test_reproducible(self):
        post = linear_posterior(1.0, 0.2, sigma=0.1)
        assert total_entropy(post, [1.0], CFG) == total_entropy(post, [1.0], CFG)
        assert epistemic_score(post, [1.0], CFG) == epistemic_score(post, [1.0], CFG)


class TestEpistemic:
    def test_collapsed_score_near_zero(self):
        sc = epistemic_score(collapsed_posterior(0.2, gamma=1.0), [0.3], CFG)
        assert abs(sc.epistemic_score) < 0.05
        assert sc.epistemic_score == sc.total_entropy - sc.aleatoric_entropy

    def test_two_model_posterior_is_log_two(self):
        target = mixture_information()
        assert target == pytest.approx(math.log(2), abs=1e-6)
        sc = epistemic_score(switch_posterior(input_gated=False), [0.0], DecomposeConfig(seed=1))
        assert abs(sc.epistemic_score - target) < 0.05

    def test_output_shift_invariance(self):
        post = linear_posterior(1.0, 0.3, latent_weight=0.5, gamma=0.4, sigma=0.05)
        shifted = bnn.replace(post, w_mean=[post.w_mean[0], post.w_mean[1] + np.array([[0.0, 3.0]])])
        a = epistemic_score(post, [0.8], CFG)
        b = epistemic_score(shifted, [0.8], CFG)
        assert abs(a.total_entropy - b.total_entropy) < 1e-9
        assert abs(a.aleatoric_entropy - b.aleatoric_entropy) < 1e-9


class TestAcquire:
    def test_tie_break(self):
        assert list(rank_scores(np.zeros(5), 3)) == [0, 1, 2]
        assert list(rank_scores(np.array([0.1, 0.3, 0.3, 0.2]), 4)) == [1, 2, 3, 0]

    def test_full_batch_is_score_order(self):
        post = linear_posterior(1.0, 0.3, sigma=0.05)
        cands = np.array([[0.1], [2.0], [0.5], [1.0]])
        cfg = DecomposeConfig(weight_draws=10, samples_per_entropy=300)
        order = acquire(post, cands, 4, cfg)
        scores = [s.epistemic_score for s in score_inputs(post, cands, cfg)]
        assert list(order) == list(np.argsort(-np.array(scores), kind="stable"))
        assert order[0] == 1

    def test_disagreement_candidate_first(self):
        post = switch_posterior(input_gated=True)
        cands = np.array([[0.0], [0.0], [1.0], [0.0]])
        cfg = DecomposeConfig(weight_draws=20, samples_per_entropy=500)
        scores = np.array([s.epistemic_score for s in score_inputs(post, cands, cfg)])
        assert scores[2] > 0.6 and np.all(np.abs(np.delete(scores, 2)) < 0.05)
        assert acquire(post, cands, 1, cfg)[0] == 2

    def test_empty_and_oversized(self):
        post = linear_posterior(1.0, 0.3, sigma=0.05)
        with pytest.raises(ValueError):
            acquire(post, np.empty((0, 1)), 1, CFG)
        with pytest.raises(ValueError):
            acquire(post, np.zeros((2, 1)), 3, DecomposeConfig(samples_per_entropy=50))


class TestVarianceDecomposition:
    def test_constant(self):
        vd = variance_decomposition(np.full((3, 4), 2.5))
        assert (vd.total_variance, vd.expected_aleatoric_variance, vd.epistemic_variance) == (0, 0, 0)

    def test_hand_example(self):
        vd = variance_decomposition([[0.0, 0.0], [2.0, 2.0]])
        assert vd.total_variance == pytest.approx(4 / 3, abs=1e-15)
        assert vd.expected_aleatoric_variance == 0.0
        assert vd.epistemic_variance == pytest.approx(4 / 3, abs=1e-15)

    def test_degenerate_rejected(self):
        for shape in ((1, 5), (5, 1), (4,)):
            with pytest.raises(ValueError):
                variance_decomposition(np.zeros(shape))

    def test_monte_carlo_recovery(self):
        rng = np.random.default_rng(0)
        c = rng.normal(0, 1, (200, 1)) + rng.normal(0, 2, (200, 200))
        vd = variance_decomposition(c)
        assert vd.epistemic_variance == pytest.approx(1.0, rel=0.1)
        assert vd.expected_aleatoric_variance == pytest.approx(4.0, rel=0.1)
        assert abs(vd.total_variance - vd.epistemic_variance - vd.expected_aleatoric_variance) < 1e-12


class TestALLoop:
    train_cfg = TrainConfig(steps=50, minibatch_size=20)
    dcfg = DecomposeConfig(weight_draws=5, samples_per_entropy=50)

    def test_zero_rounds(self):
        al = ALConfig(init_n=20, rounds=0, per_round=5, pool_size=20, test_size=50, eval_grid=(-6, 6, 5))
        recs = al_loop(heteroskedastic_env(), al, self.dcfg, self.train_cfg)
        assert len(recs) == 1 and recs[0]["n"] == 20

    def test_schemas_match(self):
        out = {}
        for strat in ("epistemic", "random"):
            al = ALConfig(init_n=20, rounds=2, per_round=5, pool_size=20, test_size=50,
                          eval_grid=(-6, 6, 5), strategy=strat)
            out[strat] = al_loop(heteroskedastic_env(), al, self.dcfg, self.train_cfg)
        assert [r.keys() for r in out["epistemic"]] == [r.keys() for r in out["random"]]
        assert [r["n"] for r in out["random"]] == [20, 25, 30]
