"""Hand-built posteriors with known predictive distributions."""
import math
from dataclasses import replace

import numpy as np

from latentbnn.bnn import BnnPosterior
from latentbnn.mlp import MlpArch

TINY = 1e-30
LOG_TINY = math.log(TINY)
GATE = 1e6


def switch_posterior(input_gated: bool, sigma: float = 1.0) -> BnnPosterior:
    """Outputs +5 or -5 (plus N(0, sigma) noise) depending on one random weight.

    With ``input_gated`` the random weight multiplies the input, so x = 0
    always yields -5 and any x != 0 yields +/-5 with probability 1/2 each.
    Otherwise the random weight is a bias and the output ignores x.
    """
    arch = MlpArch((2, 1, 2, 1))
    w1 = np.zeros((1, 3))
    lv1 = np.full((1, 3), LOG_TINY)
    lv1[0, 0 if input_gated else 2] = 0.0
    w2 = np.array([[GATE, 0.0], [GATE, -1.0]])
    w3 = np.array([[10.0, -10.0, -5.0]])
    lv = [lv1, np.full(w2.shape, LOG_TINY), np.full(w3.shape, LOG_TINY)]
    return BnnPosterior(arch, [w1, w2, w3], lv, np.zeros(1), np.zeros(1), 1.0, TINY, np.array([sigma]))


def collapsed_posterior(sigma: float, gamma: float = TINY, seed: int = 0) -> BnnPosterior:
    rng = np.random.default_rng(seed)
    arch = MlpArch((2, 8, 1))
    means = [rng.normal(size=s) for s in arch.weight_shapes()]
    lv = [np.full(s, LOG_TINY) for s in arch.weight_shapes()]
    return BnnPosterior(arch, means, lv, np.zeros(1), np.zeros(1), 1.0, gamma, np.array([sigma]))


def linear_posterior(m, v, latent_weight=0.0, gamma=TINY, sigma=TINY) -> BnnPosterior:
    """f(x, z) = w x + c z with w ~ N(m, v); exact while |w x + c z| < 10."""
    arch = MlpArch((2, 1, 1))
    w1 = np.array([[m, latent_weight, 10.0]])
    lv1 = np.array([[math.log(v), LOG_TINY, LOG_TINY]])
    w2 = np.array([[1.0, -10.0]])
    lv2 = np.full((1, 2), LOG_TINY)
    return BnnPosterior(arch, [w1, w2], [lv1, lv2], np.zeros(1), np.zeros(1), 1.0, gamma, np.array([sigma]))


def affine_dynamics_posterior(p, q, c=0.0, p_var=TINY, gamma=TINY, sigma=TINY) -> BnnPosterior:
    """Dynamics f(s, a, z) = p s + q a + c z with p ~ N(p, p_var); exact while f > -10."""
    arch = MlpArch((3, 1, 1))
    w1 = np.array([[p, q, c, 10.0]])
    lv1 = np.array([[math.log(p_var), LOG_TINY, LOG_TINY, LOG_TINY]])
    w2 = np.array([[1.0, -10.0]])
    lv2 = np.full((1, 2), LOG_TINY)
    return BnnPosterior(arch, [w1, w2], [lv1, lv2], np.zeros(1), np.zeros(1), 1.0, gamma, np.array([sigma]))


def constant_policy(value, low=-1.0, high=1.0):
    """Policy net that outputs ``value`` for every state (exact up to tanh rounding)."""
    from latentbnn.policy import init_policy

    pol = init_policy([0.0], [10.0], [low], [high], hidden=(1,), seed=0)
    t = 2.0 * (value - low) / (high - low) - 1.0
    params = [np.zeros((1, 2)), np.array([[0.0, math.atanh(t)]])]
    return replace(pol, params=params)
