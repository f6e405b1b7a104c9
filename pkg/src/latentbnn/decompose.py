"""Epistemic/aleatoric split of predictive uncertainty.

Entropy form: H(y) - E_W H(y | W), both terms estimated with the
nearest-neighbour estimator on predictive samples. Variance form: the law
of total variance over grouped samples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bnn import BnnPosterior, TrainConfig, init_posterior, predict_samples, predictive_log_likelihood, train
from .entropy import kl_entropy
from .envs import Dataset, StochasticFunctionEnv
from .mlp import MlpArch

log = logging.getLogger(__name__)

_TOTAL, _ALEATORIC = 0, 1


@dataclass(frozen=True)
class DecomposeConfig:
    weight_draws: int = 50
    samples_per_entropy: int = 500
    neighbor_k: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.weight_draws < 1:
            raise ValueError("weight_draws must be >= 1")
        if not 1 <= self.neighbor_k < self.samples_per_entropy:
            raise ValueError("need 1 <= neighbor_k < samples_per_entropy")


@dataclass(frozen=True)
class AcquisitionScore:
    x: np.ndarray
    total_entropy: float
    aleatoric_entropy: float
    epistemic_score: float


@dataclass(frozen=True)
class VarianceDecomposition:
    total_variance: float
    expected_aleatoric_variance: float
    epistemic_variance: float


def _stream(config: DecomposeConfig, index: int, term: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, index, term])


def total_entropy(posterior: BnnPosterior, x, config: DecomposeConfig,
                  rng: Optional[np.random.Generator] = None) -> float:
    """Entropy of the full predictive: L draws, each with its own weights."""
    rng = rng or _stream(config, 0, _TOTAL)
    y = predict_samples(posterior, x, config.samples_per_entropy, 1, rng)
    return kl_entropy(y.reshape(config.samples_per_entropy, -1), config.neighbor_k).nats


def aleatoric_entropy(posterior: BnnPosterior, x, config: DecomposeConfig,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Average over M weight draws of the entropy with only (z, eps) resampled."""
    rng = rng or _stream(config, 0, _ALEATORIC)
    y = predict_samples(posterior, x, config.weight_draws, config.samples_per_entropy, rng)
    return float(np.mean([kl_entropy(g, config.neighbor_k).nats for g in y]))


def epistemic_score(posterior: BnnPosterior, x, config: DecomposeConfig, index: int = 0) -> AcquisitionScore:
    """Expected entropy reduction at ``x``; may be slightly negative from estimator noise."""
    h = total_entropy(posterior, x, config, _stream(config, index, _TOTAL))
    a = aleatoric_entropy(posterior, x, config, _stream(config, index, _ALEATORIC))
    return AcquisitionScore(np.asarray(x, dtype=np.float64).reshape(-1), h, a, h - a)


def score_inputs(posterior: BnnPosterior, inputs, config: DecomposeConfig) -> list:
    """Scores for each row of ``inputs``; row ``i`` uses streams derived from ``(seed, i)``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    return [epistemic_score(posterior, x, config, i) for i, x in enumerate(inputs)]


def acquire(posterior: BnnPosterior, candidates, batch_size: int, config: DecomposeConfig) -> np.ndarray:
    """Indices of the ``batch_size`` highest epistemic scores, ties to the lower index."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.size == 0:
        raise ValueError("no candidates to acquire from")
    scores = np.array([s.epistemic_score for s in score_inputs(posterior, candidates, config)])
    return rank_scores(scores, batch_size)


def rank_scores(scores: np.ndarray, batch_size: int) -> np.ndarray:
    if not 1 <= batch_size <= scores.size:
        raise ValueError(f"batch_size must be in [1, {scores.size}], got {batch_size}")
    return np.argsort(-scores, kind="stable")[:batch_size]


def variance_decomposition(cost_samples) -> VarianceDecomposition:
    """Law of total variance on an (M groups, N samples) array, subtraction form."""
    c = np.asarray(cost_samples, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 2 or c.shape[1] < 2:
        raise ValueError(f"need an (M>=2, N>=2) array, got shape {c.shape}")
    total = float(np.var(c, ddof=1))
    within = float(np.mean(np.var(c, axis=1, ddof=1)))
    return VarianceDecomposition(total, within, total - within)


# ---------------------------------------------------------------------------
# active learning


@dataclass(frozen=True)
class ALConfig:
    init_n: int = 50
    rounds: int = 5
    per_round: int = 50
    pool_size: int = 200
    test_size: int = 500
    eval_grid: tuple = (-6.0, 6.0, 25)
    hidden: tuple = (20, 20)
    prior_weight_variance: float = 1.0
    prior_latent_variance: float = 1.0
    noise_variance: float = 0.01
    strategy: str = "epistemic"
    seed: int = 0

    def __post_init__(self):
        if self.per_round < 1 or self.rounds < 0 or self.init_n < 1:
            raise ValueError("need per_round >= 1, rounds >= 0, init_n >= 1")
        if self.strategy not in ("epistemic", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


def fit_posterior(data: Dataset, train_config: TrainConfig, hidden=(20, 20), lam=1.0,
                  gamma=1.0, sigma=0.01):
    arch = MlpArch((data.inputs.shape[1] + 1, *hidden, data.targets.shape[1]))
    post = init_posterior(arch, len(data), lam, gamma, sigma, seed=train_config.seed, data=data)
    return train(post, data, train_config)


def _round_seed(seed: int, rnd: int) -> int:
    return int(np.random.SeedSequence([seed, rnd]).generate_state(1)[0])


def al_loop(env: StochasticFunctionEnv, al: ALConfig, config: DecomposeConfig,
            train_config: TrainConfig) -> list:
    """Retrain-from-scratch active learning; one record per round (round 0 included)."""
    rng = np.random.default_rng([al.seed, 0])
    x = env.sample_x(rng, al.init_n)
    data = Dataset(x, env.sample_y(rng, x))
    test_rng = np.random.default_rng([al.seed, 1])
    x_test = env.sample_x(test_rng, al.test_size)
    y_test = env.sample_y(test_rng, x_test)
    grid = np.linspace(*al.eval_grid[:2], int(al.eval_grid[2]))[:, None]
    records = []
    for rnd in range(al.rounds + 1):
        tc = TrainConfig(**{**train_config.__dict__, "seed": _round_seed(train_config.seed, rnd)})
        post, _ = fit_posterior(data, tc, al.hidden, al.prior_weight_variance,
                                al.prior_latent_variance, al.noise_variance)
        ll = predictive_log_likelihood(post, x_test, y_test, 500, np.random.default_rng([al.seed, 2, rnd]))
        scores = score_inputs(post, grid, config)
        records.append({
            "round": rnd,
            "strategy": al.strategy,
            "n": len(data),
            "test_loglik": float(np.mean(ll)),
            "mean_epistemic": float(np.mean([s.epistemic_score for s in scores])),
        })
        if rnd == al.rounds:
            break
        pool = env.sample_x(np.random.default_rng([al.seed, 3, rnd]), al.pool_size)
        if al.strategy == "epistemic":
            pick = acquire(post, pool, al.per_round, config)
        else:
            pick = np.random.default_rng([al.seed, 4, rnd]).choice(al.pool_size, al.per_round, replace=False)
        new_x = pool[pick]
        new_y = env.sample_y(np.random.default_rng([al.seed, 5, rnd]), new_x)
        data = Dataset(np.vstack([data.inputs, new_x]), np.vstack([data.targets, new_y]))
    return records
