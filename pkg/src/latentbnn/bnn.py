"""Bayesian neural network with a scalar latent input per datapoint.

The posterior is fully factorized Gaussian over every weight entry and every
training latent ``z_n``. Training minimizes a black-box alpha-divergence
energy with reparameterized Monte-Carlo gradients; ``alpha = 0`` is the ELBO.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from . import mlp
from ._adam import Adam
from .envs import Dataset
from .mlp import MlpArch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_TWO_PI = math.log(2.0 * math.pi)


class GaussianFactor(NamedTuple):
    mean: np.ndarray
    log_variance: np.ndarray

    @property
    def variance(self):
        return np.exp(self.log_variance)


@dataclass(frozen=True)
class BnnPosterior:
    """q(W, z) plus the fixed prior/noise hyperparameters.

    ``arch.input_dim`` is the feature dimension plus one latent slot (last).
    The network sees standardized features ``(x - input_shift) / input_scale``
    and its outputs (and the noise variance ``Sigma``) live in standardized
    target units: ``y = output_shift + output_scale * (f + eps)``.
    """

    arch: MlpArch
    w_mean: List[np.ndarray]
    w_logvar: List[np.ndarray]
    z_mean: np.ndarray
    z_logvar: np.ndarray
    prior_weight_variance: float
    prior_latent_variance: float
    noise_variance: np.ndarray
    input_shift: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None
    output_shift: Optional[np.ndarray] = None
    output_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        mlp.check_params(self.arch, self.w_mean)
        mlp.check_params(self.arch, self.w_logvar)
        if self.z_mean.shape != self.z_logvar.shape or self.z_mean.ndim != 1:
            raise ValueError("latent mean/log-variance must be matching vectors")
        if self.z_mean.size < 1:
            raise ValueError("posterior needs at least one training latent")
        sig = np.asarray(self.noise_variance, dtype=np.float64).reshape(-1)
        if sig.size != self.arch.output_dim:
            raise ValueError(f"need {self.arch.output_dim} noise variances, got {sig.size}")
        if not (self.prior_weight_variance > 0 and self.prior_latent_variance > 0 and np.all(sig > 0)):
            raise ValueError("prior and noise variances must be positive")
        object.__setattr__(self, "noise_variance", sig)
        D, K = self.arch.input_dim - 1, self.arch.output_dim
        for name, n, default in (("input_shift", D, 0.0), ("input_scale", D, 1.0),
                                 ("output_shift", K, 0.0), ("output_scale", K, 1.0)):
            v = getattr(self, name)
            v = np.full(n, default) if v is None else np.asarray(v, dtype=np.float64).reshape(-1)
            if v.size != n:
                raise ValueError(f"{name} needs {n} entries, got {v.size}")
            object.__setattr__(self, name, v)
        if np.any(self.input_scale <= 0) or np.any(self.output_scale <= 0):
            raise ValueError("standardizer scales must be positive")

    @property
    def n_data(self) -> int:
        return self.z_mean.size

    @property
    def feature_dim(self) -> int:
        return self.arch.input_dim - 1

    @property
    def gamma(self) -> float:
        return self.prior_latent_variance

    def net_inputs(self, x):
        return (np.asarray(x, dtype=np.float64) - self.input_shift) / self.input_scale

    def net_targets(self, y):
        return (np.asarray(y, dtype=np.float64) - self.output_shift) / self.output_scale

    def weight_factors(self) -> List[GaussianFactor]:
        return [GaussianFactor(m, s) for m, s in zip(self.w_mean, self.w_logvar)]

    def latent_factors(self) -> GaussianFactor:
        return GaussianFactor(self.z_mean, self.z_logvar)

    def variational_params(self) -> list:
        return [*self.w_mean, *self.w_logvar, self.z_mean, self.z_logvar]

    def with_params(self, flat: list) -> "BnnPosterior":
        L = self.arch.n_layers
        return replace(self, w_mean=list(flat[:L]), w_logvar=list(flat[L:2 * L]),
                       z_mean=flat[2 * L], z_logvar=flat[2 * L + 1])


def standardizer(data: Dataset) -> dict:
    """Column means and standard deviations (zero spread maps to scale 1)."""
    def stats(a):
        sd = a.std(axis=0)
        return a.mean(axis=0), np.where(sd > 0, sd, 1.0)
    xs, xc = stats(data.inputs)
    ys, yc = stats(data.targets)
    return {"input_shift": xs, "input_scale": xc, "output_shift": ys, "output_scale": yc}


def init_posterior(arch: MlpArch, n: int, lam: float = 1.0, gamma: float = 1.0,
                   sigma=0.01, seed: int = 0, data: Optional[Dataset] = None) -> BnnPosterior:
    """Weight means ~ N(0, 1/fan_in), weight variances 1e-3, latents at their prior.

    With ``data`` the standardizer is fitted to it; otherwise it is the identity.
    """
    if n < 1:
        raise ValueError(f"need at least one datapoint, got n={n}")
    if not (lam > 0 and gamma > 0):
        raise ValueError("lambda and gamma must be positive")
    rng = np.random.default_rng(seed)
    means = [rng.normal(0.0, 1.0 / math.sqrt(shape[1] - 1), size=shape) for shape in arch.weight_shapes()]
    logvars = [np.full(shape, math.log(1e-3)) for shape in arch.weight_shapes()]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (arch.output_dim,)).copy()
    std = standardizer(data) if data is not None else {}
    return BnnPosterior(arch, means, logvars, np.zeros(n), np.full(n, math.log(gamma)),
                        float(lam), float(gamma), sig, **std)


def sample_weights(posterior: BnnPosterior, rng: np.random.Generator, size: Optional[int] = None):
    """One weight realization (or a stack of ``size``) by reparameterization."""
    out = []
    for m, s in zip(posterior.w_mean, posterior.w_logvar):
        shape = m.shape if size is None else (size,) + m.shape
        out.append(m + np.exp(0.5 * s) * rng.standard_normal(shape))
    return out


def gaussian_log_density(y, mean, variance) -> np.ndarray:
    """Diagonal Gaussian log density summed over the last axis."""
    var = np.asarray(variance, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    r = np.asarray(y, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    return np.sum(-0.5 * (LOG_TWO_PI + np.log(var)) - 0.5 * r * r / var, axis=-1)


def kl_gaussian(q: GaussianFactor, prior_variance) -> np.ndarray:
    """KL(N(m, v) || N(0, p)), elementwise."""
    m, s = np.asarray(q.mean), np.asarray(q.log_variance)
    p = prior_variance
    return 0.5 * (np.exp(s) / p + m * m / p - 1.0 + np.log(p) - s)


def _kl_grads(m, s, p):
    return m / p, 0.5 * (np.exp(s) / p - 1.0)


# ---------------------------------------------------------------------------
# energy


class EnergyNoise(NamedTuple):
    """Standard-normal draws behind one energy evaluation."""

    weights: list      # per layer, shape (K,) + weight shape
    latents: np.ndarray  # (K, B)


def draw_energy_noise(posterior: BnnPosterior, batch_size: int, mc_samples: int,
                      rng: np.random.Generator) -> EnergyNoise:
    if mc_samples < 1:
        raise ValueError(f"need at least one Monte-Carlo sample, got {mc_samples}")
    w = [rng.standard_normal((mc_samples,) + m.shape) for m in posterior.w_mean]
    return EnergyNoise(w, rng.standard_normal((mc_samples, batch_size)))


def _local_terms(ll: np.ndarray, alpha: float):
    """Per-datapoint energy terms and their derivative w.r.t. ``ll`` (shape (K, B))."""
    K = ll.shape[0]
    if alpha == 0.0:
        return -ll.mean(axis=0), np.full_like(ll, -1.0 / K)
    a = alpha * ll
    lse = logsumexp(a, axis=0)
    local = -(lse - math.log(K)) / alpha
    return local, -np.exp(a - lse)


def alpha_energy(posterior: BnnPosterior, x: np.ndarray, y: np.ndarray, idx: np.ndarray,
                 alpha: float, mc_samples: int = 20, rng: Optional[np.random.Generator] = None,
                 noise: Optional[EnergyNoise] = None, need_grad: bool = True):
    """Minibatch estimate of the alpha energy and its gradient.

    ``x``/``y`` are raw batch rows, ``idx`` their global indices into the
    training latents. Likelihoods are evaluated in standardized target units.
    Gradients come back in ``variational_params`` order.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    idx = np.asarray(idx)
    N, B = posterior.n_data, idx.size
    if B < 1 or idx.min() < 0 or idx.max() >= N:
        raise ValueError("batch indices out of range")
    if noise is None:
        noise = draw_energy_noise(posterior, B, mc_samples, rng)
    K = noise.latents.shape[0]
    arch, sig = posterior.arch, posterior.noise_variance
    scale = N / B
    x, y = posterior.net_inputs(x), posterior.net_targets(y)

    w_std = [np.exp(0.5 * s) for s in posterior.w_logvar]
    W = [m + sd * e for m, sd, e in zip(posterior.w_mean, w_std, noise.weights)]
    zm, zs = posterior.z_mean[idx], posterior.z_logvar[idx]
    z_std = np.exp(0.5 * zs)
    z = zm + z_std * noise.latents                                   # (K, B)
    inp = np.concatenate([np.broadcast_to(x, (K,) + x.shape), z[..., None]], axis=-1)
    f, cache = mlp.forward_cache(arch, W, inp)                       # (K, B, out)
    ll = gaussian_log_density(y, f, sig)                              # (K, B)
    local, dlocal = _local_terms(ll, alpha)
    if not np.all(np.isfinite(local)):
        bad = int(np.flatnonzero(~np.isfinite(local))[0])
        raise FloatingPointError(f"non-finite energy term at batch index {int(idx[bad])}")

    kl_w = sum(float(kl_gaussian(q, posterior.prior_weight_variance).sum())
               for q in posterior.weight_factors())
    kl_z = kl_gaussian(GaussianFactor(zm, zs), posterior.gamma)
    energy = scale * float(local.sum()) + kl_w + scale * float(kl_z.sum())
    if not need_grad:
        return energy, None

    cot = (scale * dlocal)[..., None] * (y - f) / sig                 # dE/df
    gW, ginp = mlp.backward_cache(arch, W, cache, cot)
    g_mean, g_logvar = [], []
    for m, s, sd, e, g in zip(posterior.w_mean, posterior.w_logvar, w_std, noise.weights, gW):
        km, ks = _kl_grads(m, s, posterior.prior_weight_variance)
        g_mean.append(g.sum(axis=0) + km)
        g_logvar.append((g * e).sum(axis=0) * 0.5 * sd + ks)
    gz = ginp[..., -1]                                                # (K, B)
    km, ks = _kl_grads(zm, zs, posterior.gamma)
    gz_mean = np.zeros(N)
    gz_logvar = np.zeros(N)
    gz_mean[idx] = gz.sum(axis=0) + scale * km
    gz_logvar[idx] = (gz * noise.latents).sum(axis=0) * 0.5 * z_std + scale * ks
    return energy, [*g_mean, *g_logvar, gz_mean, gz_logvar]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    mc_samples: int = 20
    step_size: float = 1e-2
    steps: int = 3000
    minibatch_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.mc_samples < 1 or self.minibatch_size < 1 or self.steps < 0:
            raise ValueError("mc_samples and minibatch_size must be >= 1, steps >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


def train(posterior: BnnPosterior, data: Dataset, config: TrainConfig):
    """Adam on the alpha energy over shuffled minibatches.

    Returns ``(trained_posterior, energy_trace)``; the trace holds one
    minibatch energy per step.
    """
    N = len(data)
    if N != posterior.n_data:
        raise ValueError(f"dataset has {N} rows but posterior has {posterior.n_data} latents")
    params = posterior.variational_params()
    opt = Adam([p.shape for p in params], config.step_size)
    B = min(config.minibatch_size, N)
    order_rng = np.random.default_rng([config.seed, 0])
    trace = np.empty(config.steps)
    order, pos = order_rng.permutation(N), 0
    current = posterior
    for step in range(config.steps):
        if pos + B > N:
            order, pos = order_rng.permutation(N), 0
        idx = order[pos:pos + B]
        pos += B
        rng = np.random.default_rng([config.seed, 1, step])
        energy, grads = alpha_energy(current, data.inputs[idx], data.targets[idx], idx,
                                     config.alpha, config.mc_samples, rng)
        if not math.isfinite(energy):
            raise FloatingPointError(f"energy diverged at step {step}")
        trace[step] = energy
        params = opt.step(params, grads)
        current = current.with_params(params)
    return current, trace


def predict_samples(posterior: BnnPosterior, x, M: int, S: int, rng: np.random.Generator,
                    latent_variance: Optional[float] = None) -> np.ndarray:
    """(M, S, K) predictive draws: W fixed across the S inner (z, eps) draws.

    Test-time latents come from N(0, gamma) unless ``latent_variance`` is given.
    """
    if M < 1 or S < 1:
        raise ValueError("M and S must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != posterior.feature_dim:
        raise ValueError(f"x has {x.size} features, model expects {posterior.feature_dim}")
    gvar = posterior.gamma if latent_variance is None else latent_variance
    W = sample_weights(posterior, rng, M)
    z = math.sqrt(gvar) * rng.standard_normal((M, S, 1))
    inp = np.concatenate([np.broadcast_to(posterior.net_inputs(x), (M, S, x.size)), z], axis=-1)
    f = mlp.forward(posterior.arch, W, inp)
    f = f + np.sqrt(posterior.noise_variance) * rng.standard_normal(f.shape)
    return posterior.output_shift + posterior.output_scale * f


def predictive_log_likelihood(posterior: BnnPosterior, x: np.ndarray, y: np.ndarray,
                              samples: int, rng: np.random.Generator) -> np.ndarray:
    """Per-row Monte-Carlo estimate of log p(y | x) under the predictive mixture."""
    x = posterior.net_inputs(np.atleast_2d(x))
    y = posterior.net_targets(np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1))
    W = sample_weights(posterior, rng, samples)
    z = math.sqrt(posterior.gamma) * rng.standard_normal((samples, x.shape[0], 1))
    inp = np.concatenate([np.broadcast_to(x, (samples,) + x.shape), z], axis=-1)
    f = mlp.forward(posterior.arch, W, inp)
    ll = gaussian_log_density(y, f, posterior.noise_variance)
    return logsumexp(ll, axis=0) - math.log(samples) - float(np.log(posterior.output_scale).sum())


# ---------------------------------------------------------------------------
# serialization


def posterior_to_dict(posterior: BnnPosterior) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "arch": list(posterior.arch.layer_sizes),
        "lambda": posterior.prior_weight_variance,
        "gamma": posterior.prior_latent_variance,
        "sigma": posterior.noise_variance.tolist(),
        "weight_factors": [{"mean": m.tolist(), "log_variance": s.tolist()}
                           for m, s in zip(posterior.w_mean, posterior.w_logvar)],
        "latent_factors": {"mean": posterior.z_mean.tolist(), "log_variance": posterior.z_logvar.tolist()},
        "standardizer": {k: getattr(posterior, k).tolist()
                         for k in ("input_shift", "input_scale", "output_shift", "output_scale")},
    }


def posterior_from_dict(doc: dict) -> BnnPosterior:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
    try:
        arch = MlpArch(tuple(doc["arch"]))
        wf = doc["weight_factors"]
        return BnnPosterior(
            arch,
            [np.array(f["mean"], dtype=np.float64) for f in wf],
            [np.array(f["log_variance"], dtype=np.float64) for f in wf],
            np.array(doc["latent_factors"]["mean"], dtype=np.float64),
            np.array(doc["latent_factors"]["log_variance"], dtype=np.float64),
            float(doc["lambda"]),
            float(doc["gamma"]),
            np.array(doc["sigma"], dtype=np.float64),
            **{k: np.array(v, dtype=np.float64) for k, v in doc.get("standardizer", {}).items()},
        )
    except KeyError as e:
        raise ValueError(f"model document missing field {e}") from None


def save_posterior(posterior: BnnPosterior, path) -> None:
    with open(path, "w") as fh:
        json.dump(posterior_to_dict(posterior), fh)
        fh.write("\n")


def load_posterior(path) -> BnnPosterior:
    with open(path) as fh:
        return posterior_from_dict(json.load(fh))
