"""Model-based policy search with M x N rollouts through a latent-variable BNN.

Rollouts draw M weight realizations and, for each, N trajectories that only
resample the latent input and the additive noise. All draws are made up
front, so the same draws give a pathwise gradient by backpropagation
through time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import mlp
from ._adam import Adam
from .bnn import BnnPosterior, sample_weights
from .envs import GroundTruthMdp, narrow_passage_mdp, true_rollout_costs
from .mlp import MlpArch

FORMAT_VERSION = 1
RISK_MODES = ("none", "stddev", "bias")


@dataclass(frozen=True)
class PolicyNet:
    """Deterministic policy: tanh-squashed MLP output scaled into the action box."""

    arch: MlpArch
    params: List[np.ndarray]
    action_low: np.ndarray
    action_high: np.ndarray
    input_shift: np.ndarray
    input_scale: np.ndarray

    def forward_cache(self, s):
        u, cache = mlp.forward_cache(self.arch, self.params, (s - self.input_shift) / self.input_scale)
        t = np.tanh(u)
        half = 0.5 * (self.action_high - self.action_low)
        return self.action_low + half * (t + 1.0), (cache, t, half)

    def act(self, s) -> np.ndarray:
        return self.forward_cache(np.asarray(s, dtype=np.float64))[0]

    def backward_cache(self, cache, g_action):
        mcache, t, half = cache
        grads, g_in = mlp.backward_cache(self.arch, self.params, mcache, g_action * half * (1.0 - t * t))
        return grads, g_in / self.input_scale


def init_policy(state_low, state_high, action_low, action_high, hidden=(20, 20), seed: int = 0,
                output_scale: float = 0.1) -> PolicyNet:
    """Fan-in scaled random policy whose inputs are mapped from the state box to [-1, 1]."""
    state_low, state_high = np.atleast_1d(state_low).astype(float), np.atleast_1d(state_high).astype(float)
    action_low, action_high = np.atleast_1d(action_low).astype(float), np.atleast_1d(action_high).astype(float)
    arch = MlpArch((state_low.size, *hidden, action_low.size))
    rng = np.random.default_rng(seed)
    params = []
    for l, (rows, cols) in enumerate(arch.weight_shapes()):
        w = rng.normal(0.0, 1.0 / math.sqrt(cols - 1), size=(rows, cols))
        w[:, -1] = 0.0
        if l == arch.n_layers - 1:
            w *= output_scale
        params.append(w)
    return PolicyNet(arch, params, action_low, action_high,
                     0.5 * (state_high + state_low), 0.5 * (state_high - state_low))


def policy_to_dict(policy: PolicyNet) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "arch": list(policy.arch.layer_sizes),
        "weights": [w.tolist() for w in policy.params],
        "action_low": policy.action_low.tolist(),
        "action_high": policy.action_high.tolist(),
        "input_shift": policy.input_shift.tolist(),
        "input_scale": policy.input_scale.tolist(),
    }


def policy_from_dict(doc: dict) -> PolicyNet:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported policy format_version {doc.get('format_version')!r}")
    arr = lambda v: np.array(v, dtype=np.float64)
    arch = MlpArch(tuple(doc["arch"]))
    params = [arr(w) for w in doc["weights"]]
    mlp.check_params(arch, params)
    return PolicyNet(arch, params, arr(doc["action_low"]), arr(doc["action_high"]),
                     arr(doc["input_shift"]), arr(doc["input_scale"]))


def save_policy(policy: PolicyNet, path) -> None:
    with open(path, "w") as fh:
        json.dump(policy_to_dict(policy), fh)
        fh.write("\n")


def load_policy(path) -> PolicyNet:
    with open(path) as fh:
        return policy_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# rollouts


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 100
    weight_draws: int = 50
    noise_draws: int = 25
    beta: float = 0.0
    risk_mode: str = "bias"
    starts_per_step: int = 1
    clip_states: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.risk_mode not in RISK_MODES:
            raise ValueError(f"risk_mode must be one of {RISK_MODES}, got {self.risk_mode!r}")
        if self.horizon < 1 or self.noise_draws < 1 or self.weight_draws < 1 or self.starts_per_step < 1:
            raise ValueError("horizon, draws and starts_per_step must be >= 1")
        if self.risk_mode != "none" and self.weight_draws * (self.noise_draws if self.risk_mode == "stddev" else 1) < 2:
            raise ValueError(f"risk_mode {self.risk_mode!r} needs at least two rollouts to compare")

    @property
    def risk_seeking(self) -> bool:
        return self.beta < 0


class RolloutNoise(NamedTuple):
    weights: list        # per layer: (M,) + weight shape, already sampled weights
    latents: np.ndarray  # (M, N, T)
    output: np.ndarray   # (M, N, T, state_dim), standard normal


@dataclass(frozen=True)
class RolloutBatch:
    costs: np.ndarray    # (M, N, T); costs[..., t] = c(s_{t+1})
    states: np.ndarray   # (M, N, T + 1, state_dim)
    actions: np.ndarray  # (M, N, T, action_dim)
    noise: RolloutNoise


def draw_rollout_noise(posterior: BnnPosterior, config: RolloutConfig, rng: np.random.Generator) -> RolloutNoise:
    M, N, T = config.weight_draws, config.noise_draws, config.horizon
    W = sample_weights(posterior, rng, M)
    z = math.sqrt(posterior.gamma) * rng.standard_normal((M, N, T))
    eps = rng.standard_normal((M, N, T, posterior.arch.output_dim))
    return RolloutNoise(W, z, eps)


def _bounds(task, config):
    if config.clip_states and getattr(task, "state_low", None) is not None:
        return task.state_low, task.state_high
    return None


def _simulate(posterior, policy, s0, noise, task, config, keep_cache=False):
    M, N, T = noise.latents.shape
    sd = posterior.arch.output_dim
    bounds = _bounds(task, config)
    noise_sd = np.sqrt(posterior.noise_variance)
    s = np.broadcast_to(np.asarray(s0, dtype=np.float64).reshape(-1), (M, N, sd)).copy()
    states = np.empty((M, N, T + 1, sd))
    states[:, :, 0] = s
    actions = np.empty((M, N, T, policy.action_low.size))
    costs = np.empty((M, N, T))
    caches = []
    for t in range(T):
        a, pcache = policy.forward_cache(s)
        inp = np.concatenate([posterior.net_inputs(np.concatenate([s, a], axis=-1)),
                              noise.latents[:, :, t, None]], axis=-1)
        f, dcache = mlp.forward_cache(posterior.arch, noise.weights, inp)
        s = posterior.output_shift + posterior.output_scale * (f + noise_sd * noise.output[:, :, t])
        mask = None
        if bounds is not None:
            mask = (s >= bounds[0]) & (s <= bounds[1])
            s = np.clip(s, bounds[0], bounds[1])
        if not np.all(np.isfinite(s)):
            m, n, _ = np.argwhere(~np.isfinite(s))[0]
            raise FloatingPointError(f"non-finite model state at (m={m}, n={n}, t={t + 1})")
        states[:, :, t + 1] = s
        actions[:, :, t] = a
        costs[:, :, t] = task.cost(s)
        if keep_cache:
            caches.append((pcache, dcache, mask))
    return RolloutBatch(costs, states, actions, noise), caches


def _task(task):
    return narrow_passage_mdp() if task is None else task


def rollout_batch(posterior: BnnPosterior, policy: PolicyNet, s0, config: RolloutConfig,
                  rng: np.random.Generator, task=None) -> RolloutBatch:
    """M x N model trajectories of length T from ``s0`` under ``policy``.

    ``task`` supplies ``cost`` (and, when ``config.clip_states``, the state
    box); it defaults to the narrow-passage MDP.
    """
    task = _task(task)
    if not np.all(np.isfinite(s0)):
        raise ValueError("start state must be finite")
    noise = draw_rollout_noise(posterior, config, rng)
    return _simulate(posterior, policy, s0, noise, task, config)[0]


# ---------------------------------------------------------------------------
# objectives


def _costs(batch) -> np.ndarray:
    c = batch.costs if isinstance(batch, RolloutBatch) else np.asarray(batch, dtype=np.float64)
    if c.ndim != 3:
        raise ValueError(f"costs must be an (M, N, T) array, got shape {c.shape}")
    return c


def expected_cost_objective(batch) -> float:
    """Monte-Carlo estimate of E[sum_t c_t] over all M x N rollouts."""
    costs = _costs(batch)
    M, N = costs.shape[:2]
    return float(costs.sum() / (M * N))


def stddev_risk_objective(batch, beta: float) -> float:
    """Expected episode cost plus beta times its standard deviation over all rollouts."""
    costs = _costs(batch)
    C = costs.sum(axis=-1).ravel()
    if C.size < 2:
        raise ValueError("stddev risk needs at least two rollouts")
    return expected_cost_objective(costs) + beta * float(np.std(C, ddof=1))


def bias_risk_objective(batch, beta: float) -> float:
    """Per-step expected cost plus beta times the spread of per-weight mean costs."""
    costs = _costs(batch)
    if costs.shape[0] < 2:
        raise ValueError("model-bias risk needs at least two weight draws")
    per_weight = costs.mean(axis=1)                     # (M, T)
    return expected_cost_objective(costs) + beta * float(np.std(per_weight, axis=0, ddof=1).sum())


def objective_value(costs: np.ndarray, config: RolloutConfig) -> float:
    if config.risk_mode == "stddev":
        return stddev_risk_objective(costs, config.beta)
    if config.risk_mode == "bias":
        return bias_risk_objective(costs, config.beta)
    return expected_cost_objective(costs)


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def objective_cost_weights(costs: np.ndarray, config: RolloutConfig) -> np.ndarray:
    """d objective / d c_{m,n}(t), shape (M, N, T)."""
    M, N, T = costs.shape
    G = np.full(costs.shape, 1.0 / (M * N))
    beta = config.beta
    if beta == 0.0 or config.risk_mode == "none":
        return G
    if config.risk_mode == "stddev":
        C = costs.sum(axis=-1)
        sd = np.std(C, ddof=1)
        G += beta * _safe_div(C - C.mean(), (M * N - 1) * sd)[..., None]
    else:
        mu = costs.mean(axis=1)                          # (M, T)
        sd = np.std(mu, axis=0, ddof=1)                  # (T,)
        G += (beta / N) * _safe_div(mu - mu.mean(axis=0), (M - 1) * sd)[:, None, :]
    return G


def _backprop(posterior, policy, batch, caches, G, task):
    M, N, T = batch.costs.shape
    sd = posterior.arch.output_dim
    grads = [np.zeros_like(w) for w in policy.params]
    g_next = np.zeros((M, N, sd))
    for t in range(T - 1, -1, -1):
        pcache, dcache, mask = caches[t]
        g = g_next + G[:, :, t, None] * task.cost_grad(batch.states[:, :, t + 1])
        if mask is not None:
            g = g * mask
        _, g_inp = mlp.backward_cache(posterior.arch, batch.noise.weights, dcache,
                                      g * posterior.output_scale, param_grads=False)
        g_sa = g_inp[..., :-1] / posterior.input_scale
        pg, g_s_pol = policy.backward_cache(pcache, g_sa[..., sd:])
        for acc, p in zip(grads, pg):
            acc += p
        g_next = g_sa[..., :sd] + g_s_pol
    return grads


def policy_gradient(posterior: BnnPosterior, policy: PolicyNet, s0, config: RolloutConfig,
                    rng: np.random.Generator, task=None, need_grad: bool = True):
    """Objective and its pathwise gradient w.r.t. the policy weights.

    ``s0`` may hold several start states (rows); the objective is their mean,
    each start with its own draws.
    """
    task = _task(task)
    starts = np.atleast_2d(np.asarray(s0, dtype=np.float64))
    if not np.all(np.isfinite(starts)):
        raise ValueError("start state must be finite")
    total = 0.0
    grads = [np.zeros_like(w) for w in policy.params] if need_grad else None
    for s in starts:
        noise = draw_rollout_noise(posterior, config, rng)
        batch, caches = _simulate(posterior, policy, s, noise, task, config, keep_cache=need_grad)
        total += objective_value(batch.costs, config)
        if need_grad:
            G = objective_cost_weights(batch.costs, config)
            for acc, g in zip(grads, _backprop(posterior, policy, batch, caches, G, task)):
                acc += g
    k = len(starts)
    if need_grad:
        grads = [g / k for g in grads]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise FloatingPointError("non-finite policy gradient")
    return total / k, grads


def train_policy(posterior: BnnPosterior, start_pool, config: RolloutConfig, train_steps: int = 2000,
                 step_size: float = 1e-3, seed: int = 0, task=None, policy: Optional[PolicyNet] = None,
                 hidden=(20, 20), max_grad_norm: Optional[float] = 100.0):
    """Adam on the configured objective, one uniformly drawn start state per step.

    Backpropagating through long rollouts occasionally yields huge gradients
    (the learned dynamics can be expansive away from the data); one such step
    would swamp Adam's second-moment estimate for many steps, so gradients
    are rescaled to at most ``max_grad_norm`` in global L2 norm.

    Returns ``(policy, objective_trace)``.
    """
    pool = np.atleast_2d(np.asarray(start_pool, dtype=np.float64))
    if pool.size == 0:
        raise ValueError("start-state pool is empty")
    task = _task(task)
    if policy is None:
        if getattr(task, "state_low", None) is None:
            low, high = -np.ones(pool.shape[1]), np.ones(pool.shape[1])
        else:
            low, high = task.state_low, task.state_high
        policy = init_policy(low, high, task.action_low, task.action_high, hidden, seed=seed)
    opt = Adam([w.shape for w in policy.params], step_size)
    params = policy.params
    trace = np.empty(train_steps)
    for step in range(train_steps):
        rng = np.random.default_rng([seed, step])
        s0 = pool[rng.integers(pool.shape[0], size=config.starts_per_step)]
        value, grads = policy_gradient(posterior, policy, s0, config, rng, task)
        if not math.isfinite(value):
            raise FloatingPointError(f"policy objective diverged at step {step}")
        trace[step] = value
        if max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > max_grad_norm:
                grads = [g * (max_grad_norm / norm) for g in grads]
        params = opt.step(params, grads)
        policy = replace(policy, params=params)
    return policy, trace


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ModelBiasReport:
    per_step_gap: np.ndarray
    bias: float
    expected_true_cost: float
    expected_model_cost: float


def _model_mean_costs(model, policy, s0, config, task, rng):
    if isinstance(model, GroundTruthMdp):
        reps = config.weight_draws * config.noise_draws
        return true_rollout_costs(model, policy.act, s0, reps, rng, config.horizon).mean(axis=0)
    batch = rollout_batch(model, policy, s0, config, rng, task)
    return batch.costs.mean(axis=(0, 1))


def evaluate_model_bias(policy: PolicyNet, model: Union[BnnPosterior, GroundTruthMdp], mdp: GroundTruthMdp,
                        start_pool, reps_true: int, config: RolloutConfig, seed: int) -> ModelBiasReport:
    """Sum over t of |E_true[c_t] - E_model[c_t]|, averaged over the start states.

    ``model`` is normally a trained posterior; a ``GroundTruthMdp`` may stand
    in for it (simulated with ``M * N`` rollouts).
    """
    if reps_true < 1:
        raise ValueError("reps_true must be >= 1")
    pool = np.atleast_2d(np.asarray(start_pool, dtype=np.float64))
    gaps, true_tot, model_tot = [], [], []
    for i, s0 in enumerate(pool):
        true_c = true_rollout_costs(mdp, policy.act, s0, reps_true, np.random.default_rng([seed, 0, i]),
                                    config.horizon).mean(axis=0)
        model_c = _model_mean_costs(model, policy, s0, config, mdp, np.random.default_rng([seed, 1, i]))
        gaps.append(np.abs(true_c - model_c))
        true_tot.append(true_c.sum())
        model_tot.append(model_c.sum())
    bias_per_start = [g.sum() for g in gaps]
    return ModelBiasReport(np.mean(gaps, axis=0), float(np.mean(bias_per_start)),
                           float(np.mean(true_tot)), float(np.mean(model_tot)))


def frontier(posterior: BnnPosterior, mdp: GroundTruthMdp, betas: Sequence[float], risk_mode: str,
             seeds: Sequence[int], config: RolloutConfig, start_pool, eval_starts, train_steps: int = 2000,
             step_size: float = 1e-3, reps_true: int = 200, max_grad_norm: Optional[float] = 100.0) -> list:
    """Train and evaluate one policy per (beta, seed); one record each."""
    if len(betas) == 0:
        raise ValueError("betas must be non-empty")
    records = []
    for beta in betas:
        for seed in seeds:
            cfg = replace(config, beta=float(beta), risk_mode=risk_mode, seed=int(seed))
            pol, _ = train_policy(posterior, start_pool, cfg, train_steps, step_size, int(seed), mdp,
                                  max_grad_norm=max_grad_norm)
            rep = evaluate_model_bias(pol, posterior, mdp, eval_starts, reps_true, cfg, seed=int(seed))
            records.append({
                "beta": float(beta),
                "seed": int(seed),
                "expected_model_cost": rep.expected_model_cost,
                "expected_true_cost": rep.expected_true_cost,
                "model_bias": rep.bias,
            })
    return records
