"""Ground-truth generators: two stochastic toy functions and a 1-D MDP."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray   # (N, D)
    targets: np.ndarray  # (N, K)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.targets, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class StochasticFunctionEnv:
    name: str
    sample_x: Callable[[np.random.Generator, int], np.ndarray]
    sample_y: Callable[[np.random.Generator, np.ndarray], np.ndarray]
    conditional_entropy: Optional[Callable[[np.ndarray], np.ndarray]] = None
    domain: tuple = (-np.inf, np.inf)


def _hetero_sample_x(rng, n):
    means = np.array([-4.0, 0.0, 4.0])
    stds = np.array([0.4, 0.9, 0.4])
    comp = rng.integers(0, 3, size=n)
    return (means[comp] + stds[comp] * rng.standard_normal(n))[:, None]


def _hetero_sample_y(rng, x):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return (7.0 * np.sin(x) + 3.0 * np.abs(np.cos(x / 2.0)) * rng.standard_normal(x.size))[:, None]


def _hetero_entropy(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return 0.5 * np.log(2 * np.pi * np.e * 9.0 * np.cos(x / 2.0) ** 2)


def heteroskedastic_env() -> StochasticFunctionEnv:
    """y = 7 sin x + 3|cos(x/2)| eps, x from a three-component Gaussian mixture."""
    return StochasticFunctionEnv(
        "heteroskedastic", _hetero_sample_x, _hetero_sample_y, _hetero_entropy, (-6.0, 6.0)
    )


BIMODAL_RATE = 0.5
BIMODAL_DOMAIN = (-0.5, 2.0)


def _bimodal_sample_x(rng, n):
    lo, hi = BIMODAL_DOMAIN
    out = np.empty(0)
    while out.size < n:
        draw = rng.exponential(1.0 / BIMODAL_RATE, size=2 * (n - out.size) + 8)
        out = np.concatenate([out, draw[(draw >= lo) & (draw <= hi)]])
    return out[:n, None]


def _bimodal_sample_y(rng, x):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    branch = rng.random(x.size) < 0.5
    mean = np.where(branch, 10.0 * np.sin(x), 10.0 * np.cos(x))
    return (mean + rng.standard_normal(x.size))[:, None]


def bimodal_env() -> StochasticFunctionEnv:
    """Equal mixture of 10 sin x + eps and 10 cos x + eps on x in [-0.5, 2]."""
    return StochasticFunctionEnv("bimodal", _bimodal_sample_x, _bimodal_sample_y, None, BIMODAL_DOMAIN)


ENVS = {"heteroskedastic": heteroskedastic_env, "bimodal": bimodal_env}


def get_env(name: str) -> StochasticFunctionEnv:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def make_dataset(env: StochasticFunctionEnv, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = env.sample_x(rng, n)
    return Dataset(x, env.sample_y(rng, x))


# ---------------------------------------------------------------------------
# Synthetic MDP


@dataclass(frozen=True)
class GroundTruthMdp:
    """Stochastic dynamics ``s' = step(s, a, z)``, ``z ~ N(0, 1)``, and a cost in [0, 1].

    ``step``/``cost``/``cost_grad`` act elementwise on arrays whose last axis
    is the state (or action) dimension.
    """

    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray
    step: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    cost: Callable[[np.ndarray], np.ndarray]
    cost_grad: Callable[[np.ndarray], np.ndarray]
    sample_initial: Callable[[np.random.Generator, int], np.ndarray]
    horizon: int = 100
    name: str = "mdp"


def _logistic(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def passage_noise_scale(s):
    return 0.05 + 0.45 * _logistic((np.asarray(s) - 6.0) / 0.3)


def _passage_step(s, a, z):
    s = np.asarray(s, dtype=np.float64)
    return np.clip(s + a + passage_noise_scale(s) * z, 0.0, 10.0)


def _passage_cost(s):
    s = np.asarray(s, dtype=np.float64)
    return (1.0 - np.exp(-0.5 * (s - 9.0) ** 2)).sum(axis=-1)


def _passage_cost_grad(s):
    s = np.asarray(s, dtype=np.float64)
    return (s - 9.0) * np.exp(-0.5 * (s - 9.0) ** 2)


def narrow_passage_mdp(horizon: int = 100) -> GroundTruthMdp:
    """1-D MDP whose low-cost region (s near 9) lies behind a noisy zone s > 6."""
    return GroundTruthMdp(
        state_dim=1,
        action_dim=1,
        action_low=np.array([-1.0]),
        action_high=np.array([1.0]),
        state_low=np.array([0.0]),
        state_high=np.array([10.0]),
        step=_passage_step,
        cost=_passage_cost,
        cost_grad=_passage_cost_grad,
        sample_initial=lambda rng, n: rng.uniform(0.0, 2.0, size=(n, 1)),
        horizon=horizon,
        name="narrow_passage",
    )


@dataclass(frozen=True)
class TransitionBatch:
    states: np.ndarray       # (n, state_dim)
    actions: np.ndarray      # (n, action_dim)
    next_states: np.ndarray  # (n, state_dim)

    def __len__(self):
        return self.states.shape[0]

    def as_dataset(self) -> Dataset:
        return Dataset(np.hstack([self.states, self.actions]), self.next_states)


def behavior_action(rng: np.random.Generator, s: np.ndarray) -> np.ndarray:
    """Uniform exploration below s = 5, a pull back towards low noise above."""
    s = np.asarray(s, dtype=np.float64)
    explore = rng.uniform(-1.0, 1.0, size=s.shape)
    retreat = rng.normal(-0.3, 0.2, size=s.shape)
    return np.clip(np.where(s < 5.0, explore, retreat), -1.0, 1.0)


def collect_batch(mdp: GroundTruthMdp, episodes: int, seed: int) -> TransitionBatch:
    """Roll out the behaviour policy for ``episodes`` episodes of ``mdp.horizon`` steps.

    Episode ``e`` draws from its own stream seeded by ``(seed, e)``.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    S, A, SP = [], [], []
    for e in range(episodes):
        rng = np.random.default_rng([seed, e])
        s = mdp.sample_initial(rng, 1)[0]
        for _ in range(mdp.horizon):
            a = behavior_action(rng, s)
            sp = mdp.step(s, a, rng.standard_normal(mdp.state_dim))
            S.append(s)
            A.append(a)
            SP.append(sp)
            s = sp
    return TransitionBatch(np.array(S), np.array(A), np.array(SP))


def true_rollout_costs(mdp: GroundTruthMdp, policy_fn, s0: np.ndarray, reps: int,
                       rng: np.random.Generator, horizon: Optional[int] = None) -> np.ndarray:
    """Costs ``c(s_1..s_T)`` of ``reps`` ground-truth rollouts from ``s0``; shape (reps, T)."""
    T = mdp.horizon if horizon is None else horizon
    s = np.broadcast_to(np.asarray(s0, dtype=np.float64), (reps, mdp.state_dim)).copy()
    costs = np.empty((reps, T))
    for t in range(T):
        a = policy_fn(s)
        s = mdp.step(s, a, rng.standard_normal(s.shape))
        costs[:, t] = mdp.cost(s)
    return costs
