"""Kozachenko-Leonenko nearest-neighbour differential entropy."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

BRUTE_FORCE_MAX_N = 4096
DISTANCE_FLOOR = 1e-12

# Bernoulli-number coefficients B_2k / (2k) of the asymptotic series
_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def digamma(x: float) -> float:
    """psi(x) for x > 0 via upward recurrence to x >= 6 and the asymptotic series."""
    x = float(x)
    if not x > 0.0 or not math.isfinite(x):
        raise ValueError(f"digamma requires a finite x > 0, got {x}")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    for c in reversed(_ASYMPTOTIC):
        series = series * inv2 + c
    return acc + math.log(x) - 0.5 / x - series * inv2


@dataclass(frozen=True)
class EntropyEstimate:
    nats: float
    n: int
    k: int
    duplicates: int = 0


def _as_samples(samples) -> np.ndarray:
    pts = np.asarray(samples, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] < 1:
        raise ValueError(f"samples must be an (n, d) matrix, got shape {pts.shape}")
    if pts.shape[0] < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(pts)):
        raise ValueError("samples contain non-finite entries")
    return pts


def _kth_sorted_1d(x: np.ndarray, k: int) -> np.ndarray:
    # in 1-D the k nearest neighbours lie among the k sorted neighbours on each side
    n = x.size
    order = np.argsort(x, kind="stable")
    xs = x[order]
    pad = np.concatenate([np.full(k, -np.inf), xs, np.full(k, np.inf)])
    idx = np.arange(n)[:, None] + k + np.concatenate([np.arange(-k, 0), np.arange(1, k + 1)])
    d = np.abs(pad[idx] - xs[:, None])
    kth = np.partition(d, k - 1, axis=1)[:, k - 1]
    out = np.empty(n)
    out[order] = kth
    return out


def _kth_brute(pts: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    n = pts.shape[0]
    out = np.empty(n)
    sq = np.einsum("ij,ij->i", pts, pts)
    for start in range(0, n, chunk):
        block = pts[start:start + chunk]
        d2 = sq[start:start + chunk, None] + sq[None, :] - 2.0 * block @ pts.T
        # exact recomputation avoids cancellation for nearby points
        d2 = np.maximum(d2, 0.0)
        rows = np.arange(block.shape[0])
        d2[rows, start + rows] = np.inf
        cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
        exact = np.sqrt(((block[:, None, :] - pts[cand]) ** 2).sum(-1))
        out[start:start + chunk] = exact.max(axis=1)
    return out


def kth_neighbor_distances(samples, k: int) -> np.ndarray:
    """Exact Euclidean distance from every point to its k-th nearest other point."""
    pts = _as_samples(samples)
    n, d = pts.shape
    if not 1 <= k <= n - 1:
        raise ValueError(f"need 1 <= k <= n-1, got k={k}, n={n}")
    if d == 1:
        return _kth_sorted_1d(pts[:, 0], k)
    if n <= BRUTE_FORCE_MAX_N:
        return _kth_brute(pts, k)
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    return dist[:, k]


def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d + 1.0)


def kl_entropy(samples, k: int = 3) -> EntropyEstimate:
    """Kozachenko-Leonenko estimate (nats) of the entropy behind ``samples``.

    Zero neighbour distances are clamped to ``DISTANCE_FLOOR`` and counted in
    ``EntropyEstimate.duplicates``; callers decide whether that is acceptable.
    """
    pts = _as_samples(samples)
    n, d = pts.shape
    if np.all(pts == pts[0]):
        raise ValueError("all samples are identical; entropy is undefined")
    r = kth_neighbor_distances(pts, k)
    dup = int(np.count_nonzero(r < DISTANCE_FLOOR))
    if dup:
        log.warning("%d of %d k-th neighbour distances clamped to %g", dup, n, DISTANCE_FLOOR)
        r = np.maximum(r, DISTANCE_FLOOR)
    nats = digamma(n) - digamma(k) + log_unit_ball_volume(d) + d * float(np.mean(np.log(r)))
    return EntropyEstimate(nats=nats, n=n, k=k, duplicates=dup)
