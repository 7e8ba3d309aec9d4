"""Plackett-Luce distribution over ranked lists of pool items.

Lists are sequences of pool indices. At every stage the denominator runs
over all pool items not yet placed, which is exactly the distribution that
``pl_sample`` draws from, including when the list is shorter than the pool.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from listlearn.errors import ConfigurationError, ValidationError


def _scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValidationError(f"scores must be a non-empty vector, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    return s


def validate_ranking(ranking: Sequence[int], pool_size: int) -> np.ndarray:
    r = np.asarray(ranking)
    if r.ndim != 1 or r.size == 0:
        raise ValidationError("ranking must be a non-empty sequence")
    if not np.issubdtype(r.dtype, np.integer):
        raise ValidationError(f"ranking entries must be integer pool indices, got {r.dtype}")
    if r.size > pool_size:
        raise ValidationError(f"ranking of length {r.size} exceeds pool of {pool_size}")
    if np.any(r < 0) or np.any(r >= pool_size):
        raise ValidationError(f"ranking {r.tolist()} contains items outside the pool")
    if np.unique(r).size != r.size:
        raise ValidationError(f"ranking {r.tolist()} contains duplicates")
    return r.astype(np.intp)


def _stage_softmaxes(s: np.ndarray, ranking: np.ndarray) -> np.ndarray:
    """Row i is the softmax over items still unplaced at stage i (0 elsewhere)."""
    k, c = ranking.size, s.size
    remaining = np.ones(c, dtype=bool)
    out = np.zeros((k, c))
    for i, item in enumerate(ranking):
        z = np.where(remaining, s, -np.inf)
        e = np.exp(z - z[remaining].max())
        out[i] = e / e.sum()
        remaining[item] = False
    return out


def pl_log_probability(scores, ranking: Sequence[int]) -> float:
    s = _scores(scores)
    r = validate_ranking(ranking, s.size)
    remaining = np.ones(s.size, dtype=bool)
    logp = 0.0
    for item in r:
        rem = s[remaining]
        mx = rem.max()
        logp += s[item] - mx - np.log(np.exp(rem - mx).sum())
        remaining[item] = False
    return float(logp)


def pl_probability(scores, ranking: Sequence[int]) -> float:
    """Probability of drawing ``ranking`` top-down without replacement."""
    return float(np.exp(pl_log_probability(scores, ranking)))


def pl_sample(scores, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a length-k list by sequential softmax draws over unplaced items."""
    s = _scores(scores)
    c = s.size
    if not 1 <= k <= c:
        raise ConfigurationError(f"list size k={k} must be between 1 and pool size {c}")
    remaining = np.ones(c, dtype=bool)
    out = np.empty(k, dtype=np.intp)
    for i in range(k):
        z = np.where(remaining, s, -np.inf)
        p = np.exp(z - z[remaining].max())
        p /= p.sum()
        item = int(rng.choice(c, p=p))
        out[i] = item
        remaining[item] = False
    return out


def pl_sample_batch(scores: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised ``pl_sample`` over the rows of a (B, c) score matrix.

    Uses one uniform per row and stage with inverse-CDF selection, so every
    row is an exact sequential categorical draw.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValidationError(f"expected a (batch, pool) score matrix, got shape {s.shape}")
    b, c = s.shape
    if not 1 <= k <= c:
        raise ConfigurationError(f"list size k={k} must be between 1 and pool size {c}")
    remaining = np.ones((b, c), dtype=bool)
    out = np.empty((b, k), dtype=np.intp)
    rows = np.arange(b)
    for i in range(k):
        z = np.where(remaining, s, -np.inf)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        cdf = np.cumsum(e, axis=1)
        u = rng.random(b) * cdf[:, -1]
        picks = (cdf <= u[:, None]).sum(axis=1)
        # rounding at the top edge must never land on a placed item
        picks = np.minimum(picks, c - 1)
        bad = ~remaining[rows, picks]
        if bad.any():
            picks[bad] = np.array([np.flatnonzero(remaining[r])[-1] for r in rows[bad]])
        out[:, i] = picks
        remaining[rows, picks] = False
    return out


def pl_log_prob_grad(scores, ranking: Sequence[int]) -> np.ndarray:
    """d log PL(ranking) / d scores, one component per pool item.

    Each stage contributes indicator(placed item) minus the stage softmax, so
    the components sum to zero.
    """
    s = _scores(scores)
    r = validate_ranking(ranking, s.size)
    grad = -_stage_softmaxes(s, r).sum(axis=0)
    grad[r] += 1.0
    return grad


def pl_log_prob_grad_batch(scores: np.ndarray, rankings: np.ndarray) -> np.ndarray:
    """Row-wise ``pl_log_prob_grad`` for (B, c) scores and (B, k) rankings."""
    s = np.asarray(scores, dtype=np.float64)
    r = np.asarray(rankings, dtype=np.intp)
    b, c = s.shape
    rows = np.arange(b)
    remaining = np.ones((b, c), dtype=bool)
    grad = np.zeros((b, c))
    for i in range(r.shape[1]):
        z = np.where(remaining, s, -np.inf)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        grad -= e / e.sum(axis=1, keepdims=True)
        grad[rows, r[:, i]] += 1.0
        remaining[rows, r[:, i]] = False
    return grad


def enumerate_rankings(pool_size: int, k: int):
    return itertools.permutations(range(pool_size), k)


def best_ranking_bruteforce(scores, k: int, max_pool: int = 6) -> tuple[tuple[int, ...], float]:
    """Most probable length-k list by exhaustive search (small pools only)."""
    s = _scores(scores)
    if s.size > max_pool:
        raise ConfigurationError(f"brute force limited to pools of {max_pool}, got {s.size}")
    if not 1 <= k <= s.size:
        raise ConfigurationError(f"list size k={k} must be between 1 and pool size {s.size}")
    best, best_p = None, -np.inf
    for perm in enumerate_rankings(s.size, k):
        p = pl_probability(s, perm)
        if p > best_p:
            best, best_p = perm, p
    return best, best_p
