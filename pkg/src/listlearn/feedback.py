"""List-level feedback: ideal nDCG@k and position-based-model clicks."""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from listlearn.errors import ConfigurationError, ContractViolation, ShapeError

# Yandex-fitted PBM examination probabilities for the top five positions.
EXAMINATION_TOP5 = (0.999, 0.959, 0.761, 0.592, 0.457)

# name -> (p(attract | relevant), p(attract | irrelevant))
ATTRACTION = {
    "perfect": (1.0, 0.0),
    "locating": (0.95, 0.05),
    "entertaining": (0.9, 0.4),
}


@dataclass(frozen=True)
class ClickConfig:
    name: str
    p_attract_relevant: float
    p_attract_irrelevant: float
    examination: tuple[float, ...]

    def __post_init__(self):
        probs = (self.p_attract_relevant, self.p_attract_irrelevant, *self.examination)
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise ConfigurationError(f"click config {self.name!r}: probabilities must lie in [0, 1]")
        if len(self.examination) == 0:
            raise ConfigurationError(f"click config {self.name!r}: empty examination vector")

    @property
    def k(self) -> int:
        return len(self.examination)

    def click_probabilities(self, relevances) -> np.ndarray:
        rel = np.asarray(relevances)
        k = rel.shape[-1]
        if k > self.k:
            raise ShapeError(f"config {self.name!r} has {self.k} examination entries, list has {k}")
        attract = np.where(rel > 0, self.p_attract_relevant, self.p_attract_irrelevant)
        return np.asarray(self.examination[:k]) * attract


def examination_for(k: int) -> tuple[float, ...]:
    if not 1 <= k <= len(EXAMINATION_TOP5):
        raise ConfigurationError(
            f"examination probabilities are only known for the top {len(EXAMINATION_TOP5)} "
            f"positions; k={k} is not supported with click feedback"
        )
    return EXAMINATION_TOP5[:k]


def click_config(name: str, k: int = 5) -> ClickConfig:
    """One of the built-in configurations, truncated to k positions."""
    try:
        p_rel, p_irr = ATTRACTION[name]
    except KeyError:
        raise ConfigurationError(f"unknown click configuration {name!r}; choose from {sorted(ATTRACTION)}") from None
    return ClickConfig(name, p_rel, p_irr, examination_for(k))


def load_click_configs(path) -> dict[str, ClickConfig]:
    """Read configurations from an INI-style file, one section per name.

    Missing keys fall back to the built-in values for that name (if any)::

        [locating]
        p_attract_relevant = 0.95
        p_attract_irrelevant = 0.05
        examination = 0.999, 0.959, 0.761, 0.592, 0.457
    """
    parser = configparser.ConfigParser()
    if not parser.read(Path(path)):
        raise ConfigurationError(f"cannot read click config file {path}")
    configs = dict(default_click_configs())
    for name in parser.sections():
        sec = parser[name]
        base = configs.get(name)
        try:
            p_rel = sec.getfloat("p_attract_relevant", fallback=base.p_attract_relevant if base else None)
            p_irr = sec.getfloat("p_attract_irrelevant", fallback=base.p_attract_irrelevant if base else None)
        except ValueError as exc:
            raise ConfigurationError(f"[{name}]: {exc}") from None
        if p_rel is None or p_irr is None:
            raise ConfigurationError(f"[{name}]: attraction probabilities are required")
        if "examination" in sec:
            exam = tuple(float(v) for v in sec["examination"].replace(",", " ").split())
        else:
            exam = base.examination if base else EXAMINATION_TOP5
        configs[name] = ClickConfig(name, p_rel, p_irr, exam)
    return configs


def default_click_configs() -> dict[str, ClickConfig]:
    return {name: click_config(name, len(EXAMINATION_TOP5)) for name in ATTRACTION}


def ndcg_discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(list_relevances, num_relevant_in_pool, k: int | None = None):
    """Binary-gain nDCG@k with the ideal list taken from the candidate pool.

    Accepts a single list (1-D) or a batch of lists (2-D, one row each) with a
    matching vector of relevant-item counts.
    """
    rel = np.asarray(list_relevances, dtype=np.float64)
    if k is None:
        k = rel.shape[-1]
    if rel.shape[-1] != k:
        raise ShapeError(f"expected {k} relevances per list, got {rel.shape[-1]}")
    n_rel = np.asarray(num_relevant_in_pool)
    if np.any(n_rel < 1):
        raise ContractViolation("nDCG is undefined for a pool without relevant items")
    disc = ndcg_discounts(k)
    ideal_cum = np.cumsum(disc)
    dcg = rel @ disc
    idcg = ideal_cum[np.minimum(n_rel, k) - 1]
    out = dcg / idcg
    return float(out) if np.ndim(out) == 0 else out


def simulate_clicks_pbm(list_relevances, config: ClickConfig, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli clicks with P = examination_i * attraction(rel_i).

    Works on a single list or a (B, k) batch.
    """
    p = config.click_probabilities(list_relevances)
    return (rng.random(p.shape) < p).astype(np.int64)


def ctr_feedback(clicks):
    """Click count of a list (sum over the last axis)."""
    c = np.asarray(clicks)
    out = c.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out.astype(np.float64)
