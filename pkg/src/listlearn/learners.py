"""PGLearn, RegLearn and OracleLearn plus epsilon-greedy list generation.

PGLearn ascends reward * grad log PL(list) (single-sample REINFORCE).
RegLearn regresses the list reward on a weighted sum of the shown items'
scores, learning the position weights jointly with the scorer. OracleLearn
is RegLearn with the weights frozen to known position discounts.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from listlearn import scorer
from listlearn.errors import ConfigurationError, ShapeError, UpdateRejected
from listlearn.plackett_luce import pl_log_prob_grad_batch, pl_sample, pl_sample_batch


class LearnerKind(str, enum.Enum):
    PG = "pglearn"
    REG = "reglearn"
    ORACLE = "oraclelearn"

    @classmethod
    def parse(cls, value) -> "LearnerKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown learner {value!r}; choose from {[k.value for k in cls]}") from None


@dataclass
class DiscountWeights:
    w: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64)
        if self.w.ndim != 1 or self.w.size == 0:
            raise ShapeError(f"discount weights must be a non-empty vector, got shape {self.w.shape}")
        if not np.all(np.isfinite(self.w)):
            raise ConfigurationError("discount weights must be finite")

    @property
    def k(self) -> int:
        return self.w.size


@dataclass
class LearnerConfig:
    kind: LearnerKind
    epsilon: float
    k: int
    oracle_weights: Sequence[float] | None = None
    use_reward_baseline: bool = False

    def __post_init__(self):
        self.kind = LearnerKind.parse(self.kind)
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.k < 1:
            raise ConfigurationError(f"list size must be positive, got {self.k}")
        if (self.oracle_weights is not None) != (self.kind is LearnerKind.ORACLE):
            raise ConfigurationError("oracle_weights must be given exactly when the learner is OracleLearn")
        if self.oracle_weights is not None and len(self.oracle_weights) != self.k:
            raise ConfigurationError(f"oracle_weights has {len(self.oracle_weights)} entries, k={self.k}")


@dataclass
class InteractionRecord:
    query: int
    features: np.ndarray  # (c, d) features of every pool item
    ranking: np.ndarray  # (k,) pool indices, top position first
    reward: float
    explored: bool = False
    item_ids: np.ndarray | None = None


@dataclass
class InteractionBatch:
    """Column-stacked interaction records sharing pool size c and list size k."""

    queries: np.ndarray  # (B,)
    features: np.ndarray  # (B, c, d)
    rankings: np.ndarray  # (B, k)
    rewards: np.ndarray  # (B,)
    explored: np.ndarray = field(default=None)  # (B,) bool

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.intp)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.rankings = np.asarray(self.rankings, dtype=np.intp)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        b = self.queries.shape[0]
        if self.explored is None:
            self.explored = np.zeros(b, dtype=bool)
        if b == 0:
            raise ShapeError("empty interaction batch")
        if self.features.ndim != 3 or self.features.shape[0] != b:
            raise ShapeError(f"features must be (B, c, d) with B={b}, got {self.features.shape}")
        if self.rankings.ndim != 2 or self.rankings.shape[0] != b or self.rewards.shape != (b,):
            raise ShapeError("rankings/rewards do not match the batch size")
        if self.rankings.shape[1] > self.features.shape[1]:
            raise ShapeError("list longer than the candidate pool")

    def __len__(self):
        return self.queries.shape[0]

    @property
    def pool_size(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return self.rankings.shape[1]

    @classmethod
    def from_records(cls, records: Sequence[InteractionRecord]) -> "InteractionBatch":
        if len(records) == 0:
            raise ShapeError("empty interaction batch")
        return cls(
            [r.query for r in records],
            np.stack([r.features for r in records]),
            np.stack([r.ranking for r in records]),
            [r.reward for r in records],
            np.array([r.explored for r in records], dtype=bool),
        )


def _as_batch(batch) -> InteractionBatch:
    return batch if isinstance(batch, InteractionBatch) else InteractionBatch.from_records(batch)


# -- list generation --------------------------------------------------------


def greedy_ranking(scores, k: int, item_ids=None) -> np.ndarray:
    """Top-k pool indices by descending score, ties by ascending item id.

    Works row-wise on a (B, c) matrix as well as on a single vector.
    """
    s = np.asarray(scores, dtype=np.float64)
    ids = np.broadcast_to(np.arange(s.shape[-1]), s.shape) if item_ids is None else np.asarray(item_ids)
    if ids.shape != s.shape:
        raise ShapeError(f"item_ids shape {ids.shape} does not match scores {s.shape}")
    order = np.lexsort((ids, -s), axis=-1)
    return order[..., :k]


def _check_k(k: int, c: int):
    if not 1 <= k <= c:
        raise ConfigurationError(f"list size k={k} must be between 1 and pool size {c}")


def generate_results(scores, k: int, epsilon: float, kind, rng: np.random.Generator,
                     item_ids=None) -> tuple[np.ndarray, bool]:
    """Epsilon-greedy list for one pool: (pool indices, explored flag)."""
    kind = LearnerKind.parse(kind)
    s = np.asarray(scores, dtype=np.float64)
    _check_k(k, s.size)
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return rng.permutation(s.size)[:k], True
    if kind is LearnerKind.PG:
        return pl_sample(s, k, rng), False
    return greedy_ranking(s, k, item_ids), False


def generate_results_batch(scores: np.ndarray, k: int, epsilon: float, kind, rng: np.random.Generator,
                           item_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``generate_results`` over the rows of a (B, c) score matrix."""
    kind = LearnerKind.parse(kind)
    s = np.asarray(scores, dtype=np.float64)
    b, c = s.shape
    _check_k(k, c)
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    explored = rng.random(b) < epsilon
    shuffled = np.argsort(rng.random((b, c)), axis=1)[:, :k]
    if kind is LearnerKind.PG:
        exploit = pl_sample_batch(s, k, rng)
    else:
        exploit = greedy_ranking(s, k, item_ids)
    return np.where(explored[:, None], shuffled, exploit), explored


# -- shared plumbing ---------------------------------------------------------


def _pool_scores(model: scorer.ScoringModel, batch: InteractionBatch):
    """(B, c) scores for each record's query plus the forward cache."""
    b, c, d = batch.features.shape
    out, cache = scorer.forward_cached(model, batch.features.reshape(b * c, d))
    return out.reshape(b, c, -1)[np.arange(b), :, batch.queries], cache


def _chain(model: scorer.ScoringModel, batch: InteractionBatch, score_grad: np.ndarray,
           cache=None) -> list[np.ndarray]:
    """Backprop per-pool-item score gradients (B, c) through the query outputs.

    Gradients are summed within a record and averaged over records.
    """
    b, c, d = batch.features.shape
    out_grad = np.zeros((b, c, model.num_queries))
    out_grad[np.arange(b), :, batch.queries] = score_grad
    return scorer.backward(model, batch.features.reshape(b * c, d), out_grad.reshape(b * c, -1),
                           normalizer=b, cache=cache)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise UpdateRejected("non-finite value in update; model left unchanged")


# -- PGLearn -----------------------------------------------------------------


def _pg_score_gradients(model, batch: InteractionBatch, baseline: float):
    scores, cache = _pool_scores(model, batch)
    g = pl_log_prob_grad_batch(scores, batch.rankings) * (batch.rewards - baseline)[:, None]
    return g, cache


def pg_score_gradients(model: scorer.ScoringModel, batch, baseline: float = 0.0) -> np.ndarray:
    """Per-record ascent direction at score level: (r - b) * grad log PL."""
    return _pg_score_gradients(model, _as_batch(batch), baseline)[0]


def pg_gradients(model: scorer.ScoringModel, batch, baseline: float = 0.0) -> list[np.ndarray]:
    """Parameter gradient of the negated REINFORCE objective (for descent)."""
    batch = _as_batch(batch)
    g, cache = _pg_score_gradients(model, batch, baseline)
    _check_finite(g)
    return _chain(model, batch, -g, cache)


def pg_update(model: scorer.ScoringModel, adam: scorer.AdamState, batch, baseline: float = 0.0):
    grads = pg_gradients(model, batch, baseline)
    _check_finite(*grads)
    scorer.adam_step(model, adam, grads)
    return model


# -- RegLearn / OracleLearn --------------------------------------------------


def reg_predict(weights, list_scores) -> float | np.ndarray:
    """Predicted list reward sum_i w_i * score_i (row-wise for a batch)."""
    w = weights.w if isinstance(weights, DiscountWeights) else np.asarray(weights, dtype=np.float64)
    s = np.asarray(list_scores, dtype=np.float64)
    if s.shape[-1] != w.size:
        raise ShapeError(f"{s.shape[-1]} list scores for {w.size} position weights")
    out = s @ w
    return float(out) if np.ndim(out) == 0 else out


def reg_loss_and_grads(w, list_scores, rewards) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean of 0.5 * (r - r_hat)^2 with its gradients.

    Returns (loss, dL/dw averaged over records, dL/dscores per record). The
    score gradient is left per record; averaging happens when it is chained
    into the scorer.
    """
    w = np.asarray(w, dtype=np.float64)
    s = np.atleast_2d(np.asarray(list_scores, dtype=np.float64))
    r = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
    resid = s @ w - r
    loss = 0.5 * float(np.mean(resid**2))
    dw = (resid[:, None] * s).mean(axis=0)
    ds = resid[:, None] * w[None, :]
    return loss, dw, ds


def reg_gradients(model: scorer.ScoringModel, weights: DiscountWeights, batch):
    """(loss, theta gradients, w gradient) for one batch.

    Only the shown items enter the prediction, so only they are scored.
    """
    batch = _as_batch(batch)
    if batch.k != weights.k:
        raise ShapeError(f"lists of length {batch.k} but {weights.k} position weights")
    b, k = len(batch), batch.k
    d = batch.features.shape[2]
    shown = batch.features[np.arange(b)[:, None], batch.rankings].reshape(b * k, d)
    list_scores = scorer.forward(model, shown).reshape(b, k, -1)[np.arange(b), :, batch.queries]
    loss, dw, ds = reg_loss_and_grads(weights.w, list_scores, batch.rewards)
    _check_finite(np.array(loss), dw, ds)
    out_grad = np.zeros((b, k, model.num_queries))
    out_grad[np.arange(b), :, batch.queries] = ds
    grads = scorer.backward(model, shown, out_grad.reshape(b * k, -1), normalizer=b)
    return loss, grads, dw


def reg_update(model: scorer.ScoringModel, weights: DiscountWeights, adam: scorer.AdamState,
               weight_adam: scorer.AdamState, batch, update_scorer: bool = True):
    """Adam step on both the scorer and the position weights.

    Returns (model, weights, loss); both are modified in place. With
    ``update_scorer=False`` only the weights move.
    """
    if not weights.trainable:
        raise ConfigurationError("reg_update needs trainable weights; use oracle_update for frozen ones")
    loss, grads, dw = reg_gradients(model, weights, batch)
    _check_finite(*grads)
    if update_scorer:
        scorer.adam_step(model, adam, grads)
    scorer.adam_step([weights.w], weight_adam, [dw])
    return model, weights, loss


def oracle_update(model: scorer.ScoringModel, fixed_weights: DiscountWeights, adam: scorer.AdamState, batch):
    """RegLearn step with the weight gradient discarded. Returns (model, loss)."""
    if fixed_weights.trainable:
        raise ConfigurationError("oracle_update expects frozen weights")
    loss, grads, _ = reg_gradients(model, fixed_weights, batch)
    _check_finite(*grads)
    scorer.adam_step(model, adam, grads)
    return model, loss


# -- stateful wrapper used by the experiment loop ------------------------------


class Learner:
    """Scorer, optimiser state and (for RegLearn/OracleLearn) position weights."""

    def __init__(self, config: LearnerConfig, model: scorer.ScoringModel,
                 learning_rate: float = 1e-4, weight_learning_rate: float | None = None):
        self.config = config
        self.model = model
        self.adam = scorer.adam_init(model, learning_rate)
        self.weights: DiscountWeights | None = None
        self.weight_adam: scorer.AdamState | None = None
        if config.kind is LearnerKind.REG:
            self.weights = DiscountWeights(np.ones(config.k), trainable=True)
            self.weight_adam = scorer.adam_init([self.weights.w], weight_learning_rate or learning_rate)
        elif config.kind is LearnerKind.ORACLE:
            self.weights = DiscountWeights(config.oracle_weights, trainable=False)
        self.reward_sum = 0.0
        self.reward_count = 0

    @property
    def kind(self) -> LearnerKind:
        return self.config.kind

    def baseline(self) -> float:
        if not self.config.use_reward_baseline or self.reward_count == 0:
            return 0.0
        return self.reward_sum / self.reward_count

    def rank(self, scores: np.ndarray, rng: np.random.Generator, item_ids=None):
        return generate_results_batch(scores, self.config.k, self.config.epsilon, self.kind, rng, item_ids)

    def update(self, batch) -> float | None:
        """One optimiser step; returns the training loss where one is defined."""
        batch = _as_batch(batch)
        if self.kind is LearnerKind.PG:
            pg_update(self.model, self.adam, batch, self.baseline())
            loss = None
        elif self.kind is LearnerKind.REG:
            _, _, loss = reg_update(self.model, self.weights, self.adam, self.weight_adam, batch)
        else:
            _, loss = oracle_update(self.model, self.weights, self.adam, batch)
        self.reward_sum += float(batch.rewards.sum())
        self.reward_count += len(batch)
        return loss

    def save(self, path, meta: dict | None = None):
        extras = {"reward_stats": np.array([self.reward_sum, float(self.reward_count)])}
        header = {
            "kind": self.kind.value,
            "epsilon": self.config.epsilon,
            "k": self.config.k,
            "use_reward_baseline": self.config.use_reward_baseline,
            **(meta or {}),
        }
        if self.weights is not None:
            extras["w"] = self.weights.w
            header["w_trainable"] = self.weights.trainable
        if self.weight_adam is not None:
            extras["w_adam_m"] = self.weight_adam.first_moment[0]
            extras["w_adam_v"] = self.weight_adam.second_moment[0]
            header["w_adam"] = {
                "step_count": self.weight_adam.step_count,
                "learning_rate": self.weight_adam.learning_rate,
            }
        return scorer.save_checkpoint(path, self.model, self.adam, extras, header)

    @classmethod
    def load(cls, path) -> tuple["Learner", dict]:
        model, adam, extras, meta = scorer.load_checkpoint(path)
        kind = LearnerKind.parse(meta["kind"])
        oracle = extras["w"] if kind is LearnerKind.ORACLE else None
        config = LearnerConfig(kind, meta["epsilon"], meta["k"], oracle, meta.get("use_reward_baseline", False))
        learner = cls(config, model, adam.learning_rate if adam else 1e-4)
        if adam is not None:
            learner.adam = adam
        if kind is LearnerKind.REG:
            learner.weights = DiscountWeights(extras["w"], trainable=True)
            wa = meta["w_adam"]
            learner.weight_adam = scorer.AdamState(
                [extras["w_adam_m"]], [extras["w_adam_v"]], wa["step_count"], wa["learning_rate"]
            )
        learner.reward_sum, count = extras["reward_stats"]
        learner.reward_count = int(count)
        return learner, meta
