"""Synthetic filtering data, the online interaction loop and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from listlearn import scorer
from listlearn.errors import (
    ConfigurationError,
    ContractViolation,
    GenerationError,
    ShapeError,
    UpdateRejected,
)
from listlearn.feedback import (
    click_config,
    ctr_feedback,
    examination_for,
    ndcg_at_k,
    ndcg_discounts,
    simulate_clicks_pbm,
)
from listlearn.learners import (
    InteractionBatch,
    Learner,
    LearnerConfig,
    LearnerKind,
    greedy_ranking,
)

log = logging.getLogger(__name__)

# stream ids mixed into per-batch seeds so train / eval / baseline draws never overlap
_DATA, _MODEL, _TRAIN, _EVAL, _RANDOM = range(5)


# -- dataset -------------------------------------------------------------------


@dataclass
class DatasetParams:
    num_queries: int = 10
    num_items: int = 2000
    dim: int = 16
    multi_relevance_prob: float = 0.2
    noise: float = 0.3
    test_fraction: float = 0.2
    min_angle_deg: float = 60.0


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    relevance: np.ndarray  # (n, m) bool
    primary: np.ndarray  # (n,) first query each item was drawn for
    prototypes: np.ndarray  # (m, d)
    train_ids: np.ndarray
    test_ids: np.ndarray
    _relevant_by_split: dict = field(default_factory=dict, repr=False)

    @property
    def num_queries(self) -> int:
        return self.relevance.shape[1]

    @property
    def num_items(self) -> int:
        return self.relevance.shape[0]

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_ids
        if name == "test":
            return self.test_ids
        raise ConfigurationError(f"unknown split {name!r}")

    def relevant_in(self, split: str, query: int) -> np.ndarray:
        key = (split, query)
        if key not in self._relevant_by_split:
            ids = self.split(split)
            self._relevant_by_split[key] = ids[self.relevance[ids, query]]
        return self._relevant_by_split[key]

    def check_disjoint(self):
        if np.intersect1d(self.train_ids, self.test_ids).size:
            raise ContractViolation("train and test splits share items")
        if self.train_ids.size + self.test_ids.size != self.num_items:
            raise ContractViolation("splits do not cover the item set")


def _prototypes(m: int, d: int, min_angle_deg: float, rng: np.random.Generator, max_tries: int = 10_000):
    max_cos = math.cos(math.radians(min_angle_deg))
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < m:
        tries += 1
        if tries > max_tries:
            raise GenerationError(
                f"could not place {m} prototypes in {d} dimensions with pairwise angle >= {min_angle_deg} deg"
            )
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        if all(v @ p <= max_cos for p in protos):
            protos.append(v)
    return np.array(protos)


def generate_synthetic_dataset(params: DatasetParams | None = None, seed: int = 0, k: int = 5) -> Dataset:
    """Items clustered around one random unit prototype per query.

    Each item is relevant to one query, or two with probability
    ``multi_relevance_prob``; its feature is the mean of its queries'
    prototypes plus isotropic Gaussian noise. The 80/20 train/test split is
    stratified by each item's first query.
    """
    p = params or DatasetParams()
    m, n, d = p.num_queries, p.num_items, p.dim
    if m < 2:
        raise ConfigurationError("need at least two standing queries")
    if n < m * 2 * k:
        raise ConfigurationError(f"num_items={n} is below num_queries * 2k = {m * 2 * k}")
    rng = np.random.default_rng([seed, _DATA])

    protos = _prototypes(m, d, p.min_angle_deg, rng)
    primary = rng.integers(m, size=n)
    relevance = np.zeros((n, m), dtype=bool)
    relevance[np.arange(n), primary] = True
    multi = rng.random(n) < p.multi_relevance_prob
    # second query uniform among the other m - 1
    second = (primary + rng.integers(1, m, size=n)) % m
    relevance[np.flatnonzero(multi), second[multi]] = True

    centers = (relevance @ protos) / relevance.sum(axis=1, keepdims=True)
    features = centers + p.noise * rng.normal(size=(n, d))

    test_mask = np.zeros(n, dtype=bool)
    for q in range(m):
        members = np.flatnonzero(primary == q)
        rng.shuffle(members)
        test_mask[members[: int(round(p.test_fraction * members.size))]] = True
    data = Dataset(features, relevance, primary, protos, np.flatnonzero(~test_mask), np.flatnonzero(test_mask))

    for split in ("train", "test"):
        counts = relevance[data.split(split)].sum(axis=0)
        short = np.flatnonzero(counts < k)
        if short.size:
            raise GenerationError(
                f"queries {short.tolist()} have fewer than k={k} relevant items in the {split} split "
                f"(counts {counts[short].tolist()}); increase num_items"
            )
    data.check_disjoint()
    return data


# -- interactions ----------------------------------------------------------------


@dataclass
class Interaction:
    query: int
    item_ids: np.ndarray  # (c,)
    relevance: np.ndarray  # (c,) bool, w.r.t. query


def _distinct_rows(n: int, c: int, rows: int, rng: np.random.Generator) -> np.ndarray:
    """(rows, c) indices into range(n), each row c distinct uniform picks."""
    if 2 * c * c > n:
        # dense pools: rejection would stall
        return np.argsort(rng.random((rows, n)), axis=1)[:, :c]
    picks = rng.integers(n, size=(rows, c))
    redo = np.arange(rows)
    while True:
        srt = np.sort(picks[redo], axis=1)
        redo = redo[(srt[:, 1:] == srt[:, :-1]).any(axis=1)]
        if redo.size == 0:
            return picks
        picks[redo] = rng.integers(n, size=(redo.size, c))


def sample_pools(dataset: Dataset, split: str, c: int, batch_size: int, rng: np.random.Generator):
    """Queries (B,) and candidate pools (B, c) of item ids.

    Queries are uniform over the standing queries and pools uniform over the
    split; a pool without a relevant item gets one random slot overwritten by
    a random relevant item.
    """
    ids = dataset.split(split)
    n = ids.size
    if not 1 <= c <= n:
        raise ConfigurationError(f"pool size {c} must be between 1 and the {n} items in the {split} split")
    queries = rng.integers(dataset.num_queries, size=batch_size)
    pools = ids[_distinct_rows(n, c, batch_size, rng)]
    has_rel = dataset.relevance[pools, queries[:, None]].any(axis=1)
    for row in np.flatnonzero(~has_rel):
        slot = rng.integers(c)
        candidates = dataset.relevant_in(split, int(queries[row]))
        pools[row, slot] = candidates[rng.integers(candidates.size)]
    return queries, pools


def sample_interaction(dataset: Dataset, split: str, k: int, c: int, rng: np.random.Generator) -> Interaction:
    if k > c:
        raise ConfigurationError(f"list size k={k} exceeds pool size c={c}")
    queries, pools = sample_pools(dataset, split, c, 1, rng)
    q = int(queries[0])
    return Interaction(q, pools[0], dataset.relevance[pools[0], q])


def random_ranking_baseline(dataset: Dataset, split: str, k: int, c: int, seed: int = 0,
                            num_batches: int = 150, batch_size: int = 100) -> "OfflineResult":
    """Monte Carlo nDCG@k of uniformly shuffled pools: overall and per-batch means."""
    means = np.empty(num_batches)
    for b in range(num_batches):
        rng = np.random.default_rng([seed, _RANDOM, b])
        queries, pools = sample_pools(dataset, split, c, batch_size, rng)
        rel = dataset.relevance[pools, queries[:, None]]
        order = np.argsort(rng.random(pools.shape), axis=1)[:, :k]
        shown = np.take_along_axis(rel, order, axis=1)
        means[b] = float(np.mean(ndcg_at_k(shown, rel.sum(axis=1), k)))
    return OfflineResult(float(means.mean()), means)


# -- configuration and logs ----------------------------------------------------------


@dataclass
class ExperimentConfig:
    learner: str = "reglearn"
    epsilon: float = 0.1
    k: int = 5
    feedback: str = "ndcg"  # "ndcg" or "clicks"
    click_config: str = "perfect"
    pool_size: int = 20
    batch_size: int = 100
    num_batches: int = 5000
    seed: int = 1
    data_seed: int | None = None
    learning_rate: float = 1e-3
    weight_learning_rate: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    use_reward_baseline: bool = False
    eval_batches: int = 150
    eval_batch_size: int = 100
    dataset: DatasetParams = field(default_factory=DatasetParams)

    def __post_init__(self):
        self.learner = LearnerKind.parse(self.learner).value
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.dataset, dict):
            self.dataset = DatasetParams(**self.dataset)
        if self.feedback not in ("ndcg", "clicks"):
            raise ConfigurationError(f"feedback must be 'ndcg' or 'clicks', got {self.feedback!r}")
        if self.k < 1 or self.k > self.pool_size:
            raise ConfigurationError(f"need 1 <= k <= pool size, got k={self.k}, pool size={self.pool_size}")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")
        if self.num_batches < 0:
            raise ConfigurationError("number of batches cannot be negative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.learning_rate <= 0 or (self.weight_learning_rate is not None and self.weight_learning_rate <= 0):
            raise ConfigurationError("learning rates must be positive")
        if self.feedback == "clicks":
            click_config(self.click_config, self.k)  # validates name and k

    @property
    def kind(self) -> LearnerKind:
        return LearnerKind(self.learner)

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def ground_truth_weights(self) -> np.ndarray:
        return ground_truth_weights(self.feedback, self.k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["dataset"] = DatasetParams(**d.get("dataset", {}))
        return cls(**d)


def ground_truth_weights(feedback: str, k: int) -> np.ndarray:
    """Position weights the reward is actually built from."""
    if feedback == "ndcg":
        return ndcg_discounts(k)
    return np.asarray(examination_for(k))


@dataclass
class MetricsLog:
    k: int
    batch: list[int] = field(default_factory=list)
    mean_ndcg: list[float] = field(default_factory=list)
    running_ndcg: list[float] = field(default_factory=list)
    loss: list[float | None] = field(default_factory=list)
    weights: list[np.ndarray | None] = field(default_factory=list)
    interactions: int = 0
    explored: int = 0
    error: str | None = None

    def __len__(self):
        return len(self.batch)

    @property
    def header(self) -> list[str]:
        return ["batch", "mean_ndcg", "running_ndcg", "loss"] + [f"w_{i + 1}" for i in range(self.k)]

    def rows(self):
        for t, mean, run, loss, w in zip(self.batch, self.mean_ndcg, self.running_ndcg, self.loss, self.weights):
            ws = [repr(float(v)) for v in w] if w is not None else [""] * self.k
            yield [str(t), repr(mean), repr(run), "" if loss is None else repr(loss), *ws]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(self.header)
            writer.writerows(self.rows())
        return path

    def window_mean(self, column: str, start: int, stop: int | None) -> float:
        return float(np.mean(getattr(self, column)[start:stop]))


def build_learner(config: ExperimentConfig, num_queries: int, dim: int) -> Learner:
    model = scorer.init_model([dim, *config.hidden, num_queries], np.random.default_rng([config.seed, _MODEL]))
    oracle = config.ground_truth_weights() if config.kind is LearnerKind.ORACLE else None
    lconf = LearnerConfig(config.kind, config.epsilon, config.k, oracle, config.use_reward_baseline)
    return Learner(lconf, model, config.learning_rate, config.weight_learning_rate)


def _query_scores(model: scorer.ScoringModel, features: np.ndarray, queries: np.ndarray) -> np.ndarray:
    b, c, d = features.shape
    out = scorer.forward(model, features.reshape(b * c, d)).reshape(b, c, -1)
    return out[np.arange(b), :, queries]


# -- online loop ----------------------------------------------------------------------


@dataclass
class RunResult:
    log: MetricsLog
    learner: Learner
    dataset: Dataset
    config: ExperimentConfig


def run_online(config: ExperimentConfig, dataset: Dataset | None = None, learner: Learner | None = None) -> RunResult:
    """Batched epsilon-greedy interaction loop with one update per batch.

    Every batch draws its queries, pools, exploration coins and clicks from a
    generator seeded by (seed, batch index), so the log depends only on the
    configuration. A rejected update stops the run; the partial log carries
    the error message.
    """
    if dataset is None:
        dataset = generate_synthetic_dataset(config.dataset, config.effective_data_seed, config.k)
    dataset.check_disjoint()
    if learner is None:
        learner = build_learner(config, dataset.num_queries, dataset.features.shape[1])
    clicks_cfg = click_config(config.click_config, config.k) if config.feedback == "clicks" else None
    k, b = config.k, config.batch_size
    rows = np.arange(b)[:, None]
    metrics = MetricsLog(k)
    total = 0.0

    for t in range(1, config.num_batches + 1):
        rng = np.random.default_rng([config.seed, _TRAIN, t])
        queries, pools = sample_pools(dataset, "train", config.pool_size, b, rng)
        rel = dataset.relevance[pools, queries[:, None]]
        feats = dataset.features[pools]
        scores = _query_scores(learner.model, feats, queries)
        rankings, explored = learner.rank(scores, rng, item_ids=pools)
        shown = rel[rows, rankings]
        ndcg = ndcg_at_k(shown, rel.sum(axis=1), k)
        if clicks_cfg is None:
            reward = ndcg
        else:
            reward = ctr_feedback(simulate_clicks_pbm(shown, clicks_cfg, rng))
        try:
            loss = learner.update(InteractionBatch(queries, feats, rankings, reward, explored))
        except UpdateRejected as exc:
            metrics.error = f"batch {t}: {exc}"
            log.error("run aborted at batch %d: %s", t, exc)
            break
        total += float(ndcg.sum())
        metrics.interactions += b
        metrics.explored += int(explored.sum())
        metrics.batch.append(t)
        metrics.mean_ndcg.append(float(ndcg.mean()))
        metrics.running_ndcg.append(total / metrics.interactions)
        metrics.loss.append(loss)
        metrics.weights.append(None if learner.weights is None else learner.weights.w.copy())
        if t % 1000 == 0:
            log.info("batch %d running nDCG@%d %.4f", t, k, metrics.running_ndcg[-1])
    return RunResult(metrics, learner, dataset, config)


# -- offline evaluation ----------------------------------------------------------------


@dataclass
class OfflineResult:
    mean: float
    batch_means: np.ndarray


def evaluate_offline(ranker, dataset: Dataset, k: int, pool_size: int, seed: int = 0,
                     num_batches: int = 150, batch_size: int = 100) -> OfflineResult:
    """Greedy (exploration-free) nDCG@k on test-split pools.

    ``ranker`` is a Learner, a ScoringModel, or a callable
    ``(queries, pools) -> scores`` returning a (B, c) matrix.
    """
    dataset.check_disjoint()
    if isinstance(ranker, Learner):
        ranker = ranker.model
    means = np.empty(num_batches)
    test_set = set(dataset.test_ids.tolist())
    for i in range(num_batches):
        rng = np.random.default_rng([seed, _EVAL, i])
        queries, pools = sample_pools(dataset, "test", pool_size, batch_size, rng)
        if not test_set.issuperset(np.unique(pools).tolist()):
            raise ContractViolation("evaluation pool contains training items")
        if isinstance(ranker, scorer.ScoringModel):
            scores = _query_scores(ranker, dataset.features[pools], queries)
        else:
            scores = np.asarray(ranker(queries, pools), dtype=np.float64)
        rel = dataset.relevance[pools, queries[:, None]]
        shown = np.take_along_axis(rel, greedy_ranking(scores, k, pools), axis=1)
        means[i] = float(np.mean(ndcg_at_k(shown, rel.sum(axis=1), k)))
    return OfflineResult(float(means.mean()), means)


# -- statistics ----------------------------------------------------------------------------


def t_test_two_tailed(samples_a, samples_b, equal_var: bool = False) -> float:
    """Two-sided p-value of a two-sample t-test (Welch by default)."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractViolation("each sample needs at least two values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 or vb == 0:
        raise ContractViolation("each sample needs nonzero variance")
    diff = a.mean() - b.mean()
    if equal_var:
        dof = na + nb - 2
        pooled = ((na - 1) * va + (nb - 1) * vb) / dof
        se2 = pooled * (1 / na + 1 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        dof = se2**2 / (qa**2 / (na - 1) + qb**2 / (nb - 1))
    t = diff / math.sqrt(se2)
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), dof)))


@dataclass
class WeightReport:
    distance: float
    strictly_decreasing: bool
    order_matches: bool
    learned: np.ndarray
    ground_truth: np.ndarray

    def to_dict(self) -> dict:
        return {
            "distance": self.distance,
            "strictly_decreasing": self.strictly_decreasing,
            "order_matches": self.order_matches,
            "learned": self.learned.tolist(),
            "ground_truth": self.ground_truth.tolist(),
        }


def weight_distance(learned_w, ground_truth_w) -> WeightReport:
    """Euclidean distance plus monotonicity and ordering verdicts."""
    lw = np.asarray(learned_w, dtype=np.float64)
    gt = np.asarray(ground_truth_w, dtype=np.float64)
    if lw.shape != gt.shape or lw.ndim != 1:
        raise ShapeError(f"weight vectors differ in shape: {lw.shape} vs {gt.shape}")
    order_l = np.argsort(-lw, kind="stable")
    order_g = np.argsort(-gt, kind="stable")
    return WeightReport(
        float(np.linalg.norm(lw - gt)),
        bool(np.all(np.diff(lw) < 0)),
        bool(np.array_equal(order_l, order_g)),
        lw,
        gt,
    )
