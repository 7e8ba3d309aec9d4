"""Multi-output MLP scorer with hand-written backprop and Adam.

The network maps one item feature vector to a score for every standing
query at once, so ``forward(model, x)[q]`` is the score of item ``x`` for
query ``q``. Hidden layers use ReLU, the output layer is linear.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from listlearn.errors import ConfigurationError, ShapeError, UpdateRejected

DEFAULT_HIDDEN = (64, 64)


@dataclass
class ScoringModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def num_queries(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter arrays interleaved as [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "ScoringModel":
        return ScoringModel(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(
            [m.copy() for m in self.first_moment],
            [v.copy() for v in self.second_moment],
            self.step_count,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def _check_layer_sizes(layer_sizes: Sequence[int]) -> list[int]:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigurationError(f"need at least input and output sizes, got {sizes}")
    if any(s <= 0 for s in sizes) or any(s != ls for s, ls in zip(sizes, layer_sizes)):
        raise ConfigurationError(f"layer sizes must be positive integers, got {list(layer_sizes)}")
    return sizes


def init_model(layer_sizes: Sequence[int], rng_seed: int | np.random.Generator = 0) -> ScoringModel:
    """He-initialised weights (std sqrt(2 / fan_in)), zero biases."""
    sizes = _check_layer_sizes(layer_sizes)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ScoringModel(sizes, weights, biases)


def zero_model(layer_sizes: Sequence[int]) -> ScoringModel:
    sizes = _check_layer_sizes(layer_sizes)
    return ScoringModel(
        sizes,
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )


def _as_batch(model: ScoringModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected features of dimension {model.input_dim}, got shape {x.shape}")
    return x, single


def _forward_cache(model: ScoringModel, x: np.ndarray) -> list[np.ndarray]:
    # activations[i] is the input to layer i; the last entry is the output
    activations = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        activations.append(h)
    return activations


def forward(model: ScoringModel, x) -> np.ndarray:
    """Scores for every query: shape (m,) for one item, (n, m) for a batch."""
    xb, single = _as_batch(model, x)
    out = _forward_cache(model, xb)[-1]
    return out[0] if single else out


def forward_cached(model: ScoringModel, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batch forward pass that also returns the activations for ``backward``."""
    xb, _ = _as_batch(model, x)
    acts = _forward_cache(model, xb)
    return acts[-1], acts


def score(model: ScoringModel, x, q: int) -> float:
    if not 0 <= q < model.num_queries:
        raise IndexError(f"query {q} out of range for {model.num_queries} queries")
    return float(forward(model, x)[q])


def backward(model: ScoringModel, x, output_grad, normalizer: float | None = None,
             cache: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Gradient of sum_n <output_grad[n], forward(x[n])> w.r.t. the parameters.

    The sum is divided by ``normalizer`` (the number of rows by default), so the
    default is the batch average. ``cache`` from ``forward_cached`` on the same
    x and parameters skips the recomputation. Returned arrays follow
    ``model.params`` order.
    """
    xb, _ = _as_batch(model, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (xb.shape[0], model.num_queries):
        raise ShapeError(f"output_grad shape {g.shape} does not match ({xb.shape[0]}, {model.num_queries})")
    if xb.shape[0] == 0:
        raise ShapeError("empty batch")
    scale = 1.0 / (xb.shape[0] if normalizer is None else normalizer)

    acts = _forward_cache(model, xb) if cache is None else cache
    grads: list[np.ndarray] = [None] * (2 * len(model.weights))  # type: ignore[list-item]
    delta = g * scale
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return grads


def adam_init(params: Sequence[np.ndarray] | ScoringModel, learning_rate: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    if isinstance(params, ScoringModel):
        params = params.params
    if learning_rate <= 0:
        raise ConfigurationError("learning rate must be positive")
    return AdamState(
        [np.zeros_like(p) for p in params],
        [np.zeros_like(p) for p in params],
        0,
        float(learning_rate),
        beta1,
        beta2,
        epsilon,
    )


def adam_step(model, state: AdamState, gradients: Sequence[np.ndarray]):
    """One bias-corrected Adam descent step, applied in place.

    ``model`` is a ScoringModel or a list of parameter arrays. Non-finite
    gradients raise UpdateRejected before anything is modified.
    """
    params = model.params if isinstance(model, ScoringModel) else list(model)
    if len(gradients) != len(params):
        raise ShapeError(f"{len(gradients)} gradient arrays for {len(params)} parameters")
    for p, g in zip(params, gradients):
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise UpdateRejected("non-finite gradient; update rejected")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_m = [b1 * m + (1 - b1) * g for m, g in zip(state.first_moment, gradients)]
    new_v = [b2 * v + (1 - b2) * np.square(g) for v, g in zip(state.second_moment, gradients)]
    corr1 = 1 - b1**t
    corr2 = 1 - b2**t
    steps = [
        state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        for m, v in zip(new_m, new_v)
    ]
    if not all(np.all(np.isfinite(p - s)) for p, s in zip(params, steps)):
        raise UpdateRejected("update would produce non-finite parameters")

    for p, s in zip(params, steps):
        p -= s
    state.first_moment = new_m
    state.second_moment = new_v
    state.step_count = t
    return model, state


# -- checkpoint container ---------------------------------------------------


def save_checkpoint(path, model: ScoringModel, adam: AdamState | None = None,
                    extras: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
    """Write model, optimiser state and extra arrays to a single .npz file.

    npz stores raw float64 buffers, so a load gives bit-identical arrays.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    header = {"layer_sizes": model.layer_sizes, "meta": meta or {}, "extras": sorted(extras or {})}
    if adam is not None:
        header["adam"] = {
            "step_count": adam.step_count,
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
        }
        for i, (m, v) in enumerate(zip(adam.first_moment, adam.second_moment)):
            arrays[f"adam_m{i}"] = m
            arrays[f"adam_v{i}"] = v
    for name, arr in (extras or {}).items():
        arrays[f"extra_{name}"] = np.asarray(arr)
    arrays["header"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[ScoringModel, AdamState | None, dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        sizes = header["layer_sizes"]
        n = len(sizes) - 1
        model = ScoringModel(
            list(sizes),
            [data[f"W{i}"].copy() for i in range(n)],
            [data[f"b{i}"].copy() for i in range(n)],
        )
        adam = None
        if "adam" in header:
            a = header["adam"]
            adam = AdamState(
                [data[f"adam_m{i}"].copy() for i in range(2 * n)],
                [data[f"adam_v{i}"].copy() for i in range(2 * n)],
                a["step_count"],
                a["learning_rate"],
                a["beta1"],
                a["beta2"],
                a["epsilon"],
            )
        extras = {name: data[f"extra_{name}"].copy() for name in header["extras"]}
    return model, adam, extras, header["meta"]
