"""Data-owner attacks on fingerprinted copies.

Colluding owners merge their copies by element-wise parameter averaging and
may then post-process the merged model to weaken the embedded fingerprints:
fine-tuning on held-out (non-trigger) data, or pruning the least relevant
convolutional channels.  All attacks return new models and preserve the
architecture exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnengine as nn
from .nnengine import Layer, ModelParams, ShapeMismatchError, TrainStepSpec


@dataclass(frozen=True)
class FineTune:
    """Plain SGD on the attacker's held-out data; no watermark terms."""

    epochs: int = 5
    batch: int = 16
    learning_rate: float = 0.001


@dataclass(frozen=True)
class Prune:
    """Zero the least-activated fraction of conv channels per layer."""

    fraction: float = 0.8


@dataclass(frozen=True)
class AttackSpec:
    """A collusion plus an optional post-processing attack."""

    colluders: tuple[int, ...]
    post_attack: FineTune | Prune | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.colluders) == 0:
            raise ValueError("colluders must be nonempty")
        if isinstance(self.post_attack, Prune) and not (
                0.0 <= self.post_attack.fraction < 1.0):
            raise ValueError("prune fraction outside [0, 1)")

    def describe(self) -> dict:
        post = None
        if isinstance(self.post_attack, FineTune):
            post = {"kind": "FineTune", "epochs": self.post_attack.epochs,
                    "batch": self.post_attack.batch,
                    "learning_rate": self.post_attack.learning_rate}
        elif isinstance(self.post_attack, Prune):
            post = {"kind": "Prune", "fraction": self.post_attack.fraction}
        return {"colluders": list(self.colluders), "post_attack": post,
                "seed": self.seed}


def collude(copies) -> ModelParams:
    """Element-wise arithmetic mean of the copies' parameters."""
    copies = list(copies)
    if not copies:
        raise ValueError("need at least one copy to merge")
    first = copies[0]
    for other in copies[1:]:
        if len(other.layers) != len(first.layers):
            raise ShapeMismatchError("copies differ in layer count")
        for la, lb in zip(first.layers, other.layers):
            if la.w.shape != lb.w.shape or la.b.shape != lb.b.shape:
                raise ShapeMismatchError(
                    f"copy shapes differ: {la.w.shape} vs {lb.w.shape}")
    merged = first.copy()
    for i, layer in enumerate(merged.layers):
        w = np.mean([c.layers[i].w for c in copies], axis=0,
                    dtype=np.float64).astype(layer.w.dtype)
        b = np.mean([c.layers[i].b for c in copies], axis=0,
                    dtype=np.float64).astype(layer.b.dtype)
        merged.layers[i] = Layer(layer.kind, w, b)
    return merged


def fine_tune(model: ModelParams, eval_x: np.ndarray, eval_y: np.ndarray,
              epochs: int = 5, batch: int = 16, learning_rate: float = 0.001,
              seed=0) -> ModelParams:
    """Cross-entropy SGD on held-out data (the attacker's forgetting attack).

    Each epoch shuffles the data and consumes sequential mini-batches; the
    trailing partial batch is dropped.  Dropout stays off.
    """
    if len(eval_y) == 0:
        raise ValueError("fine-tuning data is empty")
    out = model.copy()
    rng = np.random.default_rng(seed)
    eval_y = np.asarray(eval_y, dtype=np.int64)
    n = len(eval_y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            pick = order[start:start + batch]
            nn.train_step(out, TrainStepSpec(
                eval_x[pick], eval_y[pick], learning_rate=learning_rate,
                rng=rng))
    return out


def channel_relevance(model: ModelParams, data_x: np.ndarray, layer: int,
                      batch: int = 64) -> np.ndarray:
    """Mean absolute post-ReLU activation per output channel of a conv layer."""
    if model.layers[layer].kind != "conv":
        raise ValueError(f"layer {layer} is not convolutional")
    n_ch = model.layers[layer].w.shape[-1]
    total = np.zeros(n_ch, dtype=np.float64)
    count = 0
    for start in range(0, len(data_x), batch):
        acts = nn.forward_features(model, data_x[start:start + batch], layer)
        total += np.abs(acts).sum(axis=(0, 1, 2), dtype=np.float64)
        count += acts.shape[0] * acts.shape[1] * acts.shape[2]
    return total / max(count, 1)


def prune(model: ModelParams, data_x: np.ndarray, fraction: float,
          batch: int = 64) -> ModelParams:
    """Zero the floor(fraction * channels) least relevant channels per conv layer.

    Relevance is the mean absolute activation on `data_x`, computed layer by
    layer on the progressively pruned model (upstream pruning changes
    downstream activations, as the attacker would observe).  Ties break toward
    the lower channel index.  Dense layers are untouched.
    """
    if not (0.0 <= fraction < 1.0):
        raise ValueError(f"fraction={fraction} outside [0, 1)")
    out = model.copy()
    if fraction == 0.0 or len(data_x) == 0:
        return out
    for i, layer in enumerate(out.layers):
        if layer.kind != "conv":
            continue
        relevance = channel_relevance(out, data_x, i, batch=batch)
        n_zero = int(np.floor(fraction * relevance.shape[0]))
        doomed = np.argsort(relevance, kind="stable")[:n_zero]
        layer.w[..., doomed] = 0.0
        layer.b[doomed] = 0.0
    return out


def run_attack(copies, spec: AttackSpec, data_x: np.ndarray,
               data_y: np.ndarray) -> ModelParams:
    """Merge the colluders' copies and apply the optional post-attack."""
    merged = collude([copies[j] for j in spec.colluders])
    post = spec.post_attack
    if post is None:
        return merged
    if isinstance(post, FineTune):
        return fine_tune(merged, data_x, data_y, epochs=post.epochs,
                         batch=post.batch, learning_rate=post.learning_rate,
                         seed=spec.seed)
    if isinstance(post, Prune):
        return prune(merged, data_x, post.fraction)
    raise TypeError(f"unknown post-attack {post!r}")
