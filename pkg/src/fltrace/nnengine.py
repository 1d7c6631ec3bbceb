"""Minimal CNN engine: manual forward/backward, dropout, cross-entropy, SGD.

The default architecture is three 3x3 valid convolutions (16, 64, 128 kernels,
ReLU) followed by a single softmax dense layer with 10 outputs.  On 28x28x1
inputs that makes the third conv layer carry exactly 73,728 kernel weights
(3*3*64*128) over a 22x22x128 feature map, and a 61,952-wide dense input.

Convolutions run as im2col GEMMs.  Kernel tensors are stored (cin, kh, kw,
cout) so the sliding-window view flattens straight into the GEMM operand
without a transpose; the flattened conv-3 kernel in that row-major order is
the white-box carrier vector.

Dropout is inverted (scaled at train time), so evaluation mode is the identity.
Parameters are float32 by default; losses and accusation math accumulate in
float64.  Gradient-check tests build float64 models.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .container import load_tfnn, save_tfnn
from .whitebox import ProjectionMatrix, regularizer_loss_and_grad

CARRIER_LAYER = 2  # third convolution carries the white-box fingerprint


class ShapeMismatchError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Forward/backward produced a nonfinite loss."""


@dataclass
class Layer:
    kind: str          # "conv" or "dense"
    w: np.ndarray      # conv: (cin, kh, kw, cout); dense: (d_in, d_out)
    b: np.ndarray      # (cout,)


@dataclass
class ModelParams:
    layers: list[Layer]
    input_hw: int = 28
    in_channels: int = 1

    @property
    def dtype(self):
        return self.layers[0].w.dtype

    @property
    def n_classes(self) -> int:
        return self.layers[-1].w.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams([Layer(l.kind, l.w.copy(), l.b.copy())
                            for l in self.layers],
                           self.input_hw, self.in_channels)

    def param_count(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)

    def carrier_weights(self) -> np.ndarray:
        """Flattened kernel weights of the carrier conv layer (biases excluded)."""
        return self.layers[CARRIER_LAYER].w.reshape(-1)

    def set_carrier_weights(self, flat: np.ndarray) -> None:
        w = self.layers[CARRIER_LAYER].w
        w[...] = np.asarray(flat, dtype=w.dtype).reshape(w.shape)

    def all_finite(self) -> bool:
        return all(np.isfinite(l.w).all() and np.isfinite(l.b).all()
                   for l in self.layers)


@dataclass
class WmTerm:
    """Projection-regularizer attachment for the carrier layer."""
    lam: float
    projection: ProjectionMatrix
    s_col: np.ndarray


@dataclass
class TrainStepSpec:
    batch_x: np.ndarray
    batch_y: np.ndarray
    learning_rate: float = 0.001
    dropout_prob: float = 0.0
    rng: Optional[np.random.Generator] = None
    wm_term: Optional[WmTerm] = None


def build_model(seed, conv_channels: Sequence[int] = (16, 64, 128),
                input_hw: int = 28, in_channels: int = 1, n_classes: int = 10,
                dtype=np.float32) -> ModelParams:
    """He-initialized model: Gaussian weights with variance 2/fan_in, zero biases."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    hw, cin = input_hw, in_channels
    for cout in conv_channels:
        fan_in = 9 * cin
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(cin, 3, 3, cout)).astype(dtype)
        layers.append(Layer("conv", w, np.zeros(cout, dtype=dtype)))
        hw -= 2
        if hw < 1:
            raise ShapeMismatchError(f"input {input_hw} too small for "
                                     f"{len(conv_channels)} valid 3x3 convs")
        cin = cout
    d_in = hw * hw * cin
    w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, n_classes)).astype(dtype)
    layers.append(Layer("dense", w, np.zeros(n_classes, dtype=dtype)))
    return ModelParams(layers, input_hw, in_channels)


def _dropout_mask(shape, p: float, rng, dtype):
    # inverted dropout: surviving units scaled by 1/(1-p)
    return (rng.random(shape) >= p).astype(dtype) / (1.0 - p)


def _conv_cols(a: np.ndarray) -> np.ndarray:
    """im2col: (B,H,W,C) -> (B*h*w, C*9) matching the (cin,kh,kw,cout) kernels."""
    win = sliding_window_view(a, (3, 3), axis=(1, 2))  # (B,h,w,C,3,3)
    b, h, w = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b * h * w, -1), (b, h, w)


def _forward(model: ModelParams, x: np.ndarray, dropout_prob: float,
             rng, keep_cache: bool):
    """Shared forward pass; returns (probs, caches or activation list)."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[..., None]
    expect = (model.input_hw, model.input_hw, model.in_channels)
    if x.shape[1:] != expect:
        raise ShapeMismatchError(f"input shape {x.shape[1:]} != {expect}")
    train_dropout = dropout_prob > 0.0 and rng is not None

    a = x
    caches = []
    for layer in model.layers[:-1]:
        mask = None
        if train_dropout:
            mask = _dropout_mask(a.shape, dropout_prob, rng, model.dtype)
            a = a * mask
        cols, (b, h, w) = _conv_cols(a)
        cout = layer.w.shape[-1]
        z = cols @ layer.w.reshape(-1, cout) + layer.b
        relu_mask = z > 0
        a = np.where(relu_mask, z, 0).reshape(b, h, w, cout)
        caches.append((cols, relu_mask, mask, (b, h, w)))

    dense = model.layers[-1]
    mask = None
    if train_dropout:
        mask = _dropout_mask(a.shape, dropout_prob, rng, model.dtype)
        a = a * mask
    flat = a.reshape(a.shape[0], -1)
    if flat.shape[1] != dense.w.shape[0]:
        raise ShapeMismatchError(
            f"dense input {flat.shape[1]} != weight rows {dense.w.shape[0]}")
    logits = flat @ dense.w + dense.b

    # stable softmax
    shifted = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    probs = ez / ez.sum(axis=1, keepdims=True)
    if keep_cache:
        caches.append((flat, mask, a.shape))
        return probs, caches
    return probs, None


def forward_predict(model: ModelParams, x: np.ndarray, dropout_prob: float = 0.0,
                    rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and argmax predictions.

    Dropout is applied only when both dropout_prob > 0 and an rng is supplied
    (training mode); otherwise the pass is deterministic evaluation.
    """
    probs, _ = _forward(model, x, dropout_prob, rng, keep_cache=False)
    return probs, probs.argmax(axis=1)


def predict_classes(model: ModelParams, x: np.ndarray,
                    batch: int = 64) -> np.ndarray:
    """Argmax class per image, evaluated in memory-bounded batches."""
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), batch):
        _, out[start:start + batch] = forward_predict(model,
                                                      x[start:start + batch])
    return out


def forward_features(model: ModelParams, x: np.ndarray, layer: int) -> np.ndarray:
    """Post-ReLU activations of conv layer `layer` (evaluation mode)."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[..., None]
    a = x
    for k, lay in enumerate(model.layers[:-1]):
        cols, (b, h, w) = _conv_cols(a)
        cout = lay.w.shape[-1]
        z = cols @ lay.w.reshape(-1, cout) + lay.b
        a = np.maximum(z, 0).reshape(b, h, w, cout)
        if k == layer:
            return a
    raise ShapeMismatchError(f"no conv layer with index {layer}")


def loss_and_grads(model: ModelParams, x: np.ndarray, y: np.ndarray,
                   dropout_prob: float = 0.0, rng=None,
                   wm_term: Optional[WmTerm] = None):
    """Mean cross-entropy (+ lambda * regularizer) and gradients per layer.

    This is the gradient-only path: nothing is applied to the model, so the
    aggregator can average gradients across owners before updating.
    """
    y = np.asarray(y)
    probs, caches = _forward(model, x, dropout_prob, rng, keep_cache=True)
    n = probs.shape[0]
    eps = np.finfo(np.float64).tiny
    ce = float(-np.mean(np.log(probs[np.arange(n), y].astype(np.float64) + eps)))

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)

    dlogits = probs.astype(model.dtype, copy=True)
    dlogits[np.arange(n), y] -= 1
    dlogits /= n

    flat, dense_mask, a_shape = caches[-1]
    dense = model.layers[-1]
    grads[-1] = (flat.T @ dlogits, dlogits.sum(axis=0))
    da = (dlogits @ dense.w.T).reshape(a_shape)
    if dense_mask is not None:
        da = da * dense_mask

    for k in range(len(model.layers) - 2, -1, -1):
        cols, relu_mask, drop_mask, (b, h, w) = caches[k]
        layer = model.layers[k]
        cout = layer.w.shape[-1]
        dz = da.reshape(b * h * w, cout) * relu_mask
        dw = (cols.T @ dz).reshape(layer.w.shape)
        db = dz.sum(axis=0)
        grads[k] = (dw, db)
        if k > 0 or drop_mask is not None:
            dcols = dz @ layer.w.reshape(-1, cout).T
            cin = layer.w.shape[0]
            dcols = dcols.reshape(b, h, w, cin, 3, 3)
            da = np.zeros((b, h + 2, w + 2, cin), dtype=model.dtype)
            for ki in range(3):
                for kj in range(3):
                    da[:, ki:ki + h, kj:kj + w, :] += dcols[:, :, :, :, ki, kj]
            if drop_mask is not None:
                da = da * drop_mask

    total = ce
    if wm_term is not None and wm_term.lam != 0.0:
        carrier = model.layers[CARRIER_LAYER]
        w_flat = carrier.w.reshape(-1)
        reg, reg_grad = regularizer_loss_and_grad(w_flat, wm_term.projection,
                                                  wm_term.s_col)
        total = ce + wm_term.lam * reg
        dw, db = grads[CARRIER_LAYER]
        grads[CARRIER_LAYER] = (
            dw + wm_term.lam * reg_grad.reshape(dw.shape).astype(model.dtype),
            db)
    if not np.isfinite(total):
        raise DivergenceError(f"nonfinite loss {total}")
    return total, grads


def apply_grads(model: ModelParams, grads, learning_rate: float) -> None:
    for layer, (dw, db) in zip(model.layers, grads):
        layer.w -= learning_rate * dw.astype(model.dtype, copy=False)
        layer.b -= learning_rate * db.astype(model.dtype, copy=False)


def average_grads(grad_list):
    """Element-wise mean over per-owner gradient lists."""
    n = len(grad_list)
    out = []
    for parts in zip(*grad_list):
        dw = parts[0][0].copy()
        db = parts[0][1].copy()
        for gw, gb in parts[1:]:
            dw += gw
            db += gb
        out.append((dw / n, db / n))
    return out


def train_step(model: ModelParams, spec: TrainStepSpec) -> tuple[ModelParams, float]:
    """One SGD update in place; returns (model, total loss)."""
    if len(spec.batch_x) == 0:
        raise ShapeMismatchError("empty batch")
    if spec.learning_rate <= 0:
        raise ShapeMismatchError(f"learning rate must be > 0, got {spec.learning_rate}")
    loss, grads = loss_and_grads(model, spec.batch_x, spec.batch_y,
                                 spec.dropout_prob, spec.rng, spec.wm_term)
    apply_grads(model, grads, spec.learning_rate)
    return model, loss


def evaluate_accuracy(model: ModelParams, x: np.ndarray, y: np.ndarray,
                      batch: int = 64) -> float:
    """Fraction of argmax predictions matching the labels."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ShapeMismatchError("empty dataset")
    hits = 0
    for lo in range(0, len(y), batch):
        _, pred = forward_predict(model, x[lo:lo + batch])
        hits += int((pred == y[lo:lo + batch]).sum())
    return hits / len(y)


def save_model(model: ModelParams, path) -> None:
    save_tfnn(path, [(l.kind, l.w, l.b) for l in model.layers])


def load_model(path, input_hw: int = 28, in_channels: int = 1) -> ModelParams:
    layers = [Layer(kind, w, b) for kind, w, b in load_tfnn(path)]
    return ModelParams(layers, input_hw, in_channels)
