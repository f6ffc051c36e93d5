"""A small VGG-style convolutional network with hand-written backpropagation.

Layout is NHWC. Each conv block is a 3x3 'same' convolution, ReLU and a 2x2
max-pool; the flattened maps feed ReLU dense layers whose last width is the
feature dimension, followed by a sigmoid output layer of one unit per SEP
measure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericalError, ValidationError
from ..rng import substream

BCE_EPS = 1e-7


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int] = (64, 64, 3)
    conv_filters: tuple[int, ...] = (8, 16, 32)
    dense_widths: tuple[int, ...] = (30,)
    n_outputs: int = 3
    seed: int = 0
    kernel_size: int = 3

    def __post_init__(self):
        if self.n_outputs < 1 or not self.dense_widths or min(self.dense_widths) < 1:
            raise ValidationError("need at least one dense layer of positive width and n_outputs >= 1")
        h, w = self.feature_map_shape()[:2]
        if h < 1 or w < 1:
            raise ValidationError(f"input {self.input_shape[:2]} collapses below 1x1 after "
                                  f"{len(self.conv_filters)} pooling steps")

    @property
    def feature_dim(self) -> int:
        return self.dense_widths[-1]

    def feature_map_shape(self) -> tuple[int, int, int]:
        h, w, c = self.input_shape
        for f in self.conv_filters:
            h, w, c = h // 2, w // 2, f
        return h, w, c

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        k = self.kernel_size
        c = self.input_shape[2]
        for i, f in enumerate(self.conv_filters):
            shapes[f"conv{i}.W"] = (f, k, k, c)
            shapes[f"conv{i}.b"] = (f,)
            c = f
        fan = int(np.prod(self.feature_map_shape()))
        for i, width in enumerate(self.dense_widths):
            shapes[f"fc{i}.W"] = (width, fan)
            shapes[f"fc{i}.b"] = (width,)
            fan = width
        shapes["out.W"] = (self.n_outputs, fan)
        shapes["out.b"] = (self.n_outputs,)
        return shapes

    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.layer_shapes().values())

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_filters": list(self.conv_filters),
            "dense_widths": list(self.dense_widths),
            "n_outputs": self.n_outputs,
            "seed": self.seed,
            "kernel_size": self.kernel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(d["conv_filters"]), tuple(d["dense_widths"]),
                   int(d["n_outputs"]), int(d["seed"]), int(d.get("kernel_size", 3)))


@dataclass
class NetworkParams:
    spec: NetworkSpec
    weights: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.spec.layer_shapes()
        if list(self.weights) != list(shapes):
            raise ValidationError(f"parameter names {list(self.weights)} do not match the spec")
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise ValidationError(f"{name}: shape {self.weights[name].shape} != {shape}")
        if not self.velocity:
            self.velocity = {k: np.zeros_like(v) for k, v in self.weights.items()}

    @property
    def dtype(self):
        return self.weights["out.W"].dtype

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.weights.items()},
                             {k: v.copy() for k, v in self.velocity.items()})

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.astype(dtype) for k, v in self.weights.items()},
                             {k: v.astype(dtype) for k, v in self.velocity.items()})


def build_network(spec: NetworkSpec, dtype=np.float64) -> NetworkParams:
    """He-uniform weights, zero biases, zero momentum buffers."""
    rng = substream(spec.seed, "network_init")
    weights = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            limit = math.sqrt(6.0 / fan_in)
            weights[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return NetworkParams(spec, weights)


# -- layer primitives ------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N,H,W,C,k,k
    N, H, W, C = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(N * H * W, k * k * C)


def conv_forward(x, W, b):
    N, H, Wd, _ = x.shape
    F, k = W.shape[0], W.shape[1]
    cols = _im2col(x, k)
    out = cols @ W.reshape(F, -1).T + b
    return out.reshape(N, H, Wd, F), cols


def conv_backward(dout, x_shape, cols, W, need_dx: bool = True):
    N, H, Wd, C = x_shape
    F, k = W.shape[0], W.shape[1]
    d2 = dout.reshape(-1, F)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    pad = k // 2
    dxp = np.zeros((N, H + 2 * pad, Wd + 2 * pad, C), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + Wd, :] += (d2 @ W[:, i, j, :]).reshape(N, H, Wd, C)
    return dxp[:, pad:pad + H, pad:pad + Wd, :], dW, db


def _quadrants(x, h, w):
    return (x[:, 0:2 * h:2, 0:2 * w:2], x[:, 0:2 * h:2, 1:2 * w:2],
            x[:, 1:2 * h:2, 0:2 * w:2], x[:, 1:2 * h:2, 1:2 * w:2])


def pool_forward(x):
    """2x2 max-pool; odd trailing rows/columns are dropped.

    Returns the pooled maps and, per output cell, the index 0..3 of the winning
    quadrant (the first one on ties), which is where backward sends the gradient.
    """
    N, H, W, C = x.shape
    h, w = H // 2, W // 2
    q = _quadrants(x, h, w)
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    arg = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        arg[q[k] == out] = k
    return out, arg


def pool_backward(dout, arg, x_shape):
    N, H, W, C = x_shape
    h, w = H // 2, W // 2
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for k, view in enumerate(_quadrants(dx, h, w)):
        view[...] = np.where(arg == k, dout, 0)
    return dx


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- network -----------------------------------------------------------------------

def _check_batch(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(params.spec.input_shape):
        raise ValidationError(f"batch shape {x.shape} does not match network input {params.spec.input_shape}")
    return x.astype(params.dtype, copy=False)


def forward(params: NetworkParams, x: np.ndarray, cache: bool = False):
    """Return (probabilities, penultimate activations[, cache])."""
    x = _check_batch(params, x)
    w = params.weights
    spec = params.spec
    tape = []
    h = x
    for i in range(len(spec.conv_filters)):
        z, cols = conv_forward(h, w[f"conv{i}.W"], w[f"conv{i}.b"])
        a = np.maximum(z, 0)
        p, arg = pool_forward(a)
        tape.append(("conv", h.shape, cols, z, a.shape, arg))
        h = p
    h = h.reshape(h.shape[0], -1)
    for i in range(len(spec.dense_widths)):
        z = h @ w[f"fc{i}.W"].T + w[f"fc{i}.b"]
        tape.append(("fc", h, z))
        h = np.maximum(z, 0)
    logits = h @ w["out.W"].T + w["out.b"]
    probs = sigmoid(logits)
    if cache:
        return probs, h, (tape, h, probs)
    return probs, h


def bce_multilabel_loss(probs: np.ndarray, labels: np.ndarray, eps: float = BCE_EPS) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def backward(params: NetworkParams, x: np.ndarray, labels: np.ndarray, eps: float = BCE_EPS):
    """Exact gradients of the clamped multi-label BCE w.r.t. every parameter.

    Returns ``(loss, grads, probs)``.
    """
    probs, _, (tape, h_last, _) = forward(params, x, cache=True)
    y = np.asarray(labels, dtype=probs.dtype).reshape(probs.shape)
    loss = bce_multilabel_loss(probs, y, eps)
    w = params.weights
    # d loss / d logit is (p - y)/m inside the clamp and exactly zero outside it
    inside = (probs > eps) & (probs < 1.0 - eps)
    dlogits = np.where(inside, probs - y, 0.0) / probs.size
    grads = {"out.W": dlogits.T @ h_last, "out.b": dlogits.sum(axis=0)}
    dh = dlogits @ w["out.W"]
    n_fc = len(params.spec.dense_widths)
    n_conv = len(params.spec.conv_filters)
    for i in reversed(range(n_fc)):
        _, h_in, z = tape[n_conv + i]
        dz = dh * (z > 0)
        grads[f"fc{i}.W"] = dz.T @ h_in
        grads[f"fc{i}.b"] = dz.sum(axis=0)
        dh = dz @ w[f"fc{i}.W"]
    dh = dh.reshape((dh.shape[0],) + params.spec.feature_map_shape())
    for i in reversed(range(n_conv)):
        _, in_shape, cols, z, a_shape, arg = tape[i]
        da = pool_backward(dh, arg, a_shape)
        dz = da * (z > 0)
        dh, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = conv_backward(
            dz, in_shape, cols, w[f"conv{i}.W"], need_dx=i > 0)
    ordered = {k: grads[k].astype(params.dtype, copy=False) for k in w}
    return loss, ordered, probs


def sgd_momentum_step(params: NetworkParams, grads: dict[str, np.ndarray], lr: float, momentum: float) -> NetworkParams:
    """Classical momentum: ``v <- mu*v + g``; ``w <- w - lr*v``. Returns new params."""
    if lr <= 0 or not 0 <= momentum < 1:
        raise ValidationError(f"need lr > 0 and momentum in [0, 1), got {lr}, {momentum}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}; training aborted")
    weights, velocity = {}, {}
    for name, wv in params.weights.items():
        v = momentum * params.velocity[name] + grads[name]
        velocity[name] = v
        weights[name] = wv - lr * v
    return NetworkParams(params.spec, weights, velocity)


def binary_accuracy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-output share of correct calls, with p >= 0.5 counted as positive."""
    pred = np.asarray(probs) >= 0.5
    return (pred == np.asarray(labels, dtype=bool)).mean(axis=0)
