"""Small differentiable models with exact loss, gradient, Hessian-vector product and Hessian.

Every model kind is a stack of dense layers over a flat float64 parameter
vector: linear regression is ``[d_in, 1]`` with squared error, logistic
regression is ``[d_in, C]`` with softmax cross-entropy, and an MLP adds hidden
layers with tanh or relu. The batch loss is the mean of per-sample losses.

Hessian-vector products use the R-operator (forward-over-reverse) pass, so
they cost about two gradients and never form the Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DENSE_HESSIAN_CAP = 2048

KINDS = ("linear-regression", "logistic-regression", "mlp")
ACTIVATIONS = ("tanh", "relu")
LOSSES = ("squared-error", "cross-entropy")


class ShapeError(ValueError):
    pass


class HessianTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: float | int


@dataclass(frozen=True)
class Batch:
    """Column-stacked samples: ``x`` is ``(b, d_in)``, ``y`` is ``(b,)``."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.x[idx], self.y[idx])

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        return cls(
            np.stack([np.asarray(s.features, dtype=np.float64) for s in samples]),
            np.array([s.label for s in samples]),
        )


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    loss: str = ""
    bias: bool = True
    d: int = field(init=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.loss:
            default = "squared-error" if self.kind == "linear-regression" else "cross-entropy"
            object.__setattr__(self, "loss", default)
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer_sizes must have >= 2 positive widths, got {sizes}")
        if self.kind != "mlp" and len(sizes) != 2:
            raise ValueError(f"{self.kind} takes exactly [d_in, d_out], got {sizes}")
        if self.kind == "linear-regression" and sizes[-1] != 1:
            raise ValueError("linear regression has a single output")
        if self.loss == "squared-error" and sizes[-1] != 1:
            raise ValueError("squared-error loss needs a single output unit")
        if self.loss == "cross-entropy" and sizes[-1] < 2:
            raise ValueError("cross-entropy needs >= 2 output classes")
        d = sum(a * b + (b if self.bias else 0) for a, b in zip(sizes[:-1], sizes[1:]))
        object.__setattr__(self, "d", d)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "loss": self.loss,
            "bias": self.bias,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        return cls(
            kind=obj["kind"],
            layer_sizes=tuple(obj["layer_sizes"]),
            activation=obj.get("activation", "tanh"),
            loss=obj.get("loss", ""),
            bias=obj.get("bias", True),
        )


def unpack(m: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Views ``(W_l, b_l)`` into ``theta``; ``W_l`` has shape ``(n_{l-1}, n_l)``."""
    theta = np.asarray(theta)
    if theta.shape != (m.d,):
        raise ShapeError(f"parameter vector has shape {theta.shape}, model needs ({m.d},)")
    layers = []
    pos = 0
    for a, b in zip(m.layer_sizes[:-1], m.layer_sizes[1:]):
        w = theta[pos : pos + a * b].reshape(a, b)
        pos += a * b
        bias = None
        if m.bias:
            bias = theta[pos : pos + b]
            pos += b
        layers.append((w, bias))
    return layers


def init_params(m: ModelSpec, rng: np.random.Generator, scale: float | None = None) -> np.ndarray:
    """Glorot-style normal init; biases start at zero."""
    parts = []
    for a, b in zip(m.layer_sizes[:-1], m.layer_sizes[1:]):
        s = np.sqrt(1.0 / a) if scale is None else scale
        parts.append((rng.standard_normal((a, b)) * s).ravel())
        if m.bias:
            parts.append(np.zeros(b))
    return np.concatenate(parts)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_d1(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(np.float64)


def _act_d2(name, z, a):
    return -2.0 * a * (1.0 - a * a) if name == "tanh" else np.zeros_like(z)


def _check_batch(m: ModelSpec, batch: Batch):
    if len(batch) == 0:
        raise ShapeError("batch is empty")
    if batch.x.ndim != 2 or batch.x.shape[1] != m.n_in:
        raise ShapeError(f"features have shape {batch.x.shape}, model input width is {m.n_in}")


def _forward(m: ModelSpec, layers, x):
    zs, acts = [], [x]
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w
        if b is not None:
            z = z + b
        zs.append(z)
        if i < len(layers) - 1:
            a = _act(m.activation, z)
            acts.append(a)
    return zs, acts


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _per_sample_loss(m: ModelSpec, out, y):
    if m.loss == "squared-error":
        return 0.5 * (out[:, 0] - y) ** 2
    z = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return logz - z[np.arange(len(y)), y.astype(np.int64)]


def _output_grad(m: ModelSpec, out, y):
    """d(mean loss)/d(output logits)."""
    b = out.shape[0]
    if m.loss == "squared-error":
        return (out - y.reshape(-1, 1)) / b
    p = _softmax(out)
    p[np.arange(b), y.astype(np.int64)] -= 1.0
    return p / b


def loss(m: ModelSpec, theta: np.ndarray, batch: Batch) -> float:
    _check_batch(m, batch)
    zs, _ = _forward(m, unpack(m, theta), batch.x)
    return float(np.mean(_per_sample_loss(m, zs[-1], batch.y)))


def per_sample_losses(m: ModelSpec, theta: np.ndarray, batch: Batch) -> np.ndarray:
    _check_batch(m, batch)
    zs, _ = _forward(m, unpack(m, theta), batch.x)
    return _per_sample_loss(m, zs[-1], batch.y)


def _pack(m: ModelSpec, grads) -> np.ndarray:
    parts = []
    for gw, gb in grads:
        parts.append(gw.ravel())
        if m.bias:
            parts.append(gb)
    return np.concatenate(parts)


def gradient(m: ModelSpec, theta: np.ndarray, batch: Batch) -> np.ndarray:
    _check_batch(m, batch)
    layers = unpack(m, theta)
    zs, acts = _forward(m, layers, batch.x)
    delta = _output_grad(m, zs[-1], batch.y)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            a = acts[i]
            delta = (delta @ layers[i][0].T) * _act_d1(m.activation, zs[i - 1], a)
    return _pack(m, grads)


def hvp(m: ModelSpec, theta: np.ndarray, batch: Batch, v: np.ndarray) -> np.ndarray:
    """Exact ``H(theta) @ v`` for the mean batch loss via the R-operator."""
    _check_batch(m, batch)
    v = np.asarray(v, dtype=np.float64)
    layers = unpack(m, theta)
    dirs = unpack(m, v)
    zs, acts = _forward(m, layers, batch.x)
    nl = len(layers)

    # forward R pass: r_z[i] = R{z_i}, r_a[i] = R{a_i}
    r_a = [np.zeros_like(batch.x)]
    r_z = []
    for i, ((w, _), (vw, vb)) in enumerate(zip(layers, dirs)):
        rz = r_a[i] @ w + acts[i] @ vw
        if vb is not None:
            rz = rz + vb
        r_z.append(rz)
        if i < nl - 1:
            r_a.append(_act_d1(m.activation, zs[i], acts[i + 1]) * rz)

    out = zs[-1]
    b = out.shape[0]
    delta = _output_grad(m, out, batch.y)
    if m.loss == "squared-error":
        r_delta = r_z[-1] / b
    else:
        p = _softmax(out)
        r_delta = p * (r_z[-1] - (p * r_z[-1]).sum(axis=1, keepdims=True)) / b

    grads = [None] * nl
    for i in range(nl - 1, -1, -1):
        grads[i] = (r_a[i].T @ delta + acts[i].T @ r_delta, r_delta.sum(axis=0))
        if i > 0:
            w, vw = layers[i][0], dirs[i][0]
            z, a = zs[i - 1], acts[i]
            back = delta @ w.T
            r_back = r_delta @ w.T + delta @ vw.T
            r_delta = (
                r_back * _act_d1(m.activation, z, a)
                + back * _act_d2(m.activation, z, a) * r_z[i - 1]
            )
            delta = back * _act_d1(m.activation, z, a)
    return _pack(m, grads)


def dense_hessian(m: ModelSpec, theta: np.ndarray, batch: Batch, cap: int = DENSE_HESSIAN_CAP) -> np.ndarray:
    if m.d > cap:
        raise HessianTooLarge(f"d = {m.d} exceeds the dense Hessian cap {cap}; use hvp instead")
    h = np.empty((m.d, m.d))
    e = np.zeros(m.d)
    for i in range(m.d):
        e[i] = 1.0
        h[:, i] = hvp(m, theta, batch, e)
        e[i] = 0.0
    return h


def sgd_displacement(m: ModelSpec, theta: np.ndarray, batch: Batch, eta: float) -> np.ndarray:
    """Parameter change of one SGD step, ``-eta * grad``."""
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta}")
    return -eta * gradient(m, theta, batch)


def predict(m: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    zs, _ = _forward(m, unpack(m, theta), np.asarray(x, dtype=np.float64))
    return zs[-1]


def accuracy(m: ModelSpec, theta: np.ndarray, batch: Batch) -> float:
    out = predict(m, theta, batch.x)
    return float(np.mean(out.argmax(axis=1) == batch.y.astype(np.int64)))
