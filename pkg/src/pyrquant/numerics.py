"""Dense-array helpers shared by the pooling, quantization and training code.

Arrays are plain ``numpy.ndarray`` objects in float64. The few stateful
pieces (linear layers, the Adam optimizer) are small dataclasses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when array extents do not compose."""


class StateError(RuntimeError):
    """Raised when a backward pass is requested without its forward cache."""


@dataclass
class LinearLayer:
    """Affine map ``y = W x + b`` with no activation.

    ``weight`` has shape (out, in). Works on a single vector or on a batch
    stacked along the first axis.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs"
                )

    @property
    def has_bias(self) -> bool:
        return self.bias is not None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_features: int, out_features: int, rng: np.random.Generator,
             bias: bool = True) -> "LinearLayer":
        """Uniform fan-in initialisation (the usual ``1/sqrt(in)`` bound)."""
        bound = 1.0 / np.sqrt(in_features)
        w = rng.uniform(-bound, bound, size=(out_features, in_features))
        b = rng.uniform(-bound, bound, size=out_features) if bias else None
        return cls(w, b)

    @classmethod
    def identity(cls, n: int, bias: bool = True) -> "LinearLayer":
        return cls(np.eye(n), np.zeros(n) if bias else None)

    @classmethod
    def zeros(cls, in_features: int, out_features: int, bias: bool = True) -> "LinearLayer":
        return cls(np.zeros((out_features, in_features)), np.zeros(out_features) if bias else None)

    def params(self) -> Dict[str, np.ndarray]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), None if self.bias is None else self.bias.copy())


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"input width {x.shape[-1]} != layer input width {layer.in_features}")
    y = x @ layer.weight.T
    if layer.bias is not None:
        y = y + layer.bias
    return y


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, {"weight": gW, "bias": gb})`` for a batch ``x`` of shape (N, in)."""
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    grads = {"weight": g2.T @ x2}
    if layer.bias is not None:
        grads["bias"] = g2.sum(axis=0)
    grad_x = grad_out @ layer.weight
    return grad_x, grads


def softmax_scaled(v: np.ndarray, scale: float = 1.0, axis: int = -1) -> np.ndarray:
    """Softmax of ``scale * v`` along ``axis`` with max-subtraction."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    s = scale * v
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Divide by ``||v|| + 1e-12`` so that zero vectors map to zero."""
    v = np.asarray(v, dtype=np.float64)
    return v / (np.linalg.norm(v, axis=axis, keepdims=True) + NORM_EPS)


def l2_normalize_backward(v: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize` at ``v``."""
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    denom = n + NORM_EPS
    dot = np.sum(v * grad_out, axis=axis, keepdims=True)
    # d||v||/dv = v/||v||; at v = 0 that term vanishes
    safe_n = np.where(n > 0, n, 1.0)
    return grad_out / denom - v * dot / (safe_n * denom * denom)


@dataclass
class Adam:
    """Adaptive-moment optimizer over a dict of named parameter arrays.

    Parameters are updated in place. One instance belongs to one training run.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        if set(params) != set(grads):
            raise ShapeError(f"gradient keys {sorted(grads)} do not match params {sorted(params)}")
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in sorted(params):
            p, g = params[name], grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(state: Adam, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    state.step(params, grads)
    return params


def finite_diff_check(f: Callable[[], float], params: np.ndarray, analytic: np.ndarray,
                      h: float = 1e-5, eps: float = 1e-6) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` takes no arguments and reads ``params``, which is perturbed in place
    and restored. The error per coordinate is
    ``|a - n| / (|a| + |n| + eps)``; ``eps`` keeps coordinates whose true
    gradient is zero from being judged on round-off alone.
    """
    params = np.asarray(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != param shape {params.shape}")
    flat = params.reshape(-1)
    if not np.shares_memory(flat, params):
        raise ValueError("params must be a contiguous array that can be perturbed in place")
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective is not finite at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + eps)))
