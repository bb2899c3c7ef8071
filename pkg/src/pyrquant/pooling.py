"""Generalized spatial pooling and the pyramid hybrid fusion chain.

Feature maps are laid out H x W x C (channels last). Every pooling function
also accepts a leading batch axis, i.e. N x H x W x C.

The fusion chain is::

    h2 = fc1(gsp(stage2, rho2))
    h3 = fc2(h2 + gsp(stage3, rho3))
    h4 = h3 + gsp(stage4, rho4)
    z  = g(h4)

The backbone is frozen, so pooled descriptors are constants with respect
to every trainable parameter and can be computed once per dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np

from .numerics import LinearLayer, ShapeError, StateError, linear_backward, linear_forward

STAGES = ("stage2", "stage3", "stage4")


class InputError(ValueError):
    """Feature maps that break the nonnegative (post-ReLU) contract."""


@dataclass
class FeatureMapSet:
    stage2: np.ndarray
    stage3: np.ndarray
    stage4: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        for name in STAGES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 3:
                raise ShapeError(f"{name} must be H x W x C, got shape {arr.shape}")
            setattr(self, name, arr)

    def stages(self):
        return self.stage2, self.stage3, self.stage4

    @property
    def shapes(self):
        return tuple(s.shape for s in self.stages())


def _check_rho(rho: float) -> None:
    if not rho >= 1.0:
        raise ValueError(f"focus factor must be >= 1, got {rho}")


@dataclass(frozen=True)
class FocusFactors:
    """Per-stage focus factors. ``math.inf`` selects exact max pooling."""

    rho_s2: float = 3.0
    rho_s3: float = 2.0
    rho_s4: float = 1.0

    def __post_init__(self):
        for r in self.as_tuple():
            _check_rho(r)

    def as_tuple(self):
        return (self.rho_s2, self.rho_s3, self.rho_s4)

    @property
    def descending(self) -> bool:
        return self.rho_s2 >= self.rho_s3 >= self.rho_s4


# named ablation settings
RHO_PRESETS: Dict[str, FocusFactors] = {
    "default": FocusFactors(3.0, 2.0, 1.0),
    "gap": FocusFactors(1.0, 1.0, 1.0),
    "gmp": FocusFactors(math.inf, math.inf, math.inf),
    "ascending": FocusFactors(1.0, 2.0, 3.0),
}


@dataclass
class PhpParams:
    fc1: LinearLayer
    fc2: LinearLayer
    g: LinearLayer

    def __post_init__(self):
        if self.fc1.out_features != self.fc2.in_features:
            raise ShapeError("fc1 output width must equal fc2 input width (stage3 channels)")
        if self.fc2.out_features != self.g.in_features:
            raise ShapeError("fc2 output width must equal g input width (stage4 channels)")

    @property
    def dims(self):
        """(C2, C3, C4, D)."""
        return (self.fc1.in_features, self.fc1.out_features, self.fc2.out_features,
                self.g.out_features)

    @classmethod
    def init(cls, c2: int, c3: int, c4: int, d: int, rng: np.random.Generator) -> "PhpParams":
        return cls(LinearLayer.init(c2, c3, rng), LinearLayer.init(c3, c4, rng),
                   LinearLayer.init(c4, d, rng))

    def named_params(self) -> Dict[str, np.ndarray]:
        out = {}
        for lname in ("fc1", "fc2", "g"):
            for pname, arr in getattr(self, lname).params().items():
                out[f"{lname}.{pname}"] = arr
        return out

    def copy(self) -> "PhpParams":
        return PhpParams(self.fc1.copy(), self.fc2.copy(), self.g.copy())


def _check_map(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim < 3:
        raise ShapeError(f"feature map must be H x W x C, got shape {F.shape}")
    if F.shape[-3] * F.shape[-2] < 1:
        raise ShapeError("feature map has no spatial positions")
    if np.any(F < 0):
        raise InputError("feature map has negative activations")
    return F


def gsp_pool(F: np.ndarray, rho: float) -> np.ndarray:
    """Per-channel ``(1/HW) * (sum_hw F^rho)^(1/rho)``.

    The power sum is evaluated as ``max * (sum (F/max)^rho)^(1/rho)`` so that
    large ``rho`` cannot overflow. ``rho = inf`` gives ``max / HW``.
    """
    _check_rho(rho)
    F = _check_map(F)
    hw = F.shape[-3] * F.shape[-2]
    mx = F.max(axis=(-3, -2))
    if math.isinf(rho):
        return mx / hw
    if rho == 1.0:
        return F.sum(axis=(-3, -2)) / hw
    safe = np.where(mx > 0, mx, 1.0)
    ratio = F / safe[..., None, None, :]
    norm = safe * np.power(np.power(ratio, rho).sum(axis=(-3, -2)), 1.0 / rho)
    return np.where(mx > 0, norm, 0.0) / hw


def gsp_grad(F: np.ndarray, rho: float) -> np.ndarray:
    """Derivative of each pooled channel w.r.t. the entries of that channel.

    Equal to ``(1/HW) * S^(1/rho - 1) * F^(rho - 1)`` with ``S = sum F^rho``,
    rewritten as ``(1/HW) * (F / S^(1/rho))^(rho - 1)``. All-zero channels get
    a zero gradient for ``rho > 1``. Same shape as ``F``.
    """
    _check_rho(rho)
    F = _check_map(F)
    hw = F.shape[-3] * F.shape[-2]
    if math.isinf(rho):
        flat = F.reshape(F.shape[:-3] + (hw, F.shape[-1]))
        arg = flat.argmax(axis=-2)
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None, :], 1.0, axis=-2)
        return onehot.reshape(F.shape) / hw
    if rho == 1.0:
        return np.full_like(F, 1.0 / hw)
    norm = gsp_pool(F, rho) * hw
    safe = np.where(norm > 0, norm, 1.0)[..., None, None, :]
    return np.power(F / safe, rho - 1.0) / hw


@dataclass
class PooledStages:
    """GSP descriptors of the three stages, each (N, C_i) or (C_i,)."""

    f2: np.ndarray
    f3: np.ndarray
    f4: np.ndarray

    def take(self, idx) -> "PooledStages":
        return PooledStages(self.f2[idx], self.f3[idx], self.f4[idx])

    def __len__(self):
        return len(self.f2)


def pool_stages(fms: Union[FeatureMapSet, Sequence[FeatureMapSet]],
                rhos: FocusFactors) -> PooledStages:
    if isinstance(fms, FeatureMapSet):
        return PooledStages(*(gsp_pool(x, r) for x, r in zip(fms.stages(), rhos.as_tuple())))
    if len(fms) == 0:
        raise ShapeError("empty batch of feature maps")
    out = []
    for stage_idx, rho in enumerate(rhos.as_tuple()):
        maps = [f.stages()[stage_idx] for f in fms]
        if len({m.shape for m in maps}) != 1:
            raise ShapeError(f"{STAGES[stage_idx]} shapes differ within the batch")
        out.append(gsp_pool(np.stack(maps), rho))
    return PooledStages(*out)


@dataclass
class PhpCache:
    pooled: PooledStages
    h2: Optional[np.ndarray]
    u: Optional[np.ndarray]
    h4: np.ndarray
    last_only: bool = False


def php_forward(pooled: PooledStages, params: PhpParams, last_only: bool = False):
    """Fusion chain on precomputed descriptors. Returns ``(z, cache)``.

    ``last_only`` skips fusion and maps the stage4 descriptor straight
    through ``g``.
    """
    c2, c3, c4, _ = params.dims
    if pooled.f4.shape[-1] != c4:
        raise ShapeError(f"stage4 has {pooled.f4.shape[-1]} channels, params expect {c4}")
    if last_only:
        h4 = pooled.f4
        return linear_forward(params.g, h4), PhpCache(pooled, None, None, h4, True)
    if pooled.f2.shape[-1] != c2 or pooled.f3.shape[-1] != c3:
        raise ShapeError(
            f"stage channels ({pooled.f2.shape[-1]}, {pooled.f3.shape[-1]}) do not match "
            f"params ({c2}, {c3})"
        )
    h2 = linear_forward(params.fc1, pooled.f2)
    u = h2 + pooled.f3
    h4 = linear_forward(params.fc2, u) + pooled.f4
    z = linear_forward(params.g, h4)
    return z, PhpCache(pooled, h2, u, h4, False)


def php_fuse(fms: Union[FeatureMapSet, Sequence[FeatureMapSet]], rhos: FocusFactors,
             params: PhpParams, last_only: bool = False) -> np.ndarray:
    """Embedding ``z`` (length D, or N x D for a batch)."""
    z, _ = php_forward(pool_stages(fms, rhos), params, last_only)
    return z


def php_backward(cache: Optional[PhpCache], params: PhpParams,
                 grad_z: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients of the fusion chain given ``dL/dz``.

    Keys follow :meth:`PhpParams.named_params`. Pooled descriptors are
    constants, so no gradient is returned for them.
    """
    if cache is None:
        raise StateError("php_backward called without a forward cache")
    grad_z = np.atleast_2d(grad_z)
    grads: Dict[str, np.ndarray] = {}
    g_h4, gg = linear_backward(params.g, np.atleast_2d(cache.h4), grad_z)
    grads.update({f"g.{k}": v for k, v in gg.items()})
    if cache.last_only:
        for lname in ("fc1", "fc2"):
            for pname, arr in getattr(params, lname).params().items():
                grads[f"{lname}.{pname}"] = np.zeros_like(arr)
        return grads
    g_u, g2 = linear_backward(params.fc2, np.atleast_2d(cache.u), g_h4)
    grads.update({f"fc2.{k}": v for k, v in g2.items()})
    _, g1 = linear_backward(params.fc1, np.atleast_2d(cache.pooled.f2), g_u)
    grads.update({f"fc1.{k}": v for k, v in g1.items()})
    return grads
