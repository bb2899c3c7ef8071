"""End-to-end training: fusion -> soft quantization -> losses, with Adam.

Gradients are hand-derived; each stage exposes a ``*_backward`` that
consumes the cache of its forward pass. The backbone is frozen, so the
pooled stage descriptors are computed once per dataset and reused by every
epoch.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .losses import LossConfig, contrastive, sr_cel, total_loss
from .numerics import Adam, LinearLayer, ShapeError, StateError, linear_backward, linear_forward
from .pooling import (RHO_PRESETS, FeatureMapSet, FocusFactors, PhpParams, PooledStages,
                      php_backward, php_forward, pool_stages)
from .quantization import Codebook, hard_encode, quant_backward, soft_quantize

log = logging.getLogger(__name__)

VARIANTS = ("default", "gap", "gmp", "ascending", "last_fc", "full_attn", "no_cl")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class HyperParams:
    c2: int = 32
    c3: int = 64
    c4: int = 128
    D: int = 64
    M: int = 4
    K: int = 16
    num_classes: int = 20
    rho: tuple = (3.0, 2.0, 1.0)
    alpha: float = 16.0
    kappa: Optional[int] = 5
    tau: float = 0.5
    m_plus: float = 0.5
    m_minus: float = 3.0
    gamma: float = 1.0
    last_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))
        FocusFactors(*self.rho)
        if self.D % self.M:
            raise ValueError(f"D={self.D} is not divisible by M={self.M}")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.kappa is not None and not 1 <= self.kappa <= self.K:
            raise ValueError(f"kappa must lie in [1, K={self.K}], got {self.kappa}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        LossConfig(self.tau, self.m_plus, self.m_minus, self.gamma)

    @property
    def rhos(self) -> FocusFactors:
        return FocusFactors(*self.rho)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.tau, self.m_plus, self.m_minus, self.gamma)

    @property
    def effective_kappa(self) -> int:
        return self.K if self.kappa is None else self.kappa

    @property
    def bits(self) -> int:
        return self.M * int(self.K - 1).bit_length()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho"] = [r if math.isfinite(r) else "inf" for r in self.rho]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        d = dict(d)
        d["rho"] = tuple(float(r) for r in d["rho"])
        return cls(**d)


def apply_variant(hyper: HyperParams, variant: str) -> HyperParams:
    """Hyperparameters for one of the ablation variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant in ("gap", "gmp", "ascending"):
        return replace(hyper, rho=RHO_PRESETS[variant].as_tuple())
    if variant == "last_fc":
        return replace(hyper, last_only=True)
    if variant == "full_attn":
        return replace(hyper, kappa=hyper.K)
    if variant == "no_cl":
        return replace(hyper, gamma=0.0)
    return hyper


@dataclass
class ModelParams:
    php: PhpParams
    codebook: Codebook
    classifier: LinearLayer
    hyper: HyperParams

    def __post_init__(self):
        h = self.hyper
        if self.php.dims != (h.c2, h.c3, h.c4, h.D):
            raise ShapeError(f"fusion dims {self.php.dims} do not match hyperparameters")
        if self.codebook.raw.shape != (h.M, h.K, h.D // h.M):
            raise ShapeError(f"codebook shape {self.codebook.raw.shape} does not match hyperparameters")
        if (self.classifier.in_features, self.classifier.out_features) != (h.D, h.num_classes):
            raise ShapeError("classifier must map D to num_classes")

    @classmethod
    def init(cls, hyper: HyperParams, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        php = PhpParams.init(hyper.c2, hyper.c3, hyper.c4, hyper.D, rng)
        cb = Codebook.random(hyper.M, hyper.K, hyper.D // hyper.M, rng)
        clf = LinearLayer.init(hyper.D, hyper.num_classes, rng)
        return cls(php, cb, clf, hyper)

    def named_params(self) -> Dict[str, np.ndarray]:
        out = dict(self.php.named_params())
        out["codebook"] = self.codebook.raw
        for k, v in self.classifier.params().items():
            out[f"classifier.{k}"] = v
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.php.copy(), self.codebook.copy(), self.classifier.copy(),
                           self.hyper)


def _match_scale(layer: LinearLayer, x: np.ndarray, target: float) -> np.ndarray:
    """Rescale rows of ``layer`` so its outputs on ``x`` are zero-mean with std ``target``."""
    y = linear_forward(layer, x)
    std = y.std(axis=0)
    gain = target / np.where(std > 0, std, 1.0)
    layer.weight *= gain[:, None]
    if layer.bias is not None:
        layer.bias *= gain
        layer.bias -= (y.mean(axis=0) * gain)
    return linear_forward(layer, x)


def data_init(params: ModelParams, pooled: PooledStages, kmeans: bool = True,
              seed: int = 0) -> ModelParams:
    """Variance-matching start for the fusion layers, then optional k-means codewords.

    Pooled stage descriptors live on very different scales (the 1/HW factor
    shrinks high-rho stages). Each fusion layer is rescaled so its output
    matches the spread of the descriptor it is added to, which gives every
    stage a comparable say in ``z`` at step zero. Only the starting weights
    change; the model itself is untouched.
    """
    php = params.php
    spread3 = float(pooled.f3.std(axis=0).mean()) or 1.0
    spread4 = float(pooled.f4.std(axis=0).mean()) or 1.0
    if not params.hyper.last_only:
        h2 = _match_scale(php.fc1, pooled.f2, spread3)
        h3 = _match_scale(php.fc2, h2 + pooled.f3, spread4)
        h4 = h3 + pooled.f4
    else:
        h4 = pooled.f4
    z = _match_scale(php.g, h4, 1.0)
    if kmeans and len(z) >= params.hyper.K:
        rng = np.random.default_rng(seed)
        params.codebook.raw[...] = Codebook.kmeans(z, params.hyper.M, params.hyper.K, rng).raw
    return params


@dataclass
class ForwardResult:
    z: np.ndarray
    z_hat: np.ndarray
    logits: np.ndarray
    loss: float
    sr_cel: float
    contrastive: float
    cache: Optional[dict] = field(default=None, repr=False)


def _as_pooled(params: ModelParams, batch) -> PooledStages:
    if isinstance(batch, PooledStages):
        return batch
    return pool_stages(batch, params.hyper.rhos)


def embed(params: ModelParams, batch: Union[PooledStages, Sequence[FeatureMapSet]]) -> np.ndarray:
    """Continuous embeddings ``z`` (N, D) for a batch."""
    z, _ = php_forward(_as_pooled(params, batch), params.php, params.hyper.last_only)
    return np.atleast_2d(z)


def encode(params: ModelParams, batch) -> np.ndarray:
    """Hard codes (N, M) for a batch."""
    return hard_encode(embed(params, batch), params.codebook)


def forward_batch(params: ModelParams, batch, labels: Sequence[int]) -> ForwardResult:
    """Full training forward pass; ``batch`` is pooled descriptors or feature-map sets."""
    h = params.hyper
    pooled = _as_pooled(params, batch)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) == 0:
        raise ShapeError("empty batch")
    z, php_cache = php_forward(pooled, params.php, h.last_only)
    z = np.atleast_2d(z)
    if z.shape[0] != len(labels):
        raise ShapeError(f"{len(labels)} labels for a batch of {z.shape[0]}")
    z_hat, q_cache = soft_quantize(z, params.codebook, h.alpha, h.kappa)
    logits = linear_forward(params.classifier, z_hat)
    ce, g_logits = sr_cel(logits, labels, h.tau)
    if h.gamma > 0:
        cl, g_cl = contrastive(z_hat, labels, h.loss)
    else:
        cl, g_cl = 0.0, np.zeros_like(z_hat)
    loss = total_loss(ce, cl, h.gamma)
    cache = dict(php=php_cache, quant=q_cache, z_hat=z_hat, g_logits=g_logits, g_cl=g_cl)
    return ForwardResult(z, z_hat, logits, loss, ce, cl, cache)


def backward_batch(params: ModelParams, result: Optional[ForwardResult],
                   upstream: float = 1.0) -> Dict[str, np.ndarray]:
    """Gradients of ``upstream * loss`` for every entry of :meth:`ModelParams.named_params`."""
    if result is None or result.cache is None:
        raise StateError("backward_batch called without a forward result")
    c = result.cache
    h = params.hyper
    g_logits = upstream * c["g_logits"]
    g_zhat, g_clf = linear_backward(params.classifier, c["z_hat"], g_logits)
    g_zhat = g_zhat + upstream * h.gamma * c["g_cl"]
    g_raw, g_z = quant_backward(c["quant"], g_zhat)
    grads = php_backward(c["php"], params.php, g_z)
    grads["codebook"] = g_raw
    grads.update({f"classifier.{k}": v for k, v in g_clf.items()})
    return grads


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainResult:
    params: ModelParams
    history: List[dict]
    best_params: Optional[ModelParams] = None
    best_epoch: Optional[int] = None
    optimizer: Optional[Adam] = None


def train(params: ModelParams, pooled: PooledStages, labels: Sequence[int], config: TrainConfig,
          val_fn: Optional[Callable[[ModelParams], float]] = None) -> TrainResult:
    """Mini-batch Adam over shuffled batches; ``params`` is updated in place.

    ``val_fn`` (optional) maps the current parameters to a validation MAP and
    is called after every epoch; the best-scoring snapshot is kept alongside
    the last-epoch parameters.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise TrainingError("empty training set")
    if len(pooled) != n:
        raise ShapeError(f"{len(pooled)} samples but {n} labels")
    if params.hyper.gamma > 0 and config.batch_size < 2:
        raise ValueError("contrastive term needs batch_size >= 2")
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.lr)
    named = params.named_params()
    history: List[dict] = []
    best_params, best_epoch, best_map = None, None, -math.inf
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            res = forward_batch(params, pooled.take(idx), labels[idx])
            if not math.isfinite(res.loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b} (first items {idx[:8].tolist()})"
                )
            grads = backward_batch(params, res)
            opt.step(named, grads)
            sums += len(idx) * np.array([res.loss, res.sr_cel, res.contrastive])
        record = dict(zip(("loss", "sr_cel", "contrastive"), (sums / n).tolist()))
        record["epoch"] = epoch
        if val_fn is not None:
            record["val_map"] = float(val_fn(params))
            if record["val_map"] > best_map:
                best_map, best_epoch, best_params = record["val_map"], epoch, params.copy()
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in record.items()})
        history.append(record)
    return TrainResult(params, history, best_params, best_epoch, opt)


# checkpoint format: magic, u32 version, u32 json length + json (hyper and
# optimizer scalars), u32 tensor count, then per tensor: u16 name length,
# name, u32 ndim, u32 extents, float64 payload. Everything little-endian.
CKPT_MAGIC = b"PQCKPT\x00\x01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path: Union[str, Path], params: ModelParams,
                    optimizer: Optional[Adam] = None, extra: Optional[dict] = None) -> None:
    meta = {"hyper": params.hyper.to_dict(), "extra": extra or {}}
    tensors = dict(params.named_params())
    if optimizer is not None:
        meta["optimizer"] = dict(lr=optimizer.lr, beta1=optimizer.beta1, beta2=optimizer.beta2,
                                 eps=optimizer.eps, step_count=optimizer.step_count)
        for k in optimizer.m:
            tensors[f"adam.m.{k}"] = optimizer.m[k]
            tensors[f"adam.v.{k}"] = optimizer.v[k]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path: Union[str, Path]):
    """Returns ``(params, optimizer_or_None, extra)``."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, jlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(take(jlen))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    hyper = HyperParams.from_dict(meta["hyper"])

    def layer(prefix):
        return LinearLayer(tensors[f"{prefix}.weight"], tensors.get(f"{prefix}.bias"))

    params = ModelParams(PhpParams(layer("fc1"), layer("fc2"), layer("g")),
                         Codebook(tensors["codebook"]), layer("classifier"), hyper)
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = Adam(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                   step_count=o["step_count"])
        for name in tensors:
            if name.startswith("adam.m."):
                key = name[len("adam.m."):]
                opt.m[key] = tensors[name]
                opt.v[key] = tensors[f"adam.v.{key}"]
    return params, opt, meta.get("extra", {})
