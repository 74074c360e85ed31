"""Small encoder + class/domain heads with hand-written backprop.

Encoder: mean over time frames -> affine -> tanh -> affine (features).
Both heads are affine maps on the features.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from pdscl import losses
from pdscl.core import BatchMeta

PARAM_NAMES = ("w1", "b1", "w2", "b2", "wc", "bc", "wd", "bd")
ENCODER_PARAMS = ("w1", "b1", "w2", "b2")
DOMAIN_HEAD_PARAMS = ("wd", "bd")
LOSS_MODES = ("ce", "ce+pdscl", "dat")

CHECKPOINT_MAGIC = b"PDSCKPT1"


class StaleCacheError(RuntimeError):
    pass


@dataclass
class _ParamSet:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray
    wd: np.ndarray
    bd: np.ndarray

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.items()})

    def astype(self, dtype):
        return self.map(lambda a: np.array(a, dtype=dtype))

    @property
    def size(self) -> int:
        return sum(v.size for _, v in self.items())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())


class ModelParams(_ParamSet):
    @property
    def dims(self):
        """(n_in, hidden, feature_dim)."""
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name, v in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    @classmethod
    def zeros(cls, n_in=128, hidden=64, dim=32, dtype=np.float64):
        return cls(**{k: np.zeros(s, dtype=dtype) for k, s in _shapes(n_in, hidden, dim).items()})


class GradBundle(_ParamSet):
    """One gradient array per ModelParams array, same shapes."""

    def __add__(self, other):
        return GradBundle(**{k: v + getattr(other, k) for k, v in self.items()})

    def scale(self, a):
        return self.map(lambda v: a * v)


def _shapes(n_in, hidden, dim):
    return {
        "w1": (n_in, hidden), "b1": (hidden,),
        "w2": (hidden, dim), "b2": (dim,),
        "wc": (dim, 2), "bc": (2,),
        "wd": (dim, 2), "bd": (2,),
    }


def init_params(seed: int, n_in: int = 128, hidden: int = 64, dim: int = 32) -> ModelParams:
    """Glorot-uniform weights, zero biases, from a seeded generator."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in _shapes(n_in, hidden, dim).items():
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-a, a, size=shape)
        else:
            out[name] = np.zeros(shape)
    return ModelParams(**out)


@dataclass(frozen=True)
class ForwardCache:
    x: np.ndarray
    hidden: np.ndarray
    features: np.ndarray
    params: ModelParams
    fingerprint: str


@dataclass(frozen=True)
class ForwardOutput:
    features: np.ndarray
    class_logits: np.ndarray
    domain_logits: np.ndarray
    cache: ForwardCache | None


@dataclass(frozen=True)
class Upstream:
    """Loss gradients on the model outputs.

    With ``reverse_domain`` the domain-head gradient is sign-flipped where it
    enters the shared features (gradient reversal); the domain head itself
    still sees the unflipped gradient.
    """

    features: np.ndarray | None = None
    class_logits: np.ndarray | None = None
    domain_logits: np.ndarray | None = None
    reverse_domain: bool = False

    def scale(self, a):
        def s(g):
            return None if g is None else a * g
        return replace(self, features=s(self.features), class_logits=s(self.class_logits),
                       domain_logits=s(self.domain_logits))


def pool_frames(specs) -> np.ndarray:
    """(N, frames, mels) -> (N, mels) by averaging over time; 2-D input passes through."""
    x = np.asarray(specs)
    if x.ndim == 3:
        return x.mean(axis=1)
    if x.ndim == 2:
        return x
    raise ValueError(f"expected (N, frames, mels) or pooled (N, mels) input, got shape {x.shape}")


def forward(specs, params: ModelParams, keep_cache: bool = True) -> ForwardOutput:
    """Features, class logits and domain logits for a batch.

    ``keep_cache=False`` skips building the backprop cache (evaluation only).
    """
    x = pool_frames(specs)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    n_in = params.w1.shape[-2]
    if x.shape[-1] != n_in:
        raise ValueError(f"input has {x.shape[1]} mel bands, model expects {n_in}")
    h = np.tanh(x @ params.w1 + params.b1)
    f = h @ params.w2 + params.b2
    zc = f @ params.wc + params.bc
    zd = f @ params.wd + params.bd
    cache = ForwardCache(x, h, f, params, params.fingerprint()) if keep_cache else None
    return ForwardOutput(f, zc, zd, cache)


def backward(cache: ForwardCache, upstream: Upstream) -> GradBundle:
    """Exact parameter gradients of the loss that produced ``upstream``."""
    if cache is None:
        raise StaleCacheError("forward pass was run without keep_cache")
    p = cache.params
    if p.fingerprint() != cache.fingerprint:
        raise StaleCacheError("parameters changed since the forward pass")
    x, h, f = cache.x, cache.hidden, cache.features
    n = x.shape[0]

    def zeros_like_rows(width):
        return np.zeros((n, width), dtype=f.dtype)

    g_zc = upstream.class_logits if upstream.class_logits is not None else zeros_like_rows(2)
    g_zd = upstream.domain_logits if upstream.domain_logits is not None else zeros_like_rows(2)
    g_f = upstream.features if upstream.features is not None else zeros_like_rows(f.shape[1])

    g_f_domain = g_zd @ p.wd.T
    if upstream.reverse_domain:
        g_f_domain = losses.gradient_reversal(g_f_domain)
    g_f = g_f + g_zc @ p.wc.T + g_f_domain

    g_h = (g_f @ p.w2.T) * (1.0 - h * h)
    return GradBundle(
        w1=x.T @ g_h, b1=g_h.sum(axis=0),
        w2=h.T @ g_f, b2=g_f.sum(axis=0),
        wc=f.T @ g_zc, bc=g_zc.sum(axis=0),
        wd=f.T @ g_zd, bd=g_zd.sum(axis=0),
    )


def sgd_step(params: ModelParams, grads: GradBundle, lr: float) -> ModelParams:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return ModelParams(**{k: v - lr * getattr(grads, k) for k, v in params.items()})


@dataclass(frozen=True)
class LossConfig:
    tau: float = losses.DEFAULT_TAU
    lambda_pdscl: float = losses.DEFAULT_LAMBDA_PDSCL
    lambda_dat: float = losses.DEFAULT_LAMBDA_DAT


def training_loss(out: ForwardOutput, meta: BatchMeta, mode: str, cfg: LossConfig = LossConfig()):
    """Loss value and the matching ``Upstream`` for one of the training modes."""
    if mode == "ce":
        ce = losses.cross_entropy(out.class_logits, meta.labels)
        return ce.value, Upstream(class_logits=ce.grad)
    if mode == "ce+pdscl":
        ce = losses.cross_entropy(out.class_logits, meta.labels)
        pd = losses.pdscl_loss(out.features, meta, cfg.tau)
        return ce.value + cfg.lambda_pdscl * pd.value, Upstream(
            features=cfg.lambda_pdscl * pd.grad, class_logits=ce.grad)
    if mode == "dat":
        d = losses.dat_loss(out.class_logits, out.domain_logits, meta, cfg.lambda_dat)
        return d.value, Upstream(class_logits=d.grad_class_logits,
                                 domain_logits=d.grad_domain_logits, reverse_domain=True)
    raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")


def loss_and_grads(params, specs, meta, mode, cfg: LossConfig = LossConfig()):
    out = forward(specs, params)
    value, up = training_loss(out, meta, mode, cfg)
    return value, backward(out.cache, up)


def numeric_objective(params, x, meta, mode, cfg: LossConfig = LossConfig(), domain_sign: float = 1.0):
    """Scalar objective whose true gradient the analytic backward should match.

    For ``dat``, encoder parameters are checked against ``CE - lam * DA``
    (``domain_sign=-1``) and head parameters against ``CE + lam * DA``.
    """
    out = forward(x, params, keep_cache=False)
    if mode == "dat":
        ce = losses.cross_entropy(out.class_logits, meta.labels).value
        da = losses.cross_entropy(out.domain_logits, meta.domain_ids).value
        return ce + domain_sign * cfg.lambda_dat * da
    value, _ = training_loss(out, meta, mode, cfg)
    return value


def numeric_gradient(params, x, meta, mode, cfg: LossConfig = LossConfig(), h: float = 1e-6,
                     dtype=np.longdouble, chunk: int = 64) -> GradBundle:
    """Central finite differences over every parameter, evaluated in ``dtype``.

    Perturbed parameter sets are stacked along a leading axis and evaluated
    ``chunk`` at a time; each entry is still an independent two-point difference.
    """
    p = params.astype(dtype)
    xq = np.asarray(pool_frames(x), dtype=dtype)
    grads = {}
    for name, arr in p.items():
        sign = -1.0 if (mode == "dat" and name in ENCODER_PARAMS) else 1.0
        flat = arr.reshape(-1)
        g = np.empty(flat.size, dtype=np.float64)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            k = idx.size
            stack = np.repeat(flat[None, :], 2 * k, axis=0)
            stack[np.arange(k), idx] += dtype(h)
            stack[np.arange(k, 2 * k), idx] -= dtype(h)
            # biases get a singleton row axis so they broadcast over the batch
            shape = (2 * k,) + ((1,) if arr.ndim == 1 else ()) + arr.shape
            trial = replace(p, **{name: stack.reshape(shape)})
            vals = np.broadcast_to(numeric_objective(trial, xq, meta, mode, cfg, sign), (2 * k,))
            g[idx] = ((vals[:k] - vals[k:]) / (2 * dtype(h))).astype(np.float64)
        grads[name] = g.reshape(arr.shape)
    return GradBundle(**grads)


def max_relative_error(analytic: GradBundle, numeric: GradBundle) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = getattr(numeric, name)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def grad_check(params, batch, loss_mode: str, cfg: LossConfig = LossConfig(), h: float = 1e-6) -> float:
    """Max relative error between backprop and central differences over all parameters.

    ``batch`` is ``(specs, meta)``. Meant for small models (hidden, dim <= 16, N <= 8).
    """
    x, meta = batch
    _, analytic = loss_and_grads(params, x, meta, loss_mode, cfg)
    numeric = numeric_gradient(params, x, meta, loss_mode, cfg, h)
    return max_relative_error(analytic, numeric)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, seed: int = 0, step: int = 0) -> None:
    """Magic, u32 header length, JSON header, then float64 little-endian blobs."""
    n_in, hidden, dim = params.dims
    header = {
        "dims": {"n_in": n_in, "hidden": hidden, "dim": dim},
        "seed": int(seed),
        "step": int(step),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, v in params.items():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, header)``."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(length).decode("utf-8"))
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated checkpoint")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
    if set(arrays) != set(PARAM_NAMES):
        raise ValueError(f"{path}: unexpected parameter set {sorted(arrays)}")
    return ModelParams(**arrays), header
