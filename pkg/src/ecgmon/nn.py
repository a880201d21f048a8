"""Dense binary classifier written directly on numpy.

Each hidden block is dense -> batch normalization -> ReLU -> inverted
dropout; a dense layer with a sigmoid produces the probability of the
positive (abnormal) class. Everything runs in float64.
"""

from __future__ import annotations

import copy
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateBatch, FormatError, InvalidInput, ShapeError, VersionError
from .metrics import auc

DEFAULT_WIDTHS = (256, 128, 64, 32, 16, 8, 4)
DEFAULT_DROPOUT = 0.3
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
PROB_CLAMP = 1e-12

WEIGHTS_MAGIC = b"MLPW"
WEIGHTS_VERSION = 1


@dataclass
class HiddenBlock:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    dropout: float = DEFAULT_DROPOUT
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass
class OutputLayer:
    W: np.ndarray  # (1, in)
    b: np.ndarray  # (1,)


@dataclass
class MlpModel:
    blocks: list[HiddenBlock]
    output: OutputLayer
    rng_seed: int = 0

    def __post_init__(self):
        prev = self.input_dim
        for blk in self.blocks:
            if blk.W.shape[1] != prev:
                raise ShapeError("block dimensions do not chain")
            if not 0.0 <= blk.dropout < 1.0:
                raise InvalidInput(f"dropout rate must lie in [0, 1), got {blk.dropout}")
            prev = blk.W.shape[0]
        if self.output.W.shape != (1, prev):
            raise ShapeError("output layer does not match the last hidden width")

    @property
    def input_dim(self) -> int:
        return self.blocks[0].W.shape[1] if self.blocks else self.output.W.shape[1]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: per block W, b, gamma, beta; then output W, b."""
        out = []
        for blk in self.blocks:
            out += [blk.W, blk.b, blk.gamma, blk.beta]
        out += [self.output.W, self.output.b]
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.blocks)):
            names += [f"block{i}.W", f"block{i}.b", f"block{i}.gamma", f"block{i}.beta"]
        return names + ["output.W", "output.b"]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)


def init_model(
    input_dim: int,
    widths=DEFAULT_WIDTHS,
    dropout: float = DEFAULT_DROPOUT,
    seed: int = 0,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> MlpModel:
    """He-uniform hidden weights, Glorot-uniform output weights, zero biases."""
    if input_dim < 1:
        raise InvalidInput("input dimension must be positive")
    rng = np.random.default_rng(seed)
    blocks = []
    fan_in = input_dim
    for width in widths:
        limit = math.sqrt(6.0 / fan_in)
        blocks.append(
            HiddenBlock(
                W=rng.uniform(-limit, limit, size=(width, fan_in)),
                b=np.zeros(width),
                gamma=np.ones(width),
                beta=np.zeros(width),
                running_mean=np.zeros(width),
                running_var=np.ones(width),
                dropout=dropout,
                momentum=momentum,
                eps=eps,
            )
        )
        fan_in = width
    limit = math.sqrt(6.0 / (fan_in + 1))
    out = OutputLayer(W=rng.uniform(-limit, limit, size=(1, fan_in)), b=np.zeros(1))
    return MlpModel(blocks, out, seed)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardCache:
    mode: str
    inputs: list = field(default_factory=list)
    xhat: list = field(default_factory=list)
    inv_std: list = field(default_factory=list)
    pre_relu: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    batch_mean: list = field(default_factory=list)
    batch_var: list = field(default_factory=list)
    last_hidden: np.ndarray | None = None
    probabilities: np.ndarray | None = None


def forward(model: MlpModel, batch, mode: str = "infer", rng: np.random.Generator | None = None):
    """Run the network; returns ``(probabilities, cache)``.

    ``train`` mode normalizes with batch statistics and applies dropout
    drawn from ``rng`` (dropout is skipped when ``rng`` is None). ``infer``
    mode uses running statistics and is deterministic. Running statistics
    are never modified here.
    """
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"expected batch of shape (n, {model.input_dim}), got {X.shape}")
    if mode not in ("train", "infer"):
        raise InvalidInput(f"unknown mode {mode!r}")
    if mode == "train" and X.shape[0] < 2:
        raise DegenerateBatch("batch statistics need at least two samples")
    cache = ForwardCache(mode)
    h = X
    for blk in model.blocks:
        cache.inputs.append(h)
        z = h @ blk.W.T + blk.b
        if mode == "train":
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            cache.batch_mean.append(mu)
            cache.batch_var.append(var)
        else:
            mu, var = blk.running_mean, blk.running_var
        inv_std = 1.0 / np.sqrt(var + blk.eps)
        xhat = (z - mu) * inv_std
        y = blk.gamma * xhat + blk.beta
        a = np.maximum(y, 0.0)
        mask = None
        if mode == "train" and blk.dropout > 0.0 and rng is not None:
            keep = 1.0 - blk.dropout
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
        cache.xhat.append(xhat)
        cache.inv_std.append(inv_std)
        cache.pre_relu.append(y)
        cache.masks.append(mask)
        h = a
    cache.last_hidden = h
    logits = (h @ model.output.W.T + model.output.b).ravel()
    p = sigmoid(logits)
    cache.probabilities = p
    return p, cache


def bce_loss(probabilities, labels) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64).ravel(), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError("probabilities and labels differ in length")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def backward(model: MlpModel, cache: ForwardCache, labels, loss_scale: float = 1.0) -> list[np.ndarray]:
    """Gradients of ``loss_scale * bce_loss`` in the order of ``model.parameters()``."""
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = cache.probabilities
    n = p.size
    if y.size != n:
        raise ShapeError("labels do not match the cached batch")
    dlogit = (loss_scale / n) * (p - y)
    h = cache.last_hidden
    grads_out = [dlogit[None, :] @ h, np.array([dlogit.sum()])]
    dh = np.outer(dlogit, model.output.W[0])

    grads: list[np.ndarray] = []
    for i in range(len(model.blocks) - 1, -1, -1):
        blk = model.blocks[i]
        mask = cache.masks[i]
        da = dh * mask if mask is not None else dh
        dy = da * (cache.pre_relu[i] > 0.0)
        xhat = cache.xhat[i]
        dgamma = np.sum(dy * xhat, axis=0)
        dbeta = np.sum(dy, axis=0)
        dxhat = dy * blk.gamma
        inv_std = cache.inv_std[i]
        if cache.mode == "train":
            m = dxhat.shape[0]
            dz = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dz = dxhat * inv_std
        inp = cache.inputs[i]
        dW = dz.T @ inp
        db = dz.sum(axis=0)
        dh = dz @ blk.W
        grads[:0] = [dW, db, dgamma, dbeta]
    return grads + grads_out


def update_running_stats(model: MlpModel, cache: ForwardCache) -> None:
    for blk, mu, var in zip(model.blocks, cache.batch_mean, cache.batch_var):
        blk.running_mean = blk.momentum * blk.running_mean + (1.0 - blk.momentum) * mu
        blk.running_var = blk.momentum * blk.running_var + (1.0 - blk.momentum) * var


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    min_lr: float = 1e-5
    early_stop_patience: int = 10
    restore_best: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("initial_lr", "batch_size", "max_epochs", "plateau_factor", "min_lr", "adam_eps"):
            if not getattr(self, name) > 0:
                raise InvalidInput(f"{name} must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise InvalidInput("patience values must be at least 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float | None
    train_accuracy: float
    val_accuracy: float | None
    val_auc: float | None
    lr: float


@dataclass
class MetricsLog:
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.epochs]


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batches(n: int, size: int, perm: np.ndarray) -> list[np.ndarray]:
    chunks = [perm[i: i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and chunks[-1].size == 1:
        # batchnorm cannot use a single-sample batch
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _evaluate(model, X, y) -> tuple[float, float, float | None]:
    p, _ = forward(model, X, "infer")
    acc = float(np.mean((p >= 0.5) == (y >= 0.5)))
    try:
        a = auc(y, p)
    except InvalidInput:
        a = None
    return bce_loss(p, y), acc, a


def fit(model: MlpModel, X_train, y_train, X_val=None, y_val=None, config: TrainConfig | None = None):
    """Mini-batch Adam with plateau learning-rate decay and early stopping.

    The monitored quantity is the validation loss (training loss when no
    validation rows are given). Returns ``(model, MetricsLog)``; the input
    model is not modified.
    """
    config = config or TrainConfig()
    X = np.asarray(X_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInput("training set is empty")
    if X.shape[0] < 2:
        raise InvalidInput("training needs at least two rows")
    if y.shape[0] != X.shape[0]:
        raise ShapeError("training labels do not match rows")
    has_val = X_val is not None and len(X_val) > 0
    if has_val:
        Xv = np.asarray(X_val, dtype=np.float64)
        yv = np.asarray(y_val, dtype=np.float64).ravel()

    model = model.copy()
    params = model.parameters()
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    lr = config.initial_lr
    log = MetricsLog()

    best_loss = math.inf
    best_state = None
    plateau_ref = math.inf
    plateau_wait = 0
    stop_ref = math.inf
    stop_wait = 0

    for epoch in range(config.max_epochs):
        perm = rng.permutation(X.shape[0])
        for idx in _batches(X.shape[0], config.batch_size, perm):
            _, cache = forward(model, X[idx], "train", rng)
            grads = backward(model, cache, y[idx])
            opt.step(params, grads, lr)
            update_running_stats(model, cache)

        tr_loss, tr_acc, _ = _evaluate(model, X, y)
        if has_val:
            va_loss, va_acc, va_auc = _evaluate(model, Xv, yv)
            monitored = va_loss
        else:
            va_loss = va_acc = va_auc = None
            monitored = tr_loss
        log.epochs.append(EpochMetrics(epoch, tr_loss, va_loss, tr_acc, va_acc, va_auc, lr))

        if monitored < best_loss:
            best_loss = monitored
            best_state = model.copy()
            log.best_epoch = epoch

        if monitored < stop_ref - config.plateau_min_delta:
            stop_ref = monitored
            stop_wait = 0
        else:
            stop_wait += 1
            if stop_wait >= config.early_stop_patience:
                log.stopped_early = True
                break

        if monitored < plateau_ref - config.plateau_min_delta:
            plateau_ref = monitored
            plateau_wait = 0
        else:
            plateau_wait += 1
            if plateau_wait >= config.plateau_patience:
                lr = max(lr * config.plateau_factor, config.min_lr)
                plateau_wait = 0

    if config.restore_best and best_state is not None:
        model = best_state
    return model, log


def predict_proba(model: MlpModel, rows) -> np.ndarray:
    p, _ = forward(model, rows, "infer")
    return p


def predict(model: MlpModel, rows, threshold: float = 0.5) -> np.ndarray:
    """Class labels; a probability equal to the threshold maps to class 1."""
    return (predict_proba(model, rows) >= threshold).astype(np.int64)


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_weights(model: MlpModel, path) -> None:
    """Write the model in the little-endian ``MLPW`` format with a trailing CRC-32."""
    layers = len(model.blocks) + 1
    buf = bytearray(WEIGHTS_MAGIC)
    buf += struct.pack("<HH", WEIGHTS_VERSION, layers)
    for blk in model.blocks:
        out_dim, in_dim = blk.W.shape
        buf += struct.pack("<IIB", out_dim, in_dim, 1)
        buf += struct.pack("<ddd", blk.dropout, blk.momentum, blk.eps)
        for arr in (blk.W, blk.b, blk.gamma, blk.beta, blk.running_mean, blk.running_var):
            buf += _f64(arr)
    out_dim, in_dim = model.output.W.shape
    buf += struct.pack("<IIB", out_dim, in_dim, 0)
    buf += _f64(model.output.W) + _f64(model.output.b)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_weights(path) -> MlpModel:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != WEIGHTS_MAGIC:
        raise FormatError("not an MLPW weights file")
    version, layers = struct.unpack_from("<HH", data, 4)
    if version != WEIGHTS_VERSION:
        raise VersionError(f"unsupported weights version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("weights checksum mismatch")
    pos = 8

    def take(n: int) -> np.ndarray:
        nonlocal pos
        end = pos + 8 * n
        if end > len(data) - 4:
            raise FormatError("weights file truncated")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos = end
        return arr

    blocks = []
    output = None
    try:
        for i in range(layers):
            out_dim, in_dim, kind = struct.unpack_from("<IIB", data, pos)
            pos += 9
            if kind == 1:
                dropout, momentum, eps = struct.unpack_from("<ddd", data, pos)
                pos += 24
                W = take(out_dim * in_dim).reshape(out_dim, in_dim)
                b, gamma, beta, rm, rv = (take(out_dim) for _ in range(5))
                blocks.append(HiddenBlock(W, b, gamma, beta, rm, rv, dropout, momentum, eps))
            elif kind == 0 and i == layers - 1:
                W = take(out_dim * in_dim).reshape(out_dim, in_dim)
                output = OutputLayer(W, take(out_dim))
            else:
                raise FormatError(f"unexpected layer kind {kind} at position {i}")
    except struct.error as exc:
        raise FormatError(f"weights file truncated: {exc}") from None
    if output is None or pos != len(data) - 4:
        raise FormatError("weights file layout mismatch")
    return MlpModel(blocks, output)
