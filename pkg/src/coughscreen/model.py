"""Small convolutional classifier written directly in numpy.

Layout is channel-last throughout: a batch of log-Mel images has shape
``(batch, n_mels, n_frames, channels)``. Each conv block is a 3x3 "same"
convolution, ReLU and a 2x2 max-pool (floor). The head is
dense -> ReLU -> dropout -> dense -> softmax.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergedLoss, EmptyScores, ShapeMismatch, SingleClass
from .features import AugmentConfig, augment_matrix

log = logging.getLogger(__name__)

KERNEL = 3
POOL = 2


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: tuple[int, ...] = (8, 16, 32)
    hidden_units: int = 64
    n_classes: int = 2
    dropout_rate: float = 0.3
    activation: str = "relu"
    input_shape: tuple[int, int, int] = (64, 98, 1)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.n_classes not in (2, 3):
            raise ValueError("n_classes must be 2 or 3")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        h, w, _ = self.input_shape
        for _ in self.conv_channels:
            h, w = h // POOL, w // POOL
            if h < 1 or w < 1:
                raise ValueError("input too small for the number of pooling blocks")

    def flat_size(self) -> int:
        h, w, c = self.input_shape
        for ch in self.conv_channels:
            h, w, c = h // POOL, w // POOL, ch
        return h * w * c

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration (serialization) order."""
        shapes = []
        c_in = self.input_shape[2]
        for i, c_out in enumerate(self.conv_channels):
            shapes.append((f"conv{i}.weight", (c_out, c_in, KERNEL, KERNEL)))
            shapes.append((f"conv{i}.bias", (c_out,)))
            c_in = c_out
        shapes.append(("fc1.weight", (self.flat_size(), self.hidden_units)))
        shapes.append(("fc1.bias", (self.hidden_units,)))
        shapes.append(("fc2.weight", (self.hidden_units, self.n_classes)))
        shapes.append(("fc2.bias", (self.n_classes,)))
        return shapes

    def n_weights(self) -> int:
        return sum(math.prod(s) for _, s in self.param_shapes())

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    lr_schedule: str = "cosine"
    amsgrad: bool = False
    grad_clip_norm: float = 0.0
    train_loss_mode: str = "running"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.train_loss_mode not in ("running", "epoch_end"):
            raise ValueError(f"unknown train_loss_mode {self.train_loss_mode!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.param_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=cfg.dtype)
        else:
            fan_in = math.prod(shape[1:]) if name.startswith("conv") else shape[0]
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(cfg.dtype)
    return params


# --- layers ---------------------------------------------------------------

def _im2col(x):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))  # b,h,w,c,k,k
    return win.reshape(b * h * w, c * KERNEL * KERNEL)


def _conv_forward(x, weight, bias):
    b, h, w, _ = x.shape
    cols = _im2col(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(b, h, w, weight.shape[0]), cols


def _conv_backward(dout, cols, x_shape, weight):
    b, h, w, c = x_shape
    c_out = weight.shape[0]
    d2 = dout.reshape(-1, c_out)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ weight.reshape(c_out, -1)).reshape(b, h, w, c, KERNEL, KERNEL)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dout.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dxp[:, ki:ki + h, kj:kj + w, :] += dcols[..., ki, kj]
    return dxp[:, 1:-1, 1:-1, :], dweight, dbias


def _pool_forward(x):
    b, h, w, c = x.shape
    h2, w2 = h // POOL, w // POOL
    xc = x[:, :h2 * POOL, :w2 * POOL, :]
    win = xc.reshape(b, h2, POOL, w2, POOL, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, POOL * POOL)
    idx = win.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    b, h, w, c = x_shape
    h2, w2 = dout.shape[1], dout.shape[2]
    dwin = np.zeros((b, h2, w2, c, POOL * POOL), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :h2 * POOL, :w2 * POOL, :] = (
        dwin.reshape(b, h2, w2, c, POOL, POOL).transpose(0, 1, 4, 2, 5, 3).reshape(b, h2 * POOL, w2 * POOL, c)
    )
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(cfg, params, x, training, rng):
    """Run the network, returning logits and the cache needed by backprop."""
    cache = []
    h = x
    for i in range(len(cfg.conv_channels)):
        conv, cols = _conv_forward(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        relu = np.maximum(conv, 0)
        pooled, idx = _pool_forward(relu)
        cache.append((h.shape, cols, conv > 0, idx, relu.shape))
        h = pooled
    pooled_shape = h.shape
    flat = h.reshape(h.shape[0], -1)
    z1 = flat @ params["fc1.weight"] + params["fc1.bias"]
    a1 = np.maximum(z1, 0)
    mask = None
    if training and cfg.dropout_rate > 0:
        keep = 1.0 - cfg.dropout_rate
        mask = ((rng.random(a1.shape) >= cfg.dropout_rate) / keep).astype(a1.dtype)
        a1 = a1 * mask
    logits = a1 @ params["fc2.weight"] + params["fc2.bias"]
    return logits, (cache, pooled_shape, flat, z1, a1, mask)


def _backward(cfg, params, dlogits, state):
    cache, pooled_shape, flat, z1, a1, mask = state
    grads = {}
    grads["fc2.weight"] = a1.T @ dlogits
    grads["fc2.bias"] = dlogits.sum(axis=0)
    da1 = dlogits @ params["fc2.weight"].T
    if mask is not None:
        da1 = da1 * mask
    dz1 = da1 * (z1 > 0)
    grads["fc1.weight"] = flat.T @ dz1
    grads["fc1.bias"] = dz1.sum(axis=0)
    dh = (dz1 @ params["fc1.weight"].T).reshape(pooled_shape)
    for i in reversed(range(len(cfg.conv_channels))):
        x_shape, cols, active, idx, relu_shape = cache[i]
        drelu = _pool_backward(dh, idx, relu_shape)
        dconv = drelu * active
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = _conv_backward(
            dconv, cols, x_shape, params[f"conv{i}.weight"]
        )
    return grads


# --- bundle-level API -------------------------------------------------------

def _as_batch(cfg: ModelConfig, matrices: Iterable[np.ndarray]) -> np.ndarray:
    arrs = [np.asarray(m) for m in matrices]
    h, w, c = cfg.input_shape
    for a in arrs:
        if a.shape not in ((h, w), (h, w, c)):
            raise ShapeMismatch(f"expected input of shape {(h, w)}, got {a.shape}")
    batch = np.stack([a.reshape(h, w, c) for a in arrs]).astype(cfg.dtype, copy=False)
    return batch


def _matrix(feature) -> np.ndarray:
    return feature.matrix if hasattr(feature, "matrix") else np.asarray(feature)


def forward(bundle, feature, training: bool = False, rng_seed: int = 0) -> np.ndarray:
    """Class probabilities for one feature image."""
    return forward_batch(bundle, [feature], training=training, rng_seed=rng_seed)[0]


def forward_batch(bundle, features: Sequence, training: bool = False, rng_seed: int = 0) -> np.ndarray:
    cfg = bundle.config
    x = _as_batch(cfg, (_matrix(f) for f in features))
    rng = np.random.default_rng(rng_seed) if training else None
    logits, _ = _forward(cfg, bundle.weights, x, training, rng)
    return softmax(logits.astype(np.float64))


def _loss_grads(cfg, params, x, labels, rng, training=True):
    logits, state = _forward(cfg, params, x, training, rng)
    logits = logits.astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = x.shape[0]
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    probs = np.exp(z - lse[:, None])
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n
    grads = _backward(cfg, params, dlogits.astype(x.dtype), state)
    return loss, grads


def loss_and_gradients(bundle, batch, rng=None, training: bool = True):
    """Mean cross-entropy over ``batch`` and its gradient for every weight.

    Args:
        bundle: anything with ``config`` and ``weights`` (a ModelBundle).
        batch: sequence of ``(feature, class_index)`` pairs.
        rng: ``np.random.Generator`` (or int seed) driving dropout masks.
        training: when False dropout is disabled.

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like ``bundle.weights``.
    """
    cfg = bundle.config
    if not batch:
        raise ValueError("batch must be nonempty")
    x = _as_batch(cfg, (_matrix(f) for f, _ in batch))
    labels = np.array([int(y) for _, y in batch])
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError("label out of range")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(0 if rng is None else rng)
    return _loss_grads(cfg, bundle.weights, x, labels, rng, training)


def positive_score(probs: np.ndarray) -> float:
    return float(probs[-1])


def predict(bundle, feature) -> tuple[bool, float]:
    """Thresholded decision for one feature.

    The positive class is the last class index. The label is positive iff
    its probability is >= the bundle threshold (boundary inclusive). For
    three classes the label is positive iff argmax hits the positive class.
    """
    probs = forward(bundle, feature)
    score = positive_score(probs)
    if bundle.config.n_classes == 2:
        return score >= bundle.decision_threshold, score
    return int(np.argmax(probs)) == bundle.config.n_classes - 1, score


def aggregate_recording(scores: Sequence[float], policy: str = "mean", threshold: float = 0.5) -> tuple[bool, float]:
    """Combine per-chunk positive scores into a recording-level decision."""
    s = np.asarray(list(scores), dtype=np.float64)
    if s.size == 0:
        raise EmptyScores("no chunk scores to aggregate")
    if policy == "mean":
        score = float(math.fsum(sorted(s)) / s.size)
    elif policy == "max":
        score = float(s.max())
    elif policy == "majority":
        score = float(np.mean(s >= threshold))
    else:
        raise ValueError(f"unknown aggregation policy {policy!r}")
    return score >= threshold, score


# --- training ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_accuracy"]
        for r in self.epochs:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_accuracy!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.epochs]


class _Adam:
    def __init__(self, params, lr, b1, b2, eps=1e-8, amsgrad=False):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.amsgrad = amsgrad
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.vmax = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            v = self.v[k]
            if self.amsgrad:
                # never let the step-size denominator shrink
                self.vmax[k] = v = np.maximum(self.vmax[k], v)
            update = self.lr * (self.m[k] / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] = (params[k] - update).astype(params[k].dtype)


class _Momentum:
    def __init__(self, params, lr, momentum):
        self.lr, self.mu = lr, momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k in params:
            self.vel[k] = self.mu * self.vel[k] - self.lr * grads[k]
            params[k] = (params[k] + self.vel[k]).astype(params[k].dtype)


def _evaluate(cfg, params, x, y, batch_size):
    losses = []
    correct = 0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits, _ = _forward(cfg, params, xb, False, None)
        logits = logits.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        losses.append(lse - z[np.arange(len(yb)), yb])
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    loss = float(np.concatenate(losses).mean())
    return loss, correct / len(y)


def train(train_set, val_set, model_cfg: ModelConfig, train_cfg: TrainConfig, augment_fill: float = 0.0,
          progress=None):
    """Fit a fresh network by mini-batch optimization.

    Args:
        train_set: sequence of ``(matrix, class_index)`` pairs, already
            standardized.
        val_set: same, used for checkpoint selection.
        model_cfg: network shape.
        train_cfg: optimization settings; ``seed`` fixes init, shuffling,
            dropout and augmentation.
        augment_fill: value written where augmentation exposes the image
            border (the standardized log floor).
        progress: optional callable receiving each EpochRecord.

    Returns:
        ``(weights, history)``. ``weights`` come from the epoch with the best
        validation accuracy (ties go to the lower validation loss, then the
        earlier epoch).
    """
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be nonempty")
    x = _as_batch(model_cfg, (_matrix(f) for f, _ in train_set))
    y = np.array([int(lbl) for _, lbl in train_set])
    xv = _as_batch(model_cfg, (_matrix(f) for f, _ in val_set))
    yv = np.array([int(lbl) for _, lbl in val_set])
    if len(np.unique(y)) < 2:
        raise SingleClass("training split contains a single class")
    if y.max() >= model_cfg.n_classes or yv.max() >= model_cfg.n_classes:
        raise ValueError("label out of range for n_classes")

    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, seed=int(rng.integers(2**31)))
    if train_cfg.optimizer == "adam":
        opt = _Adam(params, train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.epsilon,
                    amsgrad=train_cfg.amsgrad)
    else:
        opt = _Momentum(params, train_cfg.learning_rate, train_cfg.momentum)

    history = TrainHistory()
    best_key = None
    best_params = None
    aug = train_cfg.augment
    for epoch in range(1, train_cfg.epochs + 1):
        opt.lr = train_cfg.lr_at(epoch)
        order = rng.permutation(len(x))
        total = 0.0
        # near-equal batches: a short remainder batch makes noisy steps
        for idx in np.array_split(order, max(1, len(order) // train_cfg.batch_size)):
            xb = x[idx]
            if aug.enabled:
                seeds = rng.integers(2**31, size=len(idx))
                xb = np.stack([
                    augment_matrix(img[..., 0], int(s), aug, fill=augment_fill)[..., None] for img, s in zip(xb, seeds)
                ]).astype(x.dtype)
            loss, grads = _loss_grads(model_cfg, params, xb, y[idx], rng)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            if train_cfg.grad_clip_norm > 0:
                norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
                if norm > train_cfg.grad_clip_norm:
                    scale = train_cfg.grad_clip_norm / norm
                    grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
            opt.step(params, grads)
            total += loss * len(idx)
        if train_cfg.train_loss_mode == "epoch_end":
            train_loss, _ = _evaluate(model_cfg, params, x, y, train_cfg.batch_size)
        else:
            train_loss = total / len(x)
        val_loss, val_acc = _evaluate(model_cfg, params, xv, yv, train_cfg.batch_size)
        if not math.isfinite(val_loss) or not all(np.isfinite(p).all() for p in params.values()):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, train_loss, val_loss, val_acc)
        history.epochs.append(rec)
        if progress is not None:
            progress(rec)
        log.debug("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.3f", epoch, train_loss, val_loss, val_acc)
        key = (-val_acc, val_loss)
        if best_key is None or key < best_key:
            best_key = key
            best_params = {k: v.copy() for k, v in params.items()}
            history.best_epoch = epoch
    return best_params, history
