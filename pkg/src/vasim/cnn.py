"""
The CNN observer: conv(15@5x5) -> ReLU -> conv(15@5x5) -> ReLU ->
maxpool(2x2, stride 2) -> fully connected (8) -> softmax.

Weights are plain numpy arrays; the convolution and pooling loops live in
:mod:`vasim.kernels`.  Training is mini-batch SGD with classical momentum
and an L2 penalty on the weight tensors (biases are not decayed).
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .stimulus import N_ORIENTATIONS, Orientation, StimulusImage

log = logging.getLogger(__name__)

N_FILTERS = 15
KERNEL = 5
N_CLASSES = N_ORIENTATIONS
MIN_INPUT = 12

MODEL_MAGIC = b"VACNN"
MODEL_FORMAT_VERSION = 1
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")
WEIGHT_NAMES = ("conv1_w", "conv2_w", "fc_w")

# images per kernel call inside a mini-batch; bounds activation memory
_MICRO_BATCH = 16


class ModelError(ValueError):
    pass


class ModelFormatError(ModelError):
    """Bad magic, unsupported version or truncated model file."""


class ModelShapeError(ModelError):
    """Model input size does not match the image/profile in use."""


class TrainingDivergedError(RuntimeError):
    pass


def shape_chain(n: int) -> list[tuple[int, ...]]:
    """Activation shapes from input to logits for an ``n x n`` input."""
    if n < MIN_INPUT:
        raise ModelShapeError(f"input size {n} too small (minimum {MIN_INPUT})")
    c1 = n - KERNEL + 1
    c2 = c1 - KERNEL + 1
    p = c2 // 2
    return [(1, n, n), (N_FILTERS, c1, c1), (N_FILTERS, c2, c2), (N_FILTERS, p, p), (N_CLASSES,)]


def fc_inputs(n: int) -> int:
    return int(np.prod(shape_chain(n)[3]))


@dataclass
class CnnModel:
    input_size: int
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    # subtracted from every input image; set to the training-set mean by train()
    input_mean: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros((self.input_size, self.input_size), self.conv1_w.dtype)

    @property
    def dtype(self):
        return self.conv1_w.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "CnnModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "CnnModel":
        out = self.copy()
        for k in PARAM_NAMES + ("input_mean",):
            setattr(out, k, getattr(self, k).astype(dtype))
        return out

    def __call__(self, stim: StimulusImage) -> Orientation:
        return classify(self, stim)


def init_model(n: int, seed: int = 0, dtype=np.float32) -> CnnModel:
    """He-normal weights, zero biases."""
    shape_chain(n)
    rng = np.random.default_rng(seed)
    f_in = fc_inputs(n)

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)

    return CnnModel(
        input_size=n,
        conv1_w=he((N_FILTERS, 1, KERNEL, KERNEL), KERNEL * KERNEL),
        conv1_b=np.zeros(N_FILTERS, dtype),
        conv2_w=he((N_FILTERS, N_FILTERS, KERNEL, KERNEL), N_FILTERS * KERNEL * KERNEL),
        conv2_b=np.zeros(N_FILTERS, dtype),
        fc_w=he((N_CLASSES, f_in), f_in),
        fc_b=np.zeros(N_CLASSES, dtype),
        metadata={"seed": seed},
    )


def zero_model(n: int, dtype=np.float32) -> CnnModel:
    m = init_model(n, 0, dtype)
    for k in PARAM_NAMES:
        getattr(m, k)[...] = 0
    return m


def _as_batch(m: CnnModel, images) -> np.ndarray:
    x = np.asarray(images, dtype=m.dtype)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (m.input_size, m.input_size):
        raise ModelShapeError(
            f"image size {x.shape[1:]} does not match model input {m.input_size}")
    return (x - m.input_mean)[:, None, :, :]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(m: CnnModel, x: np.ndarray):
    a1 = kernels.conv_forward(x, m.conv1_w, m.conv1_b)
    r1 = np.maximum(a1, 0)
    a2 = kernels.conv_forward(r1, m.conv2_w, m.conv2_b)
    r2 = np.maximum(a2, 0)
    pooled, idx = kernels.maxpool_forward(r2)
    flat = pooled.reshape(len(x), -1)
    logits = flat @ m.fc_w.T + m.fc_b
    return logits, (x, a1, r1, a2, r2, idx, flat)


def forward_logits(m: CnnModel, images) -> np.ndarray:
    x = _as_batch(m, images)
    out = [_forward(m, x[s:s + _MICRO_BATCH])[0] for s in range(0, len(x), _MICRO_BATCH)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES), m.dtype)


def forward(m: CnnModel, images) -> np.ndarray:
    """Class probabilities, shape (batch, 8) (or (8,) for a single image)."""
    single = np.ndim(images) == 2
    probs = _softmax(forward_logits(m, images).astype(np.float64))
    return probs[0] if single else probs


def predict(m: CnnModel, images) -> np.ndarray:
    """Arg-max class indices; ties go to the lowest orientation index."""
    return np.argmax(forward_logits(m, images), axis=1)


def classify(m: CnnModel, stim: StimulusImage) -> Orientation:
    return Orientation(int(np.argmax(forward(m, stim.pixels))))


def objective(m: CnnModel, images, labels, l2: float = 0.0) -> float:
    """Mean softmax cross-entropy plus ``l2/2 * sum(w^2)`` over weight tensors."""
    logits = forward_logits(m, images).astype(np.float64)
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(len(labels)), labels].mean()
    reg = 0.5 * l2 * sum(float(np.sum(getattr(m, k).astype(np.float64) ** 2)) for k in WEIGHT_NAMES)
    return float(ce + reg)


def _backward(m, cache, dlogits):
    x, a1, r1, a2, r2, idx, flat = cache
    g = {"fc_w": dlogits.T @ flat, "fc_b": dlogits.sum(axis=0)}
    dpool = (dlogits @ m.fc_w).reshape(len(x), *shape_chain(m.input_size)[3])
    dr2 = kernels.maxpool_backward(dpool, idx, r2.shape)
    da2 = dr2 * (a2 > 0)
    dr1, g["conv2_w"], g["conv2_b"] = kernels.conv_backward(r1, m.conv2_w, da2, need_dx=True)
    da1 = dr1 * (a1 > 0)
    _, g["conv1_w"], g["conv1_b"] = kernels.conv_backward(x, m.conv1_w, da1, need_dx=False)
    return g


def backprop_gradients(m: CnnModel, images, labels, l2: float = 0.0, return_correct: bool = False):
    """
    Gradients of the :func:`objective` for one batch.

    Returns ``(grads, mean_cross_entropy)`` where ``grads`` maps parameter
    names to arrays shaped like the parameters.  With ``return_correct`` a
    third element counts correctly classified samples in the batch.
    """
    x = _as_batch(m, images)
    labels = np.asarray(labels, dtype=np.intp)
    if len(x) == 0:
        raise ModelError("empty batch")
    total = len(x)
    grads = {k: np.zeros_like(v) for k, v in m.params().items()}
    ce_sum = 0.0
    correct = 0
    for s in range(0, total, _MICRO_BATCH):
        xs, ys = x[s:s + _MICRO_BATCH], labels[s:s + _MICRO_BATCH]
        logits, cache = _forward(m, xs)
        probs = _softmax(logits.astype(np.float64))
        ce_sum -= float(np.log(np.maximum(probs[np.arange(len(ys)), ys], 1e-300)).sum())
        correct += int((np.argmax(logits, axis=1) == ys).sum())
        d = probs
        d[np.arange(len(ys)), ys] -= 1.0
        part = _backward(m, cache, (d / total).astype(m.dtype))
        for k in grads:
            grads[k] += part[k]
    if l2:
        for k in WEIGHT_NAMES:
            grads[k] += l2 * getattr(m, k)
    if return_correct:
        return grads, ce_sum / total, correct
    return grads, ce_sum / total


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    l2_coefficient: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 30
    seed: int = 0
    lr_decay: float = 0.1
    plateau_patience: int = 2
    # an epoch whose loss exceeds this multiple of the best loss is undone
    divergence_factor: float = 2.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.divergence_factor > 1:
            raise ValueError("divergence_factor must exceed 1")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_accuracy: float
    learning_rate: float
    val_accuracy: float | None = None
    rolled_back: bool = False


def sgd_step(m: CnnModel, grads, velocity, lr: float, momentum: float) -> None:
    """In place: ``v <- mu v - lr g``; ``w <- w + v``."""
    for k in PARAM_NAMES:
        v = velocity[k]
        v *= momentum
        v -= lr * grads[k]
        getattr(m, k)[...] += v


def train(m: CnnModel, images, labels, cfg: TrainConfig, val=None, progress=None):
    """
    Train a copy of ``m``; returns ``(trained_model, [EpochLog, ...])``.

    Inputs are zero-centred: an untrained model (all-zero ``input_mean``)
    gets the mean training image as its ``input_mean`` before the first
    epoch; a model that already has one keeps it.

    ``val`` is an optional ``(images, labels)`` pair evaluated after each
    epoch; it never influences training.  The learning rate is multiplied
    by ``cfg.lr_decay`` after ``cfg.plateau_patience`` epochs without a new
    best training loss.  An epoch that diverges (non-finite loss, or loss
    above ``cfg.divergence_factor`` times the best) is rolled back to the
    best-loss weights with momentum cleared and the learning rate decayed.
    The returned model carries the weights of the best-loss epoch.
    """
    model = m.copy()
    images = np.asarray(images, dtype=model.dtype)
    if len(images) and not np.any(model.input_mean):
        model.input_mean = images.mean(axis=0, dtype=np.float64).astype(model.dtype)
    labels = np.asarray(labels, dtype=np.intp)
    if np.any((labels < 0) | (labels >= N_CLASSES)):
        raise ModelError("labels must be orientation indices 0..7")
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    lr = cfg.learning_rate
    best, stale = math.inf, 0
    best_params, best_entry = None, None
    history: list[EpochLog] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(images))
        loss_sum, correct, seen = 0.0, 0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            grads, loss, ok = backprop_gradients(model, images[batch], labels[batch],
                                                 cfg.l2_coefficient, return_correct=True)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                if best_params is None:
                    raise TrainingDivergedError(
                        f"non-finite loss/gradient at epoch {epoch}, batch {s // cfg.batch_size} "
                        f"(learning rate {lr:g}); lower the learning rate")
                loss_sum = math.inf
                break
            sgd_step(model, grads, velocity, lr, cfg.momentum)
            loss_sum += loss * len(batch)
            correct += ok
            seen += len(batch)
        entry = EpochLog(epoch, loss_sum / max(seen, 1), correct / max(seen, 1), lr)
        if not entry.loss <= cfg.divergence_factor * best:
            # undo the epoch
            for k, v in best_params.items():
                getattr(model, k)[...] = v
            for v in velocity.values():
                v[...] = 0
            lr *= cfg.lr_decay
            stale = 0
            entry.rolled_back = True
            log.warning("epoch %d diverged (loss %.4g); restored epoch %d weights, learning rate %.2g",
                        epoch, entry.loss, best_entry.epoch, lr)
        elif entry.loss < best * (1 - 1e-3):
            best, stale = entry.loss, 0
            best_params = {k: v.copy() for k, v in model.params().items()}
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                lr *= cfg.lr_decay
                stale = 0
        if val is not None:
            entry.val_accuracy = evaluate(model, *val)[0]
        if best_params is not None and not entry.rolled_back and entry.loss == best:
            best_entry = entry
        history.append(entry)
        log.info("epoch %d loss %.4f acc %.3f lr %.2g val %s", epoch, entry.loss,
                 entry.train_accuracy, entry.learning_rate, entry.val_accuracy)
        if progress is not None:
            progress(entry)
    if best_params is not None:
        for k, v in best_params.items():
            getattr(model, k)[...] = v
    model.metadata.update({
        "seed": cfg.seed,
        "epochs": len(history),
        "best_epoch": best_entry.epoch if best_entry else None,
        "train_accuracy": best_entry.train_accuracy if best_entry else None,
    })
    if best_entry is not None and best_entry.val_accuracy is not None:
        model.metadata["test_accuracy"] = best_entry.val_accuracy
    return model, history


def evaluate(m: CnnModel, images, labels) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    labels = np.asarray(labels, dtype=np.intp)
    if len(labels) == 0:
        raise ModelError("cannot evaluate on an empty corpus")
    pred = predict(m, images)
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    return float(np.trace(conf) / len(labels)), conf


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _param_shapes(n: int) -> dict[str, tuple[int, ...]]:
    return {
        "conv1_w": (N_FILTERS, 1, KERNEL, KERNEL),
        "conv1_b": (N_FILTERS,),
        "conv2_w": (N_FILTERS, N_FILTERS, KERNEL, KERNEL),
        "conv2_b": (N_FILTERS,),
        "fc_w": (N_CLASSES, fc_inputs(n)),
        "fc_b": (N_CLASSES,),
        "input_mean": (n, n),
    }


def persist(m: CnnModel) -> bytes:
    """Serialize: magic, u16 version, u32 input size, f32 LE tensors, JSON trailer."""
    parts = [MODEL_MAGIC, struct.pack("<HI", MODEL_FORMAT_VERSION, m.input_size)]
    for k in PARAM_NAMES + ("input_mean",):
        parts.append(np.ascontiguousarray(getattr(m, k), dtype="<f4").tobytes())
    meta = {"architecture": describe(m.input_size), **m.metadata}
    parts.append(json.dumps(meta, sort_keys=True, default=float).encode("utf-8"))
    return b"".join(parts)


def restore(data: bytes, input_size: int | None = None) -> CnnModel:
    head = len(MODEL_MAGIC) + 6
    if len(data) < head or data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("not a VACNN model file (bad magic)")
    version, n = struct.unpack("<HI", data[len(MODEL_MAGIC):head])
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if input_size is not None and n != input_size:
        raise ModelShapeError(f"model expects {n} px inputs, pipeline uses {input_size} px")
    shapes = _param_shapes(n)
    pos = head
    tensors = {}
    for k in PARAM_NAMES + ("input_mean",):
        size = int(np.prod(shapes[k])) * 4
        if pos + size > len(data):
            raise ModelFormatError(f"truncated model file while reading {k}")
        tensors[k] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos) \
            .reshape(shapes[k]).astype(np.float32)
        pos += size
    try:
        meta = json.loads(data[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt metadata trailer: {exc}") from exc
    meta.pop("architecture", None)
    return CnnModel(input_size=n, metadata=meta, **tensors)


def save_model(m: CnnModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(persist(m))


def load_model(path, input_size: int | None = None) -> CnnModel:
    with open(path, "rb") as fh:
        return restore(fh.read(), input_size)


def describe(n: int) -> dict:
    chain = shape_chain(n)
    return {
        "input": list(chain[0]),
        "layers": [
            {"type": "conv", "filters": N_FILTERS, "kernel": KERNEL, "stride": 1, "padding": 0,
             "output": list(chain[1])},
            {"type": "relu"},
            {"type": "conv", "filters": N_FILTERS, "kernel": KERNEL, "stride": 1, "padding": 0,
             "output": list(chain[2])},
            {"type": "relu"},
            {"type": "maxpool", "pool": 2, "stride": 2, "output": list(chain[3])},
            {"type": "fully_connected", "output": N_CLASSES},
            {"type": "softmax"},
            {"type": "classification"},
        ],
    }
