"""Cross-entropy loss, backpropagation through time and the SGD loop."""

import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, TrainingAborted
from .model import (
    MODES,
    CELLS,
    Model,
    ModelSpec,
    backward_batch,
    forward_batch,
    init_params,
    sample_dropout,
)
from .numeric import Rng

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-300
REDUCTIONS = ("frame", "sequence")


@dataclass
class TrainingConfig:
    learning_rate: float = 1.0
    epochs: int = 80
    halve_after: int = 40
    halve_every: int = 5
    batch_size: int = 5
    dropout_p: float = 0.5
    hidden: int = 1024
    layers: int = 1
    mode: str = "bidirectional"
    cell: str = "lstm"
    seed: int = 0
    grad_clip: float = None
    init_scale: float = 0.08
    forget_bias: float = 1.0
    reduction: str = "frame"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.layers not in (1, 2):
            raise ConfigError(f"layers must be 1 or 2, got {self.layers}")
        if self.epochs < 0 or self.halve_after < 0 or self.halve_every < 1:
            raise ConfigError("epochs/halve_after must be >= 0 and halve_every >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cell not in CELLS:
            raise ConfigError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")

    def model_spec(self, n_x, n_y):
        return ModelSpec(n_x=n_x, n_y=n_y, hidden=self.hidden, cell=self.cell,
                         mode=self.mode, layers=self.layers)

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# loss


def step_loss(y_true, y_hat):
    """Cross entropy of one frame: -sum_k y_k log(y_hat_k)."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_true.shape != y_hat.shape:
        raise ContractError(f"label/prediction shape mismatch: {y_true.shape} vs {y_hat.shape}")
    nz = y_true != 0
    return float(-(y_true[nz] * np.log(np.maximum(y_hat[nz], LOG_FLOOR))).sum())


def sequence_loss(labels, probs, mask=None):
    """Summed frame losses over unmasked frames.

    ``labels`` are class indices of length T, ``probs`` a (T, n_y) array or a
    :class:`~seqlab.model.Prediction`.
    """
    probs = getattr(probs, "probs", probs)
    labels = np.asarray(labels)
    T = probs.shape[0]
    mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if labels.shape != (T,) or mask.shape != (T,):
        raise ContractError(f"lengths differ: labels {labels.shape}, probs {probs.shape}, mask {mask.shape}")
    if not mask.any():
        warnings.warn("sequence_loss: every frame is masked", RuntimeWarning, stacklevel=2)
        return 0.0
    p_true = probs[np.arange(T), labels][mask]
    return float(-np.log(np.maximum(p_true, LOG_FLOOR)).sum())


# ---------------------------------------------------------------------------
# batches and the tape


@dataclass
class Batch:
    """Padded mini-batch: X (B, T, n_x), labels/mask (B, T), lengths (B,)."""

    X: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, seqs):
        if not seqs:
            raise ContractError("empty batch")
        T = max(len(s.labels) for s in seqs)
        n_x = seqs[0].inputs.shape[1]
        B = len(seqs)
        X = np.zeros((B, T, n_x))
        labels = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T), dtype=bool)
        lengths = np.zeros(B, dtype=np.int64)
        for b, s in enumerate(seqs):
            n = len(s.labels)
            X[b, :n] = s.inputs
            labels[b, :n] = s.labels
            mask[b, :n] = s.label_mask
            lengths[b] = n
        return cls(X, labels, mask, lengths)

    @classmethod
    def single(cls, xs, labels, mask=None):
        xs = np.asarray(xs, dtype=np.float64)
        T = xs.shape[0]
        mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        return cls(xs[None], np.asarray(labels)[None], mask[None], np.array([T]))


@dataclass
class Tape:
    """A recorded forward pass: inputs, dropout masks, cached activations, loss."""

    spec: ModelSpec
    params: dict
    batch: Batch
    dropout: list
    reduction: str = "frame"
    probs: np.ndarray = None
    cache: dict = None
    loss: float = None

    def replay(self):
        """Recompute the loss from the recorded inputs and masks."""
        return record(self.spec, self.params, self.batch, self.dropout, self.reduction).loss


def _denominator(batch, reduction):
    if reduction == "sequence":
        return float(batch.mask.shape[0])
    return float(max(1, int(batch.mask.sum())))


def batch_loss(probs, batch, reduction="frame"):
    """Masked cross entropy summed over frames and sequences, then divided by
    the number of labelled frames (``"frame"``) or of sequences (``"sequence"``)."""
    p_true = np.take_along_axis(probs, batch.labels[:, :, None], axis=2)[:, :, 0]
    nll = -np.log(np.maximum(p_true, LOG_FLOOR))
    return float(np.where(batch.mask, nll, 0.0).sum() / _denominator(batch, reduction))


def record(spec, params, batch, dropout=None, reduction="frame"):
    probs, cache = forward_batch(spec, params, batch.X, batch.lengths, dropout)
    return Tape(spec, params, batch, dropout, reduction, probs=probs, cache=cache,
                loss=batch_loss(probs, batch, reduction))


def backward(tape):
    """Exact gradient of ``tape.loss`` with respect to every parameter."""
    if tape.loss is None or tape.cache is None:
        raise ContractError("tape has no recorded scalar loss")
    onehot = np.zeros_like(tape.probs)
    np.put_along_axis(onehot, tape.batch.labels[:, :, None], 1.0, axis=2)
    scale = tape.batch.mask[:, :, None] / _denominator(tape.batch, tape.reduction)
    dlogits = (tape.probs - onehot) * scale
    return backward_batch(tape.spec, tape.params, tape.cache, dlogits)


def loss_and_grad(spec, params, batch, dropout=None, reduction="frame"):
    tape = record(spec, params, batch, dropout, reduction)
    return tape.loss, backward(tape)


# ---------------------------------------------------------------------------
# finite differences


def central_difference(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at array (or scalar) ``x``."""
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    if np.isscalar(x):
        return (f(x + eps) - f(x - eps)) / (2 * eps)
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f(x)
        flat[k] = orig - eps
        down = f(x)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


def finite_diff_grad(spec, params, batch, eps=1e-5, reduction="frame"):
    """Numerical gradient of the dropout-free batch loss, one scalar at a time."""
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    work = OrderedDict((k, v.copy()) for k, v in params.items())
    grads = OrderedDict()
    for name, value in work.items():
        g = np.zeros_like(value)
        flat, gflat = value.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = record(spec, work, batch, reduction=reduction).loss
            flat[k] = orig - eps
            down = record(spec, work, batch, reduction=reduction).loss
            flat[k] = orig
            gflat[k] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def max_relative_error(analytic, numeric):
    """Worst elementwise relative error over all parameters, with its name."""
    worst, where = 0.0, None
    for name in analytic:
        err = relative_error(analytic[name], numeric[name])
        if err.size and err.max() >= worst:
            worst, where = float(err.max()), name
    return worst, where


# ---------------------------------------------------------------------------
# optimisation


def global_norm(grads):
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def sgd_update(params, grads, lr, grad_clip=None):
    """Return ``p - lr * g`` for every parameter (new arrays; inputs untouched)."""
    if set(params) != set(grads):
        raise ContractError("parameters and gradients have different names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in parameter {name}")
    scale = lr
    if grad_clip is not None:
        norm = global_norm(grads)
        if norm > grad_clip:
            scale = lr * grad_clip / norm
    return OrderedDict((k, v - scale * grads[k]) for k, v in params.items())


def lr_schedule(epoch, cfg):
    """Constant rate, then halved every ``halve_every`` epochs from ``halve_after`` on."""
    if epoch < cfg.halve_after:
        return cfg.learning_rate
    halvings = (epoch - cfg.halve_after) // cfg.halve_every + 1
    return cfg.learning_rate * 2.0 ** (-halvings)


def format_epoch_record(rec):
    return f"epoch={rec['epoch']} lr={rec['lr']!r} loss={rec['loss']!r}"


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)


def train(sequences, n_y, cfg, progress=None):
    """Mini-batch SGD over ``sequences`` (objects with inputs/labels/label_mask).

    Each epoch visits the sequences in a fresh shuffled order. The epoch loss
    is the mean of the batch losses. ``progress`` may be a text stream that
    receives one ``epoch=.. lr=.. loss=..`` line per epoch.
    """
    if not sequences:
        raise ContractError("training split is empty")
    n_x = sequences[0].inputs.shape[1]
    if any(s.inputs.shape[1] != n_x for s in sequences):
        raise ContractError("sequences disagree on the input width")
    spec = cfg.model_spec(n_x, n_y)
    root = Rng(cfg.seed)
    params = init_params(spec, root.spawn(0), scale=cfg.init_scale, forget_bias=cfg.forget_bias)
    shuffle_rng = root.spawn(1)
    dropout_rng = root.spawn(2)

    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        start_params = params
        order = shuffle_rng.permutation(len(sequences))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = Batch.from_sequences([sequences[i] for i in order[lo:lo + cfg.batch_size]])
            dropout = None
            if cfg.dropout_p > 0:
                dropout = sample_dropout(spec, dropout_rng, len(batch.lengths), cfg.dropout_p)
            loss, grads = loss_and_grad(spec, params, batch, dropout, cfg.reduction)
            if not math.isfinite(loss):
                raise TrainingAborted(f"loss became {loss} in epoch {epoch}",
                                      params=start_params, history=history)
            try:
                params = sgd_update(params, grads, lr, cfg.grad_clip)
            except TrainingAborted as exc:
                raise TrainingAborted(f"{exc} (epoch {epoch})", params=start_params,
                                      history=history) from None
            losses.append(loss)
        rec = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        history.append(rec)
        log.debug(format_epoch_record(rec))
        if progress is not None:
            progress.write(format_epoch_record(rec) + "\n")
    return TrainResult(Model(spec, params), history)
