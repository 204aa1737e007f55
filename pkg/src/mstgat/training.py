"""Loss, clipped Adam and the seeded mini-batch training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataset import WindowedDataset
from .models import ModelConfig, init_params, model_forward

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = {"m-stgat": 400, "stgat": 400, "gat": 200, "lstm": 200}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "TrainConfig":
        overrides.setdefault("epochs", DEFAULT_EPOCHS[kind])
        return cls(**overrides)

    def to_json(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def loss(predictions, targets) -> Tensor:
    """Mean absolute error over all cells."""
    predictions, targets = ad.as_tensor(predictions), ad.as_tensor(targets)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch in loss: {predictions.shape} vs {targets.shape}")
    return ad.reduce_mean(ad.absolute(ad.sub(predictions, targets)))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    norm = float(np.sqrt(total))
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam after global-norm clipping. Returns new params and state."""
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    grads, _ = clip_by_global_norm(grads, config.clip_norm)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name in sorted(params):
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = params[name] - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


def loss_and_grads(config: ModelConfig, params, inputs, targets, mask):
    tape = Tape()
    bound = {k: tape.param(k, v) for k, v in params.items()}
    out = loss(model_forward(config, bound, tape.constant(inputs), mask), targets)
    return out.item(), ad.backward(tape, out)


def dataset_loss(config: ModelConfig, params, ds: WindowedDataset, mask, batch_size: int = 64) -> float:
    """Normalized-unit MAE over a whole dataset, reduced in window order."""
    bound = {k: Tensor(v) for k, v in params.items()}
    total, count = 0.0, 0
    for lo in range(0, len(ds), batch_size):
        pred = model_forward(config, bound, Tensor(ds.inputs[lo:lo + batch_size]), mask).data
        err = np.abs(pred - ds.targets[lo:lo + batch_size])
        total += float(err.sum())
        count += err.size
    return total / count


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[tuple[int, float, float]]
    best_epoch: int
    best_val_loss: float


def train(model_config: ModelConfig, train_set: WindowedDataset, val_set: WindowedDataset, mask,
          config: TrainConfig, params: dict[str, np.ndarray] | None = None, progress=None) -> TrainResult:
    """Seeded mini-batch training keeping the parameters with the lowest validation loss.

    ``history`` holds ``(epoch, train_loss, val_loss)`` per epoch, where the
    train loss is the window-weighted mean of the batch losses seen that epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = init_params(model_config) if params is None else {k: v.copy() for k, v in params.items()}
    state = AdamState()
    history = []
    best = (np.inf, 0, params)
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            value, grads = loss_and_grads(model_config, params, train_set.inputs[idx], train_set.targets[idx], mask)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            params, state = adam_step(params, grads, state, config)
            running += value * idx.size
            seen += idx.size
        train_loss = running / seen
        val_loss = dataset_loss(model_config, params, val_set, mask)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, -1, val_loss)
        history.append((epoch, train_loss, val_loss))
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: v.copy() for k, v in params.items()})
        if progress is not None:
            progress(epoch, train_loss, val_loss)
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
    return TrainResult(best[2], history, best[1], best[0])


def write_history(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e, tr, va in history:
            fh.write(f"{e},{tr!r},{va!r}\n")
