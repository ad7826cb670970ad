"""Optimisation recipe: linear warm-up + cosine decay, AdamW, early stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .data import Dataset, train_val_split
from .errors import NonFiniteError, NonFiniteLoss
from .module import Module
from .tensor import Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    warmup_steps: int | None = None  # None -> 10% of total steps
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 10
    seed: int = 0
    batch_size: int = 8
    val_fraction: float = 0.2
    target_train_top1: float | None = None  # stop once train top-1 reaches this

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_warmup(config: TrainConfig, total_steps: int) -> int:
    warmup = config.warmup_steps if config.warmup_steps is not None else max(1, round(0.1 * total_steps))
    if not 0 <= warmup < total_steps:
        raise ValueError(f"warmup_steps={warmup} must be below total_steps={total_steps}")
    return warmup


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp to ``base_lr`` over ``warmup_steps``, then cosine to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        return base_lr * step / warmup_steps if warmup_steps else base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float, config: TrainConfig) -> tuple[list[np.ndarray], AdamState]:
    """One decoupled-weight-decay Adam update with bias correction.

    Returns new parameter arrays; ``state`` is advanced in place.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = config.betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        decayed = p * (1.0 - lr * config.weight_decay)
        out.append(decayed - lr * m_hat / (np.sqrt(v_hat) + config.eps))
    return out, state


class AdamW:
    """Applies ``adamw_step`` to the trainable tensors of a module."""

    def __init__(self, params: list[Tensor], config: TrainConfig):
        self.params = [p for p in params if p.requires_grad]
        self.config = config
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        with np.errstate(over="ignore", invalid="ignore"):
            new, self.state = adamw_step([p.data for p in self.params], grads, self.state, lr, self.config)
        if not all(np.isfinite(arr).all() for arr in new):
            raise NonFiniteError("AdamW update produced non-finite parameters")
        for p, arr in zip(self.params, new):
            p.data = arr


def top1_accuracy(logits, labels) -> float:
    """Percentage of rows whose argmax (lowest index on ties) equals the label,
    rounded half-up to two decimals."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    if len(labels) == 0:
        raise ValueError("no samples")
    correct = int((np.argmax(logits, axis=1) == labels).sum())
    pct = Decimal(100 * correct) / Decimal(len(labels))
    return float(pct.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def predict_logits(model: Module, data: Dataset, batch_size: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            out.append(model(Tensor(data.frames[sl]), Tensor(data.keypoints[sl])).data)
    return np.concatenate(out, axis=0)


def evaluate(model: Module, data: Dataset, batch_size: int = 16) -> float:
    return top1_accuracy(predict_logits(model, data, batch_size), data.labels)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_top1: float
    lr: float
    train_top1: float | None = None


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    stopped_epoch: int
    train_idx: np.ndarray
    val_idx: np.ndarray

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_top1", "lr"])
        for r in self.history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_top1), repr(r.lr)])
        return buf.getvalue()


def train(model: Module, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Minibatch cross-entropy training with early stopping on val top-1.

    The best-val weights are restored into ``model`` before returning.
    """
    train_idx, val_idx = train_val_split(len(dataset), config.seed, config.val_fraction)
    train_set, val_set = dataset.subset(train_idx), dataset.subset(val_idx)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total = config.epochs * steps_per_epoch
    warmup = resolve_warmup(config, total)
    shuffle = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    opt = AdamW(model.parameters(), config)

    history: list[EpochRecord] = []
    best_top1, best_epoch, best_state = -1.0, 0, model.state_dict()
    stale = 0
    step = 0
    lr = 0.0
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(train_set))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            step += 1
            lr = lr_at(step, config.base_lr, warmup, total)
            loss = None
            try:
                logits = model(Tensor(train_set.frames[idx]), Tensor(train_set.keypoints[idx]))
                loss = cross_entropy(logits, train_set.labels[idx])
                if not math.isfinite(loss.item()):
                    raise NonFiniteLoss(epoch, step, loss.item())
                if loss.requires_grad:
                    model.zero_grad()
                    loss.backward()
                    opt.step(lr)
            except NonFiniteError as exc:
                value = float("nan") if loss is None else loss.item()
                raise NonFiniteLoss(epoch, step, value) from exc
            loss_sum += loss.item() * len(idx)
        val_top1 = evaluate(model, val_set)
        train_top1 = evaluate(model, train_set) if config.target_train_top1 is not None else None
        history.append(EpochRecord(epoch, loss_sum / len(train_set), val_top1, lr, train_top1))
        log.info("epoch %d loss %.4f val %.2f train %s lr %.2e", epoch, history[-1].train_loss, val_top1, train_top1, lr)

        if val_top1 > best_top1:
            best_top1, best_epoch, best_state = val_top1, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
        if train_top1 is not None and train_top1 >= config.target_train_top1:
            break
        if stale >= config.patience:
            break

    model.load_state_dict(best_state)
    return TrainResult(history, best_state, best_epoch, history[-1].epoch, train_idx, val_idx)
