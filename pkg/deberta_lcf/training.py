import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import jsonlines
import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import make_batches, split_holdout
from .exceptions import ContractError
from .model import DebertaLcfModel, forward
from .tensor import Tape, Tensor
from .types import CLASS_LABELS, N_CLASSES, EpochRecord, Example

logger = logging.getLogger(__name__)


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `labels` under softmax(logits), via log-sum-exp"""
    targets = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy: logits {logits.shape} do not match {targets.shape[0]} labels")
    if ((targets < 0) | (targets >= logits.shape[1])).any():
        raise ContractError(f"cross_entropy: labels must lie in [0, {logits.shape[1]}), got {targets.tolist()}")

    z = logits.data
    shift = z.max(axis=1, keepdims=True)
    exp = np.exp(z - shift)
    log_norm = shift[:, 0] + np.log(exp.sum(axis=1))
    rows = np.arange(len(targets))
    loss = np.mean(log_norm - z[rows, targets])

    def backward(grad: np.ndarray) -> T.Grads:
        probs = exp / exp.sum(axis=1, keepdims=True)
        probs[rows, targets] -= 1.0
        return (probs * (float(grad) / len(targets)),)

    return T.record_op("cross_entropy", np.asarray(loss), (logits,), backward)


@dataclass
class AdamState:
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update in place; weight decay is decoupled from the gradient"""
    state.step += 1
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step

    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros(param.shape)
        m = state.first_moment.get(name, np.zeros(param.shape))
        v = state.second_moment.get(name, np.zeros(param.shape))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad**2
        state.first_moment[name], state.second_moment[name] = m, v

        if config.weight_decay:
            param.data -= config.learning_rate * config.weight_decay * param.data
        param.data -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)


@dataclass
class Metrics:
    accuracy: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    macro_f1: float
    confusion: np.ndarray

    def as_lines(self) -> list[str]:
        """`key=value` lines, one metric each, four decimals"""
        lines = [f"accuracy={self.accuracy:.4f}", f"macro_f1={self.macro_f1:.4f}"]
        for index, label in enumerate(CLASS_LABELS):
            lines.append(f"{label}.precision={self.precision[index]:.4f}")
            lines.append(f"{label}.recall={self.recall[index]:.4f}")
            lines.append(f"{label}.f1={self.f1[index]:.4f}")
            lines.append(f"{label}.support={int(self.confusion[index].sum())}")
        return lines


def confusion_matrix(labels: Sequence[int] | np.ndarray, predictions: Sequence[int] | np.ndarray) -> np.ndarray:
    """Rows are true classes, columns predicted classes"""
    matrix = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(matrix, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return matrix


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def metrics_from_confusion(matrix: np.ndarray) -> Metrics:
    """Per-class scores are 0 whenever their denominator is 0"""
    total = int(matrix.sum())
    if total == 0:
        raise ContractError("cannot compute metrics over an empty dataset")

    precision, recall, f1 = [], [], []
    for index in range(N_CLASSES):
        tp = int(matrix[index, index])
        fp = int(matrix[:, index].sum()) - tp
        fn = int(matrix[index, :].sum()) - tp
        precision.append(_ratio(tp, tp + fp))
        recall.append(_ratio(tp, tp + fn))
        f1.append(_ratio(2 * tp, 2 * tp + fp + fn))

    return Metrics(
        accuracy=int(np.trace(matrix)) / total,
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        macro_f1=sum(f1) / N_CLASSES,
        confusion=matrix,
    )


def predict_batch_labels(logits: Tensor) -> np.ndarray:
    # argmax picks the lowest index on ties
    return np.argmax(logits.data, axis=1)


def evaluate(model: DebertaLcfModel, examples: Sequence[Example], batch_size: int = 32) -> Metrics:
    if not examples:
        raise ContractError("cannot evaluate on an empty dataset")

    matrix = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for batch in make_batches(examples, batch_size):
        logits = forward(model, batch.tokens, batch.spans, batch.pad_mask)
        matrix += confusion_matrix(batch.labels, predict_batch_labels(logits))
    return metrics_from_confusion(matrix)


def majority_baseline(examples: Sequence[Example]) -> float:
    """Accuracy of always predicting the most frequent label of `examples`"""
    if not examples:
        raise ContractError("majority baseline of an empty dataset")
    counts = np.bincount([e.label.class_index for e in examples], minlength=N_CLASSES)
    return int(counts.max()) / len(examples)


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_state: dict[str, np.ndarray]


def snapshot(model: DebertaLcfModel) -> dict[str, np.ndarray]:
    return {name: param.numpy() for name, param in model.named_parameters().items()}


def restore(model: DebertaLcfModel, state: Mapping[str, np.ndarray]) -> None:
    for name, param in model.named_parameters().items():
        param.data[...] = state[name]


def train(model: DebertaLcfModel, examples: Sequence[Example], config: TrainConfig) -> TrainResult:
    """
    Fit `model` in place with Adam on cross-entropy and leave it at the selected parameters.

    With `val_fraction > 0` a seeded held-out split picks the epoch of best validation
    macro-F1 (ties keep the earlier epoch) and `patience > 0` stops after that many epochs
    without improvement; otherwise the last epoch is kept.
    """
    if not examples:
        raise ContractError("cannot train on an empty dataset")

    train_set, val_set = split_holdout(examples, config.val_fraction, config.seed)
    if not train_set:
        raise ContractError("validation split left no training examples")

    dropout_rng = np.random.default_rng(config.seed)
    params = model.named_parameters()
    state = AdamState()
    history: list[EpochRecord] = []
    best_epoch, best_score, best_state = 0, -1.0, snapshot(model)
    stale = 0

    for epoch in range(1, config.epochs + 1):
        total_loss, correct = 0.0, 0
        for batch in make_batches(train_set, config.batch_size, seed=config.seed + epoch):
            model.zero_grad()
            with Tape() as tape:
                logits = forward(model, batch.tokens, batch.spans, batch.pad_mask, rng=dropout_rng)
                loss = cross_entropy(logits, batch.labels)
            T.backward(loss, tape)
            adam_step(params, state, config)

            total_loss += loss.item() * len(batch)
            correct += int((predict_batch_labels(logits) == batch.labels).sum())
            logger.debug(f"epoch {epoch}: batch loss {loss.item():.6f}")

        record: EpochRecord = {
            "epoch": epoch,
            "loss": total_loss / len(train_set),
            "train_accuracy": correct / len(train_set),
            "val_macro_f1": evaluate(model, val_set).macro_f1 if val_set else None,
        }
        history.append(record)
        logger.info(
            f"epoch {epoch}: loss {record['loss']:.4f}, train acc {record['train_accuracy']:.4f}, "
            f"val macro-F1 {record['val_macro_f1']}"
        )

        score = record["val_macro_f1"]
        if score is None:
            best_epoch, best_state = epoch, snapshot(model)
            continue
        if score > best_score:
            best_epoch, best_score, best_state, stale = epoch, score, snapshot(model), 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                logger.info(f"early stop after epoch {epoch}, best epoch {best_epoch}")
                break

    restore(model, best_state)
    return TrainResult(history, best_epoch, best_state)


def write_history(path: Path, history: Sequence[EpochRecord]) -> None:
    with jsonlines.open(path, mode="w") as writer:
        writer.write_all(history)
