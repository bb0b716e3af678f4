"""Loss, Adam optimization, LR scheduling, the epoch loop, and CV folds.

Training follows a fixed recipe: Adam at alpha = 1e-4 (beta1 0.9, beta2
0.999), mini-batches of 4, up to 40 epochs, learning rate divided by 5
after 3 consecutive epochs without validation improvement, and early
stopping after 8. Runs are deterministic given the seed: shuffle order,
reduction order, and parameter updates are all reproducible bitwise
within a precision mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .models import SegModel, forward
from .tensor import Tape, Tensor, backward

CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 40
    plateau_patience: int = 3
    plateau_factor: float = 5.0
    early_stop_patience: int = 8
    improvement_threshold: float = 1e-9
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.alpha}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")
        if min(self.plateau_patience, self.early_stop_patience) <= 0:
            raise ConfigurationError("patience values must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")


@dataclass
class OptimizerState:
    """Adam moments plus the schedule/stopping counters.

    The plateau counter and the early-stop counter run independently off
    the same improvement signal; an LR reduction resets only the former.
    """

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int
    lr: float
    config: TrainConfig
    best_val: float = math.inf
    plateau_counter: int = 0
    stale_epochs: int = 0


def init_optimizer(params: Mapping[str, Tensor], config: TrainConfig) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
        t=0,
        lr=config.alpha,
        config=config,
    )


def ce_loss(probs: Tensor, target) -> Tensor:
    """Cross-entropy averaged over every pixel of the batch.

    ``probs`` is an N x 2 x H x W probability map (channel 1 foreground);
    ``target`` an N x H x W binary mask. Probabilities are clamped at
    1e-12 before the log.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise DimensionError(f"ce_loss expects Nx2xHxW probabilities, got {probs.shape}")
    expected = (probs.shape[0], probs.shape[2], probs.shape[3])
    if y.shape != expected:
        raise DimensionError(f"ce_loss target shape {y.shape} does not match {expected}")
    y = y.astype(probs.data.dtype)

    k = float(y.size)
    p = np.clip(probs.data, CLAMP, None)
    value = -(y * np.log(p[:, 1]) + (1.0 - y) * np.log(p[:, 0])).sum() / k
    out = Tensor(np.asarray(value))

    live = probs.data >= CLAMP

    def grad_fn(gout: np.ndarray) -> tuple:
        g = np.zeros_like(probs.data)
        g[:, 1] = -y / p[:, 1]
        g[:, 0] = -(1.0 - y) / p[:, 0]
        g *= live
        g *= gout.reshape(()) / k
        return (g,)

    T.record_op((probs,), out, grad_fn)
    return out


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> Tuple[Mapping[str, Tensor], OptimizerState]:
    """Bias-corrected Adam update, in place, at the state's current LR."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise UsageError(f"missing gradients for parameters: {missing}")
    state.t += 1
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=p.data.dtype)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def plateau_update(state: OptimizerState, val_loss: float) -> OptimizerState:
    """Per-epoch schedule step: divide LR after `plateau_patience` stale epochs."""
    cfg = state.config
    if val_loss < state.best_val - cfg.improvement_threshold:
        state.best_val = val_loss
        state.plateau_counter = 0
        state.stale_epochs = 0
        return state
    state.plateau_counter += 1
    state.stale_epochs += 1
    if state.plateau_counter >= cfg.plateau_patience:
        state.lr /= cfg.plateau_factor
        state.plateau_counter = 0
    return state


def early_stop_check(state: OptimizerState) -> bool:
    """True exactly when `early_stop_patience` consecutive epochs went stale."""
    return state.stale_epochs >= state.config.early_stop_patience


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dsc: float
    lr: float
    improved: bool
    lr_reduced: bool


@dataclass
class TrainResult:
    history: Tuple[EpochRecord, ...]
    stopped_epoch: int
    best_epoch: int
    best_val_loss: float


Sample = Tuple[np.ndarray, np.ndarray]  # (image HxW in [0,1], mask HxW in {0,1})


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def _stack(samples: Sequence[Sample], idx) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([samples[i][0] for i in idx])[:, None, :, :]
    masks = np.stack([samples[i][1] for i in idx])
    return images, masks


def evaluate_loss_dsc(model: SegModel, samples: Sequence[Sample], batch_size: int) -> Tuple[float, float]:
    """Mean CE loss plus micro-averaged DSC at threshold 0.5 over a set."""
    total_loss = 0.0
    tp = fp = fn = 0
    for idx in _batches(len(samples), batch_size):
        xb, yb = _stack(samples, idx)
        probs = forward(model, Tensor(xb))
        total_loss += ce_loss(probs, yb).item() * len(idx)
        pred = probs.data[:, 1] > 0.5
        gt = yb > 0.5
        tp += int(np.sum(pred & gt))
        fp += int(np.sum(pred & ~gt))
        fn += int(np.sum(~pred & gt))
    dsc = 1.0 if (2 * tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
    return total_loss / len(samples), dsc


def train(
    model: SegModel,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    config: TrainConfig,
) -> TrainResult:
    """Full epoch loop; restores the best-validation-epoch parameters."""
    if not len(train_set) or not len(val_set):
        raise UsageError("train and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    state = init_optimizer(model.params, config)
    best_snapshot = {name: p.data.copy() for name, p in model.params.items()}
    best_epoch = 0
    history: list[EpochRecord] = []

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for idx in _batches(len(train_set), config.batch_size, order):
            xb, yb = _stack(train_set, idx)
            with Tape() as tape:
                probs = forward(model, Tensor(xb))
                loss = ce_loss(probs, yb)
            grad_map = backward(tape, loss)
            named = {}
            for name, p in model.params.items():
                if p in grad_map:
                    named[name] = grad_map[p].data
            adam_step(model.params, named, state, config)
            epoch_loss += loss.item() * len(idx)

        val_loss, val_dsc = evaluate_loss_dsc(model, val_set, config.batch_size)
        improved = val_loss < state.best_val - config.improvement_threshold
        lr_before = state.lr
        plateau_update(state, val_loss)
        if improved:
            best_snapshot = {name: p.data.copy() for name, p in model.params.items()}
            best_epoch = epoch
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / len(train_set),
                val_loss=val_loss,
                val_dsc=val_dsc,
                lr=state.lr,
                improved=improved,
                lr_reduced=state.lr != lr_before,
            )
        )
        if early_stop_check(state):
            break

    for name, p in model.params.items():
        p.data[...] = best_snapshot[name]
    return TrainResult(
        history=tuple(history),
        stopped_epoch=len(history),
        best_epoch=best_epoch,
        best_val_loss=state.best_val,
    )


# ---------------------------------------------------------------------------
# cross-validation folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    test_ids: Tuple[str, ...]
    folds: Tuple[Tuple[Tuple[str, ...], Tuple[str, ...]], ...]  # (train, val) per fold
    test_by_class: Dict[str, Tuple[str, ...]] = field(default_factory=dict)


def make_fold_plan(manifest, test_fraction: float = 0.2, k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified test holdout plus k near-equal CV folds.

    Manifests that carry explicit split tags are honored verbatim: the
    tagged test set is used as-is, and fold membership comes from the
    records' fold indices when present (otherwise the tagged train/val
    split stands as a single fold).
    """
    records = list(manifest)
    if not records:
        raise ConfigurationError("manifest is empty")
    tagged = [r for r in records if getattr(r, "split", None)]
    if tagged and len(tagged) != len(records):
        raise ConfigurationError("manifest mixes tagged and untagged records")

    by_class: Dict[str, list] = {}
    for r in records:
        by_class.setdefault(r.cls, []).append(r)

    if tagged:
        test = [r for r in records if r.split == "test"]
        rest = [r for r in records if r.split != "test"]
        with_fold = [r for r in rest if getattr(r, "fold", None) is not None]
        if with_fold:
            if len(with_fold) != len(rest):
                raise ConfigurationError("manifest mixes fold-indexed and plain records")
            n_folds = max(r.fold for r in rest) + 1
            folds = []
            for f in range(n_folds):
                val_ids = tuple(r.id for r in rest if r.fold == f)
                train_ids = tuple(r.id for r in rest if r.fold != f)
                folds.append((train_ids, val_ids))
        else:
            train_ids = tuple(r.id for r in rest if r.split == "train")
            val_ids = tuple(r.id for r in rest if r.split == "val")
            folds = [(train_ids, val_ids)]
        test_by_class = {
            cls: tuple(r.id for r in rs if r.split == "test") for cls, rs in by_class.items()
        }
        return FoldPlan(
            k=len(folds),
            test_ids=tuple(r.id for r in test),
            folds=tuple(folds),
            test_by_class=test_by_class,
        )

    rng = np.random.default_rng(seed)
    test_by_class: Dict[str, Tuple[str, ...]] = {}
    chunks_by_class: Dict[str, list] = {}
    for cls in sorted(by_class):
        ids = [r.id for r in by_class[cls]]
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n_test = round(test_fraction * len(ids))
        remaining = shuffled[n_test:]
        if len(remaining) < k:
            raise ConfigurationError(
                f"class {cls!r} has only {len(remaining)} non-test items for {k} folds"
            )
        test_by_class[cls] = tuple(shuffled[:n_test])
        chunks_by_class[cls] = [list(c) for c in np.array_split(np.array(remaining), k)]

    folds = []
    for f in range(k):
        val_ids: list[str] = []
        train_ids: list[str] = []
        for cls in sorted(chunks_by_class):
            for j, chunk in enumerate(chunks_by_class[cls]):
                (val_ids if j == f else train_ids).extend(chunk)
        folds.append((tuple(train_ids), tuple(val_ids)))

    test_ids = tuple(i for cls in sorted(test_by_class) for i in test_by_class[cls])
    return FoldPlan(k=k, test_ids=test_ids, folds=tuple(folds), test_by_class=test_by_class)


def audit_class_counts(manifest) -> Dict[str, Dict[str, int]]:
    """Per-class train/val/test/total counts for tagged manifests."""
    counts: Dict[str, Dict[str, int]] = {}
    for r in manifest:
        row = counts.setdefault(r.cls, {"train": 0, "val": 0, "test": 0, "total": 0})
        if r.split:
            row[r.split] += 1
        row["total"] += 1
    return counts
