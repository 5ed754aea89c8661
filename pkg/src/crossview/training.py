"""Loss, optimizer, schedule, metrics, and the train/eval loops.

Training is deterministic end to end: the model init, the per-epoch shuffle,
the dropout masks, and the validation split each draw from their own child
stream of the one training seed, so a (seed, config, dataset) triple always
produces the same checkpoint, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledSample, batch_clips
from .errors import ConfigError, ContractError, DataError, NumericError
from .lora import merged_copy
from .model import ModelConfig, ProficiencyClassifier
from .tensor import Tensor, gather_rows, logsumexp, make_rng, no_grad

__all__ = [
    "TrainConfig",
    "Metrics",
    "TrainResult",
    "cross_entropy",
    "AdamW",
    "cosine_lr",
    "evaluate_predictions",
    "evaluate",
    "train",
]

# child streams of the training seed
_MODEL_STREAM = 0
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2
_SPLIT_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch: int = 16
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    eval_split: float = 0.1
    base_lr: float | None = None  # None -> the model preset's learning rate

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError(f"betas must be in [0, 1), got {self.betas}")
        if not 0.0 <= self.eval_split < 1.0:
            raise ConfigError(f"eval split must be in [0, 1), got {self.eval_split}")
        if self.base_lr is not None and self.base_lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.base_lr}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    idx = np.asarray(labels)
    if logits.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ContractError(
            f"expected (B, K) logits with (B,) labels, got {logits.shape} / {idx.shape}"
        )
    if not np.issubdtype(idx.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise DataError(
            f"labels outside [0, {logits.shape[1]}): {np.unique(idx)}"
        )
    lse = logsumexp(logits).reshape(-1)
    return (lse - gather_rows(logits, idx)).mean()


class AdamW:
    """Adam with decoupled weight decay.

    The decay multiplies the parameter directly (p -= lr*wd*p); it never
    enters the gradient moments. The learning rate is passed per step so a
    schedule can drive it.
    """

    def __init__(
        self,
        named_params,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractError(
                    f"gradient shape {g.shape} != parameter {p.data.shape} for {name}"
                )
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to exactly 0 at total_steps."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# -- metrics ----------------------------------------------------------------


@dataclass
class Metrics:
    overall: float
    per_scenario: dict[str, float]
    loss_curve: list[float]
    confusion: np.ndarray  # (K, K), rows = true class, columns = predicted


def evaluate_predictions(
    labels, scenarios, predictions, num_classes: int = 4, loss_curve=None
) -> Metrics:
    """Pure metric computation from parallel label/scenario/prediction lists."""
    y = np.asarray(labels)
    p = np.asarray(predictions)
    if y.shape != p.shape or y.ndim != 1 or len(scenarios) != y.shape[0]:
        raise ContractError(
            f"mismatched metric inputs: {y.shape} labels, {p.shape} predictions, "
            f"{len(scenarios)} scenario tags"
        )
    if y.size == 0:
        raise ContractError("cannot score zero predictions")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y, p), 1)
    hits = y == p
    per_scenario = {}
    for name in dict.fromkeys(scenarios):  # first-appearance order
        mask = np.asarray([s == name for s in scenarios])
        per_scenario[name] = float(hits[mask].mean())
    return Metrics(
        overall=float(hits.mean()),
        per_scenario=per_scenario,
        loss_curve=list(loss_curve) if loss_curve is not None else [],
        confusion=confusion,
    )


def evaluate(
    model: ProficiencyClassifier,
    samples: list[LabeledSample],
    batch: int = 16,
    merged: bool = False,
) -> Metrics:
    """Score a model over a dataset in eval mode (dropout off).

    With merged=True the adapters are folded into a throwaway copy first;
    the result must match the unmerged evaluation to float precision.
    """
    if not samples:
        raise DataError("cannot evaluate on an empty dataset")
    cfg = model.config
    v, _, c, h, w = samples[0].views.shape
    crop = cfg.backbone.image_size
    if v != cfg.views or c != cfg.backbone.channels or h < crop or w < crop:
        raise ConfigError(
            f"dataset geometry (V={v}, C={c}, {h}x{w}) does not fit model "
            f"(V={cfg.views}, C={cfg.backbone.channels}, crop {crop})"
        )
    net = merged_copy(model) if merged else model
    was_training = net.training
    net.eval()
    preds, losses = [], []
    try:
        for lo in range(0, len(samples), batch):
            chunk = samples[lo : lo + batch]
            clips = batch_clips(chunk, cfg.frames, crop)
            with no_grad():
                logits = net(clips)
                loss = cross_entropy(logits, [s.label for s in chunk])
            losses.append(float(loss.data))
            preds.extend(np.argmax(logits.data, axis=-1))
    finally:
        net.train(was_training)
    return evaluate_predictions(
        [s.label for s in samples],
        [s.scenario for s in samples],
        preds,
        num_classes=cfg.num_classes,
        loss_curve=losses,
    )


# -- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    model: ProficiencyClassifier
    history: list[dict]  # one JSON-able record per epoch
    loss_curve: list[float]  # one entry per optimizer step
    best_epoch: int | None  # epoch whose validation weights were kept


def _stratified_split(
    samples: list[LabeledSample], eval_split: float, rng: np.random.Generator
) -> tuple[list[int], list[int]]:
    """Hold out eval_split of each scenario's samples (seeded, per-scenario)."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.scenario, []).append(i)
    train_idx, val_idx = [], []
    for name in groups:
        perm = rng.permutation(len(groups[name]))
        n_val = int(round(eval_split * len(perm)))
        chosen = [groups[name][j] for j in perm]
        val_idx.extend(chosen[:n_val])
        train_idx.extend(chosen[n_val:])
    return sorted(train_idx), sorted(val_idx)


def _first_nonfinite(model: ProficiencyClassifier) -> str | None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            return name
    return None


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    samples: list[LabeledSample],
) -> TrainResult:
    """Fit a fresh model on the dataset; return it with the best-validation
    weights restored (ties keep the earlier epoch), plus the full history.

    Without a validation split (eval_split=0) the final weights are kept.
    """
    if not samples:
        raise DataError("cannot train on an empty dataset")
    base_lr = (
        train_config.base_lr
        if train_config.base_lr is not None
        else model_config.base_lr
    )
    seed = train_config.seed
    train_idx, val_idx = _stratified_split(
        samples, train_config.eval_split, make_rng(seed, _SPLIT_STREAM)
    )
    if not train_idx:
        raise DataError("validation split left no training samples")
    train_set = [samples[i] for i in train_idx]
    val_set = [samples[i] for i in val_idx]

    model = ProficiencyClassifier(model_config, make_rng(seed, _MODEL_STREAM))
    optimizer = AdamW(
        model.named_trainable(),
        betas=train_config.betas,
        weight_decay=train_config.weight_decay,
    )
    shuffle_rng = make_rng(seed, _SHUFFLE_STREAM)
    dropout_rng = make_rng(seed, _DROPOUT_STREAM)
    crop = model_config.backbone.image_size
    steps_per_epoch = math.ceil(len(train_set) / train_config.batch)
    total_steps = train_config.epochs * steps_per_epoch

    history: list[dict] = []
    loss_curve: list[float] = []
    best_state: dict | None = None
    best_acc = -1.0
    best_epoch: int | None = None
    step = 0
    for epoch in range(train_config.epochs):
        model.train()
        order = shuffle_rng.permutation(len(train_set))
        epoch_losses = []
        lr = base_lr
        for lo in range(0, len(order), train_config.batch):
            chunk = [train_set[i] for i in order[lo : lo + train_config.batch]]
            clips = batch_clips(chunk, model_config.frames, crop)
            labels = [s.label for s in chunk]
            try:
                logits = model(clips, rng=dropout_rng)
                loss = cross_entropy(logits, labels)
            except NumericError as exc:
                bad = _first_nonfinite(model)
                raise NumericError(
                    f"training aborted at step {step}: {exc}"
                    + (f" (first non-finite parameter: {bad})" if bad else "")
                ) from exc
            if not np.isfinite(loss.data):
                bad = _first_nonfinite(model)
                raise NumericError(
                    f"training aborted at step {step}: non-finite loss"
                    + (f" (first non-finite parameter: {bad})" if bad else "")
                )
            model.zero_grad()
            loss.backward()
            lr = cosine_lr(step, total_steps, base_lr)
            optimizer.step(lr)
            epoch_losses.append(float(loss.data))
            loss_curve.append(float(loss.data))
            step += 1
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)),
            "val_acc": None,
            "val_scenario_acc": None,
        }
        if val_set:
            val_metrics = evaluate(model, val_set, batch=train_config.batch)
            record["val_acc"] = val_metrics.overall
            record["val_scenario_acc"] = val_metrics.per_scenario
            if val_metrics.overall > best_acc:  # strict: ties keep the earlier epoch
                best_acc = val_metrics.overall
                best_epoch = epoch
                best_state = {k: a.copy() for k, a in model.state_dict().items()}
        history.append(record)
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, loss_curve, best_epoch)
