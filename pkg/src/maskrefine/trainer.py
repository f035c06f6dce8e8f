"""Two-stage training: joint coarse mask + score, then refinement with a frozen trunk and head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import engine as E
from .engine import NonFiniteError, Tensor
from .formats import append_jsonl, load_checkpoint, save_checkpoint
from .metrics import DEFAULT_BINARIZE
from .network import Model, ModelConfig
from .synthdata import Dataset

DEFAULT_LAMBDA = 1.0 / 32


@dataclass
class TrainConfig:
    lr_stage1: float = 0.03
    lr_stage2: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    epochs_stage1: int = 8
    epochs_stage2: int = 4
    lam: float = DEFAULT_LAMBDA
    seed: int = 0

    def __post_init__(self):
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.lam <= 0:
            raise ValueError("score-loss weight must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def desk_train_config(seed: int = 0) -> TrainConfig:
    """Settings measured to converge on the 64-pixel synthetic task within minutes.

    A freshly initialised refinement stack learns too slowly at lr 1e-3 for
    a few-epoch budget, so both stages use 0.03 here.
    """
    return TrainConfig(lr_stage1=0.03, lr_stage2=0.03, epochs_stage1=8, epochs_stage2=12, seed=seed)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    stage: int
    epoch: int = 0
    losses: list[float] = field(default_factory=list)
    frozen: frozenset[str] = frozenset()


class SGD:
    """v <- mu*v + g; p <- p - lr*v. Parameters without a gradient are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for k, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


def _score_target(label) -> np.ndarray:
    lab = np.asarray(label, dtype=np.float64).reshape(-1, 1)
    return (lab > 0).astype(np.float64)


def _positive_weight(label, shape) -> np.ndarray:
    pos = (np.asarray(label).reshape(-1) > 0).astype(np.float64)
    return np.broadcast_to(pos.reshape((-1,) + (1,) * (len(shape) - 1)), shape)


def loss_joint(
    mask_pred: Tensor,
    mask_gt: np.ndarray,
    score_logit: Tensor,
    label,
    lam: float = DEFAULT_LAMBDA,
    from_logits: bool = False,
) -> Tensor:
    """Per-pixel mean BCE over positive samples plus ``lam`` times the score BCE over all samples.

    ``mask_pred`` holds probabilities, or logits with ``from_logits``.
    """
    gt = np.asarray(mask_gt, dtype=np.float64).reshape(mask_pred.shape)
    if score_logit.shape != (mask_pred.shape[0], 1):
        raise ValueError(f"score shape {score_logit.shape} does not match batch {mask_pred.shape[0]}")
    w = _positive_weight(label, mask_pred.shape)
    mask_term = E.bce_with_logits(mask_pred, gt, w) if from_logits else E.bce_loss(mask_pred, gt, w)
    if lam == 0:
        return mask_term
    score_term = E.bce_with_logits(score_logit, _score_target(label))
    return E.add(mask_term, E.scale(score_term, lam))


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _guard(loss: Tensor, stage: int, epoch: int, step: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"stage {stage}: loss became {value} at epoch {epoch}, step {step}")
    return value


# ---------------------------------------------------------------- evaluation


class PatchEval(NamedTuple):
    loss: float
    mean_iou: float
    score_accuracy: float


def _batch_iou(pred: np.ndarray, gt: np.ndarray, thr: float) -> np.ndarray:
    p = pred.reshape(len(pred), -1) >= thr
    g = gt.reshape(len(gt), -1) > 0
    inter = (p & g).sum(1)
    union = (p | g).sum(1)
    return np.divide(inter, union, out=np.zeros(len(p)), where=union > 0)


def evaluate_patches(
    model: Model, data: Dataset, which: str = "coarse", lam: float = DEFAULT_LAMBDA, batch_size: int = 64,
    thr: float = DEFAULT_BINARIZE,
) -> PatchEval:
    """Loss, mean IoU on positives, and score accuracy (logit sign vs label)."""
    if which not in ("coarse", "refined"):
        raise ValueError(f"which must be 'coarse' or 'refined', got {which!r}")
    losses, weights, ious, correct = [], [], [], 0
    with E.no_grad():
        for start in range(0, len(data), batch_size):
            idx = slice(start, start + batch_size)
            x = Tensor(data.patches[idx])
            labels = data.labels[idx]
            ff = model.forward_feedforward(x)
            if which == "coarse":
                logits = E.upsample_to(ff.coarse_logits, model.W)
            else:
                logits = model.refiner.logits(ff.m1, ff.features)
            gt = data.masks[idx][:, None].astype(np.float64)
            losses.append(float(loss_joint(logits, gt, ff.score_logit, labels, lam, from_logits=True).data))
            weights.append(len(labels))
            pos = labels > 0
            if pos.any():
                prob = 0.5 * (1.0 + np.tanh(0.5 * logits.data[pos]))
                ious.extend(_batch_iou(prob, gt[pos], thr))
            correct += int(((ff.score_logit.data[:, 0] > 0) == (labels > 0)).sum())
    return PatchEval(
        float(np.average(losses, weights=weights)) if losses else 0.0,
        float(np.mean(ious)) if ious else 0.0,
        correct / max(len(data), 1),
    )


# ---------------------------------------------------------------- training


Hook = Callable[[dict], None]


def _log(record: dict, log_path: str | Path | None, hook: Hook | None) -> None:
    if log_path is not None:
        append_jsonl(log_path, record)
    if hook is not None:
        hook(record)


def _epoch_record(stage: int, epoch: int, split: str, loss: float, mean_iou: float, **extra) -> dict:
    return {"stage": stage, "epoch": epoch, "split": split, "loss": loss, "mean_iou": mean_iou, **extra}


def train_stage1(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    val: Dataset | None = None,
    log_path: str | Path | None = None,
    hook: Hook | None = None,
) -> TrainState:
    """Joint coarse-mask + score training of trunk and head."""
    if model.refiner is not None:
        raise ValueError("stage 1 expects a model in feedforward_only mode")
    params = model.feedforward_params()
    model.set_trainable(None)
    opt = SGD(params, cfg.lr_stage1, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    state = TrainState(stage=1)
    step = 0
    for epoch in range(cfg.epochs_stage1):
        total, count = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, rng):
            try:
                ff = model.forward_feedforward(Tensor(data.patches[idx]))
                logits = E.upsample_to(ff.coarse_logits, model.W)
                loss = loss_joint(logits, data.masks[idx][:, None], ff.score_logit, data.labels[idx], cfg.lam, from_logits=True)
                value = _guard(loss, 1, epoch, step)
                opt.zero_grad()
                E.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"stage 1: non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            opt.step()
            total += value * len(idx)
            count += len(idx)
            step += 1
        state.epoch = epoch + 1
        state.losses.append(total / count)
        _log(_epoch_record(1, epoch + 1, "train", total / count, None), log_path, hook)
        if val is not None:
            ev = evaluate_patches(model, val, "coarse", cfg.lam)
            _log(_epoch_record(1, epoch + 1, "val", ev.loss, ev.mean_iou, score_accuracy=ev.score_accuracy), log_path, hook)
    return state


def train_stage2(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    val: Dataset | None = None,
    log_path: str | Path | None = None,
    hook: Hook | None = None,
) -> TrainState:
    """Refinement training on positives with every trunk and head parameter frozen.

    Attaches the refinement stack if the model does not have one yet.
    """
    if model.refiner is None:
        model.add_refinement()
    trainable = model.refinement_params()
    frozen = frozenset(model.feedforward_params())
    for p in model.feedforward_params().values():
        p.zero_grad()
    model.set_trainable(list(trainable))
    opt = SGD(trainable, cfg.lr_stage2, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 2])
    pos = data.subset(data.positives)
    if len(pos) == 0:
        raise ValueError("stage 2 needs positive samples")
    state = TrainState(stage=2, frozen=frozen)
    step = 0
    try:
        for epoch in range(cfg.epochs_stage2):
            total, count = 0.0, 0
            for idx in _batches(len(pos), cfg.batch_size, rng):
                try:
                    ff = model.forward_feedforward(Tensor(pos.patches[idx]))
                    logits = model.refiner.logits(ff.m1, ff.features)
                    loss = E.bce_with_logits(logits, pos.masks[idx][:, None].astype(np.float64))
                    value = _guard(loss, 2, epoch, step)
                    opt.zero_grad()
                    E.backward(loss)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"stage 2: non-finite value at epoch {epoch}, step {step}: {exc}") from exc
                opt.step()
                total += value * len(idx)
                count += len(idx)
                step += 1
            state.epoch = epoch + 1
            state.losses.append(total / count)
            _log(_epoch_record(2, epoch + 1, "train", total / count, None), log_path, hook)
            if val is not None:
                ev = evaluate_patches(model, val, "refined", cfg.lam)
                _log(_epoch_record(2, epoch + 1, "val", ev.loss, ev.mean_iou, score_accuracy=ev.score_accuracy), log_path, hook)
    finally:
        model.set_trainable(None)
    return state


def frozen_grad_norms(model: Model) -> dict[str, float]:
    """Gradient norms of trunk/head parameters (0 for parameters without a gradient)."""
    return {k: 0.0 if p.grad is None else float(np.linalg.norm(p.grad)) for k, p in model.feedforward_params().items()}


class DualOutput(NamedTuple):
    coarse: Tensor
    refined: Tensor
    score: Tensor


def dual_inference(model: Model, patch: Tensor | np.ndarray) -> DualOutput:
    """Coarse and refined masks plus the score from a single trunk evaluation."""
    if model.refiner is None:
        raise ValueError("dual inference needs a model with trained refinement")
    x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=np.float64))
    with E.no_grad():
        ff = model.forward_feedforward(x)
        return DualOutput(model.coarse_mask(ff), model.refined_mask(ff), E.sigmoid(ff.score_logit))


# ---------------------------------------------------------------- checkpoints


def save_model(path: str | Path, model: Model, stage: int, train_cfg: TrainConfig | None = None, **meta) -> Path:
    record = {
        "stage": stage,
        "mode": model.mode,
        "model_config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        **({"train_config": train_cfg.to_dict()} if train_cfg else {}),
        **meta,
    }
    return save_checkpoint(path, model.state_dict(), record)


def load_model(path: str | Path) -> tuple[Model, dict]:
    tensors, manifest = load_checkpoint(path)
    cfg = ModelConfig(**manifest["model_config"])
    model = Model(cfg, refined=manifest.get("mode") == "refined")
    model.load_state_dict(tensors)
    return model, manifest


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
