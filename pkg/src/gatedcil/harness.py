"""Class-incremental protocol: task splits, the learner state, training and evaluation.

Each task owns a disjoint block of classes. Classes are shuffled once per seed
and sliced contiguously, and every label is mapped to its global column in the
concatenated classifier output, so task ``t`` occupies columns
``offset_t .. offset_t + |C^t|``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Adam, NonFiniteError, Tensor, get_dtype, no_grad, ops
from .backbone import Backbone
from .config import ExperimentConfig
from .data import Dataset
from .gcab import Gcab, TaskMaskSet
from .masks import (CumulativeMasks, accumulate, anneal_s, binarize, build_weight_masks, capacity_usage,
                    install_gates, sparsity_loss)
from .metrics import StageResult, score_stage
from .pfr import ProjectionNetwork, ProjectorStack, cascade_project, feature_distillation_loss, pfr_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training hit a non-finite value; the message carries batch diagnostics."""


class PhaseError(RuntimeError):
    """A learner operation was called in the wrong phase of a task."""


# -- tasks ---------------------------------------------------------------------------


@dataclass
class Task:
    index: int
    classes: np.ndarray
    offset: int
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    holdout_images: np.ndarray
    holdout_labels: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class TaskSequence:
    tasks: list[Task]
    class_order: np.ndarray

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, t: int) -> Task:
        """Task by 1-based index."""
        if not 1 <= t <= len(self.tasks):
            raise IndexError(f"task {t} outside 1..{len(self.tasks)}")
        return self.tasks[t - 1]

    @property
    def class_counts(self) -> list[int]:
        return [task.num_classes for task in self.tasks]


def task_class_counts(num_classes: int, scheme: str, num_tasks: int, first_task_classes: int | None = None) -> list[int]:
    """Classes per task. For ``larger_first`` ``num_tasks`` counts the tasks after the first."""
    if num_tasks < 1:
        raise ValueError("need at least one task")
    if scheme == "equal":
        if num_classes % num_tasks:
            raise ValueError(f"{num_classes} classes cannot be split equally into {num_tasks} tasks")
        return [num_classes // num_tasks] * num_tasks
    if scheme == "larger_first":
        if first_task_classes is None or not 0 < first_task_classes < num_classes:
            raise ValueError("larger_first needs 0 < first_task_classes < num_classes")
        rest = num_classes - first_task_classes
        if rest % num_tasks:
            raise ValueError(f"remaining {rest} classes cannot be split equally into {num_tasks} tasks")
        return [first_task_classes] + [rest // num_tasks] * num_tasks
    raise ValueError(f"unknown split scheme {scheme!r}")


def split_tasks(dataset: Dataset, scheme: str = "equal", num_tasks: int = 5, first_task_classes: int | None = None,
                seed: int = 0, holdout_fraction: float = 0.0) -> TaskSequence:
    counts = task_class_counts(dataset.num_classes, scheme, num_tasks, first_task_classes)
    dataset.check_nonempty_classes()
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(dataset.num_classes)
    column = np.empty(dataset.num_classes, dtype=np.int64)
    column[order] = np.arange(dataset.num_classes)
    train_x = dataset.normalize(dataset.train_images)
    test_x = dataset.normalize(dataset.test_images)
    tasks = []
    offset = 0
    for t, count in enumerate(counts, start=1):
        classes = order[offset:offset + count]
        tr = np.flatnonzero(np.isin(dataset.train_labels, classes))
        te = np.flatnonzero(np.isin(dataset.test_labels, classes))
        tr = tr[rng.permutation(len(tr))]
        n_hold = int(np.floor(holdout_fraction * len(tr)))
        hold, tr = np.sort(tr[:n_hold]), np.sort(tr[n_hold:])
        tasks.append(Task(
            index=t, classes=classes, offset=offset,
            train_images=train_x[tr], train_labels=column[dataset.train_labels[tr]],
            test_images=test_x[te], test_labels=column[dataset.test_labels[te]],
            holdout_images=train_x[hold], holdout_labels=column[dataset.train_labels[hold]],
        ))
        offset += count
    return TaskSequence(tasks, order)


def tasks_from_config(cfg: ExperimentConfig, dataset: Dataset) -> TaskSequence:
    return split_tasks(dataset, cfg.split.scheme, cfg.split.num_tasks, cfg.split.first_task_classes,
                       cfg.seed, cfg.train.holdout_fraction)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flips and random crops from a zero-padded copy."""
    b, h, w, _ = images.shape
    flip = rng.random(b) < 0.5
    out = np.where(flip[:, None, None, None], images[:, :, ::-1], images)
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    dy = rng.integers(0, 2 * pad + 1, size=b)
    dx = rng.integers(0, 2 * pad + 1, size=b)
    return np.stack([padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(b)])


# -- learner -------------------------------------------------------------------------


class CilState:
    """Everything the learner carries between tasks.

    ``completed`` counts finalized tasks. ``phase`` is ``idle`` between tasks,
    ``training`` inside the epoch loop and ``trained`` once training of the
    current task finished but before it is finalized.
    """

    def __init__(self, cfg: ExperimentConfig, class_counts: list[int], class_order: np.ndarray | None = None) -> None:
        self.cfg = cfg
        self.class_counts = list(class_counts)
        self.class_order = None if class_order is None else np.asarray(class_order)
        m = cfg.model
        init = np.random.default_rng([cfg.seed, 0])
        self.backbone = Backbone(m.image_size, m.channels, m.patch_size, m.embed_dim, m.depth, m.heads,
                                 m.mlp_ratio, init, m.position_embedding)
        self.gcab = Gcab(m.embed_dim, m.heads, m.mlp_ratio, len(class_counts), init, m.decoder_mlp_act,
                         cfg.classifier_layernorm, m.mask_init)
        self.frozen_backbone: Backbone | None = None
        self.cumulative = CumulativeMasks.empty(self.gcab.dim, self.gcab.hidden)
        self.task_masks: list[tuple[np.ndarray, np.ndarray]] = []
        self.projectors = ProjectorStack()
        self.current_projector: ProjectionNetwork | None = None
        self.completed = 0
        self.phase = "idle"
        self.capacity_log: list[dict[str, float]] = []
        self.optimizer_state: dict[str, np.ndarray] = {}
        self.backbone_frozen = False

    @property
    def num_tasks(self) -> int:
        return len(self.class_counts)

    @property
    def current_task(self) -> int:
        return self.completed + (0 if self.phase == "idle" else 1)

    # -- task lifecycle -----------------------------------------------------------
    def begin_task(self) -> int:
        if self.phase != "idle":
            raise PhaseError(f"task {self.current_task} is still {self.phase}; finalize it first")
        if self.completed >= self.num_tasks:
            raise PhaseError("every task in the sequence is already finalized")
        t = self.completed + 1
        self.gcab.add_head(self.class_counts[t - 1], np.random.default_rng([self.cfg.seed, 1, t]))
        self.current_projector = None
        if t >= 2 and self.cfg.uses_projector:
            self.current_projector = ProjectionNetwork(self.gcab.dim, self.cfg.pfr_layers,
                                                       np.random.default_rng([self.cfg.seed, 2, t]))
        self.phase = "training"
        return t

    def end_training(self) -> None:
        if self.phase != "training":
            raise PhaseError("no task is being trained")
        self.phase = "trained"

    def finalize_task(self) -> None:
        """Accumulate masks, freeze and store the projector, snapshot the backbone."""
        if self.phase != "trained":
            raise PhaseError(f"cannot finalize while {self.phase}; train the task to completion first")
        t = self.completed + 1
        if self.cfg.ablation.gca:
            with no_grad():
                m_i, m_2 = self.gcab.mask_embedding.masks(t, self.cfg.train.s_max).numpy()
            if self.cfg.train.binarize_at_accumulate:
                m_i, m_2 = binarize(m_i), binarize(m_2)
            self.task_masks.append((m_i, m_2))
            self.cumulative = accumulate((m_i, m_2), self.cumulative, t)
        self.capacity_log.append(capacity_usage(self.cumulative))
        if self.current_projector is not None:
            self.projectors.push(t, self.current_projector)
            self.current_projector = None
        if self.cfg.train.freeze_backbone_after_task1 and not self.backbone_frozen:
            self.backbone.freeze()
            self.backbone_frozen = True
        self.frozen_backbone = self.backbone.frozen_copy()
        self.completed = t
        self.phase = "idle"

    # -- masks and parameters -----------------------------------------------------------
    def stored_masks(self, t: int) -> TaskMaskSet | None:
        if not self.cfg.ablation.gca:
            return None
        m_i, m_2 = self.task_masks[t - 1]
        return TaskMaskSet.constant(m_i, m_2)

    def masks_for(self, t: int, s: float) -> TaskMaskSet | None:
        """Masks for pass ``t`` while training: stored masks for completed tasks, learned ones otherwise."""
        if not self.cfg.ablation.gca:
            return None
        if t <= self.completed:
            return self.stored_masks(t)
        return self.gcab.mask_embedding.masks(t, s)

    def trainable_parameters(self) -> list[Tensor]:
        params = self.backbone.parameters()
        gcab = self.gcab.parameters()
        if not self.cfg.ablation.gca:
            skip = {id(self.gcab.mask_embedding.a_i), id(self.gcab.mask_embedding.a_2)}
            gcab = [p for p in gcab if id(p) not in skip]
        params += gcab
        if self.current_projector is not None:
            params += self.current_projector.parameters()
        return params

    def gates(self):
        if not self.cfg.ablation.gca:
            return []
        return install_gates(self.gcab, build_weight_masks(self.cumulative), self.current_task)

    # -- losses and prediction -------------------------------------------------------
    def training_losses(self, images: np.ndarray, columns: np.ndarray, s: float) -> tuple[Tensor, dict[str, Tensor]]:
        """Total loss and its parts for one batch of the current task."""
        if self.phase != "training":
            raise PhaseError("training_losses needs an active task")
        cfg, t = self.cfg, self.current_task
        feats = self.backbone(images)
        passes = []
        current_masks = None
        for j in range(1, t + 1):
            masks = self.masks_for(j, s)
            if j == t:
                current_masks = masks
            logits, _ = self.gcab.task_logits(feats, j, masks)
            passes.append(logits)
        logits = ops.concat(passes, axis=-1)
        if cfg.train.loss == "bce":
            targets = np.zeros(logits.shape)
            targets[np.arange(len(columns)), columns] = 1.0
            parts = {"cls": ops.bce_with_logits(logits, targets)}
        else:
            parts = {"cls": ops.softmax_cross_entropy(logits, columns)}
        if current_masks is not None:
            parts["gcab"] = sparsity_loss(current_masks, self.cumulative, cfg.train.lambda_gcab)
        reg = cfg.ablation.backbone_reg
        if t >= 2 and reg != "none":
            with no_grad():
                previous = self.frozen_backbone(images)
            if reg == "fd":
                parts["pfr"] = feature_distillation_loss(feats, previous, cfg.train.lambda_pfr)
            else:
                parts["pfr"] = pfr_loss(feats, previous, self.current_projector, cfg.train.lambda_pfr)
        total = parts["cls"]
        for name in ("gcab", "pfr"):
            if name in parts:
                total = ops.add(total, parts[name])
        return total, parts

    def pass_features(self, feats: Tensor, t: int) -> Tensor:
        if self.cfg.ablation.fdc:
            return cascade_project(feats, self.projectors, t, self.completed)
        return feats

    def predict_logits(self, images: np.ndarray, batch_size: int | None = None) -> np.ndarray:
        """Concatenated logits over every class of the finalized tasks."""
        if self.completed < 1:
            raise PhaseError("no finalized task to predict with")
        batch_size = batch_size or self.cfg.train.eval_batch_size
        out = []
        with no_grad():
            for lo in range(0, len(images), batch_size):
                x = images[lo:lo + batch_size].astype(get_dtype())
                feats = self.backbone(x)
                per_task = [self.gcab.task_logits(self.pass_features(feats, j), j, self.stored_masks(j))[0].data
                            for j in range(1, self.completed + 1)]
                out.append(np.concatenate(per_task, axis=-1))
        width = sum(self.class_counts[:self.completed])
        return np.concatenate(out, axis=0) if out else np.zeros((0, width))

    def decoder_features(self, images: np.ndarray, t: int, batch_size: int | None = None) -> np.ndarray:
        """Pre-classifier decoder outputs f for pass ``t`` (drift-compensated when enabled)."""
        batch_size = batch_size or self.cfg.train.eval_batch_size
        out = []
        with no_grad():
            for lo in range(0, len(images), batch_size):
                feats = self.backbone(images[lo:lo + batch_size].astype(get_dtype()))
                _, f = self.gcab.task_logits(self.pass_features(feats, t), t, self.stored_masks(t))
                out.append(f.data)
        return np.concatenate(out, axis=0)


# -- training and evaluation ------------------------------------------------------------


@dataclass
class TaskLog:
    task: int
    epoch_losses: list[float] = field(default_factory=list)
    holdout_taw: float | None = None


def train_task(state: CilState, task: Task, on_epoch: Callable[[int, float], None] | None = None) -> TaskLog:
    """Train one task end to end and finalize it."""
    cfg = state.cfg
    tr = cfg.train
    t = state.begin_task()
    if t != task.index:
        raise PhaseError(f"learner expects task {t} but got task {task.index}")
    if len(task.train_labels) == 0:
        raise ValueError(f"task {t} has no training samples")
    params = state.trainable_parameters()
    opt = Adam(params, lr=tr.lr, betas=(tr.beta1, tr.beta2), eps=tr.adam_eps)
    opt.set_gates(state.gates())
    rng = np.random.default_rng([cfg.seed, 3, t])
    n = len(task.train_labels)
    num_batches = int(np.ceil(n / tr.batch_size))
    record = TaskLog(t)
    dtype = get_dtype()
    for epoch in range(1, tr.epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        for i in range(1, num_batches + 1):
            idx = order[(i - 1) * tr.batch_size:i * tr.batch_size]
            images = task.train_images[idx]
            if tr.augment:
                images = augment_batch(images, rng)
            s = anneal_s(i, num_batches, tr.s_max)
            try:
                loss, parts = state.training_losses(images.astype(dtype), task.train_labels[idx], s)
                opt.zero_grad()
                loss.backward()
                opt.step()
                for p in params:
                    if not np.all(np.isfinite(p.data)):
                        raise NonFiniteError("parameter became non-finite after the optimizer step")
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in task {t}, epoch {epoch}, batch {i}/{num_batches} "
                                    f"(s={s:.4g}, batch size {len(idx)}): {exc}") from exc
            total_loss += float(loss.data) * len(idx)
        record.epoch_losses.append(total_loss / n)
        if on_epoch is not None:
            on_epoch(epoch, record.epoch_losses[-1])
    state.optimizer_state = opt.state_dict()
    state.end_training()
    state.finalize_task()
    if len(task.holdout_labels):
        logits = state.predict_logits(task.holdout_images)[:, task.offset:task.offset + task.num_classes]
        record.holdout_taw = float(100.0 * np.mean(logits.argmax(axis=1) + task.offset == task.holdout_labels))
        log.info("task %d holdout task-aware accuracy %.2f (monitoring only)", t, record.holdout_taw)
    return record


def evaluate(state: CilState, tasks: TaskSequence) -> tuple[StageResult, list[np.ndarray]]:
    """Stage row for the finalized tasks plus the raw concatenated logits per task's test data."""
    t = state.completed
    logits = [state.predict_logits(tasks[j].test_images) for j in range(1, t + 1)]
    columns = [tasks[j].test_labels for j in range(1, t + 1)]
    return score_stage(t, logits, columns, state.class_counts[:t]), logits
