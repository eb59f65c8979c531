"""Compress the task-conditioned decoder into one unmasked block with an aggregated head.

The teacher (multi-pass gated decoder, projector cascades, per-task heads) is
frozen. The student copies the decoder weights, concatenates the teacher heads
into one classifier and is trained only on the latest task's data to match the
teacher's concatenated logits in KL divergence. Its inference is a single pass
on the raw backbone features.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Linear, Module, Tensor, count_flops, get_dtype, no_grad, ops
from .config import DistillConfig, validate_capacity
from .gcab import ClassAttention, TaskMaskSet, classify, gcab_forward
from .harness import CilState, TaskSequence
from .metrics import StageResult, score_stage


def kl_loss(teacher_logits: Tensor | np.ndarray, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(softmax(teacher / T) || softmax(student / T)), averaged over the batch."""
    t_shape = teacher_logits.shape
    if t_shape != student_logits.shape:
        raise ValueError(f"logit widths differ: teacher {t_shape} vs student {student_logits.shape}")
    return ops.kl_div(teacher_logits, student_logits, temperature)


def sample_static_masks(capacity: float, shapes: tuple[int, int], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary masks for the (D,) and (H,) gate sites with round(capacity * dim) ones each."""
    validate_capacity(capacity)
    rng = np.random.default_rng([seed, 11])
    out = []
    for dim in shapes:
        mask = np.zeros(dim)
        mask[rng.choice(dim, size=int(round(capacity * dim)), replace=False)] = 1.0
        out.append(mask)
    return out[0], out[1]


class StudentCab(Module):
    """Unmasked class-attention block with fixed static masks and an aggregated head."""

    def __init__(self, block: ClassAttention, head: Linear, static_masks: tuple[np.ndarray, np.ndarray],
                 classifier_layernorm: bool) -> None:
        self.block = block
        self.head = head
        self.classifier_layernorm = classifier_layernorm
        self._static = static_masks

    @property
    def static_masks(self) -> TaskMaskSet:
        return TaskMaskSet.constant(*self._static)

    @classmethod
    def from_teacher(cls, teacher: CilState, capacity: float, seed: int) -> "StudentCab":
        gcab = teacher.gcab
        block = ClassAttention(gcab.dim, gcab.num_heads, gcab.hidden / gcab.dim, np.random.default_rng(0),
                               gcab.mlp_activation)
        for name in ("class_token", "q", "k", "v", "o", "fc1", "fc2"):
            setattr(block, name, copy.deepcopy(getattr(gcab, name)))
        head = Linear(gcab.dim, sum(h.out_features for h in gcab.classifiers), np.random.default_rng(0))
        head.weight.data = np.concatenate([h.weight.data for h in gcab.classifiers], axis=1)
        head.bias.data = np.concatenate([h.bias.data for h in gcab.classifiers])
        student = cls(block, head, sample_static_masks(capacity, (gcab.dim, gcab.hidden), seed),
                      gcab.classifier_layernorm)
        for _, t in student.named_tensors():
            t.requires_grad = True
        return student

    def logits_from_features(self, feats: Tensor) -> Tensor:
        masks = self.static_masks
        return classify(gcab_forward(feats, masks, self.block), masks.m_o, self.head, self.classifier_layernorm)


def plain_decoder_logits(block: ClassAttention, head: Linear, feats: Tensor, layernorm: bool) -> Tensor:
    """Mask-free class-attention decoder with a single head: the plain ViT reference."""
    return classify(gcab_forward(feats, None, block), None, head, layernorm)


@dataclass
class DistillResult:
    student: StudentCab
    capacity: float
    history: list[dict[str, float]] = field(default_factory=list)
    student_stage: StageResult | None = None
    teacher_stage: StageResult | None = None
    teacher_parameters: int = 0
    student_parameters: int = 0
    student_flops: int = 0
    plain_flops: int = 0

    @property
    def student_tag(self) -> float:
        return 100.0 * sum(self.student_stage.tag_correct) / sum(self.student_stage.total)

    @property
    def teacher_tag(self) -> float:
        return 100.0 * sum(self.teacher_stage.tag_correct) / sum(self.teacher_stage.total)


def teacher_parameters(teacher: CilState) -> int:
    return teacher.backbone.num_parameters() + teacher.gcab.num_parameters() + teacher.projectors.num_parameters()


def student_predict(teacher: CilState, student: StudentCab, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            feats = teacher.backbone(images[lo:lo + batch_size].astype(get_dtype()))
            out.append(student.logits_from_features(feats).data)
    return np.concatenate(out, axis=0)


def inference_flops(teacher: CilState, student: StudentCab, image: np.ndarray) -> tuple[int, int]:
    """Per-image op counts: (student, mask-free decoder), both including the backbone."""
    x = image[None].astype(get_dtype())
    with no_grad():
        with count_flops() as c_student:
            student.logits_from_features(teacher.backbone(x))
        with count_flops() as c_plain:
            plain_decoder_logits(student.block, student.head, teacher.backbone(x), student.classifier_layernorm)
    return c_student.total, c_plain.total


def distill(teacher: CilState, tasks: TaskSequence, cfg: DistillConfig | None = None,
            evaluate_on_test: bool = True) -> DistillResult:
    """Train a student on the latest finalized task's training data."""
    cfg = cfg or teacher.cfg.distill
    capacity = validate_capacity(cfg.capacity)
    if teacher.phase != "idle" or teacher.completed < 1:
        raise ValueError("distillation needs a teacher with at least one finalized task")
    t = teacher.completed
    task = tasks[t]
    images = task.train_images
    if len(images) == 0:
        raise ValueError(f"task {t} has no training samples to distill on")
    frozen_before = {name: p.data.copy() for name, p in teacher.backbone.named_tensors()}
    frozen_before.update({"gcab." + n: p.data.copy() for n, p in teacher.gcab.named_tensors()})

    targets = teacher.predict_logits(images)
    with no_grad():
        feats = np.concatenate([teacher.backbone(images[lo:lo + 256].astype(get_dtype())).data
                                for lo in range(0, len(images), 256)])
    student = StudentCab.from_teacher(teacher, capacity, cfg.seed)
    opt = Adam(student.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 12])
    result = DistillResult(student, capacity)
    n = len(images)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits = student.logits_from_features(Tensor(feats[idx]))
            loss = kl_loss(targets[idx], logits, cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == task.train_labels[idx]).sum())
        result.history.append({"epoch": epoch, "kl": total / n, "train_acc": 100.0 * correct / n})

    for name, p in teacher.backbone.named_tensors():
        if not np.array_equal(p.data, frozen_before[name]):
            raise RuntimeError(f"teacher tensor {name} changed during distillation")
    for name, p in teacher.gcab.named_tensors():
        if not np.array_equal(p.data, frozen_before["gcab." + name]):
            raise RuntimeError(f"teacher tensor gcab.{name} changed during distillation")

    result.teacher_parameters = teacher_parameters(teacher)
    result.student_parameters = teacher.backbone.num_parameters() + student.num_parameters()
    result.student_flops, result.plain_flops = inference_flops(teacher, student, images[0])
    if evaluate_on_test:
        counts = teacher.class_counts[:t]
        cols = [tasks[j].test_labels for j in range(1, t + 1)]
        s_logits = [student_predict(teacher, student, tasks[j].test_images) for j in range(1, t + 1)]
        t_logits = [teacher.predict_logits(tasks[j].test_images) for j in range(1, t + 1)]
        result.student_stage = score_stage(t, s_logits, cols, counts)
        result.teacher_stage = score_stage(t, t_logits, cols, counts)
    return result
