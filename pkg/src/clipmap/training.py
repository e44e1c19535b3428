"""Training loops: teacher pretraining, the mapping stage and the retraining stage.

Mapping stage: the teacher is frozen and the student is rebuilt from the
maps inside the graph every step, so the maps are the only leaves that
receive gradients.  Retraining stage: the materialised student is trained
against the frozen teacher with ``(1 - lam) * task + lam * distill``.

Every step checks the loss and the updated parameters for NaN/Inf and aborts
with :class:`~clipmap.errors.NumericError` naming the step and tensor.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .data import SplitData, batch_stream
from .errors import ContractError, NumericError
from .fileio import atomic_open
from .losses import LossWeights, clip_task_loss, distill_loss, total_loss
from .mapping import CompressionMaps, CompressionSpec, build_student
from .model import ClipModel, EncoderConfig, clip_logits, encode_image, encode_text, forward_logits, init_clip_model
from .optim import OptimState, adamw_step, clip_grad_norm, lr_at

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "stage", "lr", "task_loss", "soft_loss", "total_loss", "grad_norm")


@dataclass(frozen=True)
class StageConfig:
    stage: str = "mapping"
    steps: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup: int = 50
    clip_norm: float = 5.0
    seed: int = 0
    distill: bool = False  # mapping stage only: add the distillation term

    def __post_init__(self):
        if self.stage not in ("pretrain", "mapping", "retraining"):
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError("steps must be >= 0 and batch_size >= 1")
        if self.steps > 0 and not 0 <= self.warmup < self.steps:
            raise ContractError(f"warmup ({self.warmup}) must be smaller than steps ({self.steps})")
        if self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")

    def lr_at(self, update: int) -> float:
        return lr_at(update, self.lr, self.warmup, self.steps)


@dataclass
class LossLog:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def extend(self, other: "LossLog") -> None:
        self.rows.extend(other.rows)

    def write_csv(self, path) -> None:
        with atomic_open(path) as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
            for r in self.rows:
                writer.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                                 for k in LOG_FIELDS])


def read_loss_csv(path) -> LossLog:
    out = LossLog()
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"step": int(r["step"]), "stage": r["stage"]}
            for k in LOG_FIELDS[2:]:
                row[k] = float(r[k]) if r[k] != "" else None
            out.rows.append(row)
    return out


def decays(name: str, p: Tensor) -> bool:
    """Weight decay touches matrices only (no biases, gains or the logit scale)."""
    return p.ndim >= 2


def _check_finite(step: int, named: Iterable[tuple[str, Tensor]]) -> None:
    for name, p in named:
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"non-finite values in {name} after step {step}", step=step, param=name)


def _offender(named: list[tuple[str, Tensor]]) -> str:
    for name, p in named:
        if not np.all(np.isfinite(p.data)):
            return name
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return "loss"


StepFn = Callable[[np.ndarray], tuple[Tensor, float | None, float | None]]


def _optimize(named: list[tuple[str, Tensor]], step_fn: StepFn, data: SplitData, cfg: StageConfig,
              state: OptimState | None = None, on_step: Callable[[int], None] | None = None
              ) -> tuple[LossLog, OptimState]:
    state = state if state is not None else OptimState()
    loss_log = LossLog()
    if cfg.steps == 0:
        return loss_log, state
    stream = batch_stream(len(data), cfg.batch_size, cfg.seed)
    for step in range(cfg.steps):
        idx = next(stream)
        for _, p in named:
            p.grad = None
        loss, task, soft = step_fn(idx)
        value = float(loss.data)
        if not math.isfinite(value):
            with contextlib.suppress(Exception):
                backward(loss)  # only to locate the first tensor whose gradient went non-finite
            name = _offender(named)
            raise NumericError(f"loss is {value} at step {step} (offending tensor: {name})", step=step, param=name)
        backward(loss)
        grad_norm = clip_grad_norm(named, cfg.clip_norm)
        if not math.isfinite(grad_norm):
            name = _offender(named)
            raise NumericError(f"gradient norm is {grad_norm} at step {step} (offending tensor: {name})",
                               step=step, param=name)
        lr = cfg.lr_at(step + 1)
        adamw_step(named, state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, decays)
        _check_finite(step, named)
        loss_log.rows.append({
            "step": step, "stage": cfg.stage, "lr": lr, "task_loss": task, "soft_loss": soft,
            "total_loss": value, "grad_norm": grad_norm,
        })
        if on_step is not None:
            on_step(step + 1)
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("%s step %d/%d loss %.5f lr %.3g", cfg.stage, step, cfg.steps, value, lr)
    return loss_log, state


def _require_frozen(teacher: ClipModel) -> None:
    if any(p.requires_grad for p in teacher.parameters()):
        raise ContractError("teacher must be frozen (no parameter may require grad)")


# -- teacher -------------------------------------------------------------------

def pretrain_teacher(image_cfg: EncoderConfig, text_cfg: EncoderConfig, data: SplitData, cfg: StageConfig,
                     model_seed: int | None = None) -> tuple[ClipModel, LossLog]:
    """Train a teacher from seeded random init with the contrastive task loss."""
    model = init_clip_model(image_cfg, text_cfg, cfg.seed if model_seed is None else model_seed, requires_grad=True)
    named = list(model.named_parameters())

    def step_fn(idx):
        li, lt = forward_logits(model, *data.batch(idx))
        loss = clip_task_loss(li, lt)
        return loss, float(loss.data), None

    loss_log, _ = _optimize(named, step_fn, data, cfg)
    return model.requires_grad_(False), loss_log


# -- mapping stage -------------------------------------------------------------

def run_mapping_stage(teacher: ClipModel, maps: CompressionMaps, spec: CompressionSpec, data: SplitData,
                      cfg: StageConfig, lam: float = 1.0,
                      on_step: Callable[[int, CompressionMaps], None] | None = None
                      ) -> tuple[CompressionMaps, LossLog]:
    """Train only the maps: rebuild the student from them each step and minimise the task loss.

    With ``cfg.distill`` the objective becomes ``total_loss(task, distill, lam)``
    against the frozen teacher's logits.  ``on_step(n, maps)`` runs after
    update ``n`` (1-based).
    """
    _require_frozen(teacher)
    before = teacher.checksum()
    maps.requires_grad_(True)
    named = list(maps.named_parameters())
    teacher_emb = TeacherCache(teacher, data, cfg.batch_size) if cfg.distill else None
    weights = LossWeights(lam)

    def step_fn(idx):
        student = build_student(teacher, maps, spec)
        li, lt = forward_logits(student, *data.batch(idx))
        task = clip_task_loss(li, lt)
        if teacher_emb is None:
            return task, float(task.data), None
        soft = distill_loss((li, lt), teacher_emb.logits(idx))
        return total_loss(task, soft, weights), float(task.data), float(soft.data)

    hook = None if on_step is None else (lambda n: on_step(n, maps))
    loss_log, _ = _optimize(named, step_fn, data, cfg, on_step=hook)
    if teacher.checksum() != before:
        raise RuntimeError("teacher weights changed during the mapping stage")
    return maps, loss_log


# -- retraining stage ------------------------------------------------------------

class TeacherCache:
    """Frozen-teacher embeddings of a whole split, computed once.

    The teacher never changes, so its per-batch logits are a row/column
    selection of the cached embeddings times its logit scale.
    """

    def __init__(self, teacher: ClipModel, data: SplitData, chunk: int = 256):
        with no_grad():
            img, txt = [], []
            for start in range(0, len(data), chunk):
                sl = slice(start, start + chunk)
                img.append(encode_image(teacher.image, data.images[sl]).data)
                txt.append(encode_text(teacher.text, data.tokens[sl]).data)
            self.image = np.concatenate(img)
            self.text = np.concatenate(txt)
            self.scale = float(teacher.logit_scale().data)

    def logits(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            i2t, t2i = clip_logits(self.image[idx], self.text[idx], self.scale)
        return i2t.data, t2i.data


def run_retraining_stage(teacher: ClipModel, student: ClipModel, data: SplitData, cfg: StageConfig,
                         weights: LossWeights = LossWeights(), cache: TeacherCache | None = None
                         ) -> tuple[ClipModel, LossLog]:
    """Distil the frozen teacher into the materialised student (all student tensors train)."""
    _require_frozen(teacher)
    before = teacher.checksum()
    student.requires_grad_(True)
    named = list(student.named_parameters())
    cache = cache if cache is not None else TeacherCache(teacher, data)

    def step_fn(idx):
        li, lt = forward_logits(student, *data.batch(idx))
        task = clip_task_loss(li, lt)
        soft = distill_loss((li, lt), cache.logits(idx))
        return total_loss(task, soft, weights), float(task.data), float(soft.data)

    loss_log, _ = _optimize(named, step_fn, data, cfg)
    if teacher.checksum() != before:
        raise RuntimeError("teacher weights changed during the retraining stage")
    return student.requires_grad_(False), loss_log
