"""Two-stage prompt optimization with SGD, warmup and cosine decay.

Stage 1 updates the visual prompts with cross-entropy over the augmented
label space. Stage 2 freezes them and updates the textual prompts with
cross-entropy plus a lambda-weighted triplet loss on mined hard negatives.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import torch

from .data import SegmentSet
from .errors import ValidationError
from .mining import LabelSpace, NegativeBank, build_label_space, hardest_negatives
from .model import DualEncoder
from .objectives import LossConfig, TripletBatch, cross_entropy, lambda_at, triplet_loss

log = logging.getLogger(__name__)

STAGE_MODES = ("two_stage_v_then_t", "two_stage_t_then_v", "joint", "v_triplet_then_t_triplet")


@dataclass
class TrainConfig:
    epochs_stage1: int = 5
    epochs_stage2: int = 5
    batch_size: int = 16
    base_lr: float = 0.0025
    warmup_lr: float = 1e-5
    warmup_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    stage_mode: str = "two_stage_v_then_t"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not (self.base_lr > 0 and self.warmup_lr > 0):
            raise ValidationError("learning rates must be > 0")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.warmup_epochs < 0:
            raise ValidationError("warmup_epochs must be >= 0")
        if self.stage_mode not in STAGE_MODES:
            raise ValidationError(f"stage_mode must be one of {STAGE_MODES}")


@dataclass
class TrainLogEntry:
    stage: int
    epoch: int
    step: int
    lr: float
    lam: float
    loss_ce: float
    loss_triplet: float
    loss_total: float
    grad_norm_visual: float = 0.0
    grad_norm_textual: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return json.dumps(d)


class JsonlLog:
    """Append-only JSON-lines sink; entries are buffered and flushed per epoch."""

    def __init__(self, path=None):
        self.path = path
        self.entries: list[TrainLogEntry] = []
        self._pending: list[str] = []
        self._lock = threading.Lock()
        if path is not None:
            open(path, "w").close()

    def append(self, entry: TrainLogEntry) -> None:
        with self._lock:
            self.entries.append(entry)
            self._pending.append(entry.to_json())

    def flush(self) -> None:
        with self._lock:
            if self.path is not None and self._pending:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write("\n".join(self._pending) + "\n")
            self._pending.clear()


def lr_at(step: int, total_steps: int, cfg: TrainConfig, warmup_steps: int) -> float:
    """Constant warmup rate, then cosine decay from ``base_lr`` to 0 at the last step."""
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return cfg.warmup_lr
    span = total_steps - 1 - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 0.0
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def tensor_digest(tensors: Sequence[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _grad_norm(params) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))


def batch_objective(model: DualEncoder, images: torch.Tensor, targets: torch.Tensor,
                    labels: LabelSpace, lam: float, loss_cfg: LossConfig, *,
                    image_emb: Optional[torch.Tensor] = None,
                    text_emb: Optional[torch.Tensor] = None):
    """Loss for one batch: CE over the label space plus ``lam`` x triplet.

    Embeddings that are passed in are reused (frozen branch caches); the
    others are recomputed. Returns ``(total, ce, triplet)``.
    """
    if text_emb is None:
        text_emb = model.encode_text(labels.labels)
    if image_emb is None:
        image_emb = model.encode_image(images)
    ce = cross_entropy(model.logits(image_emb, text_emb), targets)
    if lam == 0:
        return ce, ce, torch.zeros((), dtype=ce.dtype)
    neg = hardest_negatives(image_emb, text_emb, targets)
    trip = triplet_loss(TripletBatch(image_emb, text_emb[targets], text_emb[neg]),
                        loss_cfg.margin_mu)
    return ce + lam * trip, ce, trip


def _targets(data: SegmentSet, labels: LabelSpace) -> torch.Tensor:
    base = set(labels.base)
    unknown = sorted({lab for lab in data.labels if lab not in base})
    if unknown:
        raise ValidationError(f"training labels not among base queries: {unknown}")
    return torch.tensor([labels.index(lab) for lab in data.labels], dtype=torch.long)


def train_stage(model: DualEncoder, data: SegmentSet, labels: LabelSpace, cfg: TrainConfig,
                loss_cfg: LossConfig, *, train_visual: bool, train_textual: bool,
                use_triplet: bool, epochs: int, stage: int, sink: Optional[JsonlLog] = None,
                epoch_offset: int = 0, on_step: Optional[Callable] = None) -> DualEncoder:
    """Optimize the selected prompt groups for ``epochs`` passes over ``data``."""
    cfg.validate()
    loss_cfg.validate()
    targets = _targets(data, labels)
    if use_triplet and len(labels) < 2:
        raise ValidationError("label space has no negative candidates")
    if epochs == 0 or len(data) == 0:
        return model
    model.set_trainable(train_visual, train_textual)
    params = [p for p in model.prompts.parameters() if p.requires_grad]
    opt = make_optimizer(params, cfg)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + stage)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        text_cache = image_cache = None
        if not train_textual:
            with torch.no_grad():
                text_cache = model.encode_text(labels.labels)
        if not train_visual:
            with torch.no_grad():
                image_cache = torch.cat([model.encode_image(data.images[i:i + 256])
                                         for i in range(0, len(data), 256)])
        order = torch.randperm(len(data), generator=gen)
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lr = lr_at(step, total, cfg, warmup)
            for group in opt.param_groups:
                group["lr"] = lr
            lam = lambda_at(step, max(total - 1, 1), loss_cfg) if use_triplet else 0.0
            loss, ce, trip = batch_objective(
                model, data.images[idx], targets[idx], labels, lam, loss_cfg,
                image_emb=None if image_cache is None else image_cache[idx],
                text_emb=text_cache)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at stage {stage} step {step}")
            model.prompts.zero_grad(set_to_none=True)
            loss.backward()
            entry = TrainLogEntry(
                stage=stage, epoch=epoch_offset + epoch, step=step, lr=lr, lam=lam,
                loss_ce=ce.item(), loss_triplet=trip.item(), loss_total=loss.item(),
                grad_norm_visual=_grad_norm(model.prompts.visual),
                grad_norm_textual=_grad_norm(model.prompts.textual))
            opt.step()
            if sink is not None:
                sink.append(entry)
            if on_step is not None:
                on_step(entry, model)
            step += 1
        if sink is not None:
            sink.flush()
        log.debug("stage %d epoch %d done", stage, epoch)
    model.set_trainable(False, False)
    return model


def stage1_train(state: DualEncoder, data: SegmentSet, labels: LabelSpace, cfg: TrainConfig,
                 loss_cfg: Optional[LossConfig] = None, sink: Optional[JsonlLog] = None,
                 ) -> DualEncoder:
    """Visual prompts only, cross-entropy only."""
    return train_stage(state, data, labels, cfg, loss_cfg or LossConfig(), train_visual=True,
                       train_textual=False, use_triplet=False, epochs=cfg.epochs_stage1,
                       stage=1, sink=sink)


def stage2_train(state: DualEncoder, data: SegmentSet, labels: LabelSpace,
                 bank: NegativeBank, cfg: TrainConfig, loss_cfg: LossConfig,
                 sink: Optional[JsonlLog] = None, epoch_offset: int = 0,
                 on_step: Optional[Callable] = None) -> DualEncoder:
    """Textual prompts only, cross-entropy plus scheduled triplet loss."""
    if len(labels) < 2:
        raise ValidationError("empty negative pool: label space has a single query")
    return train_stage(state, data, labels, cfg, loss_cfg, train_visual=False,
                       train_textual=True, use_triplet=True, epochs=cfg.epochs_stage2,
                       stage=2, sink=sink, epoch_offset=epoch_offset, on_step=on_step)


def run_adaptation(state: DualEncoder, data: SegmentSet, queries: Sequence[str],
                   bank: NegativeBank, cfg: TrainConfig, loss_cfg: LossConfig,
                   sink: Optional[JsonlLog] = None,
                   on_stage_end: Optional[Callable[[str, DualEncoder], None]] = None,
                   ) -> tuple[DualEncoder, list[TrainLogEntry]]:
    """Run the configured stage order; returns the adapted model and its log."""
    cfg.validate()
    sink = sink if sink is not None else JsonlLog()
    labels = build_label_space(list(queries), bank)
    e1, e2 = cfg.epochs_stage1, cfg.epochs_stage2
    if cfg.stage_mode == "joint":
        train_stage(state, data, labels, cfg, loss_cfg, train_visual=True, train_textual=True,
                    use_triplet=True, epochs=e1 + e2, stage=1, sink=sink)
    else:
        visual_first = cfg.stage_mode != "two_stage_t_then_v"
        train_stage(state, data, labels, cfg, loss_cfg, train_visual=visual_first,
                    train_textual=not visual_first,
                    use_triplet=cfg.stage_mode != "two_stage_v_then_t", epochs=e1, stage=1,
                    sink=sink)
        if on_stage_end is not None:
            on_stage_end("stage1", state)
        train_stage(state, data, labels, cfg, loss_cfg, train_visual=not visual_first,
                    train_textual=visual_first,
                    use_triplet=cfg.stage_mode != "two_stage_t_then_v", epochs=e2, stage=2,
                    sink=sink, epoch_offset=e1)
    if on_stage_end is not None:
        on_stage_end("final", state)
    return state, sink.entries
