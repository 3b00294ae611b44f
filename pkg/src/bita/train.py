"""Two-stage pre-training and fine-tuning drivers."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError, pack, restore
from .config import RunConfig, TrainConfig
from .data import Batch, ImageTextPair, collate, make_batches
from .model import BitaModel, ModelConfig, build_prefix_causal_mask
from .objectives import ItcConfig, itc_loss, pclm_loss
from .optim import OptimState, ScheduleConfig, adamw_step, clip_grad_norm, lr_at
from .vocab import Vocabulary, build_vocab

log = logging.getLogger(__name__)

__all__ = [
    "TrainingDiverged",
    "StageResult",
    "stage1_loss",
    "stage2_loss",
    "train_stage",
    "overfit_batch",
    "dataset_loss",
    "run_stage1",
    "run_stage2",
    "finetune",
    "model_from_checkpoint",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class StageResult:
    model: BitaModel
    vocab: Vocabulary
    optim: OptimState
    checkpoint: Checkpoint
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


class FeatureCache:
    """Memoised frozen-encoder features keyed by image bytes."""

    def __init__(self, model: BitaModel, max_items: int = 8192):
        self._model = model
        self._store: dict[bytes, np.ndarray] = {}
        self._max = max_items

    def __call__(self, images: np.ndarray) -> ad.Tensor:
        keys = [hashlib.blake2b(img.tobytes(), digest_size=16).digest() for img in images]
        missing = [i for i, k in enumerate(keys) if k not in self._store]
        if missing:
            feats = self._model.image_encode(images[missing]).data
            if len(self._store) + len(missing) > self._max:
                self._store.clear()
            for i, f in zip(missing, feats):
                self._store[keys[i]] = f
        return ad.Tensor(np.stack([self._store[k] for k in keys]))


def stage1_loss(model: BitaModel, batch: Batch, itc: ItcConfig, feats: ad.Tensor | None = None) -> ad.Tensor:
    if feats is None:
        feats = model.image_encode(batch.images)
    z_hat = model.ift.image_branch(feats)
    cls = ad.getitem(model.text_features(batch.text_ids), (slice(None), 0))
    loss, _ = itc_loss(z_hat, cls, itc)
    return loss


def stage2_loss(model: BitaModel, batch: Batch, feats: ad.Tensor | None = None) -> ad.Tensor:
    if feats is None:
        feats = model.image_encode(batch.images)
    prefix = model.project_to_lm(model.ift.image_branch(feats))
    mask = build_prefix_causal_mask(prefix.shape[1], batch.lm_input.shape[1])
    logits = model.lm_forward(prefix, batch.lm_input, mask)
    return pclm_loss(logits, batch.lm_target)


def _schedule(tc: TrainConfig, total: int) -> ScheduleConfig:
    return ScheduleConfig(min(tc.warmup_steps, total - 1), tc.lr_start, tc.lr_peak, tc.lr_min, total)


EpochHook = Callable[[int, BitaModel], None]


def train_stage(model: BitaModel, vocab: Vocabulary, dataset: Sequence[ImageTextPair],
                stage: str, tc: TrainConfig, seed: int, meta: dict | None = None,
                on_epoch_end: EpochHook | None = None) -> StageResult:
    """Optimise the ``stage`` parameter set ("s1", "s2" or "ft") for ``tc.epochs``.

    ``on_epoch_end(epoch, model)`` runs after every completed epoch.
    """
    cfg = model.config
    params = model.trainable_parameters(stage)
    itc = ItcConfig(tc.temperature, tc.pooling)
    per_epoch = len(dataset) // tc.batch_size
    total = tc.epochs * per_epoch
    if tc.max_steps:
        total = min(total, tc.max_steps)
    if total < 1:
        raise ValueError("configuration yields zero training steps")
    schedule = _schedule(tc, total)
    state = OptimState()
    encode = FeatureCache(model)
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    step = 0
    epoch = 0
    while step < total:
        batches = make_batches(dataset, tc.batch_size, epoch_seed=seed * 100003 + epoch,
                               vocab=vocab, text_len=cfg.max_text_len,
                               augment_mode=tc.augment, image_size=cfg.image_size)
        epoch_vals = []
        for batch in batches:
            if step >= total:
                break
            for p in params.values():
                p.grad = None
            feats = encode(batch.images)
            if stage == "s1":
                loss = stage1_loss(model, batch, itc, feats)
            else:
                loss = stage2_loss(model, batch, feats)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"{stage} loss became {value} at step {step}")
            ad.backward(loss, inputs=list(params.values()))
            grads = {k: p.grad for k, p in params.items()}
            if tc.grad_clip > 0:
                clip_grad_norm(grads, tc.grad_clip)
            adamw_step(params, grads, state, lr_at(step, schedule), tc.beta1, tc.beta2,
                       tc.eps, tc.weight_decay)
            step_losses.append(value)
            epoch_vals.append(value)
            if tc.log_every and step % tc.log_every == 0:
                log.info("%s step %d/%d loss %.6f lr %.3g", stage, step, total, value,
                         lr_at(step, schedule))
            step += 1
        if epoch_vals:
            epoch_losses.append(float(np.mean(epoch_vals)))
            if on_epoch_end is not None:
                on_epoch_end(epoch, model)
        epoch += 1
    for p in params.values():
        p.grad = None
    full_meta = {
        "stage": stage,
        "model": cfg.to_dict(),
        "vocab": vocab.tokens,
        "steps": step,
        "frozen_sha256": model.frozen_digest(),
        **(meta or {}),
    }
    ckpt = pack(model.trainable_parameters("all"), state, full_meta)
    return StageResult(model, vocab, state, ckpt, step_losses, epoch_losses)


def overfit_batch(model: BitaModel, batch: Batch, stage: str = "s2", steps: int = 2000,
                  lr: float = 1e-3, target: float | None = None, tc: TrainConfig | None = None) -> list[float]:
    """Repeatedly optimise one fixed batch; stops early once ``target`` is reached."""
    tc = tc or TrainConfig()
    params = model.trainable_parameters(stage)
    itc = ItcConfig(tc.temperature, tc.pooling)
    feats = FeatureCache(model)(batch.images)
    state = OptimState()
    losses: list[float] = []
    for _ in range(steps):
        for p in params.values():
            p.grad = None
        loss = stage1_loss(model, batch, itc, feats) if stage == "s1" else stage2_loss(model, batch, feats)
        losses.append(float(loss.data))
        if target is not None and losses[-1] < target:
            break
        ad.backward(loss, inputs=list(params.values()))
        adamw_step(params, {k: p.grad for k, p in params.items()}, state, lr,
                   tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    for p in params.values():
        p.grad = None
    return losses


def dataset_loss(model: BitaModel, vocab: Vocabulary, dataset: Sequence[ImageTextPair],
                 stage: str = "s2", batch_size: int = 16, tc: TrainConfig | None = None) -> float:
    """Mean loss over every (image, caption) pair of ``dataset``, without augmentation."""
    tc = tc or TrainConfig()
    itc = ItcConfig(tc.temperature, tc.pooling)
    items = [(p, c) for p in dataset for c in p.captions]
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            if stage == "s1":
                # contrastive batches must not repeat an image
                chunk = list({p.id: (p, c) for p, c in chunk}.values())
                if len(chunk) < 2:
                    continue
            batch = collate([p for p, _ in chunk], [c for _, c in chunk], vocab, model.config.max_text_len)
            loss = stage1_loss(model, batch, itc) if stage == "s1" else stage2_loss(model, batch)
            total += float(loss.data) * len(chunk)
            count += len(chunk)
    return total / count


def _vocab_for(datasets: Sequence[ImageTextPair]) -> Vocabulary:
    return build_vocab(c for pair in datasets for c in pair.captions)


def model_from_checkpoint(ckpt: Checkpoint, expect_stage: Sequence[str] | None = None):
    """Rebuild ``(model, vocab)`` from a checkpoint, checking its stage tag."""
    stage = ckpt.meta.get("stage")
    if expect_stage is not None and stage not in expect_stage:
        raise CheckpointError(f"checkpoint stage {stage!r}; expected one of {list(expect_stage)}")
    model = BitaModel(ModelConfig.from_dict(ckpt.meta["model"]))
    restore(ckpt, model.trainable_parameters("all"))
    vocab = Vocabulary(ckpt.meta["vocab"])
    return model, vocab


def run_stage1(cfg: RunConfig, dataset: Sequence[ImageTextPair],
               vocab: Vocabulary | None = None, on_epoch_end: EpochHook | None = None) -> StageResult:
    """Contrastive alignment of the IFT against the frozen image encoder."""
    vocab = vocab or _vocab_for(dataset)
    model = BitaModel(cfg.model.with_(vocab_size=len(vocab)))
    return train_stage(model, vocab, dataset, "s1", cfg.stages["stage1"], cfg.seed,
                       {"run": cfg.to_dict()}, on_epoch_end)


def run_stage2(cfg: RunConfig, dataset: Sequence[ImageTextPair],
               s1_checkpoint: Checkpoint | None = None, from_scratch: bool = False,
               vocab: Vocabulary | None = None, on_epoch_end: EpochHook | None = None) -> StageResult:
    """Prefix causal language modeling through the frozen LM.

    Starts from a stage-1 checkpoint, or from fresh weights when
    ``from_scratch`` is set (the single-stage ablation).
    """
    if s1_checkpoint is None:
        if not from_scratch:
            raise ValueError("stage 2 needs a stage-1 checkpoint or from_scratch=True")
        vocab = vocab or _vocab_for(dataset)
        model = BitaModel(cfg.model.with_(vocab_size=len(vocab)))
    else:
        model, vocab = model_from_checkpoint(s1_checkpoint, ("s1",))
        _check_compatible(model.config, cfg.model)
    return train_stage(model, vocab, dataset, "s2", cfg.stages["stage2"], cfg.seed,
                       {"run": cfg.to_dict(), "from_scratch": bool(from_scratch)}, on_epoch_end)


def finetune(cfg: RunConfig, dataset: Sequence[ImageTextPair], s2_checkpoint: Checkpoint,
             on_epoch_end: EpochHook | None = None) -> StageResult:
    model, vocab = model_from_checkpoint(s2_checkpoint, ("s2", "ft"))
    _check_compatible(model.config, cfg.model)
    return train_stage(model, vocab, dataset, "ft", cfg.stages["finetune"], cfg.seed,
                       {"run": cfg.to_dict()}, on_epoch_end)


def _check_compatible(ckpt_cfg: ModelConfig, run_cfg: ModelConfig) -> None:
    shape_keys = ("hidden_dim", "num_layers", "num_heads", "num_prompts", "image_feat_dim",
                  "image_patches", "image_size", "lm_dim", "lm_layers", "max_text_len", "mixer")
    diffs = [f"{k}: checkpoint {getattr(ckpt_cfg, k)} vs config {getattr(run_cfg, k)}"
             for k in shape_keys if getattr(ckpt_cfg, k) != getattr(run_cfg, k)]
    if diffs:
        raise ad.ShapeError("checkpoint/config mismatch: " + "; ".join(diffs))
