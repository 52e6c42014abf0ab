"""Stage-0 float pre-training plus the three-stage QAT protocol.

Stage 0 trains the whole model in float and doubles as the distillation
teacher for stage 1 (no larger pre-trained encoder exists at this scale).
Stage 1 trains the quantized image encoder against the teacher embedding
while prompt encoder and decoder stay frozen in float; stage 2 trains the
quantized decoder on top of the frozen best stage-1 encoder; stage 3
fine-tunes everything. Every stage runs the same warm-up + cosine schedule,
evaluates each epoch's checkpoint on the held-out split, and returns the
best one (ties go to the earliest epoch). Frozen parameters and frozen
quantizer scales are verified bit-identical across each stage.
"""

from __future__ import annotations

import csv
import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import quant
from . import tensor as T
from .dataset import (SamplerConfig, build_index, flip_box, locate_slice,
                      preprocess, preprocess_mask, sample_epoch, split_ids,
                      transform_box)
from .errors import ConfigurationError, ContractError, QsegError
from .inference import postprocess
from .losses import LossConfig, compound_loss
from .metrics import dsc, nsd
from .model import PromptSegModel
from .tensor import Tape, Tensor


# ------------------------------------------------------------------ schedule


@dataclass
class ScheduleConfig:
    """Linear warm-up to the initial LR, then cosine annealing down to
    ``min_lr_fraction`` of it over a half period of ``anneal_epochs - 1``."""

    initial_lr: float = 0.01
    warmup_epochs: int = 5
    anneal_epochs: int = 10
    warmup_start_fraction: float = 0.01
    min_lr_fraction: float = 0.001
    # "separate" runs warmup_epochs + anneal_epochs epochs; "overlap" merges
    # the boundary epoch (the warm-up endpoint and the cosine start are the
    # same LR), giving one epoch fewer.
    epoch_mode: str = "separate"

    def validate(self):
        if self.warmup_epochs < 1:
            raise ConfigurationError("warmup_epochs must be >= 1")
        if self.anneal_epochs < 2:
            raise ConfigurationError("anneal_epochs must be >= 2")
        if self.epoch_mode not in ("separate", "overlap"):
            raise ConfigurationError(f"unknown epoch_mode {self.epoch_mode!r}")
        return self

    @property
    def total_epochs(self) -> int:
        n = self.warmup_epochs + self.anneal_epochs
        return n - 1 if self.epoch_mode == "overlap" else n


def lr_at(cfg: ScheduleConfig, epoch: int) -> float:
    """Learning rate for a 0-based epoch index."""
    cfg.validate()
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(
            f"epoch {epoch} outside schedule [0, {cfg.total_epochs})")
    lr0 = cfg.initial_lr
    start = cfg.warmup_start_fraction
    boundary = cfg.warmup_epochs
    if cfg.epoch_mode == "overlap":
        boundary -= 1
    if epoch < boundary:
        return lr0 * (start + (1.0 - start) * epoch / cfg.warmup_epochs)
    k = epoch - boundary
    lr_min = cfg.min_lr_fraction * lr0
    return lr_min + (lr0 - lr_min) / 2.0 * (
        1.0 + math.cos(math.pi * k / (cfg.anneal_epochs - 1)))


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], momentum: float = 0.9):
        return cls(momentum, {n: np.zeros_like(p.data) for n, p in params.items()})


def sgd_step(params: dict[str, Tensor], state: OptimizerState, lr: float):
    """v <- m*v + g; p <- p - lr*v. Parameters with no gradient are skipped."""
    for name, p in params.items():
        if p.grad is None:
            continue
        g = np.asarray(p.grad, dtype=np.float32)
        if not np.all(np.isfinite(g)):
            raise ContractError(
                f"non-finite gradient in {name!r} at lr={lr:g} "
                f"(|g|max={np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'nan'})")
        v = state.velocity[name]
        v *= state.momentum
        v += g
        p.data = (p.data - lr * v).astype(np.float32)


# -------------------------------------------------------------------- stages


@dataclass
class StagePlan:
    stage: int
    trainable: tuple[str, ...]
    mode: str                 # forward mode during training ("float" or "qat")
    quantize_encoder: bool
    quantize_decoder: bool
    batch_size: int
    distill: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.trainable:
            raise ConfigurationError("a stage needs trainable prefixes")
        return self


def stage_plan(stage: int) -> StagePlan:
    """Batch sizes for stages 1-3 are 2 | 4 | 2; stage 0 reuses 2."""
    plans = {
        0: StagePlan(0, ("enc.", "prompt.", "dec."), "float", False, False, 2),
        1: StagePlan(1, ("enc.",), "qat", True, False, 2, distill=True),
        2: StagePlan(2, ("dec.",), "qat", True, True, 4),
        3: StagePlan(3, ("enc.", "prompt.", "dec."), "qat", True, True, 2),
    }
    if stage not in plans:
        raise ConfigurationError(f"unknown stage {stage}")
    return plans[stage]


def _frozen_fingerprint(model: PromptSegModel, trainable: tuple[str, ...]) -> int:
    crc = 0
    for name in sorted(model.params):
        if not any(name.startswith(p) for p in trainable):
            crc = zlib.crc32(model.params[name].data.tobytes(), crc)
    for node in sorted(model.quantizers):
        if not any(node.startswith(p) for p in trainable):
            crc = zlib.crc32(model.quantizers[node].scale.data.tobytes(), crc)
    return crc


# ------------------------------------------------------------- data plumbing


def _load_sample(store, index, modality: str, volume: int, z: int,
                 rng: np.random.Generator, flip_prob: float):
    """One training example: preprocessed image, 256x256 target mask, and a
    box in preprocessed coordinates. The box id is drawn among the labels
    present on the slice."""
    entry = store.entries[volume]
    raw = store.read_slice(volume, z)
    label = store.read_label(volume, z)
    present = np.unique(label)
    present = present[present > 0]
    if present.size == 0:
        return None
    box_id = int(rng.choice(present))
    x1, y1, x2, y2, _, _ = entry.boxes[box_id - 1]
    chw, rec = preprocess(raw)
    mask = preprocess_mask((label == box_id).astype(np.uint8), rec)
    box = transform_box((x1, y1, x2, y2), rec)
    hflip = bool(rng.random() < flip_prob)
    vflip = bool(rng.random() < flip_prob)
    if hflip:
        chw = chw[..., ::-1]
        mask = mask[:, ::-1]
    if vflip:
        chw = chw[:, ::-1, :]
        mask = mask[::-1, :]
    box = flip_box(box, rec.size, hflip, vflip)
    return np.ascontiguousarray(chw), np.ascontiguousarray(mask), box


def evaluate_slices(model: PromptSegModel, store, index, gids_by_mod,
                    mode: str = "qat", limit: int | None = None,
                    rng: np.random.Generator | None = None):
    """Mean per-slice DSC over the given global slice ids, one score per box
    present on the slice, predictions mapped back to original resolution."""
    flat = [(m, gid) for m in sorted(gids_by_mod) for gid in gids_by_mod[m]]
    if limit is not None and len(flat) > limit:
        sel = (rng or np.random.default_rng(0)).choice(len(flat), size=limit,
                                                       replace=False)
        flat = [flat[i] for i in sorted(sel)]
    dscs, nsds = [], []
    for m, gid in flat:
        volume, z = locate_slice(index[m], int(gid))
        entry = store.entries[volume]
        label = store.read_label(volume, z)
        present = np.unique(label)
        present = present[present > 0]
        if present.size == 0:
            continue
        chw, rec = preprocess(store.read_slice(volume, z))
        emb = model.encode_image(chw, mode)
        for box_id in present:
            x1, y1, x2, y2, _, _ = entry.boxes[int(box_id) - 1]
            prompt = model.encode_prompt(transform_box((x1, y1, x2, y2), rec))
            logits = model.decode_mask(emb, prompt, mode)
            pred = postprocess(logits.data, rec, (entry.h, entry.w))
            gt = label == box_id
            dscs.append(dsc(pred, gt))
            nsds.append(nsd(pred, gt))
    if not dscs:
        return 0.0, 0.0
    return float(np.mean(dscs)), float(np.mean(nsds))


# ----------------------------------------------------------------- run_stage


@dataclass
class StageResult:
    stage: int
    history: list[dict]   # epoch, stage, lr, train_loss, eval_dsc, eval_nsd, wall_s
    best_epoch: int
    best_dsc: float
    best_snapshot: dict


def run_stage(model: PromptSegModel, plan: StagePlan, store, index,
              schedule: ScheduleConfig, rng: np.random.Generator,
              sampler: SamplerConfig | None = None,
              losses: LossConfig | None = None,
              teacher: PromptSegModel | None = None,
              eval_limit: int | None = 64) -> StageResult:
    """Train one stage for the full schedule and return the best checkpoint."""
    plan.validate()
    schedule.validate()
    sampler = (sampler or SamplerConfig()).validate()
    losses = (losses or LossConfig()).validate()
    if plan.distill and teacher is None:
        raise ConfigurationError(f"stage {plan.stage} needs a distillation teacher")

    # Weight quantizers are calibrated against the weights they saw first;
    # when a part becomes quantized for the first time after float training,
    # rebase its weight scales on the current weights. Scales that were
    # already being trained are left alone.
    newly_quantized = []
    if plan.quantize_encoder and not model.config.quantize_encoder:
        newly_quantized.append("enc.")
    if plan.quantize_decoder and not model.config.quantize_decoder:
        newly_quantized.append("dec.")
    for node, st in model.quantizers.items():
        if node.endswith(".w") and any(node.startswith(p) for p in newly_quantized):
            st.calibrated = False
            quant.calibrate(st, model.params[node])

    model.config.quantize_encoder = plan.quantize_encoder
    model.config.quantize_decoder = plan.quantize_decoder
    train_ids = {m: split_ids(index[m])[0] for m in index}
    eval_ids = {m: split_ids(index[m])[1] for m in index}

    # Activation quantizers calibrate on their first quantized forward; run
    # one calibration pass up front so frozen scales do not move mid-stage.
    if plan.mode == "qat":
        for m in sorted(index):
            sample = _load_sample(store, index, m,
                                  *locate_slice(index[m], 0), rng, 0.0)
            if sample is not None:
                chw, _, box = sample
                with Tape():
                    model.forward(chw, box, plan.mode)
                break

    params = model.trainable_tensors(plan.trainable)
    opt = OptimizerState.for_params(params)
    frozen_before = _frozen_fingerprint(model, plan.trainable)

    history: list[dict] = []
    snapshots: list[dict] = []
    for epoch in range(schedule.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at(schedule, epoch)
        samples = sample_epoch(sampler, index, rng, allowed=train_ids)
        epoch_losses = []
        for start in range(0, len(samples), plan.batch_size):
            batch = []
            for m, volume, z in samples[start:start + plan.batch_size]:
                ex = _load_sample(store, index, m, volume, z, rng,
                                  sampler.flip_prob)
                if ex is None:
                    continue
                t_emb = (teacher.encode_image(ex[0], "float").data
                         if plan.distill else None)
                batch.append((*ex, t_emb))
            if not batch:
                continue
            model.zero_grad()
            with Tape() as tape:
                total = None
                for chw, mask, box, t_emb in batch:
                    emb = model.encode_image(chw, plan.mode)
                    prompt = model.encode_prompt(box)
                    logits = model.decode_mask(emb, prompt, plan.mode)
                    loss = compound_loss(logits, mask, losses,
                                         student_emb=emb if plan.distill else None,
                                         teacher_emb=t_emb)
                    total = loss if total is None else T.add(total, loss)
                total = T.mul(total, 1.0 / len(batch))
                T.backward(tape, total)
            epoch_losses.append(float(total.data))
            sgd_step(params, opt, lr)
        if _frozen_fingerprint(model, plan.trainable) != frozen_before:
            raise ContractError(f"stage {plan.stage}: frozen state changed")
        eval_dsc, eval_nsd = evaluate_slices(model, store, index, eval_ids,
                                             plan.mode, limit=eval_limit, rng=rng)
        history.append({"epoch": epoch, "stage": plan.stage, "lr": lr,
                        "train_loss": float(np.mean(epoch_losses)),
                        "eval_dsc": eval_dsc, "eval_nsd": eval_nsd,
                        "wall_s": time.perf_counter() - t0})
        snapshots.append(model.snapshot())

    dscs = [h["eval_dsc"] for h in history]
    best = int(np.argmax(dscs))   # argmax takes the earliest maximum
    model.restore(snapshots[best])
    return StageResult(plan.stage, history, best, dscs[best], snapshots[best])


# --------------------------------------------------------------- run_pipeline


@dataclass
class PipelineResult:
    stages: list[StageResult]
    float_dsc: float
    final_dsc: float
    history: list[dict]


def run_pipeline(model: PromptSegModel, store, schedule: ScheduleConfig | None = None,
                 sampler: SamplerConfig | None = None,
                 losses: LossConfig | None = None,
                 seed: int = 0, stage0: bool = True,
                 eval_limit: int | None = 64,
                 log_path=None) -> PipelineResult:
    """Stages (0,) 1 -> 2 -> 3; returns per-stage histories plus the float
    teacher's and the final quantized model's eval DSC."""
    schedule = (schedule or ScheduleConfig()).validate()
    index = build_index(store)
    rng = np.random.default_rng(seed)
    results: list[StageResult] = []
    teacher = None
    if not stage0:
        # resuming from an externally trained float model: it is the teacher
        teacher = model.clone()
        teacher.config.quantize_encoder = False
        teacher.config.quantize_decoder = False

    order = ([0] if stage0 else []) + [1, 2, 3]
    for stage in order:
        plan = stage_plan(stage)
        try:
            res = run_stage(model, plan, store, index, schedule, rng,
                            sampler=sampler, losses=losses, teacher=teacher,
                            eval_limit=eval_limit)
        except QsegError:
            raise
        except Exception as exc:   # pragma: no cover - diagnostic wrapper
            raise ContractError(f"stage {stage} failed: {exc}") from exc
        results.append(res)
        if stage == 0:
            teacher = model.clone()

    eval_ids = {m: split_ids(index[m])[1] for m in index}
    final_dsc, _ = evaluate_slices(model, store, index, eval_ids, "qat",
                                   limit=eval_limit, rng=np.random.default_rng(seed))
    float_dsc = results[0].best_dsc if stage0 else float("nan")
    history = [h for r in results for h in r.history]
    if log_path is not None:
        write_training_log(history, log_path)
    return PipelineResult(results, float_dsc, final_dsc, history)


def write_training_log(history: list[dict], path) -> str:
    cols = ["epoch", "stage", "lr", "train_loss", "eval_dsc", "eval_nsd", "wall_s"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow({c: row[c] for c in cols})
    return str(path)
