"""Momentum contrastive pre-training: InfoNCE loss, EMA update, training loop.

Each step runs two channels over a batch of (already denoised) pages:
the online channel encodes importance-weighted patches through the patch,
projection and prediction heads; the momentum channel encodes an augmented
view with uniform weights through its patch and projection heads. The loss
is an N-way softmax (InfoNCE) where the positive key is the same-source
momentum embedding and the negatives are the other samples' keys plus an
optional FIFO queue. Matching rounds fire every `interval` iterations using
the gradient at the weighted patch input as the saliency signal.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import matching
from .corpus import CorpusManifest
from .encoder import (
    EncoderConfig,
    EncoderState,
    head_embedding,
    init_state,
    paired_parameters,
)
from .patches import AugmentPolicy, augment, patchify
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.6
    weight_decay: float = 0.05


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.07
    momentum: float = 0.99
    batch_size: int = 32
    steps: int = 500
    queue_size: int = 0
    log_interval: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if self.queue_size < 0:
            raise ValueError(f"queue_size must be >= 0, got {self.queue_size}")
        if self.queue_size == 0 and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when no negative queue is used")
        if self.log_interval < 1:
            raise ValueError(f"log_interval must be >= 1, got {self.log_interval}")


def info_nce(p: np.ndarray, keys: np.ndarray, positive_index: int, temperature: float) -> float:
    """-log softmax probability of the positive key, with a max shift for stability."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    p = np.asarray(p, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] < 1:
        raise ValueError(f"keys must be a nonempty (N, D) array, got shape {keys.shape}")
    if not 0 <= positive_index < keys.shape[0]:
        raise ValueError(f"positive_index {positive_index} outside 0..{keys.shape[0] - 1}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(keys))):
        raise ValueError("non-finite embedding values")
    logits = keys @ p / temperature
    shift = logits.max()
    log_denom = shift + math.log(np.exp(logits - shift).sum())
    return float(log_denom - logits[positive_index])


def ema_update(state: EncoderState, momentum: float) -> EncoderState:
    """momentum <- m * momentum + (1 - m) * online for every paired parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    with torch.no_grad():
        for _, q_param, k_param in paired_parameters(state):
            if q_param.shape != k_param.shape:
                raise ValueError(
                    f"online/momentum shape mismatch: {tuple(q_param.shape)} vs {tuple(k_param.shape)}"
                )
            if momentum == 0.0:
                k_param.copy_(q_param)
            elif momentum != 1.0:
                k_param.mul_(momentum).add_(q_param, alpha=1.0 - momentum)
    return state


@dataclass
class TrainState:
    encoder: EncoderState
    optimizer: torch.optim.Adam
    store: dict[str, matching.MatchingState]
    queue: torch.Tensor  # (queue_size, D)
    queue_count: int
    queue_ptr: int
    step: int


def init_train_state(
    sample_ids,
    encoder_cfg: EncoderConfig,
    contrast_cfg: ContrastConfig,
) -> TrainState:
    enc = init_state(encoder_cfg)
    opt = contrast_cfg.optimizer
    optimizer = torch.optim.Adam(
        enc.online.parameters(),
        lr=opt.learning_rate,
        betas=(opt.beta1, opt.beta2),
        weight_decay=opt.weight_decay,
    )
    queue = torch.zeros(contrast_cfg.queue_size, encoder_cfg.embed_dim, dtype=torch.float64)
    store = matching.init_store(sample_ids, encoder_cfg.token_len)
    return TrainState(
        encoder=enc,
        optimizer=optimizer,
        store=store,
        queue=queue,
        queue_count=0,
        queue_ptr=0,
        step=0,
    )


def _queue_push(state: TrainState, keys: torch.Tensor) -> None:
    capacity = state.queue.shape[0]
    if capacity == 0:
        return
    for row in keys:
        state.queue[state.queue_ptr] = row
        state.queue_ptr = (state.queue_ptr + 1) % capacity
        state.queue_count = min(state.queue_count + 1, capacity)


def pretrain_step(
    batch: list[tuple[str, np.ndarray]],
    state: TrainState,
    contrast_cfg: ContrastConfig,
    matching_cfg: matching.MatchingConfig,
    policy: AugmentPolicy,
    patch_size: int,
    seed: int,
) -> float:
    """One optimization step over a batch of (sample_id, denoised image) pairs."""
    b = len(batch)
    if b + state.queue_count < 2:
        raise ValueError("need at least two keys (batch plus queue) for the contrastive loss")
    iteration = state.step + 1
    m_tokens = state.encoder.config.token_len

    seqs = [patchify(img, patch_size) for _, img in batch]
    raw = np.stack([s.patches for s in seqs])  # (B, M, F)
    weights = np.stack([state.store[sid].weights.w for sid, _ in batch])
    weighted = torch.tensor(raw * (m_tokens * weights)[:, :, None], dtype=torch.float64)
    weighted.requires_grad_(True)

    online = state.encoder.online
    tokens_q = online.encoder(weighted)
    p = head_embedding(tokens_q, online, "online")

    partner_rng = rng_for(seed, "mixup-partner", iteration)
    aug_patches = []
    for j, (sid, img) in enumerate(batch):
        partner = None
        if b > 1:
            partner = batch[(j + 1 + int(partner_rng.integers(b - 1))) % b][1]
        view = augment(img, policy, partner=partner, sample_key=(sid, iteration))
        aug_patches.append(patchify(view, patch_size).patches)
    aug = torch.tensor(np.stack(aug_patches), dtype=torch.float64)
    with torch.no_grad():
        momentum_branch = state.encoder.momentum
        tokens_k = momentum_branch.encoder(aug)
        k = head_embedding(tokens_k, momentum_branch, "momentum")

    keys = k if state.queue_count == 0 else torch.cat([k, state.queue[: state.queue_count]])
    logits = (p @ keys.T) / contrast_cfg.temperature
    targets = torch.arange(b)
    loss = F.cross_entropy(logits, targets)
    loss.backward()

    if matching.matching_due(iteration, matching_cfg):
        grads = weighted.grad.detach().numpy()
        per_sample: dict[str, list[np.ndarray]] = {}
        for j, (sid, _) in enumerate(batch):
            per_sample.setdefault(sid, []).append(grads[j])
        saliencies = {
            sid: matching.patch_saliency(np.stack(rows)) for sid, rows in per_sample.items()
        }
        matching.run_matching_round(state.store, saliencies, matching_cfg)

    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    ema_update(state.encoder, contrast_cfg.momentum)
    _queue_push(state, k.detach())
    state.step = iteration
    state.encoder.step = iteration
    return float(loss.detach())


@dataclass
class MetricsRow:
    step: int
    loss: float
    mean_active_patches: float
    wall_ms: float


def sample_batch_ids(ids: list[str], batch_size: int, seed: int, step: int) -> list[str]:
    """Deterministic batch assembly: a pure function of (seed, step)."""
    rng = rng_for(seed, "batch", step)
    if batch_size <= len(ids):
        chosen = rng.choice(len(ids), size=batch_size, replace=False)
    else:
        chosen = rng.choice(len(ids), size=batch_size, replace=True)
    return [ids[int(i)] for i in chosen]


def pretrain(
    manifest: CorpusManifest,
    encoder_cfg: EncoderConfig,
    contrast_cfg: ContrastConfig,
    matching_cfg: matching.MatchingConfig,
    policy: AugmentPolicy,
    seed: int,
    state: TrainState | None = None,
    steps: int | None = None,
) -> tuple[TrainState, list[MetricsRow]]:
    """Run (or resume) the pre-training loop over the manifest's pretrain split.

    Batches, augmentations and mixup partners are all derived from
    (seed, step), so resuming from a checkpoint reproduces an uninterrupted
    run exactly.
    """
    records = sorted(manifest.split("pretrain"), key=lambda r: r.sample_id)
    if not records:
        raise ValueError("manifest has no pretrain samples")
    images = {r.sample_id: manifest.load_sample(r) for r in records}
    ids = [r.sample_id for r in records]
    if state is None:
        state = init_train_state(ids, encoder_cfg, contrast_cfg)
    total_steps = contrast_cfg.steps if steps is None else steps
    batch_size = min(contrast_cfg.batch_size, max(len(ids), 2))

    metrics: list[MetricsRow] = []
    started = time.perf_counter()
    while state.step < total_steps:
        step_index = state.step + 1
        batch_ids = sample_batch_ids(ids, batch_size, seed, step_index)
        batch = [(sid, images[sid]) for sid in batch_ids]
        loss = pretrain_step(
            batch, state, contrast_cfg, matching_cfg, policy, manifest.patch_size, seed
        )
        if step_index % contrast_cfg.log_interval == 0 or step_index == total_steps:
            metrics.append(
                MetricsRow(
                    step=step_index,
                    loss=loss,
                    mean_active_patches=matching.mean_active_patches(state.store),
                    wall_ms=(time.perf_counter() - started) * 1000.0,
                )
            )
    return state, metrics


def write_metrics(metrics: list[MetricsRow], metrics_path, timings_path) -> None:
    """metrics.csv holds the deterministic columns; wall-clock goes to a sidecar."""
    lines = ["step,loss,mean_active_patches"]
    lines.extend(f"{m.step},{m.loss!r},{m.mean_active_patches!r}" for m in metrics)
    metrics_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tlines = ["step,wall_ms"]
    tlines.extend(f"{m.step},{m.wall_ms:.3f}" for m in metrics)
    timings_path.write_text("\n".join(tlines) + "\n", encoding="utf-8")
