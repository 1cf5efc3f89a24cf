"""Online patch-importance weights: gradient-guided boost and low-change pruning.

Each image carries a weight vector over its M patches. Every `interval`
training iterations the most gradient-salient active patches get an additive
boost (boost_amount split over boost_steps increments, renormalizing after
each), then patches whose weight moved less than the mean change divided by
change_divisor are deactivated, never dropping the active count below
active_floor. Matching for an image halts after max_rounds rounds or once
the change counts have been stable for active_floor consecutive rounds.

All operations are pure and tie-break by patch index, so identical inputs
always produce identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import GradientStateError


@dataclass(frozen=True)
class MatchingConfig:
    boost_steps: int = 3  # inner increments per boost (the paper-scale step count)
    boost_count: int = 10  # patches boosted per round
    boost_amount: float = 0.5  # total additive boost per round, split over boost_steps
    interval: int = 10  # training iterations between matching rounds
    active_floor: int = 20  # minimum surviving active patches
    max_rounds: int = 20  # matching rounds per image before halting
    change_divisor: float = 3.0
    shared_view_weights: bool = True

    def __post_init__(self) -> None:
        if min(self.boost_steps, self.boost_count, self.interval, self.active_floor) < 1:
            raise ValueError("boost_steps, boost_count, interval and active_floor must be positive")
        if self.max_rounds < 0:
            raise ValueError(f"max_rounds must be >= 0, got {self.max_rounds}")
        if self.boost_amount < 0:
            raise ValueError(f"boost_amount must be >= 0, got {self.boost_amount}")
        if self.change_divisor <= 0:
            raise ValueError(f"change_divisor must be > 0, got {self.change_divisor}")


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray  # (M,) nonnegative, active entries sum to 1
    active: np.ndarray  # (M,) bool

    @property
    def num_patches(self) -> int:
        return self.w.shape[0]

    @property
    def active_count(self) -> int:
        return int(self.active.sum())

    def validate(self, atol: float = 1e-9) -> None:
        if np.any(self.w < 0):
            raise ValueError("negative patch weight")
        if np.any(self.w[~self.active] != 0.0):
            raise ValueError("inactive patch with nonzero weight")
        total = self.w[self.active].sum()
        if abs(total - 1.0) > atol:
            raise ValueError(f"active weights sum to {total}, expected 1")


def init_weights(num_patches: int) -> WeightVector:
    """Uniform weights, all patches active."""
    if num_patches < 1:
        raise ValueError(f"need at least one patch, got {num_patches}")
    w = np.full(num_patches, 1.0 / num_patches, dtype=np.float64)
    return WeightVector(w=w, active=np.ones(num_patches, dtype=bool))


def _renormalized(w: np.ndarray, active: np.ndarray) -> np.ndarray:
    out = np.where(active, w, 0.0)
    total = out[active].sum()
    if total > 0:
        out[active] /= total
    elif active.any():
        out[active] = 1.0 / active.sum()
    return out


def patch_saliency(input_grads: np.ndarray) -> np.ndarray:
    """Per-patch saliency: L2 norm of the loss gradient at the weighted patch
    input, averaged over the batch dimension. input_grads: (B, M, F)."""
    if input_grads is None:
        raise GradientStateError("patch saliency requested but no input gradients were recorded")
    grads = np.asarray(input_grads, dtype=np.float64)
    if grads.ndim == 2:
        grads = grads[None]
    return np.linalg.norm(grads, axis=-1).mean(axis=0)


def boost_step(weights: WeightVector, saliency: np.ndarray, config: MatchingConfig) -> WeightVector:
    """Boost the most salient active patches by boost_amount/boost_steps per
    inner step, renormalizing after each increment. Ties go to lower index."""
    m = weights.num_patches
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != (m,):
        raise ValueError(f"saliency shape {saliency.shape} != ({m},)")
    active_idx = np.flatnonzero(weights.active)
    if active_idx.size == 0:
        return weights
    k = min(config.boost_count, active_idx.size)
    order = np.lexsort((active_idx, -saliency[active_idx]))
    chosen = active_idx[order[:k]]
    w = weights.w.copy()
    inc = config.boost_amount / config.boost_steps
    for _ in range(config.boost_steps):
        w[chosen] += inc
        w = _renormalized(w, weights.active)
    return WeightVector(w=w, active=weights.active.copy())


def prune_step(weights: WeightVector, changes: np.ndarray, config: MatchingConfig) -> WeightVector:
    """Deactivate active patches whose change is below mean(change)/divisor,
    lowest change first, stopping at the active_floor."""
    m = weights.num_patches
    changes = np.asarray(changes, dtype=np.float64)
    if changes.shape != (m,):
        raise ValueError(f"changes shape {changes.shape} != ({m},)")
    active = weights.active.copy()
    active_idx = np.flatnonzero(active)
    if active_idx.size == 0:
        return weights
    threshold = changes[active_idx].mean() / config.change_divisor
    floor = min(config.active_floor, m)
    budget = max(0, active_idx.size - floor)
    below = active_idx[changes[active_idx] < threshold]
    if budget == 0 or below.size == 0:
        return weights
    order = np.lexsort((below, changes[below]))
    removed = below[order[:budget]]
    active[removed] = False
    w = _renormalized(weights.w, active)
    return WeightVector(w=w, active=active)


def prune_threshold(weights: WeightVector, changes: np.ndarray, config: MatchingConfig) -> float:
    active_idx = np.flatnonzero(weights.active)
    if active_idx.size == 0:
        return 0.0
    return float(np.asarray(changes, dtype=np.float64)[active_idx].mean() / config.change_divisor)


@dataclass(frozen=True)
class MatchingState:
    """Per-image matching progress: weights plus round bookkeeping."""

    weights: WeightVector
    rounds: int = 0
    stable_rounds: int = 0
    halted: bool = False


def init_store(sample_ids, num_patches: int) -> dict[str, MatchingState]:
    return {sid: MatchingState(weights=init_weights(num_patches)) for sid in sample_ids}


def step_round(state: MatchingState, saliency: np.ndarray, config: MatchingConfig) -> MatchingState:
    """One matching round for one image: boost, measure changes, prune, and
    update the halting bookkeeping."""
    if state.halted or state.rounds >= config.max_rounds:
        return replace(state, halted=True)
    previous = state.weights.w
    boosted = boost_step(state.weights, saliency, config)
    changes = np.abs(boosted.w - previous)
    threshold = prune_threshold(boosted, changes, config)
    active_idx = np.flatnonzero(boosted.active)
    exceeding = int((changes[active_idx] >= threshold).sum())
    pruned = prune_step(boosted, changes, config)
    stable = state.stable_rounds + 1 if exceeding >= config.active_floor else 0
    rounds = state.rounds + 1
    halted = rounds >= config.max_rounds or stable >= config.active_floor
    return MatchingState(weights=pruned, rounds=rounds, stable_rounds=stable, halted=halted)


def matching_due(step: int, config: MatchingConfig) -> bool:
    """Matching rounds fire on training iterations that are multiples of interval."""
    return step >= 1 and step % config.interval == 0


def run_matching_round(
    store: dict[str, MatchingState],
    per_sample_saliency: dict[str, np.ndarray],
    config: MatchingConfig,
) -> None:
    """Apply one matching round to every sample with recorded saliency."""
    for sample_id, saliency in per_sample_saliency.items():
        store[sample_id] = step_round(store[sample_id], saliency, config)


def mean_active_patches(store: dict[str, MatchingState]) -> float:
    if not store:
        return 0.0
    return float(np.mean([s.weights.active_count for s in store.values()]))
