"""Patch decomposition and the stochastic augmentation policy.

An image of shape (H, W) or (H, W, C) splits into M = H*W/P**2 square
tiles in row-major order, each flattened channel-last to a vector of
length P*P*C. ``unpatchify`` is the exact inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .seeding import rng_for


@dataclass(frozen=True)
class PatchSequence:
    """Row-major patch matrix plus the grid metadata needed to invert it."""

    patches: np.ndarray  # (M, P*P*C)
    grid: tuple[int, int]  # (rows, cols)
    patch_size: int
    source_shape: tuple[int, ...]  # shape of the original image array

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Split an image into a sequence of flattened square patches."""
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D or 3-D image, got shape {image.shape}")
    h, w = image.shape[:2]
    p = int(patch_size)
    if p <= 0:
        raise ValueError(f"patch size must be positive, got {p}")
    for name, dim in (("height", h), ("width", w)):
        if dim % p != 0:
            raise ValueError(f"patch size {p} does not divide image {name} {dim}")
    channels = 1 if image.ndim == 2 else image.shape[2]
    work = image.reshape(h, w, channels)
    rows, cols = h // p, w // p
    tiles = work.reshape(rows, p, cols, p, channels).transpose(0, 2, 1, 3, 4)
    patches = np.ascontiguousarray(tiles).reshape(rows * cols, p * p * channels)
    return PatchSequence(
        patches=patches,
        grid=(rows, cols),
        patch_size=p,
        source_shape=tuple(image.shape),
    )


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Reassemble the original image array from a PatchSequence."""
    rows, cols = seq.grid
    p = seq.patch_size
    h, w = seq.source_shape[:2]
    channels = 1 if len(seq.source_shape) == 2 else seq.source_shape[2]
    if (rows * cols, p * p * channels) != seq.patches.shape or (rows * p, cols * p) != (h, w):
        raise ValueError(
            f"inconsistent patch metadata: patches {seq.patches.shape}, "
            f"grid {seq.grid}, patch_size {p}, source_shape {seq.source_shape}"
        )
    tiles = seq.patches.reshape(rows, cols, p, p, channels).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles).reshape(seq.source_shape)


@dataclass(frozen=True)
class BlurSpec:
    probability: float = 0.0
    sigma_range: tuple[float, float] = (0.3, 1.2)


@dataclass(frozen=True)
class MixupSpec:
    probability: float = 0.0
    alpha: float = 0.4


@dataclass(frozen=True)
class FlipSpec:
    probability: float = 0.0


@dataclass(frozen=True)
class AugmentPolicy:
    """Random Gaussian blur, random mixup, random horizontal flip.

    Applied in the order flip -> blur -> mixup. Every draw comes from a
    generator seeded by (seed, sample_key), so one (policy, key) pair always
    produces the same view.
    """

    gaussian_blur: BlurSpec = field(default_factory=BlurSpec)
    mixup: MixupSpec = field(default_factory=MixupSpec)
    horizontal_flip: FlipSpec = field(default_factory=FlipSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        for name, prob in (
            ("gaussian_blur", self.gaussian_blur.probability),
            ("mixup", self.mixup.probability),
            ("horizontal_flip", self.horizontal_flip.probability),
        ):
            if not 0.0 <= prob <= 1.0:
                raise ValueError(f"{name} probability {prob} outside [0, 1]")
        lo, hi = self.gaussian_blur.sigma_range
        if lo <= 0 or hi <= 0 or hi < lo:
            raise ValueError(f"sigma_range {self.gaussian_blur.sigma_range} must be positive and ordered")
        if self.mixup.alpha <= 0:
            raise ValueError(f"mixup alpha must be positive, got {self.mixup.alpha}")


def mixup_blend(anchor: np.ndarray, partner: np.ndarray, coeff: float) -> np.ndarray:
    """coeff * anchor + (1 - coeff) * partner; the result keeps the anchor's identity."""
    if anchor.shape != partner.shape:
        raise ValueError(f"mixup shape mismatch: {anchor.shape} vs {partner.shape}")
    return coeff * anchor + (1.0 - coeff) * partner


def augment(
    image: np.ndarray,
    policy: AugmentPolicy,
    partner: np.ndarray | None = None,
    sample_key: object = 0,
) -> np.ndarray:
    """One stochastic view of ``image``, deterministic given (policy.seed, sample_key)."""
    rng = rng_for(policy.seed, "augment", sample_key)
    out = np.asarray(image, dtype=np.float64)
    if rng.random() < policy.horizontal_flip.probability:
        out = out[:, ::-1].copy() if out.ndim == 2 else out[:, ::-1, :].copy()
    if rng.random() < policy.gaussian_blur.probability:
        sigma = rng.uniform(*policy.gaussian_blur.sigma_range)
        sigmas = (sigma, sigma) if out.ndim == 2 else (sigma, sigma, 0.0)
        out = gaussian_filter(out, sigmas, mode="reflect")
    if rng.random() < policy.mixup.probability:
        if partner is None:
            raise ValueError("mixup fired but no partner image was supplied")
        coeff = rng.beta(policy.mixup.alpha, policy.mixup.alpha)
        out = mixup_blend(out, np.asarray(partner, dtype=np.float64), coeff)
    return np.clip(out, 0.0, 1.0)
