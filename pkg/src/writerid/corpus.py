"""Synthetic multi-writer handwriting-like corpus.

Pages are rows of pseudo-glyphs drawn from a per-writer stroke atlas, so
each writer has a consistent visual texture (stroke thickness, slant, glyph
density, glyph shapes) without rendering real text. Defects (scratch, stain,
fold, crease-shadow) are composited with pixel-exact masks, and forgeries
re-render a page in a jittered copy of another writer's style while keeping
the claimed label.

The manifest is line-delimited JSON: one header record with corpus-level
metadata (seed, image size, writer styles, provenance) followed by one
record per sample. Image paths are stored relative to the manifest's
directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ManifestError
from .imaging import load_image, save_image
from .seeding import derive_seed, rng_for

INK_TONE = 0.5
DEFECT_KINDS = ("scratch", "stain", "fold", "crease-shadow")
SPLITS = ("pretrain", "calibrate", "test")

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class WriterStyle:
    writer_id: int
    stroke_thickness: float  # pixels
    slant: float  # radians
    glyph_density: float  # (0, 1]
    texture_seed: int
    ink_tone: float = INK_TONE  # pen pressure: ink darkness in [0, 1]


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    area_ratio: float
    seed: int

    def __post_init__(self) -> None:
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {self.kind!r}, expected one of {DEFECT_KINDS}")
        if not 0.0 <= self.area_ratio <= 1.0:
            raise ValueError(f"defect area_ratio {self.area_ratio} outside [0, 1]")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    writer_id: int
    split: str
    image_path: str
    defect: DefectSpec | None = None
    forged: bool = False
    true_writer_id: int | None = None


@dataclass(frozen=True)
class CorpusManifest:
    corpus_seed: int
    num_writers: int
    image_size: tuple[int, int]
    patch_size: int
    styles: tuple[WriterStyle, ...]
    samples: tuple[SampleRecord, ...]
    provenance: tuple[str, ...]
    root: Path

    def split(self, name: str) -> tuple[SampleRecord, ...]:
        return tuple(s for s in self.samples if s.split == name)

    def style_for(self, writer_id: int) -> WriterStyle:
        for style in self.styles:
            if style.writer_id == writer_id:
                return style
        raise KeyError(f"no style for writer {writer_id}")

    def image_abspath(self, record: SampleRecord) -> Path:
        return self.root / record.image_path

    def load_sample(self, record: SampleRecord) -> np.ndarray:
        return load_image(self.image_abspath(record))


# ---------------------------------------------------------------------------
# writer styles and glyph rendering
# ---------------------------------------------------------------------------

_THICKNESS_RANGE = (0.9, 2.4)
_SLANT_RANGE = (-0.35, 0.35)
_TONE_RANGE = (0.35, 0.62)
# lower densities make pages blotchy at defect spatial scales, which poisons
# the spectral defect detector; keep the style axis in a uniform-texture band
_DENSITY_RANGE = (0.55, 0.95)


def make_writer_styles(num_writers: int, seed: int) -> tuple[WriterStyle, ...]:
    """Spread style parameters over their ranges so writers are well separated.

    Each parameter gets its own shuffled even grid plus a small jitter
    (bounded below half the grid spacing), which guarantees distinct
    (thickness, slant, density) triples for distinct writers.
    """
    rng = rng_for(seed, "styles")

    def spread(lo: float, hi: float) -> np.ndarray:
        if num_writers == 1:
            base = np.array([(lo + hi) / 2.0])
        else:
            base = np.linspace(lo, hi, num_writers)
        step = (hi - lo) / max(num_writers - 1, 1)
        jitter = rng.uniform(-0.2, 0.2, size=num_writers) * step
        values = base + jitter
        rng.shuffle(values)
        return values

    thickness = spread(*_THICKNESS_RANGE)
    slant = spread(*_SLANT_RANGE)
    density = spread(*_DENSITY_RANGE)
    tone = spread(*_TONE_RANGE)
    return tuple(
        WriterStyle(
            writer_id=i,
            stroke_thickness=float(thickness[i]),
            slant=float(slant[i]),
            glyph_density=float(np.clip(density[i], 0.05, 1.0)),
            texture_seed=derive_seed(seed, "atlas", i),
            ink_tone=float(np.clip(tone[i], 0.1, 0.9)),
        )
        for i in range(num_writers)
    )


def _render_glyph(style: WriterStyle, glyph_index: int, glyph_size: int) -> np.ndarray:
    """One pseudo-glyph as an ink-coverage bitmap in [0, 1]."""
    rng = rng_for(style.texture_seed, "glyph", glyph_index)
    shear = math.tan(style.slant)
    pad = int(math.ceil(abs(shear) * glyph_size))
    gh, gw = glyph_size, glyph_size + pad
    span = glyph_size - 3.0
    points = []
    for _ in range(3):
        # endpoints pinned to opposite thirds of the box so every stroke spans
        # the glyph; keeps ink mass consistent across the atlas
        start = np.array([1.0 + rng.uniform(0, span / 3), 1.0 + rng.uniform(0, span)])
        end = np.array([1.0 + span - rng.uniform(0, span / 3), 1.0 + rng.uniform(0, span)])
        if rng.random() < 0.5:
            start, end = start[::-1], end[::-1]
        mid = (start + end) / 2 + rng.uniform(-span / 2, span / 2, size=2)
        ctrl = np.stack([start, np.clip(mid, 1.0, glyph_size - 2.0), end])
        t = np.linspace(0.0, 1.0, 4 * glyph_size)[:, None]
        bez = ((1 - t) ** 2) * ctrl[0] + 2 * t * (1 - t) * ctrl[1] + (t**2) * ctrl[2]
        points.append(bez)
    pts = np.concatenate(points, axis=0)
    # slant is a horizontal shear about the glyph's vertical midline
    cy = glyph_size / 2.0
    sheared_x = pts[:, 1] + shear * (cy - pts[:, 0]) + (pad / 2.0)
    ys, xs = np.mgrid[0:gh, 0:gw]
    pix = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    d2 = (pix[:, None, 0] - pts[None, :, 0]) ** 2 + (pix[:, None, 1] - sheared_x[None, :]) ** 2
    dist = np.sqrt(d2.min(axis=1)).reshape(gh, gw)
    radius = style.stroke_thickness / 2.0
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _glyph_atlas(style: WriterStyle, glyph_size: int, n_glyphs: int = 16) -> list[np.ndarray]:
    glyphs = [_render_glyph(style, i, glyph_size) for i in range(n_glyphs)]
    # equalize ink mass across the atlas so glyph choice does not modulate
    # page density at defect spatial scales; scaling down to the minimum mass
    # keeps every pixel in [0, 1] without clipping
    masses = np.array([g.sum() for g in glyphs])
    target = masses[masses > 0].min() if (masses > 0).any() else 0.0
    return [g * (target / m) if m > 0 else g for g, m in zip(glyphs, masses)]


_ATLAS_CACHE: dict[tuple, list[np.ndarray]] = {}


def _cached_atlas(style: WriterStyle, glyph_size: int) -> list[np.ndarray]:
    key = (style.texture_seed, round(style.stroke_thickness, 9), round(style.slant, 9), glyph_size)
    if key not in _ATLAS_CACHE:
        _ATLAS_CACHE[key] = _glyph_atlas(style, glyph_size)
    return _ATLAS_CACHE[key]


def render_page(style: WriterStyle, image_size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """A white page covered with rows of the writer's pseudo-glyphs.

    Glyphs sit on a fixed slot grid (skipped slots advance a full slot), so
    the page's ink density is spatially uniform at defect scales; writer
    identity lives in stroke-scale statistics, not in page layout.
    """
    h, w = image_size
    glyph_size = max(7, round(h / 12))
    atlas = _cached_atlas(style, glyph_size)
    gh, gw = atlas[0].shape
    margin = 2
    line_gap = max(2, glyph_size // 3)
    slot = gw + 2
    ink = np.zeros((h, w), dtype=np.float64)
    n_lines = max(1, (h - 2 * margin + line_gap) // (gh + line_gap))
    line_ys = np.round(np.linspace(margin, h - margin - gh, n_lines)).astype(int)
    n_slots = max(1, (w - 2 * margin) // slot)
    left = (w - (n_slots - 1) * slot - gw) // 2
    # error-diffusion fill: glyph_density of the slots carry a glyph, at
    # near-uniform spacing; one accumulator across the whole page keeps the
    # fill fraction even between lines (no density tilts at defect scales)
    accumulator = rng.uniform(0.0, 1.0)
    for y in line_ys:
        for col in range(n_slots):
            x = left + col * slot
            accumulator += style.glyph_density
            if accumulator < 1.0:
                continue
            accumulator -= 1.0
            glyph = atlas[int(rng.integers(len(atlas)))]
            dy = int(rng.integers(-1, 2))
            ys = min(max(y + dy, 0), h - gh)
            pressure = rng.uniform(0.92, 1.0)
            region = ink[ys : ys + gh, x : x + gw]
            np.maximum(region, glyph * pressure, out=region)
    return 1.0 - ink * (1.0 - style.ink_tone)


# ---------------------------------------------------------------------------
# defects
# ---------------------------------------------------------------------------


def _smooth_noise(shape: tuple[int, int], sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean unit-std smoothed Gaussian field."""
    field = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    std = field.std()
    if std == 0.0:
        return field
    return (field - field.mean()) / std


def _band_noise(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Unit-std band-passed noise (~3-6 px features): realistic mottled texture.

    The fine scale matters: removing it from a page barely moves the page's
    smoothed field, so the defect detector's decisions are stable under
    re-application of the filter."""
    white = rng.standard_normal(shape)
    field = gaussian_filter(white, 0.8, mode="reflect") - gaussian_filter(white, 2.0, mode="reflect")
    std = field.std()
    if std == 0.0:
        return field
    return field / std


def _segment_distance(shape: tuple[int, int], segments: np.ndarray) -> np.ndarray:
    """Per-pixel distance to the nearest of a set of line segments.

    segments: (n, 2, 2) array of (start, end) points in (y, x) coordinates.
    """
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    best = np.full(pix.shape[0], np.inf)
    for start, end in segments:
        diff = end - start
        denom = float(diff @ diff)
        rel = pix - start
        t = np.clip((rel @ diff) / denom, 0.0, 1.0) if denom > 0 else np.zeros(pix.shape[0])
        proj = start + t[:, None] * diff
        d = np.sqrt(((pix - proj) ** 2).sum(axis=1))
        np.minimum(best, d, out=best)
    return best.reshape(shape)


def _defect_score_and_tone(
    image: np.ndarray, spec: DefectSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Score field (higher = more defect-like) and replacement values."""
    shape = image.shape
    h, w = shape
    diag = math.hypot(h, w)
    if spec.kind == "stain":
        # speckled clusters: a broad envelope (detectable after smoothing)
        # filled with small dark blobs (error energy stays block-local)
        n_clusters = int(rng.integers(2, 5))
        envelope = np.zeros(shape)
        ys, xs = np.mgrid[0:h, 0:w]
        for _ in range(n_clusters):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sy = rng.uniform(0.08, 0.16) * h
            sx = rng.uniform(0.08, 0.16) * w
            envelope += np.exp(-(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2) / 2.0)
        envelope /= max(envelope.max(), 1e-12)
        # saturated envelope confines the stain to its clusters while the
        # additive speckle caps local ink coverage near 50% even at cluster
        # cores, so most of the stain's error energy stays block-local (AC)
        plateau = np.minimum(envelope / 0.45, 1.0)
        speckle = _smooth_noise(shape, 2.2, rng)
        score = plateau + 0.65 * speckle + 0.1 * _smooth_noise(shape, 4.0, rng)
        base = rng.uniform(0.05, 0.16)
        tone = base + 0.1 * _smooth_noise(shape, 3.0, rng) + 0.5 * _band_noise(shape, rng)
        value = 0.05 * image + 0.95 * np.clip(tone, 0.0, 0.9)
    elif spec.kind == "scratch":
        n_seg = int(rng.integers(3, 9))
        segs = np.empty((n_seg, 2, 2))
        for i in range(n_seg):
            start = np.array([rng.uniform(0, h), rng.uniform(0, w)])
            angle = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(0.3, 0.9) * diag
            segs[i] = (start, start + length * np.array([math.sin(angle), math.cos(angle)]))
        dist = _segment_distance(shape, segs)
        score = -dist + 1.5 * _smooth_noise(shape, 1.5, rng)
        tone = rng.uniform(0.15, 0.3) + 0.2 * _smooth_noise(shape, 1.0, rng)
        value = 0.2 * image + 0.8 * np.clip(tone, 0.0, 0.8)
    elif spec.kind == "fold":
        start = np.array([rng.uniform(0, h), 0.0])
        end = np.array([rng.uniform(0, h), float(w - 1)])
        if rng.random() < 0.5:
            start, end = np.array([0.0, rng.uniform(0, w)]), np.array([float(h - 1), rng.uniform(0, w)])
        dist = _segment_distance(shape, np.array([(start, end)]))
        score = -dist + 0.8 * _smooth_noise(shape, 3.0, rng)
        shade = 0.35 + 0.5 * np.clip(dist / max(0.08 * diag, 1.0), 0.0, 1.0)
        shade = shade + 0.22 * _band_noise(shape, rng)
        value = image * np.clip(shade, 0.05, 1.0) - 0.05
    else:  # crease-shadow
        start = np.array([rng.uniform(0, h), rng.uniform(0, w)])
        angle = rng.uniform(0, 2 * math.pi)
        end = start + diag * np.array([math.sin(angle), math.cos(angle)])
        dist = _segment_distance(shape, np.array([(start - (end - start), end)]))
        score = -dist + 1.2 * _smooth_noise(shape, 5.0, rng)
        shade = 0.5 + 0.25 * _smooth_noise(shape, 6.0, rng) + 0.22 * _band_noise(shape, rng)
        value = image * np.clip(shade, 0.2, 1.0)
    return score, np.clip(value, 0.0, 1.0)


def render_defect_mask(spec: DefectSpec, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boolean defect mask with exactly round(area_ratio*H*W) pixels, plus values."""
    h, w = image.shape
    target = int(round(spec.area_ratio * h * w))
    mask = np.zeros((h, w), dtype=bool)
    if target == 0:
        return mask, image.copy()
    rng = rng_for(spec.seed, "defect", spec.kind)
    score, value = _defect_score_and_tone(image, spec, rng)
    order = np.argsort(-score.ravel(), kind="stable")
    mask.ravel()[order[:target]] = True
    return mask, value


def inject_defects(image: np.ndarray, spec: DefectSpec) -> np.ndarray:
    """Composite a defect onto a page; pixels outside the mask are untouched.

    Every masked pixel is guaranteed to change (nudged by one 1/1024 step if
    the composite happens to coincide with the original), so the modified
    pixel set equals the rendered mask exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale page, got shape {image.shape}")
    if not 0.0 <= spec.area_ratio <= 1.0:
        raise ValueError(f"defect area_ratio {spec.area_ratio} outside [0, 1]")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("input image values must lie in [0, 1]")
    mask, value = render_defect_mask(spec, image)
    out = image.copy()
    out[mask] = value[mask]
    stuck = mask & (out == image)
    nudge = np.where(image >= 0.5, -1.0 / 1024.0, 1.0 / 1024.0)
    out[stuck] = image[stuck] + nudge[stuck]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


def _render_sample(
    style: WriterStyle,
    image_size: tuple[int, int],
    corpus_seed: int,
    sample_id: str,
    defect: DefectSpec | None,
) -> np.ndarray:
    page = render_page(style, image_size, rng_for(corpus_seed, "render", sample_id))
    if defect is not None:
        page = inject_defects(page, defect)
    return page


def generate_corpus(
    num_writers: int,
    samples_per_writer: int,
    image_size: tuple[int, int],
    seed: int,
    out_dir: str | Path,
    patch_size: int = 16,
    defect_fraction: float = 0.9,
    defect_area_range: tuple[float, float] = (0.05, 0.15),
    calibrate_per_writer: int = 5,
    test_per_writer: int = 4,
) -> CorpusManifest:
    """Render a synthetic corpus to disk and return its manifest.

    Deterministic given ``seed``: every per-sample random stream is derived
    as hash(seed, purpose, sample_id), so samples could be rendered in any
    order (or in parallel) with identical output.
    """
    if num_writers < 1:
        raise ValueError(f"num_writers must be >= 1, got {num_writers}")
    h, w = image_size
    for name, dim in (("height", h), ("width", w)):
        if dim % patch_size != 0:
            raise ConfigError(f"image {name} {dim} is not divisible by patch size {patch_size}")
    if samples_per_writer < calibrate_per_writer + test_per_writer:
        raise ValueError(
            f"samples_per_writer={samples_per_writer} cannot cover "
            f"calibrate={calibrate_per_writer} plus test={test_per_writer}"
        )
    if not 0.0 <= defect_fraction <= 1.0:
        raise ValueError(f"defect_fraction {defect_fraction} outside [0, 1]")

    out_dir = Path(out_dir)
    styles = make_writer_styles(num_writers, seed)
    defect_rng = rng_for(seed, "defect-assignment")
    records: list[SampleRecord] = []
    for writer in range(num_writers):
        split_rng = rng_for(seed, "split", writer)
        order = split_rng.permutation(samples_per_writer)
        split_of = {}
        for pos, idx in enumerate(order):
            if pos < calibrate_per_writer:
                split_of[idx] = "calibrate"
            elif pos < calibrate_per_writer + test_per_writer:
                split_of[idx] = "test"
            else:
                split_of[idx] = "pretrain"
        for idx in range(samples_per_writer):
            sample_id = f"w{writer:03d}_s{idx:03d}"
            defect = None
            # one rng draw sequence over all samples, in a fixed order
            wants_defect = defect_rng.random() < defect_fraction
            kind = str(defect_rng.choice(DEFECT_KINDS))
            area = float(defect_rng.uniform(*defect_area_range))
            if wants_defect:
                defect = DefectSpec(kind=kind, area_ratio=area, seed=derive_seed(seed, "defect", sample_id))
            records.append(
                SampleRecord(
                    sample_id=sample_id,
                    writer_id=writer,
                    split=split_of[idx],
                    image_path=f"images/{sample_id}.png",
                    defect=defect,
                )
            )

    for record in records:
        page = _render_sample(
            styles[record.writer_id], (h, w), seed, record.sample_id, record.defect
        )
        save_image(page, out_dir / record.image_path)

    manifest = CorpusManifest(
        corpus_seed=seed,
        num_writers=num_writers,
        image_size=(h, w),
        patch_size=patch_size,
        styles=styles,
        samples=tuple(records),
        provenance=(
            f"generate_corpus num_writers={num_writers} samples_per_writer={samples_per_writer} "
            f"image_size={h}x{w} seed={seed}",
        ),
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# forgeries
# ---------------------------------------------------------------------------


def _jittered_style(style: WriterStyle, rng: np.random.Generator) -> WriterStyle:
    """A near-miss copy of a donor style: each parameter scaled by +-10%."""
    return replace(
        style,
        stroke_thickness=style.stroke_thickness * rng.uniform(0.9, 1.1),
        slant=style.slant * rng.uniform(0.9, 1.1),
        glyph_density=float(np.clip(style.glyph_density * rng.uniform(0.9, 1.1), 0.05, 1.0)),
        ink_tone=float(np.clip(style.ink_tone * rng.uniform(0.9, 1.1), 0.1, 0.9)),
    )


def render_forged_image(
    manifest: CorpusManifest, record: SampleRecord, donor_id: int, seed: int
) -> np.ndarray:
    """Re-render a sample in a jittered copy of another writer's style."""
    rng = rng_for(seed, "forge-style", record.sample_id)
    style = _jittered_style(manifest.style_for(donor_id), rng)
    page = render_page(style, manifest.image_size, rng_for(seed, "forge-render", record.sample_id))
    if record.defect is not None:
        page = inject_defects(page, record.defect)
    return page


def plan_forgeries(
    manifest: CorpusManifest, ratio: float, seed: int
) -> list[tuple[SampleRecord, int]]:
    """Choose (record, donor_writer) pairs among unforged test samples.

    The count is floor(ratio * number of currently unforged test samples),
    so repeated application composes without ever double-forging a sample.
    """
    if not 0.0 <= ratio <= 0.5:
        raise ValueError(f"forgery ratio {ratio} outside [0, 0.5]")
    pool = [s for s in manifest.split("test") if not s.forged]
    pool.sort(key=lambda s: s.sample_id)
    count = int(math.floor(ratio * len(pool)))
    if count == 0 or manifest.num_writers < 2:
        return []
    rng = rng_for(seed, "forgery-plan")
    chosen = rng.choice(len(pool), size=count, replace=False)
    plans = []
    for idx in sorted(int(i) for i in chosen):
        record = pool[idx]
        donors = [wid for wid in range(manifest.num_writers) if wid != record.writer_id]
        plans.append((record, int(rng.choice(donors))))
    return plans


def inject_forgeries(manifest: CorpusManifest, ratio: float, seed: int) -> CorpusManifest:
    """Forge a fraction of the test split on disk; returns the new manifest."""
    plans = plan_forgeries(manifest, ratio, seed)
    planned = {record.sample_id: donor for record, donor in plans}
    new_records = []
    for record in manifest.samples:
        if record.sample_id not in planned:
            new_records.append(record)
            continue
        donor = planned[record.sample_id]
        page = render_forged_image(manifest, record, donor, seed)
        new_path = f"forged/{record.sample_id}.png"
        save_image(page, manifest.root / new_path)
        new_records.append(
            replace(record, forged=True, true_writer_id=donor, image_path=new_path)
        )
    new_manifest = replace(
        manifest,
        samples=tuple(new_records),
        provenance=manifest.provenance
        + (f"inject_forgeries ratio={ratio} seed={seed} forged={len(plans)}",),
    )
    save_manifest(new_manifest, manifest.root / "manifest.jsonl")
    return new_manifest


# ---------------------------------------------------------------------------
# manifest I/O and validation
# ---------------------------------------------------------------------------


def _style_to_dict(style: WriterStyle) -> dict:
    return {
        "writer_id": style.writer_id,
        "stroke_thickness": style.stroke_thickness,
        "slant": style.slant,
        "glyph_density": style.glyph_density,
        "texture_seed": style.texture_seed,
        "ink_tone": style.ink_tone,
    }


def _sample_to_dict(record: SampleRecord) -> dict:
    defect = None
    if record.defect is not None:
        defect = {
            "kind": record.defect.kind,
            "area_ratio": record.defect.area_ratio,
            "seed": record.defect.seed,
        }
    return {
        "record": "sample",
        "sample_id": record.sample_id,
        "writer_id": record.writer_id,
        "split": record.split,
        "image_path": record.image_path,
        "defect": defect,
        "forged": record.forged,
        "true_writer_id": record.true_writer_id,
    }


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "record": "header",
        "format_version": MANIFEST_VERSION,
        "corpus_seed": manifest.corpus_seed,
        "num_writers": manifest.num_writers,
        "image_size": list(manifest.image_size),
        "patch_size": manifest.patch_size,
        "provenance": list(manifest.provenance),
        "styles": [_style_to_dict(s) for s in manifest.styles],
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(_sample_to_dict(s), sort_keys=True) for s in manifest.samples)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def validate_manifest(manifest: CorpusManifest, check_files: bool = True) -> None:
    """Raise ManifestError on any invariant violation, naming the offender."""
    seen: set[str] = set()
    for record in manifest.samples:
        if record.sample_id in seen:
            raise ManifestError(f"duplicate sample_id {record.sample_id!r}")
        seen.add(record.sample_id)
        if record.split not in SPLITS:
            raise ManifestError(f"sample {record.sample_id!r}: unknown split {record.split!r}")
        if not 0 <= record.writer_id < manifest.num_writers:
            raise ManifestError(
                f"sample {record.sample_id!r}: writer_id {record.writer_id} outside corpus"
            )
        if record.forged and record.true_writer_id is None:
            raise ManifestError(f"sample {record.sample_id!r}: forged but no true_writer_id")
        if check_files and not manifest.image_abspath(record).is_file():
            raise ManifestError(
                f"sample {record.sample_id!r}: missing image file {record.image_path}"
            )
    counts = {w: 0 for w in range(manifest.num_writers)}
    for record in manifest.split("calibrate"):
        counts[record.writer_id] += 1
    if counts:
        per_writer = set(counts.values())
        if min(per_writer) < 1 or len(per_writer) > 1:
            detail = ", ".join(f"writer {w}: {n}" for w, n in sorted(counts.items()))
            raise ManifestError(f"calibrate split is unbalanced ({detail})")


def load_manifest(path: str | Path, check_files: bool = True) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: unparseable header line: {exc}") from exc
    if header.get("record") != "header":
        raise ManifestError(f"{path}: first line is not a header record")
    styles = tuple(
        WriterStyle(
            writer_id=int(s["writer_id"]),
            stroke_thickness=float(s["stroke_thickness"]),
            slant=float(s["slant"]),
            glyph_density=float(s["glyph_density"]),
            texture_seed=int(s["texture_seed"]),
            ink_tone=float(s.get("ink_tone", INK_TONE)),
        )
        for s in header["styles"]
    )
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: unparseable record: {exc}") from exc
        if raw.get("record") != "sample":
            raise ManifestError(f"{path}:{lineno}: expected a sample record")
        defect = None
        if raw.get("defect") is not None:
            d = raw["defect"]
            defect = DefectSpec(kind=d["kind"], area_ratio=float(d["area_ratio"]), seed=int(d["seed"]))
        samples.append(
            SampleRecord(
                sample_id=str(raw["sample_id"]),
                writer_id=int(raw["writer_id"]),
                split=str(raw["split"]),
                image_path=str(raw["image_path"]),
                defect=defect,
                forged=bool(raw.get("forged", False)),
                true_writer_id=(None if raw.get("true_writer_id") is None else int(raw["true_writer_id"])),
            )
        )
    manifest = CorpusManifest(
        corpus_seed=int(header["corpus_seed"]),
        num_writers=int(header["num_writers"]),
        image_size=tuple(int(v) for v in header["image_size"]),
        patch_size=int(header["patch_size"]),
        styles=styles,
        samples=tuple(samples),
        provenance=tuple(str(p) for p in header.get("provenance", ())),
        root=path.parent,
    )
    validate_manifest(manifest, check_files=check_files)
    return manifest


def style_separation_stats(manifest: CorpusManifest, max_per_writer: int = 6) -> tuple[float, float]:
    """Mean inter-writer vs intra-writer pixel L2 distance on loaded pages."""
    by_writer: dict[int, list[np.ndarray]] = {}
    for record in manifest.samples:
        bucket = by_writer.setdefault(record.writer_id, [])
        if len(bucket) < max_per_writer and not record.forged:
            bucket.append(manifest.load_sample(record).ravel())
    intra, inter = [], []
    writers = sorted(by_writer)
    for wi in writers:
        imgs = by_writer[wi]
        for a in range(len(imgs)):
            for b in range(a + 1, len(imgs)):
                intra.append(float(np.linalg.norm(imgs[a] - imgs[b])))
        for wj in writers:
            if wj <= wi:
                continue
            for a in by_writer[wi]:
                for b in by_writer[wj]:
                    inter.append(float(np.linalg.norm(a - b)))
    return float(np.mean(inter)), float(np.mean(intra))
