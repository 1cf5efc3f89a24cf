"""Few-shot writer calibration and robustness evaluation.

Calibration fine-tunes the pre-trained encoder trunk plus a zero-initialized
linear head with cross-entropy on a seeded, balanced subset of the calibrate
split. At prediction time the same patch-reweighting machinery as training
runs for a small fixed number of rounds, driven by the gradient of the
classifier's predictive entropy (test images have no contrastive pair, so
entropy is the label-free stand-in for the loss signal).

Evaluation scores every test sample against its claimed writer label, so a
successful forgery counts as an error, and supports "supplemented" defect
and forgery conditions layered on top of the stored corpus.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import matching, prefilter
from .contrastive import TrainState
from .corpus import (
    DEFECT_KINDS,
    CorpusManifest,
    DefectSpec,
    inject_defects,
    plan_forgeries,
    render_forged_image,
)
from .encoder import PatchTokenEncoder
from .errors import WriteridError
from .patches import patchify
from .seeding import derive_seed, rng_for


@dataclass
class ClassifierState:
    encoder: PatchTokenEncoder
    head: nn.Linear
    label_map: dict[int, int]  # writer_id -> class index
    patch_size: int

    @property
    def writers(self) -> list[int]:
        return sorted(self.label_map, key=self.label_map.get)

    @property
    def num_writers(self) -> int:
        return len(self.label_map)


@dataclass(frozen=True)
class EvalCondition:
    defect_ratio: float = 0.0
    forgery_ratio: float = 0.0


@dataclass(frozen=True)
class EvalReport:
    top1: float
    top5: float
    per_writer_accuracy: dict[int, float]
    confusion: np.ndarray  # (num_writers, num_writers) counts, rows = claimed
    condition: EvalCondition
    genuine_top1: float
    forged_top1: float
    num_samples: int


def _pooled_logits(classifier: ClassifierState, patch_tensor: torch.Tensor) -> torch.Tensor:
    tokens = classifier.encoder(patch_tensor)
    return classifier.head(tokens.mean(dim=-2))


def calibrate(
    state: TrainState,
    manifest: CorpusManifest,
    shots_per_writer: int,
    epochs: int,
    lr: float,
    seed: int,
    filter_cfg: prefilter.FilterConfig | None = None,
) -> ClassifierState:
    """Cross-entropy fine-tuning on exactly shots_per_writer samples per writer.

    The trunk is a deep copy of the checkpointed online encoder, so the
    training state passed in is never mutated. epochs=0 returns the head
    untrained and the encoder bit-identical to the checkpoint.
    """
    by_writer: dict[int, list] = {}
    for record in manifest.split("calibrate"):
        by_writer.setdefault(record.writer_id, []).append(record)
    if not by_writer:
        raise WriteridError("manifest has no calibrate samples")
    writers = sorted(by_writer)
    chosen = []
    for writer in writers:
        records = sorted(by_writer[writer], key=lambda r: r.sample_id)
        if len(records) < shots_per_writer:
            raise WriteridError(
                f"writer {writer} has only {len(records)} calibrate samples, "
                f"need {shots_per_writer}"
            )
        picks = rng_for(seed, "shots", writer).choice(
            len(records), size=shots_per_writer, replace=False
        )
        chosen.extend(records[int(i)] for i in sorted(picks))

    label_map = {writer: idx for idx, writer in enumerate(writers)}
    encoder = copy.deepcopy(state.encoder.online.encoder)
    head = nn.Linear(state.encoder.config.embed_dim, len(writers)).double()
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    classifier = ClassifierState(
        encoder=encoder, head=head, label_map=label_map, patch_size=manifest.patch_size
    )
    if epochs == 0:
        return classifier

    images = []
    labels = []
    for record in chosen:
        img = manifest.load_sample(record)
        if filter_cfg is not None:
            img = prefilter.denoise(img, filter_cfg)
        images.append(patchify(img, manifest.patch_size).patches)
        labels.append(label_map[record.writer_id])
    x = torch.tensor(np.stack(images), dtype=torch.float64)
    y = torch.tensor(labels, dtype=torch.long)

    optimizer = torch.optim.Adam(
        list(encoder.parameters()) + list(head.parameters()), lr=lr
    )
    for _ in range(epochs):
        optimizer.zero_grad(set_to_none=True)
        loss = F.cross_entropy(_pooled_logits(classifier, x), y)
        loss.backward()
        optimizer.step()
    return classifier


def calibration_loss(classifier: ClassifierState, manifest: CorpusManifest, records) -> float:
    """Cross-entropy of the classifier on given (already loaded) records."""
    images = [patchify(manifest.load_sample(r), manifest.patch_size).patches for r in records]
    y = torch.tensor([classifier.label_map[r.writer_id] for r in records], dtype=torch.long)
    x = torch.tensor(np.stack(images), dtype=torch.float64)
    with torch.no_grad():
        return float(F.cross_entropy(_pooled_logits(classifier, x), y))


def predict(
    classifier: ClassifierState,
    image: np.ndarray,
    matching_cfg: matching.MatchingConfig,
    inference_rounds: int = 5,
) -> np.ndarray:
    """Score vector over writers for one (pre-filtered) page.

    Patch weights are computed by the training-stage boost/prune rounds, with
    the classifier's predictive-entropy gradient as the saliency signal and a
    small fixed round budget; no parameters are updated.
    """
    seq = patchify(image, classifier.patch_size)
    m = seq.num_patches
    raw = torch.tensor(seq.patches[None], dtype=torch.float64)
    inference_cfg = replace(matching_cfg, max_rounds=inference_rounds, interval=1)
    mstate = matching.MatchingState(weights=matching.init_weights(m))
    for _ in range(inference_rounds):
        if mstate.halted:
            break
        weights = torch.tensor(mstate.weights.w[None], dtype=torch.float64)
        u = raw * (m * weights).unsqueeze(-1)
        u.requires_grad_(True)
        logits = _pooled_logits(classifier, u)
        log_probs = F.log_softmax(logits, dim=-1)
        entropy = -(log_probs.exp() * log_probs).sum()
        entropy.backward()
        saliency = matching.patch_saliency(u.grad.detach().numpy())
        mstate = matching.step_round(mstate, saliency, inference_cfg)
    weights = torch.tensor(mstate.weights.w[None], dtype=torch.float64)
    with torch.no_grad():
        scores = _pooled_logits(classifier, raw * (m * weights).unsqueeze(-1))
    return scores.squeeze(0).numpy()


def _apply_condition(
    manifest: CorpusManifest,
    condition: EvalCondition,
    eval_seed: int,
) -> list[tuple[object, np.ndarray]]:
    """Test records with condition-injected images, loaded in sample order."""
    records = sorted(manifest.split("test"), key=lambda r: r.sample_id)
    forged_as: dict[str, int] = {}
    if condition.forgery_ratio > 0:
        plans = plan_forgeries(manifest, condition.forgery_ratio, derive_seed(eval_seed, "cond-forge"))
        forged_as = {record.sample_id: donor for record, donor in plans}
    out = []
    for record in records:
        if record.sample_id in forged_as:
            img = render_forged_image(
                manifest, record, forged_as[record.sample_id], derive_seed(eval_seed, "cond-forge")
            )
            record = replace(record, forged=True, true_writer_id=forged_as[record.sample_id])
        else:
            img = manifest.load_sample(record)
        if condition.defect_ratio > 0:
            rng = rng_for(eval_seed, "cond-defect", record.sample_id)
            spec = DefectSpec(
                kind=str(rng.choice(DEFECT_KINDS)),
                area_ratio=condition.defect_ratio,
                seed=derive_seed(eval_seed, "cond-defect", record.sample_id),
            )
            img = inject_defects(img, spec)
        out.append((record, img))
    return out


def evaluate(
    classifier: ClassifierState,
    manifest: CorpusManifest,
    condition: EvalCondition = EvalCondition(),
    eval_seed: int = 0,
    matching_cfg: matching.MatchingConfig | None = None,
    inference_rounds: int = 5,
    filter_cfg: prefilter.FilterConfig | None = None,
) -> EvalReport:
    """Top-1/top-5 over the test split under a defect/forgery condition.

    Forged samples keep their claimed writer label: the forgery succeeds
    (counts as an error) unless the claimed writer is still predicted.
    """
    if matching_cfg is None:
        matching_cfg = matching.MatchingConfig()
    samples = _apply_condition(manifest, condition, eval_seed)
    if not samples:
        raise WriteridError("manifest has no test samples")
    n = classifier.num_writers
    confusion = np.zeros((n, n), dtype=np.int64)
    hits1: list[bool] = []
    hits5: list[bool] = []
    genuine: list[bool] = []
    forged: list[bool] = []
    for record, img in samples:
        if filter_cfg is not None:
            img = prefilter.denoise(img, filter_cfg)
        scores = predict(classifier, img, matching_cfg, inference_rounds)
        if record.writer_id not in classifier.label_map:
            raise WriteridError(f"sample {record.sample_id}: writer {record.writer_id} unknown to classifier")
        claimed = classifier.label_map[record.writer_id]
        order = np.argsort(-scores, kind="stable")
        rank = int(np.where(order == claimed)[0][0])
        confusion[claimed, int(order[0])] += 1
        top1 = rank == 0
        hits1.append(top1)
        hits5.append(rank < 5)
        (forged if record.forged else genuine).append(top1)
    per_writer = {}
    for writer, idx in classifier.label_map.items():
        row = confusion[idx]
        total = int(row.sum())
        per_writer[writer] = float(row[idx] / total) if total else float("nan")
    return EvalReport(
        top1=float(np.mean(hits1)),
        top5=float(np.mean(hits5)),
        per_writer_accuracy=per_writer,
        confusion=confusion,
        condition=condition,
        genuine_top1=float(np.mean(genuine)) if genuine else float("nan"),
        forged_top1=float(np.mean(forged)) if forged else float("nan"),
        num_samples=len(samples),
    )


def sweep_conditions(defect_ratios, forgery_ratios) -> list[EvalCondition]:
    """Baseline plus one condition per requested ratio, mirroring the
    damaged/falsified table layout."""
    conditions = [EvalCondition()]
    conditions.extend(EvalCondition(defect_ratio=float(d)) for d in defect_ratios)
    conditions.extend(EvalCondition(forgery_ratio=float(f)) for f in forgery_ratios)
    return conditions


def robustness_sweep(
    classifier: ClassifierState,
    manifest: CorpusManifest,
    defect_ratios,
    forgery_ratios,
    seeds,
    matching_cfg: matching.MatchingConfig | None = None,
    inference_rounds: int = 5,
    filter_cfg: prefilter.FilterConfig | None = None,
) -> list[tuple[EvalCondition, int, EvalReport]]:
    """One EvalReport per (condition, seed)."""
    for ratios, limit, name in ((defect_ratios, 1.0, "defect"), (forgery_ratios, 0.5, "forgery")):
        for r in ratios:
            if not 0.0 <= r <= limit:
                raise ValueError(f"{name} ratio {r} outside [0, {limit}]")
    results = []
    for condition in sweep_conditions(defect_ratios, forgery_ratios):
        for seed in seeds:
            report = evaluate(
                classifier,
                manifest,
                condition,
                eval_seed=int(seed),
                matching_cfg=matching_cfg,
                inference_rounds=inference_rounds,
                filter_cfg=filter_cfg,
            )
            results.append((condition, int(seed), report))
    return results


def format_mean_std(values) -> str:
    """Percent accuracy as 'mean+-std' with the table's three decimals."""
    arr = np.asarray(list(values), dtype=np.float64) * 100.0
    std = arr.std(ddof=1) if arr.size > 1 else 0.0
    return f"{arr.mean():.3f}±{std:.3f}"
