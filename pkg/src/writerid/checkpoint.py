"""Versioned checkpoint container: one named numeric array per parameter.

The file is a numpy .npz archive. Entry names are stable across versions:

- ``meta``: JSON string (format version, step, configs, queue bookkeeping)
- ``param/online/<name>`` and ``param/momentum/<name>``: model parameters
- ``optim/<name>/{exp_avg,exp_avg_sq,step}``: Adam state per online parameter
- ``queue``: FIFO negative queue contents
- ``match/<sample_id>/{w,active,meta}``: per-image matching state

Loading restores training bit-exactly: resuming reproduces the metrics of
an uninterrupted run.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import matching
from .contrastive import ContrastConfig, OptimizerConfig, TrainState, init_train_state
from .encoder import EncoderConfig

CHECKPOINT_VERSION = 1


def _atomic_savez(path: Path, arrays: dict[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    tmp.replace(path)


def _meta(state: TrainState, contrast_cfg: ContrastConfig) -> str:
    return json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "step": state.step,
            "queue_count": state.queue_count,
            "queue_ptr": state.queue_ptr,
            "encoder_config": asdict(state.encoder.config),
            "contrast_config": asdict(contrast_cfg),
        },
        sort_keys=True,
    )


def save_checkpoint(path: str | Path, state: TrainState, contrast_cfg: ContrastConfig) -> None:
    arrays: dict[str, np.ndarray] = {"meta": np.array(_meta(state, contrast_cfg))}
    for name, param in state.encoder.online.named_parameters():
        arrays[f"param/online/{name}"] = param.detach().numpy()
    for name, param in state.encoder.momentum.named_parameters():
        arrays[f"param/momentum/{name}"] = param.detach().numpy()
    for name, param in state.encoder.online.named_parameters():
        opt_state = state.optimizer.state.get(param)
        if opt_state:
            arrays[f"optim/{name}/exp_avg"] = opt_state["exp_avg"].numpy()
            arrays[f"optim/{name}/exp_avg_sq"] = opt_state["exp_avg_sq"].numpy()
            arrays[f"optim/{name}/step"] = opt_state["step"].numpy()
    arrays["queue"] = state.queue.numpy()
    for sid, mstate in state.store.items():
        arrays[f"match/{sid}/w"] = mstate.weights.w
        arrays[f"match/{sid}/active"] = mstate.weights.active
        arrays[f"match/{sid}/meta"] = np.array(
            [mstate.rounds, mstate.stable_rounds, int(mstate.halted)], dtype=np.int64
        )
    _atomic_savez(Path(path), arrays)


def load_checkpoint(path: str | Path) -> tuple[TrainState, ContrastConfig]:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        encoder_cfg = EncoderConfig(**meta["encoder_config"])
        raw_contrast = dict(meta["contrast_config"])
        raw_contrast["optimizer"] = OptimizerConfig(**raw_contrast["optimizer"])
        contrast_cfg = ContrastConfig(**raw_contrast)

        sample_ids = sorted(
            {name.split("/", 2)[1] for name in npz.files if name.startswith("match/")}
        )
        state = init_train_state(sample_ids, encoder_cfg, contrast_cfg)

        with torch.no_grad():
            for name, param in state.encoder.online.named_parameters():
                param.copy_(torch.from_numpy(npz[f"param/online/{name}"]))
            for name, param in state.encoder.momentum.named_parameters():
                param.copy_(torch.from_numpy(npz[f"param/momentum/{name}"]))
        for name, param in state.encoder.online.named_parameters():
            key = f"optim/{name}/exp_avg"
            if key in npz.files:
                state.optimizer.state[param] = {
                    "step": torch.from_numpy(npz[f"optim/{name}/step"]).clone(),
                    "exp_avg": torch.from_numpy(npz[key]).clone(),
                    "exp_avg_sq": torch.from_numpy(npz[f"optim/{name}/exp_avg_sq"]).clone(),
                }
        state.queue = torch.from_numpy(npz["queue"]).clone()
        state.queue_count = int(meta["queue_count"])
        state.queue_ptr = int(meta["queue_ptr"])
        for sid in sample_ids:
            rounds, stable, halted = (int(v) for v in npz[f"match/{sid}/meta"])
            state.store[sid] = matching.MatchingState(
                weights=matching.WeightVector(
                    w=npz[f"match/{sid}/w"].copy(), active=npz[f"match/{sid}/active"].copy()
                ),
                rounds=rounds,
                stable_rounds=stable,
                halted=bool(halted),
            )
        state.step = int(meta["step"])
        state.encoder.step = state.step
    return state, contrast_cfg


def save_classifier(path: str | Path, classifier, encoder_cfg: EncoderConfig) -> None:
    """Persist a calibrated classifier (encoder trunk + linear head + labels)."""
    meta = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "encoder_config": asdict(encoder_cfg),
            "label_map": {str(k): v for k, v in classifier.label_map.items()},
            "patch_size": classifier.patch_size,
        },
        sort_keys=True,
    )
    arrays: dict[str, np.ndarray] = {"meta": np.array(meta)}
    for name, param in classifier.encoder.named_parameters():
        arrays[f"encoder/{name}"] = param.detach().numpy()
    arrays["head/weight"] = classifier.head.weight.detach().numpy()
    arrays["head/bias"] = classifier.head.bias.detach().numpy()
    _atomic_savez(Path(path), arrays)


def load_classifier(path: str | Path):
    from torch import nn

    from .calibrate_eval import ClassifierState
    from .encoder import PatchTokenEncoder

    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(str(npz["meta"]))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported classifier version {meta['format_version']}")
        encoder_cfg = EncoderConfig(**meta["encoder_config"])
        label_map = {int(k): int(v) for k, v in meta["label_map"].items()}
        encoder = PatchTokenEncoder(encoder_cfg).double()
        head = nn.Linear(encoder_cfg.embed_dim, len(label_map)).double()
        with torch.no_grad():
            for name, param in encoder.named_parameters():
                param.copy_(torch.from_numpy(npz[f"encoder/{name}"]))
            head.weight.copy_(torch.from_numpy(npz["head/weight"]))
            head.bias.copy_(torch.from_numpy(npz["head/bias"]))
    return ClassifierState(
        encoder=encoder, head=head, label_map=label_map, patch_size=int(meta["patch_size"])
    )
