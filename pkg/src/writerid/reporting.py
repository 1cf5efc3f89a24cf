"""Deterministic report emission for a finished run directory.

emit_report reads the artifacts a run leaves behind (metrics log, eval and
sweep tables, checkpoint weight vectors) and writes a fixed file set:
summary table, per-condition accuracy table, training-loss curve, and
patch-weight heatmaps. Re-running on the same directory reproduces every
output byte for byte (PNG metadata is pinned).
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import WriteridError

_PNG_METADATA = {"Software": "writerid"}


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _save_figure(fig, path: Path) -> None:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    _atomic_write_bytes(path, buffer.getvalue())


def _loss_curve(metrics_path: Path, out_path: Path) -> None:
    rows = metrics_path.read_text(encoding="utf-8").strip().splitlines()[1:]
    steps = [int(r.split(",")[0]) for r in rows]
    losses = [float(r.split(",")[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("contrastive loss")
    ax.set_title("pre-training loss")
    fig.tight_layout()
    _save_figure(fig, out_path)


def _weight_heatmaps(checkpoint_path: Path, grid: tuple[int, int], out_dir: Path, limit: int = 4) -> list[Path]:
    written = []
    with np.load(checkpoint_path, allow_pickle=False) as npz:
        sample_ids = sorted({n.split("/", 2)[1] for n in npz.files if n.startswith("match/")})
        for sid in sample_ids[:limit]:
            weights = npz[f"match/{sid}/w"].reshape(grid)
            csv_path = out_dir / f"heatmap_{sid}.csv"
            _atomic_write_text(
                csv_path,
                "\n".join(",".join(repr(v) for v in row) for row in weights) + "\n",
            )
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.imshow(weights, cmap="viridis")
            ax.set_title(f"patch weights {sid}")
            ax.set_xticks([])
            ax.set_yticks([])
            fig.tight_layout()
            png_path = out_dir / f"heatmap_{sid}.png"
            _save_figure(fig, png_path)
            written.extend([csv_path, png_path])
    return written


def _sweep_table(sweep_json: Path) -> str:
    data = json.loads(sweep_json.read_text(encoding="utf-8"))
    conditions = data["conditions"]
    base = next(c for c in conditions if c["defect_ratio"] == 0 and c["forgery_ratio"] == 0)
    defects = [c for c in conditions if c["defect_ratio"] > 0]
    forgeries = [c for c in conditions if c["forgery_ratio"] > 0]
    header = (
        ["Original"]
        + [f"D+{int(c['defect_ratio'] * 100)}%" for c in defects]
        + [f"F+{int(c['forgery_ratio'] * 100)}%" for c in forgeries]
    )
    values = [base["top1"]] + [c["top1"] for c in defects] + [c["top1"] for c in forgeries]
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    lines = [
        " | ".join(h.ljust(w) for h, w in zip(header, widths)),
        "-|-".join("-" * w for w in widths),
        " | ".join(v.ljust(w) for v, w in zip(values, widths)),
    ]
    return "\n".join(lines) + "\n"


def emit_report(run_dir: str | Path) -> list[Path]:
    """Write the report file set for a run directory; returns written paths."""
    run_dir = Path(run_dir)
    report_dir = run_dir / "report"
    metrics_path = run_dir / "metrics.csv"
    checkpoint_path = run_dir / "checkpoints" / "final.npz"
    eval_json = run_dir / "eval" / "report.json"
    sweep_json = run_dir / "sweep" / "summary.json"
    manifest_path = run_dir / "corpus" / "manifest.jsonl"

    required = [metrics_path, checkpoint_path, manifest_path]
    missing = [str(p) for p in required if not p.is_file()]
    if missing:
        raise WriteridError("missing run artifacts: " + ", ".join(missing))

    from .corpus import load_manifest

    manifest = load_manifest(manifest_path, check_files=False)
    grid = (
        manifest.image_size[0] // manifest.patch_size,
        manifest.image_size[1] // manifest.patch_size,
    )

    written: list[Path] = []
    loss_png = report_dir / "loss_curve.png"
    _loss_curve(metrics_path, loss_png)
    written.append(loss_png)
    written.extend(_weight_heatmaps(checkpoint_path, grid, report_dir))

    summary_lines = [f"run directory: {run_dir.name}", f"writers: {manifest.num_writers}"]
    if eval_json.is_file():
        data = json.loads(eval_json.read_text(encoding="utf-8"))
        summary_lines.append(
            f"baseline top1={data['top1']:.4f} top5={data['top5']:.4f} over {data['num_samples']} samples"
        )
    if sweep_json.is_file():
        table = _sweep_table(sweep_json)
        sweep_txt = report_dir / "sweep_table.txt"
        _atomic_write_text(sweep_txt, table)
        written.append(sweep_txt)
        summary_lines.append("sweep table: report/sweep_table.txt")
    summary_path = report_dir / "summary.txt"
    _atomic_write_text(summary_path, "\n".join(summary_lines) + "\n")
    written.append(summary_path)
    return written
