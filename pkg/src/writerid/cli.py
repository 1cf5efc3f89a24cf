"""Command-line front end tying the pipeline stages together.

Subcommands: generate-corpus, preprocess, pretrain, calibrate, evaluate,
sweep, report. Each reads the run configuration (--config TOML file plus
--set key=value overrides), executes one stage, and writes its outputs into
the run directory. The effective config is stored in the run directory so
every artifact is reproducible from the directory alone.

Exit codes: 0 success, 1 runtime error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import calibrate_eval, checkpoint, contrastive, corpus, prefilter, reporting
from .config import RunConfig, apply_overrides, config_to_toml, load_config
from .errors import ConfigError, WriteridError
from .seeding import derive_seed

STAGES = ("generate-corpus", "preprocess", "pretrain", "calibrate", "evaluate", "sweep", "report")


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _load_effective_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    config = apply_overrides(config, args.set or [])
    if args.run_dir:
        config = apply_overrides(config, [f"run_dir={json.dumps(args.run_dir)}"])
    return config


def _persist_config(config: RunConfig, run_dir: Path) -> None:
    _atomic_write_text(run_dir / "config.toml", config_to_toml(config))


def _corpus_manifest(run_dir: Path) -> corpus.CorpusManifest:
    return corpus.load_manifest(run_dir / "corpus" / "manifest.jsonl")


def cmd_generate_corpus(config: RunConfig, run_dir: Path) -> int:
    c = config.corpus
    manifest = corpus.generate_corpus(
        num_writers=c.num_writers,
        samples_per_writer=c.samples_per_writer,
        image_size=(c.image_height, c.image_width),
        seed=derive_seed(config.seed, "corpus"),
        out_dir=run_dir / "corpus",
        patch_size=config.patches.patch_size,
        defect_fraction=c.defect_fraction,
        defect_area_range=(c.defect_area_min, c.defect_area_max),
        calibrate_per_writer=c.calibrate_per_writer,
        test_per_writer=c.test_per_writer,
    )
    if c.forgery_ratio > 0:
        manifest = corpus.inject_forgeries(
            manifest, c.forgery_ratio, derive_seed(config.seed, "corpus-forgeries")
        )
    print(f"generated {len(manifest.samples)} samples for {manifest.num_writers} writers")
    return 0


def cmd_preprocess(config: RunConfig, run_dir: Path) -> int:
    manifest = _corpus_manifest(run_dir)
    filter_cfg = config.filter_config()
    out_root = run_dir / "denoised"
    from dataclasses import replace

    new_records = []
    for record in manifest.samples:
        page = manifest.load_sample(record)
        cleaned = prefilter.denoise(page, filter_cfg)
        corpus.save_image(cleaned, out_root / record.image_path)
        new_records.append(record)
    new_manifest = replace(
        manifest,
        samples=tuple(new_records),
        provenance=manifest.provenance + (f"preprocess lambda={filter_cfg.lambda_reg}",),
        root=out_root,
    )
    corpus.save_manifest(new_manifest, out_root / "manifest.jsonl")
    print(f"denoised {len(new_records)} pages into {out_root}")
    return 0


def cmd_pretrain(config: RunConfig, run_dir: Path, resume_from: str | None = None) -> int:
    manifest = corpus.load_manifest(run_dir / "denoised" / "manifest.jsonl")
    contrast_cfg = config.contrast_config()
    state = None
    if resume_from:
        state, contrast_cfg = checkpoint.load_checkpoint(resume_from)
    state, metrics = contrastive.pretrain(
        manifest,
        config.encoder_config(),
        contrast_cfg,
        config.matching_config(),
        config.augment_policy(),
        seed=derive_seed(config.seed, "pretrain"),
        state=state,
    )
    checkpoint.save_checkpoint(run_dir / "checkpoints" / "final.npz", state, contrast_cfg)
    contrastive.write_metrics(metrics, run_dir / "metrics.csv", run_dir / "timings.csv")
    final_loss = metrics[-1].loss if metrics else float("nan")
    print(f"pretrained to step {state.step}, final loss {final_loss:.4f}")
    return 0


def cmd_calibrate(config: RunConfig, run_dir: Path) -> int:
    manifest = _corpus_manifest(run_dir)
    state, _ = checkpoint.load_checkpoint(run_dir / "checkpoints" / "final.npz")
    filter_cfg = config.filter_config() if config.evaluation.use_prefilter else None
    classifier = calibrate_eval.calibrate(
        state,
        manifest,
        shots_per_writer=config.calibration.shots_per_writer,
        epochs=config.calibration.epochs,
        lr=config.calibration.learning_rate,
        seed=derive_seed(config.seed, "calibrate"),
        filter_cfg=filter_cfg,
    )
    checkpoint.save_classifier(run_dir / "classifier.npz", classifier, state.encoder.config)
    print(f"calibrated {classifier.num_writers}-writer classifier")
    return 0


def _report_to_dict(report: calibrate_eval.EvalReport) -> dict:
    return {
        "top1": report.top1,
        "top5": report.top5,
        "genuine_top1": report.genuine_top1,
        "forged_top1": report.forged_top1,
        "num_samples": report.num_samples,
        "condition": asdict(report.condition),
        "per_writer_accuracy": {str(k): v for k, v in report.per_writer_accuracy.items()},
        "confusion": report.confusion.tolist(),
    }


def _report_csv(report: calibrate_eval.EvalReport) -> str:
    lines = ["metric,value"]
    lines.append(f"top1,{report.top1!r}")
    lines.append(f"top5,{report.top5!r}")
    lines.append(f"num_samples,{report.num_samples}")
    for writer, acc in sorted(report.per_writer_accuracy.items()):
        lines.append(f"writer_{writer}_top1,{acc!r}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(config: RunConfig, run_dir: Path) -> int:
    manifest = _corpus_manifest(run_dir)
    classifier = checkpoint.load_classifier(run_dir / "classifier.npz")
    e = config.evaluation
    condition = calibrate_eval.EvalCondition(
        defect_ratio=e.condition_defect, forgery_ratio=e.condition_forgery
    )
    report = calibrate_eval.evaluate(
        classifier,
        manifest,
        condition,
        eval_seed=derive_seed(config.seed, "evaluate"),
        matching_cfg=config.matching_config(),
        inference_rounds=e.inference_rounds,
        filter_cfg=config.filter_config() if e.use_prefilter else None,
    )
    _atomic_write_text(run_dir / "eval" / "report.json", json.dumps(_report_to_dict(report), sort_keys=True, indent=2) + "\n")
    _atomic_write_text(run_dir / "eval" / "report.csv", _report_csv(report))
    print(f"top1={report.top1:.4f} top5={report.top5:.4f} on {report.num_samples} test samples")
    return 0


def cmd_sweep(config: RunConfig, run_dir: Path) -> int:
    manifest = _corpus_manifest(run_dir)
    classifier = checkpoint.load_classifier(run_dir / "classifier.npz")
    e = config.evaluation
    seeds = [derive_seed(config.seed, "sweep", i) for i in range(e.num_seeds)]
    results = calibrate_eval.robustness_sweep(
        classifier,
        manifest,
        e.defect_ratios,
        e.forgery_ratios,
        seeds,
        matching_cfg=config.matching_config(),
        inference_rounds=e.inference_rounds,
        filter_cfg=config.filter_config() if e.use_prefilter else None,
    )
    rows = ["defect_ratio,forgery_ratio,seed,top1,top5"]
    by_condition: dict[tuple[float, float], list[float]] = {}
    for condition, seed, report in results:
        rows.append(
            f"{condition.defect_ratio!r},{condition.forgery_ratio!r},{seed},{report.top1!r},{report.top5!r}"
        )
        by_condition.setdefault((condition.defect_ratio, condition.forgery_ratio), []).append(report.top1)
    _atomic_write_text(run_dir / "sweep" / "reports.csv", "\n".join(rows) + "\n")
    summary = {
        "conditions": [
            {
                "defect_ratio": dr,
                "forgery_ratio": fr,
                "top1": calibrate_eval.format_mean_std(vals),
                "num_seeds": len(vals),
            }
            for (dr, fr), vals in sorted(by_condition.items())
        ]
    }
    _atomic_write_text(run_dir / "sweep" / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"swept {len(by_condition)} conditions x {e.num_seeds} seeds")
    return 0


def cmd_report(config: RunConfig, run_dir: Path) -> int:
    written = reporting.emit_report(run_dir)
    print(f"wrote {len(written)} report files into {run_dir / 'report'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="writerid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="|".join(STAGES))
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="TOML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        p.add_argument("--run-dir", type=str, default=None, help="run directory override")
        if name == "pretrain":
            p.add_argument("--resume-from", type=str, default=None, help="checkpoint to resume")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_effective_config(args)
        run_dir = config.resolved_run_dir()
        run_dir.mkdir(parents=True, exist_ok=True)
        _persist_config(config, run_dir)
        if args.command == "generate-corpus":
            return cmd_generate_corpus(config, run_dir)
        if args.command == "preprocess":
            return cmd_preprocess(config, run_dir)
        if args.command == "pretrain":
            return cmd_pretrain(config, run_dir, resume_from=args.resume_from)
        if args.command == "calibrate":
            return cmd_calibrate(config, run_dir)
        if args.command == "evaluate":
            return cmd_evaluate(config, run_dir)
        if args.command == "sweep":
            return cmd_sweep(config, run_dir)
        if args.command == "report":
            return cmd_report(config, run_dir)
        raise ConfigError(f"unknown subcommand {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (WriteridError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
