"""Run configuration: defaults, TOML round-trip, strict key checking.

Every knob of the pipeline lives in one flat-sectioned config. Unknown keys
are errors, not warnings: a typo must not silently fall back to a default in
the middle of a long experiment. The serialized form of the effective config
reloads to an identical RunConfig, and every run directory gets a copy.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .contrastive import ContrastConfig, OptimizerConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .matching import MatchingConfig
from .patches import AugmentPolicy, BlurSpec, FlipSpec, MixupSpec
from .prefilter import FilterConfig
from .seeding import derive_seed

RUN_ROOT_ENV = "WRITERID_RUN_ROOT"


@dataclass(frozen=True)
class CorpusSection:
    num_writers: int = 8
    samples_per_writer: int = 20
    image_height: int = 128
    image_width: int = 128
    defect_fraction: float = 0.9
    defect_area_min: float = 0.05
    defect_area_max: float = 0.15
    forgery_ratio: float = 0.0
    calibrate_per_writer: int = 5
    test_per_writer: int = 4


@dataclass(frozen=True)
class FilterSection:
    block_size: int = 16
    lambda_reg: float = 12.0
    window: str = "gaussian"
    detail_threshold: float = 0.98


@dataclass(frozen=True)
class PatchSection:
    patch_size: int = 16
    blur_probability: float = 0.5
    blur_sigma_min: float = 0.3
    blur_sigma_max: float = 1.2
    mixup_probability: float = 0.2
    mixup_alpha: float = 0.4
    flip_probability: float = 0.5


@dataclass(frozen=True)
class EncoderSection:
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0


@dataclass(frozen=True)
class MatchingSection:
    boost_steps: int = 3
    boost_count: int = 10
    boost_amount: float = 0.5
    interval: int = 10
    active_floor: int = 20
    max_rounds: int = 20
    change_divisor: float = 3.0
    shared_view_weights: bool = True


@dataclass(frozen=True)
class ContrastiveSection:
    temperature: float = 0.07
    momentum: float = 0.99
    batch_size: int = 32
    steps: int = 500
    queue_size: int = 0
    log_interval: int = 10
    learning_rate: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.6
    weight_decay: float = 0.05


@dataclass(frozen=True)
class CalibrationSection:
    shots_per_writer: int = 5
    epochs: int = 150
    learning_rate: float = 3e-3


@dataclass(frozen=True)
class EvaluationSection:
    inference_rounds: int = 5
    condition_defect: float = 0.0
    condition_forgery: float = 0.0
    defect_ratios: tuple[float, ...] = (0.1, 0.3, 0.5)
    forgery_ratios: tuple[float, ...] = (0.1, 0.2, 0.3)
    num_seeds: int = 5
    use_prefilter: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    run_dir: str = "runs/desk"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    filter: FilterSection = field(default_factory=FilterSection)
    patches: PatchSection = field(default_factory=PatchSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    matching: MatchingSection = field(default_factory=MatchingSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # -- derived domain configs ------------------------------------------------

    def resolved_run_dir(self) -> Path:
        root = os.environ.get(RUN_ROOT_ENV)
        run_dir = Path(self.run_dir)
        if root and not run_dir.is_absolute():
            return Path(root) / run_dir
        return run_dir

    def filter_config(self) -> FilterConfig:
        f = self.filter
        return FilterConfig(
            block_size=f.block_size,
            lambda_reg=f.lambda_reg,
            window=f.window,
            detail_threshold=f.detail_threshold,
        )

    def augment_policy(self) -> AugmentPolicy:
        p = self.patches
        return AugmentPolicy(
            gaussian_blur=BlurSpec(p.blur_probability, (p.blur_sigma_min, p.blur_sigma_max)),
            mixup=MixupSpec(p.mixup_probability, p.mixup_alpha),
            horizontal_flip=FlipSpec(p.flip_probability),
            seed=derive_seed(self.seed, "augment-policy"),
        )

    def encoder_config(self) -> EncoderConfig:
        p = self.patches.patch_size
        tokens = (self.corpus.image_height // p) * (self.corpus.image_width // p)
        e = self.encoder
        return EncoderConfig(
            embed_dim=e.embed_dim,
            depth=e.depth,
            num_heads=e.num_heads,
            token_len=tokens,
            patch_dim=p * p,
            mlp_ratio=e.mlp_ratio,
            seed=derive_seed(self.seed, "encoder"),
        )

    def matching_config(self) -> MatchingConfig:
        m = self.matching
        return MatchingConfig(
            boost_steps=m.boost_steps,
            boost_count=m.boost_count,
            boost_amount=m.boost_amount,
            interval=m.interval,
            active_floor=m.active_floor,
            max_rounds=m.max_rounds,
            change_divisor=m.change_divisor,
            shared_view_weights=m.shared_view_weights,
        )

    def contrast_config(self) -> ContrastConfig:
        c = self.contrastive
        return ContrastConfig(
            temperature=c.temperature,
            momentum=c.momentum,
            batch_size=c.batch_size,
            steps=c.steps,
            queue_size=c.queue_size,
            log_interval=c.log_interval,
            optimizer=OptimizerConfig(
                learning_rate=c.learning_rate,
                beta1=c.beta1,
                beta2=c.beta2,
                weight_decay=c.weight_decay,
            ),
        )


_SECTIONS = {
    "corpus": CorpusSection,
    "filter": FilterSection,
    "patches": PatchSection,
    "encoder": EncoderSection,
    "matching": MatchingSection,
    "contrastive": ContrastiveSection,
    "calibration": CalibrationSection,
    "evaluation": EvaluationSection,
}
_TOP_SCALARS = ("seed", "run_dir")


def _coerce(value, target_type: type) -> object:
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target_type is tuple and isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return value


def _build_section(name: str, cls, data: dict):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        kwargs[key] = _coerce(value, type(getattr(defaults, key)))
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    kwargs = {}
    for key, value in data.items():
        if key in _TOP_SCALARS:
            kwargs[key] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be a table")
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    raw = Path(path).read_bytes()
    try:
        data = tomli.loads(raw.decode("utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def config_to_toml(config: RunConfig) -> str:
    lines = [f"{key} = {_toml_value(getattr(config, key))}" for key in _TOP_SCALARS]
    for name in _SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        section = getattr(config, name)
        for f in fields(section):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply 'section.key=value' (or 'seed=13') strings on top of a config."""
    data = asdict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw_value = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {raw_value}")["v"]
        except tomli.TOMLDecodeError:
            value = raw_value
        parts = dotted.strip().split(".")
        if len(parts) == 1 and parts[0] in _TOP_SCALARS:
            data[parts[0]] = value
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            section, key = parts
            if key not in data[section]:
                raise ConfigError(f"unknown config key '{dotted.strip()}'")
            data[section][key] = value
        else:
            raise ConfigError(f"unknown config key '{dotted.strip()}'")
    return config_from_dict(data)
