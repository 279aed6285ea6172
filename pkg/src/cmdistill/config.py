"""Run configuration and the plain-text ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

PAIRING_MODES = ("teacher-global", "all-cross")
PRECISIONS = ("float64", "float32")

# Ablation rows: image crops only, then adding MIL, region crops, L_T and L_S in turn
ABLATION_ROWS = (
    ("LV", dict(mil_aggregation=False, region_crops=False, inter_teacher=False, inter_student=False)),
    ("LV+MIL", dict(mil_aggregation=True, region_crops=False, inter_teacher=False, inter_student=False)),
    ("LV+MIL+LR", dict(mil_aggregation=True, region_crops=True, inter_teacher=False, inter_student=False)),
    ("LV+MIL+LR+LT", dict(mil_aggregation=True, region_crops=True, inter_teacher=True, inter_student=False)),
    ("LV+MIL+LR+LT+LS", dict(mil_aggregation=True, region_crops=True, inter_teacher=True, inter_student=True)),
)
LAMBDA1_GRID = (10.0, 1.0, 0.1, 0.01, 0.001)
REGION_CROP_GRID = (2, 4, 6, 8, 10, 12)
INSTANCE_SIZE_GRID = (2, 4, 8, 16, 32)


@dataclass
class SyntheticSpec:
    n_coarse_backgrounds: int = 2
    n_fine_classes: int = 8
    samples_per_class: int = 200
    image_px: int = 64
    glyph_px: int = 8
    noise_std: float = 0.03
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.glyph_px > self.image_px:
            raise ConfigError(f"glyph_px={self.glyph_px} does not fit in image_px={self.image_px}")
        if min(self.n_coarse_backgrounds, self.n_fine_classes, self.samples_per_class, self.glyph_px) < 1:
            raise ConfigError("class counts, samples_per_class and glyph_px must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        return self


@dataclass
class RunConfig:
    # crop geometry
    n_image_crops: int = 2
    n_region_crops: int = 8
    image_crop_px: int = 56
    region_crop_px: int = 24
    instance_px: int = 8
    image_crop_scale_min: float = 0.4
    region_crop_scale_min: float = 0.05
    region_crop_scale_max: float = 0.4
    augment: bool = True
    # model
    embed_dim: int = 64
    hidden_dim: int = 64
    head_dim: int = 256
    attention: bool = False
    attention_blocks: int = 2
    precision: str = "float64"  # network arithmetic during training; float32 roughly halves step time
    # objective
    lambda1: float = 0.1
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    pairing_mode: str = "teacher-global"
    literal_ce_order: bool = False
    mil_aggregation: bool = True
    region_crops: bool = True
    inter_teacher: bool = True
    inter_student: bool = True
    # optimisation
    ema_start: float = 0.996
    ema_end: float = 1.0
    learning_rate: float = 5e-4
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    checkpoint_every: int = 10
    seed: int = 0

    @property
    def effective_region_crops(self) -> int:
        return self.n_region_crops if self.region_crops else 0

    def validate(self) -> "RunConfig":
        s = self.instance_px
        if s < 1:
            raise ConfigError("instance_px must be >= 1")
        for name in ("image_crop_px", "region_crop_px"):
            px = getattr(self, name)
            if px < 1 or px % s:
                raise ConfigError(
                    f"instance_px={s} must divide {name}={px}; pick a common divisor "
                    f"of image_crop_px and region_crop_px"
                )
        if self.n_image_crops < 2:
            raise ConfigError(f"need at least 2 image-level crops per net, got {self.n_image_crops}")
        if self.n_region_crops < 0:
            raise ConfigError("n_region_crops must be >= 0")
        if self.lambda1 < 0:
            raise ConfigError(f"lambda1 must be >= 0, got {self.lambda1}")
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ConfigError("temperatures must be > 0")
        if not 0 <= self.center_momentum <= 1:
            raise ConfigError("center_momentum must lie in [0, 1]")
        if not 0 <= self.ema_start <= self.ema_end <= 1:
            raise ConfigError("need 0 <= ema_start <= ema_end <= 1")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.pairing_mode not in PAIRING_MODES:
            raise ConfigError(f"pairing_mode must be one of {PAIRING_MODES}, got {self.pairing_mode!r}")
        if not 0 < self.image_crop_scale_min <= 1:
            raise ConfigError("image_crop_scale_min must lie in (0, 1]")
        if not 0 < self.region_crop_scale_min <= self.region_crop_scale_max <= 1:
            raise ConfigError("need 0 < region_crop_scale_min <= region_crop_scale_max <= 1")
        if min(self.embed_dim, self.hidden_dim, self.head_dim, self.epochs, self.batch_size) < 1:
            raise ConfigError("embed_dim, hidden_dim, head_dim, epochs and batch_size must be >= 1")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {type(default).__name__})") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> tuple[RunConfig, SyntheticSpec]:
    """Parse ``key = value`` lines into a (RunConfig, SyntheticSpec) pair.

    Keys may be bare or prefixed with ``run.`` / ``data.``. Blank lines and
    ``#`` comments are skipped. Unknown keys are rejected.
    """
    run_defaults = RunConfig()
    data_defaults = SyntheticSpec()
    run_keys = {f.name for f in fields(RunConfig)}
    data_keys = {f.name for f in fields(SyntheticSpec)}
    run_vals: dict = {}
    data_vals: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("run."):
            scope, key = "run", key[4:]
        elif key.startswith("data."):
            scope, key = "data", key[5:]
        elif key in run_keys:
            scope = "run"
        elif key in data_keys:
            scope = "data"
        else:
            scope = None
        if scope == "run" and key in run_keys:
            run_vals[key] = _coerce(value, getattr(run_defaults, key), key)
        elif scope == "data" and key in data_keys:
            data_vals[key] = _coerce(value, getattr(data_defaults, key), key)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
    return RunConfig(**run_vals), SyntheticSpec(**data_vals)


def load_config(path: str | Path, env_seed: bool = True) -> tuple[RunConfig, SyntheticSpec]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    run, spec = parse_config_text(path.read_text(), str(path))
    if env_seed and os.environ.get("CMD_SEED"):
        try:
            run.seed = int(os.environ["CMD_SEED"])
        except ValueError:
            raise ConfigError(f"CMD_SEED must be an integer, got {os.environ['CMD_SEED']!r}") from None
    return run.validate(), spec.validate()


def format_config(run: RunConfig, spec: SyntheticSpec | None = None) -> str:
    lines = [f"run.{f.name} = {_fmt(getattr(run, f.name))}" for f in fields(run)]
    if spec is not None:
        lines += [f"data.{f.name} = {_fmt(getattr(spec, f.name))}" for f in fields(spec)]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
