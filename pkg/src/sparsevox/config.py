"""Run configuration: every pipeline knob with a documented default, a flat
``key = value`` text format, and presets.

Tuples serialize comma-separated; nested stage tuples use ``x`` inside and
commas between (e.g. ``stages = 2x2x2,2x2x1``). Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .exceptions import ConfigError
from .voxels import GridConfig


@dataclass(frozen=True)
class RunConfig:
    # voxel grid (desk-scale defaults; full preset mirrors the 1440-cell grid)
    grid_range_min: tuple[float, float, float] = (-54.0, -54.0, -5.0)
    grid_range_max: tuple[float, float, float] = (54.0, 54.0, 3.0)
    voxel_size: tuple[float, float, float] = (1.8, 1.8, 1.0)
    max_points_per_voxel: int = 10
    encoding: str = "mvfe"          # "vfe" or "mvfe"
    stages: tuple[tuple[int, int, int], ...] = ((2, 2, 2),)
    stage_widths: tuple[int, ...] = (32,)
    # model
    d_model: int = 96
    decoder_layers: int = 3
    num_queries: int = 60
    ffn_mult: int = 2
    num_classes: int = 3
    c_img: int = 8
    fusion: bool = True
    key_pos_every_layer: bool = True
    dfm_blocks: int = 2
    dfm_window: tuple[int, int, int] = (4, 4, 4)
    dfm_set_size: int = 8
    dfm_shift: tuple[int, int, int] = (2, 2, 0)
    dfm_placement: str = "fused"    # "fused" or "lidar"
    elimination: bool = True
    elim_k: float = 0.5             # fraction in (0,1] or integer count
    elim_dilation: float = 1.5
    score_gate_radius: float = 4.0  # meters; 0 disables evidence gating
    # losses
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    lambda_cls: float = 2.0
    lambda_reg: float = 0.25
    match_cost_cls: float = 0.5
    match_cost_reg: float = 1.0
    lambda_elim: float = 1.0
    vel_scale: float = 10.0
    denoise: bool = True
    denoise_scale: float = 0.4
    denoise_groups: int = 3
    # optimization
    optimizer: str = "adam"         # "adam" or "sgd"
    lr: float = 2e-3
    lr_schedule: str = "constant"   # "constant" or "cyclic"
    cyclic_peak_ratio: float = 4.0
    cyclic_end_ratio: float = 1e-4
    grad_clip: float = 10.0
    steps: int = 1500
    save_every: int = 0             # 0 disables periodic checkpoints
    seed: int = 0

    def __post_init__(self):
        if len(self.stages) != len(self.stage_widths):
            raise ConfigError("stages and stage_widths must have equal length")
        if self.encoding not in ("vfe", "mvfe"):
            raise ConfigError(f"unknown encoding '{self.encoding}'")
        if self.d_model % 6 != 0:
            raise ConfigError(f"d_model must be divisible by 6, got {self.d_model}")
        if self.dfm_placement not in ("fused", "lidar"):
            raise ConfigError(f"unknown dfm_placement '{self.dfm_placement}'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.lr_schedule not in ("constant", "cyclic"):
            raise ConfigError(f"unknown lr_schedule '{self.lr_schedule}'")

    def grid(self) -> GridConfig:
        return GridConfig(range_min=self.grid_range_min,
                          range_max=self.grid_range_max,
                          voxel_size=self.voxel_size,
                          max_points_per_voxel=self.max_points_per_voxel)

    def feat_dim(self) -> int:
        return 11 if self.encoding == "mvfe" else 5


def desk_config(**overrides) -> RunConfig:
    """Laptop-scale defaults (the dataclass defaults)."""
    return RunConfig(**overrides)


def ablation_config(**overrides) -> RunConfig:
    """Lighter variant for A/B training comparisons."""
    base = dict(d_model=72, decoder_layers=2, num_queries=48, steps=500,
                elim_k=192.0)
    base.update(overrides)
    return RunConfig(**base)


def full_config(**overrides) -> RunConfig:
    """Mirror of the full-scale pipeline shape. d_model is 252, the nearest
    multiple of 6 to the published 256-channel width."""
    base = dict(
        voxel_size=(0.075, 0.075, 0.2),
        stages=((2, 2, 2), (2, 2, 2), (2, 2, 1)),
        stage_widths=(64, 128, 252),
        d_model=252,
        decoder_layers=6,
        num_queries=900,
        dfm_blocks=4,
        dfm_window=(24, 24, 11),
        dfm_set_size=72,
        dfm_shift=(12, 12, 0),
        elim_k=10000.0,
        lr=1e-4,
        lr_schedule="cyclic",
    )
    base.update(overrides)
    return RunConfig(**base)


PRESETS = {"desk": desk_config, "ablation": ablation_config, "full": full_config}


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(_fmt_value(v) for v in t) for t in value)
        return ",".join(_fmt_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_like(text: str, template):
    text = text.strip()
    if isinstance(template, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got '{text}'")
    if isinstance(template, int) and not isinstance(template, bool):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        if template and isinstance(template[0], tuple):
            return tuple(tuple(_parse_like(v, template[0][0]) for v in part.split("x"))
                         for part in text.split(",") if part)
        inner = template[0] if template else 0.0
        return tuple(_parse_like(v, inner) for v in text.split(",") if v)
    return text


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_fmt_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse the flat key=value format; keys not in RunConfig are errors."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    defaults = base if base is not None else RunConfig()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        values[key] = _parse_like(raw, getattr(defaults, key))
    merged = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(RunConfig)}
    merged.update(values)
    return RunConfig(**merged)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), base)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]


def config_keys_help() -> str:
    """One line per key with its default, for --help output and docs."""
    cfg = RunConfig()
    return "\n".join(f"  {f.name} (default: {_fmt_value(getattr(cfg, f.name))})"
                     for f in dataclasses.fields(cfg))
