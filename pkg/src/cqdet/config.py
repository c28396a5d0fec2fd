"""Run configuration: one flat key = value text file plus command-line
overrides (--section.key=value). Unknown keys are rejected; defaults document
the reference operating point (full-range data extents, windowed decoder).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


@dataclass
class DataConfig:
    x_min: float = -75.2
    x_max: float = 75.2
    y_min: float = -75.2
    y_max: float = 75.2
    z_min: float = -2.0
    z_max: float = 4.0
    voxel_x: float = 0.1
    voxel_y: float = 0.1
    voxel_z: float = 0.15

    def vrange(self):
        return ((self.x_min, self.y_min, self.z_min),
                (self.x_max, self.y_max, self.z_max))

    def voxel(self):
        return (self.voxel_x, self.voxel_y, self.voxel_z)

    def grid_dims(self):
        return (int(round((self.x_max - self.x_min) / self.voxel_x)),
                int(round((self.y_max - self.y_min) / self.voxel_y)),
                int(round((self.z_max - self.z_min) / self.voxel_z)))

    def extent(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class ModelConfig:
    variant: str = "windowed"        # windowed | deformable
    d: int = 64
    layers: int = 0                  # 0 -> 3 for windowed, 2 for deformable
    heads: int = 0                   # 0 -> 4 for windowed, 6 for deformable
    window: int = 3
    k_samples: int = 15
    n_train: int = 500
    n_eval: int = 1000
    frames: int = 1
    fusion: str = "saf"              # saf | pointconcat
    query_init: str = "center_feature"
    pos_embed: str = "linear"
    local_max_eval: bool = True

    def resolved_layers(self):
        if self.layers:
            return self.layers
        return 3 if self.variant == "windowed" else 2

    def resolved_heads(self):
        if self.heads:
            return self.heads
        return 4 if self.variant == "windowed" else 6


@dataclass
class TrainConfig:
    steps: int = 500
    base_lr: float = 2e-3
    batch_size: int = 1
    warmup_frac: float = 0.4
    start_div: float = 25.0
    final_div: float = 100.0
    weight_decay: float = 0.01
    checkpoint_every: int = 250
    w_hm: float = 1.0
    w_reg: float = 2.0
    w_iou: float = 1.0
    w_cor: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("train.steps must be >= 1")


@dataclass
class EvalConfig:
    match_iou: tuple = (0.7, 0.5, 0.5)
    beta: tuple = (1.0, 1.0, 4.0)
    nms_iou: tuple = (0.8, 0.55, 0.55)
    heading_fold_pi: bool = False
    pr_samples: int = 101


_SPEED_PROFILES = {
    # (weight, low, high) m/s; used by the synthetic generator
    "mixed": ((0.45, 0.0, 0.0), (0.15, 0.2, 1.0), (0.15, 1.0, 3.0),
              (0.2, 3.0, 10.0), (0.05, 10.0, 14.0)),
    "stationary": ((1.0, 0.0, 0.0),),
    "fast_heavy": ((0.35, 0.0, 0.0), (0.1, 0.2, 1.0), (0.1, 1.0, 3.0),
                   (0.35, 3.0, 10.0), (0.1, 10.0, 14.0)),
}


@dataclass
class SceneGenConfig:
    n_frames: int = 1
    frame_dt: float = 0.4
    n_objects_min: int = 4
    n_objects_max: int = 10
    spawn_radius: float = 18.0
    sensor_range: float = 75.0
    point_density: float = 14.0
    clutter_points: int = 250
    ego_speed: float = 1.5
    speed_profile: str = "mixed"

    def speed_modes(self):
        if self.speed_profile not in _SPEED_PROFILES:
            raise ValueError(f"unknown speed_profile {self.speed_profile!r}; "
                             f"choose from {sorted(_SPEED_PROFILES)}")
        return _SPEED_PROFILES[self.speed_profile]


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scenes: SceneGenConfig = field(default_factory=SceneGenConfig)


def _coerce(raw: str, template):
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    return raw.strip()


def set_key(cfg: RunConfig, key: str, raw: str):
    """Assign one dotted key, e.g. model.layers=2 or seed=7."""
    if key == "seed":
        cfg.seed = int(raw)
        return
    if "." not in key:
        raise KeyError(f"unknown config key {key!r}")
    section, _, name = key.partition(".")
    if not hasattr(cfg, section) or section == "seed":
        raise KeyError(f"unknown config section {section!r}")
    sub = getattr(cfg, section)
    fields = {f.name: f for f in dataclasses.fields(sub)}
    if name not in fields:
        raise KeyError(f"unknown config key {key!r}")
    setattr(sub, name, _coerce(raw, getattr(sub, name)))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = body.partition("=")
        try:
            set_key(cfg, key.strip(), raw.strip())
        except (KeyError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            parse_config_text(f.read(), cfg)
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override must be key=value, got {ov!r}")
        key, _, raw = ov.partition("=")
        set_key(cfg, key.strip().lstrip("-"), raw.strip())
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    nx, ny, _ = cfg.data.grid_dims()
    if nx % 8 or ny % 8:
        raise ValueError(f"data extents / voxel size give grid {(nx, ny)}, "
                         "which must be divisible by 8")
    if cfg.model.variant not in ("windowed", "deformable"):
        raise ValueError(f"unknown model.variant {cfg.model.variant!r}")
    if cfg.model.fusion not in ("saf", "pointconcat"):
        raise ValueError(f"unknown model.fusion {cfg.model.fusion!r}")
    if cfg.model.d % cfg.model.resolved_heads():
        raise ValueError("model.heads must divide model.d")
    for name in ("match_iou", "beta", "nms_iou"):
        if len(getattr(cfg.eval, name)) != 3:
            raise ValueError(f"eval.{name} needs one value per class (3)")
    cfg.scenes.speed_modes()


def config_to_text(cfg: RunConfig) -> str:
    """Serialize back to the flat key = value form (documents every default)."""
    lines = [f"seed = {cfg.seed}"]
    for section in ("data", "model", "train", "eval", "scenes"):
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            v = getattr(sub, f.name)
            if isinstance(v, tuple):
                v = ", ".join(f"{x:g}" for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
