"""Training configuration and the flat ``key = value`` config format.

Defaults follow the full-scale recipe (256x128 inputs, 12 blocks, SGD at 0.008
for 60 epochs).  ``profile = desk`` swaps in the CPU-sized model used by the
test-suite.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import BadConfig
from .fusion import AGGREGATIONS, FUSIONS


def _f(default, doc, source="implementation default"):
    return field(default=default, metadata={"doc": doc, "source": source})


@dataclass
class TrainConfig:
    rgb_frames: int = _f(1, "RGB frames per sample (T_r); 0 drops the RGB branch", "reference recipe: 1 RGB + 5 event frames")
    event_frames: int = _f(5, "event frames per sample (T_e); 0 drops the event branch", "reference recipe: 1 RGB + 5 event frames")
    image_h: int = _f(256, "input height in pixels", "reference recipe: 256x128 inputs")
    image_w: int = _f(128, "input width in pixels", "reference recipe: 256x128 inputs")
    patch_size: int = _f(16, "square patch side p")
    depth: int = _f(12, "encoder blocks L per modality", "reference recipe: 12-block VRWKV6-B")
    embed_dim: int = _f(768, "token width C (divisible by 4)", "VRWKV-B width")
    expansion_ratio: int = _f(4, "channel-mix hidden width / C")
    layer_norm_epsilon: float = _f(1e-5, "LayerNorm epsilon")
    final_norm: bool = _f(True, "LayerNorm after the last encoder block", "VRWKV backbone convention")
    batch_size: int = _f(16, "samples per optimization step", "reference recipe: batch 16")
    epochs: int = _f(60, "training epochs", "reference recipe: 60 epochs")
    max_steps: int = _f(0, "stop after this many optimization steps (0 = no cap)")
    base_lr: float = _f(0.008, "peak SGD learning rate", "reference recipe: lr 0.008")
    momentum: float = _f(0.9, "SGD momentum")
    warmup_epochs: int = _f(10, "linear warm-up length from 0 to base_lr", "reference recipe: 10 warm-up epochs")
    lr_decay_factor: float = _f(0.1, "step-decay multiplier", "reference recipe: x0.1 step decay")
    lr_milestones: tuple = _f((), "epochs at which the decay applies; empty = one milestone at 2/3 of training")
    filter_threshold: float = _f(0.75, "cosine threshold of the event-token filter", "reference recipe: threshold 0.75")
    aggregation: str = _f("sim", "event-token aggregation: max | mean | sim", "ablation axis")
    fusion: str = _f("otn", "fusion: otn | concat | add | conv1x1", "ablation axis")
    fusion_literal: bool = _f(True, "fusion kernel with r in the exponent and k as value (false: standard k/v roles)")
    augment: bool = _f(True, "enable flip and crop augmentation during training")
    flip_prob: float = _f(0.5, "horizontal flip probability", "reference recipe: p = 0.5")
    crop_padding: int = _f(10, "reflective padding before the random crop", "reference recipe: padding 10")
    norm_cap: int = _f(3, "event count that saturates an event-frame pixel")
    frame_interval_us: int = _f(10_000, "RGB frame spacing used to place event windows")
    seed: int = _f(0, "seed for initialization, shuffling and augmentation")

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.validate()

    def validate(self) -> None:
        positive = ("image_h", "image_w", "patch_size", "embed_dim", "expansion_ratio", "batch_size",
                    "frame_interval_us", "norm_cap")
        for name in positive:
            if getattr(self, name) <= 0:
                raise BadConfig(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("rgb_frames", "event_frames", "depth", "epochs", "max_steps", "warmup_epochs",
                     "crop_padding", "base_lr", "momentum", "lr_decay_factor"):
            if getattr(self, name) < 0:
                raise BadConfig(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.rgb_frames == 0 and self.event_frames == 0:
            raise BadConfig("at least one modality needs frames")
        if self.embed_dim % 4:
            raise BadConfig(f"embed_dim {self.embed_dim} must be divisible by 4 for Q-Shift")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise BadConfig(f"patch_size {self.patch_size} must divide {self.image_h}x{self.image_w}")
        if not 0.0 <= self.filter_threshold <= 1.0:
            raise BadConfig(f"filter_threshold must be in [0, 1], got {self.filter_threshold}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise BadConfig(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.crop_padding >= min(self.image_h, self.image_w):
            raise BadConfig("crop_padding must be smaller than the image")
        if self.aggregation not in AGGREGATIONS:
            raise BadConfig(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.fusion not in FUSIONS:
            raise BadConfig(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w

    def milestones(self) -> tuple[int, ...]:
        return self.lr_milestones or (max(1, round(2 * self.epochs / 3)),)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# CPU-sized model; 75 epochs of 4 batches give the 300-step budget on a 64-sample set
DESK_PROFILE = dict(image_h=64, image_w=32, patch_size=8, depth=2, embed_dim=64, batch_size=16,
                    base_lr=0.01, epochs=75, warmup_epochs=5, lr_milestones=(70,), crop_padding=2)

PROFILES = {"full": {}, "desk": DESK_PROFILE}


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_PROFILE, **overrides})


# ---------------------------------------------------------------------------
# key = value files
# ---------------------------------------------------------------------------

def _coerce(name: str, raw: str, default: Any):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw.strip("\"'")
    except ValueError:
        raise BadConfig(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise BadConfig(f"{source}:{lineno}: empty key")
        if key in out:
            raise BadConfig(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_fields(cls, raw: dict[str, str], base: dict | None = None) -> dict:
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    base = dict(base or {})
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise BadConfig(f"unknown config keys: {unknown}")
    for key, value in raw.items():
        base[key] = _coerce(key, value, defaults[key])
    return base


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise BadConfig(f"cannot read config {path}: {exc}") from None
    raw = parse_kv_text(text, str(path))
    profile = raw.pop("profile", "full")
    if profile not in PROFILES:
        raise BadConfig(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    return TrainConfig(**coerce_fields(TrainConfig, raw, PROFILES[profile]))


def dump_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def describe_fields(cls=TrainConfig) -> list[tuple[str, Any, str, str]]:
    return [(f.name, f.default, f.metadata.get("doc", ""), f.metadata.get("source", ""))
            for f in dataclasses.fields(cls)]
