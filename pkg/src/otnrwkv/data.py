"""On-disk dataset layout, loading, and the synthetic paired RGB-Event generator.

Layout::

    root/attributes.txt            one attribute name per line
    root/{train,test}/<sample_id>/
        rgb_000.png ...            RGB frames, ascending
        events.csv                 x,y,t_us,p   (or event_000.png ... stacked frames)
        labels.json                {"labels": [0, 1, ...]}
"""

from __future__ import annotations

import colorsys
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import events as ev
from .config import _coerce, parse_kv_text
from .errors import BadConfig, DataError, GeometryMismatch, LabelLengthMismatch, MissingAttributeFile, MissingSampleAsset

SPLITS = ("train", "test")
CUE_KINDS = ("rgb_only", "event_only", "both")


@dataclass
class SampleRecord:
    sample_id: str
    rgb_paths: list[Path]
    labels: np.ndarray
    event_path: Path | None = None
    event_frame_paths: list[Path] = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    attribute_names: list[str]
    records: list[SampleRecord]

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, len(self.attribute_names)), dtype=np.int64)
        return np.stack([r.labels for r in self.records])


def read_attributes(root) -> list[str]:
    path = Path(root) / "attributes.txt"
    if not path.is_file():
        raise MissingAttributeFile(f"{path} not found")
    names = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not names:
        raise MissingAttributeFile(f"{path} lists no attributes")
    return names


def load_record(sample_dir: Path, num_attributes: int) -> SampleRecord:
    sid = sample_dir.name
    label_path = sample_dir / "labels.json"
    if not label_path.is_file():
        raise MissingSampleAsset(f"sample {sid}: labels.json missing")
    try:
        labels = json.loads(label_path.read_text(encoding="utf-8"))["labels"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"sample {sid}: bad labels.json ({exc})") from None
    if len(labels) != num_attributes:
        raise LabelLengthMismatch(f"sample {sid}: {len(labels)} labels for {num_attributes} attributes")
    labels = np.asarray(labels, dtype=np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise DataError(f"sample {sid}: labels must be 0/1")
    rgb = ev.frame_paths(sample_dir, "rgb")
    if not rgb:
        raise MissingSampleAsset(f"sample {sid}: no rgb_*.png frames")
    csv_path = sample_dir / "events.csv"
    event_frames = ev.frame_paths(sample_dir, "event")
    if not csv_path.is_file() and not event_frames:
        raise MissingSampleAsset(f"sample {sid}: neither events.csv nor event_*.png present")
    return SampleRecord(sid, rgb, labels, csv_path if csv_path.is_file() else None, event_frames)


def load_dataset(root, split: str) -> DatasetManifest:
    root = Path(root)
    names = read_attributes(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise MissingSampleAsset(f"split directory {split_dir} not found")
    records = [load_record(d, len(names)) for d in sorted(split_dir.iterdir(), key=lambda p: p.name) if d.is_dir()]
    return DatasetManifest(root, split, names, records)


def _spaced(n_available: int, n_wanted: int) -> list[int]:
    if n_wanted > n_available:
        raise DataError(f"need {n_wanted} frames, sample has {n_available}")
    if n_wanted == 1:
        return [0]
    return [int(round(i)) for i in np.linspace(0, n_available - 1, n_wanted)]


def load_sample_frames(record: SampleRecord, rgb_frames: int, event_frames: int,
                       image_hw: tuple[int, int] | None = None, norm_cap: int = ev.DEFAULT_NORM_CAP,
                       frame_interval_us: int = ev.DEFAULT_FRAME_INTERVAL_US) -> tuple[np.ndarray, np.ndarray]:
    """Model inputs for one sample: ``(T_r, H, W, 3)`` RGB and ``(T_e, H, W, 3)`` event frames.

    RGB frames are picked evenly from the available ones.  A raw event stream
    is stacked into ``T_e`` equal windows spanning the RGB timeline.
    """
    first = ev.read_frame(record.rgb_paths[0])
    H, W = first.shape[:2]
    if image_hw is not None and (H, W) != tuple(image_hw):
        raise GeometryMismatch(f"sample {record.sample_id} is {H}x{W}, model expects {image_hw[0]}x{image_hw[1]}")
    rgb = np.zeros((0, H, W, 3), dtype=np.float32)
    if rgb_frames:
        rgb = ev.load_frames([record.rgb_paths[i] for i in _spaced(len(record.rgb_paths), rgb_frames)]).data
    events = np.zeros((0, H, W, 3), dtype=np.float32)
    if event_frames:
        if record.event_path is not None:
            stream = ev.parse_event_csv(record.event_path, H, W)
            n = len(record.rgb_paths)
            if n > 1:
                t0, t1 = 0, (n - 1) * frame_interval_us
            elif len(stream):
                t0, t1 = int(stream.t[0]), int(stream.t[-1]) + 1
            else:
                t0, t1 = 0, frame_interval_us
            t1 = max(t1, t0 + event_frames)
            events = ev.stack_events(stream, ev.even_windows(t0, t1, event_frames), norm_cap).data
        else:
            paths = record.event_frame_paths
            events = ev.load_frames([paths[i] for i in _spaced(len(paths), event_frames)], kind="event").data
        if events.shape[1:3] != (H, W):
            raise GeometryMismatch(f"sample {record.sample_id}: event frames do not match RGB geometry")
    return rgb, events


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Each attribute owns a horizontal band of the frame and renders a cue there when positive.

    ``rgb_only`` cues are static colour stripes (no temporal change, so no
    simulated events); ``event_only`` cues re-draw the background texture every
    frame (indistinguishable from background in any single frame, strong events);
    ``both`` cues are moving colour stripes.
    """

    n_train: int = 64
    n_test: int = 16
    num_attributes: int = 8
    image_h: int = 64
    image_w: int = 32
    num_frames: int = 6
    cues: tuple = ("both",)
    positive_rate: float = 0.5
    contrast_threshold: float = ev.DEFAULT_CONTRAST_THRESHOLD
    frame_interval_us: int = ev.DEFAULT_FRAME_INTERVAL_US
    stripe_period: int = 8
    background_low: float = 0.2
    background_high: float = 0.6

    def __post_init__(self):
        self.cues = tuple(self.cues)
        if len(self.cues) == 1:
            self.cues = self.cues * self.num_attributes
        if len(self.cues) != self.num_attributes:
            raise BadConfig(f"{len(self.cues)} cue kinds for {self.num_attributes} attributes")
        bad = [c for c in self.cues if c not in CUE_KINDS]
        if bad:
            raise BadConfig(f"unknown cue kinds {bad}; expected {CUE_KINDS}")
        if self.n_train < 0 or self.n_test < 0 or self.num_attributes < 1:
            raise BadConfig("sample and attribute counts must be non-negative (attributes >= 1)")
        if self.image_h // self.num_attributes < 1 or self.image_w < 2:
            raise BadConfig(f"{self.image_h}x{self.image_w} frame cannot host {self.num_attributes} cue bands")
        if self.num_frames < 2:
            raise BadConfig("need at least 2 frames to simulate events")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise BadConfig("positive_rate must be in [0, 1]")
        if not 0.0 < self.background_low < self.background_high <= 1.0:
            raise BadConfig("background range must satisfy 0 < low < high <= 1")

    def band(self, j: int) -> slice:
        h = self.image_h // self.num_attributes
        return slice(j * h, (j + 1) * h)

    @property
    def attribute_names(self) -> list[str]:
        return [f"attr{j:02d}_{cue}" for j, cue in enumerate(self.cues)]


def load_synthetic_config(path) -> SyntheticConfig:
    raw = parse_kv_text(Path(path).read_text(encoding="utf-8"), str(path))
    defaults = {f: getattr(SyntheticConfig(), f) for f in SyntheticConfig.__dataclass_fields__}
    kwargs = {}
    for key, value in raw.items():
        if key not in defaults:
            raise BadConfig(f"unknown config key {key!r}")
        if key == "cues":
            kwargs[key] = tuple(c.strip() for c in value.split(",") if c.strip())
        else:
            kwargs[key] = _coerce(key, value, defaults[key])
    return SyntheticConfig(**kwargs)


def _cue_color(j: int, m: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(j / m, 1.0, 1.0), dtype=np.float64)


def _stripes(cfg: SyntheticConfig, j: int, height: int, offset: int) -> np.ndarray:
    cols = (np.arange(cfg.image_w) + offset) % cfg.stripe_period < cfg.stripe_period // 2
    band = np.where(cols[None, :, None], _cue_color(j, cfg.num_attributes), 0.05)
    return np.broadcast_to(band, (height, cfg.image_w, 3))


def render_sample(cfg: SyntheticConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``(num_frames, H, W, 3)`` frames, quantized to 8-bit levels."""
    T, H, W = cfg.num_frames, cfg.image_h, cfg.image_w
    lo, hi = cfg.background_low, cfg.background_high
    background = rng.uniform(lo, hi, size=(H, W, 1)).repeat(3, axis=-1)
    frames = np.repeat(background[None], T, axis=0)
    step = max(1, cfg.stripe_period // 4)
    for j, (cue, on) in enumerate(zip(cfg.cues, labels)):
        if not on:
            continue
        rows = cfg.band(j)
        height = rows.stop - rows.start
        for k in range(T):
            if cue == "rgb_only":
                frames[k, rows] = _stripes(cfg, j, height, 0)
            elif cue == "both":
                frames[k, rows] = _stripes(cfg, j, height, k * step)
            else:
                frames[k, rows] = rng.uniform(lo, hi, size=(height, W, 1)).repeat(3, axis=-1)
    return ev.to_uint8(frames).astype(np.float32) / 255.0


def generate_synthetic_dataset(cfg: SyntheticConfig, seed: int, out) -> Path:
    """Write a complete train/test dataset under ``out``; a pure function of ``(cfg, seed)``."""
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    (out / "attributes.txt").write_text("\n".join(cfg.attribute_names) + "\n", encoding="utf-8")
    root_seq = np.random.SeedSequence(seed)
    split_seqs = root_seq.spawn(len(SPLITS))
    timestamps = [k * cfg.frame_interval_us for k in range(cfg.num_frames)]
    for split, n, seq in zip(SPLITS, (cfg.n_train, cfg.n_test), split_seqs):
        split_dir = out / split
        split_dir.mkdir()
        for i, sample_seq in enumerate(seq.spawn(n)):
            rng = np.random.default_rng(sample_seq)
            labels = (rng.random(cfg.num_attributes) < cfg.positive_rate).astype(np.int64)
            frames = ev.FrameSequence(render_sample(cfg, labels, rng), kind="rgb", timestamps=timestamps)
            sample_dir = split_dir / f"{split}_{i:05d}"
            ev.save_frames(frames, sample_dir, prefix="rgb")
            stream = ev.simulate_events(frames, cfg.contrast_threshold, timestamps)
            ev.write_event_csv(stream, sample_dir / "events.csv")
            (sample_dir / "labels.json").write_text(json.dumps({"labels": labels.tolist()}) + "\n",
                                                    encoding="utf-8")
    return out
