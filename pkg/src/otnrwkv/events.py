"""Event streams: CSV parsing, exposure-aligned stacking and frame-to-event simulation.

Streams are held column-wise (parallel ``x, y, t, p`` integer arrays) so that
all heavy operations stay vectorized in NumPy.
"""

from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, MalformedRow, OutOfBounds, OverlappingWindows, TooFewFrames

CSV_HEADER = "x,y,t_us,p"
DEFAULT_NORM_CAP = 3
DEFAULT_CONTRAST_THRESHOLD = 0.15
DEFAULT_LOG_EPS = 1e-3
DEFAULT_FRAME_INTERVAL_US = 10_000
# guards floor(|dlog| / threshold) against round-off at exact multiples of the threshold
_COUNT_TOL = 1e-9

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class EventPoint(NamedTuple):
    x: int
    y: int
    t: int
    p: int


class ExposureWindow(NamedTuple):
    t_start: int
    t_end: int


@dataclass
class EventStream:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    sensor_height: int
    sensor_width: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise DataError("event columns have different lengths")

    @classmethod
    def empty(cls, sensor_height: int, sensor_width: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, sensor_height, sensor_width)

    @classmethod
    def from_points(cls, points: Sequence[EventPoint], sensor_height: int, sensor_width: int) -> "EventStream":
        if not points:
            return cls.empty(sensor_height, sensor_width)
        arr = np.asarray(points, dtype=np.int64).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], sensor_height, sensor_width)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for row in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield EventPoint(*row)

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))

    def sorted(self) -> "EventStream":
        order = np.argsort(self.t, kind="stable")
        return EventStream(self.x[order], self.y[order], self.t[order], self.p[order],
                           self.sensor_height, self.sensor_width)

    def validate(self) -> None:
        if len(self) == 0:
            return
        bad = (self.x < 0) | (self.x >= self.sensor_width) | (self.y < 0) | (self.y >= self.sensor_height)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise OutOfBounds(
                f"event {i} at (x={self.x[i]}, y={self.y[i]}) outside "
                f"{self.sensor_height}x{self.sensor_width} sensor")
        if (self.t < 0).any():
            raise MalformedRow("negative timestamp")
        if not np.isin(self.p, (0, 1)).all():
            raise MalformedRow("polarity must be 0 or 1")


@dataclass
class FrameSequence:
    """``T x H x W x 3`` float frames in [0, 1], tagged ``rgb`` or ``event``."""

    data: np.ndarray
    kind: str = "rgb"
    timestamps: list[int] | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        # float64 input keeps its precision; everything else is stored as float32
        self.data = data if data.dtype == np.float64 else data.astype(np.float32)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise DataError(f"frames must be T x H x W x 3, got {self.data.shape}")
        if self.kind not in ("rgb", "event"):
            raise DataError(f"unknown frame kind {self.kind!r}")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _locate_bad_row(path: Path) -> str:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                return f"line {lineno}: expected 4 fields, got {len(row)}"
            try:
                [int(v) for v in row]
            except ValueError:
                return f"line {lineno}: non-integer field in {row!r}"
    return "unparseable content"


def parse_event_csv(path, sensor_h: int, sensor_w: int) -> EventStream:
    """Read an ``x,y,t_us,p`` CSV. Unsorted rows are sorted by timestamp."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != CSV_HEADER:
        raise MalformedRow(f"{path}: expected header {CSV_HEADER!r}, got {header!r}")
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message=".*input contained no data.*")
            arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    except ValueError:
        raise MalformedRow(f"{path}: {_locate_bad_row(path)}") from None
    if arr.size == 0:
        return EventStream.empty(sensor_h, sensor_w)
    if arr.shape[1] != 4:
        raise MalformedRow(f"{path}: expected 4 fields per row, got {arr.shape[1]}")
    stream = EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], sensor_h, sensor_w)
    stream.validate()
    return stream if stream.is_sorted() else stream.sorted()


def write_event_csv(stream: EventStream, path) -> None:
    path = Path(path)
    rows = np.stack([stream.x, stream.y, stream.t, stream.p], axis=1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        if len(rows):
            np.savetxt(fh, rows, fmt="%d", delimiter=",")


# ---------------------------------------------------------------------------
# Stacking
# ---------------------------------------------------------------------------

def make_exposure_windows(frame_timestamps: Sequence[int], exposure_us: int) -> list[ExposureWindow]:
    ts = [int(t) for t in frame_timestamps]
    if exposure_us <= 0:
        raise ConfigError(f"exposure must be positive, got {exposure_us}")
    gaps = np.diff(ts)
    if (gaps <= 0).any():
        raise ConfigError("frame timestamps must be strictly increasing")
    if len(gaps) and exposure_us > gaps.min():
        raise OverlappingWindows(
            f"exposure {exposure_us} us exceeds the smallest inter-frame gap {int(gaps.min())} us")
    return [ExposureWindow(t, t + int(exposure_us)) for t in ts]


def even_windows(t_begin: int, t_end: int, count: int) -> list[ExposureWindow]:
    """Split ``[t_begin, t_end)`` into ``count`` equal back-to-back windows."""
    if count < 1 or t_end <= t_begin:
        raise ConfigError(f"cannot split [{t_begin}, {t_end}) into {count} windows")
    step = (t_end - t_begin) // count
    if step < 1:
        raise ConfigError(f"interval [{t_begin}, {t_end}) too short for {count} windows")
    return make_exposure_windows([t_begin + i * step for i in range(count)], step)


def window_index(stream: EventStream, windows: Sequence[ExposureWindow]) -> np.ndarray:
    """Index of the window containing each event, ``-1`` for events outside every window."""
    if not windows:
        return np.full(len(stream), -1, dtype=np.int64)
    starts = np.array([w.t_start for w in windows], dtype=np.int64)
    ends = np.array([w.t_end for w in windows], dtype=np.int64)
    idx = np.searchsorted(starts, stream.t, side="right") - 1
    inside = idx >= 0
    inside[inside] &= stream.t[inside] < ends[idx[inside]]
    return np.where(inside, idx, -1)


def event_counts(stream: EventStream, windows: Sequence[ExposureWindow]) -> np.ndarray:
    """Raw per-window counts, ``T x H x W x 2`` (positive, negative)."""
    counts = np.zeros((len(windows), stream.sensor_height, stream.sensor_width, 2), dtype=np.int64)
    idx = window_index(stream, windows)
    keep = idx >= 0
    np.add.at(counts, (idx[keep], stream.y[keep], stream.x[keep], 1 - stream.p[keep]), 1)
    return counts


def stack_events(stream: EventStream, windows: Sequence[ExposureWindow],
                 norm_cap: int = DEFAULT_NORM_CAP) -> FrameSequence:
    """Accumulate events per exposure window into 3-plane frames.

    Plane 0 counts ON events, plane 1 OFF events, plane 2 stays zero.  Counts
    saturate at ``norm_cap`` and are divided by it.
    """
    if norm_cap <= 0:
        raise ConfigError(f"norm_cap must be positive, got {norm_cap}")
    counts = event_counts(stream, windows)
    frames = np.zeros(counts.shape[:3] + (3,), dtype=np.float32)
    frames[..., :2] = np.minimum(counts, norm_cap) / float(norm_cap)
    return FrameSequence(frames, kind="event",
                         timestamps=[w.t_start for w in windows])


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def luma(frames: np.ndarray) -> np.ndarray:
    return frames[..., 0] * LUMA_WEIGHTS[0] + frames[..., 1] * LUMA_WEIGHTS[1] + frames[..., 2] * LUMA_WEIGHTS[2]


def simulate_events(frames: FrameSequence, contrast_threshold: float = DEFAULT_CONTRAST_THRESHOLD,
                    timestamps: Sequence[int] | None = None, eps: float = DEFAULT_LOG_EPS) -> EventStream:
    """Emit contrast-threshold events from consecutive RGB frames.

    Each pixel fires ``floor(|dlog| / contrast_threshold)`` events between two
    frames, spread uniformly over the interval, with the polarity of ``dlog``.
    """
    data = np.asarray(frames.data, dtype=np.float64)
    T, H, W = data.shape[:3]
    if T < 2:
        raise TooFewFrames(f"need at least 2 frames, got {T}")
    if contrast_threshold <= 0:
        raise ConfigError("contrast threshold must be positive")
    if timestamps is None:
        timestamps = frames.timestamps or [k * DEFAULT_FRAME_INTERVAL_US for k in range(T)]
    ts = np.asarray(timestamps, dtype=np.int64)
    if len(ts) != T or (np.diff(ts) <= 0).any():
        raise ConfigError("need one strictly increasing timestamp per frame")

    log_y = np.log(luma(data) + eps)
    xs, ys, tt, ps = [], [], [], []
    for k in range(T - 1):
        delta = log_y[k + 1] - log_y[k]
        n = np.floor(np.abs(delta) / contrast_threshold + _COUNT_TOL).astype(np.int64)
        py, px = np.nonzero(n)
        if len(py) == 0:
            continue
        per_pixel = n[py, px]
        total = int(per_pixel.sum())
        # j-th event of a pixel (0-based) lands at t_k + (j+1) * dt / (n+1)
        starts = np.repeat(np.cumsum(per_pixel) - per_pixel, per_pixel)
        j = np.arange(total) - starts
        reps = np.repeat(per_pixel, per_pixel)
        dt = ts[k + 1] - ts[k]
        tt.append(ts[k] + ((j + 1) * dt) // (reps + 1))
        xs.append(np.repeat(px, per_pixel))
        ys.append(np.repeat(py, per_pixel))
        ps.append(np.repeat((delta[py, px] > 0).astype(np.int64), per_pixel))
    if not tt:
        return EventStream.empty(H, W)
    x, y, t, p = (np.concatenate(a) for a in (xs, ys, tt, ps))
    order = np.lexsort((x, y, t))
    return EventStream(x[order], y[order], t[order], p[order], H, W)


# ---------------------------------------------------------------------------
# Frame files
# ---------------------------------------------------------------------------

_FRAME_RE = re.compile(r"^(?P<prefix>[a-z]+)_(?P<idx>\d+)\.(png|bmp|tif|tiff)$", re.IGNORECASE)


def frame_paths(directory, prefix: str) -> list[Path]:
    found = []
    for p in Path(directory).iterdir():
        m = _FRAME_RE.match(p.name)
        if m and m.group("prefix") == prefix:
            found.append((int(m.group("idx")), p))
    return [p for _, p in sorted(found)]


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_frames(paths: Sequence[Path], kind: str = "rgb") -> FrameSequence:
    if not paths:
        raise DataError("no frame files")
    return FrameSequence(np.stack([read_frame(p) for p in paths]), kind=kind)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frames(frames: FrameSequence, directory, prefix: str | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = prefix or frames.kind
    out = []
    for k, frame in enumerate(frames.data):
        path = directory / f"{prefix}_{k:03d}.png"
        Image.fromarray(to_uint8(frame)).save(path, format="PNG", optimize=False)
        out.append(path)
    return out
