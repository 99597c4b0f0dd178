"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import events as ev
from .errors import ConfigError, DataError, OTNError

log = logging.getLogger("otnrwkv")

CHECKPOINT_NAME = "checkpoint.otnk"
REPORT_NAME = "report.json"


def _read_timestamps(path) -> list[int]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read timestamps {path}: {exc}") from None
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise DataError(f"{path}:{lineno}: timestamp {line!r} is not an integer") from None
    if not out:
        raise DataError(f"{path} lists no timestamps")
    return out


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import load_train_config
    from .data import load_dataset
    from .train import train

    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    manifest = load_dataset(args.data, "train")
    ckpt, report = train(cfg, manifest,
                         on_epoch=lambda e, loss: log.info("epoch %d loss %.5f", e, loss))
    out = Path(args.out)
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    (out / REPORT_NAME).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out / CHECKPOINT_NAME} ({report.steps} steps, final loss "
          f"{report.loss_trace[-1] if report.loss_trace else float('nan'):.5f}, train mA {report.metrics['mA']})")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .head import dumps_metrics
    from .train import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_dataset(args.data, args.split)
    if manifest.attribute_names != ckpt.extra.get("attribute_names", manifest.attribute_names):
        raise DataError("dataset attributes differ from the ones the checkpoint was trained on")
    text = dumps_metrics(evaluate(ckpt, manifest))
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_encode_events(args) -> int:
    timestamps = _read_timestamps(args.timestamps)
    if args.exposure_us is not None:
        exposure = args.exposure_us
    elif len(timestamps) > 1:
        exposure = int(np.diff(timestamps).min())
    else:
        raise ConfigError("a single timestamp needs an explicit --exposure-us")
    windows = ev.make_exposure_windows(timestamps, exposure)
    unbounded = 2**31 - 1
    stream = ev.parse_event_csv(args.events, args.height or unbounded, args.width or unbounded)
    if args.height is None or args.width is None:
        # sensor size from the data when not given
        if not len(stream):
            raise ConfigError("empty stream: pass --height and --width")
        height = args.height or int(stream.y.max()) + 1
        width = args.width or int(stream.x.max()) + 1
        stream = ev.EventStream(stream.x, stream.y, stream.t, stream.p, height, width)
    frames = ev.stack_events(stream, windows, args.norm_cap)
    paths = ev.save_frames(frames, args.out, prefix="event")
    print(f"wrote {len(paths)} event frames ({len(stream)} events) to {args.out}")
    return 0


def cmd_simulate_events(args) -> int:
    paths = ev.frame_paths(args.frames, "rgb")
    if not paths:
        raise DataError(f"no rgb_*.png frames in {args.frames}")
    frames = ev.load_frames(paths)
    timestamps = [k * args.frame_interval_us for k in range(len(frames))]
    stream = ev.simulate_events(frames, args.threshold, timestamps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ev.write_event_csv(stream, args.out)
    print(f"wrote {len(stream)} events to {args.out}")
    return 0


def cmd_gen_synthetic(args) -> int:
    from .data import SyntheticConfig, generate_synthetic_dataset, load_synthetic_config

    cfg = load_synthetic_config(args.config) if args.config else SyntheticConfig()
    out = generate_synthetic_dataset(cfg, args.seed, args.out)
    print(f"wrote {cfg.n_train} train / {cfg.n_test} test samples to {out}")
    return 0


def filter_mask_image(event_frames: np.ndarray, keep: np.ndarray, patch_size: int) -> np.ndarray:
    """Tile ``(T_e, H, W, 3)`` event frames side by side as grayscale, filtered patches black.

    ``keep`` is the flattened ``T_e * N`` token mask (frame-major, row-major patches).
    """
    T, H, W = event_frames.shape[:3]
    gw = W // patch_size
    gray = np.clip(0.5 + 0.5 * (event_frames[..., 0] - event_frames[..., 1]), 0.0, 1.0)
    for idx in np.flatnonzero(~np.asarray(keep, dtype=bool)):
        f, n = divmod(int(idx), (H // patch_size) * gw)
        r, c = divmod(n, gw)
        gray[f, r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = 0.0
    return np.concatenate(list(gray), axis=1)


def cmd_visualize_filter(args) -> int:
    import torch
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .data import SampleRecord, load_sample_frames
    from .train import model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    cfg = model.cfg
    if not cfg.event_frames:
        raise ConfigError("checkpoint has no event branch")
    sample = Path(args.sample)
    rgb = ev.frame_paths(sample, "rgb")
    if not rgb:
        raise DataError(f"no rgb_*.png frames in {sample}")
    csv_path = sample / "events.csv"
    record = SampleRecord(sample.name, rgb, np.zeros(0, dtype=np.int64),
                          csv_path if csv_path.is_file() else None, ev.frame_paths(sample, "event"))
    if record.event_path is None and not record.event_frame_paths:
        raise DataError(f"{sample} has neither events.csv nor event_*.png")
    _, events = load_sample_frames(record, 0, cfg.event_frames, (cfg.image_h, cfg.image_w),
                                   cfg.norm_cap, cfg.frame_interval_us)
    model.eval()
    with torch.no_grad():
        tokens = model.encode_events(torch.from_numpy(events[None]))
        if cfg.aggregation == "sim":
            _, masks = model.aggregate(tokens, return_masks=True)
            keep = masks[0].keep
        else:
            keep = np.ones(cfg.event_frames * cfg.num_tokens, dtype=bool)
    image = filter_mask_image(events, keep, cfg.patch_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(image * 255).astype(np.uint8)).save(out)
    print(f"kept {int(keep.sum())} of {keep.size} event tokens; wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otnrwkv", description="RGB-event attribute recognition: data tools, training and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on DIR/train")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory for checkpoint and report")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--json", default=None, help="write metrics here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("encode-events", help="stack an events.csv into event_NNN.png frames")
    p.add_argument("--events", required=True)
    p.add_argument("--timestamps", required=True, help="one frame start time (us) per line")
    p.add_argument("--out", required=True)
    p.add_argument("--exposure-us", type=int, default=None, help="window length (default: smallest frame gap)")
    p.add_argument("--height", type=int, default=None, help="sensor height (default: from the data)")
    p.add_argument("--width", type=int, default=None, help="sensor width (default: from the data)")
    p.add_argument("--norm-cap", type=int, default=ev.DEFAULT_NORM_CAP)
    p.set_defaults(func=cmd_encode_events)

    p = sub.add_parser("simulate-events", help="simulate an events.csv from rgb_NNN.png frames")
    p.add_argument("--frames", required=True)
    p.add_argument("--threshold", type=float, default=ev.DEFAULT_CONTRAST_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--frame-interval-us", type=int, default=ev.DEFAULT_FRAME_INTERVAL_US)
    p.set_defaults(func=cmd_simulate_events)

    p = sub.add_parser("gen-synthetic", help="write a synthetic paired RGB-event dataset")
    p.add_argument("--config", default=None, help="key = value generator config (default settings if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("visualize-filter", help="show which event tokens the filter keeps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample directory")
    p.add_argument("--out", required=True, help="output image (PNG)")
    p.set_defaults(func=cmd_visualize_filter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OTNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
