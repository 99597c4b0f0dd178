import json

import numpy as np
import pytest
from PIL import Image

from otnrwkv import events as ev
from otnrwkv.cli import filter_mask_image, main
from otnrwkv.data import SyntheticConfig, generate_synthetic_dataset

TINY_CONFIG = """profile = desk
image_h = 16
image_w = 8
patch_size = 4
depth = 1
embed_dim = 8
batch_size = 4
epochs = 2
warmup_epochs = 1
event_frames = 3
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    cfg = SyntheticConfig(n_train=6, n_test=4, num_attributes=4, image_h=16, image_w=8, num_frames=3)
    return generate_synthetic_dataset(cfg, 0, tmp_path_factory.mktemp("cli") / "data")


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out)]) == 0
    return out


def test_train_writes_checkpoint_and_report(trained):
    report = json.loads((trained / "report.json").read_text())
    assert len(report["loss_trace"]) == 2
    assert (trained / "checkpoint.otnk").read_bytes()[:4] == b"OTNK"


def test_eval_to_file_and_stdout(trained, dataset, tmp_path, capsys):
    out = tmp_path / "m" / "metrics.json"
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.otnk"), "--data", str(dataset),
                 "--json", str(out)]) == 0
    metrics = json.loads(out.read_text())
    assert list(metrics["per_attribute"]) == (dataset / "attributes.txt").read_text().split()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.otnk"), "--data", str(dataset)]) == 0
    assert capsys.readouterr().out == out.read_text()


def test_eval_rejects_other_attributes(trained, tmp_path):
    other = generate_synthetic_dataset(SyntheticConfig(n_train=2, n_test=2, num_attributes=3, image_h=16, image_w=8,
                                                       num_frames=3, cues=("rgb_only",)), 0, tmp_path / "o")
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.otnk"), "--data", str(other)]) == 3


def test_visualize_filter(trained, dataset, tmp_path):
    sample = next(p for p in sorted((dataset / "test").iterdir()) if p.is_dir())
    out = tmp_path / "mask.png"
    assert main(["visualize-filter", "--checkpoint", str(trained / "checkpoint.otnk"), "--sample", str(sample),
                 "--out", str(out)]) == 0
    assert Image.open(out).size == (3 * 8, 16)


def test_filter_mask_image_blacks_out_dropped_patches():
    frames = np.zeros((2, 4, 4, 3))
    frames[..., 0] = 1.0
    keep = np.ones(8, dtype=bool)
    keep[5] = False  # frame 1, patch (0, 1)
    img = filter_mask_image(frames, keep, 2)
    assert img.shape == (4, 8)
    assert (img[:2, 6:8] == 0).all()
    assert (img[2:, 4:] == 1).all() and (img[:, :4] == 1).all()


def test_simulate_then_encode(tmp_path, capsys):
    rng = np.random.default_rng(0)
    ev.save_frames(ev.FrameSequence(rng.uniform(0.1, 0.9, (3, 6, 5, 3))), tmp_path / "f", "rgb")
    csv = tmp_path / "events.csv"
    assert main(["simulate-events", "--frames", str(tmp_path / "f"), "--out", str(csv)]) == 0
    stream = ev.parse_event_csv(csv, 6, 5)
    assert len(stream) > 0
    stamps = tmp_path / "t.txt"
    stamps.write_text("# frame starts\n0\n33333\n66666\n")
    assert main(["encode-events", "--events", str(csv), "--timestamps", str(stamps), "--height", "6",
                 "--width", "5", "--out", str(tmp_path / "enc")]) == 0
    frames = ev.load_frames(ev.frame_paths(tmp_path / "enc", "event"))
    assert frames.data.shape == (3, 6, 5, 3)


def test_encode_infers_size(tmp_path):
    csv = tmp_path / "e.csv"
    ev.write_event_csv(ev.EventStream(np.array([0, 4]), np.array([2, 0]), np.array([10, 20]), np.array([1, 0]), 3, 5),
                       csv)
    stamps = tmp_path / "t.txt"
    stamps.write_text("0\n")
    assert main(["encode-events", "--events", str(csv), "--timestamps", str(stamps), "--exposure-us", "100",
                 "--out", str(tmp_path / "o")]) == 0
    assert Image.open(tmp_path / "o" / "event_000.png").size == (5, 3)
    # one timestamp and no exposure is a configuration error
    assert main(["encode-events", "--events", str(csv), "--timestamps", str(stamps), "--out", str(tmp_path)]) == 2


def test_gen_synthetic_with_config(tmp_path):
    cfg = tmp_path / "syn.cfg"
    cfg.write_text("n_train = 2\nn_test = 1\nnum_attributes = 2\nimage_h = 8\nimage_w = 8\nnum_frames = 2\n")
    assert main(["gen-synthetic", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "attributes.txt").read_text().count("\n") == 2


def test_exit_codes(tmp_path, dataset):
    bad = tmp_path / "bad.cfg"
    bad.write_text("embed_dim = 10\n")
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.otnk"), "--data", str(dataset)]) == 3
    assert main(["simulate-events", "--frames", str(tmp_path), "--out", str(tmp_path / "e.csv")]) == 3
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert "otnrwkv" in capsys.readouterr().out
