"""Training, evaluation and checkpoint <-> model conversion."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import DatasetManifest, load_sample_frames
from .errors import DataError, GeometryMismatch, LabelLengthMismatch, NonFiniteLoss
from .head import attribute_weights, confusion, metrics_json, wce_loss
from .model import PARModel, assemble_model

log = logging.getLogger(__name__)

EVAL_BATCH = 64


@dataclass
class ArrayDataset:
    """Model-ready arrays for a split: ``rgb (n, T_r, H, W, 3)``, ``events (n, T_e, H, W, 3)``, ``labels (n, M)``."""

    rgb: np.ndarray
    events: np.ndarray
    labels: np.ndarray
    attribute_names: list[str]
    sample_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def select_frames(self, rgb_frames: int, event_frames: int) -> "ArrayDataset":
        """View with the first ``rgb_frames`` / ``event_frames`` frames (0 drops a modality)."""
        if rgb_frames > self.rgb.shape[1] or event_frames > self.events.shape[1]:
            raise DataError("dataset holds fewer frames than requested")
        return ArrayDataset(self.rgb[:, :rgb_frames], self.events[:, :event_frames], self.labels,
                            self.attribute_names, self.sample_ids)


@dataclass
class RunReport:
    loss_trace: list[float]
    metrics: dict
    wall_clock_s: float
    config: dict
    seed: int
    steps: int

    def to_dict(self) -> dict:
        return {"loss_trace": self.loss_trace, "metrics": self.metrics, "wall_clock_s": self.wall_clock_s,
                "config": self.config, "seed": self.seed, "steps": self.steps}


def load_arrays(manifest: DatasetManifest, cfg: TrainConfig) -> ArrayDataset:
    H, W = cfg.image_h, cfg.image_w
    rgb = np.zeros((len(manifest), cfg.rgb_frames, H, W, 3), dtype=np.float32)
    events = np.zeros((len(manifest), cfg.event_frames, H, W, 3), dtype=np.float32)
    for i, rec in enumerate(manifest.records):
        rgb[i], events[i] = load_sample_frames(rec, cfg.rgb_frames, cfg.event_frames, (H, W),
                                               cfg.norm_cap, cfg.frame_interval_us)
    return ArrayDataset(rgb, events, manifest.labels(), list(manifest.attribute_names),
                        [r.sample_id for r in manifest.records])


def _as_arrays(dataset, cfg: TrainConfig) -> ArrayDataset:
    if isinstance(dataset, ArrayDataset):
        data = dataset
    else:
        data = load_arrays(dataset, cfg)
    if data.rgb.shape[1] != cfg.rgb_frames or data.events.shape[1] != cfg.event_frames:
        data = data.select_frames(cfg.rgb_frames, cfg.event_frames)
    for arr in (data.rgb, data.events):
        if arr.shape[1] and arr.shape[2:4] != (cfg.image_h, cfg.image_w):
            raise GeometryMismatch(f"data is {arr.shape[2]}x{arr.shape[3]}, config expects "
                                   f"{cfg.image_h}x{cfg.image_w}")
    return data


# ---------------------------------------------------------------------------
# Schedule and augmentation
# ---------------------------------------------------------------------------

def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    decays = sum(1 for m in cfg.milestones() if epoch >= m)
    return cfg.base_lr * cfg.lr_decay_factor ** decays


@dataclass
class AugmentRecord:
    flipped: np.ndarray
    offsets: np.ndarray


def augment_batch(rgb: np.ndarray, events: np.ndarray, rng: np.random.Generator, cfg: TrainConfig):
    """Paired flip + reflect-pad random crop; one draw per sample shared by both modalities."""
    n = max(len(rgb), len(events))
    P = cfg.crop_padding
    flipped = rng.random(n) < cfg.flip_prob
    offsets = rng.integers(0, 2 * P + 1, size=(n, 2))
    out = []
    for arr in (rgb, events):
        if arr.shape[1] == 0:
            out.append(arr)
            continue
        res = np.empty_like(arr)
        H, W = arr.shape[2:4]
        for i in range(n):
            x = arr[i][:, :, ::-1] if flipped[i] else arr[i]
            if P:
                x = np.pad(x, ((0, 0), (P, P), (P, P), (0, 0)), mode="reflect")
                dy, dx = offsets[i]
                x = x[:, dy:dy + H, dx:dx + W]
            res[i] = x
        out.append(res)
    return out[0], out[1], AugmentRecord(flipped, offsets)


# ---------------------------------------------------------------------------
# Checkpoint conversion
# ---------------------------------------------------------------------------

def model_to_checkpoint(model: PARModel, optimizer, epoch: int, attribute_names, extra=None) -> Checkpoint:
    params = {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}
    opt_state = {}
    if optimizer is not None:
        by_id = {id(p): name for name, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            buf = state.get("momentum_buffer")
            if buf is not None:
                opt_state[by_id[id(p)]] = buf.detach().cpu().numpy().copy()
    info = {"attribute_names": list(attribute_names), "num_attributes": model.num_attributes}
    info.update(extra or {})
    return Checkpoint(config=model.cfg.to_dict(), params=params, optimizer_state=opt_state,
                      epoch=epoch, seed=model.cfg.seed, extra=info)


def model_from_checkpoint(ckpt: Checkpoint) -> PARModel:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = assemble_model(cfg, int(ckpt.extra["num_attributes"]))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.params.items()}
    model.load_state_dict(state, strict=True)
    return model


def _make_optimizer(model: PARModel, cfg: TrainConfig, ckpt: Checkpoint | None = None):
    opt = torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum)
    if ckpt is not None and ckpt.optimizer_state:
        named = dict(model.named_parameters())
        for name, buf in ckpt.optimizer_state.items():
            opt.state[named[name]]["momentum_buffer"] = torch.from_numpy(buf.copy())
    return opt


# ---------------------------------------------------------------------------
# Train / evaluate
# ---------------------------------------------------------------------------

def _to_tensor(a: np.ndarray) -> torch.Tensor | None:
    return torch.from_numpy(np.ascontiguousarray(a)) if a.shape[1] else None


def predict_probabilities(model: PARModel, data: ArrayDataset, batch_size: int = EVAL_BATCH) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(data), batch_size):
            sl = slice(s, s + batch_size)
            pred = model(_to_tensor(data.rgb[sl]), _to_tensor(data.events[sl]))
            out.append(pred.probabilities.numpy())
    if not out:
        return np.zeros((0, model.num_attributes), dtype=np.float32)
    return np.concatenate(out)


def dataset_loss(model: PARModel, data: ArrayDataset, weights=None) -> float:
    probs = torch.from_numpy(predict_probabilities(model, data))
    weights = weights or attribute_weights(data.labels)
    return float(wce_loss(probs, data.labels, weights))


def evaluate_model(model: PARModel, data: ArrayDataset) -> dict:
    probs = predict_probabilities(model, data)
    return metrics_json(confusion(probs >= 0.5, data.labels), data.attribute_names)


def train(cfg: TrainConfig, dataset, init: Checkpoint | None = None, on_epoch=None) -> tuple[Checkpoint, RunReport]:
    """SGD with warm-up and step decay on weighted cross-entropy.

    Deterministic for a given ``(cfg, dataset)``.  ``max_steps`` caps the total
    number of optimizer steps; the loss trace then ends with the partial epoch.
    """
    started = time.perf_counter()
    data = _as_arrays(dataset, cfg)
    if len(data) == 0:
        raise DataError("training split is empty")
    torch.manual_seed(cfg.seed)
    model = model_from_checkpoint(init) if init is not None else assemble_model(cfg, data.labels.shape[1])
    if model.num_attributes != data.labels.shape[1]:
        raise LabelLengthMismatch(f"model has {model.num_attributes} attributes, data {data.labels.shape[1]}")
    opt = _make_optimizer(model, cfg, init)
    first_epoch = init.epoch if init is not None else 0
    weights = attribute_weights(data.labels)
    shuffle_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng, aug_rng = np.random.default_rng(shuffle_seq), np.random.default_rng(aug_seq)

    losses: list[float] = []
    steps = 0
    epoch = first_epoch
    for epoch in range(first_epoch, first_epoch + cfg.epochs):
        if cfg.max_steps and steps >= cfg.max_steps:
            break
        lr = lr_for_epoch(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = shuffle_rng.permutation(len(data))
        batch_losses = []
        for b, s in enumerate(range(0, len(data), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            rgb, events, labels = data.rgb[idx], data.events[idx], data.labels[idx]
            if cfg.augment:
                rgb, events, _ = augment_batch(rgb, events, aug_rng, cfg)
            pred = model(_to_tensor(rgb), _to_tensor(events))
            loss = wce_loss(pred.probabilities, labels, weights)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(steps, float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        losses.append(float(np.mean(batch_losses)))
        log.info("epoch %d lr %.5f loss %.5f", epoch, lr, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    done_epochs = first_epoch + len(losses)
    metrics = evaluate_model(model, data)
    ckpt = model_to_checkpoint(model, opt, done_epochs, data.attribute_names, {"steps": steps})
    report = RunReport(losses, metrics, time.perf_counter() - started, cfg.to_dict(), cfg.seed, steps)
    return ckpt, report


def evaluate(ckpt: Checkpoint, dataset) -> dict:
    """Metrics JSON (no augmentation) for a checkpoint on a manifest or preloaded arrays."""
    model = model_from_checkpoint(ckpt)
    data = _as_arrays(dataset, model.cfg)
    if data.labels.shape[1] != model.num_attributes:
        raise LabelLengthMismatch(f"checkpoint has {model.num_attributes} attributes, data {data.labels.shape[1]}")
    return evaluate_model(model, data)


def group_mA(metrics: dict, names) -> float:
    vals = [metrics["per_attribute"][n]["mA"] for n in names]
    return float(np.mean(vals)) if vals else math.nan
