"""End-to-end model: per-modality encoders, event aggregation, fusion, attribute head."""

from __future__ import annotations

from contextlib import contextmanager

import torch
from torch import nn

from .config import TrainConfig
from .errors import BadConfig, OTNError, ShapeMismatch
from .fusion import aggregate_event_tokens, make_fusion
from .head import AttributeHead, AttributePrediction
from .rwkv import Encoder, EncoderConfig, PatchEmbed


class PARModel(nn.Module):
    def __init__(self, cfg: TrainConfig, num_attributes: int):
        super().__init__()
        if num_attributes < 1:
            raise BadConfig("model needs at least one attribute")
        self.cfg = cfg
        self.num_attributes = num_attributes
        C, N = cfg.embed_dim, cfg.num_tokens
        enc_cfg = EncoderConfig(cfg.depth, C, cfg.patch_size, cfg.expansion_ratio, cfg.layer_norm_epsilon,
                                cfg.final_norm)
        if cfg.rgb_frames:
            self.rgb_embed = PatchEmbed(N, C, cfg.patch_size)
            self.rgb_encoder = Encoder(enc_cfg)
        if cfg.event_frames:
            self.event_embed = PatchEmbed(N, C, cfg.patch_size)
            self.event_encoder = Encoder(enc_cfg)
        if cfg.rgb_frames and cfg.event_frames:
            self.fusion = make_fusion(cfg.fusion, C, cfg.layer_norm_epsilon, cfg.fusion_literal)
        self.head = AttributeHead(C, num_attributes)

    def encode_rgb(self, rgb: torch.Tensor) -> torch.Tensor:
        tokens = self.rgb_encoder(self.rgb_embed(rgb), self.cfg.grid)
        return tokens.mean(dim=-3)

    def encode_events(self, events: torch.Tensor) -> torch.Tensor:
        """Encoded event tokens before aggregation, ``(B, T_e, N, C)``."""
        return self.event_encoder(self.event_embed(events), self.cfg.grid)

    def aggregate(self, event_tokens: torch.Tensor, return_masks: bool = False):
        return aggregate_event_tokens(event_tokens, self.cfg.aggregation, self.cfg.filter_threshold,
                                      self.cfg.num_tokens, return_masks=return_masks)

    def fused_tokens(self, rgb: torch.Tensor | None, events: torch.Tensor | None) -> torch.Tensor:
        cfg = self.cfg
        rgb_tokens = ev_tokens = None
        if cfg.rgb_frames:
            _check_frames("rgb", rgb, cfg.rgb_frames, cfg)
            with _attributed("rgb encoder"):
                rgb_tokens = self.encode_rgb(rgb)
        if cfg.event_frames:
            _check_frames("event", events, cfg.event_frames, cfg)
            with _attributed("event encoder"):
                ev_tokens = self.encode_events(events)
            with _attributed(f"aggregation ({cfg.aggregation})"):
                ev_tokens = self.aggregate(ev_tokens)
        if rgb_tokens is None:
            return ev_tokens
        if ev_tokens is None:
            return rgb_tokens
        with _attributed(f"fusion ({cfg.fusion})"):
            return self.fusion(rgb_tokens, ev_tokens, cfg.grid)

    def forward(self, rgb: torch.Tensor | None, events: torch.Tensor | None) -> AttributePrediction:
        return self.head(self.fused_tokens(rgb, events))


@contextmanager
def _attributed(where: str):
    try:
        yield
    except OTNError as exc:
        exc.args = (f"{where}: {exc}",)
        raise


def _check_frames(name, frames, expected, cfg):
    if frames is None:
        raise ShapeMismatch(f"{name} frames missing")
    shape = tuple(frames.shape[-4:])
    want = (expected, cfg.image_h, cfg.image_w, 3)
    if shape != want:
        raise ShapeMismatch(f"{name} frames {shape}, config expects {want}")


def assemble_model(cfg: TrainConfig, num_attributes: int) -> PARModel:
    return PARModel(cfg, num_attributes)


def forward_pipeline(model: PARModel, rgb_frames, event_frames, cfg: TrainConfig | None = None) -> AttributePrediction:
    if cfg is not None and cfg != model.cfg:
        raise BadConfig("configuration differs from the one the model was assembled with")
    return model(rgb_frames, event_frames)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
