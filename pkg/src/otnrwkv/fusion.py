"""Event-token filtering and the asymmetric RGB-Event fusion block.

The fusion kernel differs from :func:`otnrwkv.rwkv.bi_wkv` in that the decay of
each contribution is content dependent (taken from the event ``V`` projection of
the contributing token).  That breaks the constant-ratio recurrence, so the
kernel is evaluated as a stabilized softmax over an ``M x M`` exponent table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import BadTargetCount, ConfigError, LengthMismatch, ShapeMismatch, UnknownStrategy
from .rwkv import _trunc_normal, q_shift

DEFAULT_FILTER_THRESHOLD = 0.75
AGGREGATIONS = ("max", "mean", "sim")
FUSIONS = ("otn", "concat", "add", "conv1x1")


@dataclass
class FilterMask:
    keep: np.ndarray
    target_count: int

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


def token_similarity(tokens: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Pairwise cosine similarity of the rows of ``(..., N, C)``."""
    unit = tokens / (tokens.norm(dim=-1, keepdim=True) + eps)
    return unit @ unit.transpose(-1, -2)


def knp_select(sim: np.ndarray, threshold: float, target_count: int) -> np.ndarray:
    """Indices (ascending) of the ``target_count`` most representative tokens.

    A token's score is how many other tokens exceed ``threshold`` similarity to
    it; ties fall back to mean similarity to the others, then to lower index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    M = sim.shape[0]
    if not 1 <= target_count <= M:
        raise BadTargetCount(f"target_count {target_count} not in [1, {M}]")
    off = ~np.eye(M, dtype=bool)
    score = ((sim > threshold) & off).sum(axis=1)
    mean = np.where(off, sim, 0.0).sum(axis=1) / max(M - 1, 1)
    # exact ties must reach the index rule regardless of summation order
    mean = np.round(mean, 10)
    order = np.lexsort((np.arange(M), -mean, -score))
    return np.sort(order[:target_count])


def knp_filter(event_tokens: torch.Tensor, sim: torch.Tensor, threshold: float = DEFAULT_FILTER_THRESHOLD,
               target_count: int | None = None) -> tuple[torch.Tensor, FilterMask]:
    """Keep the most representative rows of an ``(M, C)`` token matrix in original order."""
    M = event_tokens.shape[-2]
    target_count = M if target_count is None else target_count
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold {threshold} outside [0, 1]")
    if target_count > M or target_count < 1:
        raise BadTargetCount(f"target_count {target_count} not in [1, {M}]")
    idx = knp_select(sim.detach().cpu().numpy(), threshold, target_count)
    keep = np.zeros(M, dtype=bool)
    keep[idx] = True
    kept = event_tokens.index_select(-2, torch.as_tensor(idx, device=event_tokens.device))
    return kept, FilterMask(keep, target_count)


def aggregate_event_tokens(event_tokens: torch.Tensor, strategy: str = "sim",
                           threshold: float = DEFAULT_FILTER_THRESHOLD, target_count: int | None = None,
                           return_masks: bool = False):
    """Reduce ``(..., T_e, N, C)`` event tokens to ``(..., N', C)``.

    ``max``/``mean`` pool over the frame axis; ``sim`` flattens frames and keeps
    ``target_count`` (default ``N``) tokens with :func:`knp_filter`.
    """
    if strategy not in AGGREGATIONS:
        raise UnknownStrategy(f"unknown aggregation {strategy!r}; expected one of {AGGREGATIONS}")
    *lead, T, N, C = event_tokens.shape
    masks = None
    if strategy == "max":
        out = event_tokens.amax(dim=-3)
    elif strategy == "mean":
        out = event_tokens.mean(dim=-3)
    else:
        target = N if target_count is None else target_count
        flat = event_tokens.reshape(-1, T * N, C)
        kept, masks = [], []
        sims = token_similarity(flat.detach())
        for tokens, sim in zip(flat, sims):
            k, m = knp_filter(tokens, sim, threshold, target)
            kept.append(k)
            masks.append(m)
        out = torch.stack(kept).reshape(*lead, target, C)
    return (out, masks) if return_masks else out


def _distance_table(M: int, dtype, device) -> torch.Tensor:
    idx = torch.arange(M, device=device)
    return ((idx[:, None] - idx[None, :]).abs() - 1).to(dtype) / M


def fusion_bi_wkv(r: torch.Tensor, k: torch.Tensor, v_decay: torch.Tensor, bonus_u: torch.Tensor,
                  literal: bool = True) -> torch.Tensor:
    """Cross-modal Bi-WKV with per-contribution decay taken from ``v_decay``.

    Literal form: exponent ``-(|t-i|-1)/M * v_i + r_i`` weighting ``k_i`` (bonus
    ``u + r_t`` on the diagonal).  Standard form puts ``k`` in the exponent and
    weights ``v_decay`` rows instead.
    """
    if not (r.shape == k.shape == v_decay.shape):
        raise ShapeMismatch(f"R {tuple(r.shape)}, K {tuple(k.shape)}, V {tuple(v_decay.shape)} differ")
    M = r.shape[-2]
    if M == 0:
        raise ShapeMismatch("fusion_bi_wkv needs at least one token")
    key, value = (r, k) if literal else (k, v_decay)
    dist = _distance_table(M, r.dtype, r.device)
    # (..., t, i, C)
    expo = -dist[..., None] * v_decay.unsqueeze(-3) + key.unsqueeze(-3)
    eye = torch.eye(M, dtype=torch.bool, device=r.device)[..., None]
    expo = torch.where(eye, (bonus_u + key).unsqueeze(-2), expo)
    weights = torch.softmax(expo, dim=-2)
    return (weights * value.unsqueeze(-3)).sum(dim=-2)


class OTNFusion(nn.Module):
    """RGB supplies gate and keys, events supply the decay and the residual."""

    def __init__(self, dim: int, eps: float = 1e-5, literal: bool = True):
        super().__init__()
        self.literal = literal
        self.rgb_shift_mix_r = nn.Parameter(torch.full((dim,), 0.5))
        self.rgb_shift_mix_k = nn.Parameter(torch.full((dim,), 0.5))
        self.event_shift_mix_v = nn.Parameter(torch.full((dim,), 0.5))
        self.W_R = nn.Parameter(_trunc_normal(dim, dim))
        self.W_K = nn.Parameter(_trunc_normal(dim, dim))
        self.W_V = nn.Parameter(_trunc_normal(dim, dim))
        self.bonus_u = nn.Parameter(torch.zeros(dim))
        self.ln = nn.LayerNorm(dim, eps=eps)

    def forward(self, rgb_tokens, event_tokens, grid):
        return otn_fuse(rgb_tokens, event_tokens, self, grid)


def otn_fuse(rgb_tokens: torch.Tensor, event_tokens: torch.Tensor, params: OTNFusion,
             grid: tuple[int, int]) -> torch.Tensor:
    """``sigmoid(R) * LN(K * fusion_bi_wkv(R, K, V)) + events`` on aligned ``(..., N, C)`` tokens.

    Filtered event tokens are laid onto the RGB grid in their kept order for the shift.
    """
    if rgb_tokens.shape != event_tokens.shape:
        raise LengthMismatch(
            f"RGB tokens {tuple(rgb_tokens.shape)} and event tokens {tuple(event_tokens.shape)} are not aligned")
    r = q_shift(rgb_tokens, params.rgb_shift_mix_r, grid) @ params.W_R
    k = q_shift(rgb_tokens, params.rgb_shift_mix_k, grid) @ params.W_K
    v = q_shift(event_tokens, params.event_shift_mix_v, grid) @ params.W_V
    b = fusion_bi_wkv(r, k, v, params.bonus_u, literal=params.literal)
    return torch.sigmoid(r) * params.ln(k * b) + event_tokens


class ConcatFusion(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(2 * dim, dim)
        std = (2 * dim) ** -0.5
        nn.init.trunc_normal_(self.proj.weight, std=std, a=-2 * std, b=2 * std)
        nn.init.zeros_(self.proj.bias)

    def forward(self, rgb_tokens, event_tokens, grid=None):
        return self.proj(torch.cat([rgb_tokens, event_tokens], dim=-1))


class AddFusion(nn.Module):
    def forward(self, rgb_tokens, event_tokens, grid=None):
        return rgb_tokens + event_tokens


class Conv1x1Fusion(nn.Module):
    """1x1 convolution across the two-modality axis, one kernel per channel."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.full((2, dim), 0.5))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, rgb_tokens, event_tokens, grid=None):
        return rgb_tokens * self.weight[0] + event_tokens * self.weight[1] + self.bias


def make_fusion(kind: str, dim: int, eps: float = 1e-5, literal: bool = True) -> nn.Module:
    if kind == "otn":
        return OTNFusion(dim, eps, literal)
    if kind == "concat":
        return ConcatFusion(dim)
    if kind == "add":
        return AddFusion()
    if kind == "conv1x1":
        return Conv1x1Fusion(dim)
    raise UnknownStrategy(f"unknown fusion {kind!r}; expected one of {FUSIONS}")
