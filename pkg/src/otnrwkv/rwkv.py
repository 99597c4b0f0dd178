"""Vision-RWKV encoder pieces.

Tokens are laid out as ``(..., T, N, C)`` with an accompanying ``grid = (h, w)``
where ``N = h * w`` in row-major order.  Bi-WKV runs over the flattened
``T * N`` axis (frame-major), so a multi-frame clip is scanned as one sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadChannelCount, IndivisibleGeometry, NonFiniteGradient, ShapeMismatch

# stand-in for log(0) in the running-max exponent; finite so that float32 stays NaN-free
_LOG_ZERO = -1e30


@dataclass
class EncoderConfig:
    depth: int = 2
    embed_dim: int = 64
    patch_size: int = 16
    expansion_ratio: int = 4
    layer_norm_epsilon: float = 1e-5
    final_norm: bool = True

    def __post_init__(self):
        if self.depth < 0:
            raise ShapeMismatch(f"depth must be >= 0, got {self.depth}")
        if self.embed_dim % 4:
            raise BadChannelCount(f"embed_dim {self.embed_dim} is not divisible by 4")


def _trunc_normal(*shape, std=None):
    # fan-in scaling keeps activations O(1) at small widths
    if std is None:
        std = shape[0] ** -0.5
    t = torch.empty(*shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)
    return t


# ---------------------------------------------------------------------------
# Functional primitives
# ---------------------------------------------------------------------------

def grid_for(height: int, width: int, patch_size: int) -> tuple[int, int]:
    if height % patch_size or width % patch_size:
        raise IndivisibleGeometry(f"patch size {patch_size} does not divide {height}x{width}")
    return height // patch_size, width // patch_size


def patchify(frames: torch.Tensor, projection: torch.Tensor, bias: torch.Tensor,
             position: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(..., T, H, W, 3)`` frames to ``(..., T, N, C)`` tokens.

    Patches are flattened in (row, column, channel) order, projected with the
    ``(p*p*3, C)`` matrix, then bias and the per-token position embedding are added.
    """
    *lead, H, W, ch = frames.shape
    p = patch_size
    h, w = grid_for(H, W, p)
    x = frames.reshape(*lead, h, p, w, p, ch)
    nd = len(lead)
    x = x.permute(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    x = x.reshape(*lead, h * w, p * p * ch)
    return x @ projection + bias + position


def _shift(x: torch.Tensor, dim: int, offset: int) -> torch.Tensor:
    """out[i] = x[i - offset] along ``dim`` with zero fill."""
    n = x.shape[dim]
    if n <= abs(offset):
        return torch.zeros_like(x)
    pad_shape = list(x.shape)
    pad_shape[dim] = abs(offset)
    pad = x.new_zeros(pad_shape)
    if offset > 0:
        return torch.cat([pad, x.narrow(dim, 0, n - offset)], dim)
    return torch.cat([x.narrow(dim, -offset, n + offset), pad], dim)


def q_shift(tokens: torch.Tensor, mix: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Quad-directional token shift interpolated with the input.

    Channel quarters take the left, right, up and down neighbour respectively
    (zero outside the grid); the result is ``x * (1 - mix) + shifted * mix``.
    """
    C = tokens.shape[-1]
    if C % 4:
        raise BadChannelCount(f"channel count {C} is not divisible by 4")
    h, w = grid
    if tokens.shape[-2] != h * w:
        raise ShapeMismatch(f"{tokens.shape[-2]} tokens do not fill a {h}x{w} grid")
    x = tokens.reshape(*tokens.shape[:-2], h, w, C)
    q = C // 4
    shifted = torch.cat([
        _shift(x[..., :q], -2, 1),           # left neighbour
        _shift(x[..., q:2 * q], -2, -1),     # right neighbour
        _shift(x[..., 2 * q:3 * q], -3, 1),  # upper neighbour
        _shift(x[..., 3 * q:], -3, -1),      # lower neighbour
    ], dim=-1).reshape(tokens.shape)
    return tokens + (shifted - tokens) * mix


def _scan(k: list[torch.Tensor], v: list[torch.Tensor], step: torch.Tensor, order):
    """Running decayed sums over ``order``, stored in (num, den, exponent) form.

    Entry ``t`` of the result covers the tokens visited strictly before ``t``.
    Exponent offsets are detached: the represented value does not depend on them.
    """
    zero = torch.zeros_like(k[0])
    num, den, exp_ = zero, zero, torch.full_like(zero, _LOG_ZERO)
    out = {}
    for t in order:
        out[t] = (num, den, exp_)
        decayed = exp_ - step
        q = torch.maximum(decayed, k[t]).detach()
        e_old = torch.exp(decayed - q)
        e_new = torch.exp(k[t] - q)
        num = e_old * num + e_new * v[t]
        den = e_old * den + e_new
        exp_ = q
    return [out[t] for t in range(len(k))]


def bi_wkv(k: torch.Tensor, v: torch.Tensor, decay_w: torch.Tensor, bonus_u: torch.Tensor) -> torch.Tensor:
    """Bidirectional WKV over the second-to-last axis in O(M * C).

    ``out_t = (sum_{i!=t} e^{-(|t-i|-1) w / M + k_i} v_i + e^{u + k_t} v_t) / (same without v)``,
    evaluated by a forward and a backward recurrence with running-max exponents.
    """
    if k.shape != v.shape:
        raise ShapeMismatch(f"K {tuple(k.shape)} and V {tuple(v.shape)} differ")
    M = k.shape[-2]
    if M == 0:
        raise ShapeMismatch("bi_wkv needs at least one token")
    step = decay_w / M
    ks, vs = k.unbind(-2), v.unbind(-2)
    fwd = _scan(ks, vs, step, range(M))
    bwd = _scan(ks, vs, step, range(M - 1, -1, -1))
    f_num, f_den, f_exp = (torch.stack(c, -2) for c in zip(*fwd))
    b_num, b_den, b_exp = (torch.stack(c, -2) for c in zip(*bwd))
    self_exp = bonus_u + k
    o = torch.maximum(torch.maximum(f_exp, b_exp), self_exp).detach()
    ef, eb, es = torch.exp(f_exp - o), torch.exp(b_exp - o), torch.exp(self_exp - o)
    return (ef * f_num + eb * b_num + es * v) / (ef * f_den + eb * b_den + es)


def squared_relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x) ** 2


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class PatchEmbed(nn.Module):
    def __init__(self, num_tokens: int, embed_dim: int, patch_size: int, in_channels: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.projection = nn.Parameter(_trunc_normal(patch_size * patch_size * in_channels, embed_dim))
        self.bias = nn.Parameter(torch.zeros(embed_dim))
        self.position_embedding = nn.Parameter(_trunc_normal(num_tokens, embed_dim, std=0.02))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        N = self.position_embedding.shape[0]
        h, w = grid_for(frames.shape[-3], frames.shape[-2], self.patch_size)
        if h * w != N:
            raise ShapeMismatch(f"frames give {h * w} patches, embedding expects {N}")
        return patchify(frames, self.projection, self.bias, self.position_embedding, self.patch_size)


class SpatialMix(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.W_R = nn.Parameter(_trunc_normal(dim, dim))
        self.W_K = nn.Parameter(_trunc_normal(dim, dim))
        self.W_V = nn.Parameter(_trunc_normal(dim, dim))
        self.W_O = nn.Parameter(_trunc_normal(dim, dim))
        self.shift_mix_r = nn.Parameter(torch.full((dim,), 0.5))
        self.shift_mix_k = nn.Parameter(torch.full((dim,), 0.5))
        self.shift_mix_v = nn.Parameter(torch.full((dim,), 0.5))
        self.decay_w = nn.Parameter(torch.linspace(-1.0, -0.1, dim))
        self.bonus_u = nn.Parameter(torch.zeros(dim))
        self.ln_out = nn.LayerNorm(dim, eps=eps)

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        r = q_shift(x, self.shift_mix_r, grid) @ self.W_R
        k = q_shift(x, self.shift_mix_k, grid) @ self.W_K
        v = q_shift(x, self.shift_mix_v, grid) @ self.W_V
        T, N, C = x.shape[-3:]
        flat = x.shape[:-3] + (T * N, C)
        wkv = bi_wkv(k.reshape(flat), v.reshape(flat), self.decay_w, self.bonus_u).reshape(x.shape)
        return self.ln_out((torch.sigmoid(r) * wkv) @ self.W_O)


class ChannelMix(nn.Module):
    def __init__(self, dim: int, expansion_ratio: int = 4):
        super().__init__()
        hidden = expansion_ratio * dim
        self.W_R = nn.Parameter(_trunc_normal(dim, dim))
        self.W_K = nn.Parameter(_trunc_normal(dim, hidden))
        self.W_V = nn.Parameter(_trunc_normal(hidden, dim))
        self.W_O = nn.Parameter(_trunc_normal(dim, dim))
        self.shift_mix_r = nn.Parameter(torch.full((dim,), 0.5))
        self.shift_mix_k = nn.Parameter(torch.full((dim,), 0.5))

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        r = q_shift(x, self.shift_mix_r, grid) @ self.W_R
        k = q_shift(x, self.shift_mix_k, grid) @ self.W_K
        v = squared_relu(k) @ self.W_V
        return (torch.sigmoid(r) * v) @ self.W_O


class Block(nn.Module):
    """Pre-norm residual block: spatial mix, then channel mix."""

    def __init__(self, dim: int, expansion_ratio: int = 4, eps: float = 1e-5):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=eps)
        self.spatial = SpatialMix(dim, eps)
        self.ln2 = nn.LayerNorm(dim, eps=eps)
        self.channel = ChannelMix(dim, expansion_ratio)

    def forward(self, x, grid):
        x = x + self.spatial(self.ln1(x), grid)
        return x + self.channel(self.ln2(x), grid)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.expansion_ratio, cfg.layer_norm_epsilon) for _ in range(cfg.depth))
        # LayerNorm after the last block, as in VRWKV backbones; absent when depth is 0
        self.ln_final = (nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_epsilon)
                         if cfg.final_norm and cfg.depth else None)

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        return encoder_forward(x, self.blocks, grid, self.ln_final)


def encoder_forward(x: torch.Tensor, blocks, grid: tuple[int, int], final_norm: nn.Module | None = None) -> torch.Tensor:
    for block in blocks:
        x = block(x, grid)
    if final_norm is not None:
        x = final_norm(x)
    return x


def parameter_gradients(loss: torch.Tensor, params: nn.Module | Mapping[str, torch.Tensor],
                        retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss for every named parameter.

    Parameters the loss does not reach get an exact zero gradient.
    """
    named = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
    names = [n for n, p in named.items() if p.requires_grad]
    tensors = [named[n] for n in names]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=retain_graph)
    else:
        grads = [None] * len(tensors)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"gradient of {name} contains NaN/Inf")
        out[name] = g
    return out
