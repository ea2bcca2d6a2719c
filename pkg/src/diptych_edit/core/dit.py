"""Toy diffusion transformer with joint text/image attention.

Text tokens and image patch tokens are concatenated and processed by shared
pre-norm transformer blocks. Queries and keys carry 3-axis rotary positions
(text index, patch row, patch col); the right panel of a diptych is told apart
from the left purely by its column offset. A sinusoidal embedding of the flow
time ``t`` is added to every token after projection.

Image tokens enter as the channel concatenation of the noisy latent patch, the
masked source patch and the keep-mask patch; the network predicts the flow
velocity for the image tokens only.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..config import ModelConfig
from .patch import image_positions, text_positions
from .rope import apply_rotation, rope_angles


class NonFiniteError(FloatingPointError):
    pass


class AdaptableLinear(nn.Module):
    """``nn.Linear`` with an optional adapter slot (LoRA or MoE-LoRA)."""

    def __init__(self, d_in: int, d_out: int, role: str, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias)
        self.role = role
        self.adapter: nn.Module | None = None

    def forward(self, x):
        y = self.base(x)
        if self.adapter is not None:
            y = self.adapter(y, x)
        return y


def attention(q, k, v):
    """softmax(q kᵀ / sqrt(d)) v over the last two dims."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


class JointAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = AdaptableLinear(dim, dim, "q")
        self.k = AdaptableLinear(dim, dim, "k")
        self.v = AdaptableLinear(dim, dim, "v")
        self.out = AdaptableLinear(dim, dim, "out")

    def split(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(1, 2)

    def mix(self, x, cos=None, sin=None):
        """Attention over all tokens, before the output projection."""
        q, k, v = self.split(self.q(x)), self.split(self.k(x)), self.split(self.v(x))
        if cos is not None:
            q, k = apply_rotation(q, cos, sin), apply_rotation(k, cos, sin)
        o = attention(q, k, v)
        b, h, t, dh = o.shape
        return o.transpose(1, 2).reshape(b, t, h * dh)

    def forward(self, x, cos=None, sin=None):
        return self.out(self.mix(x, cos, sin))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = AdaptableLinear(dim, hidden, "fc1")
        self.fc2 = AdaptableLinear(hidden, dim, "fc2")

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = JointAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x, cos=None, sin=None):
        x = x + self.attn(self.norm1(x), cos, sin)
        return x + self.mlp(self.norm2(x))


def timestep_features(t: torch.Tensor, n: int) -> torch.Tensor:
    half = n // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([ang.cos(), ang.sin()], dim=-1)


class DiT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        p2 = c.patch_size * c.patch_size
        self.text_embed = nn.Embedding(c.text_vocab, c.dim)
        self.patch_embed = nn.Linear(p2 * 7, c.dim)
        self.time_embed = nn.Sequential(nn.Linear(c.time_freqs, c.dim), nn.SiLU(), nn.Linear(c.dim, c.dim))
        self.blocks = nn.ModuleList(Block(c.dim, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm_out = nn.LayerNorm(c.dim, eps=1e-6)
        self.head = nn.Linear(c.dim, p2 * 3)
        self.adapter_config = None
        rows, cols = c.grid
        pos = np.concatenate([text_positions(c.max_text_len), image_positions(rows, cols)])
        ang = rope_angles(torch.from_numpy(pos), c.rope_axes, c.rope_theta)
        self.register_buffer("rope_cos", ang.cos(), persistent=False)
        self.register_buffer("rope_sin", ang.sin(), persistent=False)

    def embed(self, x_t, t, cond, mask, text_ids):
        img = self.patch_embed(torch.cat([x_t, cond, mask], dim=-1))
        txt = self.text_embed(text_ids)
        temb = self.time_embed(timestep_features(t.to(img.dtype), self.config.time_freqs))
        return txt + temb[:, None, :], img + temb[:, None, :]

    def forward(self, x_t, t, cond, mask, text_ids):
        """Velocity for every image token.

        Shapes: x_t, cond (B, N, p·p·3); mask (B, N, p·p); t (B,); text_ids (B, M).
        """
        txt, img = self.embed(x_t, t, cond, mask, text_ids)
        m = txt.shape[1]
        h = torch.cat([txt, img], dim=1)
        cos, sin = self._rope(m, h.dtype)
        for blk in self.blocks:
            h = blk(h, cos, sin)
        return self.head(self.norm_out(h[:, m:]))

    def _rope(self, text_len: int, dtype):
        c = self.config
        sel = torch.cat([torch.arange(text_len), torch.arange(c.max_text_len, c.max_text_len + c.num_image_tokens)])
        return self.rope_cos[sel].to(dtype), self.rope_sin[sel].to(dtype)

    def base_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if ".adapter." not in n}


def mma(text: torch.Tensor, image: torch.Tensor, attn: JointAttention, text_pos=None, image_pos=None,
        rope_axes=None, rope_theta: float = 100.0):
    """Joint attention over ``[text; image]`` returning the two parts separately.

    Projects to Q/K/V with ``attn``'s weights, applies rotary positions when
    given, and computes softmax(QKᵀ/√d_head)V per head. The output projection is
    not applied (it lives in the block, where the MoE adapter sits).
    """
    if text.shape[-1] != image.shape[-1]:
        raise ValueError(f"text dim {text.shape[-1]} != image dim {image.shape[-1]}")
    squeeze = text.ndim == 2
    if squeeze:
        text, image = text[None], image[None]
    m = text.shape[1]
    x = torch.cat([text, image], dim=1)
    cos = sin = None
    if text_pos is not None:
        pos = torch.cat([torch.as_tensor(text_pos), torch.as_tensor(image_pos)])
        axes = rope_axes or [x.shape[-1] // attn.heads // pos.shape[-1]] * pos.shape[-1]
        ang = rope_angles(pos, axes, rope_theta).to(x.dtype)
        cos, sin = ang.cos(), ang.sin()
    out = attn.mix(x, cos, sin)
    if squeeze:
        out = out[0]
        return out[:m], out[m:]
    return out[:, :m], out[:, m:]


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t
