"""Rectified-flow objective and Euler sampler with inpainting re-anchoring.

Convention: ``x_t = t * data + (1 - t) * noise`` with ``t = 0`` pure noise, and
the regression target is the straight-line velocity ``data - noise``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dit import check_finite
from .patch import patchify, to_latent, to_pixels, unpatchify


@dataclass
class Condition:
    """Everything the network sees besides ``x_t`` and ``t``.

    All token tensors are batched: ``cond``/``source`` (B, N, p·p·3),
    ``mask`` (B, N, p·p) with 1 = generate and 0 = keep, ``text`` (B, M).
    """

    cond: torch.Tensor
    mask: torch.Tensor
    text: torch.Tensor
    source: torch.Tensor

    def pixel_mask(self) -> torch.Tensor:
        """Keep-mask broadcast to latent channels."""
        return self.mask.repeat_interleave(3, dim=-1)

    def with_text(self, text: torch.Tensor) -> "Condition":
        return Condition(self.cond, self.mask, text, self.source)

    def index(self, idx) -> "Condition":
        return Condition(self.cond[idx], self.mask[idx], self.text[idx], self.source[idx])


@dataclass
class FlowState:
    x_t: torch.Tensor
    t: torch.Tensor
    noise: torch.Tensor
    condition: Condition


def make_condition(diptych: np.ndarray, keep_mask: np.ndarray, text_ids: np.ndarray, patch_size: int,
                   dtype=torch.float32) -> Condition:
    """Build a batched condition from pixel diptychs (B, H, 2W, 3), masks (B, H, 2W) and ids (B, M)."""
    latent = to_latent(np.asarray(diptych, dtype=np.float64))
    mask = np.asarray(keep_mask, dtype=np.float64)
    source = patchify(latent, patch_size)
    m = patchify(mask[..., None], patch_size)
    cond = source * (1.0 - np.repeat(m, 3, axis=-1))
    return Condition(
        cond=torch.as_tensor(cond, dtype=dtype),
        mask=torch.as_tensor(m, dtype=dtype),
        text=torch.as_tensor(np.asarray(text_ids), dtype=torch.long),
        source=torch.as_tensor(source, dtype=dtype),
    )


def dit_forward(model, state: FlowState) -> torch.Tensor:
    c = state.condition
    t = state.t
    if t.ndim == 0:
        t = t.expand(state.x_t.shape[0])
    v = model(state.x_t, t, c.cond, c.mask, c.text)
    return check_finite(v, "velocity")


def fm_loss(model, x1: torch.Tensor, condition: Condition, t: torch.Tensor | None = None,
            noise: torch.Tensor | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean squared velocity error over every token of the diptych (both panels)."""
    if x1.shape[0] == 0:
        raise ValueError("empty batch")
    if noise is None:
        noise = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    if t is None:
        t = torch.rand(x1.shape[0], generator=generator, dtype=x1.dtype)
    tt = t.reshape(-1, *([1] * (x1.ndim - 1)))
    x_t = tt * x1 + (1 - tt) * noise
    v = model(x_t, t, condition.cond, condition.mask, condition.text)
    return ((v - (x1 - noise)) ** 2).mean()


def recompose_keep(x_t, source_latent, noise, t: float, keep_mask):
    """Put the exact interpolant back on the keep region (mask 0); leave the edit region alone."""
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    anchored = t * source_latent + (1.0 - t) * noise
    if isinstance(x_t, torch.Tensor):
        return torch.where(keep_mask > 0.5, x_t, anchored)
    return np.where(np.asarray(keep_mask) > 0.5, x_t, anchored)


def guided_velocity(model, x, t: float, condition: Condition, guidance: float, null_text: torch.Tensor | None):
    b = x.shape[0]
    tt = torch.full((b,), t, dtype=x.dtype)
    c = condition
    if guidance == 1.0 or null_text is None:
        return check_finite(model(x, tt, c.cond, c.mask, c.text), "velocity")
    both = model(
        torch.cat([x, x]),
        torch.cat([tt, tt]),
        torch.cat([c.cond, c.cond]),
        torch.cat([c.mask, c.mask]),
        torch.cat([c.text, null_text.expand_as(c.text)]),
    )
    v_cond, v_null = both[:b], both[b:]
    return check_finite(v_null + guidance * (v_cond - v_null), "velocity")


@torch.no_grad()
def euler_sample(model, noise: torch.Tensor, condition: Condition, n_steps: int, guidance: float = 1.0,
                 null_text: torch.Tensor | None = None, image_hw: tuple[int, int] | None = None,
                 patch_size: int | None = None, return_latent: bool = False):
    """Integrate dx/dt = v(x, t) from noise (t=0) to data (t=1) in ``n_steps`` uniform steps.

    After every step the keep region is re-anchored to the flow interpolant of
    the source, so at ``t = 1`` it equals the source latent exactly. Returns the
    clamped pixel diptych (B, H, 2W, 3) as numpy, or the raw final latent tokens
    with ``return_latent``.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    n = int(n_steps)
    mask = condition.pixel_mask()
    x = recompose_keep(noise, condition.source, noise, 0.0, mask)
    dt = 1.0 / n
    for i in range(n):
        v = guided_velocity(model, x, i / n, condition, guidance, null_text)
        x = x + dt * v
        x = recompose_keep(x, condition.source, noise, (i + 1) / n, mask)
    if return_latent:
        return x
    if image_hw is None or patch_size is None:
        cfg = model.config
        image_hw = (cfg.image_size[0], 2 * cfg.image_size[1])
        patch_size = cfg.patch_size
    img = unpatchify(to_pixels(x.to(torch.float64)), patch_size, *image_hw)
    return img.clamp(0.0, 1.0).numpy()
