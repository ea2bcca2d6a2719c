"""Training loops for the base model (pretraining) and adapters (fine-tuning)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from ..config import ModelConfig, TrainConfig
from ..text import PAD_ID
from .dit import DiT
from .flow import Condition, fm_loss
from .patch import patchify, to_latent

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TokenSet:
    """Training examples in token form.

    ``x1`` holds the clean diptych latents (n, N, p·p·3), ``mask`` the
    generate-mask tokens (n, N, p·p), ``text`` the prompt ids (n, M). The
    masked source condition is derived from ``x1`` and ``mask``.
    """

    x1: np.ndarray
    mask: np.ndarray
    text: np.ndarray

    def __len__(self):
        return len(self.x1)

    @classmethod
    def from_pixels(cls, diptychs: np.ndarray, keep_masks: np.ndarray, text: np.ndarray, patch_size: int):
        x1 = patchify(to_latent(np.asarray(diptychs, dtype=np.float32)), patch_size).astype(np.float32)
        mask = patchify(np.asarray(keep_masks, dtype=np.float32)[..., None], patch_size).astype(np.float32)
        return cls(x1=x1, mask=mask, text=np.asarray(text, dtype=np.int64))

    def batch(self, idx: np.ndarray, dtype=torch.float32) -> tuple[torch.Tensor, Condition]:
        x1 = torch.as_tensor(self.x1[idx], dtype=dtype)
        mask = torch.as_tensor(self.mask[idx], dtype=dtype)
        keep = 1.0 - mask.repeat_interleave(3, dim=-1)
        return x1, Condition(cond=x1 * keep, mask=mask, text=torch.as_tensor(self.text[idx]), source=x1)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to 10% of the peak rate."""
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(1.0, frac))))


def train(model: torch.nn.Module, data: TokenSet, cfg: TrainConfig, params: list[torch.nn.Parameter],
          log_every: int = 200, callback=None) -> list[float]:
    """Optimize ``params`` on the flow-matching loss; returns the per-step losses.

    Deterministic for a fixed ``cfg.seed``: batch indices come from a numpy
    generator and noise/time draws from a dedicated torch generator.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(0.9, 0.99))
    model.train()
    dtype = params[0].dtype if params else torch.float32
    losses = []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, cfg)
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        x1, cond = data.batch(idx, dtype)
        drop = torch.as_tensor(rng.random(len(idx)) < cfg.null_prompt_prob)
        if drop.any():
            cond = cond.with_text(torch.where(drop[:, None], torch.full_like(cond.text, PAD_ID), cond.text))
        loss = fm_loss(model, x1, cond, generator=gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergence(f"non-finite loss {value} at step {step} (lr {lr_at(step, cfg):.3g})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        losses.append(value)
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.5f", step, float(np.mean(losses[-log_every:])))
        if callback is not None:
            callback(step, value)
    model.eval()
    return losses


def init_model(config: ModelConfig, seed: int) -> DiT:
    torch.manual_seed(seed)
    return DiT(config)


def pretrain(config: ModelConfig, data: TokenSet, train_cfg: TrainConfig, **kw) -> tuple[DiT, list[float]]:
    """Train a base model from scratch on ``data``."""
    model = init_model(config, train_cfg.seed)
    losses = train(model, data, train_cfg, list(model.parameters()), **kw)
    return model, losses


@torch.no_grad()
def evaluate_loss(model, data: TokenSet, seed: int = 0, batch_size: int = 256) -> float:
    """Mean flow-matching loss over ``data`` with fixed noise/time draws."""
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    dtype = next(model.parameters()).dtype
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x1, cond = data.batch(idx, dtype)
        total += float(fm_loss(model, x1, cond, generator=gen)) * len(idx)
        count += len(idx)
    return total / count
