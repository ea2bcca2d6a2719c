"""Instruction editing as diptych inpainting.

The source goes in the left panel, the right panel is masked for generation,
and the instruction is wrapped in a fixed descriptive template. Sampling
re-anchors the left panel every step, so the output's left half reproduces the
source and the right half is the edit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core.flow import Condition, euler_sample, make_condition, recompose_keep  # noqa: F401
from .core.patch import DimensionMismatch
from .text import IC_TEMPLATE, null_prompt, tokenize


@dataclass(frozen=True)
class Diptych:
    image: np.ndarray  # (H, 2W, 3)
    keep_mask: np.ndarray  # (H, 2W), 0 = preserve, 1 = generate


@dataclass(frozen=True)
class EditRequest:
    source: np.ndarray
    instruction: str
    seed: int = 0
    n_steps: int = 20
    guidance: float = 1.0


@dataclass
class EditResult:
    edited: np.ndarray
    full_diptych: np.ndarray
    seed: int
    steps: int
    nfe_consumed: int
    prompt: str = ""
    provenance: dict = field(default_factory=dict)


def make_ic_prompt(instruction: str) -> str:
    if not instruction:
        raise ValueError("empty instruction")
    # str.replace, not format: braces inside the instruction pass through verbatim.
    return IC_TEMPLATE.replace("{instruction}", instruction)


def fixed_keep_mask(height: int, width: int) -> np.ndarray:
    m = np.zeros((height, 2 * width), dtype=np.float32)
    m[:, width:] = 1.0
    return m


def make_diptych(source: np.ndarray, image_size: tuple[int, int] | None = None) -> Diptych:
    source = np.asarray(source, dtype=np.float32)
    if source.ndim != 3 or source.shape[-1] != 3:
        raise DimensionMismatch(f"expected an (H, W, 3) image, got {source.shape}")
    h, w, _ = source.shape
    if image_size is not None and (h, w) != tuple(image_size):
        raise DimensionMismatch(f"source {h}x{w} does not match model size {image_size}")
    img = np.zeros((h, 2 * w, 3), dtype=np.float32)
    img[:, :w] = source
    return Diptych(image=img, keep_mask=fixed_keep_mask(h, w))


def request_noise(seed: int, num_tokens: int, token_dim: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(num_tokens, token_dim, generator=gen)


def prompt_for(instruction: str, use_ic_prompt: bool = True) -> str:
    return make_ic_prompt(instruction) if use_ic_prompt else instruction


def edit_batch(model, requests: list[EditRequest], use_ic_prompt: bool = True) -> list[EditResult]:
    """Run several edits through one batched sampler call.

    All requests must share ``n_steps`` and ``guidance``.
    """
    if not requests:
        return []
    cfg = model.config
    steps = {r.n_steps for r in requests}
    guid = {r.guidance for r in requests}
    if len(steps) != 1 or len(guid) != 1:
        raise ValueError("batched requests must share n_steps and guidance")
    n_steps, guidance = steps.pop(), guid.pop()
    dips = [make_diptych(r.source, cfg.image_size) for r in requests]
    prompts = [prompt_for(r.instruction, use_ic_prompt) for r in requests]
    ids = np.stack([tokenize(p, cfg.max_text_len) for p in prompts])
    dtype = next(model.parameters()).dtype
    cond = make_condition(
        np.stack([d.image for d in dips]), np.stack([d.keep_mask for d in dips]), ids, cfg.patch_size, dtype
    )
    noise = torch.stack([request_noise(r.seed, cfg.num_image_tokens, cfg.token_pixels) for r in requests]).to(dtype)
    null = torch.as_tensor(null_prompt(cfg.max_text_len))[None]
    was_training = model.training
    model.eval()
    try:
        out = euler_sample(model, noise, cond, n_steps, guidance, null_text=null)
    finally:
        model.train(was_training)
    w = cfg.image_size[1]
    results = []
    for r, img, prompt in zip(requests, out, prompts):
        img = img.astype(np.float32)
        results.append(
            EditResult(
                edited=img[:, w:].copy(),
                full_diptych=img,
                seed=r.seed,
                steps=n_steps,
                nfe_consumed=n_steps,
                prompt=prompt,
                provenance={"clamped": True, "guidance": guidance, "ic_prompt": use_ic_prompt},
            )
        )
    return results


def edit(model, request: EditRequest, use_ic_prompt: bool = True) -> EditResult:
    """Edit one image: ``request.source`` + instruction -> right panel of the sampled diptych."""
    return edit_batch(model, [request], use_ic_prompt)[0]


def multi_turn(model, source: np.ndarray, instructions: list[str], seed: int = 0, n_steps: int = 20,
               guidance: float = 1.0, pin_seed: bool = False, use_ic_prompt: bool = True) -> list[EditResult]:
    """Chain edits: turn ``i`` edits the output of turn ``i-1`` (seed ``seed + i`` unless pinned)."""
    if not instructions:
        raise ValueError("need at least one instruction")
    results = []
    current = np.asarray(source, dtype=np.float32)
    for i, instr in enumerate(instructions):
        req = EditRequest(current, instr, seed if pin_seed else seed + i, n_steps, guidance)
        res = edit(model, req, use_ic_prompt)
        results.append(res)
        current = res.edited
    return results
