"""In-memory training corpora built from procedural scenes.

The base model learns two things before any editing data is seen: copying a
scene from the left panel to the right (``copy`` records) and drawing objects
from a caption where part of the canvas is hidden in both panels (``inpaint``
records). Edit fine-tuning then uses diptychs of (source | target) under the
fixed right-panel mask.
"""

from __future__ import annotations

import numpy as np

from ..text import tokenize
from .palette import CELL, GRID, PANEL
from .scenes import EditPair, describe, gen_scene, render

CAPTION_PREFIX = "A diptych with two side-by-side images of the same scene. "


def right_panel_mask() -> np.ndarray:
    m = np.zeros((PANEL, 2 * PANEL), dtype=np.float32)
    m[:, PANEL:] = 1.0
    return m


def gen_pretrain_record(rng: np.random.Generator, inpaint_prob: float = 0.5):
    """(diptych, keep_mask, caption) for one identical-scene diptych."""
    scene = gen_scene(rng)
    img = render(scene)
    dip = np.concatenate([img, img], axis=1)
    mask = right_panel_mask()
    if rng.random() < inpaint_prob:
        # Hide random cells of the left panel too, so the caption must fill them.
        n = int(rng.integers(1, GRID * GRID // 2 + 1))
        cells = rng.choice(GRID * GRID, size=n, replace=False)
        for c in cells:
            r, col = divmod(int(c), GRID)
            mask[r * CELL : (r + 1) * CELL, col * CELL : (col + 1) * CELL] = 1.0
    return dip, mask, CAPTION_PREFIX + describe(scene)


def pretrain_corpus(n: int, seed: int, max_text_len: int):
    rng = np.random.default_rng(seed)
    dips, masks, texts = [], [], []
    for _ in range(n):
        d, m, cap = gen_pretrain_record(rng)
        dips.append(d)
        masks.append(m)
        texts.append(tokenize(cap, max_text_len))
    return np.stack(dips), np.stack(masks), np.stack(texts)


def edit_corpus(pairs: list[EditPair], max_text_len: int, use_ic_prompt: bool = True):
    from ..incontext import prompt_for

    dips = np.stack([np.concatenate([p.source, p.target], axis=1) for p in pairs])
    masks = np.repeat(right_panel_mask()[None], len(pairs), axis=0)
    texts = np.stack([tokenize(prompt_for(p.instruction, use_ic_prompt), max_text_len) for p in pairs])
    return dips, masks, texts
