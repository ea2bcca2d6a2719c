"""Closed-vocabulary tokenizer for the toy text encoder.

There is no subword model: text is lowercased, split into words (hyphenated
words stay whole) and mapped onto a fixed table. Anything outside the table
maps to ``<unk>``; sequences are right-padded with ``<pad>`` to a fixed length.
The all-``<pad>`` sequence doubles as the null prompt for classifier-free
guidance.
"""

from __future__ import annotations

import re

import numpy as np

from .data.palette import BACKGROUNDS, COLORS, SHAPES

IC_TEMPLATE = (
    "A diptych with two side-by-side images of the same scene. "
    "On the right, the scene is exactly the same as on the left but {instruction}."
)

PAD, UNK = "<pad>", "<unk>"

_WORDS = """
a an and as at background but column diptych everything exactly images image
is keep left of on right row same scene side-by-side the two with
remove add replace turn make invert colors grayscale empty
1 2 3 4
""".split()

VOCAB: tuple[str, ...] = tuple(
    [PAD, UNK] + sorted(set(_WORDS) | set(COLORS) | set(BACKGROUNDS) | set(SHAPES))
)
_INDEX = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = _INDEX[PAD]
UNK_ID = _INDEX[UNK]

_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, max_len: int) -> np.ndarray:
    """Map ``text`` to ``max_len`` token ids, truncating on overflow."""
    ids = [_INDEX.get(w, UNK_ID) for w in words(text)][:max_len]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def null_prompt(max_len: int) -> np.ndarray:
    return np.full(max_len, PAD_ID, dtype=np.int64)
