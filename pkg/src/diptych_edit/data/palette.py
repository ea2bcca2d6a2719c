"""Closed vocabulary of the procedural scenes: colors, shapes, grid geometry."""

import numpy as np

# RGB in [0, 1]. Chosen far apart so a 0.1 tolerance never confuses two entries.
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
}
BACKGROUNDS = {
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
    "black": (0.0, 0.0, 0.0),
}
SHAPES = ("square", "circle", "triangle")
STYLES = ("grayscale", "invert")
TASK_TYPES = ("removal", "addition", "swap", "attribute_mod", "style")

PANEL = 16  # pixels per panel side
GRID = 4  # placement grid is GRID x GRID cells
CELL = PANEL // GRID
MAX_OBJECTS = 3

_SHAPE_MASKS = {
    "square": np.ones((4, 4), dtype=bool),
    "circle": np.array(
        [[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=bool
    ),
    "triangle": np.array(
        [[1, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool
    ),
}


def shape_mask(shape: str) -> np.ndarray:
    return _SHAPE_MASKS[shape]


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])
