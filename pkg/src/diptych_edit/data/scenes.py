"""Procedural scenes and editing pairs.

A scene is a background color plus up to three shapes placed on a 4x4 grid of
4x4-pixel cells. Editing pairs are produced by applying a semantic edit to the
scene and re-rendering, so the target differs from the source only where the
edit touched pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .palette import (
    BACKGROUNDS,
    CELL,
    COLORS,
    GRID,
    MAX_OBJECTS,
    PANEL,
    SHAPES,
    STYLES,
    TASK_TYPES,
    luminance,
    shape_mask,
)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col) on the placement grid
    size: int = CELL  # side length in pixels; shapes fill their cell

    def key(self) -> tuple[str, str]:
        return (self.color, self.shape)


@dataclass(frozen=True)
class Scene:
    background: str
    objects: tuple[SceneObject, ...] = ()
    style: str | None = None

    def validate(self) -> None:
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if len(self.objects) > MAX_OBJECTS:
            raise ValueError(f"{len(self.objects)} objects exceeds {MAX_OBJECTS}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("objects overlap on the placement grid")
        keys = [o.key() for o in self.objects]
        if len(set(keys)) != len(keys):
            raise ValueError("two objects share color and shape")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise ValueError(f"bad object {o}")
            if not (0 <= o.cell[0] < GRID and 0 <= o.cell[1] < GRID):
                raise ValueError(f"cell {o.cell} off grid")
            if o.size != CELL:
                raise ValueError(f"size {o.size} unsupported")
        if self.style not in (None, *STYLES):
            raise ValueError(f"unknown style {self.style!r}")

    def find(self, color: str, shape: str) -> SceneObject:
        for o in self.objects:
            if o.key() == (color, shape):
                return o
        raise KeyError((color, shape))


@dataclass
class EditPair:
    source: np.ndarray  # (H, W, 3) float32 in [0, 1]
    target: np.ndarray
    instruction: str
    task_type: str
    edit_region_mask: np.ndarray  # (H, W) bool, True where the edit may change pixels
    seed: int
    # Pixels the task predicate inspects (object footprint, added cell, ...).
    focus_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    corrupted: bool = False


def render(scene: Scene) -> np.ndarray:
    img = np.empty((PANEL, PANEL, 3), dtype=np.float64)
    img[:] = BACKGROUNDS[scene.background]
    for o in scene.objects:
        r, c = o.cell
        block = img[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL]
        block[shape_mask(o.shape)] = COLORS[o.color]
    if scene.style == "grayscale":
        img = np.repeat(luminance(img)[..., None], 3, axis=-1)
    elif scene.style == "invert":
        img = 1.0 - img
    return img.astype(np.float32)


def object_mask(obj: SceneObject) -> np.ndarray:
    m = np.zeros((PANEL, PANEL), dtype=bool)
    r, c = obj.cell
    m[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL] = shape_mask(obj.shape)
    return m


def cell_mask(cell: tuple[int, int]) -> np.ndarray:
    m = np.zeros((PANEL, PANEL), dtype=bool)
    r, c = cell
    m[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL] = True
    return m


def describe(scene: Scene) -> str:
    """Caption listing every object with its grid position."""
    parts = [f"a {o.color} {o.shape} at row {o.cell[0] + 1} column {o.cell[1] + 1}" for o in scene.objects]
    body = " and ".join(parts) if parts else "empty"
    return f"{body} on a {scene.background} background"


def gen_scene(rng: np.random.Generator) -> Scene:
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    n = int(rng.integers(0, MAX_OBJECTS + 1))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    keys = rng.choice(len(COLORS) * len(SHAPES), size=n, replace=False)
    colors, shapes = list(COLORS), list(SHAPES)
    objects = tuple(
        SceneObject(shape=shapes[k % len(SHAPES)], color=colors[k // len(SHAPES)], cell=(int(c) // GRID, int(c) % GRID))
        for c, k in zip(cells, keys)
    )
    return Scene(background=background, objects=objects)


class InfeasibleEdit(Exception):
    pass


def _pick_new_key(rng, scene: Scene, keep_shape: str | None = None, keep_color: str | None = None):
    used = {o.key() for o in scene.objects}
    options = [
        (c, s)
        for c in COLORS
        for s in SHAPES
        if (c, s) not in used
        and (keep_shape is None or s == keep_shape)
        and (keep_color is None or c == keep_color)
    ]
    if not options:
        raise InfeasibleEdit("no free color/shape combination")
    return options[rng.integers(len(options))]


def apply_edit(rng: np.random.Generator, scene: Scene, task_type: str):
    """Return (edited scene, instruction, focus mask) for one semantic edit."""
    objs = list(scene.objects)
    if task_type == "removal":
        if not objs:
            raise InfeasibleEdit("nothing to remove")
        o = objs[rng.integers(len(objs))]
        new = replace(scene, objects=tuple(x for x in objs if x is not o))
        return new, f"remove the {o.color} {o.shape}", object_mask(o)
    if task_type == "addition":
        if len(objs) >= MAX_OBJECTS:
            raise InfeasibleEdit("scene full")
        used = {o.cell for o in objs}
        free = [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in used]
        cell = free[rng.integers(len(free))]
        color, shape = _pick_new_key(rng, scene)
        o = SceneObject(shape=shape, color=color, cell=cell)
        new = replace(scene, objects=tuple(objs + [o]))
        return new, f"add a {color} {shape} at row {cell[0] + 1} column {cell[1] + 1}", cell_mask(cell)
    if task_type == "swap":
        if not objs:
            raise InfeasibleEdit("nothing to swap")
        i = int(rng.integers(len(objs)))
        o = objs[i]
        others = Scene(scene.background, tuple(x for x in objs if x is not o))
        color, shape = _pick_new_key(rng, others)
        if shape == o.shape:
            raise InfeasibleEdit("swap must change the shape")
        objs[i] = SceneObject(shape=shape, color=color, cell=o.cell)
        return (
            replace(scene, objects=tuple(objs)),
            f"replace the {o.color} {o.shape} with a {color} {shape}",
            cell_mask(o.cell),
        )
    if task_type == "attribute_mod":
        if not objs:
            raise InfeasibleEdit("nothing to recolor")
        i = int(rng.integers(len(objs)))
        o = objs[i]
        others = Scene(scene.background, tuple(x for x in objs if x is not o))
        color, _ = _pick_new_key(rng, others, keep_shape=o.shape)
        if color == o.color:
            raise InfeasibleEdit("recolor must change the color")
        objs[i] = SceneObject(shape=o.shape, color=color, cell=o.cell)
        return replace(scene, objects=tuple(objs)), f"turn the {o.color} {o.shape} {color}", object_mask(o)
    if task_type == "style":
        style = STYLES[rng.integers(len(STYLES))]
        text = "make the image grayscale" if style == "grayscale" else "invert the colors"
        return replace(scene, style=style), text, np.ones((PANEL, PANEL), dtype=bool)
    raise ValueError(f"unknown task type {task_type!r}")


def gen_edit_pair(rng: np.random.Generator, task_type: str, seed: int = -1, max_tries: int = 100) -> EditPair:
    """Draw a scene and a feasible edit of ``task_type``; infeasible draws are retried."""
    if task_type not in TASK_TYPES:
        raise ValueError(f"unknown task type {task_type!r}")
    for _ in range(max_tries):
        scene = gen_scene(rng)
        try:
            edited, instruction, focus = apply_edit(rng, scene, task_type)
        except InfeasibleEdit:
            continue
        source, target = render(scene), render(edited)
        changed = np.any(source != target, axis=-1)
        if not changed.any():
            continue
        if task_type == "style":
            region = np.ones_like(changed)
        else:
            rows, cols = np.nonzero(changed)
            region = np.zeros_like(changed)
            region[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1] = True
        return EditPair(
            source=source,
            target=target,
            instruction=instruction,
            task_type=task_type,
            edit_region_mask=region,
            seed=seed,
            # Style edits are judged on the pixels the restyle actually moves.
            focus_mask=focus & region if task_type != "style" else changed,
            meta={"background": scene.background, "scene": _scene_dict(scene), "edited": _scene_dict(edited)},
        )
    raise RuntimeError(f"could not produce a feasible {task_type} edit in {max_tries} tries")


def _scene_dict(scene: Scene) -> dict:
    return {
        "background": scene.background,
        "style": scene.style,
        "objects": [{"shape": o.shape, "color": o.color, "cell": list(o.cell), "size": o.size} for o in scene.objects],
    }


def scene_from_dict(d: dict) -> Scene:
    return Scene(
        background=d["background"],
        style=d.get("style"),
        objects=tuple(
            SceneObject(shape=o["shape"], color=o["color"], cell=tuple(o["cell"]), size=o.get("size", CELL))
            for o in d["objects"]
        ),
    )
