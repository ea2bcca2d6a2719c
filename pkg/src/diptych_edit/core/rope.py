"""Multi-axis rotary position embedding.

The head dimension is split into one even-sized slice per position axis. Within
a slice, consecutive channel pairs ``(2j, 2j+1)`` are rotated by
``position * theta ** (-2j / slice_dim)``; the first pair of every slice
therefore turns by exactly one radian per unit of position.
"""

from __future__ import annotations

from collections.abc import Sequence

import torch


def rope_frequencies(axes: Sequence[int], theta: float, dtype=torch.float64) -> list[torch.Tensor]:
    out = []
    for a in axes:
        if a % 2:
            raise ValueError(f"rope axis dim {a} is odd")
        out.append(theta ** (-torch.arange(0, a, 2, dtype=dtype) / a))
    return out


def rope_angles(positions: torch.Tensor, axes: Sequence[int], theta: float) -> torch.Tensor:
    """(T, n_axes) integer positions -> (T, sum(axes)/2) rotation angles."""
    positions = torch.as_tensor(positions)
    if positions.shape[-1] != len(axes):
        raise ValueError(f"positions have {positions.shape[-1]} axes, expected {len(axes)}")
    freqs = rope_frequencies(axes, theta)
    parts = [positions[:, i : i + 1].to(torch.float64) * f[None, :] for i, f in enumerate(freqs)]
    return torch.cat(parts, dim=-1)


def apply_rotation(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], dim=-1)
    return out.flatten(-2)


def rope_rotate(x: torch.Tensor, positions, axes: Sequence[int] | None = None, theta: float = 100.0) -> torch.Tensor:
    """Rotate query/key vectors ``x`` of shape (…, T, D) by their positions.

    ``axes`` defaults to an even split of ``D`` over the position axes.
    """
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"rope needs an even dimension, got {d}")
    positions = torch.as_tensor(positions)
    if positions.ndim == 1:
        positions = positions[:, None]
    if axes is None:
        n = positions.shape[-1]
        if d % (2 * n):
            raise ValueError(f"cannot split dim {d} evenly over {n} axes")
        axes = [d // n] * n
    if sum(axes) != d:
        raise ValueError(f"rope axes {tuple(axes)} do not sum to {d}")
    ang = rope_angles(positions, axes, theta).to(x.dtype)
    return apply_rotation(x, ang.cos(), ang.sin())
