"""Boundary targets for the student's edge head.

On a binary label image a Canny detector reduces to finding 0/1 transitions,
so the target is defined directly: a pixel is a transition pixel when any of
its 4-neighbours holds the other label, and the transition set is then
dilated by a ``width_px`` x ``width_px`` square. Pixels outside the image do
not count as neighbours, so constant masks have no edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import SegMask

DEFAULT_EDGE_WIDTH = 3


@dataclass(frozen=True, eq=False)
class EdgeMap(SegMask):
    """Binary boundary map (1 = boundary) with the same layout as SegMask."""


def transition_pixels(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    out = np.zeros_like(m)
    vert = m[1:, :] != m[:-1, :]
    horz = m[:, 1:] != m[:, :-1]
    out[1:, :] |= vert
    out[:-1, :] |= vert
    out[:, 1:] |= horz
    out[:, :-1] |= horz
    return out


def boundary_map(mask: SegMask, width_px: int = DEFAULT_EDGE_WIDTH) -> EdgeMap:
    if width_px < 1:
        raise ValueError(f"width_px must be >= 1, got {width_px}")
    edges = transition_pixels(mask.data)
    if width_px > 1 and edges.any():
        # even widths put the extra row/column on the low side (scipy origin convention)
        structure = np.ones((width_px, width_px), dtype=bool)
        edges = ndimage.binary_dilation(edges, structure=structure)
    return EdgeMap(edges.astype(np.uint8))
