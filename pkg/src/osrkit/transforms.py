"""Input transformation module: the four right-angle rotated views.

Rotations are counter-clockwise; composing rotate90(., t1) and
rotate90(., t2) equals rotate90(., (t1 + t2) mod 4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import ImageBatch

NUM_TRANSFORMS = 4


@dataclass
class TransformedBatch:
    """All rotated views of a batch, with view labels and back-pointers."""

    pixels: np.ndarray          # (4N, Hp, Wp, 1)
    transform_ids: np.ndarray   # (4N,) in 0..3
    origin_index: np.ndarray    # (4N,) index of the source sample


def rotate90(image: np.ndarray, t: int) -> np.ndarray:
    """Rotate a square image counter-clockwise by 90*t degrees.

    Accepts (H, W) or (H, W, C); t must be in {0, 1, 2, 3}.
    """
    if t not in (0, 1, 2, 3):
        raise ValueError(f"t must be in 0..3, got {t}")
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"rotation needs a square image, got {image.shape}")
    return np.rot90(image, k=t, axes=(0, 1))


def expand_batch(batch: ImageBatch) -> TransformedBatch:
    """Produce the 4N rotated views of an N-sample batch.

    Views are laid out rotation-major: all t=0 rows first, then t=1, etc.,
    so rows with transform id 0 equal the input rows exactly.
    """
    n = batch.pixels.shape[0]
    if n == 0:
        raise ValueError("cannot expand an empty batch")
    views = [np.rot90(batch.pixels, k=t, axes=(1, 2)) for t in range(NUM_TRANSFORMS)]
    pixels = np.ascontiguousarray(np.concatenate(views, axis=0))
    transform_ids = np.repeat(np.arange(NUM_TRANSFORMS), n)
    origin_index = np.tile(np.arange(n), NUM_TRANSFORMS)
    return TransformedBatch(pixels=pixels, transform_ids=transform_ids,
                            origin_index=origin_index)
