"""Shared fixtures: deterministic desk-scale anatomies and file helpers."""

from __future__ import annotations

import numpy as np
import pytest

from cxrsynth.masks import OrganMap, RasterMask


def make_organ(
    shape=(128, 128),
    left_lung=(20, 108, 12, 52),
    right_lung=(20, 108, 76, 116),
    heart=(62, 106, 50, 78),
    mediastinum=(16, 60, 54, 74),
) -> OrganMap:
    """Rectangular desk anatomy; boxes are (row0, row1, col0, col1) half-open."""
    labels = np.zeros(shape, dtype=np.uint8)

    def paint(box, label):
        if box is not None:
            r0, r1, c0, c1 = box
            labels[r0:r1, c0:c1] = label

    paint(left_lung, 1)
    paint(right_lung, 2)
    paint(mediastinum, 4)
    paint(heart, 3)
    return OrganMap(labels)


def rect_mask(shape, r0, r1, c0, c1) -> RasterMask:
    pixels = np.zeros(shape, dtype=bool)
    pixels[r0:r1, c0:c1] = True
    return RasterMask(pixels)


@pytest.fixture
def desk_organ() -> OrganMap:
    """128x128 anatomy with CTR ~0.27 and all 11 zones nonempty."""
    return make_organ()


@pytest.fixture
def wide_heart_organ() -> OrganMap:
    """Anatomy whose resting CTR falls in the moderate band (0.50-0.55)."""
    # lungs bbox cols 12..115 -> width 104; heart cols 37..91 -> width 55
    # CTR = 55/104 = 0.5288...
    return make_organ(heart=(62, 106, 37, 92), mediastinum=(16, 60, 54, 74))
