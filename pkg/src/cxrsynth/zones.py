"""Derivation of the 11-location anatomy taxonomy from an organ map.

Each lung is split into upper/middle/lower thirds over its own vertical
bounding-box extent; the five major regions (left lung, right lung,
bilateral lung, mediastinum, heart) complete the taxonomy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .masks import (
    LABEL_HEART,
    LABEL_LEFT_LUNG,
    LABEL_MEDIASTINUM,
    LABEL_RIGHT_LUNG,
    OrganMap,
    RasterMask,
)


class Location(enum.Enum):
    """Closed set of 11 location tokens.

    Definition order is the canonical ordering used for deterministic
    tie-breaking throughout the toolkit.
    """

    LEFT_UPPER_LUNG = "left upper lung"
    LEFT_MIDDLE_LUNG = "left middle lung"
    LEFT_LOWER_LUNG = "left lower lung"
    RIGHT_UPPER_LUNG = "right upper lung"
    RIGHT_MIDDLE_LUNG = "right middle lung"
    RIGHT_LOWER_LUNG = "right lower lung"
    MEDIASTINUM = "mediastinum"
    HEART = "heart"
    LEFT_LUNG = "left lung"
    RIGHT_LUNG = "right lung"
    BILATERAL_LUNG = "bilateral lung"

    @property
    def token(self) -> str:
        return self.value

    @classmethod
    def from_token(cls, token: str) -> "Location":
        norm = token.strip().lower()
        for member in cls:
            if member.value == norm:
                return member
        raise KeyError(token)


CANONICAL_ORDER: tuple[Location, ...] = tuple(Location)
ORDER_INDEX: dict[Location, int] = {loc: i for i, loc in enumerate(Location)}

LEFT_SUB_ZONES = (
    Location.LEFT_UPPER_LUNG,
    Location.LEFT_MIDDLE_LUNG,
    Location.LEFT_LOWER_LUNG,
)
RIGHT_SUB_ZONES = (
    Location.RIGHT_UPPER_LUNG,
    Location.RIGHT_MIDDLE_LUNG,
    Location.RIGHT_LOWER_LUNG,
)
SUB_ZONES = LEFT_SUB_ZONES + RIGHT_SUB_ZONES

# Zones a lesion can be attributed to directly (argmax candidates).
ATOMIC_LOCATIONS = SUB_ZONES + (Location.MEDIASTINUM, Location.HEART)

MAJOR_OF: dict[Location, Location] = {
    **{z: Location.LEFT_LUNG for z in LEFT_SUB_ZONES},
    **{z: Location.RIGHT_LUNG for z in RIGHT_SUB_ZONES},
}

SUB_ZONES_OF: dict[Location, tuple[Location, ...]] = {
    Location.LEFT_LUNG: LEFT_SUB_ZONES,
    Location.RIGHT_LUNG: RIGHT_SUB_ZONES,
}


@dataclass(frozen=True)
class ZoneMap:
    """Mapping of every Location to its binary mask, all equal-sized."""

    zones: Mapping[Location, RasterMask]

    def __post_init__(self):
        missing = [loc for loc in Location if loc not in self.zones]
        if missing:
            raise ValueError(f"zone map missing locations: {missing}")
        shapes = {mask.shape for mask in self.zones.values()}
        if len(shapes) != 1:
            raise ValueError(f"zone masks have differing shapes: {shapes}")
        object.__setattr__(self, "zones", dict(self.zones))

    def __getitem__(self, location: Location) -> RasterMask:
        return self.zones[location]

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.zones.values())).shape

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]


def _band_heights(extent: int) -> tuple[int, int, int]:
    # Remainder pixels go to the upper band first, then the middle band.
    base, rem = divmod(extent, 3)
    return (base + (1 if rem >= 1 else 0), base + (1 if rem == 2 else 0), base)


def _split_lung(lung: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.flatnonzero(lung.any(axis=1))
    empty = np.zeros_like(lung)
    if rows.size == 0:
        return empty, empty.copy(), empty.copy()
    top, bottom = int(rows[0]), int(rows[-1])
    upper_h, middle_h, _ = _band_heights(bottom - top + 1)
    row_index = np.arange(lung.shape[0])[:, None]
    upper = lung & (row_index < top + upper_h)
    middle = lung & (row_index >= top + upper_h) & (row_index < top + upper_h + middle_h)
    lower = lung & (row_index >= top + upper_h + middle_h)
    return upper, middle, lower


def define_organ_parts(organ: OrganMap) -> ZoneMap:
    """Split each lung into thirds and assemble the full 11-zone map.

    Empty organs yield empty zones; the three sub-zones of a lung are
    pairwise disjoint and their union is exactly that lung's mask.
    """
    left = organ.labels == LABEL_LEFT_LUNG
    right = organ.labels == LABEL_RIGHT_LUNG
    lu, lm, ll = _split_lung(left)
    ru, rm, rl = _split_lung(right)
    zones = {
        Location.LEFT_UPPER_LUNG: RasterMask(lu),
        Location.LEFT_MIDDLE_LUNG: RasterMask(lm),
        Location.LEFT_LOWER_LUNG: RasterMask(ll),
        Location.RIGHT_UPPER_LUNG: RasterMask(ru),
        Location.RIGHT_MIDDLE_LUNG: RasterMask(rm),
        Location.RIGHT_LOWER_LUNG: RasterMask(rl),
        Location.MEDIASTINUM: organ.organ_mask(LABEL_MEDIASTINUM),
        Location.HEART: organ.organ_mask(LABEL_HEART),
        Location.LEFT_LUNG: RasterMask(left),
        Location.RIGHT_LUNG: RasterMask(right),
        Location.BILATERAL_LUNG: RasterMask(left | right),
    }
    return ZoneMap(zones)
