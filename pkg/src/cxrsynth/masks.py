"""Binary raster masks, labeled organ maps, and their file formats.

All geometry in the toolkit is built on two raster types: ``RasterMask``
(single-channel binary occupancy) and ``OrganMap`` (one anatomy label per
pixel). Both are immutable after construction, so every operation here is a
pure function and safe for concurrent use.

On-disk contracts:

* organ map: 8-bit indexed PNG, palette indices 0-4
  (0 background, 1 left lung, 2 right lung, 3 heart, 4 mediastinum)
* pathology mask: 8-bit grayscale PNG named ``<sample_id>__<ClassToken>.png``;
  pixels > 127 are foreground
* image: 8-bit grayscale PNG
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import (
    DegenerateInput,
    DimensionMismatch,
    IllegalLabelValue,
    UnreadableFile,
)

# Organ map palette.
LABEL_BACKGROUND = 0
LABEL_LEFT_LUNG = 1
LABEL_RIGHT_LUNG = 2
LABEL_HEART = 3
LABEL_MEDIASTINUM = 4
ORGAN_LABELS = (
    LABEL_BACKGROUND,
    LABEL_LEFT_LUNG,
    LABEL_RIGHT_LUNG,
    LABEL_HEART,
    LABEL_MEDIASTINUM,
)

# Display palette for indexed PNGs (index -> RGB). Purely cosmetic; the
# stored indices are the contract.
_ORGAN_PNG_PALETTE = [
    0, 0, 0,
    70, 130, 180,
    60, 179, 113,
    220, 20, 60,
    218, 165, 32,
] + [0, 0, 0] * 251

FOREGROUND_THRESHOLD = 127  # grayscale > 127 is foreground


class DiseaseClass(enum.Enum):
    """Closed set of pathology classes plus the explicit normal marker.

    Enum values are the canonical prompt spellings; on disk, spaces become
    underscores (``Pleural Thickening`` -> ``Pleural_Thickening``).
    """

    ATELECTASIS = "Atelectasis"
    CALCIFICATION = "Calcification"
    CARDIOMEGALY = "Cardiomegaly"
    CONSOLIDATION = "Consolidation"
    DIFFUSE_NODULE = "Diffuse Nodule"
    EFFUSION = "Effusion"
    EMPHYSEMA = "Emphysema"
    FIBROSIS = "Fibrosis"
    FRACTURE = "Fracture"
    MASS = "Mass"
    NODULE = "Nodule"
    PLEURAL_THICKENING = "Pleural Thickening"
    PNEUMOTHORAX = "Pneumothorax"
    NO_FINDING = "No Finding"

    @property
    def token(self) -> str:
        return self.value

    @property
    def file_token(self) -> str:
        return self.value.replace(" ", "_")

    @classmethod
    def pathology_classes(cls) -> tuple["DiseaseClass", ...]:
        """The 13 pathology classes, excluding NO_FINDING."""
        return tuple(c for c in cls if c is not cls.NO_FINDING)

    @classmethod
    def from_token(cls, token: str) -> "DiseaseClass":
        """Resolve a class token case-insensitively; underscores accepted."""
        norm = token.replace("_", " ").strip().lower()
        for member in cls:
            if member.value.lower() == norm:
                return member
        raise KeyError(token)


@dataclass(frozen=True, eq=False)
class BoundingBox:
    """Tight inclusive box over foreground pixels."""

    min_row: int
    max_row: int
    min_col: int
    max_col: int

    @property
    def height(self) -> int:
        return self.max_row - self.min_row + 1

    @property
    def width(self) -> int:
        return self.max_col - self.min_col + 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, BoundingBox):
            return NotImplemented
        return (self.min_row, self.max_row, self.min_col, self.max_col) == (
            other.min_row,
            other.max_row,
            other.min_col,
            other.max_col,
        )

    def __hash__(self) -> int:
        return hash((self.min_row, self.max_row, self.min_col, self.max_col))


def _freeze(array: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(array)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RasterMask:
    """Immutable binary occupancy grid, row-major, shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise DegenerateInput(f"mask must be 2-D, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise DegenerateInput(f"mask has zero-sized dimension {px.shape}")
        object.__setattr__(self, "pixels", _freeze(px.astype(bool)))

    @classmethod
    def from_array(cls, array: np.ndarray) -> "RasterMask":
        return cls(np.asarray(array) > 0)

    @classmethod
    def empty(cls, width: int, height: int) -> "RasterMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "RasterMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterMask):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        raise TypeError("RasterMask is not hashable")


@dataclass(frozen=True, eq=False)
class OrganMap:
    """Anatomy label raster: exactly one palette label per pixel."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DegenerateInput(f"organ map must be 2-D, got shape {lab.shape}")
        if lab.shape[0] == 0 or lab.shape[1] == 0:
            raise DegenerateInput(f"organ map has zero-sized dimension {lab.shape}")
        lab = lab.astype(np.uint8)
        bad = lab > LABEL_MEDIASTINUM
        if bad.any():
            index = int(np.flatnonzero(bad.ravel())[0])
            raise IllegalLabelValue(int(lab.ravel()[index]), index)
        object.__setattr__(self, "labels", _freeze(lab))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def organ_mask(self, label: int) -> RasterMask:
        """Binary mask of one palette label."""
        return RasterMask(self.labels == label)

    def lungs_mask(self) -> RasterMask:
        return RasterMask(
            (self.labels == LABEL_LEFT_LUNG) | (self.labels == LABEL_RIGHT_LUNG)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, OrganMap):
            return NotImplemented
        return bool(np.array_equal(self.labels, other.labels))

    def __hash__(self):
        raise TypeError("OrganMap is not hashable")


@dataclass(frozen=True)
class PathologyAnnotation:
    """One pathology class and its binary lesion mask."""

    disease: DiseaseClass
    mask: RasterMask

    def __post_init__(self):
        if self.disease is DiseaseClass.NO_FINDING:
            raise ValueError("NO_FINDING cannot carry a lesion mask")


# --- primitive geometry -----------------------------------------------------


def area(mask: RasterMask) -> int:
    """Count of foreground pixels."""
    return int(np.count_nonzero(mask.pixels))


def _check_same_shape(a: RasterMask, b: RasterMask) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")


def intersect(a: RasterMask, b: RasterMask) -> RasterMask:
    """Pixel-wise conjunction of two equal-sized masks."""
    _check_same_shape(a, b)
    return RasterMask(a.pixels & b.pixels)


def union(a: RasterMask, b: RasterMask) -> RasterMask:
    """Pixel-wise disjunction of two equal-sized masks."""
    _check_same_shape(a, b)
    return RasterMask(a.pixels | b.pixels)


def bounding_box(mask: RasterMask) -> BoundingBox | None:
    """Tight box over foreground pixels, or None for an empty mask."""
    rows = np.flatnonzero(mask.pixels.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.pixels.any(axis=0))
    return BoundingBox(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


_CONNECTIVITY_8 = np.ones((3, 3), dtype=bool)


def connected_components(mask: RasterMask) -> list[RasterMask]:
    """8-connected foreground components, in raster scan order."""
    labeled, count = ndimage.label(mask.pixels, structure=_CONNECTIVITY_8)
    return [RasterMask(labeled == i) for i in range(1, count + 1)]


# --- geometry normalization ---------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _nn_index_map(in_size: int, out_size: int) -> np.ndarray:
    # Pixel-center mapping with round-half-up, clamped to the input range.
    centers = (np.arange(out_size) + 0.5) * (in_size / out_size)
    return np.minimum(np.floor(centers).astype(int), in_size - 1)


def _scaled_dims(height: int, width: int, target: int) -> tuple[int, int]:
    if height <= 0 or width <= 0 or target <= 0:
        raise DegenerateInput(f"cannot rescale {width}x{height} to target {target}")
    short = min(height, width)
    scale = target / short
    new_h = target if height == short else _round_half_up(height * scale)
    new_w = target if width == short else _round_half_up(width * scale)
    return new_h, new_w


def _center_crop(array: np.ndarray, target: int) -> np.ndarray:
    h, w = array.shape[:2]
    top = (h - target) // 2
    left = (w - target) // 2
    return array[top : top + target, left : left + target]


def _resize_nearest(array: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    rows = _nn_index_map(array.shape[0], new_h)
    cols = _nn_index_map(array.shape[1], new_w)
    return array[np.ix_(rows, cols)]


def normalize_geometry(raster, target: int):
    """Rescale so the shortest edge equals ``target``, then center-crop square.

    Label rasters (``RasterMask``, ``OrganMap``) use nearest-neighbor
    resampling so no new values are introduced; grayscale image arrays use
    area averaging. Returns the same kind as the input.
    """
    if target <= 0:
        raise DegenerateInput(f"target must be positive, got {target}")
    if isinstance(raster, RasterMask):
        new_h, new_w = _scaled_dims(raster.height, raster.width, target)
        out = _resize_nearest(raster.pixels, new_h, new_w)
        return RasterMask(_center_crop(out, target).copy())
    if isinstance(raster, OrganMap):
        new_h, new_w = _scaled_dims(raster.height, raster.width, target)
        out = _resize_nearest(raster.labels, new_h, new_w)
        return OrganMap(_center_crop(out, target).copy())
    array = np.asarray(raster)
    if array.ndim != 2:
        raise DegenerateInput(f"image must be 2-D, got shape {array.shape}")
    new_h, new_w = _scaled_dims(array.shape[0], array.shape[1], target)
    img = Image.fromarray(array.astype(np.uint8), mode="L")
    resized = np.asarray(img.resize((new_w, new_h), Image.BOX))
    return _center_crop(resized, target).copy()


# --- file I/O ---------------------------------------------------------------


def _open_raster(path: Path | str) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise UnreadableFile(f"cannot read raster {path}: {exc}") from exc
    return img


def load_organ_map(path: Path | str) -> OrganMap:
    """Load an 8-bit indexed (or grayscale) organ map PNG.

    Raises IllegalLabelValue if any pixel falls outside the 0-4 palette.
    """
    img = _open_raster(path)
    if img.mode not in ("P", "L"):
        raise UnreadableFile(
            f"organ map {path} must be 8-bit indexed or grayscale, got mode {img.mode}"
        )
    return OrganMap(np.asarray(img, dtype=np.uint8))


def save_organ_map(organ: OrganMap, path: Path | str) -> None:
    img = Image.fromarray(organ.labels, mode="P")
    img.putpalette(_ORGAN_PNG_PALETTE)
    img.save(path, format="PNG")


def load_pathology_mask(
    path: Path | str,
    disease: DiseaseClass,
    organ: OrganMap | None = None,
) -> PathologyAnnotation:
    """Load an 8-bit grayscale lesion mask; pixels > 127 are foreground.

    When ``organ`` is given, the mask must match its dimensions.
    """
    img = _open_raster(path)
    if img.mode != "L":
        raise UnreadableFile(
            f"pathology mask {path} must be 8-bit grayscale, got mode {img.mode}"
        )
    mask = RasterMask(np.asarray(img, dtype=np.uint8) > FOREGROUND_THRESHOLD)
    if organ is not None and mask.shape != organ.shape:
        raise DimensionMismatch(
            f"mask {path} shape {mask.shape} != organ shape {organ.shape}"
        )
    return PathologyAnnotation(disease, mask)


def save_pathology_mask(mask: RasterMask, path: Path | str) -> None:
    gray = np.where(mask.pixels, 255, 0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path, format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    """Load an 8-bit grayscale image as a (height, width) uint8 array."""
    img = _open_raster(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def save_image(image: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(
        path, format="PNG"
    )


def mask_filename(sample_id: str, disease: DiseaseClass) -> str:
    """Canonical pathology mask file name for one (sample, class) pair."""
    return f"{sample_id}__{disease.file_token}.png"


def parse_mask_filename(name: str) -> tuple[str, DiseaseClass]:
    """Recover (sample_id, class) from a pathology mask file name."""
    stem = Path(name).stem
    if "__" not in stem:
        raise ValueError(f"not a pathology mask filename: {name!r}")
    sample_id, _, token = stem.rpartition("__")
    try:
        disease = DiseaseClass.from_token(token)
    except KeyError as exc:
        raise ValueError(f"unknown class token in filename {name!r}") from exc
    return sample_id, disease


def load_masks_dir(
    directory: Path | str, organ: OrganMap | None = None
) -> list[PathologyAnnotation]:
    """Load every ``*__<ClassToken>.png`` mask in a directory, sorted by name."""
    directory = Path(directory)
    annotations = []
    for path in sorted(directory.glob("*.png")):
        try:
            _, disease = parse_mask_filename(path.name)
        except ValueError:
            continue
        annotations.append(load_pathology_mask(path, disease, organ))
    return annotations


def masks_by_class(
    annotations: Iterable[PathologyAnnotation],
) -> dict[DiseaseClass, RasterMask]:
    """Union same-class annotations into one mask per class."""
    merged: dict[DiseaseClass, RasterMask] = {}
    for ann in annotations:
        if ann.disease in merged:
            merged[ann.disease] = union(merged[ann.disease], ann.mask)
        else:
            merged[ann.disease] = ann.mask
    return merged
