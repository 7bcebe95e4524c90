"""Raster mask primitives, file round-trips, and geometry normalization."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from cxrsynth.errors import (
    DegenerateInput,
    DimensionMismatch,
    IllegalLabelValue,
    UnreadableFile,
)
from cxrsynth.masks import (
    BoundingBox,
    DiseaseClass,
    OrganMap,
    RasterMask,
    area,
    bounding_box,
    connected_components,
    intersect,
    load_image,
    load_organ_map,
    load_pathology_mask,
    mask_filename,
    normalize_geometry,
    parse_mask_filename,
    save_image,
    save_organ_map,
    save_pathology_mask,
    union,
)


def random_mask(rng, shape=(32, 32), density=0.4) -> RasterMask:
    return RasterMask(rng.random(shape) < density)


# --- area ---------------------------------------------------------------------


def test_area_empty_and_full():
    assert area(RasterMask.empty(8, 8)) == 0
    assert area(RasterMask.full(8, 8)) == 64


def test_area_matches_per_pixel_count():
    rng = np.random.default_rng(11)
    mask = random_mask(rng)
    expected = sum(
        1 for r in range(32) for c in range(32) if mask.pixels[r][c]
    )
    assert area(mask) == expected


# --- intersect / union ----------------------------------------------------------


def test_intersect_idempotent_and_empty():
    rng = np.random.default_rng(3)
    a = random_mask(rng)
    assert intersect(a, a) == a
    assert area(intersect(a, RasterMask.empty(32, 32))) == 0


def test_intersect_matches_bruteforce_conjunction():
    rng = np.random.default_rng(5)
    a = random_mask(rng, (16, 16))
    b = random_mask(rng, (16, 16))
    got = intersect(a, b)
    for r in range(16):
        for c in range(16):
            assert got.pixels[r, c] == (a.pixels[r, c] and b.pixels[r, c])


def test_intersect_commutative_associative():
    rng = np.random.default_rng(7)
    a, b, c = (random_mask(rng, (20, 20)) for _ in range(3))
    assert intersect(a, b) == intersect(b, a)
    assert intersect(intersect(a, b), c) == intersect(a, intersect(b, c))


def test_inclusion_exclusion():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = random_mask(rng, (24, 24))
        b = random_mask(rng, (24, 24))
        assert area(intersect(a, b)) + area(union(a, b)) == area(a) + area(b)


def test_intersect_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        intersect(RasterMask.empty(4, 4), RasterMask.empty(5, 4))


# --- bounding box -----------------------------------------------------------------


def test_bounding_box_empty():
    assert bounding_box(RasterMask.empty(10, 10)) is None


def test_bounding_box_single_pixel():
    pixels = np.zeros((10, 10), dtype=bool)
    pixels[3, 5] = True
    assert bounding_box(RasterMask(pixels)) == BoundingBox(3, 3, 5, 5)


def test_bounding_box_matches_scan():
    rng = np.random.default_rng(17)
    mask = random_mask(rng, (30, 40), density=0.05)
    box = bounding_box(mask)
    coords = [(r, c) for r in range(30) for c in range(40) if mask.pixels[r, c]]
    assert box == BoundingBox(
        min(r for r, _ in coords),
        max(r for r, _ in coords),
        min(c for _, c in coords),
        max(c for _, c in coords),
    )


# --- connected components -----------------------------------------------------------


def test_connected_components_eight_connectivity():
    pixels = np.zeros((5, 5), dtype=bool)
    pixels[0, 0] = True
    pixels[1, 1] = True  # diagonal neighbor joins under 8-connectivity
    pixels[4, 4] = True
    components = connected_components(RasterMask(pixels))
    assert sorted(area(c) for c in components) == [1, 2]


# --- file I/O -------------------------------------------------------------------------


def test_organ_map_round_trip(tmp_path, desk_organ):
    path = tmp_path / "organ.png"
    save_organ_map(desk_organ, path)
    loaded = load_organ_map(path)
    assert loaded == desk_organ


def test_load_organ_map_all_background(tmp_path):
    path = tmp_path / "blank.png"
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(path)
    organ = load_organ_map(path)
    assert organ.shape == (4, 4)
    assert int(np.count_nonzero(organ.labels == 0)) == 16


def test_load_organ_map_rejects_illegal_label(tmp_path):
    path = tmp_path / "bad.png"
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[1, 2] = 7
    Image.fromarray(labels, mode="L").save(path)
    with pytest.raises(IllegalLabelValue) as err:
        load_organ_map(path)
    assert err.value.label == 7
    assert err.value.pixel_index == 6


def test_load_organ_map_histogram_fixture(tmp_path):
    labels = np.zeros((16, 16), dtype=np.uint8)
    labels[2:10, 1:6] = 1
    labels[2:10, 10:15] = 2
    labels[10:14, 6:10] = 3
    path = tmp_path / "organ_small.png"
    save_organ_map(OrganMap(labels), path)
    organ = load_organ_map(path)
    histogram = {v: int(np.count_nonzero(organ.labels == v)) for v in range(5)}
    assert histogram[1] == 40 and histogram[2] == 40 and histogram[3] == 16
    assert histogram[4] == 0


def test_pathology_mask_threshold_rule(tmp_path):
    gray = np.zeros((6, 6), dtype=np.uint8)
    gray[1, 1] = 127  # at threshold: background
    gray[2, 2] = 128  # above threshold: foreground
    path = tmp_path / "s1__Effusion.png"
    Image.fromarray(gray, mode="L").save(path)
    ann = load_pathology_mask(path, DiseaseClass.EFFUSION)
    assert area(ann.mask) == 1
    assert ann.mask.pixels[2, 2]


def test_pathology_mask_all_zero_and_all_255(tmp_path):
    zero = tmp_path / "a__Mass.png"
    Image.fromarray(np.zeros((5, 7), dtype=np.uint8), mode="L").save(zero)
    assert area(load_pathology_mask(zero, DiseaseClass.MASS).mask) == 0
    full = tmp_path / "b__Mass.png"
    Image.fromarray(np.full((5, 7), 255, dtype=np.uint8), mode="L").save(full)
    assert area(load_pathology_mask(full, DiseaseClass.MASS).mask) == 35


def test_pathology_mask_round_trip(tmp_path):
    rng = np.random.default_rng(23)
    mask = random_mask(rng, (40, 40))
    path = tmp_path / "x__Nodule.png"
    save_pathology_mask(mask, path)
    assert load_pathology_mask(path, DiseaseClass.NODULE).mask == mask


def test_pathology_mask_dimension_validation(tmp_path, desk_organ):
    path = tmp_path / "s__Effusion.png"
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8), mode="L").save(path)
    with pytest.raises(DimensionMismatch):
        load_pathology_mask(path, DiseaseClass.EFFUSION, desk_organ)


def test_unreadable_file():
    with pytest.raises(UnreadableFile):
        load_organ_map("/nonexistent/organ.png")


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(29)
    image = rng.integers(0, 256, size=(33, 21), dtype=np.uint8)
    path = tmp_path / "img.png"
    save_image(image, path)
    assert np.array_equal(load_image(path), image)


def test_mask_filename_round_trip():
    name = mask_filename("s0042", DiseaseClass.PLEURAL_THICKENING)
    assert name == "s0042__Pleural_Thickening.png"
    assert parse_mask_filename(name) == ("s0042", DiseaseClass.PLEURAL_THICKENING)


# --- normalize_geometry -----------------------------------------------------------------


def test_normalize_identity():
    rng = np.random.default_rng(31)
    mask = random_mask(rng, (512, 512))
    assert normalize_geometry(mask, 512) == mask


def test_normalize_rescale_arithmetic():
    # 1024x768 with target 512: scale 512/768, long edge 1024 * 2/3 = 682.67
    # rounds half-up to 683, then center crop to 512x512.
    image = np.zeros((768, 1024), dtype=np.uint8)
    out = normalize_geometry(image, 512)
    assert out.shape == (512, 512)
    mask = RasterMask.full(1024, 768)
    assert normalize_geometry(mask, 512).shape == (512, 512)


def test_normalize_label_preservation():
    rng = np.random.default_rng(37)
    labels = rng.choice([0, 1, 3], size=(512, 640)).astype(np.uint8)
    organ = OrganMap(labels)
    out = normalize_geometry(organ, 512)
    assert out.shape == (512, 512)
    assert set(np.unique(out.labels)) <= set(np.unique(labels))


def test_normalize_never_invents_labels():
    rng = np.random.default_rng(41)
    for _ in range(5):
        h = int(rng.integers(40, 200))
        w = int(rng.integers(40, 200))
        labels = rng.choice([0, 2, 4], size=(h, w)).astype(np.uint8)
        out = normalize_geometry(OrganMap(labels), 64)
        assert out.shape == (64, 64)
        assert set(np.unique(out.labels)) <= set(np.unique(labels))


def test_normalize_degenerate_target():
    with pytest.raises(DegenerateInput):
        normalize_geometry(RasterMask.full(4, 4), 0)


def test_zero_sized_mask_rejected():
    with pytest.raises(DegenerateInput):
        RasterMask(np.zeros((0, 5), dtype=bool))
