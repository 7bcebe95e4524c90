"""Command-line surface: outputs, exit codes, and format stability."""

from __future__ import annotations

import json

import numpy as np
import pytest
from click.testing import CliRunner

from cxrsynth.cli import main
from cxrsynth.grammar import PromptSpec
from cxrsynth.masks import (
    DiseaseClass,
    mask_filename,
    save_image,
    save_organ_map,
    save_pathology_mask,
)
from cxrsynth.pipeline import stub_text_to_mask

from .conftest import make_organ
from .test_metrics import (
    ICC_FIXTURE,
    ICC_FIXTURE_VALUE,
    KAPPA_FIXTURE,
    KAPPA_FIXTURE_VALUE,
)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def scene(tmp_path, wide_heart_organ):
    """Fixture scene whose caption reproduces the two-finding example."""
    organ_path = tmp_path / "organ.png"
    save_organ_map(wide_heart_organ, organ_path)
    masks_dir = tmp_path / "masks"
    masks_dir.mkdir()
    # cardiomegaly annotation: the heart silhouette itself (CTR 0.5288)
    save_pathology_mask(
        wide_heart_organ.organ_mask(3),
        masks_dir / mask_filename("scene", DiseaseClass.CARDIOMEGALY),
    )
    # mild fibrosis blob inside the right middle lung
    prompt = PromptSpec.from_text(
        "A photo of a Chest X-ray with mild Fibrosis on right middle lung"
    )
    for ann in stub_text_to_mask(prompt, wide_heart_organ, seed=31):
        save_pathology_mask(
            ann.mask, masks_dir / mask_filename("scene", ann.disease)
        )
    return organ_path, masks_dir


EXPECTED_SCENE_PROMPT = (
    "A photo of a Chest X-ray with moderate Cardiomegaly on heart, "
    "mild Fibrosis on right middle lung"
)


# --- caption -------------------------------------------------------------------


def test_caption_text(runner, scene):
    organ_path, masks_dir = scene
    result = runner.invoke(
        main, ["caption", "--organ", str(organ_path), "--masks-dir", str(masks_dir)]
    )
    assert result.exit_code == 0
    assert result.output.strip() == EXPECTED_SCENE_PROMPT


def test_caption_json(runner, scene):
    organ_path, masks_dir = scene
    result = runner.invoke(
        main,
        ["caption", "--organ", str(organ_path), "--masks-dir", str(masks_dir),
         "--format", "json"],
    )
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload["prompt"] == EXPECTED_SCENE_PROMPT
    assert payload["findings"][0] == {
        "class": "Cardiomegaly", "severity": "moderate", "location": "heart",
    }


def test_caption_empty_masks_dir(runner, tmp_path, desk_organ):
    organ_path = tmp_path / "organ.png"
    save_organ_map(desk_organ, organ_path)
    empty = tmp_path / "none"
    empty.mkdir()
    result = runner.invoke(
        main, ["caption", "--organ", str(organ_path), "--masks-dir", str(empty)]
    )
    assert result.exit_code == 0
    assert result.output.strip() == "A photo of a Chest X-ray with No Finding"


def test_caption_dimension_mismatch_exit_1(runner, tmp_path, desk_organ):
    organ_path = tmp_path / "organ.png"
    save_organ_map(desk_organ, organ_path)
    masks_dir = tmp_path / "masks"
    masks_dir.mkdir()
    small = make_organ(shape=(32, 32), left_lung=(2, 30, 2, 12),
                       right_lung=(2, 30, 20, 30), heart=(20, 30, 12, 20),
                       mediastinum=None)
    save_pathology_mask(
        small.organ_mask(3), masks_dir / mask_filename("s", DiseaseClass.MASS)
    )
    result = runner.invoke(
        main, ["caption", "--organ", str(organ_path), "--masks-dir", str(masks_dir)]
    )
    assert result.exit_code == 1


def test_caption_missing_organ_exit_3(runner, tmp_path):
    result = runner.invoke(
        main,
        ["caption", "--organ", str(tmp_path / "nope.png"),
         "--masks-dir", str(tmp_path)],
    )
    assert result.exit_code == 3


# --- validate -------------------------------------------------------------------


def test_validate_self_consistent_exit_0(runner, scene):
    organ_path, masks_dir = scene
    result = runner.invoke(
        main,
        ["validate", "--prompt", EXPECTED_SCENE_PROMPT,
         "--organ", str(organ_path), "--masks-dir", str(masks_dir)],
    )
    assert result.exit_code == 0
    assert json.loads(result.output)["matched"] is True


def test_validate_mislocated_exit_1(runner, scene):
    organ_path, masks_dir = scene
    wrong = (
        "A photo of a Chest X-ray with moderate Cardiomegaly on heart, "
        "mild Fibrosis on left lower lung"
    )
    result = runner.invoke(
        main,
        ["validate", "--prompt", wrong,
         "--organ", str(organ_path), "--masks-dir", str(masks_dir)],
    )
    assert result.exit_code == 1
    report = json.loads(result.output)
    assert report["matched"] is False
    assert any(f["location"] == "left lower lung" for f in report["missing"])
    assert any(f["location"] == "right middle lung" for f in report["extra"])


def test_validate_unparsable_prompt_exit_2(runner, scene):
    organ_path, masks_dir = scene
    result = runner.invoke(
        main,
        ["validate", "--prompt", "greetings earthling",
         "--organ", str(organ_path), "--masks-dir", str(masks_dir)],
    )
    assert result.exit_code == 2


def test_validate_severity_off(runner, scene, wide_heart_organ, tmp_path):
    organ_path, masks_dir = scene
    wrong_severity = (
        "A photo of a Chest X-ray with moderate Cardiomegaly on heart, "
        "severe Fibrosis on right middle lung"
    )
    strict = runner.invoke(
        main,
        ["validate", "--prompt", wrong_severity,
         "--organ", str(organ_path), "--masks-dir", str(masks_dir)],
    )
    assert strict.exit_code == 1
    lenient = runner.invoke(
        main,
        ["validate", "--prompt", wrong_severity, "--severity-mode", "off",
         "--organ", str(organ_path), "--masks-dir", str(masks_dir)],
    )
    assert lenient.exit_code == 0


# --- metrics --------------------------------------------------------------------


def test_metrics_dice_identical(runner, tmp_path):
    pixels = np.zeros((16, 16), dtype=bool)
    pixels[4:9, 3:12] = True
    from cxrsynth.masks import RasterMask

    path = tmp_path / "m.png"
    save_pathology_mask(RasterMask(pixels), path)
    result = runner.invoke(
        main,
        ["metrics", "--task", "dice", "--mask-a", str(path), "--mask-b", str(path)],
    )
    assert result.exit_code == 0
    assert json.loads(result.output)["dice"] == 1.0


def test_metrics_fid_identical_features(runner, tmp_path):
    rng = np.random.default_rng(3)
    features = rng.normal(size=(20, 4))
    path = tmp_path / "features.txt"
    np.savetxt(path, features)
    result = runner.invoke(
        main,
        ["metrics", "--task", "fid", "--features-a", str(path),
         "--features-b", str(path)],
    )
    assert result.exit_code == 0
    assert abs(json.loads(result.output)["fid"]) < 1e-6


def test_metrics_msssim_identity(runner, tmp_path):
    rng = np.random.default_rng(5)
    image = rng.integers(0, 256, size=(192, 192), dtype=np.uint8)
    path = tmp_path / "img.png"
    save_image(image, path)
    result = runner.invoke(
        main,
        ["metrics", "--task", "msssim", "--image-a", str(path),
         "--image-b", str(path)],
    )
    assert result.exit_code == 0
    assert json.loads(result.output)["msssim"] == pytest.approx(1.0, abs=1e-6)


def test_metrics_agreement_fixture(runner, tmp_path):
    icc_path = tmp_path / "icc.csv"
    icc_path.write_text("\n".join(",".join(map(str, row)) for row in ICC_FIXTURE))
    result = runner.invoke(
        main, ["metrics", "--task", "agreement", "--ratings", str(icc_path)]
    )
    assert result.exit_code == 0
    assert json.loads(result.output)["icc"] == pytest.approx(ICC_FIXTURE_VALUE)

    kappa_path = tmp_path / "kappa.csv"
    kappa_path.write_text("\n".join(",".join(map(str, row)) for row in KAPPA_FIXTURE))
    result = runner.invoke(
        main,
        ["metrics", "--task", "agreement", "--ratings", str(kappa_path),
         "--categories", "2"],
    )
    assert result.exit_code == 0
    assert json.loads(result.output)["fleiss_kappa"] == pytest.approx(
        KAPPA_FIXTURE_VALUE
    )


def test_metrics_missing_flag_exit_2(runner):
    result = runner.invoke(main, ["metrics", "--task", "dice"])
    assert result.exit_code == 2


# --- build -----------------------------------------------------------------------


PROMPTS = [
    "A photo of a Chest X-ray with mild Effusion on right lower lung",
    "A photo of a Chest X-ray with moderate Cardiomegaly on heart",
    "A photo of a Chest X-ray with severe Consolidation on bilateral lung",
    "A photo of a Chest X-ray with No Finding",
    "A photo of a Chest X-ray with mild Nodule on left upper lung",
]


@pytest.fixture
def build_inputs(tmp_path, desk_organ):
    organ_path = tmp_path / "organ.png"
    save_organ_map(desk_organ, organ_path)
    requests_path = tmp_path / "requests.txt"
    requests_path.write_text("\n".join(PROMPTS) + "\n")
    return organ_path, requests_path


def test_build_five_requests(runner, tmp_path, build_inputs):
    organ_path, requests_path = build_inputs
    out = tmp_path / "out"
    result = runner.invoke(
        main,
        ["build", "--requests", str(requests_path), "--organs", str(organ_path),
         "--out", str(out), "--seed", "11", "--format", "json"],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    assert payload["counts"]["accepted"] == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["records"]) == 5


def test_build_unwritable_out_exit_3(runner, tmp_path, build_inputs):
    organ_path, requests_path = build_inputs
    # a regular file where a directory is required fails mkdir even for root
    blocked = tmp_path / "blocked"
    blocked.write_text("not a directory")
    result = runner.invoke(
        main,
        ["build", "--requests", str(requests_path), "--organs", str(organ_path),
         "--out", str(blocked / "nested")],
    )
    assert result.exit_code == 3


def test_build_external_command(runner, tmp_path, build_inputs):
    import sys

    from .test_pipeline import EXTERNAL_SCRIPT

    organ_path, requests_path = build_inputs
    script = tmp_path / "backend.py"
    script.write_text(EXTERNAL_SCRIPT)
    out = tmp_path / "ext-out"
    result = runner.invoke(
        main,
        ["build", "--requests", str(requests_path), "--organs", str(organ_path),
         "--backend", "external-command",
         "--backend-cmd", f"{sys.executable} {script}",
         "--out", str(out), "--format", "json"],
    )
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["counts"]["accepted"] == 5


def test_build_filters_reject(runner, tmp_path, build_inputs):
    organ_path, requests_path = build_inputs
    out = tmp_path / "rejected"
    result = runner.invoke(
        main,
        ["build", "--requests", str(requests_path), "--organs", str(organ_path),
         "--filters", "always-fail", "--max-attempts", "2",
         "--out", str(out), "--format", "json"],
    )
    assert result.exit_code == 0
    counts = json.loads(result.output)["counts"]
    assert counts["rejected"] == 5
    assert counts["accepted"] == 0


# --- study subcommands ---------------------------------------------------------------


def test_study_export(runner, tmp_path):
    from cxrsynth.study import StudyState, load_items
    from .test_study import make_media

    media = make_media(tmp_path, count=4)
    spec = [
        {
            "item_id": item.item_id,
            "image": str(item.image_path.relative_to(tmp_path)),
            "overlay": None,
            "source": item.source,
        }
        for item in media
    ]
    items_path = tmp_path / "items.json"
    items_path.write_text(json.dumps(spec))
    journal = tmp_path / "journal.ndjson"
    state = StudyState(load_items(items_path), seed=5, journal_path=journal)
    for _ in range(4):
        payload = state.next_item("r1")
        state.submit("r1", payload["item"]["item_id"], "realism", 4)

    out_csv = tmp_path / "responses.csv"
    result = runner.invoke(
        main,
        ["study", "export", "--items", str(items_path), "--journal", str(journal),
         "--seed", "5", "--out", str(out_csv), "--format", "json"],
    )
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["rows"] == 4
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0] == "rater_id,timestamp,item_id,task,value,source"
    assert len(lines) == 5


def test_version_flag(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
