"""Acceptance suite.

Each test enforces one acceptance criterion at its stated tolerance and time
budget and prints a single pass/fail line (visible with ``pytest -s`` or in
captured output on failure).
"""

from __future__ import annotations

import io
import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from cxrsynth.captioning import Finding, Severity, caption, grade_severity
from cxrsynth.cli import main as cli_main
from cxrsynth.errors import UnplaceableFinding
from cxrsynth.grammar import PromptSpec, parse, render
from cxrsynth.masks import (
    DiseaseClass,
    OrganMap,
    PathologyAnnotation,
    RasterMask,
    save_organ_map,
    save_pathology_mask,
)
from cxrsynth.matching import run_with_retries
from cxrsynth.metrics import (
    FeatureGaussian,
    RatingMatrix,
    binarize_realism,
    dice,
    fleiss_kappa,
    frechet_distance,
    gaussian_stats,
    icc_2_1,
    iou,
    ms_ssim,
)
from cxrsynth.pipeline import StubTextToMask, canonical_manifest_bytes
from cxrsynth.study import StudyState, create_app
from cxrsynth.zones import Location

from .bruteforce import bruteforce_caption
from .conftest import make_organ
from .test_metrics import (
    ICC_FIXTURE,
    ICC_FIXTURE_MS_E,
    ICC_FIXTURE_MS_R,
    ICC_FIXTURE_VALUE,
    KAPPA_FIXTURE,
    KAPPA_FIXTURE_P_BAR,
    KAPPA_FIXTURE_P_BAR_E,
    KAPPA_FIXTURE_VALUE,
)
from .test_study import make_media


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"[ACCEPTANCE] {name}: PASS")


# --- 1. grammar round-trip ------------------------------------------------------------


def test_grammar_round_trip():
    with criterion("grammar-round-trip"):
        rng = np.random.default_rng(2024)
        classes = DiseaseClass.pathology_classes()
        severities = list(Severity)
        locations = list(Location)
        started = time.monotonic()
        for _ in range(1000):
            findings = [
                Finding(
                    classes[int(rng.integers(len(classes)))],
                    severities[int(rng.integers(3))],
                    locations[int(rng.integers(11))],
                )
                for _ in range(int(rng.integers(1, 5)))
            ]
            assert parse(render(findings)) == findings
        elapsed = time.monotonic() - started
        assert elapsed < 5.0, f"round-trip took {elapsed:.2f}s"


# --- 2. captioning vs brute-force oracle -------------------------------------------------


def _random_scene(rng):
    labels = np.zeros((64, 64), dtype=np.uint8)
    lr0, lh = int(rng.integers(4, 12)), int(rng.integers(24, 46))
    lc0, lw = int(rng.integers(2, 8)), int(rng.integers(12, 22))
    labels[lr0 : lr0 + lh, lc0 : lc0 + lw] = 1
    rr0, rh = int(rng.integers(4, 12)), int(rng.integers(24, 46))
    rc1, rw = int(rng.integers(56, 63)), int(rng.integers(12, 22))
    labels[rr0 : rr0 + rh, rc1 - rw : rc1] = 2
    if rng.random() < 0.9:
        mr0, mh = int(rng.integers(4, 10)), int(rng.integers(10, 30))
        mc0, mw = int(rng.integers(26, 32)), int(rng.integers(6, 12))
        labels[mr0 : mr0 + mh, mc0 : mc0 + mw] = 4
    if rng.random() < 0.9:
        hr0, hh = int(rng.integers(30, 42)), int(rng.integers(10, 22))
        hc0, hw = int(rng.integers(22, 30)), int(rng.integers(8, 18))
        labels[hr0 : hr0 + hh, hc0 : hc0 + hw] = 3

    classes = DiseaseClass.pathology_classes()
    annotations = []
    for _ in range(int(rng.integers(1, 5))):
        disease = classes[int(rng.integers(len(classes)))]
        pixels = np.zeros((64, 64), dtype=bool)
        for _ in range(int(rng.integers(1, 3))):
            r0, c0 = int(rng.integers(0, 58)), int(rng.integers(0, 58))
            rh_, cw_ = int(rng.integers(3, 20)), int(rng.integers(3, 20))
            pixels[r0 : r0 + rh_, c0 : c0 + cw_] = True
        annotations.append((disease, pixels))
    return labels, annotations


def test_algorithm_oracle_equivalence():
    with criterion("captioning-oracle-equivalence"):
        rng = np.random.default_rng(9177)
        started = time.monotonic()
        for _ in range(500):
            labels, raw = _random_scene(rng)
            organ = OrganMap(labels)
            annotations = [
                PathologyAnnotation(disease, RasterMask(pixels))
                for disease, pixels in raw
            ]
            got = [
                (
                    f.disease.token,
                    None if f.severity is None else f.severity.token,
                    None if f.location is None else f.location.token,
                )
                for f in caption(organ, annotations)
            ]
            expected = bruteforce_caption(
                labels.tolist(),
                [(disease.token, pixels.tolist()) for disease, pixels in raw],
            )
            assert got == expected
        elapsed = time.monotonic() - started
        assert elapsed < 30.0, f"500 scenes took {elapsed:.2f}s"


# --- 3. CTR bands --------------------------------------------------------------------------


def test_ctr_bands():
    with criterion("ctr-severity-bands"):
        cases = {
            0.49: Severity.MILD,
            0.50: Severity.MODERATE,
            0.55: Severity.MODERATE,
            0.551: Severity.SEVERE,
        }
        for ratio, expected in cases.items():
            assert grade_severity(DiseaseClass.CARDIOMEGALY, ctr=ratio) is expected


# --- 4. closed generation loop ----------------------------------------------------------------


def test_closed_generation_loop():
    with criterion("closed-generation-loop"):
        organ = make_organ()
        stub = StubTextToMask()
        started = time.monotonic()
        realizable = 0
        unplaceable = []
        for disease in DiseaseClass.pathology_classes():
            for location in Location:
                for severity in Severity:
                    finding = Finding(disease, severity, location)
                    prompt = PromptSpec.from_findings([finding])
                    try:
                        masks = stub.generate(prompt, organ, seed=404)
                    except UnplaceableFinding:
                        unplaceable.append(finding)
                        continue
                    assert caption(organ, masks) == [finding]
                    realizable += 1
        # No Finding closes trivially
        empty_prompt = PromptSpec.from_findings([Finding.no_finding()])
        assert stub.generate(empty_prompt, organ, seed=404) == []
        assert caption(organ, []) == [Finding.no_finding()]

        # on this anatomy only cardiomegaly away from the heart is unrealizable
        assert realizable == 13 * 11 * 3 - len(unplaceable)
        assert all(
            f.disease is DiseaseClass.CARDIOMEGALY and f.location is not Location.HEART
            for f in unplaceable
        )
        elapsed = time.monotonic() - started
        assert elapsed < 60.0, f"closed loop took {elapsed:.2f}s"


# --- 5. metric identities ------------------------------------------------------------------------


def test_metric_identities():
    with criterion("metric-identities"):
        rng = np.random.default_rng(515)
        a = RasterMask(rng.random((24, 24)) < 0.4)
        assert dice(a, a) == 1.0
        assert iou(a, a) == 1.0
        for _ in range(1000):
            x = RasterMask(rng.random((16, 16)) < 0.4)
            y = RasterMask(rng.random((16, 16)) < 0.4)
            assert dice(x, y) >= iou(x, y)
        image = rng.integers(0, 256, size=(192, 192), dtype=np.uint8)
        assert abs(ms_ssim(image, image) - 1.0) <= 1e-6
        g = gaussian_stats(rng.normal(size=(30, 5)))
        assert abs(frechet_distance(g, g)) <= 1e-6
        for mu1, mu2, var1, var2 in ((0.0, 1.0, 1.0, 1.0), (0.0, 0.0, 1.0, 4.0),
                                     (2.0, -1.0, 0.25, 2.25)):
            p = FeatureGaussian([mu1], [[var1]])
            q = FeatureGaussian([mu2], [[var2]])
            expected = (mu1 - mu2) ** 2 + (np.sqrt(var1) - np.sqrt(var2)) ** 2
            assert abs(frechet_distance(p, q) - expected) <= 1e-9


# --- 6. agreement oracles ----------------------------------------------------------------------------


def test_agreement_oracles():
    with criterion("agreement-oracles"):
        unanimous = icc_2_1(RatingMatrix([[1, 1, 1], [5, 5, 5], [3, 3, 3]]))
        assert unanimous.icc == pytest.approx(1.0, abs=1e-12)
        kappa_unanimous = fleiss_kappa(
            RatingMatrix([[1, 1, 1], [0, 0, 0], [1, 1, 1]]), categories=2
        )
        assert kappa_unanimous.fleiss_kappa == pytest.approx(1.0, abs=1e-12)

        stats = icc_2_1(RatingMatrix(ICC_FIXTURE))
        assert stats.ms_r == pytest.approx(ICC_FIXTURE_MS_R, abs=1e-9)
        assert stats.ms_e == pytest.approx(ICC_FIXTURE_MS_E, abs=1e-9)
        assert stats.icc == pytest.approx(ICC_FIXTURE_VALUE, abs=1e-9)

        tally = fleiss_kappa(RatingMatrix(KAPPA_FIXTURE), categories=2)
        assert tally.p_bar == pytest.approx(KAPPA_FIXTURE_P_BAR, abs=1e-9)
        assert tally.p_bar_e == pytest.approx(KAPPA_FIXTURE_P_BAR_E, abs=1e-9)
        assert tally.fleiss_kappa == pytest.approx(KAPPA_FIXTURE_VALUE, abs=1e-9)

        # published task-II per-rater rates average to the reported 0.41
        assert np.mean([0.34, 0.56, 0.34]) == pytest.approx(0.41, abs=0.005)


# --- 7. retry-loop contract ------------------------------------------------------------------------------


class _Scripted:
    def __init__(self, schedule):
        self.schedule = schedule
        self.calls = 0

    def generate(self, prompt, organ, seed):
        result = self.schedule[min(self.calls, len(self.schedule) - 1)]
        self.calls += 1
        return result


def _serialize_retry(result) -> bytes:
    payload = {
        "attempts_used": result.attempts_used,
        "reports": [r.to_dict() for r in result.reports],
        "masks": None,
    }
    if result.accepted is not None:
        buffers = []
        for ann in result.accepted:
            buffer = io.BytesIO()
            save_pathology_mask(ann.mask, buffer)
            buffers.append([ann.disease.token, buffer.getvalue().hex()])
        payload["masks"] = buffers
    return json.dumps(payload, sort_keys=True).encode()


def test_retry_loop_contract():
    with criterion("retry-loop-contract"):
        organ = make_organ()
        prompt = PromptSpec.from_text(
            "A photo of a Chest X-ray with mild Effusion on right lower lung"
        )
        good = StubTextToMask().generate(prompt, organ, seed=88)
        bad = []  # recaption becomes No Finding -> mismatch

        early = _Scripted([good])
        result = run_with_retries(prompt, organ, early, max_attempts=5, seed=1)
        assert result.attempts_used == 1 and early.calls == 1

        exhausted = _Scripted([bad])
        result = run_with_retries(prompt, organ, exhausted, max_attempts=5, seed=1)
        assert result.accepted is None
        assert result.attempts_used == 5 and exhausted.calls == 5
        assert len(result.reports) == 5

        third = _Scripted([bad, bad, good])
        result = run_with_retries(prompt, organ, third, max_attempts=5, seed=1)
        assert result.attempts_used == 3 and third.calls == 3

        # byte-identical replay through the real stub backend
        stub = StubTextToMask()
        first = _serialize_retry(
            run_with_retries(prompt, organ, stub, max_attempts=3, seed=777)
        )
        second = _serialize_retry(
            run_with_retries(prompt, organ, stub, max_attempts=3, seed=777)
        )
        assert first == second


# --- 8. manifest determinism ---------------------------------------------------------------------------------


BUILD_PROMPTS = [
    "A photo of a Chest X-ray with mild Effusion on right lower lung",
    "A photo of a Chest X-ray with moderate Cardiomegaly on heart",
    "A photo of a Chest X-ray with severe Consolidation on bilateral lung",
    "A photo of a Chest X-ray with No Finding",
    "A photo of a Chest X-ray with mild Cardiomegaly on left lung",  # unrealizable
    "A photo of a Chest X-ray with moderate Mass on left middle lung",
]


def test_manifest_determinism(tmp_path):
    with criterion("manifest-determinism"):
        organ_path = tmp_path / "organ.png"
        save_organ_map(make_organ(), organ_path)
        requests_path = tmp_path / "requests.txt"
        requests_path.write_text("\n".join(BUILD_PROMPTS) + "\n")
        runner = CliRunner()
        manifests = []
        for name in ("run1", "run2"):
            out = tmp_path / name
            result = runner.invoke(
                cli_main,
                ["build", "--requests", str(requests_path),
                 "--organs", str(organ_path), "--out", str(out),
                 "--seed", "321", "--max-attempts", "2", "--format", "json"],
            )
            assert result.exit_code == 0, result.output
            manifests.append(json.loads((out / "manifest.json").read_text()))
        assert canonical_manifest_bytes(manifests[0]) == canonical_manifest_bytes(
            manifests[1]
        )
        counts = manifests[0]["counts"]
        assert counts["accepted"] + counts["rejected"] == counts["requested"] == 6
        assert counts["rejected"] == 1  # the unrealizable cardiomegaly request


# --- 9. study blinding (secondary-facing surface) ------------------------------------------------------------------


def _collect_strings(value):
    if isinstance(value, dict):
        for key, sub in value.items():
            yield key
            yield from _collect_strings(sub)
    elif isinstance(value, list):
        for sub in value:
            yield from _collect_strings(sub)
    elif isinstance(value, str):
        yield value


def test_study_blinding(tmp_path):
    with criterion("study-blinding"):
        items = make_media(tmp_path, count=20)
        state = StudyState(items, seed=606, journal_path=tmp_path / "journal.ndjson")
        client = TestClient(create_app(state))

        payloads = []
        raters = [f"rater{i}" for i in range(48)]
        for rater in raters:
            if len(payloads) >= 1000:
                break
            while True:
                payload = client.get(f"/api/session/{rater}/next").json()
                payloads.append(payload)
                if payload["done"]:
                    break
                client.post(
                    f"/api/session/{rater}/response",
                    json={
                        "item_id": payload["item"]["item_id"],
                        "task": "realism",
                        "value": int(1 + (len(payloads) % 5)),
                    },
                )
        assert len(payloads) >= 1000
        for payload in payloads:
            raw = json.dumps(payload)
            assert "real_bucket" not in raw and "synth_bucket" not in raw
            assert "real_0" not in raw and "real_1" not in raw
            assert "synth_0" not in raw and "synth_1" not in raw
            assert ".png" not in raw
            strings = list(_collect_strings(payload))
            assert "source" not in strings
            assert "real" not in strings
            assert "synthesized" not in strings

        # dedicated 3-rater x 20-item realism session
        session_state = StudyState(items, seed=11)
        rng = np.random.default_rng(31)
        ratings: dict[str, list[int]] = {}
        for rater in ("A", "B", "C"):
            values = []
            while True:
                payload = session_state.next_item(rater)
                if payload["done"]:
                    break
                value = int(rng.integers(1, 6))
                session_state.submit(
                    rater, payload["item"]["item_id"], "realism", value
                )
                values.append(value)
            ratings[rater] = values
        csv_text = session_state.export_csv()
        lines = csv_text.strip().splitlines()
        assert lines[0] == "rater_id,timestamp,item_id,task,value,source"
        assert len(lines) == 1 + 60

        sources = {item.item_id: item.source for item in items}
        per_rater_values: dict[str, list[int]] = {"A": [], "B": [], "C": []}
        for line in lines[1:]:
            rater_id, _ts, item_id, task, value, source = line.split(",")
            assert task == "realism"
            assert source == sources[item_id]
            per_rater_values[rater_id].append(int(value))
        summary = session_state.summarize()
        for rater, values in per_rater_values.items():
            expected = float(np.mean(binarize_realism(values)))
            assert summary["realism_rates"][rater] == pytest.approx(expected)
