"""Two-stage generation pipeline: pluggable backends, quality filters,
triplet assembly, and manifest persistence.

Stage 1 (text to mask) is gated by prompt-match self-assessment with bounded
retries; stage 2 (mask to image) retries until a produced image passes every
configured quality filter. Neural generators stay out of process: the stub
backends here are deterministic desk-scale stand-ins, and an external-command
adapter bridges to real models over a subprocess protocol.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import shutil
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .captioning import (
    DEFAULT_POLICY,
    Band,
    Finding,
    Severity,
    SeverityPolicy,
)
from .errors import BackendFailure, ToolkitError, UnplaceableFinding, UnreadableFile
from .grammar import PromptSpec
from .masks import (
    LABEL_BACKGROUND,
    LABEL_HEART,
    LABEL_LEFT_LUNG,
    LABEL_MEDIASTINUM,
    LABEL_RIGHT_LUNG,
    DiseaseClass,
    OrganMap,
    PathologyAnnotation,
    RasterMask,
    bounding_box,
    load_organ_map,
    load_pathology_mask,
    mask_filename,
    masks_by_class,
    parse_mask_filename,
    save_image,
    save_pathology_mask,
)
from .matching import (
    DEFAULT_MATCH_POLICY,
    MatchPolicy,
    MatchReport,
    RetryResult,
    run_with_retries,
)
from .zones import SUB_ZONES_OF, Location, ZoneMap, define_organ_parts

# --- backend and filter contracts ---------------------------------------------


class TextToMaskBackend(Protocol):
    def generate(
        self, prompt: PromptSpec, organ: OrganMap, seed: int
    ) -> list[PathologyAnnotation]: ...


class MaskToImageBackend(Protocol):
    def generate(
        self,
        prompt: PromptSpec,
        organ: OrganMap,
        pathology: Sequence[PathologyAnnotation],
        seed: int,
    ) -> np.ndarray: ...


@dataclass(frozen=True)
class ScorerVerdict:
    score: float
    passed: bool


class QualityScorer(Protocol):
    name: str
    threshold: float

    def score(self, image: np.ndarray, context: Mapping) -> ScorerVerdict: ...


class Serialized:
    """Wraps a backend or scorer so concurrent workers invoke it one at a time."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()

    def __getattr__(self, name):
        value = getattr(self._inner, name)
        if callable(value):
            def locked(*args, **kwargs):
                with self._lock:
                    return value(*args, **kwargs)

            return locked
        return value


# --- deterministic region growth ----------------------------------------------


def _grow_blob(
    allowed: np.ndarray,
    countable: np.ndarray,
    target: int,
    center: tuple[float, float],
    weights: tuple[float, float],
    forbidden: np.ndarray | None = None,
) -> np.ndarray:
    """Grow a connected region by priority flood until ``target`` countable
    pixels are included.

    ``weights`` scale (row, col) offsets in the priority metric, shaping the
    blob (isotropic ellipse, vertical strip, or horizontal band). Raises
    UnplaceableFinding when the reachable region is too small.
    """
    if target < 1:
        raise UnplaceableFinding(f"cannot place a blob of {target} pixels")
    usable = allowed if forbidden is None else (allowed & ~forbidden)
    coords = np.argwhere(usable)
    if coords.size == 0:
        raise UnplaceableFinding("no free pixels available in the target region")
    wr, wc = weights
    cr, cc = center
    metric = (wr * (coords[:, 0] - cr)) ** 2 + (wc * (coords[:, 1] - cc)) ** 2
    seed_r, seed_c = coords[int(np.argmin(metric))]

    h, w = usable.shape
    blob = np.zeros_like(usable)
    visited = np.zeros_like(usable)

    def priority(r: int, c: int) -> tuple[float, int, int]:
        return ((wr * (r - cr)) ** 2 + (wc * (c - cc)) ** 2, r, c)

    frontier = [priority(int(seed_r), int(seed_c))]
    visited[seed_r, seed_c] = True
    count = 0
    while frontier:
        _, r, c = heapq.heappop(frontier)
        blob[r, c] = True
        if countable[r, c]:
            count += 1
            if count >= target:
                return blob
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                nr, nc = r + dr, c + dc
                if 0 <= nr < h and 0 <= nc < w and usable[nr, nc] and not visited[nr, nc]:
                    visited[nr, nc] = True
                    heapq.heappush(frontier, priority(nr, nc))
    raise UnplaceableFinding(
        f"region exhausted at {count}/{target} pixels"
    )


def _count_range(band: Band, zone_area: int, severity: Severity) -> tuple[int, int, float]:
    """Inclusive pixel-count range whose overlap fraction lands in the band,
    plus a mid-band target fraction."""
    mb, sa = band.mild_below, band.severe_above
    if severity is Severity.MILD:
        lo, hi = 1, math.ceil(mb * zone_area) - 1
        mid = mb / 2.0
    elif severity is Severity.MODERATE:
        lo, hi = math.ceil(mb * zone_area), math.floor(sa * zone_area)
        mid = (mb + sa) / 2.0
    else:
        lo, hi = math.floor(sa * zone_area) + 1, zone_area
        mid = sa + (1.0 - sa) / 2.0
    return lo, hi, mid


def _pick_count(band: Band, zone_area: int, severity: Severity) -> int:
    lo, hi, mid = _count_range(band, zone_area, severity)
    if lo < 1 or hi < lo or hi > zone_area:
        raise UnplaceableFinding(
            f"zone of {zone_area}px cannot express a {severity.token} fraction"
        )
    count = min(max(int(round(mid * zone_area)), lo), hi)
    # Guard float edges: nudge within the range until the grade agrees.
    for candidate in (count, count + 1, count - 1):
        if lo <= candidate <= hi and band.grade(candidate / zone_area) is severity:
            return candidate
    raise UnplaceableFinding(
        f"no pixel count in [{lo}, {hi}] of {zone_area}px grades {severity.token}"
    )


# --- stub text-to-mask backend ---------------------------------------------------


@dataclass
class StubTextToMask:
    """Deterministic oracle backend: places blobs that re-caption exactly to
    the requested findings under the active severity policy.

    Sub-zone, heart, and mediastinum findings become compact elliptical blobs
    inside the named zone; major-lung findings become vertical strips touching
    all three sub-zones; bilateral findings become horizontal bands bridging
    both lungs; cardiomegaly dilates the heart horizontally into the requested
    CTR band.
    """

    severity_policy: SeverityPolicy = DEFAULT_POLICY

    def generate(
        self, prompt: PromptSpec, organ: OrganMap, seed: int
    ) -> list[PathologyAnnotation]:
        zones = define_organ_parts(organ)
        annotations: list[PathologyAnnotation] = []
        occupied: dict[DiseaseClass, np.ndarray] = {}
        for index, finding in enumerate(prompt.findings):
            if finding.is_no_finding:
                continue
            rng = np.random.default_rng([seed % (2**63), index])
            if finding.disease is DiseaseClass.CARDIOMEGALY:
                if finding.location is not Location.HEART:
                    raise UnplaceableFinding(
                        "cardiomegaly is only realizable on the heart"
                    )
                pixels = self._cardiomegaly_pixels(organ, finding.severity)
            else:
                pixels = self._lesion_pixels(
                    organ, zones, finding, rng, occupied.get(finding.disease)
                )
            previous = occupied.get(finding.disease)
            grown = ndimage.binary_dilation(pixels, np.ones((3, 3), dtype=bool))
            occupied[finding.disease] = grown if previous is None else (previous | grown)
            annotations.append(
                PathologyAnnotation(finding.disease, RasterMask(pixels))
            )
        return annotations

    # -- placement helpers --

    def _lesion_pixels(
        self,
        organ: OrganMap,
        zones: ZoneMap,
        finding: Finding,
        rng: np.random.Generator,
        forbidden: np.ndarray | None,
    ) -> np.ndarray:
        band = self.severity_policy.band_for(finding.disease)
        location = finding.location
        if location is Location.BILATERAL_LUNG:
            return self._bilateral_band(organ, zones, band, finding.severity, rng, forbidden)
        if location in SUB_ZONES_OF:
            return self._lung_strip(zones, location, band, finding.severity, rng, forbidden)
        zone = zones[location]
        zone_area = int(np.count_nonzero(zone.pixels))
        if zone_area == 0:
            raise UnplaceableFinding(f"zone {location.token!r} is empty")
        count = _pick_count(band, zone_area, finding.severity)
        box = bounding_box(zone)
        center = self._jittered_center(zone.pixels, rng)
        weights = (1.0 / max(1.0, box.height / 2.0), 1.0 / max(1.0, box.width / 2.0))
        return _grow_blob(zone.pixels, zone.pixels, count, center, weights, forbidden)

    def _lung_strip(
        self,
        zones: ZoneMap,
        lung: Location,
        band: Band,
        severity: Severity,
        rng: np.random.Generator,
        forbidden: np.ndarray | None,
    ) -> np.ndarray:
        zone = zones[lung]
        zone_area = int(np.count_nonzero(zone.pixels))
        if zone_area == 0:
            raise UnplaceableFinding(f"zone {lung.token!r} is empty")
        count = _pick_count(band, zone_area, severity)
        box = bounding_box(zone)
        cr = (box.min_row + box.max_row) / 2.0
        cc = self._jitter_value(
            (box.min_col + box.max_col) / 2.0, box.width / 6.0, rng
        )
        # Column-first growth: the strip spans the lung's full height before
        # widening, so all three sub-zones are touched.
        weights = (1.0, float(box.height + 1))
        return _grow_blob(zone.pixels, zone.pixels, count, (cr, cc), weights, forbidden)

    def _bilateral_band(
        self,
        organ: OrganMap,
        zones: ZoneMap,
        band: Band,
        severity: Severity,
        rng: np.random.Generator,
        forbidden: np.ndarray | None,
    ) -> np.ndarray:
        bilateral = zones[Location.BILATERAL_LUNG]
        zone_area = int(np.count_nonzero(bilateral.pixels))
        if zone_area == 0:
            raise UnplaceableFinding("no lung pixels for a bilateral finding")
        count = _pick_count(band, zone_area, severity)
        box = bounding_box(bilateral)
        # The band may bridge non-lung tissue between the lungs; only lung
        # pixels count toward the target fraction.
        allowed = np.zeros_like(bilateral.pixels)
        allowed[box.min_row : box.max_row + 1, box.min_col : box.max_col + 1] = True
        cr = self._jitter_value(
            (box.min_row + box.max_row) / 2.0, box.height / 6.0, rng
        )
        cc = (box.min_col + box.max_col) / 2.0
        weights = (float(box.width + 1), 1.0)
        blob = _grow_blob(allowed, bilateral.pixels, count, (cr, cc), weights, forbidden)
        left = int(np.count_nonzero(blob & zones[Location.LEFT_LUNG].pixels))
        right = int(np.count_nonzero(blob & zones[Location.RIGHT_LUNG].pixels))
        floor = self.severity_policy.lung_epsilon * int(np.count_nonzero(blob))
        if left < floor or right < floor or left == 0 or right == 0:
            raise UnplaceableFinding(
                "band could not involve both lungs beyond the epsilon floor"
            )
        return blob

    def _cardiomegaly_pixels(self, organ: OrganMap, severity: Severity) -> np.ndarray:
        heart = organ.organ_mask(LABEL_HEART)
        heart_box = bounding_box(heart)
        if heart_box is None:
            raise UnplaceableFinding("organ map has no heart")
        lungs_box = bounding_box(organ.lungs_mask())
        if lungs_box is None:
            raise UnplaceableFinding("organ map has no lungs")
        thorax = lungs_box.width
        ctr_band = self.severity_policy.ctr_band
        current = heart_box.width / thorax
        if severity is Severity.MILD:
            if ctr_band.grade(current) is not Severity.MILD:
                raise UnplaceableFinding(
                    f"resting heart is too wide (CTR {current:.3f}) for mild"
                )
            return heart.pixels.copy()
        mb, sa = ctr_band.mild_below, ctr_band.severe_above
        if severity is Severity.MODERATE:
            lo, hi = math.ceil(mb * thorax), math.floor(sa * thorax)
            mid = (mb + sa) / 2.0
        else:
            lo, hi = math.floor(sa * thorax) + 1, organ.width
            mid = sa + 0.05
        width = min(max(int(round(mid * thorax)), lo), hi)
        if lo > hi or width < heart_box.width:
            raise UnplaceableFinding(
                f"heart width {heart_box.width}px cannot be dilated into the "
                f"{severity.token} CTR band"
            )
        pixels = self._stretch_heart(organ, heart, heart_box, width)
        stretched_box = bounding_box(RasterMask(pixels))
        achieved = stretched_box.width / thorax
        if ctr_band.grade(achieved) is not severity:
            raise UnplaceableFinding(
                f"dilated heart CTR {achieved:.3f} misses the {severity.token} band"
            )
        return pixels

    @staticmethod
    def _stretch_heart(
        organ: OrganMap, heart: RasterMask, box, width: int
    ) -> np.ndarray:
        sub = heart.pixels[box.min_row : box.max_row + 1, box.min_col : box.max_col + 1]
        centers = (np.arange(width) + 0.5) * (box.width / width)
        col_map = np.minimum(np.floor(centers).astype(int), box.width - 1)
        scaled = sub[:, col_map]
        canvas = np.zeros((organ.height, organ.width), dtype=bool)
        start = int(round((box.min_col + box.max_col) / 2.0 - (width - 1) / 2.0))
        src_lo = max(0, -start)
        dst_lo = max(0, start)
        dst_hi = min(organ.width, start + width)
        canvas[box.min_row : box.max_row + 1, dst_lo:dst_hi] = scaled[
            :, src_lo : src_lo + (dst_hi - dst_lo)
        ]
        return canvas

    @staticmethod
    def _jitter_value(value: float, span: float, rng: np.random.Generator) -> float:
        return value + float(rng.uniform(-span, span))

    def _jittered_center(
        self, zone: np.ndarray, rng: np.random.Generator
    ) -> tuple[float, float]:
        rows, cols = np.nonzero(zone)
        cr, cc = float(rows.mean()), float(cols.mean())
        return (
            self._jitter_value(cr, (rows.max() - rows.min() + 1) / 8.0, rng),
            self._jitter_value(cc, (cols.max() - cols.min() + 1) / 8.0, rng),
        )


def stub_text_to_mask(
    prompt: PromptSpec,
    organ: OrganMap,
    seed: int,
    severity_policy: SeverityPolicy = DEFAULT_POLICY,
) -> list[PathologyAnnotation]:
    """Functional form of the stub backend."""
    return StubTextToMask(severity_policy).generate(prompt, organ, seed)


# --- stub mask-to-image backend ----------------------------------------------

_ORGAN_GRAY = {
    LABEL_BACKGROUND: 30,
    LABEL_LEFT_LUNG: 85,
    LABEL_RIGHT_LUNG: 85,
    LABEL_HEART: 175,
    LABEL_MEDIASTINUM: 150,
}
_LESION_BOOST = 55
_NOISE_SIGMA = 2.0


@dataclass
class StubMaskToImage:
    """Deterministic grayscale renderer: organ shading plus lesion boosts
    and seeded sensor noise."""

    def generate(
        self,
        prompt: PromptSpec,
        organ: OrganMap,
        pathology: Sequence[PathologyAnnotation],
        seed: int,
    ) -> np.ndarray:
        canvas = np.zeros(organ.shape, dtype=np.float64)
        for label, gray in _ORGAN_GRAY.items():
            canvas[organ.labels == label] = gray
        for ann in pathology:
            canvas[ann.mask.pixels] += _LESION_BOOST
        rng = np.random.default_rng([seed % (2**63), organ.width, organ.height])
        canvas += rng.normal(0.0, _NOISE_SIGMA, size=canvas.shape)
        return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


# --- quality scorers -----------------------------------------------------------


@dataclass
class AlwaysPassScorer:
    name: str = "always-pass"
    threshold: float = 0.0

    def score(self, image: np.ndarray, context: Mapping) -> ScorerVerdict:
        return ScorerVerdict(1.0, True)


@dataclass
class AlwaysFailScorer:
    name: str = "always-fail"
    threshold: float = 2.0

    def score(self, image: np.ndarray, context: Mapping) -> ScorerVerdict:
        return ScorerVerdict(0.0, False)


@dataclass
class MinDynamicRangeScorer:
    """Realism-slot stand-in: rejects images whose gray range is too narrow."""

    min_range: float = 50.0
    name: str = "min-dynamic-range"

    @property
    def threshold(self) -> float:
        return self.min_range / 255.0

    def score(self, image: np.ndarray, context: Mapping) -> ScorerVerdict:
        span = (float(image.max()) - float(image.min())) / 255.0
        return ScorerVerdict(span, span >= self.threshold)


class ScriptedScorer:
    """Test scorer following a fixed pass/fail schedule per call."""

    def __init__(self, outcomes: Sequence[bool], name: str = "scripted"):
        self.name = name
        self.threshold = 0.5
        self._outcomes = list(outcomes)
        self._calls = 0

    def score(self, image: np.ndarray, context: Mapping) -> ScorerVerdict:
        outcome = (
            self._outcomes[self._calls]
            if self._calls < len(self._outcomes)
            else self._outcomes[-1]
        )
        self._calls += 1
        return ScorerVerdict(1.0 if outcome else 0.0, outcome)


def scorer_from_spec(spec: str) -> QualityScorer:
    """Build a scorer from a CLI spec: ``always-pass``, ``always-fail``, or
    ``min-dynamic-range:<0-255>``."""
    name, _, arg = spec.partition(":")
    if name == "always-pass":
        return AlwaysPassScorer()
    if name == "always-fail":
        return AlwaysFailScorer()
    if name == "min-dynamic-range":
        return MinDynamicRangeScorer(min_range=float(arg) if arg else 50.0)
    raise ValueError(f"unknown filter spec {spec!r}")


# --- external text-to-mask backend ----------------------------------------------


@dataclass
class ExternalCommandTextToMask:
    """Bridges to an out-of-process generator.

    Protocol: the command receives one JSON object on stdin
    ``{"prompt": str, "organ_path": str, "seed": int, "out_dir": str}`` and
    prints the produced mask file paths on stdout, one per line. Each file
    must follow the ``<sample>__<ClassToken>.png`` naming convention and the
    grayscale >127 foreground format.
    """

    command: Sequence[str]

    def generate(
        self, prompt: PromptSpec, organ: OrganMap, seed: int
    ) -> list[PathologyAnnotation]:
        from .masks import save_organ_map

        with tempfile.TemporaryDirectory(prefix="cxrsynth-t2m-") as tmp:
            organ_path = Path(tmp) / "organ.png"
            save_organ_map(organ, organ_path)
            request = {
                "prompt": prompt.raw_text,
                "organ_path": str(organ_path),
                "seed": seed,
                "out_dir": tmp,
            }
            proc = subprocess.run(
                list(self.command),
                input=json.dumps(request),
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise RuntimeError(
                    f"mask backend exited {proc.returncode}: {proc.stderr.strip()}"
                )
            annotations = []
            for line in proc.stdout.splitlines():
                line = line.strip()
                if not line:
                    continue
                _, disease = parse_mask_filename(line)
                annotations.append(load_pathology_mask(line, disease, organ))
            return annotations


# --- pipeline orchestration ------------------------------------------------------


@dataclass(frozen=True)
class FilterVerdict:
    name: str
    score: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "score": self.score, "passed": self.passed}


class Rejection(ToolkitError):
    """A request exhausted its retry budget at one of the two stages."""

    def __init__(
        self,
        stage: str,
        attempts_used: int,
        match_reports: Sequence[MatchReport] = (),
        filter_history: Sequence[Sequence[FilterVerdict]] = (),
    ):
        self.stage = stage
        self.attempts_used = attempts_used
        self.match_reports = list(match_reports)
        self.filter_history = [list(v) for v in filter_history]
        super().__init__(f"rejected at {stage} stage after {attempts_used} attempts")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "attempts_used": self.attempts_used,
            "match_reports": [r.to_dict() for r in self.match_reports],
            "filter_history": [
                [v.to_dict() for v in attempt] for attempt in self.filter_history
            ],
        }


@dataclass
class PipelineProduct:
    """In-memory result of one accepted request."""

    prompt: PromptSpec
    annotations: list[PathologyAnnotation]
    image: np.ndarray
    mask_attempts: int
    image_attempts: int
    match_reports: list[MatchReport]
    filter_verdicts: list[FilterVerdict]
    seed: int


def run_pipeline(
    request: PromptSpec,
    organ: OrganMap,
    t2m: TextToMaskBackend,
    m2i: MaskToImageBackend,
    filters: Sequence[QualityScorer] = (),
    max_attempts_stage1: int = 5,
    max_attempts_stage2: int = 5,
    seed: int = 0,
    match_policy: MatchPolicy = DEFAULT_MATCH_POLICY,
    severity_policy: SeverityPolicy = DEFAULT_POLICY,
) -> PipelineProduct:
    """Drive one request through both stages.

    Stage-1 attempt ``i`` uses seed ``seed + i``; stage-2 attempt ``j`` uses
    seed ``seed + max_attempts_stage1 + j``, so the two streams never collide
    and a rerun replays identically. The accepted stage-1 mask set is reused
    across stage-2 retries.
    """
    if max_attempts_stage2 < 1:
        raise ValueError(f"max_attempts_stage2 must be >= 1, got {max_attempts_stage2}")
    stage1: RetryResult = run_with_retries(
        request, organ, t2m, max_attempts_stage1, seed, match_policy, severity_policy
    )
    if stage1.accepted is None:
        raise Rejection("mask", stage1.attempts_used, match_reports=stage1.reports)
    annotations = stage1.accepted

    history: list[list[FilterVerdict]] = []
    for attempt in range(max_attempts_stage2):
        image_seed = seed + max_attempts_stage1 + attempt
        try:
            image = m2i.generate(request, organ, annotations, image_seed)
        except Exception as exc:
            raise BackendFailure(attempt, exc) from exc
        context = {
            "prompt": request,
            "organ": organ,
            "annotations": annotations,
            "seed": image_seed,
        }
        verdicts = []
        for scorer in filters:
            verdict = scorer.score(image, context)
            verdicts.append(FilterVerdict(scorer.name, verdict.score, verdict.passed))
        history.append(verdicts)
        if all(v.passed for v in verdicts):
            return PipelineProduct(
                prompt=request,
                annotations=annotations,
                image=image,
                mask_attempts=stage1.attempts_used,
                image_attempts=attempt + 1,
                match_reports=stage1.reports,
                filter_verdicts=verdicts,
                seed=seed,
            )
    raise Rejection(
        "image",
        max_attempts_stage2,
        match_reports=stage1.reports,
        filter_history=history,
    )


# --- dataset assembly -------------------------------------------------------------

_SAMPLE_SEED_STRIDE = 100003  # prime > any sane per-sample attempt budget


def _sample_seed(base: int, index: int) -> int:
    return base + index * _SAMPLE_SEED_STRIDE


def canonical_manifest_bytes(manifest: Mapping) -> bytes:
    """Timestamp-free canonical serialization used for determinism checks."""
    trimmed = {k: v for k, v in manifest.items() if k != "created"}
    return json.dumps(trimmed, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_manifest(manifest: Mapping, path: Path) -> None:
    """Atomic write with sorted keys and a trailing newline."""
    payload = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def build_dataset(
    requests: Sequence[PromptSpec],
    organ_paths: Sequence[Path | str],
    t2m: TextToMaskBackend,
    m2i: MaskToImageBackend,
    filters: Sequence[QualityScorer] = (),
    out_dir: Path | str = "dataset",
    seed: int = 0,
    max_attempts_stage1: int = 5,
    max_attempts_stage2: int = 5,
    match_policy: MatchPolicy = DEFAULT_MATCH_POLICY,
    severity_policy: SeverityPolicy = DEFAULT_POLICY,
    workers: int = 1,
) -> dict:
    """Generate one triplet per request and persist the dataset.

    Sample ``k`` uses organ ``organ_paths[k % len]`` and base seed
    ``seed + k * 100003``. Accepted samples land in the manifest; rejections
    (including isolated per-sample I/O failures) go to ``rejections.ndjson``.
    The manifest is written atomically once at the end; reruns with identical
    inputs produce identical canonical manifests.
    """
    if not organ_paths:
        raise ValueError("build_dataset needs at least one organ map")
    out = Path(out_dir)
    (out / "organs").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)

    organs: dict[str, OrganMap] = {}
    for path in organ_paths:
        key = str(path)
        if key not in organs:
            organs[key] = load_organ_map(path)

    def process(index: int, request: PromptSpec) -> tuple[int, dict | None, dict | None]:
        sample_id = f"s{index:04d}"
        organ_path = Path(str(organ_paths[index % len(organ_paths)]))
        organ = organs[str(organ_path)]
        sample_seed = _sample_seed(seed, index)
        base = {"sample_id": sample_id, "prompt": request.raw_text}
        try:
            product = run_pipeline(
                request,
                organ,
                t2m,
                m2i,
                filters,
                max_attempts_stage1=max_attempts_stage1,
                max_attempts_stage2=max_attempts_stage2,
                seed=sample_seed,
                match_policy=match_policy,
                severity_policy=severity_policy,
            )
        except Rejection as rej:
            return index, None, {**base, **rej.to_dict()}
        except (OSError, UnreadableFile, BackendFailure) as exc:
            return index, None, {
                **base,
                "stage": "error",
                "attempts_used": 0,
                "error": f"{type(exc).__name__}: {exc}",
            }
        try:
            organ_copy = out / "organs" / organ_path.name
            if not organ_copy.exists():
                shutil.copyfile(organ_path, organ_copy)
            mask_paths: dict[str, str] = {}
            for disease, mask in sorted(
                masks_by_class(product.annotations).items(), key=lambda kv: kv[0].token
            ):
                rel = f"masks/{mask_filename(sample_id, disease)}"
                save_pathology_mask(mask, out / rel)
                mask_paths[disease.token] = rel
            image_rel = f"images/{sample_id}.png"
            save_image(product.image, out / image_rel)
        except OSError as exc:
            return index, None, {
                **base,
                "stage": "io",
                "attempts_used": 0,
                "error": f"{type(exc).__name__}: {exc}",
            }
        record = {
            **base,
            "findings": [
                {
                    "class": f.disease.token,
                    "severity": None if f.severity is None else f.severity.token,
                    "location": None if f.location is None else f.location.token,
                }
                for f in request.findings
            ],
            "organ": f"organs/{organ_path.name}",
            "masks": mask_paths,
            "image": image_rel,
            "seed": sample_seed,
            "attempts": {
                "mask": product.mask_attempts,
                "image": product.image_attempts,
            },
            "filters": [v.to_dict() for v in product.filter_verdicts],
            "provenance": "synthesized",
        }
        return index, record, None

    results: list[tuple[int, dict | None, dict | None]] = []
    if workers <= 1:
        for index, request in enumerate(requests):
            results.append(process(index, request))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(process, index, request)
                for index, request in enumerate(requests)
            ]
            results = [f.result() for f in futures]
    results.sort(key=lambda item: item[0])

    records = [record for _, record, _ in results if record is not None]
    rejections = [rej for _, _, rej in results if rej is not None]

    with open(out / "rejections.ndjson", "w", encoding="utf-8") as fh:
        for rej in rejections:
            fh.write(json.dumps(rej, sort_keys=True) + "\n")

    manifest = {
        "version": 1,
        "created": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "policy": {
            "severity": severity_policy.to_dict(),
            "match": {
                "severity_mode": match_policy.severity_mode,
                "location_mode": match_policy.location_mode,
            },
            "max_attempts": {
                "mask": max_attempts_stage1,
                "image": max_attempts_stage2,
            },
            "filters": [scorer.name for scorer in filters],
        },
        "counts": {
            "requested": len(requests),
            "accepted": len(records),
            "rejected": len(rejections),
        },
        "records": records,
    }
    write_manifest(manifest, out / "manifest.json")
    return manifest
