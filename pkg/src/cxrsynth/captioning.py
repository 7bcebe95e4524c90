"""Rule-based conversion of (organ map, lesion masks) into findings.

The converter analyzes per-zone overlap of each lesion component, selects a
location (with bilateral and major-region promotion rules), grades severity
by overlap fraction (cardiomegaly by cardiothoracic ratio), and assembles a
deterministic, order-independent list of findings.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, MissingAnatomy, MissingCTR, NoOverlap
from .masks import (
    LABEL_HEART,
    DiseaseClass,
    OrganMap,
    PathologyAnnotation,
    RasterMask,
    bounding_box,
    connected_components,
    union,
)
from .zones import (
    ATOMIC_LOCATIONS,
    ORDER_INDEX,
    SUB_ZONES_OF,
    Location,
    ZoneMap,
    define_organ_parts,
)


class Severity(enum.Enum):
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"

    @property
    def token(self) -> str:
        return self.value

    @property
    def rank(self) -> int:
        return _SEVERITY_RANK[self]

    @classmethod
    def from_token(cls, token: str) -> "Severity":
        norm = token.strip().lower()
        for member in cls:
            if member.value == norm:
                return member
        raise KeyError(token)


_SEVERITY_RANK = {Severity.MILD: 0, Severity.MODERATE: 1, Severity.SEVERE: 2}


@dataclass(frozen=True)
class Finding:
    """One (class, severity, location) triple; NO_FINDING carries neither."""

    disease: DiseaseClass
    severity: Severity | None
    location: Location | None

    def __post_init__(self):
        if self.disease is DiseaseClass.NO_FINDING:
            if self.severity is not None or self.location is not None:
                raise ValueError("NO_FINDING carries no severity or location")
        elif self.severity is None or self.location is None:
            raise ValueError(f"{self.disease.token} requires severity and location")

    @classmethod
    def no_finding(cls) -> "Finding":
        return cls(DiseaseClass.NO_FINDING, None, None)

    @property
    def is_no_finding(self) -> bool:
        return self.disease is DiseaseClass.NO_FINDING

    def sort_key(self) -> tuple[int, int, int]:
        classes = list(DiseaseClass)
        return (
            classes.index(self.disease),
            -1 if self.location is None else ORDER_INDEX[self.location],
            -1 if self.severity is None else self.severity.rank,
        )


@dataclass(frozen=True)
class Band:
    """Two-threshold band: below ``mild_below`` mild, above ``severe_above``
    severe, the closed interval in between moderate."""

    mild_below: float
    severe_above: float

    def __post_init__(self):
        if not (0.0 < self.mild_below <= self.severe_above < 1.0):
            raise ValueError(
                f"band requires 0 < mild_below <= severe_above < 1, "
                f"got ({self.mild_below}, {self.severe_above})"
            )

    def grade(self, value: float) -> Severity:
        if value < self.mild_below:
            return Severity.MILD
        if value > self.severe_above:
            return Severity.SEVERE
        return Severity.MODERATE


# CTR bands live outside (0, 1) constraints: a ratio may exceed 1.
@dataclass(frozen=True)
class CtrBand:
    mild_below: float = 0.50
    severe_above: float = 0.55

    def __post_init__(self):
        if not (0.0 < self.mild_below <= self.severe_above):
            raise ValueError(
                f"ctr band requires 0 < mild_below <= severe_above, "
                f"got ({self.mild_below}, {self.severe_above})"
            )

    def grade(self, ratio: float) -> Severity:
        if ratio < self.mild_below:
            return Severity.MILD
        if ratio > self.severe_above:
            return Severity.SEVERE
        return Severity.MODERATE


DEFAULT_BAND = Band(mild_below=0.10, severe_above=0.30)


@dataclass(frozen=True)
class SeverityPolicy:
    """Grading thresholds: per-class overlap-fraction bands, cardiomegaly
    CTR bands, and the location-selection constants."""

    default_band: Band = DEFAULT_BAND
    class_bands: Mapping[DiseaseClass, Band] = field(default_factory=dict)
    ctr_band: CtrBand = CtrBand()
    lung_epsilon: float = 0.05
    promotion_threshold: float = 0.50

    def __post_init__(self):
        if not (0.0 <= self.lung_epsilon < 1.0):
            raise ValueError(f"lung_epsilon must be in [0, 1), got {self.lung_epsilon}")
        if not (0.0 < self.promotion_threshold <= 1.0):
            raise ValueError(
                f"promotion_threshold must be in (0, 1], got {self.promotion_threshold}"
            )
        object.__setattr__(self, "class_bands", dict(self.class_bands))

    def band_for(self, disease: DiseaseClass) -> Band:
        return self.class_bands.get(disease, self.default_band)

    def to_dict(self) -> dict:
        return {
            "default_band": {
                "mild_below": self.default_band.mild_below,
                "severe_above": self.default_band.severe_above,
            },
            "class_bands": {
                cls.token: {
                    "mild_below": band.mild_below,
                    "severe_above": band.severe_above,
                }
                for cls, band in sorted(
                    self.class_bands.items(), key=lambda kv: kv[0].token
                )
            },
            "ctr_band": {
                "mild_below": self.ctr_band.mild_below,
                "severe_above": self.ctr_band.severe_above,
            },
            "lung_epsilon": self.lung_epsilon,
            "promotion_threshold": self.promotion_threshold,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SeverityPolicy":
        def band(entry, fallback: Band) -> Band:
            if entry is None:
                return fallback
            return Band(
                mild_below=float(entry["mild_below"]),
                severe_above=float(entry["severe_above"]),
            )

        default = band(raw.get("default_band"), DEFAULT_BAND)
        class_bands = {
            DiseaseClass.from_token(token): band(entry, default)
            for token, entry in raw.get("class_bands", {}).items()
        }
        ctr_raw = raw.get("ctr_band")
        ctr = (
            CtrBand(
                mild_below=float(ctr_raw["mild_below"]),
                severe_above=float(ctr_raw["severe_above"]),
            )
            if ctr_raw
            else CtrBand()
        )
        return cls(
            default_band=default,
            class_bands=class_bands,
            ctr_band=ctr,
            lung_epsilon=float(raw.get("lung_epsilon", 0.05)),
            promotion_threshold=float(raw.get("promotion_threshold", 0.50)),
        )

    @classmethod
    def from_file(cls, path: Path | str) -> "SeverityPolicy":
        """Load a policy from a JSON key-value file (schema of ``to_dict``)."""
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_POLICY = SeverityPolicy()


@dataclass(frozen=True)
class ZoneOverlap:
    location: Location
    overlap_area: int
    zone_area: int


@dataclass(frozen=True)
class OverlapReport:
    """Per-zone intersection areas for one lesion, plus the lesion's area."""

    entries: tuple[ZoneOverlap, ...]
    lesion_area: int

    def get(self, location: Location) -> ZoneOverlap:
        for entry in self.entries:
            if entry.location is location:
                return entry
        raise KeyError(location)

    @property
    def total_atomic_overlap(self) -> int:
        return sum(e.overlap_area for e in self.entries if e.location in ATOMIC_LOCATIONS)


def compute_overlap_report(lesion: RasterMask, zones: ZoneMap) -> OverlapReport:
    """Intersection area of a lesion with every zone, in canonical order."""
    if lesion.shape != zones.shape:
        raise DimensionMismatch(
            f"lesion shape {lesion.shape} != zone shape {zones.shape}"
        )
    entries = []
    for location in Location:
        zone = zones[location]
        overlap = int(np.count_nonzero(lesion.pixels & zone.pixels))
        entries.append(
            ZoneOverlap(location, overlap, int(np.count_nonzero(zone.pixels)))
        )
    return OverlapReport(tuple(entries), int(np.count_nonzero(lesion.pixels)))


def cardiothoracic_ratio(
    organ: OrganMap, cardiac_extension: RasterMask | None = None
) -> float:
    """Maximal cardiac width over maximal thoracic (combined lung) width.

    ``cardiac_extension`` widens the cardiac silhouette with a lesion mask,
    so an enlarged-heart annotation is measured rather than the resting
    anatomy alone.
    """
    lungs_box = bounding_box(organ.lungs_mask())
    if lungs_box is None:
        raise MissingAnatomy("lungs")
    heart = organ.organ_mask(LABEL_HEART)
    if cardiac_extension is not None:
        heart = union(heart, cardiac_extension)
    heart_box = bounding_box(heart)
    if heart_box is None:
        raise MissingAnatomy("heart")
    return heart_box.width / lungs_box.width


def select_location(report: OverlapReport, policy: SeverityPolicy = DEFAULT_POLICY) -> Location:
    """Pick the reported location for one lesion.

    Both lungs involved beyond the epsilon noise floor -> bilateral lung;
    a single lung covered past the promotion threshold, or touched in all
    three of its sub-zones, -> that lung's major region; otherwise the
    argmax zone with canonical-order tie-breaking.
    """
    if report.total_atomic_overlap == 0:
        raise NoOverlap("lesion overlaps no zone")
    eps_area = policy.lung_epsilon * report.lesion_area
    left = report.get(Location.LEFT_LUNG)
    right = report.get(Location.RIGHT_LUNG)
    if (
        left.overlap_area > 0
        and right.overlap_area > 0
        and left.overlap_area >= eps_area
        and right.overlap_area >= eps_area
    ):
        return Location.BILATERAL_LUNG

    promoted: list[tuple[int, int, Location]] = []
    for lung_loc, sub_zones in SUB_ZONES_OF.items():
        entry = report.get(lung_loc)
        if entry.overlap_area == 0:
            continue
        covers = (
            entry.zone_area > 0
            and entry.overlap_area >= policy.promotion_threshold * entry.zone_area
        )
        spans = all(
            report.get(z).overlap_area > 0 and report.get(z).overlap_area >= eps_area
            for z in sub_zones
        )
        if covers or spans:
            promoted.append((entry.overlap_area, -ORDER_INDEX[lung_loc], lung_loc))
    if promoted:
        return max(promoted)[2]

    best = max(
        (e for e in report.entries if e.location in ATOMIC_LOCATIONS),
        key=lambda e: (e.overlap_area, -ORDER_INDEX[e.location]),
    )
    return best.location


def grade_severity(
    disease: DiseaseClass,
    report: OverlapReport | None = None,
    ctr: float | None = None,
    policy: SeverityPolicy = DEFAULT_POLICY,
) -> Severity:
    """Grade one lesion: cardiomegaly by CTR bands, everything else by the
    lesion's overlap fraction of its selected location."""
    if disease is DiseaseClass.CARDIOMEGALY:
        if ctr is None:
            raise MissingCTR("cardiomegaly grading requires a cardiothoracic ratio")
        return policy.ctr_band.grade(ctr)
    if report is None:
        raise NoOverlap("severity grading requires an overlap report")
    location = select_location(report, policy)
    entry = report.get(location)
    fraction = entry.overlap_area / entry.zone_area
    return policy.band_for(disease).grade(fraction)


def caption(
    organ: OrganMap,
    annotations: Sequence[PathologyAnnotation],
    policy: SeverityPolicy = DEFAULT_POLICY,
    zones: ZoneMap | None = None,
) -> list[Finding]:
    """Convert lesion annotations into a deduplicated findings list.

    Each connected component of each class is captioned independently, then
    identical (class, location, severity) findings are merged. Components
    overlapping no zone contribute nothing; an empty result collapses to the
    single NO_FINDING finding. Cardiomegaly is always located at the heart
    and graded by the cardiothoracic ratio of the heart silhouette extended
    with the lesion mask.
    """
    if zones is None:
        zones = define_organ_parts(organ)
    findings: set[Finding] = set()
    for ann in annotations:
        if ann.mask.shape != organ.shape:
            raise DimensionMismatch(
                f"annotation shape {ann.mask.shape} != organ shape {organ.shape}"
            )
        for component in connected_components(ann.mask):
            report = compute_overlap_report(component, zones)
            if report.total_atomic_overlap == 0:
                continue
            if ann.disease is DiseaseClass.CARDIOMEGALY:
                ratio = cardiothoracic_ratio(organ, cardiac_extension=component)
                severity = grade_severity(ann.disease, ctr=ratio, policy=policy)
                findings.add(Finding(ann.disease, severity, Location.HEART))
            else:
                location = select_location(report, policy)
                severity = grade_severity(ann.disease, report, policy=policy)
                findings.add(Finding(ann.disease, severity, location))
    if not findings:
        return [Finding.no_finding()]
    return sorted(findings, key=Finding.sort_key)


def findings_to_dicts(findings: Iterable[Finding]) -> list[dict]:
    """JSON-friendly view of a findings list."""
    out = []
    for f in findings:
        out.append(
            {
                "class": f.disease.token,
                "severity": None if f.severity is None else f.severity.token,
                "location": None if f.location is None else f.location.token,
            }
        )
    return out


def finding_from_dict(raw: Mapping) -> Finding:
    disease = DiseaseClass.from_token(raw["class"])
    if disease is DiseaseClass.NO_FINDING:
        return Finding.no_finding()
    return Finding(
        disease,
        Severity.from_token(raw["severity"]),
        Location.from_token(raw["location"]),
    )
