"""Prompt-match validation: re-caption candidate masks and compare.

The comparison is exact-symbolic over the prompt grammar: findings are
matched as multisets keyed by (class, location) with severity handled per
the match policy. The retry loop drives a text-to-mask backend with derived
per-attempt seeds and stops at the first accepted candidate.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .captioning import DEFAULT_POLICY, Finding, SeverityPolicy, caption
from .errors import BackendFailure
from .grammar import PromptSpec
from .masks import OrganMap, PathologyAnnotation
from .zones import MAJOR_OF, Location

SEVERITY_STRICT = "strict"
SEVERITY_OFF = "off"
LOCATION_STRICT = "strict"
LOCATION_MAJOR_EQUIVALENT = "major-region-equivalent"


@dataclass(frozen=True)
class MatchPolicy:
    """How strictly a re-caption must reproduce the requested prompt."""

    severity_mode: str = SEVERITY_STRICT
    location_mode: str = LOCATION_STRICT

    def __post_init__(self):
        if self.severity_mode not in (SEVERITY_STRICT, SEVERITY_OFF):
            raise ValueError(f"unknown severity_mode {self.severity_mode!r}")
        if self.location_mode not in (LOCATION_STRICT, LOCATION_MAJOR_EQUIVALENT):
            raise ValueError(f"unknown location_mode {self.location_mode!r}")


DEFAULT_MATCH_POLICY = MatchPolicy()


@dataclass(frozen=True)
class MatchReport:
    """Outcome of one prompt-vs-recaption comparison."""

    matched: bool
    missing: tuple[Finding, ...]
    extra: tuple[Finding, ...]
    severity_mismatches: tuple[tuple[Finding, Finding], ...]
    recaption: tuple[Finding, ...]

    def to_dict(self) -> dict:
        def fd(f: Finding) -> dict:
            return {
                "class": f.disease.token,
                "severity": None if f.severity is None else f.severity.token,
                "location": None if f.location is None else f.location.token,
            }

        return {
            "matched": self.matched,
            "missing": [fd(f) for f in self.missing],
            "extra": [fd(f) for f in self.extra],
            "severity_mismatches": [
                {"requested": fd(a), "recaption": fd(b)}
                for a, b in self.severity_mismatches
            ],
            "recaption": [fd(f) for f in self.recaption],
        }


def _location_key(location: Location | None, policy: MatchPolicy) -> Location | None:
    if location is None:
        return None
    if policy.location_mode == LOCATION_MAJOR_EQUIVALENT:
        return MAJOR_OF.get(location, location)
    return location


def compare_findings(
    requested: Sequence[Finding],
    recaptioned: Sequence[Finding],
    policy: MatchPolicy = DEFAULT_MATCH_POLICY,
) -> MatchReport:
    """Multiset comparison of two findings lists under a match policy."""
    groups: dict[tuple, dict[str, list[Finding]]] = defaultdict(
        lambda: {"req": [], "rec": []}
    )
    for f in requested:
        groups[(f.disease, _location_key(f.location, policy))]["req"].append(f)
    for f in recaptioned:
        groups[(f.disease, _location_key(f.location, policy))]["rec"].append(f)

    missing: list[Finding] = []
    extra: list[Finding] = []
    mismatches: list[tuple[Finding, Finding]] = []
    for key in sorted(groups, key=lambda k: (k[0].token, "" if k[1] is None else k[1].token)):
        req = sorted(groups[key]["req"], key=Finding.sort_key)
        rec = sorted(groups[key]["rec"], key=Finding.sort_key)
        req_sev = Counter(f.severity for f in req)
        rec_sev = Counter(f.severity for f in rec)
        agreed = req_sev & rec_sev
        req_left = _drain(req, agreed)
        rec_left = _drain(rec, agreed)
        pairs = min(len(req_left), len(rec_left))
        mismatches.extend(zip(req_left[:pairs], rec_left[:pairs]))
        missing.extend(req_left[pairs:])
        extra.extend(rec_left[pairs:])

    matched = not missing and not extra and (
        policy.severity_mode == SEVERITY_OFF or not mismatches
    )
    return MatchReport(
        matched=matched,
        missing=tuple(missing),
        extra=tuple(extra),
        severity_mismatches=tuple(mismatches),
        recaption=tuple(sorted(recaptioned, key=Finding.sort_key)),
    )


def _drain(findings: list[Finding], agreed: Counter) -> list[Finding]:
    """Remove one finding per agreed severity count, keeping the rest."""
    budget = Counter(agreed)
    left = []
    for f in findings:
        if budget.get(f.severity, 0) > 0:
            budget[f.severity] -= 1
        else:
            left.append(f)
    return left


def recaption_and_match(
    prompt: PromptSpec,
    candidate_masks: Sequence[PathologyAnnotation],
    organ: OrganMap,
    policy: MatchPolicy = DEFAULT_MATCH_POLICY,
    severity_policy: SeverityPolicy = DEFAULT_POLICY,
) -> MatchReport:
    """Re-caption candidate masks and compare against the requested prompt."""
    recaptioned = caption(organ, candidate_masks, severity_policy)
    return compare_findings(list(prompt.findings), recaptioned, policy)


class TextToMaskBackend(Protocol):
    """Generates pathology masks for a prompt on a given anatomy.

    Must be deterministic for fixed (prompt, organ, seed) and return masks
    with the organ's dimensions.
    """

    def generate(
        self, prompt: PromptSpec, organ: OrganMap, seed: int
    ) -> list[PathologyAnnotation]: ...


@dataclass
class RetryResult:
    """Outcome of the bounded self-assessment retry loop."""

    accepted: list[PathologyAnnotation] | None
    attempts_used: int
    reports: list[MatchReport] = field(default_factory=list)


def run_with_retries(
    request: PromptSpec,
    organ: OrganMap,
    backend: TextToMaskBackend,
    max_attempts: int,
    seed: int,
    policy: MatchPolicy = DEFAULT_MATCH_POLICY,
    severity_policy: SeverityPolicy = DEFAULT_POLICY,
) -> RetryResult:
    """Invoke the backend up to ``max_attempts`` times, stopping at the first
    candidate whose re-caption matches the request.

    Attempt ``i`` (0-based) uses seed ``seed + i``, so a fixed (request,
    seed, backend) replays identically.
    """
    if max_attempts < 1:
        raise ValueError(f"max_attempts must be >= 1, got {max_attempts}")
    reports: list[MatchReport] = []
    for attempt in range(max_attempts):
        try:
            candidate = backend.generate(request, organ, seed + attempt)
        except Exception as exc:
            raise BackendFailure(attempt, exc) from exc
        report = recaption_and_match(request, candidate, organ, policy, severity_policy)
        reports.append(report)
        if report.matched:
            return RetryResult(candidate, attempt + 1, reports)
    return RetryResult(None, max_attempts, reports)
