"""Bidirectional structured-prompt grammar.

Canonical form::

    A photo of a Chest X-ray with <severity> <Class> on <location>, ...

The degenerate normal case renders as
``A photo of a Chest X-ray with No Finding``. The parser additionally
accepts the alternate prefix ``A Chest x-ray photo with`` and is
case-insensitive on prefixes and tokens, but strict on the closed
severity/class/location vocabularies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .captioning import Finding, Severity
from .errors import (
    EmptyFindingList,
    MalformedClause,
    UnknownClass,
    UnknownLocation,
    UnknownSeverity,
    UnrecognizedPrefix,
)
from .masks import DiseaseClass
from .zones import Location

CANONICAL_PREFIX = "A photo of a Chest X-ray with "
ALTERNATE_PREFIX = "A Chest x-ray photo with "
NO_FINDING_PHRASE = "No Finding"

_PREFIXES = (CANONICAL_PREFIX, ALTERNATE_PREFIX)


def render(findings: Sequence[Finding]) -> str:
    """Render findings into the canonical prompt string."""
    if not findings:
        raise EmptyFindingList("cannot render an empty findings list")
    if any(f.is_no_finding for f in findings):
        if len(findings) != 1:
            raise ValueError("NO_FINDING must be the sole finding")
        return CANONICAL_PREFIX + NO_FINDING_PHRASE
    clauses = [
        f"{f.severity.token} {f.disease.token} on {f.location.token}"
        for f in findings
    ]
    return CANONICAL_PREFIX + ", ".join(clauses)


def _strip_prefix(text: str) -> str:
    lowered = text.lower()
    for prefix in _PREFIXES:
        if lowered.startswith(prefix.lower()):
            return text[len(prefix):]
    raise UnrecognizedPrefix(f"prompt does not start with a known prefix: {text[:48]!r}")


def _parse_clause(clause: str, index: int) -> Finding:
    head, sep, loc_token = clause.rpartition(" on ")
    if not sep:
        raise MalformedClause(clause, index, "expected '<severity> <class> on <location>'")
    head = head.strip()
    loc_token = loc_token.strip()
    if not head or not loc_token:
        raise MalformedClause(clause, index, "empty severity/class or location")
    sev_token, _, class_token = head.partition(" ")
    class_token = class_token.strip()
    if not class_token:
        raise MalformedClause(clause, index, "missing class token")
    try:
        severity = Severity.from_token(sev_token)
    except KeyError:
        raise UnknownSeverity(sev_token, index) from None
    try:
        disease = DiseaseClass.from_token(class_token)
    except KeyError:
        raise UnknownClass(class_token, index) from None
    if disease is DiseaseClass.NO_FINDING:
        raise MalformedClause(clause, index, "No Finding cannot carry severity/location")
    try:
        location = Location.from_token(loc_token)
    except KeyError:
        raise UnknownLocation(loc_token, index) from None
    return Finding(disease, severity, location)


def parse(text: str) -> list[Finding]:
    """Parse a structured prompt back into findings.

    Accepts both template prefixes; vocabulary violations raise with the
    offending token and clause index.
    """
    body = _strip_prefix(text.strip()).strip()
    if not body:
        raise MalformedClause(body, 0, "prompt has no clauses")
    clauses = [c.strip() for c in body.split(",")]
    if any(not c for c in clauses):
        index = [i for i, c in enumerate(clauses) if not c][0]
        raise MalformedClause("", index, "empty clause")
    if len(clauses) == 1 and clauses[0].lower() == NO_FINDING_PHRASE.lower():
        return [Finding.no_finding()]
    findings = []
    for index, clause in enumerate(clauses):
        if clause.lower() == NO_FINDING_PHRASE.lower():
            raise MalformedClause(clause, index, "No Finding must be the sole clause")
        findings.append(_parse_clause(clause, index))
    return findings


@dataclass(frozen=True)
class PromptSpec:
    """A findings list and its canonical rendering, kept in lockstep."""

    findings: tuple[Finding, ...]
    raw_text: str

    def __post_init__(self):
        if not self.findings:
            raise EmptyFindingList("prompt spec requires at least one finding")
        if render(self.findings) != self.raw_text:
            raise ValueError("raw_text is not the canonical rendering of findings")

    @classmethod
    def from_findings(cls, findings: Sequence[Finding]) -> "PromptSpec":
        findings = tuple(findings)
        return cls(findings, render(findings))

    @classmethod
    def from_text(cls, text: str) -> "PromptSpec":
        """Parse any accepted variant and canonicalize the stored text."""
        return cls.from_findings(parse(text))
