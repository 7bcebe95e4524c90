"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all toolkit-specific failures."""


# --- raster / file errors -------------------------------------------------


class UnreadableFile(ToolkitError):
    """A raster file is missing, corrupt, or has an unsupported encoding."""


class IllegalLabelValue(ToolkitError):
    """An organ map contains a label outside the 0-4 palette."""

    def __init__(self, label: int, pixel_index: int):
        self.label = label
        self.pixel_index = pixel_index
        super().__init__(f"illegal organ label {label} at pixel index {pixel_index}")


class DimensionMismatch(ToolkitError):
    """Two rasters that must share dimensions do not."""


class DegenerateInput(ToolkitError):
    """A zero-sized raster or otherwise unusable geometry input."""


# --- captioning errors ----------------------------------------------------


class MissingAnatomy(ToolkitError):
    """A required organ (heart or lungs) is empty in the organ map."""

    def __init__(self, organ: str):
        self.organ = organ
        super().__init__(f"organ map has no {organ} pixels")


class MissingCTR(ToolkitError):
    """Cardiomegaly grading requested without a cardiothoracic ratio."""


class NoOverlap(ToolkitError):
    """A lesion overlaps no anatomical zone."""


# --- prompt grammar errors ------------------------------------------------


class EmptyFindingList(ToolkitError):
    """render() called with no findings."""


class PromptParseError(ToolkitError):
    """Base class for structured-prompt parsing failures."""


class UnrecognizedPrefix(PromptParseError):
    """Prompt text does not start with either accepted template prefix."""


class MalformedClause(PromptParseError):
    """A clause does not follow '<severity> <class> on <location>'."""

    def __init__(self, clause: str, index: int, reason: str = ""):
        self.clause = clause
        self.index = index
        msg = f"malformed clause {index}: {clause!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class UnknownToken(PromptParseError):
    """A clause token is outside its closed vocabulary."""

    vocabulary = "token"

    def __init__(self, token: str, index: int):
        self.token = token
        self.index = index
        super().__init__(f"unknown {self.vocabulary} {token!r} in clause {index}")


class UnknownSeverity(UnknownToken):
    vocabulary = "severity"


class UnknownClass(UnknownToken):
    vocabulary = "class"


class UnknownLocation(UnknownToken):
    vocabulary = "location"


# --- generation / pipeline errors ------------------------------------------


class BackendFailure(ToolkitError):
    """A generation backend raised; carries the failing attempt index."""

    def __init__(self, attempt: int, cause: BaseException):
        self.attempt = attempt
        self.cause = cause
        super().__init__(f"backend failed on attempt {attempt}: {cause}")


class UnplaceableFinding(ToolkitError):
    """The stub backend cannot realize a finding on the given anatomy."""


# --- metric errors ----------------------------------------------------------


class TooSmallForScales(ToolkitError):
    """Image too small for the requested number of MS-SSIM scales."""


class NonPSDCovariance(ToolkitError):
    """A covariance matrix is not positive semidefinite beyond tolerance."""


class TooFewSamples(ToolkitError):
    """Gaussian statistics need at least two feature vectors."""


class DegenerateVariance(ToolkitError):
    """ICC undefined: all ratings identical across items and raters."""


class DegenerateMarginals(ToolkitError):
    """Fleiss' kappa undefined: chance agreement equals 1."""


class OutOfRangeRating(ToolkitError):
    """A rating falls outside its declared scale."""


# --- study service errors ---------------------------------------------------


class UnknownRater(ToolkitError):
    """A rater id is not part of the study roster."""


class DuplicateResponse(ToolkitError):
    """A (rater, item, task) triple was already answered."""


class OutOfRangeValue(ToolkitError):
    """A submitted response value is outside the task's scale."""
