"""Evaluation mathematics: overlap metrics, MS-SSIM, Fréchet distance over
feature Gaussians, and inter-rater agreement statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, signal

from .errors import (
    DegenerateMarginals,
    DegenerateVariance,
    DimensionMismatch,
    NonPSDCovariance,
    OutOfRangeRating,
    TooFewSamples,
    TooSmallForScales,
)
from .masks import RasterMask

# --- segmentation overlap ----------------------------------------------------


def dice(a: RasterMask, b: RasterMask) -> float:
    """Dice coefficient 2|A∩B|/(|A|+|B|); 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a.pixels & b.pixels))
    total = int(np.count_nonzero(a.pixels)) + int(np.count_nonzero(b.pixels))
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def iou(a: RasterMask, b: RasterMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a.pixels & b.pixels))
    uni = int(np.count_nonzero(a.pixels | b.pixels))
    if uni == 0:
        return 1.0
    return inter / uni


# --- MS-SSIM ------------------------------------------------------------------

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_FILTER_SIZE = 11
_FILTER_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    radius = size // 2
    coords = np.arange(-radius, radius + 1)
    x, y = np.meshgrid(coords, coords)
    g = np.exp(-(x**2 + y**2) / (2.0 * sigma**2))
    return g / g.sum()


def _ssim_and_cs(
    x: np.ndarray, y: np.ndarray, data_range: float
) -> tuple[float, float]:
    window = _gaussian_window(_FILTER_SIZE, _FILTER_SIGMA)
    mu_x = signal.fftconvolve(x, window, mode="valid")
    mu_y = signal.fftconvolve(y, window, mode="valid")
    sigma_xx = signal.fftconvolve(x * x, window, mode="valid") - mu_x * mu_x
    sigma_yy = signal.fftconvolve(y * y, window, mode="valid") - mu_y * mu_y
    sigma_xy = signal.fftconvolve(x * y, window, mode="valid") - mu_x * mu_y
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    luminance = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    contrast = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    return float(np.mean(luminance * contrast)), float(np.mean(contrast))


def _downsample(img: np.ndarray) -> np.ndarray:
    kernel = np.ones((2, 2)) / 4.0
    smoothed = ndimage.convolve(img, kernel, mode="reflect")
    return smoothed[::2, ::2]


def ms_ssim(
    x: np.ndarray,
    y: np.ndarray,
    scales: int = 5,
    weights: Sequence[float] | None = None,
    data_range: float | None = None,
) -> float:
    """Multi-scale structural similarity with an 11x11 Gaussian window
    (sigma 1.5) and the standard 5-scale weight vector.

    Negative per-scale terms are clamped to zero before exponentiation, so
    the result lies in [0, 1]. ``data_range`` defaults to 255 for integer
    inputs and 1.0 otherwise.
    """
    x_raw = np.asarray(x)
    y_raw = np.asarray(y)
    if data_range is None:
        data_range = (
            255.0
            if np.issubdtype(x_raw.dtype, np.integer)
            or np.issubdtype(y_raw.dtype, np.integer)
            else 1.0
        )
    x = x_raw.astype(np.float64)
    y = y_raw.astype(np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise DimensionMismatch(f"images must be 2-D, got shape {x.shape}")
    if weights is None:
        if scales == len(MSSSIM_WEIGHTS):
            weights = MSSSIM_WEIGHTS
        else:
            weights = tuple(1.0 / scales for _ in range(scales))
    weights = tuple(float(w) for w in weights)
    if len(weights) != scales:
        raise ValueError(f"{scales} scales need {scales} weights, got {len(weights)}")
    if min(x.shape) / 2 ** (scales - 1) < _FILTER_SIZE:
        raise TooSmallForScales(
            f"min dimension {min(x.shape)} cannot support {scales} scales "
            f"with an {_FILTER_SIZE}px window"
        )
    mcs = []
    ssim_last = 0.0
    for level in range(scales):
        ssim_val, cs_val = _ssim_and_cs(x, y, data_range)
        if level < scales - 1:
            mcs.append(max(cs_val, 0.0))
            x = _downsample(x)
            y = _downsample(y)
        else:
            ssim_last = max(ssim_val, 0.0)
    result = ssim_last ** weights[-1]
    for cs_val, weight in zip(mcs, weights[:-1]):
        result *= cs_val**weight
    return float(result)


# --- Fréchet distance over feature Gaussians ---------------------------------


@dataclass(frozen=True)
class FeatureGaussian:
    """Mean vector and covariance matrix of a feature batch."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"mean size {mean.shape} incompatible with covariance {cov.shape}"
            )
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise NonPSDCovariance("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", (cov + cov.T) / 2.0)

    @property
    def dim(self) -> int:
        return int(self.mean.size)


_EIG_CLIP = 1e-10


def _check_psd(cov: np.ndarray, tolerance: float) -> None:
    eigenvalues = np.linalg.eigvalsh(cov)
    floor = -tolerance * max(1.0, float(np.abs(eigenvalues).max()))
    if eigenvalues.min() < floor:
        raise NonPSDCovariance(
            f"covariance has eigenvalue {eigenvalues.min():.3e} below tolerance"
        )


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    eigenvalues, vectors = np.linalg.eigh(sym)
    eigenvalues = np.where(eigenvalues < _EIG_CLIP, 0.0, eigenvalues)
    return (vectors * np.sqrt(eigenvalues)) @ vectors.T


def frechet_distance(
    p: FeatureGaussian, q: FeatureGaussian, psd_tolerance: float = 1e-6
) -> float:
    """Squared Fréchet distance between two Gaussians:
    |mu_p - mu_q|^2 + Tr(S_p + S_q - 2 (S_p S_q)^(1/2)).

    The cross term is evaluated as Tr sqrt(S_q^(1/2) S_p S_q^(1/2)) via
    eigendecomposition with small negative eigenvalues clipped to zero.
    """
    if p.dim != q.dim:
        raise DimensionMismatch(f"gaussian dims differ: {p.dim} vs {q.dim}")
    _check_psd(p.covariance, psd_tolerance)
    _check_psd(q.covariance, psd_tolerance)
    diff = p.mean - q.mean
    sqrt_q = _sqrt_psd(q.covariance)
    inner = sqrt_q @ p.covariance @ sqrt_q
    eigenvalues = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    eigenvalues = np.where(eigenvalues < _EIG_CLIP, 0.0, eigenvalues)
    cross = float(np.sqrt(eigenvalues).sum())
    value = (
        float(diff @ diff)
        + float(np.trace(p.covariance))
        + float(np.trace(q.covariance))
        - 2.0 * cross
    )
    return max(value, 0.0)


def gaussian_stats(features: np.ndarray | Sequence[Sequence[float]]) -> FeatureGaussian:
    """Sample mean and unbiased covariance of a feature batch (rows)."""
    array = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if array.shape[0] < 2:
        raise TooFewSamples(f"need >= 2 feature vectors, got {array.shape[0]}")
    mean = array.mean(axis=0)
    cov = np.atleast_2d(np.cov(array, rowvar=False, ddof=1))
    return FeatureGaussian(mean, cov)


def load_feature_vectors(path: Path | str) -> np.ndarray:
    """Read one whitespace-separated feature vector per line."""
    return np.loadtxt(path, ndmin=2)


# --- inter-rater agreement -----------------------------------------------------


@dataclass(frozen=True)
class RatingMatrix:
    """Complete items x raters grid of ratings."""

    values: np.ndarray

    def __post_init__(self):
        array = np.asarray(self.values, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError(f"rating matrix must be 2-D, got shape {array.shape}")
        if array.shape[1] < 2:
            raise ValueError(f"need >= 2 raters, got {array.shape[1]}")
        if array.shape[0] < 1:
            raise ValueError("need >= 1 item")
        if not np.isfinite(array).all():
            raise ValueError("rating matrix must be a complete grid")
        frozen = np.ascontiguousarray(array)
        frozen.setflags(write=False)
        object.__setattr__(self, "values", frozen)

    @property
    def n_items(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_raters(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class AgreementStats:
    """Agreement coefficients with their ANOVA / tally intermediates.

    Only the fields produced by the computation that built the instance are
    populated; the rest stay None.
    """

    icc: float | None = None
    fleiss_kappa: float | None = None
    ms_r: float | None = None
    ms_e: float | None = None
    p_bar: float | None = None
    p_bar_e: float | None = None


def icc_2_1(ratings: RatingMatrix) -> AgreementStats:
    """Two-way random-effects, absolute-agreement, single-rater ICC:
    (MS_R - MS_E) / (MS_R + (k-1) MS_E) with mean squares from the two-way
    ANOVA decomposition."""
    x = ratings.values
    n, k = ratings.n_items, ratings.n_raters
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_total = float(((x - grand) ** 2).sum())
    ss_rows = float(k * ((row_means - grand) ** 2).sum())
    ss_cols = float(n * ((col_means - grand) ** 2).sum())
    ss_error = ss_total - ss_rows - ss_cols
    if n < 2:
        raise DegenerateVariance("ICC needs >= 2 items")
    ms_r = ss_rows / (n - 1)
    ms_e = ss_error / ((n - 1) * (k - 1))
    if ms_r == 0.0 and ms_e == 0.0:
        raise DegenerateVariance("all ratings identical: ICC undefined")
    icc = (ms_r - ms_e) / (ms_r + (k - 1) * ms_e)
    return AgreementStats(icc=icc, ms_r=ms_r, ms_e=ms_e)


def fleiss_kappa(ratings: RatingMatrix, categories: int | None = None) -> AgreementStats:
    """Fleiss' kappa for categorical ratings: (P̄ - P̄_e) / (1 - P̄_e).

    Values are treated as category labels. When ``categories`` is given they
    must be integers in [0, categories); unused categories do not affect the
    statistic.
    """
    x = ratings.values
    if not np.array_equal(x, np.round(x)):
        raise OutOfRangeRating("categorical ratings must be integers")
    values = x.astype(int)
    if categories is not None:
        if values.min() < 0 or values.max() >= categories:
            raise OutOfRangeRating(
                f"ratings outside [0, {categories}): "
                f"min {values.min()}, max {values.max()}"
            )
    n, k = ratings.n_items, ratings.n_raters
    labels = np.unique(values)
    counts = np.stack([(values == lab).sum(axis=1) for lab in labels], axis=1)
    p_i = (np.sum(counts * counts, axis=1) - k) / (k * (k - 1))
    p_bar = float(p_i.mean())
    proportions = counts.sum(axis=0) / (n * k)
    p_bar_e = float((proportions**2).sum())
    if p_bar_e >= 1.0:
        raise DegenerateMarginals(
            "all raters used a single category: kappa undefined"
        )
    kappa = (p_bar - p_bar_e) / (1.0 - p_bar_e)
    return AgreementStats(fleiss_kappa=kappa, p_bar=p_bar, p_bar_e=p_bar_e)


REALISM_BINARY_THRESHOLD = 4  # Likert >= 4 counts as "judged real"


def binarize_realism(ratings: Sequence[int]) -> list[int]:
    """Collapse 1-5 realism ratings to binary at the >= 4 threshold."""
    out = []
    for value in ratings:
        iv = int(value)
        if iv != value or not (1 <= iv <= 5):
            raise OutOfRangeRating(f"realism rating must be an integer in 1..5, got {value!r}")
        out.append(1 if iv >= REALISM_BINARY_THRESHOLD else 0)
    return out
