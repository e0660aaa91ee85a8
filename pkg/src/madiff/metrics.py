"""
Image-quality and distribution metrics: PSNR, SSIM, KID and the style-shift
evaluation built on them.

PSNR and SSIM work in the 8-bit pixel domain (MAX = 255). Use ``to_pixels``
on model-range tensors first.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .codecs import quantize
from .errors import ShapeError, ValidationError
from .logging_config import get_logger
from .numerics import DTYPE, Tensor

logger = get_logger(__name__)

MAX_VALUE = 255.0
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
KID_DEGREE = 3
HISTOGRAM_BINS = 8


def to_pixels(x: Tensor) -> np.ndarray:
    """Model-range tensor to float 8-bit values, quantized as on save."""
    return quantize(x).astype(DTYPE)


def _pair(a, b) -> tuple:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; identical images report PSNR_CAP."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(MAX_VALUE**2 / mse), PSNR_CAP)


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1 = (SSIM_K1 * MAX_VALUE) ** 2
    c2 = (SSIM_K2 * MAX_VALUE) ** 2
    radius = (SSIM_WINDOW - 1) // 2
    truncate = radius / SSIM_SIGMA

    def smooth(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=truncate)

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    local = numerator / denominator
    return float(local[radius:-radius, radius:-radius].mean())


def ssim(a, b) -> float:
    """
    Mean local SSIM over window positions fully inside the image, using an
    11x11 Gaussian window (sigma 1.5) and averaged over channels.
    """
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise ShapeError(f"ssim needs H x W or H x W x C images, got {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValidationError(
            f"image {a.shape[0]}x{a.shape[1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    if a.ndim == 2:
        return _ssim_channel(a, b)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[2])]))


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = KID_DEGREE) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def kid(x, y, kernel: Callable[[np.ndarray, np.ndarray], np.ndarray] = polynomial_kernel) -> float:
    """Unbiased squared MMD between two feature sets (rows are samples)."""
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    y = np.atleast_2d(np.asarray(y, dtype=DTYPE))
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValidationError(f"KID needs at least 2 samples per set, got {x.shape[0]} and {y.shape[0]}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    n, m = x.shape[0], y.shape[0]
    k_xx = kernel(x, x)
    k_yy = kernel(y, y)
    k_xy = kernel(x, y)
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (n * (n - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    return float(term_xx + term_yy - 2.0 * k_xy.mean())


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Deterministic image -> vector map with a fixed dimensionality."""

    name = "base"
    dim = 0

    def __call__(self, image) -> np.ndarray:
        features = np.asarray(self.extract(image), dtype=DTYPE)
        if features.shape != (self.dim,):
            raise ShapeError(f"{self.name} produced shape {features.shape}, expected ({self.dim},)")
        return features

    def extract(self, image) -> np.ndarray:
        raise NotImplementedError


def color_histogram_features(image, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """L1-normalised joint RGB histogram of an 8-bit image (bins**3 entries)."""
    pixels = np.asarray(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"histogram needs H x W x 3 pixels, got {pixels.shape}")
    levels = np.clip(pixels.astype(np.int64), 0, 255) * bins // 256
    index = (levels[..., 0] * bins + levels[..., 1]) * bins + levels[..., 2]
    counts = np.bincount(index.ravel(), minlength=bins**3).astype(DTYPE)
    return counts / counts.sum()


class ColorHistogram(FeatureExtractor):
    def __init__(self, bins: int = HISTOGRAM_BINS):
        self.bins = bins
        self.name = f"color_histogram_{bins}"
        self.dim = bins**3

    def extract(self, image) -> np.ndarray:
        return color_histogram_features(image, self.bins)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def aggregate(values: Sequence[float]) -> Dict[str, float]:
    """Mean and population standard deviation."""
    array = np.asarray(values, dtype=DTYPE)
    if array.size == 0:
        return {"mean": float("nan"), "std": float("nan")}
    return {"mean": float(array.mean()), "std": float(array.std())}


@dataclass
class MetricReport:
    """Per-item metric values plus the protocol that produced them."""

    values: Dict[str, List[float]] = field(default_factory=dict)
    protocol: Dict[str, Any] = field(default_factory=dict)

    def add(self, metric: str, value: float) -> None:
        self.values.setdefault(metric, []).append(float(value))

    def extend(self, metric: str, values: Sequence[float]) -> None:
        for value in values:
            self.add(metric, value)

    def summary(self, metric: str) -> Dict[str, float]:
        return aggregate(self.values.get(metric, []))

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            metric: {"per_item": list(values), **aggregate(values)}
            for metric, values in sorted(self.values.items())
        }
        data["protocol"] = dict(self.protocol)
        return data


def write_report(
    report: Union[MetricReport, Mapping[str, Any]],
    path: Union[str, Path],
    resolved_config: Optional[Mapping[str, Any]] = None,
) -> Path:
    data = report.to_dict() if isinstance(report, MetricReport) else dict(report)
    if resolved_config is not None:
        data["config"] = dict(resolved_config)
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Report written to {output}")
    return output


# ---------------------------------------------------------------------------
# Style-shift evaluation
# ---------------------------------------------------------------------------


def _features(extractor: FeatureExtractor, images) -> np.ndarray:
    rows = [extractor(image) for image in images]
    return np.stack(rows) if rows else np.zeros((0, extractor.dim))


def feature_shift_eval(
    sources: Sequence,
    references: Sequence,
    transferred: Sequence,
    removal: Callable[[Any], Any],
    extractor: Optional[FeatureExtractor] = None,
) -> MetricReport:
    """
    KID between the shifts a transfer adds, F(s_r) - F(s), and the shifts
    removal takes away from the references, F(r) - F(removal(r)).

    A transfer that copies its source adds no shift and scores far from the
    reference shifts.
    """
    extractor = extractor or ColorHistogram()
    if not sources or not references:
        raise ValidationError("style-shift evaluation needs nonempty source and reference sets")
    if len(sources) != len(transferred):
        raise ValidationError(
            f"{len(transferred)} transfer results for {len(sources)} sources; the sets must be paired"
        )
    added = _features(extractor, transferred) - _features(extractor, sources)
    removed = _features(extractor, references) - _features(extractor, [removal(r) for r in references])
    value = kid(added, removed)

    report = MetricReport(protocol={"extractor": extractor.name, "dim": extractor.dim})
    report.add("style_shift_kid", value)
    logger.debug(f"Style-shift KID over {len(sources)}/{len(references)} items: {value:.6g}")
    return report
