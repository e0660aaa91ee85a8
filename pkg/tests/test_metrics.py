"""
Tests for PSNR, SSIM, KID, feature extractors and metric reports.
"""

import json

import numpy as np
import pytest

from madiff.errors import ShapeError, ValidationError
from madiff.metrics import (
    PSNR_CAP,
    ColorHistogram,
    MetricReport,
    aggregate,
    color_histogram_features,
    feature_shift_eval,
    kid,
    psnr,
    ssim,
    to_pixels,
    write_report,
)


def flat_image(color, size=4):
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = color
    return image


def with_red_top_row(image):
    patched = image.copy()
    patched[0] = (255, 0, 0)
    return patched


class TestPixelMetrics:
    """PSNR and SSIM in the 8-bit domain."""

    def test_psnr_identical_is_capped(self, image):
        pixels = to_pixels(image)
        assert psnr(pixels, pixels) == PSNR_CAP

    def test_psnr_known_value(self):
        a = np.zeros((4, 4, 3))
        b = np.ones((4, 4, 3))
        assert psnr(a, b) == pytest.approx(10 * np.log10(255.0**2))

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_ssim_identical(self, image):
        pixels = to_pixels(image)
        assert ssim(pixels, pixels) == pytest.approx(1.0)

    def test_ssim_degrades_with_noise(self, image, np_rng):
        pixels = to_pixels(image)
        noisy = np.clip(pixels + np_rng.normal(0, 80, size=pixels.shape), 0, 255)
        value = ssim(pixels, noisy)
        assert -1.0 <= value < 0.9
        assert ssim(noisy, pixels) == pytest.approx(value)

    def test_ssim_grey_images(self):
        a = np.full((12, 12), 100.0)
        assert ssim(a, a) == pytest.approx(1.0)

    def test_ssim_needs_full_window(self):
        with pytest.raises(ValidationError):
            ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))

    def test_to_pixels(self):
        np.testing.assert_array_equal(to_pixels(np.array([-1.0, 0.0, 1.0])), [0.0, 128.0, 255.0])


class TestKid:
    """Unbiased kernel distance between feature sets."""

    def test_same_distribution_below_shifted(self, np_rng):
        x = np_rng.normal(size=(200, 4))
        y = np_rng.normal(size=(200, 4))
        z = np_rng.normal(loc=1.0, size=(200, 4))
        assert abs(kid(x, y)) < kid(x, z)

    def test_symmetric(self, np_rng):
        x = np_rng.normal(size=(20, 3))
        y = np_rng.normal(size=(30, 3))
        assert kid(x, y) == pytest.approx(kid(y, x))

    def test_needs_two_samples(self):
        with pytest.raises(ValidationError):
            kid(np.zeros((1, 3)), np.zeros((5, 3)))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            kid(np.zeros((3, 3)), np.zeros((3, 4)))


class TestFeatures:
    """Color histogram features."""

    def test_single_color(self):
        features = color_histogram_features(flat_image((255, 0, 0)))
        assert features.shape == (512,)
        assert features[7 * 64] == 1.0
        assert features.sum() == pytest.approx(1.0)

    def test_extractor(self):
        extractor = ColorHistogram(bins=4)
        assert extractor(flat_image((10, 200, 90))).shape == (64,)
        assert extractor.name == "color_histogram_4"

    def test_needs_rgb(self):
        with pytest.raises(ShapeError):
            color_histogram_features(np.zeros((4, 4)))


class TestReports:
    """Aggregation and report files."""

    def test_aggregate_uses_population_std(self):
        assert aggregate([1.0, 3.0]) == {"mean": 2.0, "std": 1.0}

    def test_aggregate_empty(self):
        summary = aggregate([])
        assert np.isnan(summary["mean"]) and np.isnan(summary["std"])

    def test_report_layout(self, tmp_path):
        report = MetricReport(protocol={"task": "removal"})
        report.extend("ssim", [0.5, 0.7])
        report.add("psnr", 30.0)
        path = write_report(report, tmp_path / "out" / "report.json", {"seed": 3})
        data = json.loads(path.read_text())
        assert data["ssim"]["per_item"] == [0.5, 0.7]
        assert data["ssim"]["mean"] == pytest.approx(0.6)
        assert data["psnr"]["std"] == 0.0
        assert data["protocol"] == {"task": "removal"}
        assert data["config"] == {"seed": 3}


class TestStyleShift:
    """KID between added and removed style shifts."""

    def _sets(self):
        colors = [(30, 60, 90), (200, 180, 160), (90, 140, 40), (10, 10, 200), (250, 250, 250)]
        sources = [flat_image(c) for c in colors]
        references = [with_red_top_row(s) for s in sources]
        return sources, references

    @staticmethod
    def _removal(image):
        restored = image.copy()
        restored[0] = image[1]
        return restored

    def test_faithful_transfer_scores_better_than_copy(self):
        sources, references = self._sets()
        faithful = feature_shift_eval(sources, references, references, self._removal)
        copy = feature_shift_eval(sources, references, sources, self._removal)
        assert faithful.values["style_shift_kid"][0] < copy.values["style_shift_kid"][0]
        assert copy.protocol["dim"] == 512

    def test_unpaired_sets_rejected(self):
        sources, references = self._sets()
        with pytest.raises(ValidationError):
            feature_shift_eval(sources, references, references[:2], self._removal)
