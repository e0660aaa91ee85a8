"""
Tests for the PPM/PGM codecs and pixel quantisation.
"""

import numpy as np
import pytest

from madiff.codecs import (
    decode_pgm,
    decode_ppm,
    dequantize,
    encode_pgm,
    encode_ppm,
    load_image,
    load_mask,
    quantize,
    save_image,
    save_mask,
)
from madiff.errors import FormatError, RangeError, ShapeError, ValidationError


class TestQuantisation:
    """Mapping between 8-bit pixels and model range."""

    def test_endpoints(self):
        np.testing.assert_array_equal(dequantize(np.array([0, 255])), [-1.0, 1.0])
        np.testing.assert_array_equal(quantize(np.array([-1.0, 1.0])), [0, 255])

    def test_every_level_survives(self):
        levels = np.arange(256, dtype=np.uint8)
        np.testing.assert_array_equal(quantize(dequantize(levels)), levels)

    def test_clipping(self):
        np.testing.assert_array_equal(quantize(np.array([-3.0, 3.0])), [0, 255])


class TestHeaders:
    """Header parsing and error offsets."""

    def test_comment_in_header(self):
        data = b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6))
        pixels = decode_ppm(data)
        assert pixels.shape == (1, 2, 3)
        np.testing.assert_array_equal(pixels.ravel(), np.arange(6))

    def test_wrong_magic(self):
        with pytest.raises(FormatError) as exc:
            decode_ppm(b"P5\n1 1\n255\n\0")
        assert exc.value.offset == 0

    def test_bad_maxval(self):
        with pytest.raises(FormatError) as exc:
            decode_pgm(b"P5\n1 1\n65535\n\0\0")
        assert "maxval" in str(exc.value)

    def test_non_numeric_field(self):
        with pytest.raises(FormatError) as exc:
            decode_pgm(b"P5\n1 x\n255\n\0")
        assert exc.value.offset == 5

    def test_truncated_payload(self):
        with pytest.raises(FormatError) as exc:
            decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
        assert "truncated" in str(exc.value)

    def test_zero_size(self):
        with pytest.raises(FormatError):
            decode_pgm(b"P5\n0 1\n255\n")

    def test_encoder_shapes(self):
        with pytest.raises(ShapeError):
            encode_ppm(np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(ShapeError):
            encode_pgm(np.zeros((2, 2, 3), dtype=np.uint8))


class TestFiles:
    """Image and mask files on disk."""

    def test_image_round_trip(self, tmp_path, image):
        path = save_image(image, tmp_path / "nested" / "img.ppm")
        loaded = load_image(path)
        assert loaded.shape == image.shape
        assert np.max(np.abs(loaded - image)) <= 1.0 / 255.0 + 1e-12

    def test_non_finite_image_rejected(self, tmp_path):
        with pytest.raises(RangeError):
            save_image(np.full((2, 2, 3), np.nan), tmp_path / "bad.ppm")

    def test_mask_round_trip(self, tmp_path):
        mask = np.zeros((5, 4))
        mask[1:3, 2:] = 1.0
        loaded = load_mask(save_mask(mask, tmp_path / "m.pgm"))
        np.testing.assert_array_equal(loaded, mask)

    def test_grey_mask_rejected(self, tmp_path):
        path = tmp_path / "grey.pgm"
        path.write_bytes(encode_pgm(np.full((2, 2), 128, dtype=np.uint8)))
        with pytest.raises(ValidationError):
            load_mask(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_image(tmp_path / "nothing.ppm")

    def test_non_binary_mask_not_saved(self, tmp_path):
        with pytest.raises(ValidationError):
            save_mask(np.full((2, 2), 0.3), tmp_path / "m.pgm")
