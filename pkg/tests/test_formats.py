import re

import numpy as np
import pytest

from sim4seg.exceptions import InvalidInputError
from sim4seg.formats import decode_pbm, decode_pgm, encode_pbm, encode_pgm, heatmap_svg


def fills(svg):
    return [int(v) for v in re.findall(r'fill="rgb\((\d+),\1,\1\)"', svg)]


@pytest.mark.parametrize("shape", [(1, 1), (3, 8), (5, 9), (16, 17)])
def test_pbm_round_trip(rng, shape):
    bits = rng.random(shape) > 0.5
    blob = encode_pbm(bits)
    assert blob.startswith(f"P4\n{shape[1]} {shape[0]}\n".encode())
    np.testing.assert_array_equal(decode_pbm(blob), bits)


def test_pgm_round_trip(rng):
    img = rng.integers(0, 256, (7, 5), dtype=np.uint8)
    np.testing.assert_array_equal(decode_pgm(encode_pgm(img)), img)


def test_pgm_header_with_comment():
    blob = b"P5\n# made by hand\n2 1\n255\n" + bytes([3, 250])
    np.testing.assert_array_equal(decode_pgm(blob), [[3, 250]])


def test_wrong_magic_rejected():
    with pytest.raises(InvalidInputError):
        decode_pbm(encode_pgm(np.zeros((2, 2), dtype=np.uint8)))


def test_heatmap_constant_map_is_uniform():
    assert set(fills(heatmap_svg(np.full((3, 3), 0.7)))) == {128}


def test_heatmap_extremes():
    assert fills(heatmap_svg(np.array([[0.0, 1.0], [1.0, 0.0]]))) == [0, 255, 255, 0]


def test_heatmap_linear_and_deterministic():
    values = np.array([[0.0, 0.25, 0.5, 1.0]])
    svg = heatmap_svg(values)
    assert fills(svg) == [0, 64, 128, 255]
    assert svg == heatmap_svg(values.copy())
