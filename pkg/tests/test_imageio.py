import numpy as np
import pytest

from structsparse.imageio import ImageError, decode_ppm, encode_ppm, read_ppm, write_ppm


def test_round_trip_random_image(tmp_path, rng):
    px = rng.integers(0, 256, size=(1, 3, 5, 7)).astype(np.float32) / 255
    write_ppm(tmp_path / "a.ppm", px)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (1, 3, 5, 7)
    assert np.array_equal(np.rint(back * 255), np.rint(px * 255))


def test_black_image():
    x = decode_ppm(b"P6\n2 2\n255\n" + bytes(12))
    assert x.shape == (1, 3, 2, 2) and not x.any() and x.dtype == np.float32


def test_header_comments_and_whitespace():
    x = decode_ppm(b"P6 # comment\n1\t1 255\n\xff\x00\x80")
    assert np.allclose(x.ravel(), [1.0, 0.0, 128 / 255])


def test_clip_and_gray_expansion():
    buf = encode_ppm(np.full((1, 1, 1, 2), 2.0, np.float32))
    assert buf.endswith(b"\xff" * 6)


@pytest.mark.parametrize("buf", [b"P3\n1 1\n255\n\0\0\0", b"P6\n1 1\n65535\n" + bytes(6),
                                 b"P6\n2 2\n255\n" + bytes(5), b"P6\nx 1\n255\n\0\0\0", b"P6\n1"])
def test_malformed(buf):
    with pytest.raises(ImageError):
        decode_ppm(buf)
