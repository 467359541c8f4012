import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svpsf.core import FormatError
from svpsf.imageio import read_pfm, read_pgm, write_pfm, write_pgm, write_pgm_raw


def test_pfm_round_trip_bit_exact(tmp_path, rng):
    img = rng.random((17, 23)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "a.pfm", img)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), img)


def test_pfm_header_and_row_order(tmp_path):
    img = np.array([[0.0, 0.25], [0.5, 1.0]])
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    body = np.frombuffer(raw[-16:], "<f4")
    # bottom row first
    assert body.tolist() == [0.5, 1.0, 0.0, 0.25]


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_round_trip_raw_values(tmp_path, rng, maxval):
    vals = rng.integers(0, maxval + 1, (9, 14))
    write_pgm_raw(tmp_path / "a.pgm", vals, maxval)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm", raw=True), vals)


def test_pgm_16bit_big_endian(tmp_path):
    write_pgm_raw(tmp_path / "a.pgm", np.array([[258]]), 65535)
    assert (tmp_path / "a.pgm").read_bytes().endswith(b"\x01\x02")


def test_pgm_float_quantization(tmp_path):
    img = np.array([[0.0, 0.5, 1.0]])
    write_pgm(tmp_path / "a.pgm", img)
    assert read_pgm(tmp_path / "a.pgm", raw=True).tolist() == [[0, 128, 255]]


def test_pgm_comment_in_header(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize(
    "content, reader",
    [
        (b"P2\n1 1\n255\n0", read_pgm),
        (b"P5\n4 4\n255\n\x00", read_pgm),
        (b"PF\n1 1\n-1.0\n\x00\x00\x00\x00", read_pfm),
        (b"Pf\n2 2\n-1.0\n\x00", read_pfm),
    ],
)
def test_malformed(tmp_path, content, reader):
    (tmp_path / "bad").write_bytes(content)
    with pytest.raises(FormatError):
        reader(tmp_path / "bad")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0, 1, width=32)))
def test_pfm_round_trip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(path, arr)
    assert np.array_equal(read_pfm(path), arr.astype(np.float64))
