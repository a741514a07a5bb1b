import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lowreg.io import (
    VolFormatError,
    decode_vol,
    encode_vol,
    format_csv,
    read_csv,
    read_ddf,
    read_labels,
    read_volume,
    write_csv,
    write_vol,
)
from lowreg.volume import DDF, LabelMap, Volume

shapes = st.tuples(*(st.integers(1, 6) for _ in range(3)))
f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


@given(shapes.flatmap(lambda s: arrays(np.float32, s, elements=f32)))
def test_f32_round_trip(a):
    out, spacing, dtype = decode_vol(encode_vol(a, (1.0, 2.0, 0.5)))
    assert dtype == "f32" and spacing == (1.0, 2.0, 0.5)
    assert np.array_equal(out, a)


@given(shapes.flatmap(lambda s: arrays(np.uint8, s)))
def test_u8_round_trip(a):
    out, _, dtype = decode_vol(encode_vol(a, dtype="u8"))
    assert dtype == "u8" and np.array_equal(out, a)


def test_header_and_layout():
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    raw = encode_vol(a)
    head, payload = raw.split(b"\n\n", 1)
    assert head.decode().splitlines() == [
        "magic VOL1", "dims 2 3 4", "spacing 1 1 1", "dtype f32", "order x-fastest",
    ]
    vals = np.frombuffer(payload, "<f4")
    # x varies fastest
    assert vals[0] == a[0, 0, 0] and vals[1] == a[1, 0, 0] and vals[2] == a[0, 1, 0]


def test_channels_interleaved(rng):
    d = rng.standard_normal((3, 4, 5, 3)).astype(np.float32)
    raw = encode_vol(d)
    assert b"channels 3" in raw
    vals = np.frombuffer(raw.split(b"\n\n", 1)[1], "<f4")
    assert np.array_equal(vals[:3], d[0, 0, 0]) and np.array_equal(vals[3:6], d[1, 0, 0])
    out, _, _ = decode_vol(raw)
    assert np.array_equal(out, d)


@pytest.mark.parametrize("raw", [
    b"no header here",
    b"magic VOL2\ndims 1 1 1\ndtype f32\n\n\0\0\0\0",
    b"magic VOL1\ndims 1 1\ndtype f32\n\n\0\0\0\0",
    b"magic VOL1\ndims 1 1 1\ndtype f64\n\n" + bytes(8),
    b"magic VOL1\ndims 2 1 1\ndtype f32\n\n\0\0\0\0",
    b"magic VOL1\ndims 1 1 1\ndtype f32\norder z-fastest\n\n\0\0\0\0",
    b"magic VOL1\ndims a b c\ndtype f32\n\n",
])
def test_malformed_rejected(raw):
    with pytest.raises(VolFormatError):
        decode_vol(raw)


def test_encode_rejects_bad_input():
    with pytest.raises(ValueError):
        encode_vol(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        encode_vol(np.full((2, 2, 2), 300), dtype="u8")


def test_typed_readers(tmp_path, rng):
    v = Volume(rng.random((4, 5, 6)), (1.0, 1.0, 2.0))
    lab = LabelMap(rng.integers(0, 4, (4, 5, 6)).astype(np.uint8))
    d = DDF(rng.standard_normal((4, 5, 6, 3)))
    write_vol(tmp_path / "v.vol", v)
    write_vol(tmp_path / "l.vol", lab)
    write_vol(tmp_path / "d.vol", d)
    rv = read_volume(tmp_path / "v.vol")
    assert rv.spacing == (1.0, 1.0, 2.0)
    assert np.allclose(rv.data, v.data, atol=1e-7)
    assert np.array_equal(read_labels(tmp_path / "l.vol").data, lab.data)
    assert np.allclose(read_ddf(tmp_path / "d.vol").data, d.data, atol=1e-6)
    with pytest.raises(VolFormatError):
        read_volume(tmp_path / "d.vol")
    with pytest.raises(VolFormatError):
        read_ddf(tmp_path / "v.vol")


def test_csv_format(tmp_path):
    text = format_csv(("a", "b"), [{"a": 1, "b": 0.1}, (np.int64(2), np.float32(0.5))])
    assert text == "a,b\r\n1,0.1\r\n2,0.5\r\n"
    write_csv(tmp_path / "t.csv", ("x",), [(1 / 3,)])
    assert read_csv(tmp_path / "t.csv") == [{"x": repr(1 / 3)}]


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_vol(tmp_path / "a.vol", np.zeros((2, 2, 2)))
    write_vol(tmp_path / "a.vol", np.ones((2, 2, 2)))
    assert os.listdir(tmp_path) == ["a.vol"]
    assert read_volume(tmp_path / "a.vol").data.min() == 1.0
    with pytest.raises(ValueError):
        write_vol(tmp_path / "b.vol", np.full((2, 2, 2), 999), dtype="u8")
    assert os.listdir(tmp_path) == ["a.vol"]
