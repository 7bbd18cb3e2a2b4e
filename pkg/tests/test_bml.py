import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapprior import bml
from mapprior.exceptions import FormatError
from mapprior.layout import LayoutGrid, PseudoSensor, SoftLayout

names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=8)


@st.composite
def grids(draw):
    C = draw(st.integers(1, 4))
    H, W = draw(st.integers(1, 9)), draw(st.integers(1, 9))
    channels = tuple(draw(st.lists(names, min_size=C, max_size=C, unique=True)))
    res = draw(st.floats(1e-3, 10, allow_nan=False))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    if draw(st.booleans()):
        return LayoutGrid(channels, rng.integers(0, 2, (C, H, W)).astype(np.uint8), res)
    return SoftLayout(channels, rng.random((C, H, W)).astype(np.float32), res)


@settings(max_examples=150)
@given(grids())
def test_round_trip(tmp_path_factory, grid):
    path = tmp_path_factory.mktemp("bml") / "g.bml"
    bml.write_bml(grid, path)
    assert bml.read_bml(path) == grid


def test_binary_file_size(tmp_path, toy_layouts):
    g = toy_layouts[0]
    path = bml.write_bml(g, tmp_path / "g.bml")
    assert path.stat().st_size == bml.header_size(g.channels) + 6 * 64 * 64


def test_sensor_round_trip(tmp_path):
    x = PseudoSensor(("a", "b"), np.random.default_rng(0).normal(size=(2, 3, 3)).astype(np.float32), 0.5)
    bml.write_bml(x, tmp_path / "x.bml")
    assert bml.read_bml(tmp_path / "x.bml", as_sensor=True) == x


def test_sidecar(tmp_path, toy_layouts):
    bml.write_bml(toy_layouts[0], tmp_path / "g.bml", provenance={"seed": 1})
    assert bml.read_provenance(tmp_path / "g.bml") == {"seed": 1}
    bml.write_bml(toy_layouts[0], tmp_path / "h.bml")
    assert bml.read_provenance(tmp_path / "h.bml") == {}


def test_bad_magic():
    buf = bml.encode_bml(LayoutGrid(("a",), np.zeros((1, 2, 2), dtype=np.uint8), 1.0))
    with pytest.raises(FormatError) as err:
        bml.decode_bml(b"XML1" + buf[4:])
    assert err.value.offset == 0


def test_truncated_and_trailing():
    buf = bml.encode_bml(LayoutGrid(("a",), np.zeros((1, 2, 2), dtype=np.uint8), 1.0))
    for cut in (3, 10, len(buf) - 1):
        with pytest.raises(FormatError) as err:
            bml.decode_bml(buf[:cut])
        assert err.value.offset is not None
    with pytest.raises(FormatError, match="dimension mismatch"):
        bml.decode_bml(buf + b"\x00")


def test_header_fields():
    buf = bml.encode_bml(SoftLayout(("ab",), np.zeros((1, 2, 3), dtype=np.float32), 0.25))
    assert buf[:4] == b"BML1"
    assert struct.unpack_from("<5I", buf, 4) == (1, 1, 2, 3, 1)
    assert struct.unpack_from("<I", buf, 24) == (2,)
    assert buf[28:30] == b"ab"
    assert struct.unpack_from("<d", buf, 30) == (0.25,)


def test_invalid_binary_payload():
    buf = bytearray(bml.encode_bml(LayoutGrid(("a",), np.zeros((1, 1, 2), dtype=np.uint8), 1.0)))
    buf[-1] = 7
    with pytest.raises(FormatError):
        bml.decode_bml(bytes(buf))
