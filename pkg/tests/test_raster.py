import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oaip.raster import RasterError, read_raster, write_pgm, write_ppm, write_rawf


def test_pgm_is_replicated_to_three_channels(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = read_raster(p)
    assert img.shape == (2, 2, 3)
    assert img[:, :, 0].ravel().tolist() == [0, 255, 128, 64]
    assert np.array_equal(img[:, :, 0], img[:, :, 2])
    assert read_raster(p, replicate=False).shape == (2, 2, 1)


def test_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([1, 2, 3]))
    assert read_raster(p).ravel().tolist() == [1, 2, 3]


def test_truncated_ppm_reports_offset(tmp_path):
    p = tmp_path / "t.ppm"
    p.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(RasterError, match="truncated") as err:
        read_raster(p)
    assert err.value.offset == len(p.read_bytes())


def test_unknown_magic_and_bad_dimensions(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"GIF89a")
    with pytest.raises(RasterError, match="byte 0"):
        read_raster(p)
    p.write_bytes(b"P5\n70000 1\n255\n")
    with pytest.raises(RasterError, match="width"):
        read_raster(p)
    p.write_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(RasterError, match="8-bit"):
        read_raster(p)
    p.write_bytes(b"RAWF" + (2).to_bytes(4, "little") * 2 + (4).to_bytes(4, "little"))
    with pytest.raises(RasterError, match="byte 12"):
        read_raster(p)
    p.write_bytes(b"RAWF" + (2).to_bytes(4, "little") * 2 + (1).to_bytes(4, "little") + bytes(8))
    with pytest.raises(RasterError, match="truncated"):
        read_raster(p)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5).map(lambda s: s[:2] + (3,)),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_rawf_round_trip(img):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "r.rawf"
        write_rawf(p, img)
        back = read_raster(p)
    assert back.dtype == np.float32 and np.array_equal(back, img)


def test_pgm_and_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gray = rng.integers(0, 256, (5, 7))
    write_pgm(tmp_path / "g.pgm", gray)
    assert np.array_equal(read_raster(tmp_path / "g.pgm", replicate=False)[:, :, 0], gray)
    rgb = rng.integers(0, 256, (3, 4, 3))
    write_ppm(tmp_path / "c.ppm", rgb)
    assert np.array_equal(read_raster(tmp_path / "c.ppm"), rgb)
