import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gspretrain.io import read_pfm, read_ply, read_ppm, to_uint8, write_pfm, write_ply, write_ppm

seeds = st.integers(0, 2**32 - 1)


@given(seeds, st.booleans())
def test_ply_round_trip(tmp_path_factory, seed, binary):
    pts = np.random.default_rng(seed).normal(scale=30, size=(17, 3))
    path = tmp_path_factory.mktemp("ply") / "c.ply"
    write_ply(path, pts, binary=binary)
    np.testing.assert_array_equal(read_ply(path), pts.astype(np.float32).astype(np.float64))


def test_ply_extra_properties_and_doubles(tmp_path):
    dtype = np.dtype([("intensity", "<u1"), ("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    rows = np.array([(7, 1.0, 2.0, 3.0), (9, -1.5, 0.25, 8.0)], dtype=dtype)
    head = ("ply\nformat binary_little_endian 1.0\ncomment synthetic\nelement vertex 2\n"
            "property uchar intensity\nproperty double x\nproperty double y\nproperty double z\n"
            "element face 0\nproperty list uchar int vertex_indices\nend_header\n")
    (tmp_path / "p.ply").write_bytes(head.encode() + rows.tobytes())
    np.testing.assert_array_equal(read_ply(tmp_path / "p.ply"), [[1, 2, 3], [-1.5, 0.25, 8]])


def test_ply_rejects_garbage(tmp_path):
    (tmp_path / "bad.ply").write_bytes(b"not a ply")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "bad.ply")
    (tmp_path / "noz.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n"
                                       b"property float x\nproperty float y\nend_header\n1 2\n")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "noz.ply")


def test_empty_ply(tmp_path):
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    assert read_ply(tmp_path / "e.ply").shape == (0, 3)


def test_ppm_round_trip_and_comments(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n7 5\n255\n" + img.tobytes())
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm"), img)


def test_to_uint8_rounds_and_clips():
    assert to_uint8(np.array([-0.1, 0.0, 0.5, 1.0, 2.0])).tolist() == [0, 0, 128, 255, 255]


def test_pfm_round_trip_keeps_row_order_and_inf(tmp_path):
    d = np.arange(12, dtype=np.float32).reshape(3, 4)
    d[0, 0] = np.inf
    write_pfm(tmp_path / "d.pfm", d)
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), d)
    raw = (tmp_path / "d.pfm").read_bytes()
    # rows run bottom to top, so the top row is the last one on disk
    np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), d[0])
