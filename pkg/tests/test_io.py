import numpy as np
import pytest

from pointgpt_nn.errors import FormatError
from pointgpt_nn.io import read_cloud, read_ply, read_xyz, write_cloud, write_ply, write_xyz


def test_binary_ply_roundtrip_is_bit_exact(tmp_path, rng):
    pts = rng.normal(size=(100, 3)).astype(np.float32)
    write_ply(tmp_path / "a.ply", pts)
    back = read_ply(tmp_path / "a.ply")
    assert back.tobytes() == pts.astype(np.float64).tobytes()


def test_ascii_ply_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(20, 3)).astype(np.float32)
    write_ply(tmp_path / "a.ply", pts, binary=False)
    np.testing.assert_array_equal(read_ply(tmp_path / "a.ply"), pts.astype(np.float64))


def test_big_endian_ply_with_extra_properties(tmp_path):
    rec = np.array([(1.0, 2.0, 3.0, 7), (4.0, 5.0, 6.0, 9)],
                   dtype=[("x", ">f4"), ("y", ">f4"), ("z", ">f4"), ("intensity", ">i4")])
    header = ("ply\nformat binary_big_endian 1.0\nelement vertex 2\n"
              "property float x\nproperty float y\nproperty float z\nproperty int intensity\nend_header\n")
    (tmp_path / "b.ply").write_bytes(header.encode() + rec.tobytes())
    np.testing.assert_array_equal(read_ply(tmp_path / "b.ply"), [[1, 2, 3], [4, 5, 6]])


def test_ascii_ply_skips_faces(tmp_path):
    text = ("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
            "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    (tmp_path / "c.ply").write_text(text)
    assert read_ply(tmp_path / "c.ply").shape == (3, 3)


def test_xyz_roundtrip_exact(tmp_path, rng):
    pts = rng.normal(size=(30, 3))
    write_xyz(tmp_path / "a.xyz", pts)
    np.testing.assert_array_equal(read_xyz(tmp_path / "a.xyz"), pts)


def test_xyz_extra_columns_ignored(tmp_path):
    (tmp_path / "a.txt").write_text("1 2 3 255 0 0\n4,5,6,1,1,1\n")
    np.testing.assert_array_equal(read_xyz(tmp_path / "a.txt"), [[1, 2, 3], [4, 5, 6]])


def test_read_cloud_sets_id_and_label(tmp_path):
    write_cloud(tmp_path / "sample_7.ply", np.eye(3))
    c = read_cloud(tmp_path / "sample_7.ply", label=4)
    assert c.id == "sample_7" and c.label == 4 and len(c) == 3


@pytest.mark.parametrize("content", [b"not a ply\n", b"ply\nformat ascii 1.0\nelement vertex 2\nend_header\n"])
def test_malformed_ply(tmp_path, content):
    (tmp_path / "bad.ply").write_bytes(content)
    with pytest.raises(FormatError):
        read_ply(tmp_path / "bad.ply")


def test_unknown_extension(tmp_path):
    (tmp_path / "a.obj").write_text("v 0 0 0\n")
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "a.obj")
