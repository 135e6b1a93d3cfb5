import struct

import numpy as np
import pytest

from densemap.mesh import PlyError, TriangleMesh, encode_ply, load_mesh, load_points, read_ply, save_mesh, save_points


def tetra(colors=False):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float32).astype(float)
    t = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    c = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [7, 8, 9]]) if colors else None
    return TriangleMesh(v, t, c)


@pytest.mark.parametrize("binary", [True, False])
@pytest.mark.parametrize("colors", [True, False])
def test_round_trip(tmp_path, binary, colors):
    m = tetra(colors)
    save_mesh(m, tmp_path / "m.ply", binary=binary)
    back = load_mesh(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    if colors:
        np.testing.assert_array_equal(back.colors, m.colors)
    else:
        assert back.colors is None


def test_binary_layout():
    data = encode_ply([[1.0, 2.0, 3.0]], [[0, 0, 0]])
    head, body = data.split(b"end_header\n")
    assert b"format binary_little_endian 1.0" in head
    assert b"property list uchar int vertex_indices" in head
    assert body == struct.pack("<3f", 1, 2, 3) + struct.pack("<B3i", 3, 0, 0, 0)


def test_ascii_float32_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(50, 3)).astype(np.float32)
    save_points(v, tmp_path / "p.ply", binary=False)
    np.testing.assert_array_equal(load_points(tmp_path / "p.ply"), v.astype(np.float64))
    assert b"element face" not in (tmp_path / "p.ply").read_bytes()


def test_big_endian_and_quads(tmp_path):
    head = ("ply\nformat binary_big_endian 1.0\nelement vertex 4\nproperty double x\nproperty double y\n"
            "property double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n")
    body = b"".join(struct.pack(">3d", *p) for p in [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)])
    body += struct.pack(">B4i", 4, 0, 1, 2, 3)
    (tmp_path / "q.ply").write_bytes(head.encode() + body)
    m = load_mesh(tmp_path / "q.ply")
    assert m.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]
    assert m.vertices[2].tolist() == [1, 1, 0]


def test_ascii_comments_and_polygons(tmp_path):
    txt = ("ply\nformat ascii 1.0\ncomment hi\nelement vertex 4\nproperty float x\nproperty float y\n"
           "property float z\nelement face 1\nproperty list uchar int vertex_index\nend_header\n"
           "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    (tmp_path / "a.ply").write_text(txt)
    assert load_mesh(tmp_path / "a.ply").n_triangles == 2


@pytest.mark.parametrize("blob, msg", [
    (b"nope\n", "ply"),
    (b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
     b"property float z\nend_header\n\x00\x00", "truncated"),
    (b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
     b"element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 0 5\n", "range"),
])
def test_malformed(tmp_path, blob, msg):
    (tmp_path / "bad.ply").write_bytes(blob)
    with pytest.raises(PlyError, match=msg):
        load_mesh(tmp_path / "bad.ply")


def test_empty_mesh(tmp_path):
    save_mesh(TriangleMesh.empty(), tmp_path / "e.ply")
    m = load_mesh(tmp_path / "e.ply")
    assert m.n_vertices == 0 and m.n_triangles == 0


def test_read_ply_elements(tmp_path):
    save_mesh(tetra(True), tmp_path / "m.ply")
    els = read_ply(tmp_path / "m.ply")
    assert set(els) == {"vertex", "face"}


def test_atomic_write_leaves_no_temp(tmp_path):
    save_mesh(tetra(), tmp_path / "m.ply")
    save_mesh(tetra(), tmp_path / "m.ply")
    assert [p.name for p in tmp_path.iterdir()] == ["m.ply"]


def test_tetra_closed_and_outward():
    m = tetra()
    _, counts = m.edge_counts()
    assert np.all(counts == 2)
    centre = m.vertices.mean(0)
    tri_c = m.vertices[m.triangles].mean(1)
    assert np.all(np.einsum("ij,ij->i", m.triangle_normals(), tri_c - centre) > 0)
