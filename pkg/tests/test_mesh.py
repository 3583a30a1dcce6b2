import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from plyfile import PlyData

from meshmorph import data as mdata
from meshmorph.mesh import (DimensionError, MeshFormatError, TriMesh, UnsupportedFormatError,
                            build_adjacency, color_ramp, icosahedron, icosphere, load_mesh,
                            normalized_laplacian, parse_obj, parse_ply, save_mesh, serialize_obj,
                            serialize_ply)


# ---------------------------------------------------------------- OBJ

def test_parse_minimal_obj():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3")
    assert m.n_vertices == 3
    assert m.faces.tolist() == [[0, 1, 2]]


def test_quad_face_is_unsupported():
    with pytest.raises(UnsupportedFormatError):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4")


def test_bad_number_reports_line():
    with pytest.raises(MeshFormatError, match="line 2"):
        parse_obj("v 0 0 0\nv 1 x 0\n")


def test_obj_ignores_other_records_and_slash_indices():
    m = parse_obj("# c\nvn 0 0 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1/1 2/2/1 3/3/1\n")
    assert m.faces.tolist() == [[0, 1, 2]]


def test_obj_roundtrip_icosahedron_bitwise():
    ico = icosahedron()
    back = parse_obj(serialize_obj(ico))
    assert np.array_equal(back.positions, ico.positions)
    assert np.array_equal(back.faces, ico.faces)


def test_trimesh_rejects_degenerate_and_out_of_range():
    pos = np.zeros((3, 3))
    with pytest.raises(ValueError):
        TriMesh(pos, [[0, 0, 1]])
    with pytest.raises(IndexError):
        TriMesh(pos, [[0, 1, 3]])
    with pytest.raises(DimensionError):
        TriMesh(np.zeros((3, 2)), [[0, 1, 2]])


# ---------------------------------------------------------------- PLY

def test_ply_constant_scalars_get_midpoint():
    rgb = color_ramp(np.full(5, 2.5))
    assert (rgb == [255, 255, 255]).all()


def test_ply_one_hot_scalars():
    s = np.zeros(12)
    s[5] = 1.0
    _, colors = parse_ply(serialize_ply(icosahedron(), s))
    assert colors[5].tolist() == [255, 0, 0]
    assert all(c == [0, 0, 255] for i, c in enumerate(colors.tolist()) if i != 5)


def test_ply_scalar_length_mismatch():
    with pytest.raises(DimensionError):
        serialize_ply(icosahedron(), np.zeros(11))


def test_ply_header_checked_by_independent_reader():
    mesh = icosphere(1)
    ply = PlyData.read(io.BytesIO(serialize_ply(mesh, np.arange(mesh.n_vertices))))
    assert ply["vertex"].count == mesh.n_vertices
    assert ply["face"].count == mesh.n_faces
    assert np.array_equal(np.stack(ply["face"]["vertex_indices"]), mesh.faces)
    np.testing.assert_array_equal(ply["vertex"]["x"], mesh.positions[:, 0].astype(np.float32))


def test_ply_roundtrip_float32_positions():
    mesh = icosahedron().with_positions(icosahedron().positions.astype(np.float32))
    back, colors = parse_ply(serialize_ply(mesh))
    assert colors is None
    assert np.array_equal(back.positions, mesh.positions)
    assert np.array_equal(back.faces, mesh.faces)


def test_save_load_dispatch(tmp_path):
    mesh = icosahedron()
    save_mesh(mesh, tmp_path / "a.obj")
    save_mesh(mesh, tmp_path / "a.ply")
    assert np.array_equal(load_mesh(tmp_path / "a.obj").positions, mesh.positions)
    assert np.array_equal(load_mesh(tmp_path / "a.ply").faces, mesh.faces)


# ---------------------------------------------------------------- graph

def test_adjacency_single_triangle(triangle):
    a = build_adjacency(triangle).toarray()
    assert a.tolist() == [[0, 1, 1], [1, 0, 1], [1, 1, 0]]


def test_adjacency_shared_edge_degree(two_triangles):
    deg = np.asarray(build_adjacency(two_triangles).sum(axis=1)).ravel()
    assert deg[1] == 3 and deg[2] == 3


def test_icosahedron_is_5_regular():
    deg = np.asarray(build_adjacency(icosahedron()).sum(axis=1)).ravel()
    assert (deg == 5).all()


def test_laplacian_triangle(triangle):
    lt = normalized_laplacian(build_adjacency(triangle)).toarray()
    np.testing.assert_allclose(lt, [[0, -0.5, -0.5], [-0.5, 0, -0.5], [-0.5, -0.5, 0]])


def test_laplacian_empty_adjacency():
    import scipy.sparse as sp
    assert normalized_laplacian(sp.csr_matrix((4, 4))).nnz == 0


@pytest.mark.parametrize("mesh", [icosahedron(), icosphere(1), icosphere(2)], ids=["ico", "s1", "s2"])
def test_laplacian_spectrum_in_range(mesh):
    lap = np.eye(mesh.n_vertices) + normalized_laplacian(build_adjacency(mesh)).toarray()
    ev = np.linalg.eigvalsh(lap)
    assert ev.min() >= -1e-9 and ev.max() <= 2 + 1e-9


@given(st.integers(0, 2), st.integers(0, 10_000))
def test_adjacency_symmetric_zero_diagonal(subdiv, seed):
    mesh = icosphere(subdiv)
    perm = np.random.default_rng(seed).permutation(mesh.n_faces)
    a = build_adjacency(TriMesh(mesh.positions, mesh.faces[perm]))
    assert (a != a.T).nnz == 0
    assert a.diagonal().sum() == 0


def test_icosphere_counts():
    for s in range(4):
        m = icosphere(s)
        assert m.n_vertices == 10 * 4 ** s + 2 and m.n_faces == 20 * 4 ** s


# ---------------------------------------------------------------- dataset

def test_synthetic_template_counts():
    ds = mdata.generate_synthetic_dataset(10, subdivisions=2)
    assert ds.template.n_vertices == 162 and ds.template.n_faces == 320


def test_synthetic_determinism():
    a = mdata.generate_synthetic_dataset(12, subdivisions=1, seed=3)
    b = mdata.generate_synthetic_dataset(12, subdivisions=1, seed=3)
    assert np.array_equal(a.samples, b.samples)


def test_small_amplitude_approaches_template():
    ds = mdata.generate_synthetic_dataset(5, subdivisions=1, amplitude=1e-12)
    np.testing.assert_allclose(ds.samples, np.broadcast_to(ds.template.positions, ds.samples.shape),
                               atol=1e-10)


def test_rotated_template_is_rigid_and_off_axis():
    plain = mdata.generate_synthetic_dataset(6, subdivisions=1, seed=2)
    turned = mdata.generate_synthetic_dataset(6, subdivisions=1, seed=2, rotate=True)
    p, q = plain.template.positions, turned.template.positions
    np.testing.assert_allclose(q @ q.T, p @ p.T, atol=1e-12)  # same Gram matrix
    assert (np.abs(q) > 1e-6).all() and not (np.abs(p) > 1e-6).all()
    assert np.array_equal(turned.template.faces, plain.template.faces)
    assert np.array_equal(mdata.generate_synthetic_dataset(6, 1, seed=2, rotate=True).samples, turned.samples)


def test_invalid_synthetic_args():
    with pytest.raises(ValueError):
        mdata.generate_synthetic_dataset(5, subdivisions=-1)
    with pytest.raises(ValueError):
        mdata.generate_synthetic_dataset(5, amplitude=0.0)


def test_splits_80_10_10_disjoint():
    ds = mdata.generate_synthetic_dataset(20, subdivisions=0)
    assert [len(ds.splits[k]) for k in ("train", "val", "test")] == [16, 2, 2]
    with pytest.raises(ValueError):
        mdata.MeshSequenceDataset(ds.template, ds.samples, {"train": [0, 1], "test": [1]})


def test_normalize_roundtrip_and_train_mean():
    ds = mdata.generate_synthetic_dataset(20, subdivisions=1)
    x = mdata.normalize(ds)
    np.testing.assert_allclose(mdata.denormalize(ds, x), ds.samples, atol=1e-12)
    assert np.abs(x[ds.splits["train"]].mean(axis=0)).max() < 1e-9


def test_constant_coordinate_uses_std_floor():
    ds = mdata.generate_synthetic_dataset(10, subdivisions=0)
    samples = ds.samples.copy()
    samples[:, 0, :] = 0.25
    ds2 = mdata.MeshSequenceDataset(ds.template, samples, ds.splits)
    assert (ds2.std[0] == mdata.STD_FLOOR).all()
    assert (ds2.normalize(samples)[:, 0] == 0).all()


def test_real_sph_harm_orthonormal():
    # Gauss-free check: on a dense icosphere the basis is close to orthonormal
    pts = icosphere(4).positions
    y = mdata.real_sph_harm_basis(pts, 2)
    gram = y.T @ y * (4 * np.pi / len(pts))
    np.testing.assert_allclose(gram, np.eye(9), atol=0.05)


def test_dataset_disk_roundtrip(tmp_path):
    ds = mdata.generate_synthetic_dataset(6, subdivisions=1, seed=1)
    mdata.save_dataset(ds, tmp_path / "d")
    back = mdata.load_dataset(tmp_path / "d")
    assert np.array_equal(back.samples, ds.samples)
    assert np.array_equal(back.mean, ds.mean) and np.array_equal(back.std, ds.std)
    assert back.splits == ds.splits
