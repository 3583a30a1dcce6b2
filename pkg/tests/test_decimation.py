import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshmorph import sparse as sparse_util
from meshmorph.decimation import (DecimationStuck, MeshHierarchy, build_hierarchy,
                                  closest_point_barycentric, downsample_matrix, level_counts,
                                  qem_decimate, quadric_error, upsample_matrix, vertex_quadrics)
from meshmorph.mesh import StructureError, TriMesh, icosahedron, icosphere


def regular_tetrahedron():
    pos = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    return TriMesh(pos, [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])


# ---------------------------------------------------------------- quadrics

def test_planar_patch_quadric_vanishes_on_plane(two_triangles):
    q = vertex_quadrics(two_triangles)
    for v in range(4):
        for p in ([0.3, 0.7, 0.0], [-5.0, 2.0, 0.0]):
            assert quadric_error(q[v], p) == pytest.approx(0.0, abs=1e-15)


def test_cube_corner_quadric():
    # three mutually orthogonal faces meeting at the origin
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    mesh = TriMesh(pos, [[0, 2, 1], [0, 3, 2], [0, 1, 3]])
    q = vertex_quadrics(mesh)[0]
    assert quadric_error(q, [0, 0, 0]) == 0.0
    assert quadric_error(q, [0.5, 0.5, 0.5]) == pytest.approx(0.75, abs=1e-15)
    assert np.array_equal(q, q.T)


def test_quadrics_symmetric_psd():
    q = vertex_quadrics(icosphere(2))
    assert np.array_equal(q, np.transpose(q, (0, 2, 1)))
    assert np.linalg.eigvalsh(q).min() >= -1e-9


def test_zero_area_face_warns():
    pos = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], dtype=float)
    with pytest.warns(UserWarning, match="zero-area"):
        vertex_quadrics(TriMesh(pos, [[0, 1, 2], [0, 1, 3]]))


# ---------------------------------------------------------------- collapse

def test_tetrahedron_tie_break():
    tet = regular_tetrahedron()
    q = vertex_quadrics(tet)
    # brute force: every collapse (either survivor) costs the same
    costs = [quadric_error(q[a] + q[b], tet.positions[w])
             for a, b in itertools.combinations(range(4), 2) for w in (a, b)]
    np.testing.assert_allclose(costs, costs[0], rtol=1e-12)
    _, kept, trace = qem_decimate(tet, 3)
    assert trace.steps == [(1, 0)]
    assert kept.tolist() == [0, 2, 3]


def test_target_equal_n_is_identity():
    ico = icosahedron()
    coarse, kept, trace = qem_decimate(ico, 12)
    assert coarse is ico and kept.tolist() == list(range(12)) and not trace.steps


def test_icosphere_to_41_is_subset():
    fine = icosphere(2)
    coarse, kept, _ = qem_decimate(fine, 41)
    assert coarse.n_vertices == 41
    fine_set = {tuple(p) for p in fine.positions.tolist()}
    assert all(tuple(p) in fine_set for p in coarse.positions.tolist())
    assert np.array_equal(coarse.positions, fine.positions[kept])


def test_decimation_preserves_orientation():
    fine = icosphere(2)
    coarse, _, _ = qem_decimate(fine, 41)
    p = coarse.positions[coarse.faces]
    normals = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    # convex, centred shape: outward normals point away from the origin
    assert (np.einsum("ij,ij->i", normals, p.mean(axis=1)) > 0).all()


def test_stuck_reports_achieved_count():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], dtype=float)
    with pytest.raises(DecimationStuck) as err:
        qem_decimate(TriMesh(pos, [[0, 1, 2], [3, 4, 5]]), 3)
    assert err.value.achieved == 4 and err.value.target == 3


def test_invalid_target():
    with pytest.raises(ValueError):
        qem_decimate(icosahedron(), 13)
    with pytest.raises(ValueError):
        qem_decimate(icosahedron(), 2)


# ---------------------------------------------------------------- matrices

def test_downsample_identity_and_single():
    assert (downsample_matrix(4, range(4)).toarray() == np.eye(4)).all()
    assert downsample_matrix(4, [2]).toarray().tolist() == [[0, 0, 1, 0]]


def test_downsample_errors():
    with pytest.raises(IndexError):
        downsample_matrix(4, [1, 1])
    with pytest.raises(IndexError):
        downsample_matrix(4, [5])


@given(st.integers(2, 30), st.integers(0, 1000))
def test_downsample_selects_rows(n, seed):
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(n, size=rng.integers(1, n + 1), replace=False))
    x = rng.standard_normal((n, 3))
    assert np.array_equal(downsample_matrix(n, kept) @ x, x[kept])


def _bary_oracle(p, a, b, c, res=400):
    # dense sampling of the triangle
    u, v = np.meshgrid(np.linspace(0, 1, res + 1), np.linspace(0, 1, res + 1))
    keep = u + v <= 1
    u, v = u[keep], v[keep]
    pts = (1 - u - v)[:, None] * a + u[:, None] * b + v[:, None] * c
    return np.min(np.sum((pts - p) ** 2, axis=1))


@given(st.integers(0, 10_000))
def test_closest_point_matches_sampling_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((3, 3))
    p = rng.standard_normal((1, 3)) * 2
    d2, w = closest_point_barycentric(p, a[None], b[None], c[None])
    assert w[0, 0].sum() == pytest.approx(1.0)
    assert (w[0, 0] >= -1e-12).all()
    assert d2[0, 0] <= _bary_oracle(p[0], a, b, c) + 1e-12


def test_upsample_rows(sphere_h):
    fine, coarse = sphere_h.meshes[2], sphere_h.meshes[1]
    up = sphere_h.up[1]
    assert up.shape == (fine.n_vertices, coarse.n_vertices)
    np.testing.assert_allclose(sparse_util.row_sums(up), 1.0, atol=1e-12)
    assert sparse_util.row_nnz(up).max() <= 3
    kept = sphere_h.kept[1]
    assert (sparse_util.row_nnz(up)[kept] == 1).all()
    # reproduction of kept positions and reconstruction consistency
    recon = up @ (sphere_h.down[1] @ fine.positions)
    assert np.array_equal(recon[kept], fine.positions[kept])


def test_upsample_vertex_on_coarse_vertex():
    coarse = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float), [[0, 1, 2]])
    fine = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0.0]]), [[0, 1, 2], [3, 2, 1]])
    up = upsample_matrix(fine, coarse, [0, 1, 2])
    assert up.getrow(3).toarray().tolist() == [[0, 1, 0]]


def test_upsample_no_faces():
    coarse = TriMesh(np.zeros((3, 3)), np.zeros((0, 3)))
    with pytest.raises(StructureError):
        upsample_matrix(icosahedron(), coarse, [0, 1, 2])


# ---------------------------------------------------------------- hierarchy

def test_level_counts_law():
    assert level_counts(5023, 4, 4) == [5023, 1256, 314, 79, 20]
    assert level_counts(6890, 4, 4) == [6890, 1723, 431, 108, 27]


def test_hierarchy_precondition():
    with pytest.raises(ValueError):
        build_hierarchy(icosphere(2), levels=3)
    with pytest.raises(ValueError):
        build_hierarchy(icosphere(2), levels=4)


def test_sphere_hierarchy_invariants(sphere_h):
    assert sphere_h.counts == [11, 41, 162]
    for l in range(sphere_h.depth):
        fine, coarse = sphere_h.meshes[l + 1], sphere_h.meshes[l]
        assert np.array_equal(coarse.positions, fine.positions[sphere_h.kept[l]])
        d = sphere_h.down[l]
        assert (sparse_util.row_nnz(d) == 1).all() and (d.data == 1).all()
        np.testing.assert_allclose(sparse_util.row_sums(sphere_h.up[l]), 1.0, atol=1e-12)


def test_hierarchy_is_deterministic():
    a = build_hierarchy(icosphere(2), levels=2)
    b = build_hierarchy(icosphere(2), levels=2)
    for l in range(2):
        assert (a.up[l] != b.up[l]).nnz == 0
        assert np.array_equal(a.kept[l], b.kept[l])


def test_hierarchy_save_load(sphere_h, tmp_path):
    sphere_h.save(tmp_path / "h")
    back = MeshHierarchy.load(tmp_path / "h")
    assert back.counts == sphere_h.counts and back.factor == 4
    for l in range(sphere_h.depth):
        assert (back.up[l] != sphere_h.up[l]).nnz == 0
        assert (back.down[l] != sphere_h.down[l]).nnz == 0
        assert np.array_equal(back.meshes[l].faces, sphere_h.meshes[l].faces)
    header = (tmp_path / "h" / "up_0.csv").read_text().splitlines()[0]
    assert header == "row,col,value"
