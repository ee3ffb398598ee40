import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import subspace_angles

from pdsnap.bases import (
    Basis, BasisArchiveError, DegenerateBasisError, DegenerateBasisWarning,
    DegenerateComponentError, RankExhaustedWarning, build_pca_basis, build_splocs_basis, deflate,
    extract_local_component, largest_deformation_vertex, load_basis, reconstruction_error,
    save_basis, support_map,
)
from pdsnap.mesh import MassMatrix, Mesh, box_tet_mesh, lumped_mass_matrix
from pdsnap.snapshots import SnapshotSet, SnapshotStateError, center, mass_weight

FULL = (1e6, 2e6)  # support radii far beyond any test mesh


def path_mesh(k):
    v = np.column_stack([np.arange(k, dtype=float), np.zeros(k), np.zeros(k)])
    return Mesh(v, edges=[[i, i + 1] for i in range(k - 1)])


def residual_from(X):
    """(n, 3T) matrix -> (n, 3, T) residual."""
    n = X.shape[0]
    return X.reshape(n, 3, -1)


def weighted_svd(s):
    return np.linalg.svd(s.matrix(), full_matrices=False)


# -- primitives ----------------------------------------------------------------


def test_largest_deformation_vertex_examples():
    r = np.zeros((4, 3, 2))
    r[:, 0, 0] = 1.0
    r[2, :, 1] = [3.0, 4.0, 0.0]
    assert largest_deformation_vertex(r) == 2
    tie = np.zeros((4, 3, 1))
    tie[1, 0, 0] = tie[3, 1, 0] = 2.0
    assert largest_deformation_vertex(tie) == 1
    assert largest_deformation_vertex(np.zeros((3, 3, 4))) is None


def test_support_map_linear_falloff():
    m = path_mesh(7)
    sm = support_map(m, 0, 1.0, 3.0)
    assert sm.weights[0] == 1.0 and sm.weights[1] == 1.0
    assert sm.weights[2] == 0.5
    assert np.all(sm.weights[3:] == 0.0)


def test_support_map_beyond_diameter():
    m = box_tet_mesh(2, 2, 2)
    sm = support_map(m, 4, 50.0, 100.0)
    assert np.all(sm.weights == 1.0)


def test_support_map_disconnected_vertex_has_zero_weight():
    m = Mesh([[0, 0, 0], [1, 0, 0], [9, 9, 9]], edges=[[0, 1]])
    sm = support_map(m, 0, 5.0, 10.0)
    assert sm.weights[2] == 0.0 and sm.weights[1] == 1.0


@pytest.mark.parametrize("lo, hi", [(2.0, 2.0), (3.0, 1.0), (-1.0, 2.0)])
def test_support_map_rejects_bad_radii(lo, hi):
    with pytest.raises(ValueError):
        support_map(path_mesh(3), 0, lo, hi)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 26), st.floats(0.0, 2.0), st.floats(0.1, 3.0))
def test_support_weights_decrease_with_distance(c, lo, width):
    m = box_tet_mesh(2, 2, 2)
    sm = support_map(m, c, lo, lo + width)
    assert sm.weights[c] == 1.0
    order = np.argsort(sm.distances, kind="stable")
    w = sm.weights[order]
    assert np.all(np.diff(w) <= 1e-15)
    inside = (sm.distances > lo) & (sm.distances < lo + width)
    np.testing.assert_allclose(sm.weights[inside], (lo + width - sm.distances[inside]) / width)


def test_extract_recovers_local_rank_one():
    m = path_mesh(12)
    c = np.zeros(12)
    c[3:6] = [1.0, -2.0, 0.5]
    w = np.sin(np.arange(15.0))
    r = residual_from(np.outer(c, w))
    v = largest_deformation_vertex(r)
    u, coeffs = extract_local_component(r, v, support_map(m, v, 3.0, 6.0))
    expected = c / np.linalg.norm(c)
    assert min(np.abs(u - expected).max(), np.abs(u + expected).max()) < 1e-8
    np.testing.assert_allclose(np.outer(u, coeffs.T.ravel()), np.outer(c, w), atol=1e-12)


def test_extract_full_support_matches_svd():
    rng = np.random.default_rng(3)
    m = box_tet_mesh(2, 2, 1)
    n = m.n_vertices
    X = np.outer(rng.standard_normal(n), rng.standard_normal(12))
    u, _ = extract_local_component(residual_from(X), 0, support_map(m, 0, *FULL))
    u_svd = np.linalg.svd(X)[0][:, 0]
    assert abs(abs(u @ u_svd) - 1) < 1e-12


def test_extract_outside_support_is_degenerate():
    m = path_mesh(10)
    X = np.zeros((10, 6))
    X[9] = 1.0
    with pytest.raises(DegenerateComponentError):
        extract_local_component(residual_from(X), 9, support_map(m, 0, 1.0, 2.0))


def test_deflate_cancels_rank_one():
    u = np.array([0.6, 0.0, 0.8])
    coeffs = np.arange(12.0).reshape(4, 3)
    r = u[:, None, None] * coeffs.T[None]
    assert np.abs(deflate(r, u, coeffs)).max() < 1e-10
    np.testing.assert_array_equal(deflate(r, u, np.zeros((4, 3))), r)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 3, 4), elements=st.floats(-5, 5, width=64)),
       st.floats(0.0, 2.0))
def test_deflate_never_increases_norm(r, lo):
    m = path_mesh(8)
    v = largest_deformation_vertex(r)
    if v is None:
        return
    try:
        u, c = extract_local_component(r, v, support_map(m, v, lo, lo + 1.5))
    except DegenerateComponentError:
        return
    assert np.linalg.norm(deflate(r, u, c)) <= np.linalg.norm(r) * (1 + 1e-12)


# -- PCA -------------------------------------------------------------------------


def translation_snapshots(mesh, mass, T=8):
    frames = np.array([mesh.vertices + [0.1 * t * t, 0, 0] for t in range(T)])
    raw = center(SnapshotSet.from_frames(frames))
    return raw, mass_weight(raw, mass)


def test_rigid_translation_is_one_component():
    mesh = box_tet_mesh(3, 2, 2)
    mass = lumped_mass_matrix(mesh, 5.0)
    raw, s = translation_snapshots(mesh, mass)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankExhaustedWarning)
        b = build_pca_basis(s, 3, *FULL, mass, mesh)
    assert b.k == 1
    col = b.U[:, 0]
    assert np.ptp(col) < 1e-12 * np.abs(col).max()
    # analytic oracle: the constant field normalised in the mass inner product
    assert abs(abs(col[0]) - 1 / np.sqrt(mass.total)) < 1e-12
    assert reconstruction_error(b, raw, mass) < 1e-8


def test_rank_exhaustion_matches_svd_rank():
    mesh = box_tet_mesh(3, 2, 1)
    n = mesh.n_vertices
    mass = lumped_mass_matrix(mesh, 1.0)
    rng = np.random.default_rng(11)
    fields = rng.standard_normal((3, n, 3))
    coeffs = rng.standard_normal((10, 3))
    frames = np.einsum("tk,kvc->tvc", coeffs, fields)
    s = mass_weight(center(SnapshotSet.from_frames(frames)), mass)
    sv = np.linalg.svd(s.matrix(), compute_uv=False)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    with pytest.warns(RankExhaustedWarning):
        b = build_pca_basis(s, 20, *FULL, mass, mesh)
    assert b.k == rank
    assert "rank_exhausted" in b.warnings


def test_full_support_pca_matches_svd(small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    b = build_pca_basis(s, 12, *FULL, mass, mesh)
    U_svd, sv, _ = weighted_svd(s)
    Uw = b.U * mass.sqrt()[:, None]
    for k in (1, 4, 8, 12):
        assert subspace_angles(Uw[:, :k], U_svd[:, :k]).max() < 1e-6
    # deflation curve: remaining energy equals the singular value tail
    tail = np.sqrt(np.cumsum((sv**2)[::-1])[::-1])
    np.testing.assert_allclose(b.residual_norms, tail[:13], rtol=1e-6, atol=1e-9 * sv[0])


def test_local_pca_properties(small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    b = build_pca_basis(s, 15, 1.5, 3.0, mass, mesh)
    assert b.kind == "pca" and b.k == 15
    assert np.abs(b.U.T @ (mass.diag[:, None] * b.U) - np.eye(b.k)).max() < 1e-8
    assert np.all(np.diff(b.residual_norms) <= 1e-12 * b.residual_norms[0])
    assert np.all(np.linalg.norm(b.U, axis=0) > 0)
    G, R = b.generator_pair()
    np.testing.assert_allclose(G @ np.linalg.inv(R), b.U, atol=1e-10)
    # generator columns are local: nothing beyond d_max of their centre
    for j in range(b.k):
        sm = support_map(mesh, int(b.centers[j]), 1.5, 3.0)
        assert not np.any(G[:, j].toarray().ravel()[sm.weights == 0])


def test_non_orthonormalized_variant(small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    b = build_pca_basis(s, 6, 1.5, 3.0, mass, mesh, orthonormalize=False)
    gram = b.U.T @ (mass.diag[:, None] * b.U)
    np.testing.assert_allclose(np.diag(gram), 1.0, rtol=1e-12)


def test_truncation_is_nested_and_error_decreases(small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    raw = small_beam["centered"]
    b = build_pca_basis(s, 10, 1.5, 3.0, mass, mesh)
    errs = [reconstruction_error(None, raw, mass)]
    for k in range(1, 11):
        t = b.truncate(k)
        np.testing.assert_array_equal(t.U, b.U[:, :k])
        errs.append(reconstruction_error(t, raw, mass))
    assert errs[0] == 1.0
    assert np.all(np.diff(errs) <= 1e-12)


def test_reconstruction_error_exact_span():
    mesh = box_tet_mesh(2, 1, 1)
    mass = lumped_mass_matrix(mesh, 2.0)
    raw, _ = translation_snapshots(mesh, mass)
    exact = Basis(U=np.ones((mesh.n_vertices, 1)), mean_shape=raw.mean_shape)
    assert reconstruction_error(exact, raw, mass) < 1e-10
    with pytest.raises(SnapshotStateError):
        reconstruction_error(exact, mass_weight(raw, mass), mass)
    with pytest.raises(ValueError):
        reconstruction_error(Basis(U=np.ones((3, 1)), mean_shape=np.zeros((3, 3))), raw, mass)


def test_builders_require_weighted_input(small_beam):
    with pytest.raises(SnapshotStateError):
        build_pca_basis(small_beam["centered"], 3, 1.0, 2.0, small_beam["mass"], small_beam["mesh"])


def test_pca_is_deterministic(tmp_path, small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    save_basis(build_pca_basis(s, 8, 1.5, 3.0, mass, mesh), tmp_path / "a.pdba")
    save_basis(build_pca_basis(s, 8, 1.5, 3.0, mass, mesh), tmp_path / "b.pdba")
    assert (tmp_path / "a.pdba").read_bytes() == (tmp_path / "b.pdba").read_bytes()


# -- SPLOCS ----------------------------------------------------------------------


def test_splocs_zero_lambda_reproduces_pca_span(small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    p = build_pca_basis(s, 8, *FULL, mass, mesh)
    q = build_splocs_basis(s, 8, *FULL, 0.0, mass, mesh)
    assert q.kind == "splocs" and q.k == 8
    sq = mass.sqrt()[:, None]
    assert subspace_angles(sq * p.U, sq * q.U).max() < 1e-4


def test_splocs_huge_lambda_is_degenerate(small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    with pytest.warns(DegenerateBasisWarning):
        with pytest.raises(DegenerateBasisError):
            build_splocs_basis(s, 4, 1.5, 3.0, 1e6 * s.norm, mass, mesh)


def test_splocs_separates_disjoint_bumps():
    n = 30
    mesh = path_mesh(n)
    mass = MassMatrix(np.ones(n))
    x = np.arange(n, dtype=float)
    bump_a = np.exp(-0.5 * (x - 5) ** 2)
    bump_b = np.exp(-0.5 * (x - 24) ** 2)
    t = np.arange(40)
    frames = np.zeros((40, n, 3))
    frames[:, :, 1] = np.outer(np.sin(0.3 * t), bump_a) + np.outer(np.cos(0.17 * t) * 0.7, bump_b)
    s = mass_weight(center(SnapshotSet.from_frames(frames)), mass)
    b = build_splocs_basis(s, 2, 3.0, 6.0, 0.05, mass, mesh)
    assert b.k == 2
    regions = [x < 15, x >= 15]
    for j in range(2):
        col = b.U[:, j]
        home = max(regions, key=lambda r: np.linalg.norm(col[r]))
        leak = np.linalg.norm(col[~home])
        assert leak < 0.01 * np.linalg.norm(col)
    homes = {int(np.argmax(np.abs(b.U[:, j])) < 15) for j in range(2)}
    assert homes == {0, 1}


def test_splocs_is_deterministic(tmp_path, small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    for name in ("a", "b"):
        save_basis(build_splocs_basis(s, 5, 1.5, 3.0, 0.1, mass, mesh, iters=20, outer=2),
                   tmp_path / f"{name}.pdba")
    assert (tmp_path / "a.pdba").read_bytes() == (tmp_path / "b.pdba").read_bytes()


def test_splocs_rejects_negative_lambda(small_beam):
    with pytest.raises(ValueError):
        build_splocs_basis(small_beam["weighted"], 2, 1.0, 2.0, -1.0, small_beam["mass"],
                           small_beam["mesh"])


# -- archive ---------------------------------------------------------------------


def test_basis_archive_roundtrip(tmp_path, small_beam):
    s, mass, mesh = small_beam["weighted"], small_beam["mass"], small_beam["mesh"]
    b = build_pca_basis(s, 6, 1.5, 3.0, mass, mesh)
    save_basis(b, tmp_path / "b.pdba")
    back = load_basis(tmp_path / "b.pdba")
    assert back.kind == "pca" and back.k == 6 and back.n == b.n
    assert back.U.tobytes() == b.U.tobytes()
    assert back.mean_shape.tobytes() == b.mean_shape.tobytes()
    np.testing.assert_array_equal(back.centers, b.centers)
    np.testing.assert_array_equal(back.d_max, b.d_max)
    assert back.mass_fingerprint == mass.fingerprint()
    assert (back.generator != b.generator).nnz == 0
    np.testing.assert_array_equal(back.transform, b.transform)


def test_external_basis_without_generator(tmp_path):
    b = Basis(U=np.eye(4)[:, :2], mean_shape=np.zeros((4, 3)), kind="external")
    save_basis(b, tmp_path / "e.pdba")
    back = load_basis(tmp_path / "e.pdba")
    assert back.kind == "external" and back.generator is None
    np.testing.assert_array_equal(back.U, b.U)
    assert np.all(back.centers == -1)


def test_basis_archive_errors(tmp_path):
    b = Basis(U=np.eye(3)[:, :1], mean_shape=np.zeros((3, 3)))
    save_basis(b, tmp_path / "x.pdba")
    blob = (tmp_path / "x.pdba").read_bytes()
    (tmp_path / "m.pdba").write_bytes(b"PDSS" + blob[4:])
    with pytest.raises(BasisArchiveError, match="magic"):
        load_basis(tmp_path / "m.pdba")
    (tmp_path / "t.pdba").write_bytes(blob[:40])
    with pytest.raises(BasisArchiveError, match="truncated"):
        load_basis(tmp_path / "t.pdba")
    (tmp_path / "h.pdba").write_bytes(blob[:5])
    with pytest.raises(BasisArchiveError):
        load_basis(tmp_path / "h.pdba")


def test_truncate_bounds():
    b = Basis(U=np.eye(3), mean_shape=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        b.truncate(0)
    with pytest.raises(ValueError):
        b.truncate(4)
