from dataclasses import replace

import numpy as np
import pytest

from pdsnap.bases import Basis, build_pca_basis
from pdsnap.mesh import MassMatrix, box_tet_mesh, lumped_mass_matrix
from pdsnap.reduced import (
    IllConditionedBasisError, ReducedState, initial_reduced_state, lift, project_positions,
    reduce_system, reduced_step,
)
from pdsnap.solver import (
    ConstraintSet, SimState, assemble_global, build_constraints, initial_state, load_config,
    step,
)


def unconstrained_system(n, masses=None, dt=0.1):
    mass = MassMatrix(np.ones(n) if masses is None else masses)
    return assemble_global(None, mass, ConstraintSet(n), dt)


def test_canonical_column_picks_diagonal_entry():
    sys_ = unconstrained_system(3, [2.0, 3.0, 4.0], dt=0.5)
    b = Basis(U=np.eye(3)[:, :1], mean_shape=np.zeros((3, 3)))
    np.testing.assert_allclose(reduce_system(sys_, b).E, [[8.0]])


def test_full_identity_basis_reproduces_full_solve(two_tet_mesh):
    cfg = load_config({"constraints": {"tet_strain": 50.0, "anchors": [0]}})
    mass = MassMatrix(np.ones(5))
    cs = build_constraints(two_tet_mesh, cfg)
    sys_ = assemble_global(two_tet_mesh, mass, cs, cfg.dt)
    rsys = reduce_system(sys_, Basis(U=np.eye(5), mean_shape=np.zeros((5, 3))))
    rhs = np.cos(np.arange(15.0)).reshape(5, 3)
    np.testing.assert_allclose(rsys.lift_generator(rsys.solve_generator(rhs)), sys_.solve(rhs),
                               rtol=1e-9, atol=1e-12)


def test_duplicated_column_is_singular():
    sys_ = unconstrained_system(4)
    U = np.eye(4)[:, [0, 1, 1]]
    with pytest.raises(IllConditionedBasisError) as info:
        reduce_system(sys_, Basis(U=U, mean_shape=np.zeros((4, 3))))
    assert info.value.k == 3
    assert "k=3" in str(info.value)


def test_basis_size_mismatch():
    with pytest.raises(ValueError):
        reduce_system(unconstrained_system(4), Basis(U=np.eye(3), mean_shape=np.zeros((3, 3))))


def _run_both(mesh, cfg, basis, frames, mass=None):
    mass = mass or lumped_mass_matrix(mesh, cfg.density)
    cs = build_constraints(mesh, cfg)
    sys_ = assemble_global(mesh, mass, cs, cfg.dt)
    rsys = reduce_system(sys_, basis)
    full = initial_state(mesh, cfg)
    red = initial_reduced_state(rsys, full.q, full.v)
    out_f, out_r = [full.q], [red.q]
    for _ in range(frames):
        full = step(full, sys_, cs, cfg)
        red = reduced_step(red, rsys, cs, cfg)
        out_f.append(full.q)
        out_r.append(red.q)
    return np.array(out_f), np.array(out_r), rsys, red


def test_full_rank_identity_basis_tracks_full_run(two_tet_mesh):
    cfg = load_config({"dt": 0.01, "initial_angular_velocity": [0, 0, 3.0],
                       "constraints": {"tet_strain": 100.0}})
    basis = Basis(U=np.eye(5), mean_shape=np.zeros((5, 3)))
    full, red, *_ = _run_both(two_tet_mesh, cfg, basis, 50, mass=MassMatrix(np.ones(5)))
    assert np.abs(full - red).max() < 1e-8


def test_translation_mode_matches_free_fall(two_tet_mesh):
    cfg = load_config({"dt": 0.05, "initial_velocity": [0.5, 2.0, 0.0],
                       "constraints": {"allow_unconstrained": True}})
    basis = Basis(U=np.ones((5, 1)), mean_shape=two_tet_mesh.vertices)
    full, red, *_ = _run_both(two_tet_mesh, cfg, basis, 40)
    g = np.array(cfg.gravity)
    q, v = two_tet_mesh.vertices.copy(), np.array([0.5, 2.0, 0.0])
    for i in range(40):
        q, v = q + cfg.dt * v + cfg.dt**2 * g, v + cfg.dt * g
    np.testing.assert_allclose(red[-1], q, atol=1e-10)
    np.testing.assert_allclose(red.mean(axis=1), full.mean(axis=1), atol=1e-10)


def test_anchored_rest_state_is_a_fixed_point():
    mesh = box_tet_mesh(2, 1, 1)
    cfg = load_config({"gravity": [0, 0, 0], "constraints": {"tet_strain": 1e3, "anchors": [0, 5]}})
    U = np.linspace(-1, 1, mesh.n_vertices)[:, None] ** [1, 2, 3]
    basis = Basis(U=U, mean_shape=mesh.vertices)
    _, red, *_ = _run_both(mesh, cfg, basis, 20)
    assert np.abs(red - mesh.vertices).max() < 1e-10


def test_lift_and_project():
    mean = np.arange(12.0).reshape(4, 3)
    U = np.array([[1.0, 0], [1, 1], [0, 2], [1, -1]])
    b = Basis(U=U, mean_shape=mean)
    np.testing.assert_array_equal(lift(np.zeros((2, 3)), b), mean)
    z1, z2 = np.ones((2, 3)), np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(lift(2 * z1 - 3 * z2, b) - mean,
                               2 * (lift(z1, b) - mean) - 3 * (lift(z2, b) - mean))
    q = mean + U @ z2
    mass = MassMatrix([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(lift(project_positions(q, b, mass), b), q, atol=1e-10)
    st_ = ReducedState(z2, np.zeros((4, 3)), q)
    np.testing.assert_allclose(lift(st_, b), q)


def test_reduced_invariants_on_pca_basis(small_beam):
    mesh, cfg, mass = small_beam["mesh"], small_beam["config"], small_beam["mass"]
    basis = build_pca_basis(small_beam["weighted"], 10, 1.5, 3.0, mass, mesh)
    cs = build_constraints(mesh, cfg)
    rsys = reduce_system(assemble_global(mesh, mass, cs, cfg.dt), basis)
    np.testing.assert_allclose(rsys.E, rsys.E.T, atol=1e-12 * np.abs(rsys.E).max())
    st0 = initial_state(mesh, cfg)
    state = initial_reduced_state(rsys, st0.q, st0.v)
    for _ in range(25):
        trace, res = [], []
        state = reduced_step(state, rsys, cs, cfg, trace=trace, residuals=res)
        assert np.all(np.diff(trace) <= 1e-10)
        assert max(res) < 1e-9
        np.testing.assert_allclose(state.q, lift(state, basis), atol=1e-12)


def test_sparse_generator_path_matches_dense(small_beam):
    mesh, cfg, mass = small_beam["mesh"], small_beam["config"], small_beam["mass"]
    basis = build_pca_basis(small_beam["weighted"], 8, 1.5, 3.0, mass, mesh)
    dense = replace(basis, generator=None, transform=None)
    _, a, *_ = _run_both(mesh, cfg, basis, 15, mass)
    _, b, *_ = _run_both(mesh, cfg, dense, 15, mass)
    assert np.abs(a - b).max() < 1e-9


def test_reduced_divergence_is_reported(two_tet_mesh):
    cfg = load_config({"constraints": {"tet_strain": 1.0}})
    mass = lumped_mass_matrix(two_tet_mesh, 1.0)
    cs = build_constraints(two_tet_mesh, cfg)
    rsys = reduce_system(assemble_global(two_tet_mesh, mass, cs, cfg.dt),
                         Basis(U=np.eye(5), mean_shape=np.zeros((5, 3))))
    bad = ReducedState(np.zeros((5, 3)), np.full((5, 3), np.inf), two_tet_mesh.vertices, frame=2)
    from pdsnap.solver import DivergenceError

    with pytest.raises(DivergenceError) as info:
        reduced_step(bad, rsys, cs, cfg)
    assert info.value.frame == 3
