import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from motion2infarct.features import (assemble_features, channel_layout, compute_motion,
                                     compute_thickness, load_features, save_features)
from motion2infarct.mesh import MeshSequence, extract_hybrid_input


def moved(mesh, R=np.eye(3), t=np.zeros(3)):
    return MeshSequence(mesh.positions @ R.T + t, mesh.faces, mesh.vertex_class, mesh.ed_phase)


def test_layout_and_shape(small_case):
    mesh = small_case.mesh
    hyb = extract_hybrid_input(mesh)
    ft = assemble_features(mesh, hyb)
    assert ft.channel_layout == ("position", "motion", "thickness")
    assert ft.shape == (mesh.n_phases, hyb.n_endo, 7)
    assert ft.channel_slice("thickness") == slice(6, 7)
    assert assemble_features(mesh, hyb, motion=False).shape[2] == 4
    assert assemble_features(mesh, hyb, thickness=False).shape[2] == 6
    assert channel_layout(False, False) == ("position",)
    with pytest.raises(KeyError):
        assemble_features(mesh, hyb, motion=False).channel_slice("motion")
    with pytest.raises(ValueError):
        assemble_features(mesh, hyb, position=False)


def test_normalized_ed_centroid_zero(small_case):
    hyb = extract_hybrid_input(small_case.mesh)
    ft = assemble_features(small_case.mesh, hyb)
    assert np.linalg.norm(ft.values[0, :, :3].mean(axis=0)) < 1e-9
    assert np.abs(ft.values[0, :, :3]).max() <= 1.0 + 1e-12


def test_motion_cycle_sums_to_zero(small_case):
    hyb = extract_hybrid_input(small_case.mesh)
    m = compute_motion(small_case.mesh, hyb)
    assert np.abs(m.sum(axis=0)).max() < 1e-6


def test_thickness_matches_brute_force(shell_mesh):
    mesh, hyb = shell_mesh
    th = compute_thickness(mesh, hyb)
    for t in range(mesh.n_phases):
        endo = mesh.positions[t, hyb.endo_vertices]
        epi = mesh.positions[t, hyb.epi_points]
        d = np.sqrt(((endo[:, None] - epi[None]) ** 2).sum(-1)).min(1)
        np.testing.assert_allclose(th[t], d, rtol=0, atol=1e-12)


def test_thickness_concentric_spheres():
    from motion2infarct import synth
    from motion2infarct.mesh import VertexClass
    unit, tri = synth.icosphere(3)
    nv = len(unit)
    pos = np.stack([np.concatenate([unit * 10, unit * 13])] * 2)
    cls = np.r_[np.full(nv, VertexClass.LV_ENDO), np.full(nv, VertexClass.LV_EPI)]
    mesh = MeshSequence(pos, np.concatenate([tri, tri + nv]), cls)
    np.testing.assert_allclose(compute_thickness(mesh, extract_hybrid_input(mesh)), 3.0, atol=1e-12)


def test_feature_dump_round_trip(tmp_path, small_case):
    hyb = extract_hybrid_input(small_case.mesh)
    ft = assemble_features(small_case.mesh, hyb)
    save_features(ft, tmp_path / "f")
    back = load_features(tmp_path / "f")
    np.testing.assert_array_equal(back.values, ft.values)
    assert back.channel_layout == ft.channel_layout
    assert back.normalization == ft.normalization
    assert (tmp_path / "f.bin").stat().st_size == ft.values.size * 8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_property_rigid_invariance(seed):
    from tests.conftest import two_shell_mesh
    mesh, hyb = two_shell_mesh(n_phases=3, resolution=2, seed=seed % 7)
    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-100, 100, 3)
    other = moved(mesh, R, t)
    np.testing.assert_allclose(compute_thickness(other, hyb), compute_thickness(mesh, hyb), atol=1e-6)
    a = assemble_features(mesh, hyb).values
    b = assemble_features(moved(mesh, t=t), hyb).values
    np.testing.assert_allclose(b, a, atol=1e-9)
