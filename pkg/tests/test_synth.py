import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motion2infarct import synth
from motion2infarct.features import compute_motion
from motion2infarct.mesh import extract_hybrid_input, load_labels, load_mesh_sequence
from motion2infarct.scar import ProjectionConfig, load_scar_csv, scar_labels


def balanced_accuracy(pred, gt):
    pred, gt = pred.astype(bool), gt.astype(bool)
    return 0.5 * ((pred & gt).sum() / gt.sum() + (~pred & ~gt).sum() / (~gt).sum())


def test_icosphere_counts_and_euler():
    for f in (1, 2, 5, 7):
        v, tri = synth.icosphere(f)
        assert len(v) == 10 * f * f + 2
        assert len(tri) == 20 * f * f
        edges = {tuple(sorted(e)) for t in tri.tolist() for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
        assert len(v) - len(edges) + len(tri) == 2
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0)


def test_contraction_profile():
    s = synth.contraction_profile(25)
    assert s[0] == 0.0 and s.max() <= 1.0
    assert np.argmax(s) in (12, 13)


def test_default_sizes():
    cfg = synth.SynthConfig()
    case = synth.generate_case(cfg, [0, 0])
    hyb = extract_hybrid_input(case.mesh)
    assert 450 <= hyb.n_endo <= 550
    assert case.mesh.n_phases == 25


def test_patch_fraction_within_two_points(small_cases, small_cfg):
    for c in small_cases:
        frac = c.gt_labels.labels.mean()
        assert abs(frac - small_cfg.infarct_patch_fraction) <= 0.02


def test_patch_growth_failure():
    with pytest.raises(ValueError, match="resolution"):
        synth.generate_case(synth.SynthConfig(endo_resolution=1, infarct_patch_fraction=0.01), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        synth.SynthConfig(infarct_motion_scale=1.0)
    with pytest.raises(ValueError):
        synth.SynthConfig(infarct_patch_fraction=0.5)
    with pytest.raises(ValueError):
        synth.SynthConfig(n_phases=1)


def test_static_mesh_has_zero_motion():
    cfg = synth.SynthConfig(ejection_amplitude=0.0, wall_thickening=0.0, noise_mm=0.0,
                            endo_resolution=3, n_phases=5)
    case = synth.generate_case(cfg, 1)
    assert np.abs(compute_motion(case.mesh, extract_hybrid_input(case.mesh))).max() == 0.0


def test_peak_displacement_and_motion_ratio():
    cfg = synth.SynthConfig(noise_mm=0.0)
    case = synth.generate_case(cfg, [0, 1])
    hyb = extract_hybrid_input(case.mesh)
    pos = case.mesh.positions[:, hyb.endo_vertices]
    disp = np.linalg.norm(pos - pos[0], axis=2).max(axis=0)
    r0 = np.linalg.norm(pos[0] - pos[0].mean(axis=0), axis=1)
    healthy = case.gt_labels.labels == 0
    s_max = synth.contraction_profile(cfg.n_phases).max()
    np.testing.assert_allclose(disp[healthy], cfg.ejection_amplitude * r0[healthy] * s_max, rtol=1e-9)
    mag = np.linalg.norm(compute_motion(case.mesh, hyb), axis=2).mean(axis=0)
    ratio = mag[~healthy].mean() / mag[healthy].mean()
    assert abs(ratio - cfg.infarct_motion_scale) <= 0.05


def test_volume_monotone_over_systole():
    cfg = synth.SynthConfig(noise_mm=0.0, endo_resolution=4)
    case = synth.generate_case(cfg, 2)
    hyb = extract_hybrid_input(case.mesh)
    vols = [synth.endo_volume(p[hyb.endo_vertices], hyb.endo_faces) for p in case.mesh.positions]
    mid = int(np.argmax(synth.contraction_profile(cfg.n_phases)))
    assert all(vols[i + 1] < vols[i] for i in range(mid))
    # odd N puts the peak between two phases with equal volume
    assert all(vols[i + 1] > vols[i] for i in range(mid + 1, cfg.n_phases - 1))
    assert vols[-1] > 0.9 * vols[0]
    assert vols[0] > 0


def test_noiseless_separability():
    cfg = synth.SynthConfig(noise_mm=0.0, n_cases=4)
    for case in synth.generate(cfg):
        hyb = extract_hybrid_input(case.mesh)
        mag = np.linalg.norm(compute_motion(case.mesh, hyb), axis=2).mean(axis=0)
        gt = case.gt_labels.labels
        best = max(balanced_accuracy(mag <= t, gt) for t in np.unique(mag))
        assert best >= 0.95


def test_scar_points_recover_patch(small_cases):
    from motion2infarct.metrics import dice
    c = small_cases[1]
    hyb = extract_hybrid_input(c.mesh)
    lab = scar_labels(c.scar_points, c.mesh, hyb, ProjectionConfig(k_vertices=1, samples_per_voxel=0))
    # jittered patch samples land on patch vertices
    hits = lab.labels.astype(bool)
    assert c.gt_labels.labels[hits].mean() >= 0.9
    assert dice(lab, c.gt_labels) > 0.4


def test_split_examples():
    s = synth.split(40, (0.75, 0.05, 0.20), seed=0)
    assert [len(s[k]) for k in ("train", "val", "test")] == [30, 2, 8]
    assert sorted(s["train"] + s["val"] + s["test"]) == list(range(40))
    assert synth.split(40, (0.75, 0.05, 0.20), seed=0) == s
    assert synth.split(7, (1, 0, 0))["train"] == list(range(7))
    assert [len(v) for v in synth.split(52, (40 / 52, 4 / 52, 8 / 52)).values()] == [40, 4, 8]
    with pytest.raises(ValueError):
        synth.split(10, (0.5, 0.2, 0.2))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.lists(st.integers(0, 20), min_size=3, max_size=3).filter(sum), st.integers(0, 99))
def test_property_split_partition(n, weights, seed):
    fr = np.array(weights, float) / sum(weights)
    s = synth.split(n, tuple(fr), seed)
    sizes = np.array([len(s[k]) for k in ("train", "val", "test")])
    assert sizes.sum() == n
    assert np.all(np.abs(sizes - fr * n) < 1.0 + 1e-9)
    assert sorted(s["train"] + s["val"] + s["test"]) == list(range(n))


def test_determinism(small_cfg, small_cases):
    again = synth.generate(small_cfg)
    for a, b in zip(small_cases, again):
        np.testing.assert_array_equal(a.mesh.positions, b.mesh.positions)
        assert a.gt_labels == b.gt_labels


def test_written_dataset_loads(tmp_path, small_cases):
    parts = synth.split(len(small_cases), seed=1)
    synth.write_dataset(small_cases, tmp_path, parts)
    c = small_cases[2]
    mesh = load_mesh_sequence(tmp_path / c.name / "manifest.json")
    np.testing.assert_array_equal(mesh.positions, c.mesh.positions)
    assert load_labels(tmp_path / c.name / "labels.json") == c.gt_labels
    np.testing.assert_array_equal(load_scar_csv(tmp_path / c.name / "scar.csv").points, c.scar_points.points)
    assert (tmp_path / "split.json").exists()
