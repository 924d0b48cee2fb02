import json

import numpy as np
import pytest

from morphfit.errors import ConfigError
from morphfit.geometry import MeshQuery, TriangleMesh
from morphfit.model import reconstruct
from morphfit.synth import SynthSpec, generate_model, generate_subject_scans, sample_view, view_direction, write_dataset


def test_basis_orthogonal():
    m = generate_model(SynthSpec(n_vertices=2500, n_components=10, seed=3))
    assert m.basis.shape == (3 * m.n_vertices, 10)
    g = m.basis.T @ m.basis
    off = g - np.diag(np.diag(g))
    assert np.abs(off).max() < 1e-9 * np.abs(np.diag(g)).max()
    assert np.all(np.linalg.norm(m.basis, axis=0) > 0)


def test_zero_coefficients_give_mean(small_model):
    assert np.array_equal(reconstruct(small_model, np.zeros(small_model.rank)).vertices, small_model.mean_vertices)


def test_model_deterministic():
    a = generate_model(SynthSpec(n_vertices=900, n_components=4, seed=5))
    b = generate_model(SynthSpec(n_vertices=900, n_components=4, seed=5))
    assert np.array_equal(a.basis, b.basis) and np.array_equal(a.mean_vertices, b.mean_vertices)


def test_landmarks_and_crop(model):
    assert len(model.landmark_indices) >= 5
    assert all(model.icp_crop_mask[i] for i in model.landmark_indices.values())
    assert 0 < model.icp_crop_mask.sum() < model.n_vertices


def test_noise_free_points_on_surface(small_model):
    spec = SynthSpec(n_vertices=900, n_components=6, subjects=2, scans_per_subject=2, points_per_scan=500,
                     translation_range=0, roll_range=0, yaw_range=0, pitch_range=0, seed=1)
    ds = generate_subject_scans(small_model, spec)
    for s in ds.scans:
        mesh = reconstruct(small_model, ds.coefficients[s.true_subject])
        d = MeshQuery(mesh).query(s.pose.apply(s.scan.points)).distance
        assert d.max() < 1e-9


def test_visibility_cone_one_side(model):
    rng = np.random.default_rng(0)
    d = view_direction(45.0, 0.0)
    pts, faces = sample_view(model.mean_mesh(), d, 3000, 90.0, rng)
    fn, _ = model.mean_mesh().face_normals()
    assert np.all(fn[faces] @ d > 0)


def test_region_restricts_samples(model):
    rng = np.random.default_rng(0)
    _, faces = sample_view(model.mean_mesh(), view_direction(0, 0), 2000, 180.0, rng, model.icp_crop_mask)
    assert np.all(model.icp_crop_mask[model.faces[faces]])


def test_swap_count(small_model):
    spec = SynthSpec(n_vertices=900, n_components=6, subjects=20, scans_per_subject=20, points_per_scan=50,
                     swap_fraction=0.05, seed=2)
    ds = generate_subject_scans(small_model, spec)
    assert len(ds.swaps) == 20
    wrong = [s for s in ds.scans if s.scan.subject_label != s.true_subject]
    assert sorted(s.scan.scan_id for s in wrong) == sorted(x["scan_id"] for x in ds.swaps)


def test_min_shape_delta(small_model):
    spec = SynthSpec(n_vertices=900, n_components=6, subjects=5, scans_per_subject=1, points_per_scan=50,
                     min_shape_delta=3.0, seed=4)
    ds = generate_subject_scans(small_model, spec)
    mask = small_model.icp_crop_mask
    c = list(ds.coefficients.values())
    for i in range(len(c)):
        for j in range(i):
            d = (small_model.basis @ (c[i] - c[j])).reshape(-1, 3)[mask]
            assert np.sqrt(np.mean(np.sum(d * d, axis=1))) >= 3.0


def test_seed_determinism(small_model):
    spec = SynthSpec(n_vertices=900, n_components=6, subjects=3, scans_per_subject=2, points_per_scan=100,
                     noise_sigma=0.2, embedding_dim=8, seed=9)
    a = generate_subject_scans(small_model, spec)
    b = generate_subject_scans(small_model, spec)
    for x, y in zip(a.scans, b.scans):
        assert np.array_equal(x.scan.points, y.scan.points)
        assert np.array_equal(x.embedding, y.embedding)
    c = generate_subject_scans(small_model, SynthSpec(**{**spec.__dict__, "seed": 10}))
    assert not np.array_equal(a.scans[0].scan.points, c.scans[0].scan.points)


def test_spec_validation():
    for bad in ({"subjects": 0}, {"swap_fraction": 0.6}, {"noise_sigma": -1}, {"scan_region": "ear"}):
        with pytest.raises(ConfigError):
            SynthSpec(**bad)
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"subjectz": 3})


def test_written_dataset_has_ground_truth(small_model, tmp_path):
    spec = SynthSpec(n_vertices=900, n_components=6, subjects=2, scans_per_subject=2, points_per_scan=100,
                     swap_fraction=0.25, seed=6)
    ds = generate_subject_scans(small_model, spec)
    manifest = write_dataset(ds, tmp_path)
    truth = json.loads((tmp_path / "ground_truth.json").read_text())
    man = json.loads(manifest.read_text())
    ids = {e["scan_id"] for entries in man["subjects"].values() for e in entries}
    assert ids == set(truth["scans"])
    assert set(truth["subjects"]) == set(ds.coefficients)
    for s in ds.scans:
        np.testing.assert_allclose(np.asarray(truth["scans"][s.scan.scan_id]["pose"]), s.pose.matrix())
    assert len(truth["swaps"]) == 1
