import numpy as np
import pytest

from morphfit.errors import InsufficientPoints, RankDeficient, ShapeError
from morphfit.fit import (
    AggregateOffsets,
    OffsetField,
    aggregate_offsets,
    compute_detail,
    compute_offset_field,
    estimate_geometry,
    solve_coefficients_stacked,
    solve_coefficients_weighted,
)
from morphfit.geometry import MeshQuery
from morphfit.model import MorphableModel, reconstruct
from morphfit.synth import sample_surface

from conftest import grid_plane


def plane_model(n=40, spacing=2.0, k=3, seed=0):
    mesh = grid_plane(n, spacing)
    rng = np.random.default_rng(seed)
    v = len(mesh.vertices)
    basis = np.zeros((3 * v, k))
    basis[2::3] = rng.normal(size=(v, k))
    return MorphableModel(mesh.vertices, basis, mesh.faces)


def random_model(rng, v=30, k=5):
    return MorphableModel(rng.normal(size=(v, 3)), rng.normal(size=(3 * v, k)), np.empty((0, 3), dtype=np.int64))


# ---------------------------------------------------------------- offset fields


def test_points_on_surface_give_zero_relative_offset(small_model, rng):
    coeffs = rng.normal(size=small_model.rank) * 0.5
    mesh = reconstruct(small_model, coeffs)
    pts, _ = sample_surface(mesh, 4000, rng)
    f = compute_offset_field(mesh, pts, small_model)
    expected = mesh.vertices - small_model.mean_vertices
    assert f.valid.any()
    np.testing.assert_allclose(f.offsets[f.valid], expected[f.valid], atol=1e-9)


def test_uniform_shift():
    m = plane_model()
    mesh = m.mean_mesh()
    pts, _ = sample_surface(mesh, 20000, np.random.default_rng(0))
    f = compute_offset_field(mesh, pts + [0, 0, 2.0], m)
    assert f.valid.all()
    np.testing.assert_allclose(f.offsets, np.tile([0, 0, 2.0], (m.n_vertices, 1)), atol=1e-9)


def test_half_scan_matches_dense_oracle():
    """Flat current surface: the dense-sampling limit of the offset at a vertex
    is the vertical distance to the deformed surface above it."""
    m = plane_model(n=50)
    mesh = m.mean_mesh()
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]

    def height(px, py):
        return 3.0 * np.exp(-((px - 30) ** 2 + (py - 50) ** 2) / (2 * 15.0 ** 2)) + 0.02 * py

    rng = np.random.default_rng(1)
    left = mesh.vertices[:, 0] <= 49.0
    faces_left = np.all(left[mesh.faces], axis=1).astype(float)
    flat, _ = sample_surface(mesh, 40000, rng, faces_left)
    scan = flat.copy()
    scan[:, 2] = height(flat[:, 0], flat[:, 1])
    f = compute_offset_field(mesh, scan, m)

    assert not f.valid[x >= 49.0 + 10.0 + 2.0].any()
    inner = f.valid & (x <= 49.0)
    assert inner.sum() > 500
    oracle = np.column_stack([np.zeros_like(x), np.zeros_like(x), height(x, y)])
    err = np.linalg.norm(f.offsets[inner] - oracle[inner], axis=1)
    assert err.max() <= 0.2


def test_point_order_irrelevant(small_model, rng):
    mesh = small_model.mean_mesh()
    pts, _ = sample_surface(reconstruct(small_model, rng.normal(size=small_model.rank)), 3000, rng)
    a = compute_offset_field(mesh, pts, small_model)
    b = compute_offset_field(mesh, pts[rng.permutation(len(pts))], small_model)
    assert np.array_equal(a.offsets, b.offsets) and np.array_equal(a.valid, b.valid)


def test_offset_field_errors(small_model):
    with pytest.raises(InsufficientPoints):
        compute_offset_field(small_model.mean_mesh(), np.zeros((2, 3)), small_model)
    with pytest.raises(ShapeError):
        OffsetField(np.zeros((3, 3)), np.ones(4, dtype=bool))


def test_hole_threshold_marks_far_vertices():
    m = plane_model()
    mesh = m.mean_mesh()
    corner = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    f = compute_offset_field(mesh, corner, m, hole_threshold=10.0)
    d = np.linalg.norm(mesh.vertices - [0.5, 0.5, 0.0], axis=1)
    assert f.valid[d < 5].all()
    assert not f.valid[d > 15].any()
    assert np.all(f.offsets[~f.valid] == 0)


# ---------------------------------------------------------------- aggregation


def test_aggregate_single_field(rng):
    f = OffsetField(rng.normal(size=(10, 3)), rng.random(10) < 0.5)
    agg = aggregate_offsets([f])
    assert np.array_equal(agg.mean, f.offsets)
    assert set(agg.weight.tolist()) <= {0, 1}


def test_aggregate_disjoint(rng):
    a = OffsetField(rng.normal(size=(6, 3)), [1, 1, 1, 0, 0, 0])
    b = OffsetField(rng.normal(size=(6, 3)), [0, 0, 0, 1, 1, 1])
    agg = aggregate_offsets([a, b])
    assert agg.weight.tolist() == [1] * 6
    np.testing.assert_array_equal(agg.mean[:3], a.offsets[:3])
    np.testing.assert_array_equal(agg.mean[3:], b.offsets[3:])


def test_aggregate_scalar_oracle(rng):
    fields = [OffsetField(rng.normal(size=(25, 3)), rng.random(25) < 0.6) for _ in range(4)]
    agg = aggregate_offsets(fields)
    for v in range(25):
        rows = [f.offsets[v] for f in fields if f.valid[v]]
        assert agg.weight[v] == len(rows)
        if rows:
            np.testing.assert_allclose(agg.mean[v], np.mean(rows, axis=0), atol=1e-12)
        else:
            assert np.all(agg.mean[v] == 0)


def test_aggregate_needs_fields():
    with pytest.raises(ValueError):
        aggregate_offsets([])


# ---------------------------------------------------------------- solvers


def test_stacked_recovers_consistent(rng):
    m = random_model(rng)
    a0 = rng.normal(size=m.rank)
    f = OffsetField((m.basis @ a0).reshape(-1, 3), np.ones(m.n_vertices, dtype=bool))
    np.testing.assert_allclose(solve_coefficients_stacked([f], m), a0, atol=1e-6)


def test_stacked_duplicate_fields(rng):
    m = random_model(rng)
    f = OffsetField(rng.normal(size=(m.n_vertices, 3)), rng.random(m.n_vertices) < 0.8)
    np.testing.assert_allclose(solve_coefficients_stacked([f, f], m), solve_coefficients_stacked([f], m),
                               atol=1e-10)


def test_stacked_rank_deficient(rng):
    m = random_model(rng, v=30, k=5)
    valid = np.zeros(30, dtype=bool)
    valid[0] = True
    with pytest.raises(RankDeficient) as exc:
        solve_coefficients_stacked([OffsetField(np.ones((30, 3)), valid)], m)
    assert exc.value.required == 5


def test_weighted_recovers(rng):
    m = random_model(rng)
    a0 = rng.normal(size=m.rank)
    agg = AggregateOffsets((m.basis @ a0).reshape(-1, 3), np.ones(m.n_vertices, dtype=np.int64))
    np.testing.assert_allclose(solve_coefficients_weighted(agg, m), a0, atol=1e-6)


def test_weighted_zero_weight_garbage(rng):
    m = random_model(rng)
    mean = rng.normal(size=(m.n_vertices, 3))
    w = rng.integers(1, 4, size=m.n_vertices)
    w[3] = 0
    garbage = mean.copy()
    garbage[3] = [1e9, -1e9, 5e8]
    a = solve_coefficients_weighted(AggregateOffsets(mean, w), m)
    b = solve_coefficients_weighted(AggregateOffsets(garbage, w), m)
    assert np.array_equal(a, b)


def test_weighted_rank_deficient(rng):
    m = random_model(rng, v=30, k=7)
    w = np.zeros(30, dtype=np.int64)
    w[:2] = 1
    with pytest.raises(RankDeficient):
        solve_coefficients_weighted(AggregateOffsets(np.zeros((30, 3)), w), m)
    # Tikhonov makes the same system solvable
    a = solve_coefficients_weighted(AggregateOffsets(np.zeros((30, 3)), w), m, regularization=0.1)
    assert np.all(np.isfinite(a))


def test_solvers_agree_identical_masks(rng):
    m = random_model(rng, v=60, k=8)
    valid = rng.random(60) < 0.7
    fields = [OffsetField(rng.normal(size=(60, 3)), valid.copy()) for _ in range(5)]
    a = solve_coefficients_stacked(fields, m)
    b = solve_coefficients_weighted(aggregate_offsets(fields), m)
    assert np.linalg.norm(a - b) <= 1e-3 * np.linalg.norm(a)


# ---------------------------------------------------------------- detail


def test_detail_zero_in_span(rng):
    m = random_model(rng)
    a0 = rng.normal(size=m.rank)
    w = (rng.random(m.n_vertices) < 0.7).astype(np.int64)
    w[: m.rank] = 1
    agg = AggregateOffsets((m.basis @ a0).reshape(-1, 3) * (w[:, None] > 0), w)
    coeffs = solve_coefficients_weighted(agg, m)
    d = compute_detail(agg, m, coeffs)
    assert np.abs(d.delta).max() <= 1e-9
    assert np.array_equal(d.valid, w >= 1)


def test_detail_unobserved_uses_coefficients_only(rng):
    m = random_model(rng)
    w = np.ones(m.n_vertices, dtype=np.int64)
    w[[2, 9]] = 0
    agg = AggregateOffsets(rng.normal(size=(m.n_vertices, 3)) * (w[:, None] > 0), w)
    coeffs = solve_coefficients_weighted(agg, m)
    d = compute_detail(agg, m, coeffs)
    assert np.all(d.delta[[2, 9]] == 0)
    v = reconstruct(m, coeffs, d).vertices
    np.testing.assert_allclose(v[[2, 9]], reconstruct(m, coeffs).vertices[[2, 9]], atol=0)
    np.testing.assert_allclose(v[w > 0], (m.mean_vertices + agg.mean)[w > 0], atol=1e-9)


# ---------------------------------------------------------------- geometry step


def test_geometry_step_reduces_distance(small_model):
    """Fixed, exact alignment: the new mesh fits the scans at least as well."""
    rng = np.random.default_rng(4)
    target = reconstruct(small_model, rng.normal(size=small_model.rank))
    scans = [sample_surface(target, 3000, rng)[0] for _ in range(3)]
    mesh = small_model.mean_mesh()
    prev = np.mean([MeshQuery(mesh).query(s).distance.mean() for s in scans])
    for _ in range(3):
        mesh = estimate_geometry(small_model, mesh, scans).mesh
        cur = np.mean([MeshQuery(mesh).query(s).distance.mean() for s in scans])
        assert cur <= prev + 1e-6
        prev = cur


def test_geometry_solver_choice(small_model, rng):
    pts = sample_surface(small_model.mean_mesh(), 2000, rng)[0]
    with pytest.raises(ValueError):
        estimate_geometry(small_model, small_model.mean_mesh(), [pts], solver="qr")
    g = estimate_geometry(small_model, small_model.mean_mesh(), [pts], solver="stacked", use_detail=True)
    assert g.detail is not None and len(g.fields) == 1
