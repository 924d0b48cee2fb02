from dataclasses import replace

import numpy as np
import pytest

from morphfit.config import RunConfig
from morphfit.errors import MorphfitError
from morphfit.icp import point_to_mesh_error
from morphfit.model import reconstruct
from morphfit.pipeline import (
    ScanRecord,
    SubjectState,
    detect_mislabeled,
    error_statistic,
    fit_subject,
    hypothesis_order,
    initial_state,
    relabel,
    run_iteration,
    run_pipeline,
    subject_embeddings,
)
from morphfit.preprocess import PointCloudScan
from morphfit.synth import SynthSpec, generate_subject_scans

CFG = RunConfig(preprocess=False, jobs=1)


def posed_records(ds, sid):
    """Records of one subject carrying their true poses."""
    return [ScanRecord(s.scan, dict(s.landmarks), s.embedding, s.pose)
            for s in ds.scans if s.scan.subject_label == sid]


@pytest.fixture(scope="module")
def one_subject(model):
    spec = SynthSpec(subjects=1, scans_per_subject=3, points_per_scan=6000, cone_angle=180.0, seed=3)
    return generate_subject_scans(model, spec)


def rel_error(est, ref):
    return np.linalg.norm(est - ref) / np.linalg.norm(ref)


def test_one_iteration_recovers_coefficients(model, one_subject):
    # exact poses, mean mesh as the starting geometry
    sid = "subj000"
    truth = one_subject.coefficients[sid]
    out = run_iteration(initial_state(sid, posed_records(one_subject, sid), model), model, CFG, use_detail=False)
    assert rel_error(out.coefficients, truth) < 0.05


def test_true_mesh_is_fixed_point(model, one_subject):
    sid = "subj000"
    truth = one_subject.coefficients[sid]
    state = initial_state(sid, posed_records(one_subject, sid), model)
    state = replace(state, mesh=reconstruct(model, truth))
    out = run_iteration(state, model, CFG, use_detail=False)
    assert rel_error(out.coefficients, truth) < 1e-3
    assert out.error_history[-1][1] < 1e-3


def test_iterations_converge_from_true_poses(model, one_subject):
    sid = "subj000"
    truth = one_subject.coefficients[sid]
    state = initial_state(sid, posed_records(one_subject, sid), model)
    errs, coef = [state.error_history[-1][1]], []
    for _ in range(3):
        state = run_iteration(state, model, CFG, use_detail=False)
        errs.append(state.error_history[-1][1])
        coef.append(rel_error(state.coefficients, truth))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert all(b < a for a, b in zip(coef, coef[1:]))
    assert coef[-1] < 0.1 and errs[-1] < 0.05


def test_history_grows_by_one(model, one_subject):
    sid = "subj000"
    state = initial_state(sid, posed_records(one_subject, sid), model)
    assert [h[0] for h in state.error_history] == [0]
    for k in (1, 2):
        state = run_iteration(state, model, CFG, use_detail=k == 2)
        assert [h[0] for h in state.error_history] == list(range(k + 1))
        assert state.iteration == k
    assert state.detail is not None


def test_duplicate_scans_do_not_change_fit(model, one_subject):
    sid = "subj000"
    recs = posed_records(one_subject, sid)
    dup = recs + [replace(r, scan=PointCloudScan(r.scan.points, r.scan_id + "b", sid)) for r in recs]
    a = run_iteration(initial_state(sid, recs, model), model, CFG, use_detail=False)
    b = run_iteration(initial_state(sid, dup, model), model, CFG, use_detail=False)
    np.testing.assert_allclose(b.coefficients, a.coefficients, atol=1e-6)


def test_single_scan_subject(model, one_subject):
    sid = "subj000"
    recs = posed_records(one_subject, sid)[:1]
    res = run_pipeline({sid: recs}, model, CFG)
    st = res.states[sid]
    assert len(st.scans) == 1 and len(st.error_history) == 9
    assert res.flagged == [] and res.excluded_scans == []


def test_no_usable_scans(model):
    rec = ScanRecord(PointCloudScan(np.zeros((2, 3)), "s", "x"))
    state = SubjectState("x", [rec], np.zeros(model.rank), None, model.mean_mesh())
    with pytest.raises(MorphfitError):
        run_iteration(state, model, CFG, use_detail=False)


# ---------------------------------------------------------------- mislabel handling


def fake_states(values):
    states = {}
    for sid, errs in values.items():
        recs = [ScanRecord(PointCloudScan(np.zeros((3, 3)), f"{sid}_{i}", sid), error=(0.0, e))
                for i, e in enumerate(errs)]
        states[sid] = SubjectState(sid, recs, np.zeros(1), None, None)
    return states


def test_detect_threshold():
    states = fake_states({"b": [0.2, 5.0], "a": [1.2, 1.0]})
    assert detect_mislabeled(states, CFG) == [("a", "a_0"), ("b", "b_1")]
    assert detect_mislabeled(states, replace(CFG, mislabel_threshold=float("inf"))) == []
    # rms reading: sqrt(1.2) ~ 1.095 passes, sqrt(5) fails
    assert detect_mislabeled(states, replace(CFG, mislabel_statistic="rms")) == [("b", "b_1")]
    assert error_statistic(4.0, "rms") == 2.0 and error_statistic(4.0, "mse") == 4.0


def test_hypothesis_order_embeddings():
    emb = {"a": np.array([1.0, 0, 0]), "b": np.array([0, 1.0, 0]), "c": np.array([0.6, 0.8, 0])}
    rec = ScanRecord(PointCloudScan(np.zeros((3, 3)), "s", "a"), embedding=np.array([0, 1.0, 0]))
    assert hypothesis_order(rec, "a", ["b", "c", "d"], emb) == ["b", "c", "d"]
    assert hypothesis_order(replace(rec, embedding=None), "a", ["b", "c"], emb) is None
    assert hypothesis_order(rec, "a", ["b", "c"], {}) is None


def test_subject_embeddings_exclude():
    states = fake_states({"a": [0, 0]})
    states["a"].scans[0].embedding = np.array([1.0, 0])
    states["a"].scans[1].embedding = np.array([0, 1.0])
    np.testing.assert_allclose(subject_embeddings(states)["a"], np.array([1, 1]) / np.sqrt(2))
    np.testing.assert_allclose(subject_embeddings(states, exclude={"a_1"})["a"], [1, 0])


@pytest.fixture(scope="module")
def two_subjects(model):
    spec = SynthSpec(subjects=2, scans_per_subject=2, points_per_scan=3000, min_shape_delta=3.0, seed=21)
    ds = generate_subject_scans(model, spec)
    states = {}
    for sid in ds.coefficients:
        states[sid] = SubjectState(sid, posed_records(ds, sid), ds.coefficients[sid], None,
                                   reconstruct(model, ds.coefficients[sid]))
    return ds, states


@pytest.mark.parametrize("use_embeddings", [False, True])
def test_relabel_moves_swapped_scan(model, two_subjects, use_embeddings):
    ds, states = two_subjects
    s = next(x for x in ds.scans if x.true_subject == "subj001")
    rec = ScanRecord(s.scan, embedding=np.array([0.0, 1.0]) if use_embeddings else None, transform=s.pose)
    emb = {"subj000": np.array([1.0, 0]), "subj001": np.array([0, 1.0])} if use_embeddings else None
    rec.error = (0.0, 9.0)
    outcome, t = relabel(rec, "subj000", states, model, CFG, emb)
    assert outcome.new_label == "subj001"
    assert outcome.error_after < 1e-3 and t is not None
    assert [sid for sid, _ in outcome.tried] == ["subj001"]


def test_flags_by_geometry(model, two_subjects):
    ds, states = two_subjects
    rng = np.random.default_rng(1)
    s = next(x for x in ds.scans if x.true_subject == "subj000")
    noisy = s.pose.apply(s.scan.points) + rng.normal(scale=0.2, size=s.scan.points.shape)
    own = point_to_mesh_error(noisy, states["subj000"].mesh)[1]
    other = point_to_mesh_error(noisy, states["subj001"].mesh)[1]
    assert own < CFG.mislabel_threshold < other


def test_relabel_rejects_foreign_geometry(model, two_subjects):
    _, states = two_subjects
    rng = np.random.default_rng(0)
    pts = rng.uniform(-60, 60, size=(2000, 3))
    rec = ScanRecord(PointCloudScan(pts, "junk", "subj000"), error=(0.0, 50.0))
    outcome, t = relabel(rec, "subj000", states, model, CFG)
    assert outcome.new_label is None and t is None
    assert all(stat >= CFG.mislabel_threshold for _, stat in outcome.tried)


# ---------------------------------------------------------------- whole run


@pytest.fixture(scope="module")
def small_run(small_model):
    spec = SynthSpec(n_vertices=900, n_components=6, subjects=3, scans_per_subject=3, points_per_scan=1500,
                     min_shape_delta=3.0, seed=5)
    ds = generate_subject_scans(small_model, spec)
    cfg = replace(CFG, phase1_iters=2, phase2_iters=1)
    return ds, cfg, run_pipeline(ds.records(), small_model, cfg)


def test_pipeline_result_shape(small_run):
    ds, cfg, res = small_run
    assert sorted(res.states) == sorted(ds.coefficients)
    assert res.excluded_subjects == [] and res.excluded_scans == []
    for st in res.states.values():
        assert [h[0] for h in st.error_history] == list(range(5))
    assert len(res.dataset_history) == 5
    final = [st.error_history[-1][1] for st in res.states.values()]
    assert res.dataset_history[-1][1] == pytest.approx(np.mean(final))


def test_pipeline_deterministic_across_workers(small_model, small_run):
    ds, cfg, res = small_run
    again = run_pipeline(ds.records(), small_model, replace(cfg, jobs=2))
    for sid, st in res.states.items():
        assert np.array_equal(st.coefficients, again.states[sid].coefficients)
        assert st.error_history == again.states[sid].error_history
        for a, b in zip(st.scans, again.states[sid].scans):
            assert np.array_equal(a.transform.matrix(), b.transform.matrix())


@pytest.mark.parametrize("sigma", [0.0, 0.2])
def test_clean_dataset_final_distance(model, sigma):
    spec = SynthSpec(subjects=3, scans_per_subject=3, points_per_scan=5000, noise_sigma=sigma, seed=12)
    res = run_pipeline(generate_subject_scans(model, spec).records(), model, CFG)
    final = [st.error_history[-1][1] for st in res.states.values()]
    assert len(final) == 3
    assert max(final) <= max(2 * sigma, 0.1)
