"""Three-phase joint alignment and model fitting over a dataset of subjects."""
from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig
from .errors import MorphfitError
from .fit import estimate_geometry
from .geometry import MeshQuery, RigidTransform, TriangleMesh
from .icp import crop_query, icp_align, point_to_mesh_error
from .model import DetailVector, MorphableModel
from .pose_init import init_pose_triplets
from .preprocess import PointCloudScan, preprocess_scan

log = logging.getLogger(__name__)


@dataclass
class ScanRecord:
    scan: PointCloudScan
    landmarks: dict = field(default_factory=dict)
    embedding: np.ndarray | None = None
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    low_confidence: bool = False
    # (mean distance, mean squared distance) against the subject mesh after the last iteration
    error: tuple = (np.nan, np.nan)

    @property
    def scan_id(self):
        return self.scan.scan_id

    def aligned_points(self):
        return self.transform.apply(self.scan.points)


@dataclass
class SubjectState:
    subject_id: str
    scans: list
    coefficients: np.ndarray
    detail: DetailVector | None
    mesh: TriangleMesh
    error_history: list = field(default_factory=list)  # (iteration, mean mm, variance mm^2)
    iteration: int = 0
    # (scan_id, OffsetField) pairs of the most recent geometry estimate
    offset_fields: list = field(default_factory=list)

    def scan_ids(self):
        return [r.scan_id for r in self.scans]


@dataclass
class RelabelOutcome:
    scan_id: str
    old_label: str
    new_label: str | None
    error_before: float
    error_after: float | None
    tried: list = field(default_factory=list)  # (subject, statistic) in hypothesis order


@dataclass
class PipelineResult:
    states: dict
    relabels: list
    flagged: list
    excluded_scans: list
    excluded_subjects: list
    dataset_history: list  # (iteration, mean across subjects, variance across subjects)


def _scan_seed(seed, scan_id, salt):
    return [int(seed), zlib.crc32(scan_id.encode("utf-8")), int(salt)]


def error_statistic(mse, plan_statistic):
    return float(np.sqrt(mse)) if plan_statistic == "rms" else float(mse)


# ---------------------------------------------------------------- per-subject steps


def prepare_scan(record: ScanRecord, model: MorphableModel, config: RunConfig,
                 mean_query: MeshQuery | None = None) -> ScanRecord:
    """Preprocess (optional) and initialize the pose of one scan."""
    scan = record.scan
    if config.preprocess:
        scan = preprocess_scan(scan, record.landmarks, config.filter_params())
    init = init_pose_triplets(record.landmarks, model, scan.points, config.pose_eval_samples,
                              seed=zlib.crc32(scan.scan_id.encode("utf-8")) ^ config.seed,
                              low_confidence_gate=config.low_confidence_gate, mesh_query=mean_query)
    return replace(record, scan=scan, transform=init.transform, low_confidence=init.low_confidence)


def _score_scans(records, mesh, mq=None):
    mq = mq or MeshQuery(mesh)
    dists = []
    for r in records:
        d = mq.query(r.aligned_points()).distance
        r.error = (float(d.mean()), float(np.mean(d * d)))
        dists.append(d)
    pooled = np.concatenate(dists) if dists else np.empty(0)
    if len(pooled) == 0:
        return np.nan, np.nan
    return float(pooled.mean()), float(pooled.var())


def initial_state(subject_id, records, model: MorphableModel) -> SubjectState:
    mesh = model.mean_mesh()
    state = SubjectState(subject_id, list(records), np.zeros(model.rank), None, mesh)
    mean, var = _score_scans(state.scans, mesh)
    state.error_history.append((0, mean, var))
    return state


def run_iteration(state: SubjectState, model: MorphableModel, config: RunConfig,
                  use_detail: bool) -> SubjectState:
    """Geometry update from the aligned scans, then ICP of every scan to the new mesh."""
    records = list(state.scans)
    contributing = records
    if state.iteration == 0:
        trusted = [r for r in records if not r.low_confidence]
        contributing = trusted or records

    points, kept = [], []
    for r in contributing:
        if len(r.scan) < 3:
            log.warning("subject %s: scan %s has too few points, dropped", state.subject_id, r.scan_id)
            continue
        points.append(r.aligned_points())
        kept.append(r.scan_id)
    dropped = {r.scan_id for r in contributing} - set(kept)
    records = [r for r in records if r.scan_id not in dropped]
    if not points:
        raise MorphfitError(f"subject {state.subject_id}: no usable scans")

    geo = estimate_geometry(model, state.mesh, points, use_detail, config.hole_threshold,
                            config.solver, config.regularization)
    mesh = geo.mesh
    cq = crop_query(mesh, model.icp_crop_mask)
    aligned = []
    for r in records:
        params = config.icp_params(_scan_seed(config.seed, r.scan_id, state.iteration + 1))
        try:
            res = icp_align(r.scan.points, mesh, params=params, initial=r.transform, mesh_query=cq)
        except MorphfitError as exc:
            log.warning("subject %s: scan %s dropped during ICP: %s", state.subject_id, r.scan_id, exc)
            continue
        aligned.append(replace(r, transform=res.transform))
    if not aligned:
        raise MorphfitError(f"subject {state.subject_id}: every scan failed alignment")
    mean, var = _score_scans(aligned, mesh)
    it = state.iteration + 1
    return SubjectState(state.subject_id, aligned, geo.coefficients, geo.detail, mesh,
                        state.error_history + [(it, mean, var)], it, list(zip(kept, geo.fields)))


def run_phases(state: SubjectState, model: MorphableModel, config: RunConfig) -> SubjectState:
    """Phase I (no detail) followed by Phase II (detail per plan)."""
    plan = config.phase_plan()
    for _ in range(plan.phase1_iters):
        state = run_iteration(state, model, config, use_detail=False)
    for _ in range(plan.phase2_iters):
        state = run_iteration(state, model, config, use_detail=plan.use_detail_in_phase2)
    return state


def _prepare_subject(args):
    subject_id, records, model, config = args
    mq = MeshQuery(model.mean_mesh())
    ready = []
    for r in records:
        try:
            ready.append(prepare_scan(r, model, config, mq))
        except MorphfitError as exc:
            log.warning("subject %s: scan %s dropped during preparation: %s", subject_id, r.scan_id, exc)
    return ready


def _phases_task(args):
    subject_id, records, model, config = args
    ready = _prepare_subject(args)
    if not ready:
        return subject_id, None
    try:
        return subject_id, run_phases(initial_state(subject_id, ready, model), model, config)
    except MorphfitError as exc:
        log.warning("subject %s excluded: %s", subject_id, exc)
        return subject_id, None


def _final_task(args):
    state, model, config = args
    plan = config.phase_plan()
    try:
        return state.subject_id, run_iteration(state, model, config, use_detail=plan.use_detail_in_phase2)
    except MorphfitError as exc:
        log.warning("subject %s excluded: %s", state.subject_id, exc)
        return state.subject_id, None


def _map(fn, tasks, jobs):
    workers = jobs or os.cpu_count() or 1
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def fit_subject(subject_id, records, model: MorphableModel, config: RunConfig = RunConfig()) -> SubjectState:
    """All three phases for one subject, without relabeling."""
    sid, state = _phases_task((subject_id, records, model, config))
    if state is None:
        raise MorphfitError(f"subject {subject_id}: no scans survived")
    _, final = _final_task((state, model, config))
    if final is None:
        raise MorphfitError(f"subject {subject_id}: final iteration failed")
    return final


# ---------------------------------------------------------------- relabeling


def detect_mislabeled(states: dict, config: RunConfig = RunConfig()) -> list:
    """(subject id, scan id) of scans whose fit statistic exceeds the threshold."""
    plan = config.phase_plan()
    flagged = []
    for sid in sorted(states):
        for r in states[sid].scans:
            if error_statistic(r.error[1], plan.mislabel_statistic) > plan.mislabel_threshold:
                flagged.append((sid, r.scan_id))
    return flagged


def subject_embeddings(states: dict, exclude=()) -> dict:
    """Mean scan embedding per subject, renormalized."""
    out = {}
    skip = set(exclude)
    for sid, st in states.items():
        embs = [r.embedding for r in st.scans if r.embedding is not None and r.scan_id not in skip]
        if embs:
            m = np.mean(embs, axis=0)
            n = np.linalg.norm(m)
            if n > 0:
                out[sid] = m / n
    return out


def hypothesis_order(record: ScanRecord, old_label, candidates, embeddings: dict | None):
    """Candidate subjects in the order they should be verified, or None when
    the order must come from geometry."""
    if record.embedding is None or not embeddings:
        return None
    with_emb = [c for c in candidates if c in embeddings]
    dist = {c: 1.0 - float(record.embedding @ embeddings[c]) for c in with_emb}
    ranked = sorted(with_emb, key=lambda c: (dist[c], c))
    return ranked + sorted(c for c in candidates if c not in embeddings)


def relabel(record: ScanRecord, old_label, states: dict, model: MorphableModel,
            config: RunConfig = RunConfig(), embeddings: dict | None = None):
    """Try to move a flagged scan to another subject.

    Returns ``(outcome, transform)``; ``outcome.new_label`` is None when no
    candidate passes ICP verification.
    """
    plan = config.phase_plan()
    candidates = sorted(s for s in states if s != old_label)
    before = error_statistic(record.error[1], plan.mislabel_statistic)
    outcome = RelabelOutcome(record.scan_id, old_label, None, before, None)

    def verify(sid):
        st = states[sid]
        params = config.icp_params(_scan_seed(config.seed, record.scan_id, zlib.crc32(sid.encode())))
        res = icp_align(record.scan.points, st.mesh, params=params, initial=record.transform,
                        mesh_query=crop_query(st.mesh, model.icp_crop_mask))
        _, mse = point_to_mesh_error(res.transform.apply(record.scan.points), st.mesh)
        return error_statistic(mse, plan.mislabel_statistic), res.transform

    order = hypothesis_order(record, old_label, candidates, embeddings)
    if order is None:
        scored = []
        for sid in candidates:
            try:
                stat, t = verify(sid)
            except MorphfitError:
                continue
            scored.append((stat, sid, t))
        scored.sort(key=lambda x: (x[0], x[1]))
        for stat, sid, t in scored:
            outcome.tried.append((sid, stat))
            if stat < plan.mislabel_threshold:
                outcome.new_label, outcome.error_after = sid, stat
                return outcome, t
            break  # ascending order: nothing later can pass
        return outcome, None
    for sid in order:
        try:
            stat, t = verify(sid)
        except MorphfitError:
            continue
        outcome.tried.append((sid, stat))
        if stat < plan.mislabel_threshold:
            outcome.new_label, outcome.error_after = sid, stat
            return outcome, t
    return outcome, None


def _dataset_stats(states: dict, slot: int):
    vals = [st.error_history[slot][1] for st in states.values() if len(st.error_history) > slot]
    if not vals:
        return np.nan, np.nan
    return float(np.mean(vals)), float(np.var(vals))


def run_pipeline(dataset: dict, model: MorphableModel, config: RunConfig = RunConfig()) -> PipelineResult:
    """Full run: preparation, Phases I-II, mislabel detection and relabeling,
    then a final geometry estimate and alignment (Phase III).

    ``dataset`` maps subject id to a list of :class:`ScanRecord`.
    """
    subjects = sorted(dataset)
    results = _map(_phases_task, [(s, dataset[s], model, config) for s in subjects], config.jobs)
    states = {sid: st for sid, st in results if st is not None}
    excluded_subjects = [sid for sid, st in results if st is None]

    flagged, relabels, excluded_scans = [], [], []
    if config.relabel and len(states) > 1:
        flagged = detect_mislabeled(states, config)
        flagged_ids = {scan_id for _, scan_id in flagged}
        embeddings = subject_embeddings(states, exclude=flagged_ids)
        moves = []
        for sid, scan_id in flagged:
            record = next(r for r in states[sid].scans if r.scan_id == scan_id)
            outcome, t = relabel(record, sid, states, model, config, embeddings)
            relabels.append(outcome)
            moves.append((sid, record, outcome, t))
        # apply after every decision so hypotheses all see the Phase II meshes
        for sid, record, outcome, t in moves:
            states[sid].scans = [r for r in states[sid].scans if r.scan_id != record.scan_id]
            if outcome.new_label is None:
                excluded_scans.append(record.scan_id)
                continue
            moved = replace(record, transform=t, low_confidence=False,
                            scan=replace(record.scan, subject_label=outcome.new_label))
            states[outcome.new_label].scans.append(moved)
        for sid in list(states):
            states[sid].scans.sort(key=lambda r: r.scan_id)
            if not states[sid].scans:
                log.warning("subject %s lost every scan during relabeling", sid)
                excluded_subjects.append(sid)
                del states[sid]

    finals = _map(_final_task, [(states[s], model, config) for s in sorted(states)], config.jobs)
    states = {}
    for sid, st in finals:
        if st is None:
            excluded_subjects.append(sid)
        else:
            states[sid] = st

    n_hist = max((len(st.error_history) for st in states.values()), default=0)
    history = [(i, *_dataset_stats(states, i)) for i in range(n_hist)]
    return PipelineResult(states, relabels, flagged, excluded_scans, sorted(excluded_subjects), history)
