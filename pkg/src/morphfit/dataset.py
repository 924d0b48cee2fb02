"""Run manifests in, result trees out, and scoring against ground truth."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import RigidTransform, pose_error
from .io_formats import (
    EMBEDDING_DIM,
    read_csv,
    read_embedding,
    read_landmarks,
    read_ply,
    read_transforms,
    write_container,
    write_csv,
    write_mesh,
    write_ply,
    write_transforms,
)
from .model import MorphableModel, load_model
from .pipeline import PipelineResult, ScanRecord
from .preprocess import PointCloudScan, restore_removed

OFFSETS_MAGIC = b"MFOFFS01"


def _unit_normals(n):
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(norm == 0):
        return None
    return n / norm


def load_scan(path, scan_id="", subject_label="") -> PointCloudScan:
    data = read_ply(path)
    normals = data.get("normals")
    if normals is not None:
        normals = _unit_normals(normals)
    return PointCloudScan(data["points"], scan_id, subject_label, normals, data.get("colors"))


def load_manifest(path):
    """``(model, {subject: [ScanRecord]})`` from a manifest JSON file.

    Manifest layout::

        {"model": "model.mfm",
         "embedding_dim": 4096,                      # optional
         "subjects": {"subj000": [{"scan_id": ..., "scan": "x.ply",
                                   "landmarks": "x.landmarks.json",
                                   "embedding": "x.embedding.json"}]}}

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict) or "model" not in raw or "subjects" not in raw:
        raise FormatError(f"{path}: manifest needs 'model' and 'subjects'")
    root = path.parent
    model = load_model(root / raw["model"])
    dim = int(raw.get("embedding_dim", EMBEDDING_DIM))
    dataset = {}
    seen = set()
    for subject, entries in sorted(raw["subjects"].items()):
        records = []
        for e in entries:
            for key in ("scan_id", "scan"):
                if key not in e:
                    raise FormatError(f"{path}: subject {subject!r} entry lacks {key!r}")
            sid = e["scan_id"]
            if sid in seen:
                raise FormatError(f"{path}: duplicate scan id {sid!r}")
            seen.add(sid)
            scan = load_scan(root / e["scan"], sid, subject)
            lm = read_landmarks(root / e["landmarks"]) if e.get("landmarks") else {}
            emb = read_embedding(root / e["embedding"], dim) if e.get("embedding") else None
            records.append(ScanRecord(scan, lm, emb))
        dataset[subject] = records
    return model, dataset


def _subject_rows(state):
    return [(r.scan_id, r.error[0], r.error[1]) for r in state.scans]


def write_results(result: PipelineResult, model: MorphableModel, out_dir, config=None,
                  dump_offsets=False, write_aligned=True):
    """Write the output tree; every file is a deterministic function of ``result``.

    out/
      summary.json, error_history.csv, relabel_report.csv, config.json
      subjects/<id>/mesh.obj, mesh.ply, transforms.json, error_history.csv,
                    coefficients.json, scan_errors.csv, aligned/<scan>.ply,
                    offsets.mfo (with dump_offsets)
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config is not None:
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    write_csv(out / "error_history.csv", ["iteration", "mean", "variance"], result.dataset_history)
    write_csv(out / "relabel_report.csv", ["scan_id", "old", "new", "error_before", "error_after"],
              [(o.scan_id, o.old_label, o.new_label or "", o.error_before,
                "" if o.error_after is None else o.error_after) for o in result.relabels])

    for sid, st in sorted(result.states.items()):
        d = out / "subjects" / sid
        d.mkdir(parents=True, exist_ok=True)
        write_mesh(d / "mesh.obj", st.mesh.vertices, st.mesh.faces)
        write_mesh(d / "mesh.ply", st.mesh.vertices, st.mesh.faces)
        write_transforms(d / "transforms.json", {r.scan_id: r.transform for r in st.scans})
        write_csv(d / "error_history.csv", ["iteration", "mean", "variance"], st.error_history)
        write_csv(d / "scan_errors.csv", ["scan_id", "mean", "mse"], _subject_rows(st))
        coeffs = {"coefficients": [float(x) for x in st.coefficients]}
        if st.detail is not None:
            coeffs["detail_vertices"] = int(st.detail.valid.sum())
        (d / "coefficients.json").write_text(json.dumps(coeffs, indent=1) + "\n")
        if write_aligned:
            (d / "aligned").mkdir(exist_ok=True)
            for r in st.scans:
                full = restore_removed(r.scan)
                write_ply(d / "aligned" / f"{r.scan_id}.ply", r.transform.apply(full.points),
                          colors=full.colors)
        if dump_offsets and st.offset_fields:
            ids = [scan_id for scan_id, _ in st.offset_fields]
            write_container(
                d / "offsets.mfo", OFFSETS_MAGIC,
                {"subject": sid, "scan_ids": ids, "n_vertices": model.n_vertices},
                {"offsets": np.stack([f.offsets for _, f in st.offset_fields]),
                 "valid": np.stack([f.valid for _, f in st.offset_fields]).astype(np.uint8)},
            )

    final = {sid: st.error_history[-1][1] for sid, st in result.states.items()}
    summary = {
        "subjects": sorted(result.states),
        "excluded_subjects": result.excluded_subjects,
        "excluded_scans": sorted(result.excluded_scans),
        "flagged": [list(x) for x in result.flagged],
        "final_mean_distance": dict(sorted(final.items())),
        "dataset_final_mean": float(np.mean(list(final.values()))) if final else None,
        "n_scans": {sid: len(st.scans) for sid, st in sorted(result.states.items())},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- evaluation


def evaluate(run_dir, truth_path):
    """Score a result tree against ``ground_truth.json``.

    Pose error compares each written transform with the true scan-to-model
    pose; coefficient error is relative to the true coefficients of the
    subject the scan set was labeled with; relabel precision and recall are
    over the planted swaps.
    """
    run = Path(run_dir)
    truth = json.loads(Path(truth_path).read_text(encoding="utf-8"))
    poses = {k: RigidTransform.from_matrix(np.asarray(v["pose"])) for k, v in truth["scans"].items()}
    rot, trans, scan_rows = [], [], []
    coef_rows = []
    for d in sorted((run / "subjects").iterdir()) if (run / "subjects").is_dir() else []:
        sid = d.name
        for scan_id, t in sorted(read_transforms(d / "transforms.json").items()):
            if scan_id not in poses:
                continue
            r, tr = pose_error(t, poses[scan_id])
            rot.append(r)
            trans.append(tr)
            scan_rows.append((sid, scan_id, r, tr))
        if sid in truth["subjects"]:
            est = np.asarray(json.loads((d / "coefficients.json").read_text())["coefficients"])
            ref = np.asarray(truth["subjects"][sid])
            denom = np.linalg.norm(ref)
            coef_rows.append((sid, float(np.linalg.norm(est - ref) / denom) if denom > 0
                              else float(np.linalg.norm(est))))

    swaps = {s["scan_id"]: s["true_subject"] for s in truth.get("swaps", [])}
    report = read_csv(run / "relabel_report.csv") if (run / "relabel_report.csv").exists() else []
    flagged = {row["scan_id"] for row in report}
    relabeled = [row for row in report if row["new"]]
    correct = sum(1 for row in relabeled if swaps.get(row["scan_id"]) == row["new"])
    recall = len(flagged & set(swaps)) / len(swaps) if swaps else None
    precision = correct / len(relabeled) if relabeled else None

    return {
        "pose_rotation_deg": {"mean": _mean(rot), "max": _max(rot)},
        "pose_translation_mm": {"mean": _mean(trans), "max": _max(trans)},
        "coefficient_error": {"mean": _mean([c for _, c in coef_rows]),
                              "max": _max([c for _, c in coef_rows])},
        "relabel": {"swaps": len(swaps), "flagged": len(flagged), "relabeled": len(relabeled),
                    "correct": correct, "detection_recall": recall, "relabel_precision": precision},
        "scans": scan_rows,
        "subjects": coef_rows,
    }


def _mean(v):
    return float(np.mean(v)) if len(v) else None


def _max(v):
    return float(np.max(v)) if len(v) else None
