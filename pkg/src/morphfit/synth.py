"""Synthetic morphable models and scan datasets with known ground truth."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import RigidTransform, TriangleMesh, rotation_from_euler
from .io_formats import write_embedding, write_landmarks, write_ply
from .model import MorphableModel, reconstruct, save_model
from .preprocess import PointCloudScan

# azimuth / elevation (degrees) of each landmark on the template
LANDMARK_SITES = {
    "nose_tip": (0.0, -6.0),
    "nose_bridge": (0.0, 14.0),
    "forehead": (0.0, 40.0),
    "chin": (0.0, -46.0),
    "eye_inner_l": (13.0, 12.0),
    "eye_inner_r": (-13.0, 12.0),
    "eye_outer_l": (36.0, 12.0),
    "eye_outer_r": (-36.0, 12.0),
    "mouth_l": (18.0, -28.0),
    "mouth_r": (-18.0, -28.0),
}

_AZ_SPAN = 100.0

# (azimuth, elevation, width az, width el, height): nose, brow, eye sockets,
# chin, lips, cheekbones, mouth corner, forehead, temples
_FEATURES = [
    (0, -4, 6, 11, 30.0), (0, 20, 40, 6, 8.0), (18, 11, 8, 6, -15.0), (-18, 11, 8, 6, -15.0),
    (0, -46, 14, 7, 10.0), (0, -27, 12, 3, 5.0), (42, -18, 10, 12, 9.0), (-40, -16, 10, 12, 8.0),
    (0, -34, 10, 5, -5.0), (30, 35, 15, 10, 4.0), (-28, 32, 14, 12, -3.0), (55, 10, 6, 20, -6.0),
    (-55, 10, 6, 20, -6.0),
]
# Small-scale relief everywhere. A smooth cap lets point-to-point ICP slide
# almost freely about the head centre; texture makes the alignment well posed.
_TEXTURE_BUMPS = 80
_TEXTURE_HEIGHT = 15.0
_TEXTURE_WIDTH = 7.0


def _texture():
    rng = np.random.default_rng(5)
    out = []
    for _ in range(_TEXTURE_BUMPS):
        a0, e0 = rng.uniform(-70, 70), rng.uniform(-55, 60)
        h = _TEXTURE_HEIGHT * rng.choice([-1, 1]) * rng.uniform(0.5, 1)
        out.append((a0, e0, _TEXTURE_WIDTH, _TEXTURE_WIDTH, h))
    return out
FIRST_MODE_RMS = 2.0
_EL_SPAN = 65.0


@dataclass
class SynthSpec:
    n_vertices: int = 3600
    n_components: int = 10
    subjects: int = 4
    scans_per_subject: int = 4
    points_per_scan: int = 60000  # about 2 points per mm^2 on the face, scanner-like density
    yaw_range: float = 60.0
    pitch_range: float = 45.0
    roll_range: float = 10.0
    cone_angle: float = 80.0
    # "face": sample only inside the crop region (as after face cropping); "full": whole template
    scan_region: str = "face"
    translation_range: float = 50.0
    noise_sigma: float = 0.0
    landmark_sigma: float = 0.0
    coefficient_scale: float = 1.0
    min_shape_delta: float = 0.0
    swap_fraction: float = 0.0
    embedding_dim: int = 0
    embedding_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_vertices", "n_components", "subjects", "scans_per_subject", "points_per_scan"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.swap_fraction < 0.5:
            raise ConfigError("swap_fraction must be in [0, 0.5)")
        if self.noise_sigma < 0 or self.landmark_sigma < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.scan_region not in ("face", "full"):
            raise ConfigError("scan_region must be 'face' or 'full'")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def _grid_size(n_vertices):
    side = max(4, int(round(math.sqrt(n_vertices))))
    return side, side


def _template(nu, nv):
    az = np.radians(np.linspace(-_AZ_SPAN, _AZ_SPAN, nu))
    el = np.radians(np.linspace(-_EL_SPAN, _EL_SPAN, nv))
    th, ph = np.meshgrid(az, el, indexing="xy")
    th, ph = th.ravel(), ph.ravel()
    radial = np.stack([np.cos(ph) * np.sin(th), np.sin(ph), np.cos(ph) * np.cos(th)], axis=1)
    base = radial * np.array([78.0, 102.0, 92.0])

    def bump(a0, e0, sa, se, h):
        da = np.degrees(th) - a0
        de = np.degrees(ph) - e0
        return h * np.exp(-0.5 * ((da / sa) ** 2 + (de / se) ** 2))

    relief = sum(bump(*f) for f in _FEATURES) + sum(bump(*f) for f in _texture())
    verts = base + relief[:, None] * radial
    faces = []
    for j in range(nv - 1):
        for i in range(nu - 1):
            a = j * nu + i
            b, c, d = a + 1, a + nu, a + nu + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return verts, np.array(faces, dtype=np.int64), np.degrees(th), np.degrees(ph)


def _rigid_fields(verts):
    c = verts - verts.mean(axis=0)
    out = []
    for axis in range(3):
        t = np.zeros_like(verts)
        t[:, axis] = 1.0
        out.append(t.reshape(-1))
    for axis in range(3):
        w = np.zeros(3)
        w[axis] = 1.0
        out.append(np.cross(w, c).reshape(-1))
    return np.stack(out, axis=1)


def generate_model(spec: SynthSpec = SynthSpec()) -> MorphableModel:
    """Face-like template with K smooth, mutually orthogonal basis fields.

    Each field displaces vertices along the template normals, and its normal
    profile carries no component of any small rigid motion.
    """
    rng = np.random.default_rng([spec.seed, 1])
    nu, nv = _grid_size(spec.n_vertices)
    verts, faces, az, el = _template(nu, nv)
    u = az / _AZ_SPAN
    v = el / _EL_SPAN
    funcs = [np.cos(a * np.pi * (u + 1) / 2) * np.cos(b * np.pi * (v + 1) / 2)
             for a in range(4) for b in range(4)]
    funcs = np.stack(funcs, axis=1)
    k = spec.n_components
    normals = TriangleMesh(verts, faces).vertex_normals()
    # Fields are normal displacements s(v) * n(v). The scalar profiles are kept
    # orthogonal to the normal component of every rigid motion, so a shape
    # change cannot mimic a pose change (tangential motion is invisible).
    rigid_scalar = np.einsum("vdk,vd->vk", _rigid_fields(verts).reshape(len(verts), 3, 6), normals)
    rq, _ = np.linalg.qr(rigid_scalar)
    profiles = funcs @ rng.normal(size=(funcs.shape[1], k))
    profiles -= rq @ (rq.T @ profiles)
    raw = (profiles[:, None, :] * normals[:, :, None]).reshape(3 * len(verts), k)
    q, _ = np.linalg.qr(raw)
    # unit coefficient ~ 2 mm RMS per vertex for the first field, decaying
    scales = FIRST_MODE_RMS * math.sqrt(len(verts)) * (0.85 ** np.arange(k))
    basis = q * scales

    landmarks = {}
    for name, (a0, e0) in LANDMARK_SITES.items():
        landmarks[name] = int(np.argmin((az - a0) ** 2 + (el - e0) ** 2))
    crop = (np.abs(az) <= 65.0) & (el >= -52.0) & (el <= 55.0)
    return MorphableModel(verts, basis, faces, landmarks, crop)


def sample_surface(mesh: TriangleMesh, n, rng, face_weights=None):
    """Area-weighted uniform samples; returns (points, face ids)."""
    fn, area = mesh.face_normals()
    w = area if face_weights is None else area * face_weights
    if w.sum() <= 0:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64)
    f = rng.choice(len(area), size=n, p=w / w.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[f]]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, f


def view_direction(yaw, pitch):
    return rotation_from_euler(yaw, pitch) @ np.array([0.0, 0.0, 1.0])


def visible_faces(mesh: TriangleMesh, direction, cone_angle):
    fn, _ = mesh.face_normals()
    return fn @ direction > math.cos(math.radians(cone_angle))


def sample_view(mesh: TriangleMesh, direction, n_points, cone_angle, rng, region=None):
    """Surface points facing ``direction`` within ``cone_angle``, optionally
    restricted to faces with every vertex in ``region``."""
    vis = visible_faces(mesh, direction, cone_angle)
    if region is not None:
        vis &= np.all(np.asarray(region, dtype=bool)[mesh.faces], axis=1)
    return sample_surface(mesh, n_points, rng, vis.astype(np.float64))


@dataclass
class SynthScan:
    scan: PointCloudScan
    landmarks: dict
    true_subject: str
    pose: RigidTransform  # scan frame -> model frame
    embedding: np.ndarray | None = None


@dataclass
class SynthDataset:
    model: MorphableModel
    coefficients: dict
    scans: list
    swaps: list = field(default_factory=list)
    spec: SynthSpec | None = None

    def by_label(self):
        out = {}
        for s in self.scans:
            out.setdefault(s.scan.subject_label, []).append(s)
        return dict(sorted(out.items()))

    def records(self):
        """Pipeline input: subject label -> list of ScanRecord."""
        from .pipeline import ScanRecord

        return {sid: [ScanRecord(s.scan, dict(s.landmarks), s.embedding) for s in scans]
                for sid, scans in self.by_label().items()}


def subject_ids(n):
    return [f"subj{i:03d}" for i in range(n)]


def _shape_delta(model, a, b):
    d = (model.basis @ (a - b)).reshape(-1, 3)[model.icp_crop_mask]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def draw_coefficients(model, spec, rng):
    subs = subject_ids(spec.subjects)
    coeffs = {}
    for sid in subs:
        for _ in range(1000):
            a = rng.normal(size=model.rank) * spec.coefficient_scale
            if all(_shape_delta(model, a, b) >= spec.min_shape_delta for b in coeffs.values()):
                break
        else:
            raise ConfigError(f"could not draw subjects {spec.min_shape_delta} mm apart")
        coeffs[sid] = a
    return coeffs


def generate_subject_scans(model: MorphableModel, spec: SynthSpec = SynthSpec(), coefficients=None,
                           detail=None) -> SynthDataset:
    """Scans of each subject's surface from random viewpoints, posed randomly.

    ``detail`` optionally maps subject id to a (V, 3) displacement added on
    top of the model reconstruction (out-of-span geometry).
    """
    rng = np.random.default_rng([spec.seed, 2])
    coeffs = coefficients if coefficients is not None else draw_coefficients(model, spec, rng)
    subs = list(coeffs)
    emb_rng = np.random.default_rng([spec.seed, 3])
    subject_emb = {}
    if spec.embedding_dim:
        for sid in subs:
            e = emb_rng.normal(size=spec.embedding_dim)
            subject_emb[sid] = e / np.linalg.norm(e)

    region = model.icp_crop_mask if spec.scan_region == "face" else None
    scans = []
    counter = 0
    for sid in subs:
        verts = reconstruct(model, coeffs[sid]).vertices
        if detail is not None and sid in detail:
            verts = verts + detail[sid]
        mesh = TriangleMesh(verts, model.faces)
        vnormals = mesh.vertex_normals()
        for _ in range(spec.scans_per_subject):
            yaw = rng.uniform(-spec.yaw_range, spec.yaw_range)
            pitch = rng.uniform(-spec.pitch_range, spec.pitch_range)
            d = view_direction(yaw, pitch)
            pts, _ = sample_view(mesh, d, spec.points_per_scan, spec.cone_angle, rng, region)
            pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape) if spec.noise_sigma else pts

            # model -> scan: bring the view direction onto +z, then roll and shift
            r_view = rotation_from_euler(yaw, pitch).T
            r_roll = rotation_from_euler(0.0, 0.0, rng.uniform(-spec.roll_range, spec.roll_range))
            shift = rng.uniform(-spec.translation_range, spec.translation_range, size=3)
            to_scan = RigidTransform(r_roll @ r_view, shift)
            pose = to_scan.inverse()

            facing = {n: float(vnormals[i] @ d) for n, i in model.landmark_indices.items()}
            names = [n for n, f in facing.items() if f > 0.1]
            if len(names) < 3:
                names = sorted(facing, key=lambda n: -facing[n])[:3]
            lm = {}
            for n in sorted(names):
                p = verts[model.landmark_indices[n]]
                if spec.landmark_sigma:
                    p = p + rng.normal(scale=spec.landmark_sigma, size=3)
                lm[n] = to_scan.apply(p)

            emb = None
            if spec.embedding_dim:
                e = subject_emb[sid] + emb_rng.normal(size=spec.embedding_dim) * (
                    spec.embedding_noise / math.sqrt(spec.embedding_dim))
                emb = e / np.linalg.norm(e)
            scan = PointCloudScan(to_scan.apply(pts), scan_id=f"scan{counter:04d}", subject_label=sid)
            scans.append(SynthScan(scan, lm, sid, pose, emb))
            counter += 1

    swaps = _plant_swaps(scans, subs, spec, np.random.default_rng([spec.seed, 4]))
    return SynthDataset(model, coeffs, scans, swaps, spec)


def _plant_swaps(scans, subs, spec, rng):
    n_swaps = int(math.floor(spec.swap_fraction * len(scans)))
    if n_swaps == 0 or len(subs) < 2:
        return []
    by_subject = {}
    for i, s in enumerate(scans):
        by_subject.setdefault(s.true_subject, []).append(i)
    # at most one planted error per source subject while subjects last
    order = list(rng.permutation(len(subs)))
    picks = []
    while len(picks) < n_swaps:
        for k in order:
            pool = [i for i in by_subject[subs[k]] if i not in picks]
            if pool and len(picks) < n_swaps:
                picks.append(int(rng.choice(pool)))
    swaps = []
    received = {x: 0 for x in subs}
    for i in sorted(picks):
        s = scans[i]
        # spread wrong labels too, so no subject absorbs several foreign scans
        others = [x for x in subs if x != s.true_subject]
        fewest = min(received[x] for x in others)
        wrong = str(rng.choice([x for x in others if received[x] == fewest]))
        received[wrong] += 1
        s.scan = PointCloudScan(s.scan.points, scan_id=s.scan.scan_id, subject_label=wrong)
        swaps.append({"scan_id": s.scan.scan_id, "true_subject": s.true_subject, "label": wrong})
    return swaps


def write_dataset(ds: SynthDataset, out_dir):
    """Model, scans, landmarks, embeddings, manifest and ground truth on disk."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    save_model(ds.model, out / "model.mfm")
    subjects = {}
    truth_scans = {}
    for s in ds.scans:
        sid = s.scan.scan_id
        write_ply(out / "scans" / f"{sid}.ply", s.scan.points)
        write_landmarks(out / "scans" / f"{sid}.landmarks.json", s.landmarks)
        entry = {"scan_id": sid, "scan": f"scans/{sid}.ply", "landmarks": f"scans/{sid}.landmarks.json"}
        if s.embedding is not None:
            write_embedding(out / "scans" / f"{sid}.embedding.json", s.embedding)
            entry["embedding"] = f"scans/{sid}.embedding.json"
        subjects.setdefault(s.scan.subject_label, []).append(entry)
        truth_scans[sid] = {
            "label": s.scan.subject_label,
            "true_subject": s.true_subject,
            "pose": [[float(x) for x in row] for row in s.pose.matrix()],
        }
    manifest = {"model": "model.mfm", "subjects": dict(sorted(subjects.items()))}
    if ds.spec is not None and ds.spec.embedding_dim:
        manifest["embedding_dim"] = ds.spec.embedding_dim
    truth = {
        "spec": asdict(ds.spec) if ds.spec is not None else None,
        "subjects": {k: [float(x) for x in v] for k, v in ds.coefficients.items()},
        "scans": truth_scans,
        "swaps": ds.swaps,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"
