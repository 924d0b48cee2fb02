"""File formats: PLY/OBJ, the binary array container, landmarks, embeddings,
transforms and CSV reports. All lengths are millimeters."""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError

# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class _Element:
    def __init__(self, name, count, line):
        self.name = name
        self.count = count
        self.line = line
        self.props = []  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or 'end_header')", line=1)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("header not terminated by newline", line=None, offset=end)
    lines = data[:nl].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, raw in enumerate(lines, start=1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"unsupported format line {raw!r}", line=lineno)
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append(_Element(tok[1], int(tok[2]), lineno))
            except (IndexError, ValueError):
                raise ParseError(f"bad element line {raw!r}", line=lineno) from None
            if elements[-1].count < 0:
                raise ParseError("negative element count", line=lineno)
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            try:
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            except (IndexError, KeyError):
                raise ParseError(f"bad property line {raw!r}", line=lineno) from None
        else:
            raise ParseError(f"unknown header keyword {tok[0]!r}", line=lineno)
    if fmt is None:
        raise ParseError("missing format line", line=1)
    return fmt, elements, nl + 1, len(lines)


def _read_ascii_body(text_lines, first_line, elements):
    out = {}
    pos = 0
    for el in elements:
        has_list = any(isinstance(t, tuple) for _, t in el.props)
        if pos + el.count > len(text_lines):
            raise ParseError(
                f"element '{el.name}' declares {el.count} rows but only {len(text_lines) - pos} remain",
                line=first_line + len(text_lines),
            )
        rows = text_lines[pos:pos + el.count]
        if has_list:
            values = []
            for i, row in enumerate(rows):
                tok = row.split()
                try:
                    rec, j = {}, 0
                    for name, t in el.props:
                        if isinstance(t, tuple):
                            n = int(tok[j])
                            rec[name] = [float(x) if t[1][0] == "f" else int(x) for x in tok[j + 1:j + 1 + n]]
                            if len(rec[name]) != n:
                                raise ValueError
                            j += 1 + n
                        else:
                            rec[name] = float(tok[j])
                            j += 1
                except (ValueError, IndexError):
                    raise ParseError(f"malformed '{el.name}' row", line=first_line + pos + i) from None
                values.append(rec)
            out[el.name] = values
        else:
            try:
                arr = np.array([[float(x) for x in r.split()] for r in rows], dtype=np.float64)
            except ValueError:
                raise ParseError(f"non-numeric '{el.name}' row", line=first_line + pos) from None
            if el.count and (arr.ndim != 2 or arr.shape[1] != len(el.props)):
                raise ParseError(f"'{el.name}' rows need {len(el.props)} values", line=first_line + pos)
            arr = arr.reshape(el.count, len(el.props))
            out[el.name] = {name: arr[:, i] for i, (name, _) in enumerate(el.props)}
        pos += el.count
    if any(r.strip() for r in text_lines[pos:]):
        raise ParseError("trailing data after last element", line=first_line + pos)
    return out


def _read_binary_body(buf, offset, elements, endian):
    out = {}
    for el in elements:
        has_list = any(isinstance(t, tuple) for _, t in el.props)
        if not has_list:
            dt = np.dtype([(name, endian + t) for name, t in el.props])
            need = dt.itemsize * el.count
            if offset + need > len(buf):
                raise ParseError(
                    f"element '{el.name}' truncated: need {need} bytes, have {len(buf) - offset}",
                    offset=offset,
                )
            arr = np.frombuffer(buf, dtype=dt, count=el.count, offset=offset)
            out[el.name] = {name: arr[name].astype(np.float64) if arr[name].dtype.kind == "f" else arr[name]
                            for name, _ in el.props}
            offset += need
            continue
        values = []
        for _ in range(el.count):
            rec = {}
            for name, t in el.props:
                if isinstance(t, tuple):
                    cdt = np.dtype(endian + t[0])
                    if offset + cdt.itemsize > len(buf):
                        raise ParseError(f"element '{el.name}' truncated", offset=offset)
                    n = int(np.frombuffer(buf, cdt, 1, offset)[0])
                    offset += cdt.itemsize
                    idt = np.dtype(endian + t[1])
                    if offset + n * idt.itemsize > len(buf) or n < 0:
                        raise ParseError(f"element '{el.name}' truncated", offset=offset)
                    rec[name] = np.frombuffer(buf, idt, n, offset).tolist()
                    offset += n * idt.itemsize
                else:
                    sdt = np.dtype(endian + t)
                    if offset + sdt.itemsize > len(buf):
                        raise ParseError(f"element '{el.name}' truncated", offset=offset)
                    rec[name] = np.frombuffer(buf, sdt, 1, offset)[0].item()
                    offset += sdt.itemsize
            values.append(rec)
        out[el.name] = values
    if offset != len(buf):
        raise ParseError("trailing bytes after last element", offset=offset)
    return out


def _faces_from(records):
    faces = []
    for rec in records:
        key = "vertex_indices" if "vertex_indices" in rec else "vertex_index"
        idx = rec.get(key)
        if idx is None or len(idx) < 3:
            raise ParseError("face without vertex_indices")
        for j in range(1, len(idx) - 1):
            faces.append((int(idx[0]), int(idx[j]), int(idx[j + 1])))
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def read_ply(path):
    """Read a PLY file into a dict with ``points`` and optional ``normals``,
    ``colors`` (uint8) and ``faces``."""
    data = Path(path).read_bytes()
    fmt, elements, body, nheader = _parse_ply_header(data)
    if fmt == "ascii":
        try:
            text = data[body:].decode("ascii")
        except UnicodeDecodeError:
            raise ParseError("non-ascii bytes in ascii body", offset=body) from None
        lines = [ln for ln in text.splitlines()]
        # drop a single trailing empty line
        while lines and not lines[-1].strip():
            lines.pop()
        raw = _read_ascii_body(lines, nheader + 1, elements)
    else:
        raw = _read_binary_body(data, body, elements, "<" if fmt == "binary_little_endian" else ">")

    if "vertex" not in raw or isinstance(raw["vertex"], list):
        raise ParseError("missing scalar 'vertex' element")
    v = raw["vertex"]
    for c in "xyz":
        if c not in v:
            raise ParseError(f"vertex element lacks property '{c}'")
    out = {"points": np.stack([np.asarray(v[c], dtype=np.float64) for c in "xyz"], axis=1)}
    if all(c in v for c in ("nx", "ny", "nz")):
        out["normals"] = np.stack([np.asarray(v[c], dtype=np.float64) for c in ("nx", "ny", "nz")], axis=1)
    if all(c in v for c in ("red", "green", "blue")):
        out["colors"] = np.stack([np.asarray(v[c]) for c in ("red", "green", "blue")], axis=1).astype(np.uint8)
    if "face" in raw:
        out["faces"] = _faces_from(raw["face"])
        if len(out["faces"]) and out["faces"].max() >= len(out["points"]):
            raise ParseError("face index out of range")
    return out


def write_ply(path, points, normals=None, colors=None, faces=None, binary=True):
    """Coordinates are written as double, so binary files round-trip exactly."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    cols = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if normals is not None:
        cols += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if colors is not None:
        cols += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    tname = {"<f8": "double", "u1": "uchar"}
    header += [f"property {tname[t]} {name}" for name, t in cols]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    rec = np.zeros(n, dtype=np.dtype(cols))
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if normals is not None:
        nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        rec["nx"], rec["ny"], rec["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
    if colors is not None:
        c = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = c[:, 0], c[:, 1], c[:, 2]

    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            fh.write(rec.tobytes())
            if faces is not None:
                frec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                frec["n"] = 3
                frec["i"] = faces
                fh.write(frec.tobytes())
        else:
            for r in rec:
                fh.write((" ".join(repr(x) if isinstance(x, float) else str(int(x))
                                   for x in r.tolist()) + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


# ---------------------------------------------------------------- OBJ


def read_obj(path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tok = raw.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError
                elif tok[0] == "f":
                    idx = []
                    for t in tok[1:]:
                        i = int(t.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise ValueError
                    for j in range(1, len(idx) - 1):
                        faces.append((idx[0], idx[j], idx[j + 1]))
            except ValueError:
                raise ParseError(f"malformed OBJ record {raw.strip()!r}", line=lineno) from None
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(verts)):
        raise ParseError("face index out of range")
    return {"points": np.array(verts, dtype=np.float64).reshape(-1, 3), "faces": f}


def write_obj(path, vertices, faces=None):
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(vertices, dtype=np.float64).reshape(-1, 3):
            fh.write("v " + " ".join(repr(float(x)) for x in v) + "\n")
        if faces is not None:
            for f in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_mesh(path):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    return read_ply(path)


def write_mesh(path, vertices, faces):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        write_obj(path, vertices, faces)
    else:
        write_ply(path, vertices, faces=faces)


# ---------------------------------------------------------------- container
# magic(8) | header length uint64 LE | JSON header | raw little-endian blocks


def write_container(path, magic: bytes, header: dict, arrays: dict):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header["arrays"] = [
        {"name": k, "dtype": np.asarray(v).dtype.newbyteorder("<").str, "shape": list(np.shape(v))}
        for k, v in arrays.items()
    ]
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for spec in header["arrays"]:
            fh.write(np.ascontiguousarray(arrays[spec["name"]], dtype=spec["dtype"]).tobytes())


def read_container(path, magic: bytes, error=FormatError):
    """Returns ``(header, arrays)``; ``error(field, message)`` builds exceptions."""
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise error("magic", f"expected {magic!r}, found {data[:8]!r}")
    if len(data) < 16:
        raise error("header", "file truncated before header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise error("header", f"declared header length {hlen} exceeds file size")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise error("header", f"malformed JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), list):
        raise error("arrays", "header lacks array table")
    off = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        try:
            name, dt, shape = spec["name"], np.dtype(spec["dtype"]), tuple(int(s) for s in spec["shape"])
        except (KeyError, TypeError, ValueError):
            raise error("arrays", f"bad array descriptor {spec!r}") from None
        if any(s < 0 for s in shape):
            raise error(name, "negative dimension")
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(data):
            raise error(name, f"truncated: need {nbytes} bytes, have {len(data) - off}")
        arrays[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise error("arrays", f"{len(data) - off} trailing bytes")
    return header, arrays


# ---------------------------------------------------------------- landmarks, embeddings


def read_landmarks(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: landmark file must be an object of name -> [x, y, z]")
    out = {}
    for name, xyz in raw.items():
        arr = np.asarray(xyz, dtype=np.float64) if isinstance(xyz, list) else None
        if arr is None or arr.shape != (3,) or not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: landmark {name!r} is not a finite [x, y, z]")
        out[name] = arr
    return out


def write_landmarks(path, landmarks: dict):
    payload = {k: [float(x) for x in v] for k, v in landmarks.items()}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


EMBEDDING_DIM = 4096


def read_embedding(path, dim: int = EMBEDDING_DIM) -> np.ndarray:
    """Identity embedding as a unit vector.

    Accepts a bare JSON list or ``{"embedding": [...]}``. Norms off by more
    than 1e-6 but less than 1e-2 are renormalized; larger deviations fail.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(raw, dict):
        raw = raw.get("embedding")
    try:
        vec = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{path}: embedding is not numeric") from None
    if vec.ndim != 1 or len(vec) != dim:
        raise FormatError(f"{path}: expected embedding dimension {dim}, got shape {vec.shape}")
    return normalize_embedding(vec, where=str(path))


def normalize_embedding(vec, where="embedding"):
    vec = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise FormatError(f"{where}: non-finite values")
    norm = float(np.linalg.norm(vec))
    dev = abs(norm - 1.0)
    if dev >= 1e-2:
        raise FormatError(f"{where}: norm {norm:.6g} is not a unit vector")
    return vec / norm if dev > 1e-6 else vec


def write_embedding(path, vec):
    Path(path).write_text(json.dumps({"embedding": [float(x) for x in vec]}) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- transforms, reports


def write_transforms(path, transforms: dict):
    """scan_id -> 4x4 row-major homogeneous matrix (scan frame to model frame)."""
    payload = {k: [[float(x) for x in row] for row in t.matrix()] for k, t in transforms.items()}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_transforms(path) -> dict:
    from .geometry import RigidTransform

    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {k: RigidTransform.from_matrix(np.asarray(v, dtype=np.float64)) for k, v in raw.items()}


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
