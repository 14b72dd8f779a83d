"""Readers and writers for meshes (ASCII OBJ/PLY), landmark CSV files and
machine-readable JSON reports.

Coordinates are serialized with `repr`, which round-trips float64 exactly and
always carries at least 9 significant digits.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InputError
from .geometry import PointCloud, TriMesh, as_points

__all__ = [
    "LandmarkSet",
    "ReportDocument",
    "read_landmarks",
    "read_mesh",
    "write_landmarks",
    "write_mesh",
    "write_report",
]


class LandmarkSet:
    """Ordered, named 3D landmarks. Order defines correspondence between sets;
    names are metadata, verified when two named sets are compared."""

    __slots__ = ("names", "positions")

    def __init__(self, names, positions):
        names = tuple(str(n) for n in names)
        pos = as_points(positions, "landmark positions", allow_empty=True)
        if len(names) != len(pos):
            raise InputError(
                f"landmark name/position count mismatch: {len(names)} vs {len(pos)}"
            )
        seen = set()
        for name in names:
            if not name:
                raise InputError("landmark names must be non-empty")
            if name in seen:
                raise InputError(f"duplicate landmark name {name!r}")
            seen.add(name)
        self.names = names
        pos = np.ascontiguousarray(pos)
        pos.setflags(write=False)
        self.positions = pos

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(zip(self.names, self.positions))

    @property
    def entries(self):
        return list(self)

    def __repr__(self):
        return f"LandmarkSet({len(self)} landmarks)"


@dataclass
class ReportDocument:
    """Registration/evaluation report. `err_avg` must equal the mean of the
    per-landmark errors (checked to 1e-9); both are None when no ground truth
    was available."""

    per_landmark_errors: dict = field(default_factory=dict)
    err_avg: float | None = None
    err_median_landmark: float | None = None
    params: dict = field(default_factory=dict)
    energy_trace: list = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.per_landmark_errors:
            if self.err_avg is None:
                raise InputError("report with per-landmark errors needs err_avg")
            mean = float(np.mean(list(self.per_landmark_errors.values())))
            if abs(mean - self.err_avg) > 1e-9:
                raise InputError(
                    f"err_avg {self.err_avg!r} does not match the mean of the "
                    f"per-landmark errors ({mean!r})"
                )


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


def _open_read(path):
    try:
        return open(path, "r", encoding="utf-8-sig")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def read_mesh(path):
    """Read an ASCII .obj or .ply file into a TriMesh."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return _read_obj(path)
    if suffix == ".ply":
        return _read_ply(path)
    raise InputError(f"unsupported mesh extension {suffix!r} for {path} (use .obj or .ply)")


def write_mesh(mesh, path):
    """Write a TriMesh; the extension selects the format (.obj or .ply)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        _write_obj(mesh, path)
    elif suffix == ".ply":
        _write_ply(mesh, path)
    else:
        raise InputError(f"unsupported mesh extension {suffix!r} for {path} (use .obj or .ply)")


def _fan_triangulate(indices, lineno, faces, face_lines):
    for i in range(1, len(indices) - 1):
        faces.append((indices[0], indices[i], indices[i + 1]))
        face_lines.append(lineno)


def _read_obj(path):
    vertices = []
    faces = []
    face_lines = []
    with _open_read(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise FileFormatError(path, lineno, "vertex line needs 3 coordinates")
                try:
                    xyz = [float(t) for t in tokens[1:4]]
                except ValueError:
                    raise FileFormatError(
                        path, lineno, f"bad vertex coordinate in {line!r}"
                    ) from None
                if not all(np.isfinite(xyz)):
                    raise FileFormatError(path, lineno, "non-finite vertex coordinate")
                vertices.append(xyz)
            elif tokens[0] == "f":
                if len(tokens) < 4:
                    raise FileFormatError(path, lineno, "face needs at least 3 vertices")
                idx = []
                for tok in tokens[1:]:
                    head = tok.split("/")[0]
                    try:
                        idx.append(int(head))
                    except ValueError:
                        raise FileFormatError(
                            path, lineno, f"bad face index {tok!r}"
                        ) from None
                _fan_triangulate(idx, lineno, faces, face_lines)
            # vt/vn/usemtl/mtllib/o/g/s and other directives are ignored
    if not vertices:
        raise FileFormatError(path, None, "no vertices found")
    n = len(vertices)
    for (a, b, c), lineno in zip(faces, face_lines):
        for i in (a, b, c):
            if not 1 <= i <= n:
                raise FileFormatError(
                    path, lineno, f"face index {i} out of range 1..{n}"
                )
    f = np.asarray(faces, dtype=np.int64) - 1 if faces else None
    return TriMesh(np.asarray(vertices), f)


def _read_ply(path):
    with _open_read(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FileFormatError(path, 1, "not a PLY file (missing 'ply' magic)")
    elements = []  # (name, count, [property descriptors])
    fmt_seen = False
    body_start = None
    for lineno in range(1, len(lines)):
        tokens = lines[lineno].strip().split()
        if not tokens or tokens[0] == "comment" or tokens[0] == "obj_info":
            continue
        if tokens[0] == "format":
            if len(tokens) < 3 or tokens[1] != "ascii":
                enc = tokens[1] if len(tokens) > 1 else "?"
                raise FileFormatError(
                    path, lineno + 1, f"unsupported encoding {enc!r} (only 'ascii 1.0')"
                )
            if tokens[2] != "1.0":
                raise FileFormatError(path, lineno + 1, f"unsupported PLY version {tokens[2]!r}")
            fmt_seen = True
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise FileFormatError(path, lineno + 1, "malformed element declaration")
            try:
                count = int(tokens[2])
            except ValueError:
                raise FileFormatError(
                    path, lineno + 1, f"bad element count {tokens[2]!r}"
                ) from None
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise FileFormatError(path, lineno + 1, "property before any element")
            elements[-1][2].append(tokens[1:])
        elif tokens[0] == "end_header":
            body_start = lineno + 1
            break
        else:
            raise FileFormatError(path, lineno + 1, f"unexpected header line {lines[lineno]!r}")
    if body_start is None:
        raise FileFormatError(path, len(lines), "missing end_header")
    if not fmt_seen:
        raise FileFormatError(path, 1, "missing format declaration")

    vertices = None
    faces = []
    face_lines = []
    cursor = body_start
    for name, count, props in elements:
        if name == "vertex":
            coord_cols = {}
            for col, p in enumerate(props):
                if p[0] == "list":
                    raise FileFormatError(path, None, "list property on vertex element unsupported")
                if len(p) == 2 and p[1] in ("x", "y", "z"):
                    coord_cols[p[1]] = col
            if sorted(coord_cols) != ["x", "y", "z"]:
                raise FileFormatError(path, None, "vertex element must declare x, y, z properties")
            if count == 0:
                raise FileFormatError(path, None, "vertex element is empty")
            vertices = np.zeros((count, 3))
            for i in range(count):
                lineno = cursor + i
                if lineno >= len(lines):
                    raise FileFormatError(path, len(lines), "unexpected end of file in vertex data")
                tokens = lines[lineno].split()
                if len(tokens) != len(props):
                    raise FileFormatError(
                        path, lineno + 1,
                        f"vertex row has {len(tokens)} values, expected {len(props)}",
                    )
                try:
                    for axis, col in coord_cols.items():
                        vertices[i, "xyz".index(axis)] = float(tokens[col])
                except ValueError:
                    raise FileFormatError(
                        path, lineno + 1, f"bad vertex value in {lines[lineno]!r}"
                    ) from None
            cursor += count
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list" or props[0][-1] not in (
                "vertex_indices",
                "vertex_index",
            ):
                raise FileFormatError(
                    path, None, "face element must have a single vertex_indices list property"
                )
            for i in range(count):
                lineno = cursor + i
                if lineno >= len(lines):
                    raise FileFormatError(path, len(lines), "unexpected end of file in face data")
                tokens = lines[lineno].split()
                try:
                    k = int(tokens[0]) if tokens else -1
                    idx = [int(t) for t in tokens[1:]]
                except ValueError:
                    raise FileFormatError(
                        path, lineno + 1, f"bad face row {lines[lineno]!r}"
                    ) from None
                if k < 3:
                    raise FileFormatError(path, lineno + 1, "face needs at least 3 vertices")
                if len(idx) != k:
                    raise FileFormatError(
                        path, lineno + 1, f"face row declares {k} indices but has {len(idx)}"
                    )
                _fan_triangulate(idx, lineno + 1, faces, face_lines)
            cursor += count
        else:
            cursor += count  # unknown element: skip its rows
    if vertices is None:
        raise FileFormatError(path, None, "no vertex element found")
    n = len(vertices)
    for (a, b, c), lineno in zip(faces, face_lines):
        for i in (a, b, c):
            if not 0 <= i < n:
                raise FileFormatError(path, lineno, f"face index {i} out of range 0..{n - 1}")
    return TriMesh(vertices, np.asarray(faces, dtype=np.int64) if faces else None)


def _open_write(path):
    try:
        return open(path, "w", encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


def _write_obj(mesh, path):
    with _open_write(path) as fh:
        for x, y, z in mesh.vertices.points.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces.tolist():
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def _write_ply(mesh, path):
    with _open_write(path) as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.vertex_count}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {mesh.face_count}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for x, y, z in mesh.vertices.points.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces.tolist():
            fh.write(f"3 {a} {b} {c}\n")


# ---------------------------------------------------------------------------
# landmarks
# ---------------------------------------------------------------------------

_LANDMARK_HEADER = ["name", "x", "y", "z"]


def read_landmarks(path):
    """Read a landmark CSV with header name,x,y,z (UTF-8, mm)."""
    with _open_read(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(path, 1, "empty file (expected header name,x,y,z)") from None
        if [h.strip() for h in header] != _LANDMARK_HEADER:
            raise FileFormatError(path, 1, f"bad header {header!r}, expected name,x,y,z")
        names = []
        rows = []
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise FileFormatError(path, lineno, f"expected 4 fields, got {len(row)}")
            name = row[0]
            if not name:
                raise FileFormatError(path, lineno, "empty landmark name")
            if name in names:
                raise FileFormatError(path, lineno, f"duplicate landmark name {name!r}")
            try:
                xyz = [float(v) for v in row[1:]]
            except ValueError:
                raise FileFormatError(
                    path, lineno, f"non-numeric coordinate in row {row!r}"
                ) from None
            if not all(np.isfinite(xyz)):
                raise FileFormatError(path, lineno, "non-finite coordinate")
            names.append(name)
            rows.append(xyz)
        return LandmarkSet(names, rows)


def write_landmarks(landmarks, path):
    """Write a landmark CSV; exact inverse of read_landmarks."""
    with _open_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(_LANDMARK_HEADER)
        for name, (x, y, z) in landmarks:
            writer.writerow([name, repr(float(x)), repr(float(y)), repr(float(z))])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_report(report, path):
    """Serialize a ReportDocument as JSON with a fixed key order."""
    doc = {
        "per_landmark_errors": {k: float(v) for k, v in report.per_landmark_errors.items()},
        "err_avg": None if report.err_avg is None else float(report.err_avg),
        "err_median_landmark": (
            None if report.err_median_landmark is None else float(report.err_median_landmark)
        ),
        "params": report.params,
        "energy_trace": [
            {
                "iteration": int(it),
                "e_total": float(e_total),
                "e_align": float(e_align),
                "e_smooth": float(e_smooth),
            }
            for it, e_total, e_align, e_smooth in report.energy_trace
        ],
        "timings_ms": {k: float(v) for k, v in report.timings_ms.items()},
    }
    with _open_write(path) as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
