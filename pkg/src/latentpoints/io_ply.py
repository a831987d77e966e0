"""ASCII PLY reader/writer for point clouds (x,y,z with optional normals)."""

from __future__ import annotations

import numpy as np

__all__ = ["PlyError", "read_ply", "write_ply"]

_FLOAT_TYPES = {"float", "float32", "float64", "double"}


class PlyError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


def write_ply(path, points, normals=None):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must be [n, 3]")
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64)
            if normals.shape != points.shape:
                raise ValueError("normals must match points shape")
            f.write("property float nx\nproperty float ny\nproperty float nz\n")
        f.write("end_header\n")
        for i in range(len(points)):
            row = points[i] if normals is None else np.concatenate([points[i], normals[i]])
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def read_ply(path):
    """Returns (points, normals-or-None). ASCII format only."""
    with open(path) as f:
        lines = f.read().splitlines()

    def fail(line_no, msg):
        raise PlyError(path, line_no, msg)

    if not lines or lines[0].strip() != "ply":
        fail(1, "missing 'ply' magic line")
    n_vertex = None
    props = []
    i = 1
    saw_format = False
    while i < len(lines):
        tokens = lines[i].strip().split()
        i += 1
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                fail(i, f"ascii required, got format {' '.join(tokens[1:])!r}")
            saw_format = True
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                fail(i, f"only 'element vertex' is supported, got {tokens[1]!r}")
            if n_vertex is not None:
                fail(i, "duplicate vertex element")
            try:
                n_vertex = int(tokens[2])
            except (IndexError, ValueError):
                fail(i, "element vertex needs an integer count")
        elif tokens[0] == "property":
            if n_vertex is None:
                fail(i, "property before any element")
            if len(tokens) != 3 or tokens[1] not in _FLOAT_TYPES:
                fail(i, f"expected 'property <float-type> <name>', got {lines[i-1]!r}")
            props.append(tokens[2])
        elif tokens[0] == "end_header":
            break
        else:
            fail(i, f"unrecognized header line {lines[i-1]!r}")
    else:
        fail(len(lines), "missing end_header")
    if not saw_format:
        fail(i, "missing format line")
    if n_vertex is None:
        fail(i, "missing element vertex")
    if props[:3] != ["x", "y", "z"]:
        fail(i, f"first three properties must be x,y,z, got {props[:3]}")
    has_normals = props[3:6] == ["nx", "ny", "nz"]
    if len(props) > 3 and not has_normals:
        fail(i, f"unsupported extra properties {props[3:]}")

    body = lines[i:]
    if len(body) < n_vertex:
        fail(len(lines), f"expected {n_vertex} vertex rows, found {len(body)}")
    data = np.empty((n_vertex, len(props)))
    for r in range(n_vertex):
        parts = body[r].split()
        if len(parts) != len(props):
            fail(i + r + 1, f"expected {len(props)} values, got {len(parts)}")
        try:
            data[r] = [float(p) for p in parts]
        except ValueError:
            fail(i + r + 1, f"non-numeric value in {body[r]!r}")
    points = data[:, :3]
    normals = data[:, 3:6] if has_normals else None
    return points, normals
