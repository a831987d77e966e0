"""Marching cubes over a scalar grid with vertex welding on shared edges.

Vertices are interpolated linearly along cube edges at the iso crossing;
each grid edge produces exactly one vertex, so meshes of closed isosurfaces
are watertight. Faces are wound so their normals point toward values above
the iso level (outside, under the chi > 0 outside convention)."""

from __future__ import annotations

import numpy as np

from ._mc_tables import EDGE_TABLE, TRI_TABLE

__all__ = ["TriangleMesh", "marching_cubes", "mesh_surface_area", "write_obj"]


class TriangleMesh:
    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")

    def __len__(self):
        return len(self.faces)

    def edge_counts(self):
        """Multiplicity of each undirected edge (watertight: all exactly 2)."""
        edges = {}
        for tri in self.faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        return edges

    def euler_characteristic(self):
        v = len(self.vertices)
        e = len(self.edge_counts())
        f = len(self.faces)
        return v - e + f


# cube corner offsets in the Bourke convention
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
])
# the 12 edges as corner index pairs
_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]


def _edge_key(base, corner_a, corner_b):
    ca = tuple(base + _CORNERS[corner_a])
    cb = tuple(base + _CORNERS[corner_b])
    return (ca, cb) if ca <= cb else (cb, ca)


def marching_cubes(values, iso=0.0, origin=(0.0, 0.0, 0.0), spacing=1.0):
    """Extract the iso-surface of a [r, r, r] sample grid as a TriangleMesh."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("marching cubes needs a 3-D grid with resolution >= 2")
    origin = np.asarray(origin, dtype=np.float64)
    nx, ny, nz = values.shape
    vert_index = {}
    vertices = []
    faces = []

    inside = values < iso
    # cube case index per cell, vectorized
    bits = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit, (cx, cy, cz) in enumerate(_CORNERS):
        bits |= inside[cx:nx - 1 + cx, cy:ny - 1 + cy, cz:nz - 1 + cz] << bit
    active = np.argwhere((bits != 0) & (bits != 255))

    for base in active:
        bx, by, bz = base
        case = int(bits[bx, by, bz])
        if EDGE_TABLE[case] == 0:
            continue
        corner_vals = [values[bx + cx, by + cy, bz + cz] for cx, cy, cz in _CORNERS]
        edge_vertex = {}
        for e in range(12):
            if not (EDGE_TABLE[case] >> e) & 1:
                continue
            a, b = _EDGES[e]
            key = _edge_key(base, a, b)
            if key not in vert_index:
                va, vb = corner_vals[a], corner_vals[b]
                t = (iso - va) / (vb - va)
                pa = origin + (base + _CORNERS[a]) * spacing
                pb = origin + (base + _CORNERS[b]) * spacing
                vert_index[key] = len(vertices)
                vertices.append(pa + t * (pb - pa))
            edge_vertex[e] = vert_index[key]
        row = TRI_TABLE[case]
        for i in range(0, 16, 3):
            if row[i] < 0:
                break
            # reversed order winds the faces toward values above iso
            tri = (edge_vertex[row[i]], edge_vertex[row[i + 2]], edge_vertex[row[i + 1]])
            if tri[0] == tri[1] or tri[1] == tri[2] or tri[0] == tri[2]:
                continue  # degenerate (iso passes exactly through corners)
            faces.append(tri)

    mesh = TriangleMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    return _drop_zero_area(mesh)


def _drop_zero_area(mesh):
    if len(mesh.faces) == 0:
        return mesh
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area2 = np.linalg.norm(cross, axis=1)
    keep = area2 > 0.0
    return TriangleMesh(v, f[keep])


def mesh_surface_area(mesh):
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        return 0.0
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return float(0.5 * np.linalg.norm(cross, axis=1).sum())


def sample_mesh_surface(mesh, n, rng):
    """Uniform area-weighted point samples on the mesh surface."""
    v, f = mesh.vertices, mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    tri = rng.choice(len(f), size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    a, b, c = v[f[tri, 0]], v[f[tri, 1]], v[f[tri, 2]]
    return a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)


def write_obj(path, mesh):
    """ASCII OBJ: 'v x y z' and 1-based 'f i j k' lines."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
