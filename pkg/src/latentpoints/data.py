"""Synthetic shape generation, normalization conventions, and dataset splits.

Shapes are sampled uniformly (area-weighted) on analytic surfaces with exact
normals. Families: sphere, box, torus, capsule, and two multi-part composites
(plane-like and chair-like) whose jittered part parameters provide the
global-structure/local-detail variation the hierarchical latents target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("sphere", "box", "torus", "capsule", "composite-plane", "composite-chair")

__all__ = ["FAMILIES", "Dataset", "synth_dataset", "normalize", "sample_family"]


# -- primitive surface samplers (points, normals, analytic area) -------------


def _sphere(rng, n, r):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return r * v, v


def _sphere_area(r):
    return 4.0 * np.pi * r * r


def _box(rng, n, half):
    hx, hy, hz = half
    face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
    faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        m = faces == f
        axis, sign = divmod(f, 2)
        sign = 1.0 if sign == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = u[m, 0] * half[others[0]]
        pts[m, others[1]] = u[m, 1] * half[others[1]]
        nrm[m, axis] = sign
    return pts, nrm


def _box_area(half):
    hx, hy, hz = half
    return 8.0 * (hx * hy + hy * hz + hx * hz)


def _torus(rng, n, R, r):
    u = rng.uniform(0.0, 2.0 * np.pi, size=n)
    # rejection sample the tube angle with density prop. to R + r*cos(v)
    v = np.empty(n)
    remaining = np.arange(n)
    while remaining.size:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=remaining.size)
        accept = rng.uniform(0.0, 1.0, size=remaining.size) < (R + r * np.cos(cand)) / (R + r)
        v[remaining[accept]] = cand[accept]
        remaining = remaining[~accept]
    cu, su, cv, sv = np.cos(u), np.sin(u), np.cos(v), np.sin(v)
    pts = np.stack([(R + r * cv) * cu, (R + r * cv) * su, r * sv], axis=1)
    nrm = np.stack([cv * cu, cv * su, sv], axis=1)
    return pts, nrm


def _torus_area(R, r):
    return 4.0 * np.pi ** 2 * R * r


def _capsule(rng, n, r, h, axis=2):
    """Capsule: cylinder of half-length h plus hemispherical caps, along `axis`."""
    side_area = 4.0 * np.pi * r * h
    cap_area = 4.0 * np.pi * r * r
    on_side = rng.uniform(size=n) < side_area / (side_area + cap_area)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    ns = int(on_side.sum())
    theta = rng.uniform(0.0, 2.0 * np.pi, size=ns)
    z = rng.uniform(-h, h, size=ns)
    pts[on_side] = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    nrm[on_side] = np.stack([np.cos(theta), np.sin(theta), np.zeros(ns)], axis=1)
    nc = n - ns
    v = rng.standard_normal((nc, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    shift = np.where(v[:, 2] >= 0.0, h, -h)
    cap_pts = r * v
    cap_pts[:, 2] += shift
    pts[~on_side] = cap_pts
    nrm[~on_side] = v
    if axis != 2:
        perm = [0, 1, 2]
        perm[axis], perm[2] = perm[2], perm[axis]
        pts = pts[:, perm]
        nrm = nrm[:, perm]
    return pts, nrm


def _capsule_area(r, h):
    return 4.0 * np.pi * r * (h + r)


# -- families ------------------------------------------------------------------


def _jitter(rng, value, frac=0.15):
    return value * rng.uniform(1.0 - frac, 1.0 + frac)


def _single_part(kind, rng):
    if kind == "sphere":
        r = _jitter(rng, 0.4)
        return [("sphere", {"r": r}, np.zeros(3), _sphere_area(r))]
    if kind == "box":
        half = np.array([_jitter(rng, 0.35), _jitter(rng, 0.28), _jitter(rng, 0.22)])
        return [("box", {"half": half}, np.zeros(3), _box_area(half))]
    if kind == "torus":
        R, r = _jitter(rng, 0.32), _jitter(rng, 0.11)
        return [("torus", {"R": R, "r": r}, np.zeros(3), _torus_area(R, r))]
    if kind == "capsule":
        r, h = _jitter(rng, 0.16), _jitter(rng, 0.3)
        return [("capsule", {"r": r, "h": h, "axis": 2}, np.zeros(3), _capsule_area(r, h))]
    raise ValueError(kind)


def _plane_parts(rng):
    fus_r, fus_h = _jitter(rng, 0.09), _jitter(rng, 0.5)
    wing = np.array([_jitter(rng, 0.12), _jitter(rng, 0.55), 0.02])
    tail = np.array([_jitter(rng, 0.06), _jitter(rng, 0.2), 0.015])
    fin = np.array([_jitter(rng, 0.06), 0.015, _jitter(rng, 0.12)])
    wing_x = _jitter(rng, 0.1)
    return [
        ("capsule", {"r": fus_r, "h": fus_h, "axis": 0}, np.zeros(3), _capsule_area(fus_r, fus_h)),
        ("box", {"half": wing}, np.array([wing_x, 0.0, 0.0]), _box_area(wing)),
        ("box", {"half": tail}, np.array([-fus_h * 0.92, 0.0, 0.02]), _box_area(tail)),
        ("box", {"half": fin}, np.array([-fus_h * 0.92, 0.0, 0.1]), _box_area(fin)),
    ]


def _chair_parts(rng):
    seat = np.array([_jitter(rng, 0.3), _jitter(rng, 0.3), 0.035])
    back = np.array([seat[0], 0.035, _jitter(rng, 0.33)])
    leg = np.array([0.035, 0.035, _jitter(rng, 0.24)])
    lx, ly = seat[0] - leg[0], seat[1] - leg[1]
    parts = [
        ("box", {"half": seat}, np.zeros(3), _box_area(seat)),
        ("box", {"half": back}, np.array([0.0, -seat[1], back[2] + seat[2]]), _box_area(back)),
    ]
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            parts.append(
                ("box", {"half": leg}, np.array([sx * lx, sy * ly, -(leg[2] + seat[2])]), _box_area(leg))
            )
    return parts


def sample_family(family, n_points, rng, return_labels=False):
    """Points (and normals) on one randomly parametrized shape of a family."""
    if family in ("sphere", "box", "torus", "capsule"):
        parts = _single_part(family, rng)
    elif family == "composite-plane":
        parts = _plane_parts(rng)
    elif family == "composite-chair":
        parts = _chair_parts(rng)
    else:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")

    areas = np.array([p[3] for p in parts])
    labels = rng.choice(len(parts), size=n_points, p=areas / areas.sum())
    pts = np.empty((n_points, 3))
    nrm = np.empty((n_points, 3))
    for i, (kind, kw, offset, _) in enumerate(parts):
        m = labels == i
        cnt = int(m.sum())
        if cnt == 0:
            continue
        if kind == "sphere":
            p, nv = _sphere(rng, cnt, kw["r"])
        elif kind == "box":
            p, nv = _box(rng, cnt, kw["half"])
        elif kind == "torus":
            p, nv = _torus(rng, cnt, kw["R"], kw["r"])
        else:
            p, nv = _capsule(rng, cnt, kw["r"], kw["h"], kw["axis"])
        pts[m] = p + offset
        nrm[m] = nv
    if return_labels:
        return pts, nrm, labels, areas
    return pts, nrm


@dataclass
class Dataset:
    shapes: list
    normals: list | None
    split: dict
    normalization: dict = field(default_factory=lambda: {"mode": "none"})
    meta: dict = field(default_factory=dict)

    def subset(self, name):
        return [self.shapes[i] for i in self.split[name]]

    def __len__(self):
        return len(self.shapes)


def _make_split(count, rng):
    idx = rng.permutation(count)
    n_ref = max(1, int(round(0.1 * count)))
    n_val = max(1, int(round(0.1 * count)))
    n_train = count - n_ref - n_val
    if n_train < 1:
        n_train, n_val, n_ref = 1, 1, count - 2
    return {
        "train": sorted(int(i) for i in idx[:n_train]),
        "val": sorted(int(i) for i in idx[n_train:n_train + n_val]),
        "reference": sorted(int(i) for i in idx[n_train + n_val:]),
    }


def synth_dataset(families, count, n_points, seed, with_normals=False):
    """Deterministic dataset of `count` shapes cycling through `families`."""
    if count < 3:
        raise ValueError("need count >= 3 to form train/val/reference splits")
    if isinstance(families, str):
        families = [families]
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown family {f!r}; choose from {FAMILIES}")
    root = np.random.SeedSequence(seed)
    shape_seeds = root.spawn(count + 1)
    shapes, normals = [], []
    for i in range(count):
        rng = np.random.default_rng(shape_seeds[i])
        pts, nrm = sample_family(families[i % len(families)], n_points, rng)
        shapes.append(pts)
        normals.append(nrm)
    split = _make_split(count, np.random.default_rng(shape_seeds[count]))
    return Dataset(
        shapes=shapes,
        normals=normals if with_normals else None,
        split=split,
        meta={"families": list(families), "count": count, "n_points": n_points, "seed": seed},
    )


def normalize(dataset, mode):
    """Return a new Dataset normalized globally or per shape.

    global: subtract per-axis dataset mean, divide by one std over all axes
    and shapes. per_shape: center each shape per axis (midpoint of the
    bounding box), scale by the maximum axis half-extent so coords lie in
    [-1, 1] with the max axis touching exactly +-1.
    """
    if mode == "global":
        stacked = np.concatenate(dataset.shapes, axis=0)
        mean = stacked.mean(axis=0)
        std = float((stacked - mean).std())
        if std == 0.0:
            raise ValueError("degenerate dataset: zero extent")
        shapes = [(s - mean) / std for s in dataset.shapes]
        norm = {"mode": "global", "mean": mean.tolist(), "std": std}
    elif mode == "per_shape":
        shapes = []
        for s in dataset.shapes:
            lo, hi = s.min(axis=0), s.max(axis=0)
            center = 0.5 * (lo + hi)
            scale = float(np.max(0.5 * (hi - lo)))
            if scale == 0.0:
                raise ValueError("degenerate shape: zero extent")
            shapes.append((s - center) / scale)
        norm = {"mode": "per_shape"}
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return Dataset(
        shapes=shapes,
        normals=dataset.normals,
        split=dataset.split,
        normalization=norm,
        meta=dict(dataset.meta),
    )
