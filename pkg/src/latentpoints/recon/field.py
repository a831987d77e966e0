"""Differentiable grid field operations: trilinear scatter/sample and Fourier
multipliers on periodic grids. These extend the autodiff tape with custom ops
whose backward passes are the exact adjoints."""

from __future__ import annotations

import numpy as np

from ..nn import tensor as T
from ..nn.tensor import Tensor

__all__ = [
    "GridGeometry",
    "trilinear_scatter",
    "trilinear_sample",
    "fourier_multiply",
    "gaussian_multiplier",
    "scatter_field",
]


class GridGeometry:
    """Periodic cube grid: r samples per axis at origin + i * spacing."""

    def __init__(self, resolution, origin=(-1.2, -1.2, -1.2), extent=2.4):
        self.r = int(resolution)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.extent = float(extent)
        self.spacing = self.extent / self.r

    def wavenumbers(self):
        k1 = 2.0 * np.pi * np.fft.fftfreq(self.r, d=self.spacing)
        kx, ky, kz = np.meshgrid(k1, k1, k1, indexing="ij")
        return kx, ky, kz

    def to_grid(self, points):
        return (np.asarray(points) - self.origin) / self.spacing


def _corner_data(geom, pos):
    """Indices and weights of the 8 surrounding cells, with clamping.

    Returns (idx_list, w_list, dw_list, n_clamped): per corner, integer index
    arrays [M, 3], weights [M], and weight gradients w.r.t. position [M, 3].
    """
    r = geom.r
    g = geom.to_grid(pos)
    lo = geom.origin
    eps = 1e-9
    clamped = (g < 0.0) | (g > r - 1 - eps)
    n_clamped = int(np.any(clamped, axis=1).sum())
    g = np.clip(g, 0.0, r - 1 - eps)
    i0 = np.floor(g).astype(int)
    frac = g - i0
    corners = []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                idx = (i0 + np.array([cx, cy, cz])) % r
                fx = frac[:, 0] if cx else 1.0 - frac[:, 0]
                fy = frac[:, 1] if cy else 1.0 - frac[:, 1]
                fz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                w = fx * fy * fz
                sx = 1.0 if cx else -1.0
                sy = 1.0 if cy else -1.0
                sz = 1.0 if cz else -1.0
                dw = np.stack(
                    [sx * fy * fz, fx * sy * fz, fx * fy * sz], axis=1
                ) / geom.spacing
                dw[np.any(clamped, axis=1)] = 0.0  # clamped coords are flat
                corners.append((idx, w, dw))
    return corners, n_clamped


def trilinear_scatter(geom, positions, values):
    """Deposit per-point vectors into the 8 surrounding cells (periodic).

    positions: [M, 3] Tensor or array; values: [M, C] Tensor or array.
    Returns (grid Tensor [r, r, r, C], clamped point count).
    """
    pos_t = T.as_tensor(positions)
    val_t = T.as_tensor(values)
    pos = pos_t.values
    val = val_t.values
    corners, n_clamped = _corner_data(geom, pos)
    c_channels = val.shape[1]
    grid = np.zeros((geom.r, geom.r, geom.r, c_channels))
    for idx, w, _ in corners:
        np.add.at(grid, (idx[:, 0], idx[:, 1], idx[:, 2]), w[:, None] * val)

    def backward(g):
        gpos = np.zeros_like(pos)
        gval = np.zeros_like(val)
        for idx, w, dw in corners:
            g_at = g[idx[:, 0], idx[:, 1], idx[:, 2]]  # [M, C]
            gval += w[:, None] * g_at
            gpos += np.sum(g_at * val, axis=1, keepdims=True) * dw
        pos_t._accumulate(gpos)
        val_t._accumulate(gval)

    return Tensor._result(grid, (pos_t, val_t), backward), n_clamped


def trilinear_sample(geom, grid, positions):
    """Sample a scalar grid [r, r, r] at positions [M, 3] (periodic)."""
    grid_t = T.as_tensor(grid)
    pos_t = T.as_tensor(positions)
    corners, _ = _corner_data(geom, pos_t.values)
    vals = np.zeros(len(pos_t.values))
    for idx, w, _ in corners:
        vals += w * grid_t.values[idx[:, 0], idx[:, 1], idx[:, 2]]

    def backward(g):
        ggrid = np.zeros_like(grid_t.values)
        gpos = np.zeros_like(pos_t.values)
        for idx, w, dw in corners:
            np.add.at(ggrid, (idx[:, 0], idx[:, 1], idx[:, 2]), g * w)
            gpos += (g * grid_t.values[idx[:, 0], idx[:, 1], idx[:, 2]])[:, None] * dw
        grid_t._accumulate(ggrid)
        pos_t._accumulate(gpos)

    return Tensor._result(vals, (grid_t, pos_t), backward)


def fourier_multiply(grid, multiplier):
    """Apply a (possibly complex) Fourier multiplier to each channel of a
    periodic grid [r, r, r(, C)]. Backward uses the conjugate multiplier."""
    grid_t = T.as_tensor(grid)
    values = grid_t.values

    def apply(m, x):
        if x.ndim == 4:
            out = np.empty_like(x)
            for c in range(x.shape[3]):
                out[..., c] = np.fft.ifftn(m * np.fft.fftn(x[..., c])).real
            return out
        return np.fft.ifftn(m * np.fft.fftn(x)).real

    out_values = apply(multiplier, values)
    conj = np.conj(multiplier)

    def backward(g):
        grid_t._accumulate(apply(conj, g))

    return Tensor._result(out_values, (grid_t,), backward)


def gaussian_multiplier(geom, sigma_cells):
    """Fourier-domain Gaussian with standard deviation sigma_cells grid cells."""
    kx, ky, kz = geom.wavenumbers()
    sigma_world = sigma_cells * geom.spacing
    return np.exp(-0.5 * sigma_world ** 2 * (kx ** 2 + ky ** 2 + kz ** 2))


def scatter_field(geom, positions, normals, sigma_smooth=2.0):
    """Rasterize oriented points into a smoothed vector field.

    Trilinear scatter of each normal into its 8 surrounding cells followed by
    Gaussian smoothing in the Fourier domain. Returns (V Tensor [r,r,r,3],
    clamped point count)."""
    grid, n_clamped = trilinear_scatter(geom, positions, normals)
    if sigma_smooth > 0.0:
        grid = fourier_multiply(grid, gaussian_multiplier(geom, sigma_smooth))
    return grid, n_clamped
