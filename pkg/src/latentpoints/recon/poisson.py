"""Spectral Poisson solve for the indicator field and its normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import tensor as T
from ..nn.tensor import Tensor
from .field import GridGeometry, fourier_multiply, trilinear_sample

__all__ = ["IndicatorGrid", "poisson_solve", "normalize_indicator"]


@dataclass
class IndicatorGrid:
    values: np.ndarray  # [r, r, r]
    geom: GridGeometry


def _check_power_of_two(r):
    if r < 2 or (r & (r - 1)) != 0:
        raise ValueError(f"grid resolution {r} not supported: power of two required")


def poisson_solve(geom, V):
    """Solve laplacian(chi) = div(V) spectrally on the periodic grid.

    chi_hat(k) = -i (k . V_hat(k)) / |k|^2 for k != 0, chi_hat(0) = 0.
    V is an [r, r, r, 3] Tensor or array; returns chi as a Tensor.
    """
    _check_power_of_two(geom.r)
    V_t = T.as_tensor(V)
    kx, ky, kz = geom.wavenumbers()
    k_sq = kx ** 2 + ky ** 2 + kz ** 2
    k_sq[0, 0, 0] = 1.0  # avoid 0/0; the k=0 mode is zeroed explicitly
    chi = None
    for axis, k_ax in enumerate((kx, ky, kz)):
        m = -1j * k_ax / k_sq
        m[0, 0, 0] = 0.0
        term = fourier_multiply(V_t[..., axis], m)
        chi = term if chi is None else chi + term
    return chi


def normalize_indicator(geom, chi, points):
    """Subtract the mean of chi sampled (trilinearly) at the input points."""
    chi_t = T.as_tensor(chi)
    samples = trilinear_sample(geom, chi_t, points)
    return chi_t - samples.mean()


def write_indicator(path, grid):
    """Dump: one-line text header 'SAPGRID r', then raw little-endian f32."""
    values = grid.values if isinstance(grid, IndicatorGrid) else np.asarray(grid)
    r = values.shape[0]
    if values.shape != (r, r, r):
        raise ValueError("indicator grid must be cubic")
    with open(path, "wb") as f:
        f.write(f"SAPGRID {r}\n".encode())
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_indicator(path):
    with open(path, "rb") as f:
        header = f.readline().decode().strip().split()
        if len(header) != 2 or header[0] != "SAPGRID":
            raise ValueError(f"{path}: missing SAPGRID header")
        r = int(header[1])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != r ** 3:
        raise ValueError(f"{path}: expected {r ** 3} values, found {data.size}")
    return data.reshape(r, r, r).astype(np.float64)
