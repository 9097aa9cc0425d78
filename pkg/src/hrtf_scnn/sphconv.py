"""Spherical convolution with zonal kernels, computed in the SH domain.

A zonal kernel is rotationally symmetric about the north pole, so it has
one coefficient per order. Convolving with it scales every (n, m)
coefficient of the input by ``2*pi*sqrt(4*pi/(2n+1)) * beta_n``, which
commutes with any rotation of the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sh import (
    DEFAULT_COND_THRESHOLD,
    Y00,
    ShCoefficients,
    SphericalGrid,
    build_sh_matrix,
    isht,
    n_coeffs,
    order_of_index,
    sh_matrix,
    sht_least_squares,
)


def conv_scale(order: int) -> np.ndarray:
    """Per-order factor 2*pi*sqrt(4*pi/(2n+1)) for n = 0..order."""
    n = np.arange(order + 1)
    return 2.0 * math.pi * np.sqrt(4.0 * math.pi / (2 * n + 1))


@dataclass
class ZonalKernelBank:
    """Kernel coefficients ``betas[kernel, in_channel, order]`` and optional bias."""

    betas: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 3:
            raise ValueError(f"betas must be 3-D (u, C_in, N+1), got shape {self.betas.shape}")
        if not np.all(np.isfinite(self.betas)):
            raise ValueError("kernel coefficients must be finite")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.n_kernels,):
                raise ValueError(f"bias must have shape ({self.n_kernels},), got {self.bias.shape}")
            if not np.all(np.isfinite(self.bias)):
                raise ValueError("bias must be finite")

    @property
    def order(self) -> int:
        return self.betas.shape[2] - 1

    @property
    def n_kernels(self) -> int:
        return self.betas.shape[0]

    @property
    def in_channels(self) -> int:
        return self.betas.shape[1]

    @classmethod
    def init(cls, u: int, c_in: int, order: int, rng: np.random.Generator, bias: bool = True):
        """Uniform fan-in initialisation, zero bias."""
        s = math.sqrt(1.0 / (c_in * (order + 1)))
        betas = rng.uniform(-s, s, size=(u, c_in, order + 1))
        return cls(betas, np.zeros(u) if bias else None)

    @classmethod
    def zeros(cls, u: int, c_in: int, order: int, bias: bool = True):
        return cls(np.zeros((u, c_in, order + 1)), np.zeros(u) if bias else None)

    def copy(self) -> "ZonalKernelBank":
        return ZonalKernelBank(self.betas.copy(), None if self.bias is None else self.bias.copy())


@dataclass
class ConvBlockParams:
    kernels: ZonalKernelBank
    uses_skip: bool = True
    uses_relu: bool = True
    conv_order: int = field(init=False)

    def __post_init__(self):
        self.conv_order = self.kernels.order
        if self.uses_skip and self.kernels.n_kernels != self.kernels.in_channels:
            raise ValueError(
                "identity skip needs as many kernels as input channels "
                f"(u={self.kernels.n_kernels}, C_in={self.kernels.in_channels})"
            )


def zonal_expand(beta) -> np.ndarray:
    """Replicate each order's coefficient across its 2n+1 modes."""
    beta = np.asarray(beta, dtype=np.float64)
    return beta[..., order_of_index(beta.shape[-1] - 1)]


def spectral_convolve(a, beta) -> ShCoefficients:
    """Convolve SH coefficients with one zonal kernel."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    order = beta.size - 1
    if isinstance(a, ShCoefficients):
        if a.order != order:
            raise ValueError(f"coefficient order {a.order} does not match kernel order {order}")
        avals = a.values
    else:
        avals = np.asarray(a, dtype=np.float64)
        if avals.ndim == 1:
            avals = avals[:, None]
        if avals.shape[0] != n_coeffs(order):
            raise ValueError(f"expected {n_coeffs(order)} coefficients for kernel order {order}")
    gain = zonal_expand(conv_scale(order) * beta)
    return ShCoefficients(gain[:, None] * avals, order)


def _order_slices(order: int):
    return [slice(n * n, (n + 1) * (n + 1)) for n in range(order + 1)]


def conv_layer_forward(a, bank: ZonalKernelBank) -> np.ndarray:
    """Multi-kernel zonal convolution, summed over input channels.

    ``a`` has shape (K, C_in) or (batch, K, C_in); the result has the same
    leading shape with ``u`` output channels. The bias of kernel j is added
    to the (0, 0) coefficient divided by Y_00, i.e. a constant offset of
    ``bias[j]`` on the sphere.
    """
    if isinstance(a, ShCoefficients):
        a = a.values
    a = np.asarray(a, dtype=np.float64)
    order = bank.order
    if a.shape[-2] != n_coeffs(order):
        raise ValueError(f"expected {n_coeffs(order)} coefficient rows, got {a.shape[-2]}")
    if a.shape[-1] != bank.in_channels:
        raise ValueError(f"expected {bank.in_channels} input channels, got {a.shape[-1]}")
    scale = conv_scale(order)
    out = np.empty(a.shape[:-1] + (bank.n_kernels,))
    for n, sl in enumerate(_order_slices(order)):
        out[..., sl, :] = scale[n] * (a[..., sl, :] @ bank.betas[:, :, n].T)
    if bank.bias is not None:
        out[..., 0, :] += bank.bias / Y00
    return out


def conv_layer_backward(a, bank: ZonalKernelBank, grad_out):
    """Gradients of a conv layer given dLoss/d(output coefficients).

    Returns ``(grad_a, grad_betas, grad_bias)``; batch axes are summed
    into the parameter gradients.
    """
    a = np.asarray(a, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    order = bank.order
    scale = conv_scale(order)
    u, c_in = bank.n_kernels, bank.in_channels
    grad_a = np.empty_like(a)
    grad_betas = np.empty_like(bank.betas)
    for n, sl in enumerate(_order_slices(order)):
        g = grad_out[..., sl, :].reshape(-1, u)
        x = a[..., sl, :].reshape(-1, c_in)
        grad_betas[:, :, n] = scale[n] * (g.T @ x)
        grad_a[..., sl, :] = scale[n] * (grad_out[..., sl, :] @ bank.betas[:, :, n])
    grad_bias = None
    if bank.bias is not None:
        grad_bias = grad_out[..., 0, :].reshape(-1, u).sum(axis=0) / Y00
    return grad_a, grad_betas, grad_bias


def mapping_block(H, grid_in: SphericalGrid, grid_out: SphericalGrid, order: int,
                  threshold: float = DEFAULT_COND_THRESHOLD) -> np.ndarray:
    """Band-limited resampling of a field from ``grid_in`` to ``grid_out``."""
    a = sht_least_squares(H, build_sh_matrix(grid_in, order), threshold)
    return isht(a, build_sh_matrix(grid_out, order))


def rotate_z(H, grid: SphericalGrid, angle: float, order: int,
             threshold: float = DEFAULT_COND_THRESHOLD) -> np.ndarray:
    """Rotate a band-limited field about the z axis by ``angle`` radians.

    The rotated field g f satisfies (g f)(theta, phi) = f(theta, phi - angle);
    it is obtained by fitting SH coefficients at ``order`` and evaluating
    them at the shifted directions.
    """
    a = sht_least_squares(H, build_sh_matrix(grid, order), threshold)
    return sh_matrix(order, grid.theta, grid.phi - angle) @ a.values


def spherical_conv(H, grid: SphericalGrid, betas, order: int,
                   threshold: float = DEFAULT_COND_THRESHOLD) -> np.ndarray:
    """Convolve a field on ``grid`` with a zonal kernel and sample the result on the same grid."""
    Y = build_sh_matrix(grid, order)
    return isht(spectral_convolve(sht_least_squares(H, Y, threshold), betas), Y)
