"""Sparse-to-dense interpolation network with hand-derived gradients.

Topology (all fields are P x L with one channel per frequency bin)::

    x0 = map_in(H_sparse)                       sparse grid -> dense grid
    x1 = relu(Y @ conv1(S @ x0)) + x0           convolutional block 1
    x2 = relu(Y @ conv2(S @ x1)) + x1           convolutional block 2
    out = map_out(x2)                           dense grid -> dense grid

``S``/``Y`` are the SHT/ISHT matrices at the convolution order; both
mapping blocks are fixed linear operators, so backward is a chain of
transposes plus the zonal-kernel contractions.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional

import numpy as np

from .sh import DEFAULT_COND_THRESHOLD, SphericalGrid, build_sh_matrix, n_coeffs, sht_operator
from .sphconv import ConvBlockParams, ZonalKernelBank, conv_layer_backward, conv_layer_forward

CHECKPOINT_MAGIC = b"HSCNNCKP"
CHECKPOINT_VERSION = 1
MAGNITUDE_FLOOR = 1e-6


class CheckpointError(ValueError):
    pass


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    # subgradient at 0 is 0
    return (np.asarray(x) > 0.0).astype(np.float64)


def magnitude_db(magnitude, clamp: bool = False):
    """20*log10 of a linear magnitude; non-positive input is an error unless clamped."""
    mag = np.asarray(magnitude, dtype=np.float64)
    if clamp:
        mag = np.maximum(mag, MAGNITUDE_FLOOR)
    elif np.any(~(mag > 0)):
        raise ValueError("magnitude must be strictly positive to convert to dB")
    out = 20.0 * np.log10(mag)
    return float(out) if out.ndim == 0 else out


def lsd(H, H_hat) -> float:
    """Log-spectral distortion between two dB fields of equal shape."""
    H = np.asarray(H, dtype=np.float64)
    H_hat = np.asarray(H_hat, dtype=np.float64)
    if H.shape != H_hat.shape:
        raise ValueError(f"shape mismatch: {H.shape} vs {H_hat.shape}")
    if H.size == 0:
        raise ValueError("LSD of an empty field is undefined")
    return float(np.sqrt(np.mean((H - H_hat) ** 2)))


def lsd_loss_and_grad(out, target, rows=None):
    """Mean per-sample LSD over a batch, and its gradient w.r.t. ``out``.

    ``out``/``target`` have shape (B, P, L). ``rows`` optionally restricts
    the loss to a subset of directions. Samples with zero LSD contribute a
    zero gradient.
    """
    out = np.asarray(out, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if out.shape != target.shape:
        raise ValueError(f"shape mismatch: {out.shape} vs {target.shape}")
    if out.ndim == 2:
        out, target = out[None], target[None]
    resid = out - target
    if rows is not None:
        mask = np.zeros(resid.shape[1], dtype=bool)
        mask[rows] = True
        resid = resid * mask[None, :, None]
        count = mask.sum() * resid.shape[2]
    else:
        count = resid.shape[1] * resid.shape[2]
    per_sample = np.sqrt(np.einsum("bpl,bpl->b", resid, resid) / count)
    B = resid.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(per_sample > 0, 1.0 / (B * count * per_sample), 0.0)
    return per_sample, resid * coef[:, None, None]


@dataclass
class ModelParams:
    block1: ConvBlockParams
    block2: ConvBlockParams
    n_map_in: int
    n_map_out: int
    sparse_grid: SphericalGrid
    dense_grid: SphericalGrid
    channels: int
    cond_threshold: float = DEFAULT_COND_THRESHOLD
    n_conv: int = field(init=False)

    def __post_init__(self):
        if self.block1.conv_order != self.block2.conv_order:
            raise ValueError("both convolutional blocks must share one SH order")
        self.n_conv = self.block1.conv_order
        if self.block1.kernels.in_channels != self.channels:
            raise ValueError(
                f"block 1 expects {self.block1.kernels.in_channels} input channels, model has {self.channels}"
            )
        if self.block2.kernels.in_channels != self.block1.kernels.n_kernels:
            raise ValueError("block 2 input channels must equal block 1 kernel count")
        if self.block2.kernels.n_kernels != self.channels:
            raise ValueError("block 2 must produce one channel per frequency bin")
        P_s, P_d = len(self.sparse_grid), len(self.dense_grid)
        for name, order, P in (("n_map_in", self.n_map_in, P_s), ("n_conv", self.n_conv, P_d),
                               ("n_map_out", self.n_map_out, P_d)):
            if order < 0 or n_coeffs(order) > P:
                raise ValueError(f"{name}={order} needs {n_coeffs(order)} directions, grid has {P}")

    @property
    def blocks(self):
        return (self.block1, self.block2)

    def learnable(self) -> List[np.ndarray]:
        out = []
        for blk in self.blocks:
            out.append(blk.kernels.betas)
            if blk.kernels.bias is not None:
                out.append(blk.kernels.bias)
        return out

    def learnable_names(self) -> List[str]:
        names = []
        for k, blk in enumerate(self.blocks, start=1):
            names.append(f"block{k}.betas")
            if blk.kernels.bias is not None:
                names.append(f"block{k}.bias")
        return names

    def with_learnable(self, tensors) -> "ModelParams":
        it = iter(tensors)
        blocks = []
        for blk in self.blocks:
            betas = np.array(next(it), dtype=np.float64)
            bias = None if blk.kernels.bias is None else np.array(next(it), dtype=np.float64)
            blocks.append(ConvBlockParams(ZonalKernelBank(betas, bias), blk.uses_skip, blk.uses_relu))
        return ModelParams(blocks[0], blocks[1], self.n_map_in, self.n_map_out,
                           self.sparse_grid, self.dense_grid, self.channels, self.cond_threshold)

    def copy(self) -> "ModelParams":
        return self.with_learnable(self.learnable())

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.learnable()))


def init_model(sparse_grid: SphericalGrid, dense_grid: SphericalGrid, channels: int,
               n_map_in: int = 7, n_conv: int = 16, n_map_out: int = 16, width: Optional[int] = None,
               bias: bool = True, seed: int = 0, zero: bool = False,
               cond_threshold: float = DEFAULT_COND_THRESHOLD) -> ModelParams:
    """Fresh model with seeded uniform kernels (or all-zero kernels if ``zero``)."""
    width = channels if width is None else width
    if width != channels:
        raise ValueError(f"identity skips need width == channels ({width} != {channels})")
    rng = np.random.default_rng(seed)
    banks = []
    for _ in range(2):
        if zero:
            banks.append(ZonalKernelBank.zeros(width, channels, n_conv, bias))
        else:
            banks.append(ZonalKernelBank.init(width, channels, n_conv, rng, bias))
    return ModelParams(ConvBlockParams(banks[0]), ConvBlockParams(banks[1]), n_map_in, n_map_out,
                       sparse_grid, dense_grid, channels, cond_threshold)


@dataclass(frozen=True)
class Operators:
    map_in: np.ndarray    # (P_dense, P_sparse)
    sht_conv: np.ndarray  # (K_conv, P_dense)
    isht_conv: np.ndarray  # (P_dense, K_conv)
    map_out: np.ndarray   # (P_dense, P_dense)


@lru_cache(maxsize=8)
def _operators(sparse: SphericalGrid, dense: SphericalGrid, n_map_in: int, n_conv: int,
               n_map_out: int, threshold: float) -> Operators:
    def mapping(src, dst, order):
        S = sht_operator(build_sh_matrix(src, order), threshold)
        return build_sh_matrix(dst, order).values @ S

    Y_conv = build_sh_matrix(dense, n_conv)
    ops = Operators(
        map_in=mapping(sparse, dense, n_map_in),
        sht_conv=sht_operator(Y_conv, threshold),
        isht_conv=np.array(Y_conv.values),
        map_out=mapping(dense, dense, n_map_out),
    )
    for arr in (ops.map_in, ops.sht_conv, ops.isht_conv, ops.map_out):
        arr.flags.writeable = False
    return ops


def model_operators(params: ModelParams) -> Operators:
    return _operators(params.sparse_grid, params.dense_grid, params.n_map_in, params.n_conv,
                      params.n_map_out, params.cond_threshold)


@dataclass
class ForwardCache:
    params: ModelParams
    fields: list      # block inputs x0, x1, x2
    coeffs: list      # SH coefficients fed to each conv layer
    pre_act: list     # ISHT of each conv output, before ReLU
    batched: bool


@dataclass
class GradientBundle:
    names: List[str]
    tensors: List[np.ndarray]

    def __iter__(self):
        return iter(self.tensors)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors)


def model_forward(H_sparse, params: ModelParams):
    """Run the network on (P_sparse, L) or (B, P_sparse, L) input; returns (output, cache)."""
    H = np.asarray(H_sparse, dtype=np.float64)
    batched = H.ndim == 3
    if not batched:
        H = H[None]
    if H.shape[1:] != (len(params.sparse_grid), params.channels):
        raise ValueError(
            f"input must be ({len(params.sparse_grid)}, {params.channels}) per sample, got {H.shape[1:]}"
        )
    ops = model_operators(params)
    x = ops.map_in @ H
    fields, coeffs, pre_act = [x], [], []
    for blk in params.blocks:
        a = ops.sht_conv @ x
        y = ops.isht_conv @ conv_layer_forward(a, blk.kernels)
        h = relu(y) if blk.uses_relu else y
        x = h + x if blk.uses_skip else h
        coeffs.append(a)
        pre_act.append(y)
        fields.append(x)
    out = ops.map_out @ x
    cache = ForwardCache(params, fields, coeffs, pre_act, batched)
    return (out if batched else out[0]), cache


def model_backward(cache: ForwardCache, grad_output) -> GradientBundle:
    """Reverse-mode gradients of a scalar loss given dLoss/dOutput."""
    if not isinstance(cache, ForwardCache):
        raise TypeError("model_backward needs the cache returned by model_forward")
    params = cache.params
    ops = model_operators(params)
    g = np.asarray(grad_output, dtype=np.float64)
    if not cache.batched:
        g = g[None]
    if g.shape != cache.fields[-1].shape:
        raise ValueError(f"gradient shape {g.shape} does not match output {cache.fields[-1].shape}")
    g = ops.map_out.T @ g
    grads = []
    for k in (1, 0):
        blk = params.blocks[k]
        g_h = g
        g_y = g_h * relu_grad(cache.pre_act[k]) if blk.uses_relu else g_h
        g_c = ops.isht_conv.T @ g_y
        g_a, g_betas, g_bias = conv_layer_backward(cache.coeffs[k], blk.kernels, g_c)
        g_x = ops.sht_conv.T @ g_a
        g = g_x + g if blk.uses_skip else g_x
        grads.append((g_betas, g_bias))
    tensors = []
    for g_betas, g_bias in reversed(grads):
        tensors.append(g_betas)
        if g_bias is not None:
            tensors.append(g_bias)
    return GradientBundle(params.learnable_names(), tensors)


def loss_and_gradients(params: ModelParams, H_sparse, H_dense, rows=None):
    """Mean per-sample LSD over a batch plus its gradient bundle."""
    out, cache = model_forward(H_sparse, params)
    per_sample, g_out = lsd_loss_and_grad(out, H_dense, rows)
    if not cache.batched:
        g_out = g_out[0]
    return float(per_sample.mean()), per_sample, model_backward(cache, g_out)


# -- checkpoints -------------------------------------------------------------

_HEADER = struct.Struct("<8sI8I6Bd32s32s")


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned little-endian float64 checkpoint: header, learnables, then grid coordinates."""
    b1, b2 = params.block1, params.block2
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        params.n_map_in, params.n_conv, params.n_map_out, params.channels,
        b1.kernels.n_kernels, b2.kernels.n_kernels,
        len(params.sparse_grid), len(params.dense_grid),
        b1.kernels.bias is not None, b2.kernels.bias is not None,
        b1.uses_skip, b2.uses_skip, b1.uses_relu, b2.uses_relu,
        params.cond_threshold,
        bytes.fromhex(params.sparse_grid.digest), bytes.fromhex(params.dense_grid.digest),
    )
    tensors = params.learnable() + [params.sparse_grid.theta, params.sparse_grid.phi,
                                    params.dense_grid.theta, params.dense_grid.phi]
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors)
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(data)} bytes)")
    (magic, version, n_map_in, n_conv, n_map_out, channels, u1, u2, P_s, P_d,
     has_b1, has_b2, skip1, skip2, relu1, relu2, threshold, h_sparse, h_dense) = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    shapes = [(u1, channels, n_conv + 1)]
    if has_b1:
        shapes.append((u1,))
    shapes.append((u2, u1, n_conv + 1))
    if has_b2:
        shapes.append((u2,))
    shapes += [(P_s,), (P_s,), (P_d,), (P_d,)]
    expected = _HEADER.size + 8 * sum(math.prod(s) for s in shapes)
    if len(data) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(data)}")
    offset = _HEADER.size
    tensors = []
    for shape in shapes:
        count = math.prod(shape)
        tensors.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset += 8 * count
    sparse = SphericalGrid(tensors[-4], tensors[-3])
    dense = SphericalGrid(tensors[-2], tensors[-1])
    if sparse.digest != h_sparse.hex() or dense.digest != h_dense.hex():
        raise CheckpointError(f"{path}: grid coordinates do not match the stored grid hashes")
    it = iter(tensors[:-4])
    bank1 = ZonalKernelBank(next(it), next(it) if has_b1 else None)
    bank2 = ZonalKernelBank(next(it), next(it) if has_b2 else None)
    return ModelParams(ConvBlockParams(bank1, bool(skip1), bool(relu1)),
                       ConvBlockParams(bank2, bool(skip2), bool(relu2)),
                       n_map_in, n_map_out, sparse, dense, channels, threshold)
