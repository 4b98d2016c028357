"""Dense 2D feature-map operations and the dense 3D convolution oracle.

Dense BEV maps are plain ``(C, H, W)`` float arrays. 2D weights use the
``(C_out, C_in, kh, kw)`` layout. All convolutions are cross-correlations
with zero padding of ``k // 2``.
"""

from __future__ import annotations

import numpy as np

from voxmt.errors import ConfigError, InputError


def as_bev(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) <= 0:
        raise InputError(f"dense BEV map must be (C, H, W) with positive sizes, got {x.shape}")
    return x


def conv2d(x, weights, bias=None, stride: int = 1, relu: bool = False) -> np.ndarray:
    x = as_bev(x)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 4:
        raise ConfigError(f"conv2d weights must be rank 4, got shape {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if c_in != x.shape[0]:
        raise ConfigError(f"conv2d expects {c_in} input channels, got {x.shape[0]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel must be odd, got {kh}x{kw}")
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            patch = padded[:, dy : dy + stride * (h_out - 1) + 1 : stride, dx : dx + stride * (w_out - 1) + 1 : stride]
            out += np.tensordot(weights[:, :, dy, dx], patch, axes=(1, 0))
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape != (c_out,):
            raise ConfigError(f"conv2d bias shape {bias.shape} != ({c_out},)")
        out += bias[:, None, None]
    if relu:
        np.maximum(out, 0.0, out=out)
    return out


def conv1x1(x, weights, bias=None) -> np.ndarray:
    """Per-pixel linear projection. Accepts ``(C_out, C_in)`` or ``(C_out, C_in, 1, 1)`` weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 2:
        weights = weights[:, :, None, None]
    if weights.shape[2:] != (1, 1):
        raise ConfigError(f"1x1 projection expects a 1x1 kernel, got shape {weights.shape}")
    return conv2d(x, weights, bias)


def upsample2x(x) -> np.ndarray:
    """Nearest-neighbour upsampling doubling H and W."""
    x = as_bev(x)
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def concat_channels(*maps) -> np.ndarray:
    maps = [as_bev(m) for m in maps]
    shapes = {m.shape[1:] for m in maps}
    if len(shapes) != 1:
        raise InputError(f"cannot concatenate maps with spatial shapes {sorted(shapes)}")
    return np.concatenate(maps, axis=0)


def dense_conv3d_oracle(volume, weights, kernel=(3, 3, 3), stride: int = 1) -> np.ndarray:
    """Reference dense 3D cross-correlation used to check the sparse engine.

    ``volume`` is ``(C_in, D, H, W)``; ``weights`` follow the sparse layout
    ``(kernel volume, C_in, C_out)`` with offsets enumerated z-major, then y,
    then x. Zero bias, zero padding ``k // 2``, output size ``ceil(n / stride)``.
    Kept deliberately naive: a plain loop over kernel taps with shifted
    slices of a zero-padded copy, no index structures shared with the
    sparse path.
    """
    volume = np.asarray(volume, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    kx, ky, kz = (int(k) for k in kernel)
    c_in, d, h, w = volume.shape
    if weights.shape[:2] != (kx * ky * kz, c_in):
        raise ConfigError(f"oracle weights {weights.shape} incompatible with kernel {kernel} and {c_in} channels")
    c_out = weights.shape[2]
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    od, oh, ow = (d - 1) // stride + 1, (h - 1) // stride + 1, (w - 1) // stride + 1
    padded = np.pad(volume, ((0, 0), (rz, rz), (ry, ry), (rx, rx)))
    out = np.zeros((c_out, od, oh, ow), dtype=np.float64)
    k = 0
    for tz in range(kz):
        for ty in range(ky):
            for tx in range(kx):
                tap = padded[
                    :,
                    tz : tz + stride * (od - 1) + 1 : stride,
                    ty : ty + stride * (oh - 1) + 1 : stride,
                    tx : tx + stride * (ow - 1) + 1 : stride,
                ]
                for ci in range(c_in):
                    for co in range(c_out):
                        out[co] += tap[ci] * weights[k, ci, co]
                k += 1
    return out
