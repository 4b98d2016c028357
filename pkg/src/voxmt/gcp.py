"""Global Context Pooling: sparse bottleneck -> dense BEV -> 2D CNN -> sparse.

Height slices are packed z-major into BEV channels: channel ``z * C + c``
holds feature ``c`` of height slice ``z``. BEV rows index y, columns index x.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from voxmt.dense import as_bev, concat_channels, conv1x1, conv2d, upsample2x
from voxmt.errors import ConfigError, InternalError
from voxmt.sparse import SparseTensor
from voxmt.weights import WeightStore


def sparse_to_bev(bottom: SparseTensor) -> np.ndarray:
    """Scatter into a zero ``(C * D, H, W)`` plane using z-major channel packing."""
    w, h, d = bottom.grid_dims
    c = bottom.channels
    coords = bottom.coords
    if len(coords) and (coords.min() < 0 or np.any(coords >= np.asarray([w, h, d]))):
        raise InternalError(f"coordinates outside the {bottom.grid_dims} bottleneck grid")
    bev = np.zeros((d * c, h, w), dtype=np.float64)
    if len(coords):
        chan = coords[:, 2:3] * c + np.arange(c)[None, :]
        bev[chan, coords[:, 1:2], coords[:, 0:1]] = bottom.features
    return bev


def bev_to_sparse(bev: np.ndarray, template: SparseTensor, proj_weight=None, proj_bias=None, out_channels=None) -> SparseTensor:
    """Optionally 1x1-project, unpack heights and gather at the template sites.

    With ``proj_weight=None`` the plane is used as is and ``out_channels``
    defaults to the template width.
    """
    bev = as_bev(bev)
    d = template.grid_dims[2]
    if proj_weight is not None:
        bev = conv1x1(bev, proj_weight, proj_bias)
    if bev.shape[1:] != (template.grid_dims[1], template.grid_dims[0]):
        raise ConfigError(f"BEV plane {bev.shape[1:]} does not match template grid {template.grid_dims[:2][::-1]}")
    total = bev.shape[0]
    if total % d:
        raise ConfigError(f"{total} BEV channels cannot be split over {d} height slices")
    c = total // d
    if out_channels is not None and c != out_channels:
        raise ConfigError(f"projection yields {c} channels per slice, expected {out_channels}")
    coords = template.coords
    if len(coords):
        chan = coords[:, 2:3] * c + np.arange(c)[None, :]
        feats = bev[chan, coords[:, 1:2], coords[:, 0:1]]
    else:
        feats = np.zeros((0, c))
    return SparseTensor(coords, feats, template.grid_dims, template.stride)


@dataclass(frozen=True)
class ExtractorConfig:
    depths: Tuple[int, int] = (6, 6)
    widths: Tuple[int, int] = (128, 256)
    prefix: str = "gcp"


def extractor_layers(in_channels: int, cfg: ExtractorConfig):
    """``(name, c_in, c_out, stride)`` for every 3x3 conv in order."""
    layers = []
    c = in_channels
    for j in range(cfg.depths[0]):
        layers.append((f"{cfg.prefix}.l1.conv{j}", c, cfg.widths[0], 1))
        c = cfg.widths[0]
    for j in range(cfg.depths[1]):
        layers.append((f"{cfg.prefix}.l2.conv{j}", c, cfg.widths[1], 2 if j == 0 else 1))
        c = cfg.widths[1]
    return layers


def bev_extractor(x: np.ndarray, weights: WeightStore, cfg: ExtractorConfig = ExtractorConfig()) -> np.ndarray:
    """Two-level conv+ReLU stack; output is ``concat(level1, upsample2x(level2))``.

    Level 2 starts from the level-1 output with a stride-2 conv. A level-2
    depth of zero disables the second level.
    """
    x = as_bev(x)
    _, h, w = x.shape
    level1 = None
    level2 = None
    cur = x
    for name, c_in, c_out, stride in extractor_layers(x.shape[0], cfg):
        wt = weights.get64(f"{name}.weight", (c_out, c_in, 3, 3))
        bias = weights.get64(f"{name}.bias", (c_out,))
        cur = conv2d(cur, wt, bias, stride=stride, relu=True)
        if name.startswith(f"{cfg.prefix}.l1."):
            level1 = cur
        else:
            level2 = cur
    if level2 is None:
        return level1
    up = upsample2x(level2)[:, :h, :w]
    return concat_channels(level1, up)


def global_context_pooling(
    bottom: SparseTensor,
    weights: WeightStore,
    cfg: ExtractorConfig = ExtractorConfig(),
    out_channels: int = 256,
    identity: bool = False,
):
    """Returns ``(sparse features for the decoder, BEV map for the heads)``.

    ``identity=True`` skips the extractor and the projection; the decoder then
    receives the bottleneck features unchanged.
    """
    bev_in = sparse_to_bev(bottom)
    if identity:
        return bev_to_sparse(bev_in, bottom), bev_in
    bev_out = bev_extractor(bev_in, weights, cfg)
    d = bottom.grid_dims[2]
    proj_w = weights.get64(f"{cfg.prefix}.proj.weight", (out_channels * d, bev_out.shape[0], 1, 1))
    proj_b = weights.get64(f"{cfg.prefix}.proj.bias", (out_channels * d,))
    return bev_to_sparse(bev_out, bottom, proj_w, proj_b, out_channels), bev_out
