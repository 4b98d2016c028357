"""Full weight layout of the network for a given config, and seeded initialization.

Names and shapes::

    vfe.weight                (11, vfe_features)            vfe.bias
    enc.s{s}.conv{j}.weight   (27, C_in, C_out)             see voxmt.unet
    dec.s{j}.lateral.weight   (27, C_in, C_out)
    dec.s{j}.up.weight        (27, C, C)
    gcp.l{1,2}.conv{j}.weight (C_out, C_in, 3, 3)           full GCP mode only
    gcp.proj.weight           (C'' * D/8, C_bev, 1, 1)      full GCP mode only
    head.seg.weight           (C_dec, K)
    head.bev_seg.weight       (K, C_bev, 1, 1)
    head.det.hm.weight        (K_thing, C_bev, 1, 1)
    head.det.reg.weight       (8, C_bev, 1, 1)
    head.det.iou.weight       (1, C_bev, 1, 1)
    stage2.point.weight       (3 + C_dec, hidden)
    stage2.mask.weight        (hidden, 1)
    stage2.box.weight         (hidden + C_bev, K_thing + 1)
    loss.log_var              (3,)  log sigma^2 for SEG, DET, BEV

Every ``.weight`` has a matching ``.bias`` of its output width.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, NamedTuple, Tuple

import numpy as np

from voxmt.config import PipelineConfig
from voxmt.errors import ConfigError
from voxmt.gcp import ExtractorConfig, extractor_layers
from voxmt.heads import REG_CHANNELS
from voxmt.unet import KVOL, UNetArch
from voxmt.voxelizer import NUM_POINT_FEATURES
from voxmt.weights import WeightStore


class TensorSpec(NamedTuple):
    shape: Tuple[int, ...]
    fan_in: int
    fan_out: int
    zero_init: bool = False


def unet_arch(cfg: PipelineConfig) -> UNetArch:
    return UNetArch(cfg.vfe_features, cfg.encoder_depth, cfg.encoder_width, cfg.decoder_width, cfg.bridge_width)


def extractor_config(cfg: PipelineConfig) -> ExtractorConfig:
    return ExtractorConfig(tuple(cfg.gcp_depth), tuple(cfg.gcp_width))


def weight_layout(cfg: PipelineConfig) -> "OrderedDict[str, TensorSpec]":
    specs: "OrderedDict[str, TensorSpec]" = OrderedDict()

    def linear(name, c_in, c_out):
        specs[f"{name}.weight"] = TensorSpec((c_in, c_out), c_in, c_out)
        specs[f"{name}.bias"] = TensorSpec((c_out,), c_in, c_out, True)

    def conv2d(name, c_in, c_out, k):
        specs[f"{name}.weight"] = TensorSpec((c_out, c_in, k, k), c_in * k * k, c_out * k * k)
        specs[f"{name}.bias"] = TensorSpec((c_out,), c_in, c_out, True)

    linear("vfe", NUM_POINT_FEATURES, cfg.vfe_features)
    for name, c_in, c_out in unet_arch(cfg).layers():
        specs[f"{name}.weight"] = TensorSpec((KVOL, c_in, c_out), KVOL * c_in, KVOL * c_out)
        specs[f"{name}.bias"] = TensorSpec((c_out,), c_in, c_out, True)
    c_bev = cfg.bev_channels_out
    if cfg.gcp_mode == "full":
        for name, c_in, c_out, _ in extractor_layers(cfg.bev_channels_in, extractor_config(cfg)):
            conv2d(name, c_in, c_out, 3)
        conv2d("gcp.proj", c_bev, cfg.gcp_out_width * cfg.bottom_dims[2], 1)
    k = cfg.num_classes
    linear("head.seg", cfg.decoder_width[-1], k)
    conv2d("head.bev_seg", c_bev, k, 1)
    conv2d("head.det.hm", c_bev, cfg.num_thing, 1)
    conv2d("head.det.reg", c_bev, REG_CHANNELS, 1)
    conv2d("head.det.iou", c_bev, 1, 1)
    linear("stage2.point", 3 + cfg.decoder_width[-1], cfg.stage2_hidden)
    linear("stage2.mask", cfg.stage2_hidden, 1)
    linear("stage2.box", cfg.stage2_hidden + c_bev, cfg.num_thing + 1)
    specs["loss.log_var"] = TensorSpec((3,), 1, 1, True)
    return specs


def init_weights(cfg: PipelineConfig, seed: int = 0) -> WeightStore:
    """Uniform ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``; biases and log-variances zero."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for name, spec in weight_layout(cfg).items():
        if spec.zero_init:
            store[name] = np.zeros(spec.shape, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
            store[name] = rng.uniform(-bound, bound, size=spec.shape).astype(np.float32)
    return store


def check_weights(store: WeightStore, cfg: PipelineConfig) -> None:
    """Raise ``ConfigError`` naming the first missing or mis-shaped tensor."""
    for name, spec in weight_layout(cfg).items():
        if name not in store:
            raise ConfigError(f"missing weight tensor {name!r}")
        if store[name].shape != spec.shape:
            raise ConfigError(f"weight {name!r} has shape {store[name].shape}, expected {spec.shape}")
