"""Sparse 3D U-Net: submanifold encoder stages, strided entries, mirrored decoder.

Weight naming (all sparse kernels are 3x3x3, layout ``(27, C_in, C_out)``):

* ``enc.s{s}.conv{j}``: encoder stage ``s`` (1-based), layer ``j``. ``conv0``
  of stages 2+ is a stride-2 standard conv; everything else is submanifold.
* ``dec.s{j}.lateral``: submanifold conv over ``[decoder | encoder skip]``.
* ``dec.s{j}.up``: inverse conv reusing the rulebook of the matching
  encoder entry, for every decoder stage but the last.

Each name has ``.weight`` and ``.bias`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from voxmt.errors import ConfigError
from voxmt.sparse import (
    ConvMode,
    ConvSpec,
    Rulebook,
    SparseTensor,
    build_rulebook,
    concat_skip,
    inverse_conv,
    relu,
    sparse_conv,
)
from voxmt.weights import WeightStore

KERNEL = (3, 3, 3)
KVOL = 27


@dataclass(frozen=True)
class UNetArch:
    in_channels: int
    encoder_depth: Tuple[int, ...] = (2, 3, 3, 3)
    encoder_width: Tuple[int, ...] = (32, 64, 128, 256)
    decoder_width: Tuple[int, ...] = (128, 64, 32, 32)
    bridge_width: Optional[int] = None

    @property
    def stages(self) -> int:
        return len(self.encoder_width)

    def layers(self) -> List[Tuple[str, int, int]]:
        """``(name, c_in, c_out)`` for every sparse conv in execution order."""
        out = []
        c = self.in_channels
        for s, (depth, width) in enumerate(zip(self.encoder_depth, self.encoder_width), 1):
            for j in range(depth):
                out.append((f"enc.s{s}.conv{j}", c, width))
                c = width
        c = self.bridge_width if self.bridge_width is not None else self.encoder_width[-1]
        for j, width in enumerate(self.decoder_width, 1):
            skip = self.encoder_width[self.stages - j]
            out.append((f"dec.s{j}.lateral", c + skip, width))
            c = width
            if j < self.stages:
                out.append((f"dec.s{j}.up", c, c))
        return out


@dataclass
class UNetOutput:
    decoder_out: SparseTensor
    encoder_bottom: SparseTensor
    rulebooks: Dict[str, Rulebook] = field(default_factory=dict)
    bridge_out: Optional[SparseTensor] = None
    encoder_stages: List[SparseTensor] = field(default_factory=list)


def _spec(weights: WeightStore, name: str, c_in: int, c_out: int, mode: ConvMode, stride: int = 1) -> ConvSpec:
    w = weights.get64(f"{name}.weight", (KVOL, c_in, c_out))
    b = weights.get64(f"{name}.bias", (c_out,))
    return ConvSpec(KERNEL, stride, c_in, c_out, w, b, mode)


def run_unet(
    x: SparseTensor,
    arch: UNetArch,
    weights: WeightStore,
    bridge: Optional[Callable[[SparseTensor], SparseTensor]] = None,
) -> UNetOutput:
    """Run encoder, bridge and decoder. ReLU follows every convolution.

    ``bridge`` maps the bottom encoder tensor to the first decoder input (the
    GCP module in the full pipeline); by default the bottom tensor is passed
    through. Submanifold rulebooks are built once per scale and shared by
    the encoder and decoder layers at that scale.
    """
    if x.channels != arch.in_channels:
        raise ConfigError(f"U-Net expects {arch.in_channels} input channels, got {x.channels}")
    rulebooks: Dict[str, Rulebook] = {}
    subm_rb: Dict[int, Rulebook] = {}
    skips: List[SparseTensor] = []

    def subm(t: SparseTensor, name: str, c_in: int, c_out: int) -> SparseTensor:
        spec = _spec(weights, name, c_in, c_out, ConvMode.SUBMANIFOLD)
        if t.stride not in subm_rb:
            subm_rb[t.stride] = build_rulebook(t, spec)
            rulebooks[f"subm.stride{t.stride}"] = subm_rb[t.stride]
        return relu(sparse_conv(t, spec, subm_rb[t.stride]))

    cur = x
    c = arch.in_channels
    for s, (depth, width) in enumerate(zip(arch.encoder_depth, arch.encoder_width), 1):
        for j in range(depth):
            name = f"enc.s{s}.conv{j}"
            if j == 0 and s > 1:
                spec = _spec(weights, name, c, width, ConvMode.STRIDED, stride=2)
                rb = build_rulebook(cur, spec)
                rulebooks[name] = rb
                cur = relu(sparse_conv(cur, spec, rb))
            else:
                cur = subm(cur, name, c, width)
            c = width
        skips.append(cur)

    bottom = cur
    bridged = bridge(bottom) if bridge is not None else bottom
    cur = bridged
    c = cur.channels
    n = arch.stages
    for j, width in enumerate(arch.decoder_width, 1):
        skip = skips[n - j]
        cur = concat_skip(cur, skip)
        cur = subm(cur, f"dec.s{j}.lateral", c + skip.channels, width)
        c = width
        if j < n:
            enc_entry = f"enc.s{n - j + 1}.conv0"
            spec = _spec(weights, f"dec.s{j}.up", c, c, ConvMode.INVERSE, stride=2)
            cur = relu(inverse_conv(cur, spec, rulebooks[enc_entry]))
    return UNetOutput(cur, bottom, rulebooks, bridged, skips)
