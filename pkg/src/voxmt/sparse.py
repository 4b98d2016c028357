"""Hash-indexed sparse voxel tensors and rulebook-driven sparse 3D convolution.

Coordinates are stored as ``(ix, iy, iz)`` rows. Every coordinate set produced
here is ordered by its linear key ``((iz * H) + iy) * W + ix``, which is the
lexicographic ``(iz, iy, ix)`` order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from voxmt.errors import ConfigError, InternalError

ALLOWED_STRIDES = (1, 2, 4, 8)

Dims = Tuple[int, int, int]


class ConvMode(enum.Enum):
    SUBMANIFOLD = "submanifold"
    STRIDED = "strided"
    INVERSE = "inverse"


def coord_keys(coords: np.ndarray, grid_dims: Sequence[int]) -> np.ndarray:
    """Linear int64 keys of ``(ix, iy, iz)`` coordinates on a ``(W, H, D)`` grid."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    w, h, _ = (int(v) for v in grid_dims)
    return (coords[:, 2] * h + coords[:, 1]) * w + coords[:, 0]


class CoordIndex:
    """Key -> row lookup over a fixed coordinate set.

    Lookups are binary searches over the sorted key array, so the result only
    depends on the key set and never on insertion history.
    """

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys, dtype=np.int64)
        self._order = np.argsort(keys, kind="stable")
        self._sorted = keys[self._order]

    def __len__(self) -> int:
        return len(self._sorted)

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row index of every queried key, ``-1`` where absent."""
        query = np.asarray(query, dtype=np.int64)
        if len(self._sorted) == 0:
            return np.full(query.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted, query)
        pos = np.minimum(pos, len(self._sorted) - 1)
        hit = self._sorted[pos] == query
        return np.where(hit, self._order[pos], -1)


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Active voxel coordinates with one feature row per coordinate."""

    coords: np.ndarray
    features: np.ndarray
    grid_dims: Dims
    stride: int = 1

    def __post_init__(self):
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int64).reshape(-1, 3))
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise InternalError(
                f"features shape {features.shape} not aligned with {coords.shape[0]} coordinates"
            )
        dims = tuple(int(v) for v in self.grid_dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise InternalError(f"invalid grid_dims {self.grid_dims}")
        if self.stride not in ALLOWED_STRIDES:
            raise InternalError(f"stride {self.stride} not in {ALLOWED_STRIDES}")
        if len(coords):
            if coords.min() < 0 or np.any(coords >= np.asarray(dims)):
                raise InternalError(f"coordinates outside grid {dims}")
            if len(np.unique(coord_keys(coords, dims))) != len(coords):
                raise InternalError("duplicate coordinates in sparse tensor")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "grid_dims", dims)

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def keys(self) -> np.ndarray:
        return coord_keys(self.coords, self.grid_dims)

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.grid_dims, self.stride)

    def dense(self) -> np.ndarray:
        """Scatter into a zero-filled ``(C, D, H, W)`` volume."""
        w, h, d = self.grid_dims
        vol = np.zeros((self.channels, d, h, w), dtype=np.float64)
        c = self.coords
        vol[:, c[:, 2], c[:, 1], c[:, 0]] = self.features.T
        return vol

    @classmethod
    def from_dense(cls, volume: np.ndarray, stride: int = 1) -> "SparseTensor":
        """Active sites are the cells where any channel is nonzero."""
        volume = np.asarray(volume, dtype=np.float64)
        _, d, h, w = volume.shape
        iz, iy, ix = np.nonzero(np.any(volume != 0, axis=0))
        coords = np.stack([ix, iy, iz], axis=1)
        feats = volume[:, iz, iy, ix].T
        return cls(coords, feats, (w, h, d), stride)


def sorted_by_key(coords: np.ndarray, grid_dims: Sequence[int]) -> np.ndarray:
    return coords[np.argsort(coord_keys(coords, grid_dims), kind="stable")]


def kernel_offsets(kernel: Sequence[int]) -> np.ndarray:
    """Kernel offsets ``(dx, dy, dz)`` enumerated z-major, then y, then x."""
    kx, ky, kz = (int(k) for k in kernel)
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    dz, dy, dx = np.meshgrid(
        np.arange(-rz, rz + 1), np.arange(-ry, ry + 1), np.arange(-rx, rx + 1), indexing="ij"
    )
    return np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1).astype(np.int64)


def _check_kernel(kernel: Sequence[int]) -> Tuple[int, int, int]:
    kernel = tuple(int(k) for k in kernel)
    if len(kernel) != 3 or any(k <= 0 or k % 2 == 0 for k in kernel):
        raise ConfigError(f"kernel must be three odd positive sizes, got {kernel}")
    return kernel


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """One sparse convolution layer. ``weights`` has shape ``(kernel volume, C_in, C_out)``."""

    kernel: Tuple[int, int, int]
    stride: int
    in_channels: int
    out_channels: int
    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    mode: ConvMode = ConvMode.SUBMANIFOLD

    def __post_init__(self):
        kernel = _check_kernel(self.kernel)
        object.__setattr__(self, "kernel", kernel)
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.mode is ConvMode.SUBMANIFOLD and self.stride != 1:
            raise ConfigError("submanifold convolution requires stride 1")
        kvol = kernel[0] * kernel[1] * kernel[2]
        weights = np.asarray(self.weights, dtype=np.float64)
        expected = (kvol, self.in_channels, self.out_channels)
        if weights.shape != expected:
            raise ConfigError(f"weight shape {weights.shape} != expected {expected}")
        object.__setattr__(self, "weights", weights)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if bias.shape != (self.out_channels,):
                raise ConfigError(f"bias shape {bias.shape} != ({self.out_channels},)")
            object.__setattr__(self, "bias", bias)

    @classmethod
    def make(cls, weights, bias=None, *, kernel=(3, 3, 3), stride=1, mode=ConvMode.SUBMANIFOLD):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 3:
            raise ConfigError(f"sparse conv weights must be rank 3, got shape {weights.shape}")
        return cls(tuple(kernel), stride, weights.shape[1], weights.shape[2], weights, bias, mode)


@dataclass(frozen=True, eq=False)
class Rulebook:
    """Per-offset ``(input_row, output_row)`` pairs plus both coordinate sets.

    The input side is kept so that an inverse convolution can restore the
    exact pre-downsampling sparsity.
    """

    in_rows: Tuple[np.ndarray, ...]
    out_rows: Tuple[np.ndarray, ...]
    input_coords: np.ndarray
    input_dims: Dims
    output_coords: np.ndarray
    output_dims: Dims
    kernel: Tuple[int, int, int]
    stride: int
    mode: ConvMode

    @property
    def num_pairs(self) -> int:
        return int(sum(len(r) for r in self.in_rows))

    def pairs(self):
        """All ``(offset, input_row, output_row)`` triples in enumeration order."""
        out = []
        for k, (i_rows, o_rows) in enumerate(zip(self.in_rows, self.out_rows)):
            out.extend((k, int(i), int(o)) for i, o in zip(i_rows, o_rows))
        return out


def build_rulebook(inp: SparseTensor, spec: ConvSpec) -> Rulebook:
    """Enumerate gather/scatter pairs for ``spec`` applied to ``inp``.

    An input row ``i`` feeds output ``o`` through offset ``d`` when
    ``coords[i] == stride * o + d``. Submanifold mode keeps only outputs that
    are already active; the other modes activate every output touched.
    """
    if spec.mode is ConvMode.INVERSE:
        raise ConfigError("inverse convolution reuses a saved rulebook; nothing to build")
    kernel = _check_kernel(spec.kernel)
    offsets = kernel_offsets(kernel)
    s = spec.stride
    in_dims = np.asarray(inp.grid_dims, dtype=np.int64)
    coords = inp.coords

    if spec.mode is ConvMode.SUBMANIFOLD:
        out_dims = in_dims
        out_coords = coords
    else:
        out_dims = -(-in_dims // s)
        cands = []
        for d in offsets:
            shifted = coords - d
            ok = np.all(shifted % s == 0, axis=1) & np.all(shifted >= 0, axis=1)
            o = shifted[ok] // s
            o = o[np.all(o < out_dims, axis=1)]
            cands.append(o)
        allc = np.concatenate(cands) if cands else np.zeros((0, 3), dtype=np.int64)
        keys = np.unique(coord_keys(allc, out_dims))
        w, h, _ = out_dims
        out_coords = np.stack([keys % w, (keys // w) % h, keys // (w * h)], axis=1).astype(np.int64)
        out_coords = out_coords.reshape(-1, 3)

    index = CoordIndex(coord_keys(out_coords, out_dims))
    in_rows, out_rows = [], []
    all_rows = np.arange(len(coords), dtype=np.int64)
    for d in offsets:
        shifted = coords - d
        ok = np.all(shifted % s == 0, axis=1) & np.all(shifted >= 0, axis=1)
        o = shifted // s
        ok &= np.all(o < out_dims, axis=1)
        rows = np.full(len(coords), -1, dtype=np.int64)
        if ok.any():
            rows[ok] = index.lookup(coord_keys(o[ok], out_dims))
        keep = rows >= 0
        in_rows.append(all_rows[keep])
        out_rows.append(rows[keep])

    return Rulebook(
        in_rows=tuple(in_rows),
        out_rows=tuple(out_rows),
        input_coords=coords,
        input_dims=tuple(int(v) for v in in_dims),
        output_coords=out_coords,
        output_dims=tuple(int(v) for v in out_dims),
        kernel=kernel,
        stride=s,
        mode=spec.mode,
    )


def _check_channels(inp: SparseTensor, spec: ConvSpec):
    if inp.channels != spec.in_channels:
        raise ConfigError(f"input has {inp.channels} channels, layer expects {spec.in_channels}")


def sparse_conv(inp: SparseTensor, spec: ConvSpec, rb: Rulebook) -> SparseTensor:
    """Gather, multiply by the per-offset weight slice, scatter-add.

    Offsets are applied in enumeration order and each offset touches every
    output row at most once, so the accumulation order per row is fixed.
    """
    _check_channels(inp, spec)
    if rb.input_coords.shape[0] != inp.num_active or not np.array_equal(rb.input_coords, inp.coords):
        raise InternalError("rulebook was not built for this input")
    m_out = rb.output_coords.shape[0]
    out = np.zeros((m_out, spec.out_channels), dtype=np.float64)
    if spec.bias is not None and m_out:
        out += spec.bias
    feats = inp.features
    for k, (i_rows, o_rows) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if len(i_rows):
            out[o_rows] += feats[i_rows] @ spec.weights[k]
    return SparseTensor(rb.output_coords, out, rb.output_dims, inp.stride * rb.stride)


def inverse_conv(inp: SparseTensor, spec: ConvSpec, saved_rb: Rulebook) -> SparseTensor:
    """Transpose of a recorded strided layer: scatter back onto its input sites."""
    _check_channels(inp, spec)
    if spec.kernel != saved_rb.kernel:
        raise ConfigError(f"kernel {spec.kernel} does not match saved rulebook {saved_rb.kernel}")
    if not np.array_equal(saved_rb.output_coords, inp.coords):
        raise InternalError("saved rulebook output sites do not match the inverse-conv input")
    if inp.stride % saved_rb.stride:
        raise InternalError(f"cannot undo stride {saved_rb.stride} from stride {inp.stride}")
    m_out = saved_rb.input_coords.shape[0]
    out = np.zeros((m_out, spec.out_channels), dtype=np.float64)
    if spec.bias is not None and m_out:
        out += spec.bias
    feats = inp.features
    for k, (i_rows, o_rows) in enumerate(zip(saved_rb.in_rows, saved_rb.out_rows)):
        if len(i_rows):
            out[i_rows] += feats[o_rows] @ spec.weights[k]
    return SparseTensor(
        saved_rb.input_coords, out, saved_rb.input_dims, inp.stride // saved_rb.stride
    )


def concat_skip(decoder: SparseTensor, encoder: SparseTensor) -> SparseTensor:
    """Channel-wise concatenation ``[decoder | encoder]`` over identical sites."""
    if decoder.stride != encoder.stride:
        raise InternalError(f"stride mismatch: decoder {decoder.stride}, encoder {encoder.stride}")
    if decoder.coords.shape != encoder.coords.shape:
        raise InternalError(
            f"active-site count mismatch: decoder {decoder.num_active}, encoder {encoder.num_active}"
        )
    diff = np.flatnonzero(np.any(decoder.coords != encoder.coords, axis=1))
    if len(diff):
        r = int(diff[0])
        raise InternalError(
            f"coordinate mismatch at row {r}: decoder {tuple(decoder.coords[r])}, "
            f"encoder {tuple(encoder.coords[r])}"
        )
    feats = np.concatenate([decoder.features, encoder.features], axis=1)
    return SparseTensor(decoder.coords, feats, decoder.grid_dims, decoder.stride)


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_features(np.maximum(x.features, 0.0))
