"""Binary point-cloud, label and panoptic files plus the CSV box format.

All binary formats are little-endian and start with an 8-byte magic:

* PCB1 ``VOXMTPC1``: u32 N, then N records of 5 f32 ``(x, y, z, intensity, dt)``
* LBL1 ``VOXMTLB1``: u32 N, N x u32 semantic class, N x u32 instance id (0 = none)
* PAN1 ``VOXMTPN1``: u32 N, N x u32 semantic class, N x u32 instance id

BOX1 is text, one box per line: ``cx,cy,cz,l,w,h,yaw,class,score``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from voxmt.errors import InputError
from voxmt.heads import Box3D
from voxmt.voxelizer import PointCloud

PCB_MAGIC = b"VOXMTPC1"
LBL_MAGIC = b"VOXMTLB1"
PAN_MAGIC = b"VOXMTPN1"


def _header(blob: bytes, magic: bytes, kind: str) -> int:
    if len(blob) < 12 or blob[:8] != magic:
        raise InputError(f"not a {kind} file (bad magic)")
    (n,) = struct.unpack_from("<I", blob, 8)
    return n


def encode_pointcloud(cloud: PointCloud) -> bytes:
    return PCB_MAGIC + struct.pack("<I", len(cloud)) + cloud.data.astype("<f4").tobytes()


def decode_pointcloud(blob: bytes) -> PointCloud:
    n = _header(blob, PCB_MAGIC, "PCB1")
    if len(blob) != 12 + 20 * n:
        raise InputError(f"PCB1 size mismatch: header says {n} points, payload has {len(blob) - 12} bytes")
    data = np.frombuffer(blob, dtype="<f4", count=5 * n, offset=12).reshape(n, 5)
    return PointCloud(data.astype(np.float64))


def _encode_pair(magic: bytes, semantic, instance) -> bytes:
    semantic = np.asarray(semantic, dtype=np.int64).reshape(-1)
    instance = np.asarray(instance, dtype=np.int64).reshape(-1)
    if semantic.shape != instance.shape:
        raise InputError(f"semantic ({len(semantic)}) and instance ({len(instance)}) lengths differ")
    if len(semantic) and (semantic.min() < 0 or instance.min() < 0):
        raise InputError("labels must be non-negative")
    return magic + struct.pack("<I", len(semantic)) + semantic.astype("<u4").tobytes() + instance.astype("<u4").tobytes()


def _decode_pair(blob: bytes, magic: bytes, kind: str) -> Tuple[np.ndarray, np.ndarray]:
    n = _header(blob, magic, kind)
    if len(blob) != 12 + 8 * n:
        raise InputError(f"{kind} size mismatch: header says {n} points, payload has {len(blob) - 12} bytes")
    sem = np.frombuffer(blob, dtype="<u4", count=n, offset=12).astype(np.int64)
    inst = np.frombuffer(blob, dtype="<u4", count=n, offset=12 + 4 * n).astype(np.int64)
    return sem, inst


def encode_labels(semantic, instance) -> bytes:
    return _encode_pair(LBL_MAGIC, semantic, instance)


def decode_labels(blob: bytes) -> Tuple[np.ndarray, np.ndarray]:
    return _decode_pair(blob, LBL_MAGIC, "LBL1")


def encode_panoptic(semantic, instance) -> bytes:
    return _encode_pair(PAN_MAGIC, semantic, instance)


def decode_panoptic(blob: bytes) -> Tuple[np.ndarray, np.ndarray]:
    return _decode_pair(blob, PAN_MAGIC, "PAN1")


def format_boxes(boxes: Sequence[Box3D]) -> str:
    lines = []
    for b in boxes:
        vals = [*b.center, *b.dims, b.yaw]
        lines.append(",".join(format(float(v), ".17g") for v in vals) + f",{b.class_id}," + format(b.score, ".17g"))
    return "".join(line + "\n" for line in lines)


def parse_boxes(text: str) -> List[Box3D]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise InputError(f"box line {lineno}: expected 9 fields, got {len(parts)}")
        try:
            v = [float(p) for p in parts[:7]]
            cls = int(parts[7])
            score = float(parts[8])
        except ValueError as exc:
            raise InputError(f"box line {lineno}: {exc}") from None
        boxes.append(Box3D(tuple(v[:3]), tuple(v[3:6]), v[6], cls, score))
    return boxes


def read_pointcloud(path) -> PointCloud:
    return decode_pointcloud(Path(path).read_bytes())


def write_pointcloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_pointcloud(cloud))


def read_labels(path):
    return decode_labels(Path(path).read_bytes())


def write_labels(path, semantic, instance) -> None:
    Path(path).write_bytes(encode_labels(semantic, instance))


def read_panoptic(path):
    return decode_panoptic(Path(path).read_bytes())


def write_panoptic(path, semantic, instance) -> None:
    Path(path).write_bytes(encode_panoptic(semantic, instance))


def read_boxes(path) -> List[Box3D]:
    return parse_boxes(Path(path).read_text(encoding="utf-8"))


def write_boxes(path, boxes: Sequence[Box3D]) -> None:
    Path(path).write_text(format_boxes(boxes), encoding="utf-8")
