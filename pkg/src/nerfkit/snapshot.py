"""Binary snapshot of a trained field.

Layout, all little-endian:

    bytes 0..3   magic 'NGPF'
    bytes 4..7   u32 format version (currently 1)
    bytes 8..11  u32 header length in bytes
    header       UTF-8 JSON: grid/mlp configs, scene box, free-form meta,
                 and the ordered manifest of parameter blocks
    payload      the raw float32 blocks, concatenated in manifest order
    trailer      u32 CRC-32 of the payload

Writing is deterministic (sorted JSON keys, no timestamps), so saving the
same parameters twice produces identical bytes. Loading verifies magic,
version, completeness, and checksum, each with its own error type.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .field import FieldParams, HashGridConfig, MlpConfig, NeuralField
from .geometry import Aabb

MAGIC = b"NGPF"
VERSION = 1
_FIXED = struct.Struct("<4sII")


class SnapshotError(ValueError):
    """Base for every snapshot read failure."""


class SnapshotFormatError(SnapshotError):
    """Wrong magic or a malformed header."""


class SnapshotVersionError(SnapshotError):
    """The file's format version is not supported."""


class SnapshotTruncatedError(SnapshotError):
    """The file ends before the declared payload and checksum."""


class SnapshotChecksumError(SnapshotError):
    """Payload bytes do not match the stored CRC-32."""


@dataclass
class Snapshot:
    params: FieldParams
    grid_cfg: HashGridConfig
    mlp_cfg: MlpConfig
    aabb: Aabb
    meta: dict

    @property
    def field(self) -> NeuralField:
        return NeuralField(self.params, self.grid_cfg, self.mlp_cfg, self.aabb)


def save_snapshot(
    path,
    params: FieldParams,
    grid_cfg: HashGridConfig,
    mlp_cfg: MlpConfig,
    aabb: Aabb,
    meta: dict | None = None,
) -> None:
    blocks = []
    chunks = []
    for name, array in params.blocks():
        arr = np.ascontiguousarray(array, dtype="<f4")
        blocks.append({"name": name, "shape": list(arr.shape), "dtype": "<f4"})
        chunks.append(arr.tobytes())
    header = {
        "grid": asdict(grid_cfg),
        "mlp": asdict(mlp_cfg),
        "aabb": {"min": aabb.min.astype(float).tolist(), "max": aabb.max.astype(float).tolist()},
        "meta": meta or {},
        "blocks": blocks,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    with open(Path(path), "wb") as f:
        f.write(_FIXED.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_snapshot(path) -> Snapshot:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _FIXED.size:
        raise SnapshotTruncatedError(f"{path}: {len(blob)} bytes is too short for a header")
    magic, version, header_len = _FIXED.unpack_from(blob)
    if magic != MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise SnapshotVersionError(
            f"{path}: format version {version}, this build reads {VERSION}"
        )
    header_end = _FIXED.size + header_len
    if len(blob) < header_end:
        raise SnapshotTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(blob[_FIXED.size : header_end].decode("utf-8"))
        grid_cfg = HashGridConfig(**header["grid"])
        mlp_cfg = MlpConfig(**header["mlp"])
        aabb = Aabb(
            np.asarray(header["aabb"]["min"], np.float32),
            np.asarray(header["aabb"]["max"], np.float32),
        )
        blocks = header["blocks"]
        meta = header.get("meta", {})
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise SnapshotFormatError(f"{path}: malformed header ({e})") from e

    sizes = []
    for spec in blocks:
        if spec.get("dtype") != "<f4":
            raise SnapshotFormatError(f"{path}: unsupported block dtype {spec.get('dtype')!r}")
        count = 1
        for dim in spec["shape"]:
            count *= dim
        sizes.append(count * 4)
    payload_len = sum(sizes)
    expected_total = header_end + payload_len + 4
    if len(blob) < expected_total:
        raise SnapshotTruncatedError(
            f"{path}: expected {expected_total} bytes, found {len(blob)}"
        )
    if len(blob) > expected_total:
        raise SnapshotFormatError(f"{path}: {len(blob) - expected_total} trailing bytes")

    payload = blob[header_end : header_end + payload_len]
    (stored_crc,) = struct.unpack_from("<I", blob, header_end + payload_len)
    if zlib.crc32(payload) != stored_crc:
        raise SnapshotChecksumError(f"{path}: payload CRC mismatch")

    arrays = {}
    offset = 0
    for spec, nbytes in zip(blocks, sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += nbytes

    def group(prefix: str) -> list[np.ndarray]:
        out = []
        i = 0
        while f"{prefix}{i}" in arrays:
            out.append(arrays.pop(f"{prefix}{i}"))
            i += 1
        return out

    tables = group("table")
    density_w = group("density_w")
    density_b = group("density_b")
    color_w = group("color_w")
    color_b = group("color_b")
    if arrays:
        raise SnapshotFormatError(f"{path}: unrecognized blocks {sorted(arrays)}")
    if len(tables) != grid_cfg.levels:
        raise SnapshotFormatError(
            f"{path}: {len(tables)} tables for a {grid_cfg.levels}-level grid"
        )
    params = FieldParams(tables, density_w, density_b, color_w, color_b)
    return Snapshot(params, grid_cfg, mlp_cfg, aabb, meta)
