"""Binary checkpoint envelope.

Layout: magic "KUTS" (4 bytes), format version u32 LE, entry count u32 LE,
then per entry: name length u16 LE, name bytes (utf-8), rank u8, dims as
u32 LE each, raw float32 LE data. A CRC32 of all preceding bytes closes the
file. Model checkpoints add ``arch.*`` entries so a file alone rebuilds its
network; the optimizer sidecar reuses the same envelope.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CheckpointError
from .model import ArchConfig, SegModel

MAGIC = b"KUTS"
VERSION = 1


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        blob += struct.pack("<H", len(raw_name))
        blob += raw_name
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_entries(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 + 4:
        raise CheckpointError("file too short for header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise CheckpointError(
            f"unsupported format version {version}; supported versions: {VERSION}", offset=4
        )
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(blob) - 4,
        )
    count = struct.unpack_from("<I", blob, 8)[0]
    pos = 12
    end = len(blob) - 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > end:
            raise CheckpointError("truncated entry header", offset=pos)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + name_len + 1 > end:
            raise CheckpointError("truncated entry name", offset=pos)
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = blob[pos]
        pos += 1
        if pos + 4 * rank > end:
            raise CheckpointError(f"truncated dims of '{name}'", offset=pos)
        dims = struct.unpack_from(f"<{rank}I" if rank else "<0I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        nbytes = 4 * n
        if pos + nbytes > end:
            raise CheckpointError(f"truncated data of '{name}'", offset=pos)
        if name in entries:
            raise CheckpointError(f"duplicate entry '{name}'", offset=pos)
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
        entries[name] = arr.astype(np.float32)
        pos += nbytes
    if pos != end:
        raise CheckpointError(f"{end - pos} trailing bytes after last entry", offset=pos)
    return entries


def _encode_arch(arch: ArchConfig) -> dict[str, np.ndarray]:
    f32 = lambda v: np.asarray(v, dtype=np.float32)
    return {
        "arch.rows": f32([arch.rows]),
        "arch.cols": f32([arch.cols]),
        "arch.channels": f32([arch.channels]),
        "arch.classes": f32([arch.classes]),
        "arch.widths": f32(arch.widths),
        "arch.spb_counts": f32(arch.spb_counts),
        "arch.patch": f32([arch.patch]),
        "arch.embed_dim": f32([arch.embed_dim]),
        "arch.heads": f32([arch.heads]),
        "arch.depth": f32([arch.depth]),
        "arch.use_transformer": f32([1.0 if arch.use_transformer else 0.0]),
        "arch.backbone_id": f32(list(arch.backbone_id.encode("utf-8"))),
    }


def _decode_arch(entries: dict[str, np.ndarray]) -> ArchConfig:
    def one(key):
        if key not in entries:
            raise CheckpointError(f"checkpoint is missing '{key}'")
        return int(round(float(entries[key].reshape(-1)[0])))

    return ArchConfig(
        rows=one("arch.rows"),
        cols=one("arch.cols"),
        channels=one("arch.channels"),
        classes=one("arch.classes"),
        widths=tuple(int(round(v)) for v in entries["arch.widths"].reshape(-1)),
        spb_counts=tuple(int(round(v)) for v in entries["arch.spb_counts"].reshape(-1)),
        patch=one("arch.patch"),
        embed_dim=one("arch.embed_dim"),
        heads=one("arch.heads"),
        depth=one("arch.depth"),
        use_transformer=one("arch.use_transformer") != 0,
        backbone_id=bytes(
            int(round(v)) for v in entries["arch.backbone_id"].reshape(-1)
        ).decode("utf-8"),
    )


def save_checkpoint(model: SegModel, path) -> None:
    entries = dict(model.state_arrays())
    entries.update(_encode_arch(model.arch))
    write_entries(path, entries)


def load_checkpoint(path) -> SegModel:
    entries = read_entries(path)
    arch = _decode_arch(entries)
    model = SegModel.create(arch, seed=0)
    state = {k: v for k, v in entries.items() if not k.startswith("arch.")}
    model.load_state(state)
    return model
