"""Versioned binary container for checkpoints.

Layout (all integers little-endian):

    magic   8 bytes  b"SPLMCKPT"
    version u32
    then repeated sections:
        u16 name length, name (UTF-8), u64 payload length, payload

Section payload encodings:
    tensor map   repeated [u16 path len][path][u8 dtype 0=f32/1=f64]
                 [u8 ndim][u32 extents...][raw little-endian floats]
    bitset map   repeated [u16 path len][path][u8 ndim][u32 extents...]
                 [bits packed little-endian, one per element]
    json         UTF-8 JSON, sorted keys (byte-stable)
    u64          one unsigned 64-bit integer
    dataset      [u32 msl][u64 rows][row-major '<u4' ids][' <u8' offsets]
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"SPLMCKPT"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: "<f4", 1: "<f8"}


def save_container(path, sections: dict[str, bytes]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, payload in sections.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_container(path) -> dict[str, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported container version {version}")
    sections, off = {}, 12
    while off < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (payload_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        sections[name] = blob[off:off + payload_len]
        off += payload_len
    return sections


def _pack_header(path: str, arr: np.ndarray, with_dtype: bool) -> bytes:
    encoded = path.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded]
    if with_dtype:
        parts.append(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
    parts.append(struct.pack("<B", arr.ndim))
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    return b"".join(parts)


def encode_tensor_map(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for path, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ContractError(f"{path}: dtype {arr.dtype} is not checkpointable")
        code = _DTYPE_CODES[arr.dtype]
        chunks.append(_pack_header(path, arr, with_dtype=True))
        chunks.append(arr.astype(_CODE_DTYPES[code], copy=False).tobytes())
    return b"".join(chunks)


def decode_tensor_map(buf: bytes) -> dict[str, np.ndarray]:
    out, off = {}, 0
    while off < len(buf):
        (path_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        path = buf[off:off + path_len].decode("utf-8")
        off += path_len
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dtype = np.dtype(_CODE_DTYPES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        out[path] = np.frombuffer(buf[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    return out


def encode_bitset_map(masks: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for path, mask in masks.items():
        mask = np.ascontiguousarray(mask)
        chunks.append(_pack_header(path, mask, with_dtype=False))
        bits = np.packbits((mask != 0).reshape(-1).astype(np.uint8), bitorder="little")
        chunks.append(bits.tobytes())
    return b"".join(chunks)


def decode_bitset_map(buf: bytes, dtype=np.float32) -> dict[str, np.ndarray]:
    out, off = {}, 0
    while off < len(buf):
        (path_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        path = buf[off:off + path_len].decode("utf-8")
        off += path_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        nbytes = (size + 7) // 8
        bits = np.frombuffer(buf[off:off + nbytes], dtype=np.uint8)
        off += nbytes
        flat = np.unpackbits(bits, bitorder="little")[:size]
        out[path] = flat.reshape(shape).astype(dtype)
    return out


def encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_json(buf: bytes):
    return json.loads(buf.decode("utf-8"))


def encode_u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def decode_u64(buf: bytes) -> int:
    return struct.unpack("<Q", buf)[0]


def encode_dataset(sequences: np.ndarray, offsets: np.ndarray, msl: int) -> bytes:
    return b"".join([
        struct.pack("<I", msl),
        struct.pack("<Q", sequences.shape[0]),
        np.ascontiguousarray(sequences, dtype="<u4").tobytes(),
        np.ascontiguousarray(offsets, dtype="<u8").tobytes(),
    ])


def decode_dataset(buf: bytes):
    (msl,) = struct.unpack_from("<I", buf, 0)
    (rows,) = struct.unpack_from("<Q", buf, 4)
    off = 12
    seq_bytes = rows * msl * 4
    sequences = np.frombuffer(buf[off:off + seq_bytes], dtype="<u4").reshape(rows, msl).copy()
    off += seq_bytes
    offsets = np.frombuffer(buf[off:off + rows * 8], dtype="<u8").copy()
    return sequences, offsets, msl


def save_packed_dataset(path, dataset):
    """Write a PackedDataset as a container with a single dataset section."""
    save_container(path, {"dataset": encode_dataset(dataset.sequences,
                                                    dataset.offsets, dataset.msl)})


def load_packed_dataset(path):
    from .data import PackedDataset

    sections = load_container(path)
    if "dataset" not in sections:
        raise ContractError(f"{path}: no dataset section")
    sequences, offsets, msl = decode_dataset(sections["dataset"])
    return PackedDataset(sequences=sequences, offsets=offsets, msl=msl)
