"""Binary volume and checkpoint files, plus the flat ``key = value`` config format.

Volume (``.nvol``), little-endian::

    b"NVOL" | u32 version | u8 rank | u64 dims[rank] | u8 dtype tag | payload

Checkpoint (``.nv3d``), little-endian::

    b"NV3D" | u32 version | u64 config length | config text (UTF-8)
    | u64 tensor count | per tensor: u16 name length | name | u8 rank
    | u64 dims[rank] | f32 payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"NVOL"
CHECKPOINT_MAGIC = b"NV3D"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class ConfigError(ValueError):
    """A config file line could not be parsed."""


# ---------------------------------------------------------------- volumes

def encode_volume(arr: np.ndarray, dtype=np.float32) -> bytes:
    arr = np.asarray(arr)
    tag = 2 if np.dtype(dtype) == np.float64 else 1
    head = VOLUME_MAGIC + struct.pack("<IB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", tag)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if buf[:4] != VOLUME_MAGIC:
        raise FormatError("not a volume file (bad magic)")
    if len(buf) < 9:
        raise FormatError("truncated volume header")
    version, rank = struct.unpack_from("<IB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported volume version {version}")
    off = 9
    if len(buf) < off + 8 * rank + 1:
        raise FormatError("truncated volume header")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    (tag,) = struct.unpack_from("<B", buf, off)
    off += 1
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    dt = DTYPE_TAGS[tag]
    expect = off + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) != expect:
        raise FormatError(f"volume payload is {len(buf) - off} bytes, header implies {expect - off}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_volume(path, arr: np.ndarray, dtype=np.float32) -> None:
    Path(path).write_bytes(encode_volume(arr, dtype))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoints

def encode_checkpoint(config_text: str, tensors: dict) -> bytes:
    text = config_text.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", VERSION, len(text)), text, struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[str, dict]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    try:
        version, clen = struct.unpack_from("<IQ", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 16
        text = buf[off:off + clen].decode("utf-8")
        if len(text.encode("utf-8")) != clen:
            raise FormatError("truncated config blob")
        off += clen
        (count,) = struct.unpack_from("<Q", buf, off)
        off += 8
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if off + size > len(buf):
                raise FormatError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(np.float32)
            off += size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise FormatError(f"checkpoint has {len(buf) - off} trailing bytes")
    return text, tensors


def write_checkpoint(path, config_text: str, tensors: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(config_text, tensors))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[str, dict]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- key = value text

def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
