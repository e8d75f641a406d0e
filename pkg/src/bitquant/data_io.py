"""Dataset ingestion and the two binary file formats.

``.bqck`` checkpoint layout (little-endian)::

    header   magic "BQCK" | u16 version | u16 reserved (0) | u32 n_sections
             | u64 payload_len | u32 crc32(payload)
    section  u16 name_len | name (utf-8) | u8 kind (0 json, 1 array)
             | u64 body_len | body
    array    u8 dtype_len | dtype str | u8 ndim | u64 * ndim shape | raw bytes

``.bqpk`` packed inference model::

    magic "BQPK" | u16 version | u16 n_layers
    per layer: u32 layer_index | u32 n | u32 p | u8 K_w | u8 K_a | u16 L
               | f64[K_a] activation basis | f64[n, K_w] weight bases
               | f64[n] Q constants | word[K_w, n, ceil(p / L)] bit planes
    u32 crc32 of everything before it
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .bitkernel import PackedBitMatrix, PackedLinear
from .errors import ConsistencyError, FormatError, ParameterError, VersionError

CKPT_MAGIC = b"BQCK"
CKPT_VERSION = 1
PACK_MAGIC = b"BQPK"
PACK_VERSION = 1

_CKPT_HEADER = struct.Struct("<4sHHIQI")
_PACK_HEADER = struct.Struct("<4sHH")
_PACK_LAYER = struct.Struct("<IIIBBH")

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), raw scale
    labels: np.ndarray  # (N,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        classes = self.meta.get("classes")
        if classes is not None and self.labels.size and (
                self.labels.min() < 0 or self.labels.max() >= classes):
            raise ConsistencyError(f"labels outside [0, {classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def classes(self) -> int:
        return int(self.meta.get("classes", int(self.labels.max()) + 1))

    def normalized(self) -> np.ndarray:
        mean = np.asarray(self.meta.get("mean", 0.0), dtype=np.float64)
        std = np.asarray(self.meta.get("std", 1.0), dtype=np.float64)
        shape = (1, -1, 1, 1) if mean.ndim else ()
        return (self.images - mean.reshape(shape)) / std.reshape(shape)


# --- IDX -------------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse one IDX file; dimensions are big-endian u32."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic")
    dtype = _IDX_DTYPES.get(raw[2])
    ndim = raw[3]
    if dtype is None:
        raise FormatError(f"{path}: unknown IDX element type 0x{raw[2]:02x}")
    if ndim == 0:
        raise FormatError(f"{path}: IDX header declares no dimensions")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: IDX header has an empty dimension {dims}")
    expected = math.prod(dims) * dtype.itemsize
    body = len(raw) - header
    if body < expected:
        raise OSError(f"{path}: truncated IDX payload ({body} of {expected} bytes)")
    if body > expected:
        raise FormatError(f"{path}: {body - expected} trailing bytes after IDX payload")
    return np.frombuffer(raw, dtype=dtype, count=math.prod(dims), offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4):
        raise FormatError(f"image file must be 3-D or 4-D, got {images.ndim}-D")
    if labels.ndim != 1:
        raise FormatError(f"label file must be 1-D, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.ndim == 3:
        images = images[:, None]
    x = images.astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    meta = {"source": f"idx:{os.fspath(images_path)}", "classes": int(y.max()) + 1,
            "mean": float(x.mean()), "std": float(x.std()) or 1.0}
    return Dataset(x, y, meta)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(bytes([0, 0, 0x08, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


# --- synthetic data --------------------------------------------------------------------

def synth_blobs(seed: int, n_per_class: int, classes: int = 4, channel_scales=(1.0,),
                size: int = 8, noise: float = 0.35, jitter: float = 0.75, width: float = 1.5) -> Dataset:
    """Gaussian bumps on a ``size x size`` grid, one center per class.

    Class centers sit on a circle around the image center; each sample
    jitters its center and adds pixel noise. Channel ``c`` is the same
    pattern times ``channel_scales[c]`` with independent noise.
    """
    if classes < 2:
        raise ParameterError("need at least two classes")
    if n_per_class < 1:
        raise ParameterError("n_per_class must be positive")
    scales = np.asarray(channel_scales, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    mid = (size - 1) / 2
    radius = size / 4
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.stack([mid + radius * np.cos(angles), mid + radius * np.sin(angles)], axis=1)

    labels = np.repeat(np.arange(classes), n_per_class)
    n = labels.size
    c = centers[labels] + jitter * rng.standard_normal((n, 2))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    bump = np.exp(-d2 / (2 * width ** 2))
    images = bump[:, None] + noise * rng.standard_normal((n, scales.size, size, size))
    images *= scales[None, :, None, None]
    order = rng.permutation(n)
    images, labels = images[order], labels[order]
    meta = {"source": f"synth_blobs:seed={seed}", "classes": classes,
            "mean": images.mean(axis=(0, 2, 3)).tolist(), "std": images.std(axis=(0, 2, 3)).tolist(),
            "channel_scales": scales.tolist()}
    return Dataset(images, labels, meta)


def synth_activations(seed: int, channels: int = 96, batch: int = 32, size: int = 8,
                      scale_range=(0.1, 10.0)) -> np.ndarray:
    """Post-ReLU activations ``(batch, channels, size, size)`` with channel
    scales drawn log-uniform over ``scale_range``."""
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ParameterError(f"invalid scale range {scale_range}")
    rng = np.random.default_rng(seed)
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=channels))
    z = rng.standard_normal((batch, channels, size, size))
    return np.maximum(z * scales[None, :, None, None], 0.0)


# --- checkpoints -----------------------------------------------------------------------

def _encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    dt = le.dtype.str.encode()
    return b"".join([
        struct.pack("<B", len(dt)), dt, struct.pack("<B", a.ndim),
        struct.pack(f"<{a.ndim}Q", *a.shape), np.ascontiguousarray(le).tobytes(),
    ])


def _decode_array(body: bytes) -> np.ndarray:
    try:
        (n,) = struct.unpack_from("<B", body, 0)
        dt = np.dtype(body[1:1 + n].decode())
        (ndim,) = struct.unpack_from("<B", body, 1 + n)
        shape = struct.unpack_from(f"<{ndim}Q", body, 2 + n)
    except (struct.error, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt array header: {exc}") from None
    off = 2 + n + 8 * ndim
    if dt.hasobject or len(body) - off != math.prod(shape) * dt.itemsize:
        raise FormatError("array section length does not match its declared shape")
    return np.frombuffer(body, dtype=dt, offset=off).reshape(shape).copy()


def encode_sections(meta: dict, arrays: dict) -> bytes:
    """Serialize a JSON ``meta`` section plus named arrays into a checkpoint."""
    parts = []
    sections = [("meta", 0, json.dumps(meta, sort_keys=True).encode())]
    sections += [(name, 1, _encode_array(arr)) for name, arr in arrays.items()]
    for name, kind, body in sections:
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BQ", kind, len(body)), body]
    payload = b"".join(parts)
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(sections), len(payload),
                               zlib.crc32(payload))
    return header + payload


def decode_sections(data: bytes):
    """Inverse of :func:`encode_sections`; returns ``(meta, arrays)``."""
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, reserved, n_sections, payload_len, crc = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if reserved != 0:
        raise FormatError("reserved header field is not zero")
    payload = data[_CKPT_HEADER.size:]
    if payload_len != len(payload):
        raise FormatError(f"declared payload of {payload_len} bytes, found {len(payload)}")
    if zlib.crc32(payload) != crc:
        raise FormatError("checkpoint checksum mismatch")

    meta, arrays, off = None, {}, 0
    for _ in range(n_sections):
        if off + 2 > len(payload):
            raise FormatError("truncated section header")
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        if off + name_len + 9 > len(payload):
            raise FormatError("truncated section header")
        name = payload[off:off + name_len].decode("utf-8", errors="strict")
        off += name_len
        kind, body_len = struct.unpack_from("<BQ", payload, off)
        off += 9
        if body_len > len(payload) - off:
            raise FormatError(f"section {name!r} claims {body_len} bytes beyond end of file")
        body = payload[off:off + body_len]
        off += body_len
        if kind == 0:
            meta = json.loads(body.decode())
        elif kind == 1:
            arrays[name] = _decode_array(body)
        else:
            raise FormatError(f"unknown section kind {kind}")
    if off != len(payload):
        raise FormatError("trailing bytes after last section")
    if meta is None:
        raise FormatError("checkpoint has no meta section")
    return meta, arrays


def save_checkpoint(state) -> bytes:
    meta, arrays = state.to_sections()
    return encode_sections(meta, arrays)


def load_checkpoint(data: bytes, like=None):
    """Rebuild a training state; with ``like`` the shapes must match that state."""
    from .tinynet import TrainState

    meta, arrays = decode_sections(data)
    state = TrainState.from_sections(meta, arrays)
    if like is not None:
        like.check_compatible(state)
    return state


def save_checkpoint_file(path, state) -> None:
    with open(path, "wb") as f:
        f.write(save_checkpoint(state))


def load_checkpoint_file(path, like=None):
    with open(path, "rb") as f:
        return load_checkpoint(f.read(), like)


# --- packed inference model ------------------------------------------------------------

def save_packed(layers: dict) -> bytes:
    """Serialize ``{layer_index: PackedLinear}`` to the ``.bqpk`` layout."""
    parts = [_PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, len(layers))]
    for idx in sorted(layers):
        pl = layers[idx]
        parts.append(_PACK_LAYER.pack(idx, pl.n, pl.p, pl.k_w, pl.k_a, pl.word_bits))
        for arr in (pl.v_a, pl.v_w, pl.q_const):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(pl.weights.words).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_packed(data: bytes) -> dict:
    if len(data) < _PACK_HEADER.size + 4:
        raise FormatError("packed model shorter than its header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    magic, version, n_layers = _PACK_HEADER.unpack_from(body)
    if magic != PACK_MAGIC:
        raise FormatError(f"not a packed model (magic {magic!r})")
    if version != PACK_VERSION:
        raise VersionError(f"unsupported packed model version {version}")
    if zlib.crc32(body) != crc:
        raise FormatError("packed model checksum mismatch")
    off = _PACK_HEADER.size
    layers = {}
    for _ in range(n_layers):
        if off + _PACK_LAYER.size > len(body):
            raise FormatError("truncated layer header")
        idx, n, p, k_w, k_a, word_bits = _PACK_LAYER.unpack_from(body, off)
        off += _PACK_LAYER.size
        if word_bits not in (32, 64) or not (1 <= k_w <= 8 and 1 <= k_a <= 8):
            raise FormatError("invalid layer header")
        n_words = max(1, math.ceil(p / word_bits))
        sizes = [k_a * 8, n * k_w * 8, n * 8, k_w * n * n_words * word_bits // 8]
        if off + sum(sizes) > len(body):
            raise FormatError("layer payload runs past end of file")
        v_a = np.frombuffer(body, "<f8", k_a, off).copy()
        off += sizes[0]
        v_w = np.frombuffer(body, "<f8", n * k_w, off).reshape(n, k_w).copy()
        off += sizes[1]
        q = np.frombuffer(body, "<f8", n, off).copy()
        off += sizes[2]
        wdt = np.dtype("<u8" if word_bits == 64 else "<u4")
        words = np.frombuffer(body, wdt, k_w * n * n_words, off).reshape(k_w, n, n_words).copy()
        off += sizes[3]
        layers[idx] = PackedLinear(PackedBitMatrix(words, p, word_bits), v_w, v_a, q)
    if off != len(body):
        raise FormatError("trailing bytes after last layer")
    return layers
