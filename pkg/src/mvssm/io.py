"""Binary checkpoint and dataset formats (little-endian throughout).

Checkpoint::

    b"XFCK" | version u32 | count u32 |
    count x [name_len u16 | name utf-8 | rank u8 | extents u32*rank | dtype u8 | payload]
    | crc32 u32

``dtype`` is 0 for float32 and 1 for float64. The CRC covers every byte
between the magic and the CRC itself.

Dataset::

    b"XFMV" | version u32 | n u32 | H u16 | W u16 | label_kind u8 |
    n x [view1 f32*H*W | view2 f32*H*W | label]

``label_kind`` 0 stores a u16 class index, 1 a u32 multi-label bitmask.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import DTYPE_CODES

CKPT_MAGIC = b"XFCK"
CKPT_VERSION = 1
DATA_MAGIC = b"XFMV"
DATA_VERSION = 1
DATA_HEADER = struct.Struct("<4sIIHHB")
_CODE_DTYPES = {code: np.dtype(dt).newbyteorder("<") for dt, code in DTYPE_CODES.items()}


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------- checkpoint


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", DTYPE_CODES[arr.dtype]))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[DTYPE_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return CKPT_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic or too short)")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            (code,) = struct.unpack_from("<B", body, off)
            off += 1
            if code not in _CODE_DTYPES:
                raise FormatError(f"{name}: unknown dtype code {code}")
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(body):
                raise FormatError(f"{name}: payload runs past end of file")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off)
            out[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if off != len(body):
        raise FormatError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# -------------------------------------------------------------------- dataset


def _record_dtype(h: int, w: int, label_kind: int) -> np.dtype:
    label = "<u2" if label_kind == 0 else "<u4"
    return np.dtype([("v1", "<f4", (h, w)), ("v2", "<f4", (h, w)), ("label", label)])


def expected_dataset_size(n: int, h: int, w: int, label_kind: int) -> int:
    return DATA_HEADER.size + n * _record_dtype(h, w, label_kind).itemsize


def encode_dataset(v1: np.ndarray, v2: np.ndarray, labels: np.ndarray) -> bytes:
    """``v1``/``v2`` are ``(n, H, W)`` or ``(n, H, W, 1)``; ``labels`` are class
    indices ``(n,)`` or a 0/1 matrix ``(n, K)`` with ``K <= 32``."""
    v1 = np.asarray(v1, dtype=np.float32).reshape(len(labels), *v1.shape[1:3])
    v2 = np.asarray(v2, dtype=np.float32).reshape(v1.shape)
    labels = np.asarray(labels)
    n, h, w = v1.shape
    if labels.ndim == 1:
        kind, lab = 0, labels.astype(np.int64)
        if lab.min(initial=0) < 0 or lab.max(initial=0) > 0xFFFF:
            raise FormatError("class index does not fit in u16")
    else:
        if labels.shape[1] > 32:
            raise FormatError("multi-label bitmask supports at most 32 classes")
        kind = 1
        lab = (labels.astype(np.uint64) << np.arange(labels.shape[1], dtype=np.uint64)).sum(axis=1)
    rec = np.empty(n, dtype=_record_dtype(h, w, kind))
    rec["v1"], rec["v2"], rec["label"] = v1, v2, lab
    return DATA_HEADER.pack(DATA_MAGIC, DATA_VERSION, n, h, w, kind) + rec.tobytes()


def decode_dataset(blob: bytes, num_classes: int | None = None):
    """Return ``(v1, v2, labels)``; views come back as ``(n, H, W, 1)``."""
    if len(blob) < DATA_HEADER.size:
        raise FormatError("dataset file shorter than its header")
    magic, version, n, h, w, kind = DATA_HEADER.unpack_from(blob, 0)
    if magic != DATA_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if kind not in (0, 1):
        raise FormatError(f"unknown label kind {kind}")
    if h == 0 or w == 0:
        raise FormatError("image extents must be positive")
    expected = expected_dataset_size(n, h, w, kind)
    if len(blob) != expected:
        raise FormatError(f"dataset length {len(blob)} != {expected} implied by header")
    rec = np.frombuffer(blob, dtype=_record_dtype(h, w, kind), count=n, offset=DATA_HEADER.size)
    v1 = rec["v1"].astype(np.float32)[..., None]
    v2 = rec["v2"].astype(np.float32)[..., None]
    if kind == 0:
        labels = rec["label"].astype(np.int64)
    else:
        masks = rec["label"].astype(np.uint64)
        k = num_classes or max(1, int(masks.max(initial=0)).bit_length())
        labels = ((masks[:, None] >> np.arange(k, dtype=np.uint64)) & 1).astype(np.int64)
    return v1, v2, labels


def save_dataset(path, v1, v2, labels) -> None:
    atomic_write(path, encode_dataset(v1, v2, labels))


def load_dataset(path, num_classes: int | None = None):
    return decode_dataset(Path(path).read_bytes(), num_classes)


# ---------------------------------------------------------------- PGM import


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) greymap as float32 scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = pos + 1 + w * h * dt.itemsize
        if len(data) < need:
            raise FormatError(f"{path}: expected {w * h} pixels, file ends early")
        raw = np.frombuffer(data, dtype=dt, count=w * h, offset=pos + 1)
    elif magic == b"P2":
        raw = np.array(data[pos:].split()[: w * h], dtype=np.int64)
    else:
        raise FormatError(f"{path}: unsupported PGM magic {magic!r}")
    if raw.size != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {raw.size}")
    return (raw.reshape(h, w).astype(np.float32) / maxval)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Resize a 2-D image to ``size x size`` (pixel-centre bilinear sampling)."""
    h, w = img.shape

    def coords(n_in):
        x = (np.arange(size) + 0.5) * n_in / size - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo).astype(np.float32)

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy[:, None]) + bot * fy[:, None]).astype(np.float32)


def import_pgm_pairs(manifest, size: int):
    """Read a CSV manifest with columns ``view1,view2,label`` (paths relative
    to the manifest; ``label`` an integer class or ``|``-separated 0/1 flags)."""
    import csv

    manifest = Path(manifest)
    v1s, v2s, labels = [], [], []
    with manifest.open(newline="") as fh:
        for row in csv.DictReader(fh):
            v1s.append(resize_bilinear(read_pgm(manifest.parent / row["view1"]), size))
            v2s.append(resize_bilinear(read_pgm(manifest.parent / row["view2"]), size))
            lab = row["label"].strip()
            labels.append([int(b) for b in lab.split("|")] if "|" in lab else int(lab))
    return np.stack(v1s), np.stack(v2s), np.asarray(labels)
