"""Binary model checkpoints with a bit-exact round trip.

Layout: a fixed header (magic, version, width scale, seed, parameter
dtype, attribute-mask table, priors, optimizer hyperparameters), then a
count-prefixed sequence of named tensors, each serialized as
(name length, name, dtype tag, rank, extents, little-endian payload).
Tensors are written in sorted-name order so identical state always yields
identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint
from .model import AttributeMask, SplitFaceModel
from .nn.adam import AdamState

MAGIC = b"FPCK"
VERSION = 1

_DTYPE_TAGS = {"<f4": 1, "<f8": 2, "<i8": 3, "|b1": 4}
_TAG_DTYPES = {tag: np.dtype(code) for code, tag in _DTYPE_TAGS.items()}
_OPT_PREFIX = "opt."


def _dtype_tag(dtype: np.dtype) -> int:
    code = dtype.newbyteorder("<").str
    if dtype.kind == "b":
        code = "|b1"
    if code not in _DTYPE_TAGS:
        raise CorruptCheckpoint(f"unsupported tensor dtype {dtype}")
    return _DTYPE_TAGS[code]


def _write_tensor(out: list[bytes], name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.append(struct.pack("<H", len(encoded)))
    out.append(encoded)
    out.append(struct.pack("<BB", _dtype_tag(arr.dtype), arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    little = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    out.append(little.tobytes(order="C"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise CorruptCheckpoint(
                f"truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.data)


def _read_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode("utf-8")
    tag, rank = r.unpack("<BB")
    if tag not in _TAG_DTYPES:
        raise CorruptCheckpoint(f"tensor {name}: unknown dtype tag {tag}")
    shape = r.unpack(f"<{rank}Q")
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = r.take(count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return name, arr


def checkpoint_save(path, model: SplitFaceModel,
                    optimizer: AdamState | None = None) -> None:
    """Write model weights, state, masks, priors, and optimizer moments."""
    k = model.num_attributes
    out: list[bytes] = [
        MAGIC,
        struct.pack("<IdQBI", VERSION, model.width_scale, model.seed,
                    _dtype_tag(np.dtype(model.dtype)), k),
        model.masks.table.astype(np.uint8).tobytes(order="C"),
        np.ascontiguousarray(model.priors, dtype="<f8").tobytes(),
    ]
    if optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<ddddQ", optimizer.lr, optimizer.beta1,
                               optimizer.beta2, optimizer.eps, optimizer.step))

    tensors = dict(model.all_tensors())
    if optimizer is not None:
        for name, arr in optimizer.m.items():
            tensors[f"{_OPT_PREFIX}m.{name}"] = arr
        for name, arr in optimizer.v.items():
            tensors[f"{_OPT_PREFIX}v.{name}"] = arr
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_tensor(out, name, tensors[name])
    Path(path).write_bytes(b"".join(out))


def checkpoint_load(path) -> tuple[SplitFaceModel, AdamState | None]:
    """Rebuild the model (and optimizer, if saved) bit-exactly."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    version, width_scale, seed, dtype_tag, k = r.unpack("<IdQBI")
    if version != VERSION:
        raise CorruptCheckpoint(
            f"{path}: version {version} not supported (expected {VERSION})")
    if dtype_tag not in _TAG_DTYPES:
        raise CorruptCheckpoint(f"{path}: unknown parameter dtype tag")
    mask_bytes = r.take(16 * k)
    table = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(16, k) != 0
    priors = np.frombuffer(r.take(8 * k), dtype="<f8").copy()

    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt == 1:
        lr, beta1, beta2, eps, step = r.unpack("<ddddQ")
        optimizer = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                              step=int(step))
    elif has_opt != 0:
        raise CorruptCheckpoint(f"{path}: bad optimizer flag {has_opt}")

    (n_tensors,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name, arr = _read_tensor(r)
        tensors[name] = arr
    if not r.done():
        raise CorruptCheckpoint(
            f"{path}: {len(data) - r.pos} trailing bytes after tensor table")

    model = SplitFaceModel(num_attributes=k, width_scale=width_scale,
                           seed=int(seed), dtype=_TAG_DTYPES[dtype_tag].type,
                           masks=AttributeMask(table))
    model.priors = priors

    model_tensors = {n: a for n, a in tensors.items()
                     if not n.startswith(_OPT_PREFIX)}
    expected = set(model.all_tensors())
    if set(model_tensors) != expected:
        missing = expected - set(model_tensors)
        extra = set(model_tensors) - expected
        raise CorruptCheckpoint(
            f"{path}: tensor set mismatch (missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]})")
    model.load_tensors(model_tensors)

    if optimizer is not None:
        for name, arr in tensors.items():
            if name.startswith(f"{_OPT_PREFIX}m."):
                optimizer.m[name[len(_OPT_PREFIX) + 2:]] = arr
            elif name.startswith(f"{_OPT_PREFIX}v."):
                optimizer.v[name[len(_OPT_PREFIX) + 2:]] = arr
    return model, optimizer
