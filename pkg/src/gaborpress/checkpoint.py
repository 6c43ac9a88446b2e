"""Binary checkpoint persistence.

Layout, all little-endian:

    magic (16 bytes)  version u32
    architecture descriptor: u32 byte length + utf-8 text
    tensor section:     u32 count, then per entry
                        name (u16 length + utf-8), rank u8, dims u32 each,
                        raw float32 payload
    gabor section:      same framing, float64 payload, 8 values per kernel
                        in declared parameter field order
    mask section:       same framing, uint8 payload (0/1)
    optimizer section:  u8 present flag; entries carry a dtype byte
                        (0 = float32, 1 = float64)
    rng section:        u8 present flag; PCG64 state + inc (16 bytes each),
                        has_uint32 u8, uinteger u32
    checksum:           first 8 bytes of SHA-256 over everything above

Tensors are stored as raw float32, so only float32 models are accepted.
Gabor parameter grids keep full float64, making their round trip exact to
the last bit.  Writes go to a temp file and rename into place.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .engine.model import Model
from .engine.optim import SGD
from .errors import FormatError, IntegrityError, InvalidParameterError
from .models import model_descriptor, model_from_descriptor

MAGIC = b"gaborpress-ckpt\x00"
VERSION = 1
_F32, _F64 = 0, 1


@dataclass
class Checkpoint:
    """A loaded checkpoint: the model plus optional training continuation."""

    model: Model
    version: int
    descriptor: str
    optimizer_state: list | None    # (name, velocity array) pairs
    rng_state: dict | None          # numpy Generator state dict


def _write_name(out, name: str) -> None:
    b = name.encode("utf-8")
    out.write(struct.pack("<H", len(b)))
    out.write(b)


def _write_array(out, name: str, arr: np.ndarray) -> None:
    _write_name(out, name)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def name(self) -> str:
        (n,) = self.unpack("H")
        return self.take(n).decode("utf-8")

    def array(self, dtype) -> tuple:
        nm = self.name()
        (rank,) = self.unpack("B")
        dims = self.unpack(f"{rank}I") if rank else ()
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = self.take(count * dt.itemsize)
        return nm, np.frombuffer(raw, dtype=dt).astype(dtype).reshape(dims)


def _rng_state_bytes(state: dict) -> bytes:
    if state.get("bit_generator") != "PCG64":
        raise InvalidParameterError(
            f"only PCG64 generator state is supported, got {state.get('bit_generator')!r}"
        )
    s = state["state"]
    return (
        int(s["state"]).to_bytes(16, "little")
        + int(s["inc"]).to_bytes(16, "little")
        + struct.pack("<BI", int(state["has_uint32"]), int(state["uinteger"]))
    )


def _rng_state_from(reader: _Reader) -> dict:
    raw_state = int.from_bytes(reader.take(16), "little")
    raw_inc = int.from_bytes(reader.take(16), "little")
    has, uinteger = reader.unpack("BI")
    return {
        "bit_generator": "PCG64",
        "state": {"state": raw_state, "inc": raw_inc},
        "has_uint32": has,
        "uinteger": uinteger,
    }


def save_checkpoint(
    model: Model,
    path: str,
    optimizer: SGD | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    """Serialize model (and optional optimizer/rng state) atomically."""
    if model.dtype != np.float32:
        raise InvalidParameterError(
            f"checkpoints store raw float32 tensors; model dtype is {model.dtype}"
        )
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    desc = model_descriptor(model).encode("utf-8")
    out.write(struct.pack("<I", len(desc)))
    out.write(desc)

    tensors = [(n, p.data) for n, p in model.named_params() if p.kind == "tensor"]
    tensors += model.named_buffers()
    gabors = [(n, p.data) for n, p in model.named_params() if p.kind == "gabor"]
    masks = model.named_masks()

    for section, dtype in ((tensors, np.float32), (gabors, np.float64)):
        out.write(struct.pack("<I", len(section)))
        for nm, arr in section:
            if arr.dtype != dtype:
                raise InvalidParameterError(f"{nm} has dtype {arr.dtype}, expected {dtype}")
            _write_array(out, nm, arr)
    out.write(struct.pack("<I", len(masks)))
    for nm, arr in masks:
        _write_array(out, nm, arr.astype(np.uint8))

    out.write(struct.pack("<B", int(optimizer is not None)))
    if optimizer is not None:
        items = optimizer.state_items()
        out.write(struct.pack("<I", len(items)))
        for nm, arr in items:
            out.write(struct.pack("<B", _F64 if arr.dtype == np.float64 else _F32))
            _write_array(out, nm, arr)

    out.write(struct.pack("<B", int(rng is not None)))
    if rng is not None:
        out.write(_rng_state_bytes(rng.bit_generator.state))

    payload = out.getvalue()
    blob = payload + hashlib.sha256(payload).digest()[:8]
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Read, verify, and rebuild a checkpoint; bit-exact inverse of save."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a gaborpress checkpoint (bad magic)")
    payload, checksum = blob[:-8], blob[-8:]
    if hashlib.sha256(payload).digest()[:8] != checksum:
        raise IntegrityError("checkpoint checksum mismatch")

    r = _Reader(payload)
    r.take(len(MAGIC))
    (version,) = r.unpack("I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (dlen,) = r.unpack("I")
    descriptor = r.take(dlen).decode("utf-8")
    model = model_from_descriptor(descriptor)

    (n_tensors,) = r.unpack("I")
    stored_tensors = dict(r.array(np.float32) for _ in range(n_tensors))
    (n_gabors,) = r.unpack("I")
    stored_gabors = dict(r.array(np.float64) for _ in range(n_gabors))
    (n_masks,) = r.unpack("I")
    stored_masks = dict(r.array(np.uint8) for _ in range(n_masks))

    expected_tensors = [(n, p.data) for n, p in model.named_params() if p.kind == "tensor"]
    expected_tensors += model.named_buffers()
    expected_gabors = [(n, p.data) for n, p in model.named_params() if p.kind == "gabor"]
    expected_masks = model.named_masks()

    for stored, expected, label in (
        (stored_tensors, expected_tensors, "tensor"),
        (stored_gabors, expected_gabors, "gabor grid"),
        (stored_masks, expected_masks, "mask"),
    ):
        names = [n for n, _ in expected]
        if sorted(stored) != sorted(names):
            raise IntegrityError(
                f"{label} names do not match architecture descriptor: "
                f"stored {sorted(stored)} vs expected {sorted(names)}"
            )
        for nm, dest in expected:
            src = stored[nm]
            if src.shape != dest.shape:
                raise IntegrityError(f"{label} {nm} shape {src.shape} != {dest.shape}")
            dest[...] = src.astype(dest.dtype)

    # Re-synthesize gabor-mode weights from the exact loaded grids.
    for i in model.conv_indices():
        layer = model.layers[i]
        if layer.mode == "gabor":
            layer.weight.data = layer.synthesize()

    (has_opt,) = r.unpack("B")
    optimizer_state = None
    if has_opt:
        (n,) = r.unpack("I")
        optimizer_state = []
        for _ in range(n):
            (dt,) = r.unpack("B")
            optimizer_state.append(r.array(np.float64 if dt == _F64 else np.float32))
    (has_rng,) = r.unpack("B")
    rng_state = _rng_state_from(r) if has_rng else None
    if r.pos != len(payload):
        raise FormatError(f"{len(payload) - r.pos} trailing bytes after checkpoint body")

    return Checkpoint(
        model=model,
        version=version,
        descriptor=descriptor,
        optimizer_state=optimizer_state,
        rng_state=rng_state,
    )


def load_model(path: str) -> Model:
    return load_checkpoint(path).model


def restore_rng(state: dict) -> np.random.Generator:
    """A numpy Generator continuing exactly from a saved state."""
    g = np.random.Generator(np.random.PCG64())
    g.bit_generator.state = state
    return g
