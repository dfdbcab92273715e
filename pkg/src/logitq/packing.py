"""Bit-exact packed storage for grid-quantized weights.

Each row of a [c_out x c_in] integer matrix becomes a little-endian
bitstream, b bits per weight (weight j occupies stream bits [j*b, (j+1)*b),
low bit first), padded independently to a byte boundary. Signed schemes are
stored offset-binary (value + 2^(b-1)) so the payload is sign-free. Per-group
rescale factors ride alongside as float32, row-major by group.

A packed model file ("LFQP") carries the model config plus every checkpoint
tensor in checkpoint order: quantized linears as packed payloads, everything
else as raw float32. Reconstruction multiplies float32 scales by float32
integers, which is bit-identical to how the quantizers materialized the
weights in the first place.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .model import (Model, ModelConfig, _read_exact, _read_tensor,
                    _write_tensor, init_model)
from .quantizers import QuantScheme

PACKED_MAGIC = b"LFQP"
PACKED_VERSION = 1

_KIND_FLOAT = 0
_KIND_PACKED = 1


@dataclass
class PackedTensor:
    scheme: QuantScheme
    n_rows: int            # c_out
    n_cols: int            # c_in
    payload: bytes
    scales: np.ndarray     # [c_out x n_groups] float32

    @property
    def row_stride(self) -> int:
        return (self.n_cols * self.scheme.bits + 7) // 8


def _offset(scheme: QuantScheme) -> int:
    return 1 << (scheme.bits - 1) if scheme.clamp == "symmetric_signed" else 0


def pack(q_ints: np.ndarray, rescales: np.ndarray, scheme: QuantScheme) -> PackedTensor:
    """Pack clamped grid integers into the row-padded bitstream."""
    q_ints = np.asarray(q_ints)
    if q_ints.ndim != 2:
        raise ShapeError(f"pack: expected 2-D integers, got shape {q_ints.shape}")
    c_out, c_in = q_ints.shape
    lo, hi = scheme.int_range()
    bad = (q_ints < lo) | (q_ints > hi)
    if np.any(bad):
        i, j = map(int, np.argwhere(bad)[0])
        raise ContractError(
            f"pack: integer {int(q_ints[i, j])} at ({i}, {j}) outside [{lo}, {hi}]")
    rescales = np.asarray(rescales, dtype=np.float32)
    n_groups = scheme.n_groups(c_in) if c_in else 0
    if rescales.shape != (c_out, n_groups):
        raise ShapeError(f"pack: rescales {rescales.shape}, expected {(c_out, n_groups)}")

    bits = scheme.bits
    codes = (q_ints + _offset(scheme)).astype(np.uint32)
    if c_out == 0 or c_in == 0:
        return PackedTensor(scheme, c_out, c_in, b"", rescales)
    # [c_out, c_in, bits] low-bit-first, flattened to the per-row bitstream.
    bitplanes = ((codes[:, :, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    stream = bitplanes.reshape(c_out, c_in * bits)
    stride_bits = ((c_in * bits + 7) // 8) * 8
    if stride_bits > c_in * bits:
        pad = np.zeros((c_out, stride_bits - c_in * bits), dtype=np.uint8)
        stream = np.concatenate([stream, pad], axis=1)
    payload = np.packbits(stream, axis=1, bitorder="little").tobytes()
    return PackedTensor(scheme, c_out, c_in, payload, rescales)


def unpack(pt: PackedTensor) -> tuple[np.ndarray, np.ndarray]:
    """Exact inverse of :func:`pack`; returns (integers, rescales)."""
    c_out, c_in = pt.n_rows, pt.n_cols
    expected = pt.row_stride * c_out
    if len(pt.payload) != expected:
        raise FormatError(
            f"unpack: payload is {len(pt.payload)} bytes, expected {expected}")
    if c_out == 0 or c_in == 0:
        return np.zeros((c_out, c_in), dtype=np.int32), pt.scales
    bits = pt.scheme.bits
    raw = np.frombuffer(pt.payload, dtype=np.uint8).reshape(c_out, pt.row_stride)
    stream = np.unpackbits(raw, axis=1, bitorder="little")[:, :c_in * bits]
    planes = stream.reshape(c_out, c_in, bits).astype(np.uint32)
    codes = (planes << np.arange(bits, dtype=np.uint32)).sum(axis=2)
    return (codes.astype(np.int64) - _offset(pt.scheme)).astype(np.int32), pt.scales


def expand_scales(pt: PackedTensor) -> np.ndarray:
    g = pt.scheme.effective_group(pt.n_cols)
    return np.repeat(pt.scales, g, axis=1)


def dequantized(pt: PackedTensor) -> np.ndarray:
    """Dense float32 weight; product order matches the quantizers' forward."""
    ints, _ = unpack(pt)
    return (expand_scales(pt) * ints.astype(np.float32)).astype(np.float32)


def dequant_matvec(pt: PackedTensor, x: np.ndarray) -> np.ndarray:
    """y = W x one row at a time, never materializing the dense matrix."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (pt.n_cols,):
        raise ContractError(f"dequant_matvec: x has shape {x.shape}, expected ({pt.n_cols},)")
    ints, scales = unpack(pt)
    g = pt.scheme.effective_group(pt.n_cols) if pt.n_cols else 1
    x64 = x.astype(np.float64)
    y = np.empty(pt.n_rows, dtype=np.float32)
    for i in range(pt.n_rows):
        row = (np.repeat(scales[i], g) * ints[i].astype(np.float32)).astype(np.float32)
        y[i] = np.float32(row.astype(np.float64) @ x64)
    return y


# ---------------------------------------------------------------------------
# Packed model container
# ---------------------------------------------------------------------------

def _scheme_dict(scheme: QuantScheme) -> dict:
    return {"bits": scheme.bits, "group_size": scheme.group_size, "clamp": scheme.clamp}


def _scheme_from_dict(d: dict) -> QuantScheme:
    try:
        return QuantScheme(bits=d["bits"], group_size=d["group_size"], clamp=d["clamp"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"packed file scheme header invalid: {exc}") from exc


def write_packed_model(path, model: Model, grid: dict[str, PackedTensor]) -> None:
    """Serialize the model with the named tensors in ``grid`` stored packed.

    ``grid`` keys are checkpoint tensor names (e.g. ``blocks.0.wq``); every
    other tensor is written as raw float32. Tensor order is the checkpoint
    order.
    """
    named = model.named_tensors()
    names = [n for n, _ in named]
    unknown = set(grid) - set(names)
    if unknown:
        raise ContractError(f"write_packed_model: unknown tensor names {sorted(unknown)}")
    scheme_strs = sorted({json.dumps(_scheme_dict(pt.scheme), sort_keys=True)
                          for pt in grid.values()})
    header = {
        "kind": "packed_model",
        "config": json.loads(model.config.to_json()),
        "packed": [n for n in names if n in grid],
        "scheme": json.loads(scheme_strs[0]) if scheme_strs else None,
    }
    buf = io.BytesIO()
    buf.write(PACKED_MAGIC)
    buf.write(struct.pack("<I", PACKED_VERSION))
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(hjson)))
    buf.write(hjson)
    for name, tensor in named:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        if name in grid:
            pt = grid[name]
            if (pt.n_rows, pt.n_cols) != tensor.data.shape:
                raise ContractError(
                    f"write_packed_model: {name} packed shape {(pt.n_rows, pt.n_cols)} "
                    f"!= tensor shape {tensor.data.shape}")
            buf.write(struct.pack("<B", _KIND_PACKED))
            sjson = json.dumps(_scheme_dict(pt.scheme), sort_keys=True,
                               separators=(",", ":")).encode("utf-8")
            buf.write(struct.pack("<H", len(sjson)))
            buf.write(sjson)
            buf.write(struct.pack("<II", pt.n_rows, pt.n_cols))
            buf.write(struct.pack("<I", pt.scales.shape[1] if pt.scales.ndim == 2 else 0))
            buf.write(np.ascontiguousarray(pt.scales, dtype="<f4").tobytes())
            buf.write(struct.pack("<I", len(pt.payload)))
            buf.write(pt.payload)
        else:
            buf.write(struct.pack("<B", _KIND_FLOAT))
            buf.write(struct.pack("<B", tensor.data.ndim))
            for extent in tensor.data.shape:
                buf.write(struct.pack("<I", extent))
            buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_packed_model(path) -> tuple[Model, dict[str, PackedTensor]]:
    """Rebuild the model (packed weights dequantized bit-exactly) plus the grid."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PACKED_MAGIC:
            raise FormatError(f"bad packed-file magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "packed version"))
        if version != PACKED_VERSION:
            raise FormatError(f"unsupported packed version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "packed header length"))
        header = json.loads(_read_exact(fh, hlen, "packed header").decode("utf-8"))
        if header.get("kind") != "packed_model":
            raise FormatError("not a packed model file")
        config = ModelConfig(**header["config"])
        model = init_model(config, seed=0, requires_grad=False)
        grid: dict[str, PackedTensor] = {}
        for expected_name, tensor in model.named_tensors():
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if name != expected_name:
                raise FormatError(
                    f"packed tensor order: expected {expected_name!r}, found {name!r}")
            (kind,) = struct.unpack("<B", _read_exact(fh, 1, f"kind of {name}"))
            if kind == _KIND_FLOAT:
                (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name}"))
                shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "extent"))[0]
                              for _ in range(rank))
                count = int(np.prod(shape, dtype=np.int64)) if shape else 1
                raw = _read_exact(fh, 4 * count, f"data of {name}")
                data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                if data.shape != tensor.data.shape:
                    raise FormatError(f"packed tensor {name!r}: bad shape {data.shape}")
                tensor.data = data
            elif kind == _KIND_PACKED:
                (slen,) = struct.unpack("<H", _read_exact(fh, 2, "scheme length"))
                scheme = _scheme_from_dict(
                    json.loads(_read_exact(fh, slen, "scheme").decode("utf-8")))
                n_rows, n_cols = struct.unpack("<II", _read_exact(fh, 8, "packed extents"))
                (n_groups,) = struct.unpack("<I", _read_exact(fh, 4, "group count"))
                raw = _read_exact(fh, 4 * n_rows * n_groups, f"scales of {name}")
                scales = np.frombuffer(raw, dtype="<f4").reshape(n_rows, n_groups).copy()
                (plen,) = struct.unpack("<I", _read_exact(fh, 4, "payload length"))
                payload = _read_exact(fh, plen, f"payload of {name}")
                pt = PackedTensor(scheme, n_rows, n_cols, payload, scales)
                if (n_rows, n_cols) != tensor.data.shape:
                    raise FormatError(f"packed tensor {name!r}: bad extents")
                tensor.data = dequantized(pt)
                grid[name] = pt
            else:
                raise FormatError(f"packed tensor {name!r}: unknown kind {kind}")
        if fh.read(1):
            raise FormatError("packed file has trailing bytes")
    return model, grid
