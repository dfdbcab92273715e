"""Calibration sample selection and per-block activation capture.

Samples are consecutive, equal-length byte windows taken from the start of
the corpus in order. Activation capture runs the embedding and the blocks
before the target block, either on the full-precision model or through the
already-quantized prefix, and records each sample's input to that block.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, StateError
from .model import (Model, _read_exact, _read_tensor, _write_tensor,
                    embed_tokens, forward_blocks, tokenize)

CACHE_MAGIC = b"LFQ1"
CACHE_VERSION = 1

FP_PATH = "fp_path"
QUANTIZED_PATH = "quantized_path"


@dataclass(frozen=True)
class CalibrationSet:
    """Equal-length token sequences cut sequentially from the corpus start."""

    samples: np.ndarray  # [n_samples, seq_len] int64
    seq_len: int

    def __len__(self) -> int:
        return self.samples.shape[0]

    def split_holdout(self, fraction: float = 0.1) -> tuple["CalibrationSet", "CalibrationSet"]:
        """Reserve the trailing ``fraction`` of samples (at least one)."""
        n = len(self)
        n_held = max(1, int(np.ceil(fraction * n)))
        if n_held >= n:
            raise ContractError(f"split_holdout: cannot hold out {n_held} of {n} samples")
        return (CalibrationSet(self.samples[:n - n_held], self.seq_len),
                CalibrationSet(self.samples[n - n_held:], self.seq_len))


def select_samples(corpus: bytes | str | Path, n_samples: int, seq_len: int) -> CalibrationSet:
    """Sample i covers bytes [i*seq_len, (i+1)*seq_len) of the corpus."""
    if isinstance(corpus, (str, Path)):
        corpus = Path(corpus).read_bytes()
    if n_samples < 0 or seq_len <= 0:
        raise ContractError(f"select_samples: bad n_samples={n_samples}, seq_len={seq_len}")
    needed = n_samples * seq_len
    if len(corpus) < needed:
        raise ContractError(
            f"select_samples: corpus holds {len(corpus)} bytes, "
            f"need {needed} ({n_samples} samples x {seq_len})")
    ids = tokenize(corpus[:needed])
    samples = ids.reshape(n_samples, seq_len) if n_samples else np.zeros((0, seq_len), np.int64)
    return CalibrationSet(samples.copy(), seq_len)


@dataclass
class ActivationCache:
    """Per-sample inputs to one block, tagged with how they were produced."""

    block_index: int
    mode: str
    inputs: list[np.ndarray]  # each [seq_len x d_model] float32

    def save(self, path) -> None:
        buf = io.BytesIO()
        buf.write(CACHE_MAGIC)
        buf.write(struct.pack("<I", CACHE_VERSION))
        header = json.dumps({"kind": "activation_cache", "block_index": self.block_index,
                             "mode": self.mode, "n_samples": len(self.inputs)},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        for i, x in enumerate(self.inputs):
            _write_tensor(buf, f"sample.{i}", x)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "ActivationCache":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CACHE_MAGIC:
                raise FormatError(f"bad cache magic {magic!r}")
            (version,) = struct.unpack("<I", _read_exact(fh, 4, "cache version"))
            if version != CACHE_VERSION:
                raise FormatError(f"unsupported cache version {version}")
            (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "cache header length"))
            header = json.loads(_read_exact(fh, hlen, "cache header").decode("utf-8"))
            if header.get("kind") != "activation_cache":
                raise FormatError("not an activation cache file")
            inputs = []
            for i in range(header["n_samples"]):
                name, data = _read_tensor(fh)
                if name != f"sample.{i}":
                    raise FormatError(f"cache tensor order: unexpected {name!r}")
                inputs.append(data)
        return cls(header["block_index"], header["mode"], inputs)


class QuantizedPrefix:
    """Work-in-progress quantized model: blocks [0, finalized_upto) are done."""

    def __init__(self, fp_model: Model):
        self.model = fp_model.clone(requires_grad=False)
        self.finalized_upto = 0

    def finalize_block(self, block_index: int, weights: dict[str, np.ndarray]) -> None:
        if block_index != self.finalized_upto:
            raise StateError(
                f"finalize_block: expected block {self.finalized_upto}, got {block_index}")
        block = self.model.blocks[block_index]
        for name, data in weights.items():
            getattr(block, name).data = np.asarray(data, dtype=np.float32)
        self.finalized_upto += 1


def capture_block_inputs(fp_model: Model, quantized_prefix: QuantizedPrefix | None,
                         calibration: CalibrationSet, block_idx: int,
                         mode: str = QUANTIZED_PATH) -> ActivationCache:
    """Record every sample's input to block ``block_idx`` (0-based).

    ``fp_path`` runs the full-precision model up to the block; for
    ``quantized_path`` all earlier blocks must already be finalized in the
    prefix, and the input is taken after running through them.
    """
    if mode not in (FP_PATH, QUANTIZED_PATH):
        raise ContractError(f"capture_block_inputs: unknown mode {mode!r}")
    if not 0 <= block_idx < fp_model.config.n_blocks:
        raise ContractError(f"capture_block_inputs: block {block_idx} out of range")
    if mode == QUANTIZED_PATH:
        if quantized_prefix is None:
            raise StateError("quantized_path capture requires a prefix")
        if quantized_prefix.finalized_upto < block_idx:
            raise StateError(
                f"quantized_path capture of block {block_idx} before prefix finalized "
                f"(done: {quantized_prefix.finalized_upto})")
        runner = quantized_prefix.model
    else:
        runner = fp_model

    inputs = []
    for sample in calibration.samples:
        x = forward_blocks(runner, embed_tokens(runner, sample), upto=block_idx)
        inputs.append(x.data.copy())
    return ActivationCache(block_idx, mode, inputs)
