"""Toy byte-level decoder-only transformer and its checkpoint format.

Architecture: token embedding + learned position embedding, N pre-norm
blocks (causal multi-head attention, then a GELU MLP, both with residuals),
a final RMS norm, and an LM head over the 256-byte vocabulary. Linear
weights are stored [c_out x c_in] (rows are output channels) so quantizers
and packing see the layout they expect; forward passes multiply by the
transpose. The head is stored [d_model x vocab] and is never quantized.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, FormatError
from .optim import Adam
from .tensor import (Tensor, add, backward, concat_cols, cross_entropy,
                     embedding_lookup, gelu, matmul, rmsnorm, scale,
                     slice_cols, softmax_rows, transpose)

CHECKPOINT_MAGIC = b"LFQ1"
CHECKPOINT_VERSION = 1

# Linear layers inside one block, in checkpoint order.
BLOCK_LINEARS = ("wq", "wk", "wv", "wo", "w_up", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_blocks: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    vocab_size: int = 256
    norm_eps: float = 1e-6

    def __post_init__(self):
        extents = (self.d_model, self.n_blocks, self.n_heads, self.d_ff,
                   self.max_seq_len, self.vocab_size)
        if any(e <= 0 for e in extents):
            raise ContractError(f"ModelConfig: non-positive extent in {extents}")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"ModelConfig: d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            fields = json.loads(text)
            return cls(**fields)
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"checkpoint config invalid: {exc}") from exc


@dataclass
class TransformerBlock:
    norm1: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2: Tensor
    w_up: Tensor
    w_down: Tensor

    def linears(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in BLOCK_LINEARS}


class Model:
    """Full-precision (or quantized-weight) toy transformer."""

    def __init__(self, config: ModelConfig, embedding: Tensor, pos_embedding: Tensor,
                 blocks: list[TransformerBlock], final_norm: Tensor, head: Tensor):
        self.config = config
        self.embedding = embedding
        self.pos_embedding = pos_embedding
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Fixed checkpoint tensor order: embeddings, blocks, final norm, head."""
        ordered = [("embedding", self.embedding), ("pos_embedding", self.pos_embedding)]
        for i, block in enumerate(self.blocks):
            ordered.extend([
                (f"blocks.{i}.norm1", block.norm1),
                (f"blocks.{i}.wq", block.wq),
                (f"blocks.{i}.wk", block.wk),
                (f"blocks.{i}.wv", block.wv),
                (f"blocks.{i}.wo", block.wo),
                (f"blocks.{i}.norm2", block.norm2),
                (f"blocks.{i}.w_up", block.w_up),
                (f"blocks.{i}.w_down", block.w_down),
            ])
        ordered.append(("final_norm", self.final_norm))
        ordered.append(("head", self.head))
        return ordered

    def trainables(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def clone(self, requires_grad: bool = False) -> "Model":
        """Deep copy; norm/head/embedding tensors are fresh leaves."""
        def cp(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=requires_grad)

        blocks = [TransformerBlock(cp(b.norm1), cp(b.wq), cp(b.wk), cp(b.wv),
                                   cp(b.wo), cp(b.norm2), cp(b.w_up), cp(b.w_down))
                  for b in self.blocks]
        return Model(self.config, cp(self.embedding), cp(self.pos_embedding),
                     blocks, cp(self.final_norm), cp(self.head))

    # Convenience wrappers around the module-level forward functions.
    def embed(self, tokens: np.ndarray) -> Tensor:
        return embed_tokens(self, tokens)

    def forward(self, tokens: np.ndarray) -> Tensor:
        return forward_full(self, tokens)


def init_model(config: ModelConfig, seed: int, requires_grad: bool = True,
               init_scale: float = 0.02) -> Model:
    rng = np.random.default_rng(seed)

    def w(*shape) -> Tensor:
        return Tensor(rng.normal(0.0, init_scale, size=shape).astype(np.float32),
                      requires_grad=requires_grad)

    def ones(n) -> Tensor:
        return Tensor(np.ones(n, dtype=np.float32), requires_grad=requires_grad)

    d, ff = config.d_model, config.d_ff
    blocks = [TransformerBlock(ones(d), w(d, d), w(d, d), w(d, d), w(d, d),
                               ones(d), w(ff, d), w(d, ff))
              for _ in range(config.n_blocks)]
    return Model(config, w(config.vocab_size, d), w(config.max_seq_len, d),
                 blocks, ones(d), w(d, config.vocab_size))


# ---------------------------------------------------------------------------
# Tokenizer (identity byte mapping)
# ---------------------------------------------------------------------------

def tokenize(text: bytes | str) -> np.ndarray:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(ids: np.ndarray) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise ContractError("detokenize: id outside byte range")
    return ids.astype(np.uint8).tobytes()


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(length: int) -> np.ndarray:
    mask = _MASK_CACHE.get(length)
    if mask is None:
        mask = np.triu(np.full((length, length), -1e9, dtype=np.float32), k=1)
        _MASK_CACHE[length] = mask
    return mask


def forward_block(block: TransformerBlock, x: Tensor, config: ModelConfig,
                  weights: dict[str, Tensor] | None = None) -> Tensor:
    """Pre-norm attention + MLP with residuals.

    ``weights`` optionally overrides the block's linear weights by name
    (norms always come from the block); this is how the PTQ engine runs a
    block with quantized weights without mutating the model.
    """
    length = x.shape[0]
    if length > config.max_seq_len:
        raise ContractError(
            f"forward_block: sequence length {length} exceeds max {config.max_seq_len}")

    def weight(name: str) -> Tensor:
        if weights is not None and name in weights:
            return weights[name]
        return getattr(block, name)

    d_head = config.d_model // config.n_heads
    eps = config.norm_eps

    h = rmsnorm(x, block.norm1, eps)
    q = matmul(h, transpose(weight("wq")))
    k = matmul(h, transpose(weight("wk")))
    v = matmul(h, transpose(weight("wv")))
    mask = Tensor(_causal_mask(length))
    heads = []
    for hd in range(config.n_heads):
        lo, hi = hd * d_head, (hd + 1) * d_head
        qh, kh, vh = (slice_cols(t, lo, hi) for t in (q, k, v))
        scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(d_head))
        attn = softmax_rows(add(scores, mask))
        heads.append(matmul(attn, vh))
    x = add(x, matmul(concat_cols(heads), transpose(weight("wo"))))

    h2 = rmsnorm(x, block.norm2, eps)
    mlp = matmul(gelu(matmul(h2, transpose(weight("w_up")))), transpose(weight("w_down")))
    return add(x, mlp)


def embed_tokens(model: Model, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and tokens.max() >= model.config.vocab_size:
        raise ContractError(
            f"embed_tokens: token id {int(tokens.max())} >= vocab {model.config.vocab_size}")
    if tokens.size > model.config.max_seq_len:
        raise ContractError(
            f"embed_tokens: sequence length {tokens.size} exceeds max {model.config.max_seq_len}")
    tok = embedding_lookup(model.embedding, tokens)
    pos = embedding_lookup(model.pos_embedding, np.arange(tokens.size))
    return add(tok, pos)


def forward_blocks(model: Model, x: Tensor, upto: int | None = None) -> Tensor:
    """Run blocks [0, upto); ``None`` runs all of them."""
    upto = model.config.n_blocks if upto is None else upto
    for block in model.blocks[:upto]:
        x = forward_block(block, x, model.config)
    return x


def logits_from_hidden(model: Model, hidden: Tensor) -> Tensor:
    """Final RMS norm followed by the LM head (neither is ever quantized)."""
    return matmul(rmsnorm(hidden, model.final_norm, model.config.norm_eps), model.head)


def forward_full(model: Model, tokens: np.ndarray) -> Tensor:
    return logits_from_hidden(model, forward_blocks(model, embed_tokens(model, tokens)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

MIN_CORPUS_BYTES = 64 * 1024


@dataclass
class TrainStats:
    steps: int
    initial_loss: float | None
    final_loss: float | None
    losses: list[float]


def _one_hot(ids: np.ndarray, vocab: int) -> np.ndarray:
    out = np.zeros((ids.size, vocab), dtype=np.float32)
    out[np.arange(ids.size), ids] = 1.0
    return out


def next_token_loss(model: Model, tokens: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over one sequence (teacher-forced)."""
    logits = forward_full(model, tokens[:-1])
    targets = _one_hot(tokens[1:], model.config.vocab_size)
    return cross_entropy(Tensor(targets), logits,
                         candidate_is_logits=True, target_is_logits=False)


def train_toy(model: Model, corpus: bytes, steps: int, lr: float, seed: int,
              seq_len: int = 128) -> TrainStats:
    """Train in place on random corpus windows; fully seeded."""
    if len(corpus) < MIN_CORPUS_BYTES:
        raise ContractError(
            f"train_toy: corpus has {len(corpus)} bytes, need >= {MIN_CORPUS_BYTES}")
    if seq_len + 1 > len(corpus):
        raise ContractError("train_toy: seq_len exceeds corpus")
    if seq_len >= model.config.max_seq_len + 1:
        seq_len = model.config.max_seq_len
    rng = np.random.default_rng(seed)
    ids = tokenize(corpus)
    opt = Adam(model.trainables(), lr=lr)
    losses: list[float] = []
    for _ in range(steps):
        start = int(rng.integers(0, len(ids) - seq_len - 1))
        window = ids[start:start + seq_len + 1]
        opt.zero_grad()
        loss = next_token_loss(model, window)
        backward(loss)
        opt.step()
        losses.append(loss.item())
    if steps == 0:
        return TrainStats(0, None, None, [])
    return TrainStats(steps, losses[0], losses[-1], losses)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def _write_tensor(buf: io.BufferedIOBase, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", data.ndim))
    for extent in data.shape:
        buf.write(struct.pack("<I", extent))
    buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return chunk


def _read_tensor(buf: io.BufferedIOBase) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2, "tensor name length"))
    name = _read_exact(buf, name_len, "tensor name").decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(buf, 1, f"rank of {name}"))
    shape = tuple(struct.unpack("<I", _read_exact(buf, 4, f"extent of {name}"))[0]
                  for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(buf, 4 * count, f"data of {name}")
    return name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_json = model.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(config_json)))
    buf.write(config_json)
    for name, tensor in model.named_tensors():
        _write_tensor(buf, name, tensor.data)
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path, requires_grad: bool = False) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4:
            raise FormatError("checkpoint truncated while reading magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = ModelConfig.from_json(_read_exact(fh, config_len, "config").decode("utf-8"))

        model = init_model(config, seed=0, requires_grad=requires_grad)
        for expected_name, tensor in model.named_tensors():
            name, data = _read_tensor(fh)
            if name != expected_name:
                raise FormatError(
                    f"checkpoint tensor order: expected {expected_name!r}, found {name!r}")
            if data.shape != tensor.data.shape:
                raise FormatError(
                    f"checkpoint tensor {name!r}: shape {data.shape} != {tensor.data.shape}")
            tensor.data = data.astype(np.float32)
        if fh.read(1):
            raise FormatError("checkpoint has trailing bytes")
    return model
