"""Uniform-grid weight quantizers with learnable parameters.

Three parameterizations over the same b-bit grid, all trained through a
straight-through rounding estimator:

* flexround - learnable division scales (per-group s1/s3, elementwise s2);
  the output is rescaled by s1, so s1 is the effective grid step.
* omniquant - learnable clipping factors gamma/beta in [0, 1] shrinking the
  per-group min/max range; the step h is derived, the weight stays frozen.
* blockap  - learnable per-group step s plus a trainable copy of the weight.

Weights are [c_out x c_in]; group scales are [c_out x c_in/g] and broadcast
by repeating each entry g times along the input-channel axis. Positive
quantities are stored as logs and exponentiated so Adam stays unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import (Tensor, clip, div, exp, mul, repeat_cols, scale, sigmoid,
                     ste_round, sub)

METHODS = ("flexround", "omniquant", "blockap")

SCALE_FLOOR = 1e-8
# logistic(raw) = 0.999, i.e. near-identity clipping at init
_RAW_FOR_0999 = float(np.log(0.999 / 0.001))


@dataclass(frozen=True)
class QuantScheme:
    """b-bit uniform grid: group size (0 = per-channel) and clamp range."""

    bits: int
    group_size: int = 0
    clamp: str = "symmetric_signed"

    def __post_init__(self):
        if self.bits < 2:
            raise ContractError(f"QuantScheme: bits must be >= 2, got {self.bits}")
        if self.group_size < 0:
            raise ContractError(f"QuantScheme: negative group size {self.group_size}")
        if self.clamp not in ("symmetric_signed", "asymmetric_unsigned"):
            raise ContractError(f"QuantScheme: unknown clamp {self.clamp!r}")

    @property
    def levels(self) -> int:
        return 1 << self.bits

    def int_range(self) -> tuple[int, int]:
        if self.clamp == "symmetric_signed":
            half = 1 << (self.bits - 1)
            return -half, half - 1
        return 0, self.levels - 1

    def effective_group(self, c_in: int) -> int:
        """Group size resolved against a concrete layer width.

        0 or anything >= c_in means per-channel; otherwise g must divide c_in.
        """
        if self.group_size == 0 or self.group_size >= c_in:
            return c_in
        if c_in % self.group_size != 0:
            raise ContractError(
                f"QuantScheme: group size {self.group_size} does not divide c_in={c_in}")
        return self.group_size

    def n_groups(self, c_in: int) -> int:
        return c_in // self.effective_group(c_in)


@dataclass
class FlexRoundParams:
    """log s1, log s2, log s3; s1/s3 are [c_out x G], s2 is [c_out x c_in]."""

    log_s1: Tensor
    log_s2: Tensor
    log_s3: Tensor

    def trainables(self) -> list[Tensor]:
        return [self.log_s1, self.log_s2, self.log_s3]


@dataclass
class OmniQuantParams:
    """Raw logits for gamma/beta plus frozen per-group weight extrema."""

    gamma_raw: Tensor
    beta_raw: Tensor
    group_max: np.ndarray
    group_min: np.ndarray

    def trainables(self) -> list[Tensor]:
        return [self.gamma_raw, self.beta_raw]


@dataclass
class BlockAPParams:
    """log step [c_out x G] and the trainable weight copy."""

    log_s: Tensor
    weight: Tensor

    def trainables(self) -> list[Tensor]:
        return [self.log_s, self.weight]


@dataclass
class QuantizeResult:
    """Quantized weight plus the grid decomposition wq = step_expanded * q."""

    wq: Tensor
    q: Tensor          # clamped integers (stored as float32 integral values)
    step: Tensor       # effective per-group rescale [c_out x G]


def _group_stats(w: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    c_out, c_in = w.shape
    grouped = w.reshape(c_out, c_in // g, g)
    return grouped.max(axis=2), grouped.min(axis=2)


def _init_step(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Absmax (symmetric) or range (asymmetric) grid step, floored."""
    g = scheme.effective_group(w.shape[1])
    gmax, gmin = _group_stats(w, g)
    if scheme.clamp == "symmetric_signed":
        denom = (1 << (scheme.bits - 1)) - 1
        step = np.maximum(np.abs(gmax), np.abs(gmin)) / denom
    else:
        step = (gmax - gmin) / (scheme.levels - 1)
    return np.maximum(step, SCALE_FLOOR).astype(np.float32)


def init_params(method: str, w: np.ndarray | Tensor, scheme: QuantScheme):
    """Initialize learnable parameters for one linear layer's weight."""
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float32)
    if data.ndim != 2:
        raise ShapeError(f"init_params: weight must be 2-D, got {data.shape}")
    c_out, c_in = data.shape
    g = scheme.effective_group(c_in)
    n_groups = c_in // g
    if method == "flexround":
        log_s1 = Tensor(np.log(_init_step(data, scheme)), requires_grad=True)
        log_s2 = Tensor(np.zeros((c_out, c_in), dtype=np.float32), requires_grad=True)
        log_s3 = Tensor(np.zeros((c_out, n_groups), dtype=np.float32), requires_grad=True)
        return FlexRoundParams(log_s1, log_s2, log_s3)
    if method == "omniquant":
        raw = np.full((c_out, n_groups), _RAW_FOR_0999, dtype=np.float32)
        gmax, gmin = _group_stats(data, g)
        return OmniQuantParams(Tensor(raw.copy(), requires_grad=True),
                               Tensor(raw.copy(), requires_grad=True),
                               gmax.astype(np.float32), gmin.astype(np.float32))
    if method == "blockap":
        log_s = Tensor(np.log(_init_step(data, scheme)), requires_grad=True)
        return BlockAPParams(log_s, Tensor(data.copy(), requires_grad=True))
    raise ContractError(f"init_params: unknown method {method!r}")


def _grid_project(w: Tensor, step: Tensor, divisor: Tensor, scheme: QuantScheme,
                  g: int) -> QuantizeResult:
    """wq = step_b * clamp(round(w / divisor_b)) with both scales expanded."""
    if np.any(divisor.data <= 0.0) or not np.all(np.isfinite(divisor.data)):
        raise NumericError("quantize: non-positive effective divisor")
    lo, hi = scheme.int_range()
    q = clip(ste_round(div(w, repeat_cols(divisor, g))), float(lo), float(hi))
    wq = mul(repeat_cols(step, g), q)
    return QuantizeResult(wq=wq, q=q, step=step)


def quantize_flexround(w: Tensor, p: FlexRoundParams, scheme: QuantScheme) -> QuantizeResult:
    """wq = s1 * round(w / (s1 (.) s2 (.) s3)), integers clamped to the grid."""
    c_in = w.shape[1]
    g = scheme.effective_group(c_in)
    s1 = exp(p.log_s1)
    s2 = exp(p.log_s2)
    s3 = exp(p.log_s3)
    divisor_full = mul(mul(repeat_cols(s1, g), s2), repeat_cols(s3, g))
    if np.any(divisor_full.data <= 0.0):
        raise NumericError("quantize_flexround: non-positive effective divisor")
    lo, hi = scheme.int_range()
    q = clip(ste_round(div(w, divisor_full)), float(lo), float(hi))
    wq = mul(repeat_cols(s1, g), q)
    return QuantizeResult(wq=wq, q=q, step=s1)


def quantize_omniquant(w: Tensor, p: OmniQuantParams, scheme: QuantScheme) -> QuantizeResult:
    """wq = h * round(w / h) with h = (gamma*max - beta*min) / (2^b - 1)."""
    g = scheme.effective_group(w.shape[1])
    gamma = sigmoid(p.gamma_raw)
    beta = sigmoid(p.beta_raw)
    span = sub(mul(gamma, Tensor(p.group_max)), mul(beta, Tensor(p.group_min)))
    h = clip(scale(span, 1.0 / (scheme.levels - 1)), SCALE_FLOOR, None)
    return _grid_project(w, h, h, scheme, g)


def quantize_blockap(w: Tensor, p: BlockAPParams, scheme: QuantScheme) -> QuantizeResult:
    """wq = s * round(w / s); gradients reach both s and the weight copy."""
    g = scheme.effective_group(w.shape[1])
    s = exp(p.log_s)
    return _grid_project(w, s, s, scheme, g)


def quantize(w: Tensor, params, scheme: QuantScheme) -> QuantizeResult:
    """Dispatch on the parameter type; blockap quantizes its own weight copy."""
    if isinstance(params, FlexRoundParams):
        return quantize_flexround(w, params, scheme)
    if isinstance(params, OmniQuantParams):
        return quantize_omniquant(w, params, scheme)
    if isinstance(params, BlockAPParams):
        return quantize_blockap(params.weight, params, scheme)
    raise ContractError(f"quantize: unknown params type {type(params).__name__}")


def absmax_quantize(w: np.ndarray, scheme: QuantScheme) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plain round-to-nearest onto the init grid (no learning, no graph).

    Returns (wq, q_ints, step); identical grid arithmetic to quantize_* at
    their initialization point.
    """
    w = np.asarray(w, dtype=np.float32)
    g = scheme.effective_group(w.shape[1])
    step = _init_step(w, scheme)
    lo, hi = scheme.int_range()
    step_b = np.repeat(step, g, axis=1)
    q = np.clip(np.rint(w / step_b), lo, hi).astype(np.float32)
    return (step_b * q).astype(np.float32), q.astype(np.int32), step
