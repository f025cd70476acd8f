"""Block floating-point formats and exact reference arithmetic.

Conventions used throughout the package:

* Exponents are stored unbiased.
* An FP mantissa carries ``man_bits + 1`` bits with the implicit bit made
  explicit, so a normal value is ``mantissa * 2**(exponent - man_bits)``.
* A BFP mantissa of width ``W`` has its radix point after the top bit, so
  element ``i`` of a block is ``(-1)**s_i * m_i * 2**(shared_exp - (W - 1))``.
* Mantissa alignment truncates (arithmetic right shift of the magnitude).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ExponentOverflow, LengthMismatch, NonFiniteInput

ZERO_BLOCK_EXP = 0
DEFAULT_MAN_WIDTH = 8
MIN_MAN_WIDTH = 1
MAX_MAN_WIDTH = 24

__all__ = [
    "FpFormat",
    "FP16",
    "BF16",
    "FP32",
    "FP64",
    "FpScalar",
    "BfpBlock",
    "BlockingKind",
    "BlockingStrategy",
    "BfpMatrix",
    "ZERO_BLOCK_EXP",
    "decompose",
    "round_to_format",
    "quantize_block",
    "quantize_values",
    "dequantize_block",
    "quantize_matrix",
    "bfp_dot_reference",
    "dot_to_float",
    "leading_zero_count",
]


@dataclass(frozen=True)
class FpFormat:
    exp_bits: int
    man_bits: int
    bias: int | None = None

    def __post_init__(self):
        if self.exp_bits < 2 or self.man_bits < 1:
            raise ValueError(f"invalid format e{self.exp_bits}m{self.man_bits}")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (self.exp_bits - 1) - 1)

    @property
    def emax(self) -> int:
        # top biased code is reserved for Inf/NaN
        return 2**self.exp_bits - 2 - self.bias

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def width(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def max_value(self) -> float:
        return math.ldexp(2 ** (self.man_bits + 1) - 1, self.emax - self.man_bits)

    def __str__(self):
        return f"e{self.exp_bits}m{self.man_bits}"


FP16 = FpFormat(5, 10)
BF16 = FpFormat(8, 7)
FP32 = FpFormat(8, 23)
FP64 = FpFormat(11, 52)


@dataclass(frozen=True)
class FpScalar:
    sign: int
    exponent: int
    mantissa: int
    fmt: FpFormat = FP32

    @property
    def is_zero(self) -> bool:
        return self.mantissa == 0

    @property
    def is_normal(self) -> bool:
        return self.mantissa >> self.fmt.man_bits == 1

    @property
    def value(self) -> float:
        v = math.ldexp(self.mantissa, self.exponent - self.fmt.man_bits)
        return -v if self.sign else v

    def pack(self) -> int:
        """Encode into the IEEE-style bit pattern of ``fmt``."""
        f = self.fmt
        if self.is_normal:
            biased = self.exponent + f.bias
            frac = self.mantissa - (1 << f.man_bits)
        else:
            biased, frac = 0, self.mantissa
        return (self.sign << (f.exp_bits + f.man_bits)) | (biased << f.man_bits) | frac

    @classmethod
    def unpack(cls, bits: int, fmt: FpFormat = FP32) -> "FpScalar":
        sign = (bits >> (fmt.exp_bits + fmt.man_bits)) & 1
        biased = (bits >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
        frac = bits & ((1 << fmt.man_bits) - 1)
        if biased == (1 << fmt.exp_bits) - 1:
            raise NonFiniteInput(f"bit pattern {bits:#x} encodes Inf/NaN")
        if biased == 0:
            return cls(sign, fmt.emin, frac, fmt)
        return cls(sign, biased - fmt.bias, frac | (1 << fmt.man_bits), fmt)

    def normalized(self) -> tuple[int, int]:
        """Return ``(exponent, mantissa)`` with the top mantissa bit set.

        Subnormals are shifted up with a correspondingly smaller exponent,
        which may fall below ``fmt.emin``.
        """
        if self.mantissa == 0:
            return self.fmt.emin, 0
        shift = self.fmt.man_bits + 1 - self.mantissa.bit_length()
        return self.exponent - shift, self.mantissa << shift


def _floor_log2_ratio(n: int, d: int) -> int:
    e = n.bit_length() - d.bit_length()
    if (n << max(0, -e)) < (d << max(0, e)):
        e -= 1
    return e


def from_ratio(sign: int, n: int, d: int, fmt: FpFormat) -> FpScalar:
    """Round the positive rational ``n/d`` to ``fmt`` (round-to-nearest-even)."""
    if n == 0:
        return FpScalar(sign, fmt.emin, 0, fmt)
    e = max(_floor_log2_ratio(n, d), fmt.emin)
    s = fmt.man_bits - e
    num, den = (n << s, d) if s >= 0 else (n, d << -s)
    q, r = divmod(num, den)
    if 2 * r > den or (2 * r == den and q & 1):
        q += 1
    if q >> (fmt.man_bits + 1):
        q >>= 1
        e += 1
    if e > fmt.emax:
        raise ExponentOverflow(f"value exceeds the range of {fmt}")
    return FpScalar(sign, e, q, fmt)


def decompose(value: float, fmt: FpFormat = FP32) -> FpScalar:
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteInput(f"cannot decompose {value!r}")
    sign = 1 if math.copysign(1.0, value) < 0 else 0
    n, d = abs(value).as_integer_ratio()
    return from_ratio(sign, n, d, fmt)


def round_to_format(x, fmt: FpFormat = FP32) -> np.ndarray:
    """Vectorized round-to-nearest-even of float64 data onto ``fmt``.

    Agrees element for element with :func:`decompose`.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    if fmt.man_bits >= 52 and fmt.exp_bits >= 11:
        return x.copy()
    a = np.abs(x)
    _, ex = np.frexp(a)
    e = np.maximum(ex - 1, fmt.emin)
    q = np.rint(np.ldexp(a, fmt.man_bits - e))
    out = np.copysign(np.ldexp(q, e - fmt.man_bits), x)
    if np.any(np.abs(out) > fmt.max_value):
        raise ExponentOverflow(f"value exceeds the range of {fmt}")
    return out


@dataclass(frozen=True)
class BfpBlock:
    shared_exp: int
    signs: tuple[int, ...]
    mantissas: tuple[int, ...]
    man_width: int = DEFAULT_MAN_WIDTH

    def __post_init__(self):
        if len(self.signs) != len(self.mantissas):
            raise LengthMismatch("signs and mantissas differ in length")
        limit = 1 << self.man_width
        if any(not 0 <= m < limit for m in self.mantissas):
            raise ValueError(f"mantissa outside {self.man_width}-bit range")

    @property
    def block_len(self) -> int:
        return len(self.mantissas)

    def signed_mantissas(self) -> list[int]:
        return [-m if s else m for s, m in zip(self.signs, self.mantissas)]

    def values(self) -> list[float]:
        scale = self.shared_exp - (self.man_width - 1)
        return [math.ldexp(m, scale) for m in self.signed_mantissas()]

    def render(self) -> str:
        """Debug text: shared exponent followed by signed hex mantissas."""
        digits = (self.man_width + 3) // 4
        body = " ".join(
            f"{'-' if s else '+'}{m:0{digits}x}" for s, m in zip(self.signs, self.mantissas)
        )
        return f"e={self.shared_exp:+d} w={self.man_width} [{body}]"


def _check_width(man_width: int):
    if not MIN_MAN_WIDTH <= man_width <= MAX_MAN_WIDTH:
        raise ValueError(f"mantissa width {man_width} outside [{MIN_MAN_WIDTH}, {MAX_MAN_WIDTH}]")


def round_mantissa(exponent: int, mantissa: int, src_bits: int, man_width: int) -> tuple[int, int]:
    """Round a normalized ``src_bits``-wide mantissa to ``man_width`` bits (RNE).

    Returns the possibly incremented exponent and the new mantissa.
    """
    drop = src_bits - man_width
    if drop <= 0:
        return exponent, mantissa << -drop
    q, r = mantissa >> drop, mantissa & ((1 << drop) - 1)
    half = 1 << (drop - 1)
    if r > half or (r == half and q & 1):
        q += 1
    if q >> man_width:
        q >>= 1
        exponent += 1
    return exponent, q


def align(shared_exp: int, exponents: Sequence[int], mantissas: Sequence[int]) -> list[int]:
    out = []
    for e, m in zip(exponents, mantissas):
        shift = shared_exp - e
        out.append(m >> shift if shift < 256 else 0)
    return out


def quantize_block(values: Sequence[FpScalar], man_width: int = DEFAULT_MAN_WIDTH) -> BfpBlock:
    _check_width(man_width)
    if len(values) == 0:
        raise ValueError("empty block")
    signs, exps, mants = [], [], []
    for v in values:
        if not isinstance(v, FpScalar):
            raise TypeError("quantize_block expects FpScalar elements")
        signs.append(v.sign)
        if v.is_zero:
            exps.append(None)
            mants.append(0)
            continue
        e, m = v.normalized()
        e, m = round_mantissa(e, m, v.fmt.man_bits + 1, man_width)
        exps.append(e)
        mants.append(m)
    live = [e for e in exps if e is not None]
    if not live:
        return BfpBlock(ZERO_BLOCK_EXP, tuple(signs), tuple(mants), man_width)
    shared = max(live)
    aligned = align(shared, [shared if e is None else e for e in exps], mants)
    return BfpBlock(shared, tuple(signs), tuple(aligned), man_width)


def quantize_values(values: Iterable[float], man_width: int = DEFAULT_MAN_WIDTH,
                    fmt: FpFormat = FP32) -> BfpBlock:
    return quantize_block([decompose(v, fmt) for v in values], man_width)


def dequantize_block(block: BfpBlock, fmt: FpFormat = FP32) -> list[FpScalar]:
    out = []
    w = block.man_width
    for s, m in zip(block.signs, block.mantissas):
        if m == 0:
            out.append(FpScalar(s, fmt.emin, 0, fmt))
            continue
        lz = leading_zero_count(m, w)
        exponent = block.shared_exp - lz
        norm = m << lz
        # norm * 2**(exponent - (w - 1)), rounded onto fmt
        scale = exponent - (w - 1)
        n, d = (norm << scale, 1) if scale >= 0 else (norm, 1 << -scale)
        out.append(from_ratio(s, n, d, fmt))
    return out


def leading_zero_count(value: int, width: int) -> int:
    """Leading zeros of ``|value|`` in a ``width``-bit field; ``width`` for zero."""
    if width < 1:
        raise ValueError("width must be >= 1")
    n = abs(int(value)).bit_length()
    if n > width:
        raise ValueError(f"|{value}| does not fit in {width} bits")
    return width - n


def bfp_dot_reference(a: BfpBlock, b: BfpBlock) -> tuple[int, int]:
    """Exact block dot product as ``(e_a + e_b, signed mantissa sum)``."""
    if a.block_len != b.block_len:
        raise LengthMismatch(f"block lengths {a.block_len} != {b.block_len}")
    acc = sum(x * y for x, y in zip(a.signed_mantissas(), b.signed_mantissas()))
    return a.shared_exp + b.shared_exp, acc


def dot_to_float(exponent: int, acc: int, man_width: int) -> float:
    return math.ldexp(acc, exponent - 2 * (man_width - 1))


# -- matrices ---------------------------------------------------------------


class BlockingKind(str, Enum):
    MATRIX = "matrix"
    ROW_COLUMN = "row-column"
    SEGMENT = "segment"


@dataclass(frozen=True)
class BlockingStrategy:
    kind: BlockingKind = BlockingKind.ROW_COLUMN
    segment_len: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockingKind(self.kind))
        if self.kind is BlockingKind.SEGMENT:
            if self.segment_len is None or self.segment_len < 2:
                raise ValueError("segment-wise blocking needs segment_len >= 2")
        elif self.segment_len is not None:
            raise ValueError("segment_len only applies to segment-wise blocking")

    @classmethod
    def parse(cls, text: str) -> "BlockingStrategy":
        """``matrix``, ``row-column`` or ``segment:S``."""
        kind, _, seg = text.partition(":")
        return cls(BlockingKind(kind), int(seg) if seg else None)

    def __str__(self):
        if self.kind is BlockingKind.SEGMENT:
            return f"segment:{self.segment_len}"
        return self.kind.value


MATRIX_WISE = BlockingStrategy(BlockingKind.MATRIX)
ROW_COLUMN_WISE = BlockingStrategy(BlockingKind.ROW_COLUMN)


def _quantize_rows(x: np.ndarray, man_width: int):
    """Quantize every row of a 2-D float64 array as one block.

    Returns (shared_exps, signs, mantissas) as int64 arrays.
    """
    a = np.abs(x)
    nz = a > 0
    _, ex = np.frexp(a)
    e = ex.astype(np.int64) - 1
    q = np.rint(np.ldexp(a, (man_width - 1) - e)).astype(np.int64)
    carry = q >> man_width
    q = q >> carry
    e = e + carry
    low = np.iinfo(np.int64).min // 2
    e = np.where(nz, e, low)
    shared = e.max(axis=1) if x.shape[1] else np.zeros(x.shape[0], np.int64)
    shared = np.where(nz.any(axis=1), shared, ZERO_BLOCK_EXP)
    shift = np.clip(shared[:, None] - e, 0, 63)
    mant = np.where(nz, q >> shift, 0)
    signs = np.signbit(x).astype(np.int64)
    return shared.astype(np.int64), signs, mant


@dataclass
class BfpMatrix:
    """A quantized matrix stored as per-block arrays.

    ``shared_exps`` has one entry per block. ``signs`` and ``mantissas`` have
    the matrix's shape; ``block_index`` maps each element to its block.
    """

    rows: int
    cols: int
    strategy: BlockingStrategy
    orientation: str
    man_width: int
    shared_exps: np.ndarray
    signs: np.ndarray
    mantissas: np.ndarray
    block_index: np.ndarray

    @property
    def num_blocks(self) -> int:
        return len(self.shared_exps)

    @property
    def signed_mantissas(self) -> np.ndarray:
        return np.where(self.signs == 1, -self.mantissas, self.mantissas)

    def element_exps(self) -> np.ndarray:
        return self.shared_exps[self.block_index]

    def dequantize(self) -> np.ndarray:
        return np.ldexp(self.signed_mantissas.astype(np.float64),
                        self.element_exps() - (self.man_width - 1))

    @property
    def blocks(self) -> list[BfpBlock]:
        out = []
        # row blocks list members left to right, column blocks top to bottom
        if self.orientation == "column":
            bidx, sg, mn = self.block_index.T, self.signs.T, self.mantissas.T
        else:
            bidx, sg, mn = self.block_index, self.signs, self.mantissas
        order = np.argsort(bidx.ravel(), kind="stable")
        flat_b = bidx.ravel()[order]
        flat_s = sg.ravel()[order]
        flat_m = mn.ravel()[order]
        bounds = np.searchsorted(flat_b, np.arange(self.num_blocks + 1))
        for k in range(self.num_blocks):
            lo, hi = bounds[k], bounds[k + 1]
            out.append(BfpBlock(int(self.shared_exps[k]),
                                tuple(int(s) for s in flat_s[lo:hi]),
                                tuple(int(m) for m in flat_m[lo:hi]),
                                self.man_width))
        return out


def quantize_matrix(m, strategy: BlockingStrategy = ROW_COLUMN_WISE, orientation: str = "row",
                    man_width: int = DEFAULT_MAN_WIDTH, fmt: FpFormat | None = FP32) -> BfpMatrix:
    """Quantize a matrix block by block.

    ``orientation`` is ``"row"`` (blocks run along rows, as for the left GEMM
    operand) or ``"column"`` (blocks run down columns, right operand). Input
    values are first rounded onto ``fmt``; pass ``fmt=None`` to use them as
    exact doubles.
    """
    _check_width(man_width)
    if orientation not in ("row", "column"):
        raise ValueError(f"orientation must be 'row' or 'column', got {orientation!r}")
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("quantize_matrix expects a 2-D matrix")
    x = round_to_format(x, fmt) if fmt is not None else x
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    rows, cols = x.shape
    work = x if orientation == "row" else x.T
    n_vec, vec_len = work.shape

    if strategy.kind is BlockingKind.MATRIX:
        shared, signs, mant = _quantize_rows(work.reshape(1, -1), man_width)
        bidx = np.zeros(work.shape, np.int64)
        signs, mant = signs.reshape(work.shape), mant.reshape(work.shape)
    elif strategy.kind is BlockingKind.ROW_COLUMN:
        shared, signs, mant = _quantize_rows(work, man_width)
        bidx = np.repeat(np.arange(n_vec)[:, None], vec_len, axis=1)
    else:
        s = strategy.segment_len
        n_seg = -(-vec_len // s)
        signs = np.zeros(work.shape, np.int64)
        mant = np.zeros(work.shape, np.int64)
        shared = np.zeros(n_vec * n_seg, np.int64)
        bidx = np.zeros(work.shape, np.int64)
        for k in range(n_seg):
            lo, hi = k * s, min((k + 1) * s, vec_len)
            sh, sg, mn = _quantize_rows(work[:, lo:hi], man_width)
            ids = np.arange(n_vec) * n_seg + k
            shared[ids] = sh
            signs[:, lo:hi] = sg
            mant[:, lo:hi] = mn
            bidx[:, lo:hi] = ids[:, None]

    if orientation == "column":
        signs, mant, bidx = signs.T, mant.T, bidx.T
    return BfpMatrix(rows, cols, strategy, orientation, man_width,
                     np.asarray(shared, np.int64), np.ascontiguousarray(signs),
                     np.ascontiguousarray(mant), np.ascontiguousarray(bidx))


def fp32_bits(value: float) -> int:
    """Host encoding of ``value`` as IEEE single precision (test oracle)."""
    return struct.unpack(">I", struct.pack(">f", value))[0]
