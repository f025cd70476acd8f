"""Stage-wise FP<->BFP converters with dual-modular redundancy.

Both converters keep their input latches outside the replicated logic: the
two replicas read the same latched operands, so a fault in a latch corrupts
both replicas identically and is invisible to the bitwise comparison. That is
the price of sharing inputs; it also means fault-free replicas can never
diverge.

Forward path (one block every ``FP2BFP_CYCLES`` cycles)::

    0 latch -> 1 comparator (max_exp) -> 2 subtractor (shift) -> 3 shifter (out_man) -> 4 emit

Reverse path (``BFP2FP_CYCLES`` per block)::

    0 latch -> 1 LZC (lzc) -> 2 shifter + exponent update (norm_man, out_exp) -> 3 emit

Replica registers are compared on every cycle in which a consumer reads
them, so any corrupted value that reaches an output is caught in the same
cycle it is used. A conversion raises at most one event.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bfp_core import (DEFAULT_MAN_WIDTH, FP32, ZERO_BLOCK_EXP, BfpBlock, FpFormat, FpScalar,
                       _check_width, decompose, from_ratio, round_mantissa)
from .errors import ExponentOverflow, NonFiniteInput
from .fault_injection import FaultSpec, Manifest, RegisterBank, RegisterFile
from .protection import Checker, DetectionEvent, clog2

FP2BFP_CYCLES = 5
BFP2FP_CYCLES = 4
CHECK_MODES = ("dmr", "fuzzy", "off")
REPLICAS = ("a", "b")


def _bit_length(x: np.ndarray) -> np.ndarray:
    """Elementwise bit length of non-negative int64 values (< 2**53)."""
    _, e = np.frexp(x.astype(np.float64))
    return np.where(x > 0, e, 0).astype(np.int64)


def _replica_ids(name: str, reps: int, n: int | None = None) -> list[str]:
    if n is None:
        return [f"{name}.{r}" for r in REPLICAS[:reps]]
    return [f"{name}.{r}.e{i}" for r in REPLICAS[:reps] for i in range(n)]


class _DmrEngine:
    """Collects replica mismatches; one event per conversion."""

    def __init__(self, name: str):
        self.name = name
        self.fired = False
        self.events: list[DetectionEvent] = []

    def start(self):
        self.fired = False

    def check(self, cycle: int, reg: str, values: np.ndarray):
        if self.fired or values.shape[0] < 2:
            return
        if not np.array_equal(values[0], values[1]):
            self.flag(cycle, reg)

    def flag(self, cycle: int, reg: str):
        if not self.fired:
            self.fired = True
            self.events.append(DetectionEvent(Checker.CONVERTER_DMR, cycle, f"{self.name}.{reg}"))


# -- FP -> BFP -------------------------------------------------------------------


class Fp2BfpConverter:
    """Comparator, subtractor and shifter stages for blocks of ``n`` elements.

    ``check`` selects the protection: ``"dmr"`` duplicates every stage,
    ``"fuzzy"`` duplicates only the exponent stages and checks the aligned
    mantissa's leading-zero pattern, ``"off"`` has a single replica and no
    checker.
    """

    def __init__(self, n: int, man_width: int = DEFAULT_MAN_WIDTH, exp_width: int = 10,
                 check: str = "dmr", name: str = "fp2bfp"):
        _check_width(man_width)
        if check not in CHECK_MODES:
            raise ValueError(f"check must be one of {CHECK_MODES}")
        self.n, self.w, self.exp_width, self.check, self.name = n, man_width, exp_width, check, name
        reps = 1 if check == "off" else 2
        out_reps = 2 if check == "dmr" else 1
        elem = [f"{name}.e{i}" for i in range(n)]
        self.bank = RegisterBank()
        self.in_sign = self.bank.add(RegisterFile("latch", f"{name}.sign", elem, 1, signed=False))
        self.in_exp = self.bank.add(RegisterFile("latch", f"{name}.exp", elem, exp_width))
        self.in_man = self.bank.add(RegisterFile("latch", f"{name}.man", elem, man_width,
                                                 signed=False))
        self.max_exp = self.bank.add(RegisterFile("converter", "max_exp",
                                                  _replica_ids(name, reps), exp_width))
        self.shift = self.bank.add(RegisterFile("converter", "shift", _replica_ids(name, reps, n),
                                                exp_width, (reps, n), signed=False))
        self.out_man = self.bank.add(RegisterFile("converter", "out_man",
                                                  _replica_ids(name, out_reps, n), man_width,
                                                  (out_reps, n), signed=False))
        self.dmr = _DmrEngine(name)
        self.cycle = 0

    def manifest(self) -> Manifest:
        return self.bank.manifest()

    def inject(self, specs: Iterable[FaultSpec], cycle_offset: int = 0, strict: bool = True):
        self.bank.apply(specs, cycle_offset, strict)

    def _prepare(self, values: Sequence[FpScalar]):
        if len(values) != self.n:
            raise ValueError(f"converter handles blocks of {self.n}, got {len(values)}")
        signs = np.zeros(self.n, np.int64)
        exps = np.zeros(self.n, np.int64)
        mans = np.zeros(self.n, np.int64)
        for i, v in enumerate(values):
            signs[i] = v.sign
            if v.is_zero:
                continue
            e, m = v.normalized()
            exps[i], mans[i] = round_mantissa(e, m, v.fmt.man_bits + 1, self.w)
        return self._check_range(signs, exps, mans)

    def _prepare_floats(self, x: np.ndarray):
        """Vectorized front end for values already representable in the input format."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"converter handles blocks of {self.n}, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteInput("block contains NaN or Inf")
        a = np.abs(x)
        _, ex = np.frexp(a)
        e = (ex - 1).astype(np.int64)
        m = np.rint(np.ldexp(a, self.w - 1 - e)).astype(np.int64)
        carry = m >> self.w != 0
        m = np.where(carry, m >> 1, m)
        e = np.where(a > 0, e + carry, 0)
        return self._check_range(np.signbit(x).astype(np.int64), e, m)

    def _check_range(self, signs, exps, mans):
        lo, hi = -(1 << (self.exp_width - 1)), (1 << (self.exp_width - 1)) - 1
        if exps.min() < lo or exps.max() > hi:
            raise ExponentOverflow(f"exponent exceeds the {self.exp_width}-bit latch")
        return signs, exps, mans

    def convert(self, values: Sequence[FpScalar]) -> BfpBlock:
        block, _ = self.convert_many([values])
        return block[0]

    def convert_many(self, blocks: Sequence[Sequence[FpScalar]],
                     start_cycle: int | None = None) -> tuple[list[BfpBlock], list[DetectionEvent]]:
        if start_cycle is not None:
            self.cycle = start_cycle
        first_event = len(self.dmr.events)
        out = [self._convert_one(self._prepare(vals)) for vals in blocks]
        return out, self.dmr.events[first_event:]

    def convert_rows(self, x, start_cycle: int | None = None
                     ) -> tuple[list[BfpBlock], list[DetectionEvent]]:
        """Convert each row of a float matrix as one block, in row order."""
        if start_cycle is not None:
            self.cycle = start_cycle
        first_event = len(self.dmr.events)
        out = [self._convert_one(self._prepare_floats(row)) for row in np.asarray(x)]
        return out, self.dmr.events[first_event:]

    def _convert_one(self, prepared) -> BfpBlock:
        signs, exps, mans = prepared
        w = self.w
        self.dmr.start()
        block = None
        for tau in range(FP2BFP_CYCLES):
            t = self.cycle
            if tau == 0:
                self.in_sign.write(signs)
                self.in_exp.write(exps)
                self.in_man.write(mans)
            else:
                e_in = self.in_exp.read(t)
                m_in = self.in_man.read(t)
                live = m_in != 0
                mx = self.max_exp.read(t)
                sh = self.shift.read(t)
                if tau >= 2:
                    self.dmr.check(t, "max_exp", mx)
                if tau >= 3:
                    self.dmr.check(t, "shift", sh)
                if tau == 1:
                    top = e_in[live].max() if live.any() else ZERO_BLOCK_EXP
                    self.max_exp.write(np.full(self.max_exp.shape, top))
                elif tau == 2:
                    self.shift.write(np.where(live[None, :], mx[:, None] - e_in[None, :], 0))
                elif tau == 3:
                    k = self.out_man.shape[0]
                    s = sh[:k]
                    self.out_man.write(np.where(s < w, m_in[None, :] >> np.minimum(s, w), 0))
                elif tau == 4:
                    om = self.out_man.read(t)
                    if self.check == "dmr":
                        self.dmr.check(t, "out_man", om)
                    elif self.check == "fuzzy":
                        self._fuzzy(t, om[0], sh[0], m_in)
                    block = BfpBlock(int(mx[0]), tuple(int(x) for x in self.in_sign.read(t)),
                                     tuple(int(x) for x in om[0]), w)
            self.cycle += 1
        return block

    def _fuzzy(self, t: int, out: np.ndarray, shift: np.ndarray, m_in: np.ndarray):
        """Leading-bit fidelity: the implicit one must land exactly ``shift`` places down."""
        w = self.w
        expect = np.where((m_in != 0) & (shift < w), w - shift, 0)
        if np.any(_bit_length(out) != expect):
            self.dmr.flag(t, "out_man")


def fp_to_bfp(values, man_width: int = DEFAULT_MAN_WIDTH, dmr: bool = True,
              fmt: FpFormat = FP32, plan=None) -> tuple[BfpBlock, list[DetectionEvent]]:
    """Convert one block of FP values (floats or :class:`FpScalar`)."""
    vals = [v if isinstance(v, FpScalar) else decompose(v, fmt) for v in values]
    if not vals:
        raise ValueError("empty block")
    conv = Fp2BfpConverter(len(vals), man_width, check="dmr" if dmr else "off")
    if plan is not None:
        conv.inject(getattr(plan, "specs", plan))
    blocks, events = conv.convert_many([vals])
    return blocks[0], events


# -- BFP -> FP -------------------------------------------------------------------


@dataclass
class Bfp2FpResult:
    scalars: list[FpScalar] | None
    values: np.ndarray
    events: list[DetectionEvent] = field(default_factory=list)

    def to_scalars(self, fmt: FpFormat = FP32) -> list[FpScalar]:
        """Decode the emitted values (all exactly representable in ``fmt``)."""
        if self.scalars is None:
            self.scalars = [decompose(float(v), fmt) for v in self.values]
        return self.scalars


class Bfp2FpConverter:
    """LZC, normalizing shifter and exponent update for ``n`` elements.

    Element ``i`` has value ``mag[i] * 2**(exp[i] - (in_width - 1))``; for a
    plain BFP block every ``exp[i]`` is the shared exponent and ``in_width``
    is the mantissa width. Wider inputs (array accumulators) use the same
    hardware with a wider datapath.
    """

    def __init__(self, n: int, in_width: int = DEFAULT_MAN_WIDTH, fmt: FpFormat = FP32,
                 exp_width: int = 12, check: str = "dmr", name: str = "bfp2fp",
                 overflow: str = "raise", fuzzy_window: int = 4):
        if check not in CHECK_MODES:
            raise ValueError(f"check must be one of {CHECK_MODES}")
        if overflow not in ("raise", "inf"):
            raise ValueError("overflow must be 'raise' or 'inf'")
        self.n, self.in_width, self.fmt, self.exp_width = n, in_width, fmt, exp_width
        self.check, self.name, self.overflow, self.window = check, name, overflow, fuzzy_window
        reps = 1 if check == "off" else 2
        man_reps = 2 if check == "dmr" else 1
        elem = [f"{name}.e{i}" for i in range(n)]
        self.bank = RegisterBank()
        self.in_sign = self.bank.add(RegisterFile("latch", f"{name}.sign", elem, 1, signed=False))
        self.in_exp = self.bank.add(RegisterFile("latch", f"{name}.exp", elem, exp_width))
        self.in_man = self.bank.add(RegisterFile("latch", f"{name}.man", elem, in_width,
                                                 signed=False))
        self.lzc = self.bank.add(RegisterFile("converter", "lzc", _replica_ids(name, reps, n),
                                              clog2(in_width + 1) or 1, (reps, n), signed=False))
        self.norm_man = self.bank.add(RegisterFile("converter", "norm_man",
                                                   _replica_ids(name, man_reps, n), in_width,
                                                   (man_reps, n), signed=False))
        self.out_exp = self.bank.add(RegisterFile("converter", "out_exp",
                                                  _replica_ids(name, reps, n), exp_width,
                                                  (reps, n)))
        self.dmr = _DmrEngine(name)
        self.cycle = 0

    def manifest(self) -> Manifest:
        return self.bank.manifest()

    def inject(self, specs: Iterable[FaultSpec], cycle_offset: int = 0, strict: bool = True):
        self.bank.apply(specs, cycle_offset, strict)

    def convert_block(self, block: BfpBlock) -> Bfp2FpResult:
        if block.man_width != self.in_width:
            raise ValueError("block width does not match converter datapath")
        return self.convert(block.signs, block.mantissas, [block.shared_exp] * block.block_len)

    def convert(self, signs, mags, exps, start_cycle: int | None = None) -> Bfp2FpResult:
        if start_cycle is not None:
            self.cycle = start_cycle
        signs = np.asarray(signs, np.int64)
        mags = np.asarray(mags, np.int64)
        exps = np.asarray(exps, np.int64)
        if not (signs.shape == mags.shape == exps.shape == (self.n,)):
            raise ValueError(f"converter handles {self.n} elements")
        if np.any(mags < 0) or np.any(mags >> self.in_width):
            raise ValueError(f"magnitudes must fit {self.in_width} bits")
        lo, hi = -(1 << (self.exp_width - 1)), (1 << (self.exp_width - 1)) - 1
        if exps.min() < lo or exps.max() > hi:
            raise ExponentOverflow(f"exponent exceeds the {self.exp_width}-bit latch")
        first_event = len(self.dmr.events)
        self.dmr.start()
        w = self.in_width
        result = None
        for tau in range(BFP2FP_CYCLES):
            t = self.cycle
            if tau == 0:
                self.in_sign.write(signs)
                self.in_exp.write(exps)
                self.in_man.write(mags)
            else:
                m_in = self.in_man.read(t)
                e_in = self.in_exp.read(t)
                lz = self.lzc.read(t)
                if tau >= 2:
                    self.dmr.check(t, "lzc", lz)
                if tau == 1:
                    self.lzc.write(np.broadcast_to(w - _bit_length(m_in), self.lzc.shape))
                elif tau == 2:
                    k = self.norm_man.shape[0]
                    s = np.minimum(lz, w)
                    self.norm_man.write(m_in[None, :] << s[:k])
                    self.out_exp.write(e_in[None, :] - lz)
                elif tau == 3:
                    nm = self.norm_man.read(t)
                    oe = self.out_exp.read(t)
                    self.dmr.check(t, "out_exp", oe)
                    if self.check == "dmr":
                        self.dmr.check(t, "norm_man", nm)
                    elif self.check == "fuzzy":
                        self._fuzzy(t, nm[0], m_in)
                    result = self._emit(self.in_sign.read(t), nm[0], oe[0])
            self.cycle += 1
        result.events = self.dmr.events[first_event:]
        return result

    def _fuzzy(self, t: int, norm: np.ndarray, m_in: np.ndarray):
        """Check only the leading one and the next ``window`` bits."""
        w = self.in_width
        keep = min(self.window + 1, w)
        ref = m_in << (w - _bit_length(m_in))
        ref = np.where(m_in != 0, ref, 0) & ((1 << w) - 1)
        if np.any((norm >> (w - keep)) != (ref >> (w - keep))):
            self.dmr.flag(t, "norm_man")

    def _emit(self, signs, norm, exps) -> Bfp2FpResult:
        w = self.in_width
        if w > 53:
            return self._emit_exact(signs, norm, exps)
        with np.errstate(over="ignore"):
            mag = np.ldexp(norm.astype(np.float64), (exps - (w - 1)).astype(np.int64))
        mag, over = _round_magnitude(mag, self.fmt)
        if over.any() and self.overflow == "raise":
            raise ExponentOverflow(f"value exceeds the range of {self.fmt}")
        values = np.where(signs != 0, -mag, mag)
        return Bfp2FpResult(None, values)

    def _emit_exact(self, signs, norm, exps) -> Bfp2FpResult:
        fmt, w = self.fmt, self.in_width
        values = np.zeros(self.n)
        for i in range(self.n):
            s, m, e = int(signs[i]), int(norm[i]), int(exps[i])
            scale = e - (w - 1)
            n_, d_ = (m << scale, 1) if scale >= 0 else (m, 1 << -scale)
            try:
                v = from_ratio(s, n_, d_, fmt).value
            except ExponentOverflow:
                if self.overflow == "raise":
                    raise
                v = -np.inf if s else np.inf
            values[i] = v if m or not s else -0.0
        return Bfp2FpResult(None, values)


def _round_magnitude(a: np.ndarray, fmt: FpFormat) -> tuple[np.ndarray, np.ndarray]:
    """Round non-negative float64 magnitudes onto ``fmt`` (RNE, subnormals kept).

    Returns the rounded magnitudes with out-of-range entries set to ``inf``
    and the boolean overflow mask.
    """
    fin = np.isfinite(a)
    safe = np.where(fin, a, 0.0)
    _, ex = np.frexp(safe)
    e = np.maximum(ex - 1, fmt.emin)
    q = np.rint(np.ldexp(safe, fmt.man_bits - e))
    out = np.ldexp(q, e - fmt.man_bits)
    over = ~fin | (out > fmt.max_value)
    return np.where(over, np.inf, out), over


def bfp_to_fp(block: BfpBlock, fmt: FpFormat = FP32, dmr: bool = True,
              plan=None) -> tuple[list[FpScalar], list[DetectionEvent]]:
    conv = Bfp2FpConverter(block.block_len, block.man_width, fmt, check="dmr" if dmr else "off")
    if plan is not None:
        conv.inject(getattr(plan, "specs", plan))
    res = conv.convert_block(block)
    return res.to_scalars(fmt), res.events


def enumerate_converter_sites(n: int, man_width: int = DEFAULT_MAN_WIDTH,
                              check: str = "dmr") -> Manifest:
    return (Fp2BfpConverter(n, man_width, check=check).manifest()
            + Bfp2FpConverter(n, man_width, check=check).manifest())
