"""Cycle-stepped fixed-point mantissa systolic array (WS and OS dataflows).

Timing model (one hop per cycle):

* WS: weights are preloaded in ``rows`` cycles. ``A[m, k]`` enters array row
  ``k`` at compute cycle ``m + k``, moves right one PE per cycle while partial
  sums move down; ``C[m, c]`` is drained from the bottom row at compute cycle
  ``m + rows + c``. An ``M x rows`` by ``rows x cols`` GEMM takes
  ``rows + M + rows + cols - 1`` cycles including the preload.
* OS: the bias is preloaded in ``rows`` cycles. ``A`` streams in from the left
  and ``B`` from the top, skewed so they meet in PE ``(i, j)`` at compute
  cycle ``k + i + j``. After ``K + rows + cols - 2`` compute cycles the
  accumulators are read out one row per cycle (row-major).

ABFT protection adds exactly two cycles: one for the check-vector (an extra
streamed row in WS, an extra drain slot in OS) and one for the comparison.

Every register is read through its saboteur, so injected faults affect
exactly the consumers of the faulty register.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import AccOverflow, ConfigError, DimMismatch
from .fault_injection import FaultSite, FaultSpec, Manifest, RegisterBank, RegisterFile
from .protection import AbftOsChecker, AbftWsChecker, DetectionEvent, clog2

DEFAULT_ACC_WIDTH = 22
OVERFLOW_POLICIES = ("wrap", "saturate", "detect")


@dataclass(frozen=True)
class ArrayConfig:
    rows: int
    cols: int
    man_width: int = 8
    acc_width: int | None = None
    dataflow: str = "WS"
    protected: bool = True
    overflow: str = "wrap"
    depth: int | None = None
    ignore_low_bits: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dataflow", self.dataflow.upper())
        if self.dataflow not in ("WS", "OS"):
            raise ConfigError(f"unknown dataflow {self.dataflow!r}")
        if not (1 <= self.rows <= 256 and 1 <= self.cols <= 256):
            raise ConfigError("array dimensions must lie in 1..256")
        if self.overflow not in OVERFLOW_POLICIES:
            raise ConfigError(f"overflow policy must be one of {OVERFLOW_POLICIES}")
        if self.depth is not None and self.depth < 1:
            raise ConfigError("depth must be positive")
        if self.acc_width is None:
            object.__setattr__(self, "acc_width", max(DEFAULT_ACC_WIDTH, self.safe_acc_width))
        elif self.acc_width < self.safe_acc_width and self.overflow != "detect":
            raise ConfigError(
                f"acc_width {self.acc_width} < safe width {self.safe_acc_width}; "
                "widen it or enable overflow='detect'")
        if self.pe_acc_width > 62:
            raise ConfigError("accumulator wider than the 62-bit simulation limit")

    @property
    def stream_depth(self) -> int:
        """Longest stream the array accepts: M rows (WS) or K steps (OS)."""
        return self.depth if self.depth is not None else self.rows

    @property
    def safe_acc_width(self) -> int:
        # signed sum of n products of two W-bit magnitudes
        n = self.rows if self.dataflow == "WS" else self.stream_depth
        return 2 * self.man_width + clog2(n) + 1

    @property
    def guard_bits(self) -> int:
        if not self.protected:
            return 0
        return clog2(self.stream_depth) if self.dataflow == "WS" else clog2(self.rows)

    @property
    def operand_width(self) -> int:
        return self.man_width + 1

    @property
    def pass_width(self) -> int:
        # WS check-vector elements travel through the same latches
        extra = self.guard_bits if self.dataflow == "WS" else 0
        return self.operand_width + extra

    @property
    def pe_acc_width(self) -> int:
        extra = self.guard_bits if self.dataflow == "WS" else 0
        return self.acc_width + extra

    @property
    def check_width(self) -> int:
        return self.acc_width + self.guard_bits

    def cycles(self, stream_len: int, protected: bool | None = None) -> int:
        """Total cycles (preload included) for one GEMM of this shape."""
        prot = self.protected if protected is None else protected
        r, c = self.rows, self.cols
        if self.dataflow == "WS":
            n = r + stream_len + r + c - 1
        else:
            n = r + (stream_len + r + c - 2) + r
        return n + (2 if prot else 0)


@dataclass
class CycleTrace:
    cycle: int
    drained: list[tuple[int, int, int]] = field(default_factory=list)


@dataclass
class GemmRun:
    result: np.ndarray
    events: list[DetectionEvent]
    start_cycle: int
    end_cycle: int
    protected: bool
    traces: list[CycleTrace] = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return self.end_cycle - self.start_cycle

    def trace_lines(self) -> list[str]:
        """Line-delimited ``cycle<TAB>event<TAB>payload`` records."""
        out = []
        for tr in self.traces:
            for r, c, v in tr.drained:
                out.append(f"{tr.cycle}\tdrain\tr{r}c{c}={v}")
        for e in self.events:
            out.append(f"{e.cycle}\tdetect\t{e.checker.value}:{e.hint}")
        return out


def _pe_ids(rows: int, cols: int) -> list[str]:
    return [f"r{r}c{c}" for r in range(rows) for c in range(cols)]


class SystolicArray:
    """Mutable register state of one array instance plus its ABFT checker."""

    def __init__(self, config: ArrayConfig):
        self.config = cfg = config
        r, c = cfg.rows, cfg.cols
        ids = _pe_ids(r, c)
        self.bank = RegisterBank()
        if cfg.dataflow == "WS":
            self.weight = self.bank.add(RegisterFile("pe", "weight", ids, cfg.operand_width, (r, c)))
            self.h_pass = self.bank.add(RegisterFile("pe", "h_pass", ids, cfg.pass_width, (r, c)))
            self.acc = self.bank.add(RegisterFile("pe", "acc", ids, cfg.pe_acc_width, (r, c)))
            self.v_pass = None
            self.checker = AbftWsChecker(r, c, cfg.pass_width, cfg.check_width,
                                         cfg.ignore_low_bits) if cfg.protected else None
        else:
            self.acc = self.bank.add(RegisterFile("pe", "acc", ids, cfg.pe_acc_width, (r, c)))
            self.h_pass = self.bank.add(RegisterFile("pe", "h_pass", ids, cfg.pass_width, (r, c)))
            self.v_pass = self.bank.add(RegisterFile("pe", "v_pass", ids, cfg.pass_width, (r, c)))
            self.weight = None
            self.checker = AbftOsChecker(r, c, cfg.operand_width + clog2(r), cfg.check_width,
                                         cfg.ignore_low_bits) if cfg.protected else None
        if self.checker is not None:
            for rf in self.checker.files:
                self.bank.add(rf)
        self.cycle = 0
        self.events: list[DetectionEvent] = []
        self._program: Iterator | None = None
        self._outcome: GemmRun | None = None

    # -- fault-site plumbing --------------------------------------------------

    def manifest(self) -> Manifest:
        return self.bank.manifest()

    def write_sites(self, specs: Iterable[FaultSpec], cycle_offset: int = 0):
        self.bank.apply(specs, cycle_offset)

    inject = write_sites

    def read_register(self, site: FaultSite) -> int:
        return self.bank.read_bit(site, self.cycle)

    def reset(self):
        self.bank.reset()
        self.cycle = 0
        self.events = []
        self._program = None

    # -- clocking ---------------------------------------------------------------

    @property
    def busy(self) -> bool:
        return self._program is not None

    def step(self) -> "SystolicArray":
        """Advance one clock edge of the active program (or idle)."""
        if self._program is None:
            self.cycle += 1
            return self
        try:
            next(self._program)
        except StopIteration:
            self._program = None
        return self

    def _run_to_end(self) -> GemmRun:
        while self._program is not None:
            self.step()
        out, self._outcome = self._outcome, None
        return out

    def _resolve_protection(self, protection: bool | None) -> bool:
        if protection is None:
            return self.config.protected
        if protection and not self.config.protected:
            raise ConfigError("array was built without checker hardware")
        return bool(protection)

    def _commit_acc(self, rf: RegisterFile, values: np.ndarray):
        policy = self.config.overflow
        if policy != "wrap":
            hi = (1 << (rf.width - 1)) - 1
            lo = -(1 << (rf.width - 1))
            if policy == "saturate":
                values = np.clip(values, lo, hi)
            elif np.any((values > hi) | (values < lo)):
                raise AccOverflow(f"{rf.unit}.{rf.reg} overflowed {rf.width} bits at cycle {self.cycle}")
        rf.write(values)

    def _check_operand(self, m: np.ndarray, name: str):
        lim = 1 << self.config.man_width
        if np.any(np.abs(m) >= lim):
            raise ValueError(f"{name} mantissas exceed {self.config.man_width} bits")

    # -- weight stationary ------------------------------------------------------

    def load_weights(self, b_mantissas) -> "SystolicArray":
        cfg = self.config
        if cfg.dataflow != "WS":
            raise ConfigError("load_weights requires a WS array")
        b = np.asarray(b_mantissas, dtype=np.int64)
        if b.shape != (cfg.rows, cfg.cols):
            raise DimMismatch(f"weights {b.shape} != array {(cfg.rows, cfg.cols)}")
        self._check_operand(b, "weight")
        self.weight.write(b)
        self.cycle += cfg.rows
        return self

    def start_ws(self, a_mantissas, protection: bool | None = None, trace: bool = False):
        cfg = self.config
        if cfg.dataflow != "WS":
            raise ConfigError("start_ws requires a WS array")
        a = np.asarray(a_mantissas, dtype=np.int64)
        if a.ndim != 2 or a.shape[1] != cfg.rows:
            raise DimMismatch(f"A must be M x {cfg.rows}, got {a.shape}")
        if a.shape[0] > cfg.stream_depth:
            raise DimMismatch(f"A has {a.shape[0]} rows; array depth is {cfg.stream_depth}")
        self._check_operand(a, "A")
        self._program = self._ws_program(a, self._resolve_protection(protection), trace)

    def run_gemm_ws(self, a_mantissas, protection: bool | None = None,
                    trace: bool = False) -> GemmRun:
        """Stream A through preloaded weights; returns the exact A @ B mantissas.

        The preload cycles spent in :meth:`load_weights` count toward the run.
        """
        start = self.cycle - self.config.rows
        self.start_ws(a_mantissas, protection, trace)
        run = self._run_to_end()
        run.start_cycle = start
        return run

    def _ws_program(self, a: np.ndarray, prot: bool, trace: bool):
        cfg = self.config
        R, C = cfg.rows, cfg.cols
        M = a.shape[0]
        chk = self.checker if prot else None
        total = M + R + C - 1 + (2 if prot else 0)
        result = np.zeros((M, C), np.int64)
        events: list[DetectionEvent] = []
        traces: list[CycleTrace] = []
        start = self.cycle
        self.h_pass.reset()
        self.acc.reset()
        if chk is not None:
            for rf in chk.files:
                rf.reset()
        ks = np.arange(R)
        cs = np.arange(C)
        a_in = np.zeros((R, C), np.int64)
        psum = np.zeros((R, C), np.int64)
        for tau in range(total):
            t = self.cycle
            w = self.weight.read(t)
            h = self.h_pass.read(t)
            acc = self.acc.read(t)

            m = tau - ks
            valid = (m >= 0) & (m < M)
            stream = np.zeros(R, np.int64)
            stream[valid] = a[m[valid], ks[valid]]
            if chk is not None:
                ing = chk.ingress.read(t)
                ins = m == M
                stream[ins] = ing[ins]
                chk.ingress.write(np.where(valid, ing + stream, ing))

            bottom = acc[R - 1]
            md = tau - R - cs
            dvalid = (md >= 0) & (md < M)
            if dvalid.any():
                result[md[dvalid], cs[dvalid]] = bottom[dvalid]
                if trace:
                    traces.append(CycleTrace(t, [(int(md[j]), int(j), int(bottom[j]))
                                                 for j in cs[dvalid]]))
            if chk is not None:
                col_sum = chk.col_sum.read(t)
                chk.col_sum.write(np.where(dvalid, col_sum + bottom, col_sum))
                check_out = chk.check_out.read(t)
                chk.check_out.write(np.where(md == M, bottom, check_out))
                due = cs[tau == M + R + cs + 1]
                if due.size:
                    events.extend(chk.compare(t, due))

            a_in[:, 0] = stream
            a_in[:, 1:] = h[:, :-1]
            psum[1:] = acc[:-1]
            self._commit_acc(self.acc, psum + a_in * w)
            self.h_pass.write(a_in)
            self.cycle += 1
            yield
        self.events.extend(events)
        self._outcome = GemmRun(result, events, start, self.cycle, prot, traces)

    # -- output stationary -------------------------------------------------------

    def start_os(self, a_mantissas, b_mantissas, bias=None, protection: bool | None = None,
                 trace: bool = False):
        cfg = self.config
        if cfg.dataflow != "OS":
            raise ConfigError("start_os requires an OS array")
        a = np.asarray(a_mantissas, dtype=np.int64)
        b = np.asarray(b_mantissas, dtype=np.int64)
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != cfg.rows or b.shape[1] != cfg.cols \
                or a.shape[1] != b.shape[0]:
            raise DimMismatch(f"OS needs A {cfg.rows} x K and B K x {cfg.cols}; "
                              f"got {a.shape} and {b.shape}")
        if a.shape[1] > cfg.stream_depth:
            raise DimMismatch(f"K={a.shape[1]} exceeds array depth {cfg.stream_depth}")
        self._check_operand(a, "A")
        self._check_operand(b, "B")
        if bias is None:
            bias = np.zeros((cfg.rows, cfg.cols), np.int64)
        bias = np.asarray(bias, dtype=np.int64)
        if bias.shape != (cfg.rows, cfg.cols):
            raise DimMismatch(f"bias must be {cfg.rows} x {cfg.cols}")
        lim = 1 << (cfg.acc_width - 2)
        if np.any(np.abs(bias) >= lim):
            raise ValueError("bias does not fit the accumulator")
        self._program = self._os_program(a, b, bias, self._resolve_protection(protection), trace)

    def run_gemm_os(self, a_mantissas, b_mantissas, bias=None, protection: bool | None = None,
                    trace: bool = False) -> GemmRun:
        """Preload the bias, stream A and B, drain ``A @ B + bias``."""
        self.start_os(a_mantissas, b_mantissas, bias, protection, trace)
        return self._run_to_end()

    def _os_program(self, a, b, bias, prot: bool, trace: bool):
        cfg = self.config
        R, C = cfg.rows, cfg.cols
        K = a.shape[1]
        chk = self.checker if prot else None
        start = self.cycle
        self.h_pass.reset()
        self.v_pass.reset()
        self.acc.write(bias)
        if chk is not None:
            for rf in chk.files:
                rf.reset()
            chk.acc.write(bias.sum(axis=0))
        for _ in range(R):
            self.cycle += 1
            yield

        t_c = K + R + C - 2
        drain_start = t_c + (1 if prot else 0)
        total = t_c + R + (2 if prot else 0)
        result = np.zeros((R, C), np.int64)
        events: list[DetectionEvent] = []
        traces: list[CycleTrace] = []
        rs_idx = np.arange(R)
        cs_idx = np.arange(C)
        a_in = np.zeros((R, C), np.int64)
        b_in = np.zeros((R, C), np.int64)
        for tau in range(total):
            t = self.cycle
            h = self.h_pass.read(t)
            v = self.v_pass.read(t)
            acc = self.acc.read(t)

            kr = tau - rs_idx
            rv = (kr >= 0) & (kr < K)
            row_stream = np.zeros(R, np.int64)
            row_stream[rv] = a[rs_idx[rv], kr[rv]]
            kc = tau - cs_idx
            cv = (kc >= 0) & (kc < K)
            col_stream = np.zeros(C, np.int64)
            col_stream[cv] = b[kc[cv], cs_idx[cv]]

            d = tau - drain_start
            if chk is not None:
                chain = chk.chain.read(t)
                ch_h = chk.h_pass.read(t)
                ch_acc = chk.acc.read(t)
                dsum = chk.drain_sum.read(t)
                new_chain = row_stream.copy()
                new_chain[1:] += chain[:-1]
                cin = np.empty(C, np.int64)
                cin[0] = chain[R - 1]
                cin[1:] = ch_h[:-1]
                chk.acc.write(ch_acc + cin * v[R - 1])
                chk.h_pass.write(cin)
                chk.chain.write(new_chain)
                if 0 <= d < R:
                    chk.drain_sum.write(dsum + acc[d])
                if tau == total - 1:
                    events.extend(chk.compare(t))
            if 0 <= d < R:
                result[d] = acc[d]
                if trace:
                    traces.append(CycleTrace(t, [(d, int(j), int(acc[d, j])) for j in cs_idx]))

            a_in[:, 0] = row_stream
            a_in[:, 1:] = h[:, :-1]
            b_in[0] = col_stream
            b_in[1:] = v[:-1]
            self._commit_acc(self.acc, acc + a_in * b_in)
            self.h_pass.write(a_in)
            self.v_pass.write(b_in)
            self.cycle += 1
            yield
        self.events.extend(events)
        self._outcome = GemmRun(result, events, start, self.cycle, prot, traces)


ArrayState = SystolicArray


def enumerate_array_sites(config: ArrayConfig) -> Manifest:
    return SystolicArray(config).manifest()


def register_map(config: ArrayConfig) -> str:
    """Text manifest of every register group and its fault-site count."""
    arr = SystolicArray(config)
    lines = [f"# array {config.rows}x{config.cols} {config.dataflow} "
             f"W={config.man_width} acc={config.acc_width} protected={config.protected}"]
    for rf in arr.bank.files.values():
        lines.append(f"{rf.unit}.{rf.reg}\twidth={rf.width}\tcount={len(rf.ids)}\t"
                     f"bits={rf.width * len(rf.ids)}")
    lines.append(f"total\t{len(arr.manifest())}")
    return "\n".join(lines) + "\n"
