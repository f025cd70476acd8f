"""End-to-end BFP GEMM on the modeled NPU.

Three phases share one global clock:

1. the FP-to-BFP converter turns the rows of ``A`` and the columns of ``B``
   into blocks (row/column-wise blocking),
2. the mantissa array and the EU array run concurrently on those blocks,
3. the BFP-to-FP converter normalizes one output row per conversion.

Every component's fault sites live in one manifest, and fault-spec cycles are
global, so a plan written against :meth:`NpuSystem.manifest` replays exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bfp_core import (DEFAULT_MAN_WIDTH, FP32, ROW_COLUMN_WISE, FpFormat, quantize_matrix,
                       round_to_format)
from .converters import BFP2FP_CYCLES, FP2BFP_CYCLES, Bfp2FpConverter, Fp2BfpConverter
from .errors import ConfigError, DimMismatch, UnknownSite
from .exponent_path import DEFAULT_EXP_WIDTH, EuArray, ExponentVectors
from .fault_injection import Manifest
from .protection import Checker, DetectionEvent
from .systolic_sim import ArrayConfig, SystolicArray

PROTECTIONS = ("bfp", "none", "full_dmr")


@dataclass(frozen=True)
class NpuConfig:
    """Shape and protection of one NPU instance.

    ``protection``: ``"bfp"`` enables ABFT, EU time redundancy and converter
    DMR; ``"none"`` builds the bare datapath; ``"full_dmr"`` runs the bare
    datapath twice and compares the outputs (the coverage upper bound).
    """

    rows: int
    cols: int
    dataflow: str = "WS"
    man_width: int = DEFAULT_MAN_WIDTH
    acc_width: int | None = None
    depth: int | None = None
    fmt: FpFormat = FP32
    protection: str = "bfp"
    exp_width: int = DEFAULT_EXP_WIDTH
    converter_check: str = "dmr"
    overflow: str = "wrap"

    def __post_init__(self):
        if self.protection not in PROTECTIONS:
            raise ConfigError(f"protection must be one of {PROTECTIONS}")
        object.__setattr__(self, "dataflow", self.dataflow.upper())
        lim = self.max_ws_depth
        if self.protected and self.dataflow == "WS" and self.depth is not None and self.depth > lim:
            raise ConfigError(f"WS depth {self.depth} exceeds {lim}: the two-pass exponent "
                              f"check would outlast the mantissa array; tile the stream")

    @property
    def max_ws_depth(self) -> int:
        """Deepest WS stream whose redundant exponent pass still finishes in time.

        The EU needs ``2M + 3`` cycles; the WS array needs ``2R + M + C + 1``.
        """
        return max(2 * self.rows + self.cols - 2, 1)

    @property
    def protected(self) -> bool:
        return self.protection == "bfp"

    @property
    def array_config(self) -> ArrayConfig:
        return ArrayConfig(self.rows, self.cols, self.man_width, self.acc_width, self.dataflow,
                           self.protected, self.overflow, self.depth)

    @property
    def block_len(self) -> int:
        """Length K of the shared reduction dimension."""
        return self.rows if self.dataflow == "WS" else self.array_config.stream_depth

    @property
    def out_rows(self) -> int:
        return self.array_config.stream_depth if self.dataflow == "WS" else self.rows


@dataclass
class NpuRun:
    outputs: np.ndarray
    events: list[DetectionEvent]
    acc: np.ndarray
    exponents: np.ndarray
    phases: dict[str, tuple[int, int]]
    eu_completion: int
    mantissa_completion: int

    @property
    def cycles(self) -> int:
        return max(end for _, end in self.phases.values())


class NpuSystem:
    def __init__(self, config: NpuConfig):
        self.config = cfg = config
        acfg = cfg.array_config
        conv_check = cfg.converter_check if cfg.protected else "off"
        self.array = SystolicArray(acfg)
        self.eu = EuArray(cfg.cols, cfg.exp_width)
        self.fp2bfp = Fp2BfpConverter(cfg.block_len, cfg.man_width, cfg.exp_width, conv_check)
        self.out_width = acfg.pe_acc_width
        self.bfp2fp = Bfp2FpConverter(cfg.cols, self.out_width, cfg.fmt, cfg.exp_width + 2,
                                      conv_check, overflow="inf")
        self._banks = [self.fp2bfp.bank, self.array.bank, self.eu.bank, self.bfp2fp.bank]
        self.faulty = False

    def manifest(self) -> Manifest:
        m = Manifest()
        for bank in self._banks:
            m = m + bank.manifest()
        return m

    def inject(self, specs):
        specs = list(getattr(specs, "specs", specs))
        for s in specs:
            if not any(b.owns(s.site) for b in self._banks):
                raise UnknownSite(str(s.site))
        for bank in self._banks:
            bank.apply(specs, strict=False)
        self.faulty = self.faulty or bool(specs)

    def schedule(self, m_rows: int) -> dict[str, tuple[int, int]]:
        """Half-open global cycle windows of each phase for ``m_rows`` output rows."""
        cfg = self.config
        acfg = cfg.array_config
        n_in = m_rows + cfg.cols if cfg.dataflow == "WS" else cfg.rows + cfg.cols
        p2 = FP2BFP_CYCLES * n_in
        stream = m_rows if cfg.dataflow == "WS" else cfg.block_len
        p3 = p2 + acfg.cycles(stream)
        n_out = m_rows if cfg.dataflow == "WS" else cfg.rows
        return {"fp2bfp": (0, p2), "compute": (p2, p3),
                "bfp2fp": (p3, p3 + BFP2FP_CYCLES * n_out)}

    def run(self, a, b) -> NpuRun:
        cfg = self.config
        w = cfg.man_width
        a = round_to_format(np.asarray(a, dtype=np.float64), cfg.fmt)
        b = round_to_format(np.asarray(b, dtype=np.float64), cfg.fmt)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimMismatch(f"cannot multiply {a.shape} by {b.shape}")
        if b.shape != (cfg.block_len, cfg.cols):
            raise DimMismatch(f"B must be {cfg.block_len} x {cfg.cols}, got {b.shape}")
        if cfg.dataflow == "OS" and a.shape[0] != cfg.rows:
            raise DimMismatch(f"OS A must have {cfg.rows} rows")
        m_rows = a.shape[0]
        ph = self.schedule(m_rows)
        events: list[DetectionEvent] = []

        a_blocks, ev = self.fp2bfp.convert_rows(a, start_cycle=ph["fp2bfp"][0])
        events += ev
        b_blocks, ev = self.fp2bfp.convert_rows(b.T)
        events += ev
        a_man = np.array([blk.signed_mantissas() for blk in a_blocks], np.int64)
        b_man = np.array([blk.signed_mantissas() for blk in b_blocks], np.int64).T
        vec = ExponentVectors([blk.shared_exp for blk in a_blocks],
                              [blk.shared_exp for blk in b_blocks])

        p2 = ph["compute"][0]
        self.array.cycle = p2
        if cfg.dataflow == "WS":
            self.array.load_weights(b_man)
            gemm = self.array.run_gemm_ws(a_man)
        else:
            gemm = self.array.run_gemm_os(a_man, b_man)
        # a corrupted upstream exponent wraps in the EU registers instead of raising
        eu = self.eu.run_redundant(vec, redundant=cfg.protected, start_cycle=p2,
                                   strict=not self.faulty)
        events += gemm.events + eu.events

        acc = gemm.result
        ec = eu.exponents
        out = np.zeros(acc.shape)
        off = self.out_width - 1 - 2 * (w - 1)
        self.bfp2fp.cycle = ph["bfp2fp"][0]
        for i in range(acc.shape[0]):
            row = acc[i]
            res = self.bfp2fp.convert((row < 0).astype(np.int64), np.abs(row), ec[i] + off)
            out[i] = res.values
            events += res.events
        return NpuRun(out, sorted(events, key=lambda e: e.cycle), acc, ec, ph,
                      eu.completion_cycle, gemm.end_cycle - 1)


def run_gemm(config: NpuConfig, a, b, plan=None) -> NpuRun:
    """One GEMM on a fresh NPU; ``full_dmr`` adds a fault-free shadow and an output compare."""
    sys_ = NpuSystem(config)
    if plan is not None:
        sys_.inject(plan)
    run = sys_.run(a, b)
    if config.protection == "full_dmr":
        shadow = NpuSystem(config).run(a, b)
        if not np.array_equal(shadow.outputs.view(np.int64), run.outputs.view(np.int64)):
            run.events.append(DetectionEvent(Checker.FULL_DMR, run.cycles, "outputs"))
    return run


def enumerate_sites(config: NpuConfig) -> Manifest:
    return NpuSystem(config).manifest()


def reference_gemm(config: NpuConfig, a, b) -> np.ndarray:
    """Fault-free outputs computed without the cycle model (host oracle)."""
    w = config.man_width
    a = round_to_format(np.asarray(a, dtype=np.float64), config.fmt)
    b = round_to_format(np.asarray(b, dtype=np.float64), config.fmt)
    qa = quantize_matrix(a, ROW_COLUMN_WISE, "row", w, config.fmt)
    qb = quantize_matrix(b, ROW_COLUMN_WISE, "column", w, config.fmt)
    acc = qa.signed_mantissas @ qb.signed_mantissas
    ec = qa.shared_exps[:, None] + qb.shared_exps[None, :]
    exact = np.ldexp(acc.astype(np.float64), ec - 2 * (w - 1))
    return round_to_format(exact, config.fmt)
