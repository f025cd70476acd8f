"""Uniform adapters that let one campaign loop drive any modeled component.

A target knows its fault manifest, the cycle window in which transients can
strike, how to draw a workload from a generator and how to execute one
workload under a list of fault specs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..bfp_core import FP32, BfpBlock, quantize_values, round_to_format
from ..converters import BFP2FP_CYCLES, FP2BFP_CYCLES, Bfp2FpConverter, Fp2BfpConverter
from ..exponent_path import EuArray, ExponentVectors, eu_cycles
from ..fault_injection import Manifest
from ..protection import DetectionEvent
from ..system import NpuConfig, NpuSystem, run_gemm
from ..systolic_sim import ArrayConfig, SystolicArray


@dataclass
class Execution:
    outputs: object
    events: list[DetectionEvent]
    start_cycle: int
    end_cycle: int


def _gaussian(rng, shape):
    return round_to_format(rng.standard_normal(shape), FP32)


class ArrayTarget:
    """The mantissa systolic array alone, fed random signed W-bit integers."""

    def __init__(self, cfg: ArrayConfig):
        self.cfg = cfg
        self.name = f"array-{cfg.dataflow}-{cfg.rows}x{cfg.cols}"

    def manifest(self) -> Manifest:
        return SystolicArray(self.cfg).manifest()

    def window(self) -> tuple[int, int]:
        return 0, self.cfg.cycles(self.cfg.stream_depth)

    def workload(self, rng):
        c = self.cfg
        lim = (1 << c.man_width) - 1
        if c.dataflow == "WS":
            return (rng.integers(-lim, lim + 1, (c.stream_depth, c.rows)),
                    rng.integers(-lim, lim + 1, (c.rows, c.cols)))
        return (rng.integers(-lim, lim + 1, (c.rows, c.stream_depth)),
                rng.integers(-lim, lim + 1, (c.stream_depth, c.cols)))

    def execute(self, wl, specs) -> Execution:
        a, b = wl
        arr = SystolicArray(self.cfg)
        arr.inject(specs)
        if self.cfg.dataflow == "WS":
            arr.load_weights(b)
            run = arr.run_gemm_ws(a)
        else:
            run = arr.run_gemm_os(a, b)
        return Execution(run.result, run.events, run.start_cycle, run.end_cycle)


class SystemTarget:
    """Full FP-in/FP-out GEMM on the composed NPU."""

    def __init__(self, cfg: NpuConfig, workload: str = "gaussian"):
        self.cfg = cfg
        self.kind = workload
        self.name = f"system-{cfg.dataflow}-{cfg.rows}x{cfg.cols}-{cfg.protection}"
        self._file = None
        if workload.startswith("file:"):
            with np.load(Path(workload[5:])) as z:
                self._file = (np.asarray(z["a"], float), np.asarray(z["b"], float))

    def manifest(self) -> Manifest:
        return NpuSystem(self.cfg).manifest()

    def _shape(self):
        c = self.cfg
        if c.dataflow == "WS":
            return (c.out_rows, c.rows), (c.rows, c.cols)
        return (c.rows, c.block_len), (c.block_len, c.cols)

    def window(self) -> tuple[int, int]:
        return 0, NpuSystem(self.cfg).schedule(self._shape()[0][0])["bfp2fp"][1]

    def workload(self, rng):
        sa, sb = self._shape()
        if self._file is not None:
            return self._file
        if self.kind == "uniform-int":
            return (rng.integers(-128, 128, sa).astype(float),
                    rng.integers(-128, 128, sb).astype(float))
        return _gaussian(rng, sa), _gaussian(rng, sb)

    def execute(self, wl, specs) -> Execution:
        a, b = wl
        run = run_gemm(self.cfg, a, b, specs)
        return Execution(run.outputs, run.events, 0, run.cycles)


class EuTarget:
    """The EU array for ``rows`` streamed A-exponents and ``n`` units."""

    def __init__(self, n: int, rows: int | None = None, redundant: bool = True,
                 distinct: bool = True, spread: int = 100):
        self.n, self.rows = n, rows or n
        self.redundant, self.distinct, self.spread = redundant, distinct, spread
        self.name = f"eu-{n}x{self.rows}"

    def manifest(self) -> Manifest:
        return EuArray(self.n).manifest()

    def window(self) -> tuple[int, int]:
        return 0, eu_cycles(self.rows, self.redundant)

    def workload(self, rng):
        s = self.spread
        if self.distinct:
            eb = rng.choice(np.arange(-s, s), self.n, replace=False)
        else:
            eb = rng.integers(-s, s, self.n)
        return ExponentVectors(rng.integers(-s, s, self.rows), eb)

    def execute(self, wl, specs) -> Execution:
        eu = EuArray(self.n)
        eu.inject(specs)
        run = eu.run_redundant(wl, self.redundant, start_cycle=0)
        return Execution(run.exponents, run.events, 0, run.completion_cycle + 1)


class Fp2BfpTarget:
    def __init__(self, n: int, man_width: int = 8, check: str = "dmr"):
        self.n, self.w, self.check = n, man_width, check
        self.name = f"fp2bfp-{n}-{check}"

    def manifest(self) -> Manifest:
        return Fp2BfpConverter(self.n, self.w, check=self.check).manifest()

    def window(self) -> tuple[int, int]:
        return 0, FP2BFP_CYCLES

    def workload(self, rng):
        return _gaussian(rng, (1, self.n)) * np.ldexp(1.0, rng.integers(-8, 8, (1, self.n)))

    def execute(self, wl, specs) -> Execution:
        conv = Fp2BfpConverter(self.n, self.w, check=self.check)
        conv.inject(specs)
        (blk,), events = conv.convert_rows(wl, start_cycle=0)
        out = np.array([blk.shared_exp, *blk.signs, *blk.mantissas], np.int64)
        return Execution(out, events, 0, conv.cycle)


class Bfp2FpTarget:
    def __init__(self, n: int, man_width: int = 8, check: str = "dmr"):
        self.n, self.w, self.check = n, man_width, check
        self.name = f"bfp2fp-{n}-{check}"

    def manifest(self) -> Manifest:
        return Bfp2FpConverter(self.n, self.w, check=self.check).manifest()

    def window(self) -> tuple[int, int]:
        return 0, BFP2FP_CYCLES

    def workload(self, rng) -> BfpBlock:
        x = _gaussian(rng, self.n) * np.ldexp(1.0, rng.integers(-8, 8, self.n))
        return quantize_values(x, self.w)

    def execute(self, wl, specs) -> Execution:
        conv = Bfp2FpConverter(self.n, self.w, check=self.check, overflow="inf")
        conv.inject(specs)
        res = conv.convert(wl.signs, wl.mantissas, [wl.shared_exp] * self.n, start_cycle=0)
        return Execution(res.values, res.events, 0, conv.cycle)


def build_target(kind: str, size: int, dataflow: str = "WS", man_width: int = 8,
                 acc_width: int | None = None, protection: str = "bfp",
                 converter_check: str = "dmr", workload: str = "gaussian"):
    prot = protection == "bfp"
    if kind == "array":
        return ArrayTarget(ArrayConfig(size, size, man_width, acc_width, dataflow, prot))
    if kind == "system":
        return SystemTarget(NpuConfig(size, size, dataflow, man_width, acc_width,
                                      protection=protection, converter_check=converter_check),
                            workload)
    check = converter_check if prot else "off"
    if kind == "eu":
        return EuTarget(size, redundant=prot)
    if kind == "fp2bfp":
        return Fp2BfpTarget(size, man_width, check)
    if kind == "bfp2fp":
        return Bfp2FpTarget(size, man_width, check)
    raise ValueError(f"unknown target {kind!r}")
