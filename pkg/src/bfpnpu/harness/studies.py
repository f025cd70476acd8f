"""Desk-scale studies behind the qualitative reliability claims.

Each study returns a plain result object with a ``rows()`` method (one dict
per measurement) so the CLI can write it as CSV or JSON.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..bfp_core import (FP32, MATRIX_WISE, ROW_COLUMN_WISE, BlockingStrategy, quantize_matrix,
                        round_to_format)
from ..fault_injection import FaultKind, FaultSite, FaultSpec
from ..protection import BASELINE_SCALES, fp_e2e_baseline_check
from ..system import NpuConfig, NpuSystem, reference_gemm
from ..systolic_sim import ArrayConfig, SystolicArray
from ..protection import classify_events
from .campaign import Q_SEGMENTS, q_segment
from .targets import build_target

LZC_FIELD = 22


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# -- blocking granularity -----------------------------------------------------------


@dataclass
class BlockingStudy:
    strategies: list[str]
    mse: np.ndarray                       # trials x strategies

    def ordering_holds(self) -> np.ndarray:
        """Per trial: MSE is nondecreasing along ``strategies`` (finest first)."""
        return np.all(np.diff(self.mse, axis=1) >= 0, axis=1)

    def rows(self) -> list[dict]:
        out = []
        for j, s in enumerate(self.strategies):
            col = self.mse[:, j]
            out.append({"strategy": s, "trials": len(col), "mse_mean": float(col.mean()),
                        "mse_median": float(np.median(col)),
                        "ratio_to_finest": float(col.mean() / self.mse[:, 0].mean())
                        if self.mse[:, 0].mean() > 0 else None})
        return out


def blocking_mse(x: np.ndarray, strategy: BlockingStrategy, man_width: int = 8,
                 orientation: str = "row") -> float:
    xr = round_to_format(x, FP32)
    q = quantize_matrix(xr, strategy, orientation, man_width, FP32)
    return float(np.mean((q.dequantize() - xr) ** 2))


def study_blocking_error(trials: int = 100, size: int = 128, segment_len: int = 4,
                         man_width: int = 8, seed: int = 0) -> BlockingStudy:
    """Quantization MSE of segment-, row/column- and matrix-wise blocking."""
    strategies = [BlockingStrategy.parse(f"segment:{segment_len}"), ROW_COLUMN_WISE, MATRIX_WISE]
    rng = _rng(seed)
    mse = np.zeros((trials, len(strategies)))
    for t in range(trials):
        # per-row scale spread mimics activations with outlier channels
        x = rng.standard_normal((size, size)) * np.exp2(rng.integers(-4, 5, (size, 1)))
        for j, s in enumerate(strategies):
            mse[t, j] = blocking_mse(x, s, man_width)
    return BlockingStudy([str(s) for s in strategies], mse)


# -- leading zeros of intermediate accumulators -------------------------------------


def _lzc(mag: int, width: int = LZC_FIELD) -> int:
    return width - int(mag).bit_length()


def _flip_drift(lz: int, width: int = LZC_FIELD) -> int:
    """Exponent change from setting the first leading zero (the field's top bit)."""
    return lz if lz > 0 else 0


@dataclass
class LzcStudy:
    bfp_lzc: np.ndarray
    fp_lzc: np.ndarray
    bfp_drift: np.ndarray
    fp_drift: np.ndarray

    def histogram(self, which: str) -> np.ndarray:
        data = self.bfp_lzc if which == "bfp" else self.fp_lzc
        return np.bincount(data, minlength=LZC_FIELD + 1)

    @property
    def drift_ratio(self) -> float:
        f = self.fp_drift.mean()
        return float(self.bfp_drift.mean() / f) if f > 0 else float("inf")

    def rows(self) -> list[dict]:
        hb, hf = self.histogram("bfp"), self.histogram("fp")
        return [{"lzc": k, "bfp_count": int(hb[k]), "fp_count": int(hf[k])}
                for k in range(LZC_FIELD + 1)]

    def summary(self) -> dict:
        return {"samples": int(self.bfp_lzc.size),
                "bfp_mean_lzc": float(self.bfp_lzc.mean()),
                "fp_mean_lzc": float(self.fp_lzc.mean()),
                "bfp_mean_drift": float(self.bfp_drift.mean()),
                "fp_mean_drift": float(self.fp_drift.mean()),
                "drift_ratio": self.drift_ratio}


def _fp_pipeline_lzc(products: np.ndarray, frac_bits: int = LZC_FIELD - 2) -> list[int]:
    """LZC before normalization after each aligned add of an FP accumulator.

    Operands are normalized so their leading one sits at bit ``frac_bits``
    of the field; the wider-exponent operand sets the alignment and the
    other one is truncated onto that grid.
    """
    out = []
    acc = 0.0
    for p in products:
        p = float(p)
        big = max(abs(acc), abs(p))
        if big == 0.0:
            out.append(LZC_FIELD)
            continue
        e = int(np.frexp(big)[1]) - 1
        unit = np.ldexp(1.0, e - frac_bits)
        raw = int(np.trunc(acc / unit)) + int(np.trunc(p / unit))
        out.append(_lzc(abs(raw)))
        acc = raw * unit
        if raw:
            # renormalize to frac_bits + 1 significant bits
            e2 = int(np.frexp(abs(acc))[1]) - 1
            u2 = np.ldexp(1.0, e2 - frac_bits)
            acc = float(np.trunc(acc / u2) * u2)
    return out


def study_leading_zeros(trials: int = 32, size: int = 16, man_width: int = 8,
                        seed: int = 0) -> LzcStudy:
    """Leading zeros of BFP partial sums versus an FP pipeline on the same inputs."""
    rng = _rng(seed)
    bl, fl = [], []
    for _ in range(trials):
        a = round_to_format(rng.standard_normal((size, size)))
        b = round_to_format(rng.standard_normal((size, size)))
        qa = quantize_matrix(a, ROW_COLUMN_WISE, "row", man_width)
        qb = quantize_matrix(b, ROW_COLUMN_WISE, "column", man_width)
        ma, mb = qa.signed_mantissas, qb.signed_mantissas
        for i in range(size):
            for j in range(size):
                prods = ma[i] * mb[:, j]
                psum = np.cumsum(prods)
                bl.extend(_lzc(abs(int(v))) for v in psum)
                fl.extend(_fp_pipeline_lzc(prods))
    bl, fl = np.array(bl), np.array(fl)
    return LzcStudy(bl, fl, np.array([_flip_drift(x) for x in bl]),
                    np.array([_flip_drift(x) for x in fl]))


# -- accumulator segment sensitivity ---------------------------------------------------


@dataclass
class SegmentStudy:
    bits: np.ndarray
    errors: np.ndarray

    def by_segment(self) -> dict[str, np.ndarray]:
        segs = np.array([q_segment(int(b)) for b in self.bits])
        return {s: self.errors[segs == s] for s in Q_SEGMENTS}

    def medians(self) -> dict[str, float]:
        return {s: float(np.median(v)) if v.size else float("nan")
                for s, v in self.by_segment().items()}

    def rows(self) -> list[dict]:
        out = []
        for s, v in self.by_segment().items():
            lo, hi = Q_SEGMENTS[s]
            out.append({"segment": s, "bits": f"{lo}-{hi - 1}", "flips": int(v.size),
                        "median_rel_err": float(np.median(v)) if v.size else None,
                        "p90_rel_err": float(np.quantile(v, 0.9)) if v.size else None,
                        "max_rel_err": float(v.max()) if v.size else None})
        return out


def study_segment_sensitivity(size: int = 8, flips_per_bit: int = 40, man_width: int = 8,
                              dataflow: str = "WS", seed: int = 0) -> SegmentStudy:
    """Transient flips in 22-bit PE accumulators of an unprotected array.

    Only effective flips (those that change an output) enter the
    distribution; the error is the largest output deviation relative to the
    largest clean output magnitude.
    """
    cfg = ArrayConfig(size, size, man_width, LZC_FIELD, dataflow, protected=False)
    rng = _rng(seed)
    lim = (1 << man_width) - 1
    total = cfg.cycles(size, protected=False)
    ids = [f"r{r}c{c}" for r in range(size) for c in range(size)]
    bits, errs = [], []

    def run(a, b, specs):
        arr = SystolicArray(cfg)
        arr.inject(specs)
        if dataflow == "WS":
            arr.load_weights(b)
            return arr.run_gemm_ws(a).result
        return arr.run_gemm_os(a, b).result

    for bit in range(LZC_FIELD):
        done = attempts = 0
        while done < flips_per_bit and attempts < 50 * flips_per_bit:
            attempts += 1
            a = rng.integers(-lim, lim + 1, (size, size))
            b = rng.integers(-lim, lim + 1, (size, size))
            spec = FaultSpec(FaultSite("pe", ids[rng.integers(len(ids))], "acc", bit),
                             FaultKind.TRANSIENT, int(rng.integers(size if dataflow == "WS" else 0,
                                                                   total)))
            clean = run(a, b, [])
            faulty = run(a, b, [spec])
            d = np.abs(faulty - clean).max()
            if d == 0:
                continue
            scale = np.abs(clean).max()
            bits.append(bit)
            errs.append(d / scale if scale else np.inf)
            done += 1
    return SegmentStudy(np.array(bits), np.array(errs, dtype=float))


# -- FP-domain baseline false positives ---------------------------------------------------


DEFAULT_EPS_GRID = tuple(2.0 ** -k for k in (12, 10, 8, 6, 4, 2))


@dataclass
class FpBaselineStudy:
    lengths: tuple[int, ...]
    eps_grid: tuple[float, ...]
    scales: tuple[str, ...]
    fp_rates: dict[tuple[str, float, int], float]
    fixed_point_rates: dict[int, float]
    runs: int

    def qualifying(self, scale: str = "max_abs") -> list[float]:
        """Tolerances whose FP false-positive rate is > 0 and nondecreasing in length."""
        good = []
        for eps in self.eps_grid:
            r = [self.fp_rates[(scale, eps, n)] for n in self.lengths]
            if all(x > 0 for x in r) and all(x <= y for x, y in zip(r, r[1:])):
                good.append(eps)
        return good

    def rows(self) -> list[dict]:
        out = []
        for (scale, eps, n), rate in sorted(self.fp_rates.items()):
            out.append({"checker": "fp_e2e_baseline", "scale": scale, "eps": eps,
                        "column_length": n, "runs": self.runs, "false_positive_rate": rate})
        for n, rate in sorted(self.fixed_point_rates.items()):
            out.append({"checker": "fixed_point", "scale": "-", "eps": 0.0, "column_length": n,
                        "runs": self.runs, "false_positive_rate": rate})
        return out


def study_fp_baseline(lengths=(16, 64, 128), runs: int = 20, eps_grid=DEFAULT_EPS_GRID,
                      scales=BASELINE_SCALES, man_width: int = 8, dataflow: str = "WS",
                      seed: int = 0) -> FpBaselineStudy:
    """False positives of FP-domain ABFT vs the fixed-point checkers, fault-free.

    Each run is an ``n x n`` GEMM on the protected NPU. The conventional check
    sums the reconstructed FP outputs down each column and compares against
    the checksum row ``(1^T A) B`` pushed through the same BFP datapath.
    """
    rng = _rng(seed)
    fp_hits = {(s, e, n): 0 for s in scales for e in eps_grid for n in lengths}
    fixed = {n: 0 for n in lengths}
    for n in lengths:
        cfg = NpuConfig(n, n, dataflow, man_width)
        for _ in range(runs):
            a = round_to_format(rng.standard_normal((n, n)))
            b = round_to_format(rng.standard_normal((n, n)))
            run = NpuSystem(cfg).run(a, b)
            if run.events:
                fixed[n] += 1
            check_row = reference_gemm(cfg, round_to_format(a.sum(axis=0, keepdims=True)), b)[0]
            for s in scales:
                for e in eps_grid:
                    if fp_e2e_baseline_check(run.outputs, check_row, e, scale=s):
                        fp_hits[(s, e, n)] += 1
    return FpBaselineStudy(tuple(lengths), tuple(eps_grid), tuple(scales),
                           {k: v / runs for k, v in fp_hits.items()},
                           {n: v / runs for n, v in fixed.items()}, runs)


# -- protection overhead and latency --------------------------------------------------------


def cycle_overhead(shapes, dataflows=("WS", "OS"), man_width: int = 8, seed: int = 0) -> list[dict]:
    """Measured cycle counts of protected vs unprotected runs on each shape.

    ``shapes`` holds ``(rows, cols, depth)`` triples; depth is the streamed
    length (M for WS, K for OS).
    """
    rng = _rng(seed)
    lim = (1 << man_width) - 1
    out = []
    for df in dataflows:
        for r, c, d in shapes:
            counts = {}
            for prot in (False, True):
                cfg = ArrayConfig(r, c, man_width, dataflow=df, protected=prot, depth=d)
                arr = SystolicArray(cfg)
                if df == "WS":
                    arr.load_weights(rng.integers(-lim, lim + 1, (r, c)))
                    run = arr.run_gemm_ws(rng.integers(-lim, lim + 1, (d, r)))
                else:
                    run = arr.run_gemm_os(rng.integers(-lim, lim + 1, (r, d)),
                                          rng.integers(-lim, lim + 1, (d, c)))
                counts[prot] = run.cycles
            out.append({"dataflow": df, "rows": r, "cols": c, "depth": d,
                        "unprotected": counts[False], "protected": counts[True],
                        "overhead": counts[True] - counts[False]})
    return out


# -- detection latency ------------------------------------------------------------------------


LATENCY_COMPONENTS = ("array-WS", "array-OS", "eu", "fp2bfp", "bfp2fp")


@dataclass
class LatencyStudy:
    sizes: tuple[int, ...]
    worst: dict[tuple[str, int], int | None]
    detected: dict[tuple[str, int], int]
    samples: int

    def series(self, component: str) -> list[int | None]:
        return [self.worst[(component, n)] for n in self.sizes]

    def rows(self) -> list[dict]:
        return [{"component": c, "size": n, "samples": self.samples,
                 "detected": self.detected[(c, n)], "worst_latency_cycles": self.worst[(c, n)]}
                for c, n in sorted(self.worst)]


def study_latency(sizes=(4, 8, 16), samples: int = 300, components=LATENCY_COMPONENTS,
                  seed: int = 0) -> LatencyStudy:
    """Worst observed cycles from a transient flip to its first detection event.

    Transients are drawn uniformly over (manifest site, cycle in the
    component's window); one workload per sample.
    """
    worst, detected = {}, {}
    for comp in components:
        kind, _, df = comp.partition("-")
        for n in sizes:
            target = build_target(kind, n, df or "WS")
            sites = target.manifest().sites
            lo, hi = target.window()
            rng = _rng([seed, n, LATENCY_COMPONENTS.index(comp)])
            lat = []
            for _ in range(samples):
                wl = target.workload(rng)
                spec = FaultSpec(sites[int(rng.integers(len(sites)))], FaultKind.TRANSIENT,
                                 int(rng.integers(lo, hi)))
                clean = target.execute(wl, [])
                faulty = target.execute(wl, [spec])
                res = classify_events(clean.outputs, faulty.outputs, faulty.events, [spec],
                                      clean.start_cycle, clean.events)
                if res.latency is not None:
                    lat.append(res.latency)
            worst[(comp, n)] = max(lat) if lat else None
            detected[(comp, n)] = len(lat)
    return LatencyStudy(tuple(sizes), worst, detected, samples)
