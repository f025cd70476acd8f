"""The twelve acceptance experiments, one callable per criterion.

Every function runs at the stated scale by default and returns a
:class:`CriterionResult`; nothing here asserts, so a failing criterion still
reports its measurements.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..bfp_core import (FP32, DEFAULT_MAN_WIDTH, bfp_dot_reference, dequantize_block,
                        quantize_values, round_to_format)
from ..exponent_path import EuArray, ExponentVectors
from ..system import NpuConfig, NpuSystem
from ..systolic_sim import ArrayConfig, SystolicArray
from .campaign import run_campaign
from .config import CampaignConfig
from .studies import (cycle_overhead, study_blocking_error, study_fp_baseline, study_latency,
                      study_leading_zeros, study_segment_sensitivity)

COVERAGE_TARGET = 0.98


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    data: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.number:2d} {self.name}: {self.detail}"


def _random_block(rng, n, w, zero_prob=0.03):
    if rng.random() < zero_prob:
        x = np.zeros(n)
    else:
        x = rng.standard_normal(n) * np.exp2(rng.integers(-12, 13))
        x *= np.exp2(rng.integers(-6, 1, n))          # intra-block spread
    return quantize_values(round_to_format(x), w)


# 1 ----------------------------------------------------------------------------------------


def exactness(count: int = 1000, max_len: int = 128, man_width: int = DEFAULT_MAN_WIDTH,
              seed: int = 1) -> CriterionResult:
    """Dot products through the mantissa array and EU array vs the integer oracle.

    Each GEMM output element is an independent block dot product with its own
    pair of shared exponents, so small GEMMs supply many dot products.
    """
    rng = np.random.default_rng(seed)
    done = mism = gemms = 0
    while done < count:
        n = int(rng.integers(1, max_len + 1))
        m, c = (int(x) for x in rng.integers(1, 7, 2))
        df = ("WS", "OS")[gemms % 2]
        a_blocks = [_random_block(rng, n, man_width) for _ in range(m)]
        b_blocks = [_random_block(rng, n, man_width) for _ in range(c)]
        am = np.array([b.signed_mantissas() for b in a_blocks], np.int64)
        bm = np.array([b.signed_mantissas() for b in b_blocks], np.int64).T
        if df == "WS":
            arr = SystolicArray(ArrayConfig(n, c, man_width, dataflow="WS", depth=m))
            arr.load_weights(bm)
            acc = arr.run_gemm_ws(am).result
        else:
            arr = SystolicArray(ArrayConfig(m, c, man_width, dataflow="OS", depth=n))
            acc = arr.run_gemm_os(am, bm).result
        eu = EuArray(c).run_redundant(ExponentVectors([b.shared_exp for b in a_blocks],
                                                      [b.shared_exp for b in b_blocks]))
        for i in range(m):
            for j in range(c):
                e, s = bfp_dot_reference(a_blocks[i], b_blocks[j])
                mism += int(acc[i, j] != s or eu.exponents[i, j] != e or bool(eu.events))
                done += 1
        gemms += 1
    return CriterionResult(1, "dot-product exactness", mism == 0,
                           f"{mism} mismatches in {done} dot products ({gemms} GEMMs, N<={max_len})",
                           {"dot_products": done, "mismatches": mism, "gemms": gemms})


# 2 ----------------------------------------------------------------------------------------


def quantization_bound(blocks: int = 10_000, man_width: int = DEFAULT_MAN_WIDTH,
                       seed: int = 2) -> CriterionResult:
    rng = np.random.default_rng(seed)
    viol = elems = 0
    worst = 0.0
    for _ in range(blocks):
        n = int(rng.integers(1, 33))
        # element exponents stay inside the normal range of the format
        x = round_to_format(rng.uniform(-2, 2, n) * np.exp2(rng.integers(FP32.emin + 8,
                                                                           FP32.emax - 1)))
        blk = quantize_values(x, man_width)
        back = np.array([s.value for s in dequantize_block(blk)])
        bound = np.ldexp(1.0, blk.shared_exp - man_width + 1)
        err = np.abs(back - x)
        viol += int(np.count_nonzero(err > bound))
        worst = max(worst, float(np.max(err / bound)))
        elems += n
    return CriterionResult(2, "quantization bound", viol == 0,
                           f"{viol} violations over {blocks} blocks ({elems} elements); "
                           f"worst error/bound = {worst:.3f}",
                           {"blocks": blocks, "elements": elems, "violations": viol,
                            "worst_ratio": worst})


# 3 ----------------------------------------------------------------------------------------


def zero_false_positives(runs_per_cell: int = 1250, sizes=(4, 8, 16, 64),
                         seed: int = 3) -> CriterionResult:
    """Fault-free protected NPU runs: every fixed-point checker stays silent."""
    rng = np.random.default_rng(seed)
    total = flagged = 0
    per = {}
    for df in ("WS", "OS"):
        for n in sizes:
            cfg = NpuConfig(n, n, df)
            sa, sb = (cfg.out_rows, cfg.block_len), (cfg.block_len, n)
            hits = 0
            for r in range(runs_per_cell):
                if r % 10 == 9:
                    a = rng.integers(-128, 128, sa).astype(float)
                    b = rng.integers(-128, 128, sb).astype(float)
                else:
                    # per-row scale spread stresses alignment and wide accumulators
                    a = rng.standard_normal(sa) * np.exp2(rng.integers(-20, 21, (sa[0], 1)))
                    b = rng.standard_normal(sb) * np.exp2(rng.integers(-20, 21, (1, n)))
                hits += int(bool(NpuSystem(cfg).run(a, b).events))
            per[f"{df}{n}"] = hits
            total += runs_per_cell
            flagged += hits
    return CriterionResult(3, "zero fixed-point false positives", flagged == 0 and total >= 10_000,
                           f"{flagged} flagged runs out of {total} fault-free runs",
                           {"runs": total, "flagged": flagged, "per_cell": per})


# 4 ----------------------------------------------------------------------------------------


def _shortfalls(point) -> dict[str, dict]:
    out = {}
    for cls, rec in sorted(point.by_unit.items()):
        d = rec.as_dict()
        if d["effective"] and d["coverage_effective"] < 1.0:
            out[cls] = {"effective": d["effective"], "silent": d["n_silent"],
                        "coverage": round(d["coverage_effective"], 4)}
    return out


def detection_coverage(sizes=(4, 8), dataflows=("WS", "OS"), seed: int = 4,
                       workers: int = 1) -> CriterionResult:
    cells, ok = {}, True
    for df in dataflows:
        for n in sizes:
            cfg = CampaignConfig(target="array", mode="exhaustive", sizes=(n,), dataflows=(df,),
                                 separate_kinds=False, seed=seed, workers=workers)
            p = run_campaign(cfg).points[0]
            d = p.coverage.as_dict()
            cov = d["coverage_effective"]
            ok &= cov >= COVERAGE_TARGET
            cells[f"{df}{n}"] = {"coverage": cov, "effective": d["effective"],
                                 "injected": d["injected"], "shortfalls": _shortfalls(p)}
    parts = []
    for k, v in cells.items():
        short = ", ".join(f"{c} {s['coverage']}" for c, s in v["shortfalls"].items())
        parts.append(f"{k} {v['coverage']:.4f} of {v['effective']} effective"
                     + (f" (short: {short})" if short else ""))
    detail = "; ".join(parts)
    return CriterionResult(4, f"detection coverage >= {COVERAGE_TARGET}", ok, detail, cells)


# 5 ----------------------------------------------------------------------------------------


def abft_overhead(seed: int = 5) -> CriterionResult:
    shapes = [(r, c, d) for r in (1, 2, 4, 8, 16) for c in (1, 3, 8, 16) for d in (1, 5, 16)]
    rows = cycle_overhead(shapes, seed=seed)
    bad = [r for r in rows if r["overhead"] != 2]
    # the same must hold for the compute phase of the whole NPU
    for df in ("WS", "OS"):
        for n in (2, 4, 8, 16):
            spans = {}
            for prot in ("bfp", "none"):
                ph = NpuSystem(NpuConfig(n, n, df, protection=prot)).schedule(n)["compute"]
                spans[prot] = ph[1] - ph[0]
            if spans["bfp"] - spans["none"] != 2:
                bad.append({"dataflow": df, "rows": n, "system": spans})
    return CriterionResult(5, "+2-cycle ABFT overhead", not bad,
                           f"{len(rows)} array shapes + 8 NPU shapes, {len(bad)} with overhead != 2",
                           {"shapes": len(rows), "bad": bad})


# 6 ----------------------------------------------------------------------------------------


def exponent_slack_and_redundancy(eu_sizes=(4, 8), seed: int = 6) -> CriterionResult:
    rng = np.random.default_rng(seed)
    late = []
    tested = 0
    for df in ("WS", "OS"):
        for r in (1, 2, 3, 4, 8, 16, 32):
            for c in (1, 2, 5, 8, 16, 32):
                base = NpuConfig(r, c, df)
                depths = {1, max(r // 2, 1), r, base.max_ws_depth} if df == "WS" else {1, r, 2 * r + 3}
                for d in sorted(depths):
                    cfg = NpuConfig(r, c, df, depth=d)
                    run = NpuSystem(cfg).run(rng.standard_normal((cfg.out_rows, cfg.block_len)),
                                             rng.standard_normal((cfg.block_len, c)))
                    tested += 1
                    if run.eu_completion > run.mantissa_completion:
                        late.append((df, r, c, d, run.eu_completion, run.mantissa_completion))
    sweep = {}
    escapes = {}
    ok = not late
    for n in eu_sizes:
        cfg = CampaignConfig(target="eu", mode="exhaustive", sizes=(n,),
                             kinds=("stuck_at_0", "stuck_at_1"), separate_kinds=False, seed=seed)
        p = run_campaign(cfg).points[0]
        d = p.coverage.as_dict()
        sweep[n] = {cls: rec.as_dict()["coverage_effective"] for cls, rec in sorted(p.by_unit.items())}
        escapes[n] = p.escapes
        ok &= d["coverage_effective"] == 1.0
    detail = (f"{len(late)} late of {tested} shapes; stuck-at coverage by class: "
              + "; ".join(f"n={n} " + ", ".join(f"{k} {v:.3f}" for k, v in s.items())
                          for n, s in sweep.items()))
    return CriterionResult(6, "exponent-path slack and ring redundancy", ok, detail,
                           {"late": late, "shapes": tested, "coverage": sweep,
                            "escapes": escapes})


# 7 ----------------------------------------------------------------------------------------


def converter_dmr(n: int = 4, workloads: int = 3, clean_runs: int = 1000,
                  seed: int = 7) -> CriterionResult:
    """Every single-replica fault that alters the output is caught; clean runs stay silent."""
    ok = True
    parts = []
    data = {}
    for target in ("fp2bfp", "bfp2fp"):
        silent = eff = inj = 0
        for k in range(workloads):
            cfg = CampaignConfig(target=target, mode="exhaustive", sizes=(n,), units=("converter",),
                                 separate_kinds=False, seed=seed + k)
            d = run_campaign(cfg).points[0].coverage.as_dict()
            silent += d["n_silent"]
            eff += d["effective"]
            inj += d["injected"]
        cfg = CampaignConfig(target=target, mode="rate", sizes=(n,), rates=(0.0,),
                             runs_per_point=clean_runs, seed=seed)
        fp = run_campaign(cfg).points[0].false_positive_runs
        ok &= silent == 0 and fp == 0 and eff > 0
        data[target] = {"injected": inj, "effective": eff, "silent": silent,
                        "clean_runs": clean_runs, "false_positive_runs": fp}
        parts.append(f"{target} {silent} silent of {eff} effective, {fp}/{clean_runs} clean flagged")
    return CriterionResult(7, "converter DMR soundness and coverage", ok, "; ".join(parts), data)


# 8 ----------------------------------------------------------------------------------------


def fp_baseline_false_positives(runs: int = 40, seed: int = 8) -> CriterionResult:
    st = study_fp_baseline(runs=runs, seed=seed)
    good = st.qualifying("max_abs")
    fixed_zero = all(v == 0 for v in st.fixed_point_rates.values())
    curves = {f"{e:g}": [st.fp_rates[("max_abs", e, n)] for n in st.lengths] for e in st.eps_grid}
    shown = max(good) if good else max(st.eps_grid)
    detail = (f"qualifying eps (max_abs scale) {[f'{e:g}' for e in good]}; "
              f"rates at eps={shown:g} over {list(st.lengths)}: {curves[f'{shown:g}']}; "
              f"fixed-point rate {st.fixed_point_rates}")
    return CriterionResult(8, "FP-domain checker false positives vs column length",
                           bool(good) and fixed_zero, detail,
                           {"lengths": st.lengths, "max_abs_curves": curves,
                            "rows": st.rows()})


# 9 ----------------------------------------------------------------------------------------


def segment_ordering(flips_per_bit: int = 60, seed: int = 9) -> CriterionResult:
    st = study_segment_sensitivity(size=8, flips_per_bit=flips_per_bit, seed=seed)
    med = st.medians()
    ratio = med["Q4"] / med["Q1"] if med["Q1"] > 0 else float("inf")
    ok = med["Q4"] > med["Q3"] >= med["Q2"] >= med["Q1"] and ratio > 10
    detail = ", ".join(f"{k} {v:.3g}" for k, v in med.items()) + f"; Q4/Q1 = {ratio:.3g}"
    return CriterionResult(9, "accumulator segment ordering", ok, detail,
                           {"medians": med, "ratio": ratio, "rows": st.rows()})


# 10 ---------------------------------------------------------------------------------------


def leading_zero_amplification(trials: int = 32, seed: int = 10) -> CriterionResult:
    st = study_leading_zeros(trials=trials, seed=seed)
    s = st.summary()
    ok = s["bfp_mean_lzc"] > s["fp_mean_lzc"] and s["bfp_mean_drift"] > s["fp_mean_drift"]
    detail = (f"mean LZC {s['bfp_mean_lzc']:.2f} (BFP) vs {s['fp_mean_lzc']:.2f} (FP); "
              f"mean drift {s['bfp_mean_drift']:.2f} vs {s['fp_mean_drift']:.2f} "
              f"(ratio {s['drift_ratio']:.2f}, reported only)")
    return CriterionResult(10, "leading-zero amplification", ok, detail, s)


# 11 ---------------------------------------------------------------------------------------


def blocking_ordering(trials: int = 100, size: int = 128, seed: int = 11) -> CriterionResult:
    st = study_blocking_error(trials=trials, size=size, seed=seed)
    seg_le_rc = int(np.sum(st.mse[:, 0] <= st.mse[:, 1]))
    rc_le_mat = int(np.sum(st.mse[:, 1] <= st.mse[:, 2]))
    need = int(np.ceil(0.99 * trials))
    rows = st.rows()
    detail = (f"segment<=row-column in {seg_le_rc}/{trials}, row-column<=matrix in "
              f"{rc_le_mat}/{trials}; mean MSE "
              + ", ".join(f"{r['strategy']} {r['mse_mean']:.3g}" for r in rows))
    return CriterionResult(11, "blocking MSE ordering", seg_le_rc >= need and rc_le_mat >= need,
                           detail, {"seg_le_rc": seg_le_rc, "rc_le_mat": rc_le_mat, "rows": rows})


# 12 ---------------------------------------------------------------------------------------


def latency_scaling(samples: int = 300, seed: int = 12) -> CriterionResult:
    st = study_latency(samples=samples, seed=seed)
    ok = True
    parts = []
    for comp in ("array-WS", "array-OS", "eu"):
        s = st.series(comp)
        ok &= None not in s and all(x < y for x, y in zip(s, s[1:]))
        parts.append(f"{comp} {s}")
    for comp in ("fp2bfp", "bfp2fp"):
        s = st.series(comp)
        ok &= None not in s and len(set(s)) == 1
        parts.append(f"{comp} {s}")
    return CriterionResult(12, "detection latency scaling", ok,
                           f"worst cycles at sizes {list(st.sizes)}: " + "; ".join(parts),
                           {"rows": st.rows()})


CRITERIA = {
    1: exactness,
    2: quantization_bound,
    3: zero_false_positives,
    4: detection_coverage,
    5: abft_overhead,
    6: exponent_slack_and_redundancy,
    7: converter_dmr,
    8: fp_baseline_false_positives,
    9: segment_ordering,
    10: leading_zero_amplification,
    11: blocking_ordering,
    12: latency_scaling,
}


def run_criterion(number: int, **kwargs) -> CriterionResult:
    if number not in CRITERIA:
        raise KeyError(f"no acceptance criterion {number}")
    t = time.perf_counter()
    res = CRITERIA[number](**kwargs)
    res.seconds = time.perf_counter() - t
    return res


__all__ = ["CRITERIA", "CriterionResult", "run_criterion", "COVERAGE_TARGET"]
