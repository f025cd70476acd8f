import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfpnpu.bfp_core import FP16, decompose, dequantize_block, quantize_values
from bfpnpu.converters import (BFP2FP_CYCLES, FP2BFP_CYCLES, Bfp2FpConverter, Fp2BfpConverter,
                               bfp_to_fp, enumerate_converter_sites, fp_to_bfp)
from bfpnpu.errors import ExponentOverflow
from bfpnpu.fault_injection import FaultKind, FaultSite, FaultSpec
from bfpnpu.protection import outputs_differ

fp32_floats = st.floats(allow_nan=False, allow_infinity=False, width=32).filter(lambda v: abs(v) < 1e30)


def test_powers_of_two_block():
    blk, events = fp_to_bfp([2.0, 1.0, 0.5], man_width=4)
    assert (blk.shared_exp, blk.mantissas) == (1, (0b1000, 0b0100, 0b0010))
    assert events == []
    back, events = bfp_to_fp(blk)
    assert [s.value for s in back] == [2.0, 1.0, 0.5] and events == []


def test_stage_counts():
    conv = Fp2BfpConverter(3)
    conv.convert([decompose(v) for v in (1.0, 2.0, 3.0)])
    assert conv.cycle == FP2BFP_CYCLES == 5
    back = Bfp2FpConverter(3)
    back.convert_block(quantize_values([1.0, 2.0, 3.0]))
    assert back.cycle == BFP2FP_CYCLES == 4


@given(st.lists(fp32_floats, min_size=1, max_size=16), st.integers(2, 12))
@settings(max_examples=150, deadline=None)
def test_forward_matches_reference_quantizer(values, w):
    blk, events = fp_to_bfp(values, man_width=w)
    assert blk == quantize_values(values, w) and events == []


@given(st.lists(fp32_floats, min_size=1, max_size=16), st.integers(2, 12))
@settings(max_examples=150, deadline=None)
def test_reverse_matches_reference_dequantizer(values, w):
    blk = quantize_values(values, w)
    out, events = bfp_to_fp(blk)
    assert [s.value for s in out] == [s.value for s in dequantize_block(blk)]
    assert events == []


def test_vectorized_rows_match_scalar_path():
    rng = np.random.default_rng(0)
    x = np.float32(rng.standard_normal((10, 8)) * 100).astype(np.float64)
    conv = Fp2BfpConverter(8)
    rows, events = conv.convert_rows(x)
    assert events == []
    assert rows == [quantize_values(r) for r in x]
    assert conv.cycle == 10 * FP2BFP_CYCLES


def test_reverse_overflow_policy():
    blk = quantize_values([1.0])
    with pytest.raises(ExponentOverflow):
        Bfp2FpConverter(1, fmt=FP16).convert([0], [255], [20])
    res = Bfp2FpConverter(1, fmt=FP16, overflow="inf").convert([1], [255], [20])
    assert res.values.tolist() == [-np.inf]
    assert bfp_to_fp(blk, FP16)[0][0].value == 1.0


def _sweep(conv_factory, run, cycles):
    """Every single transient on every converter bit and cycle; returns tallies."""
    clean = run(conv_factory())
    tally = {"detected": 0, "silent": 0, "masked": 0, "checker_only": 0}
    for site in conv_factory().manifest().sites:
        for cyc in range(cycles):
            conv = conv_factory()
            conv.inject([FaultSpec(site, FaultKind.TRANSIENT, cyc)])
            out, events = run(conv)
            changed = outputs_differ(clean[0], out)
            key = ("detected" if events else "silent") if changed else (
                "checker_only" if events else "masked")
            tally[key] += 1
            if site.unit == "converter" and changed:
                assert events, str(site)
    return tally


def test_forward_dmr_sweep():
    vals = [decompose(v) for v in (3.5, -0.125, 17.0, 0.0)]

    def run(conv):
        blk = conv.convert(vals)
        return np.array(blk.mantissas + (blk.shared_exp,) + blk.signs), conv.dmr.events

    tally = _sweep(lambda: Fp2BfpConverter(4), run, FP2BFP_CYCLES)
    assert tally["detected"] > 0


def test_reverse_dmr_sweep():
    blk = quantize_values([3.5, -0.125, 17.0, 0.0])

    def run(conv):
        res = conv.convert_block(blk)
        return res.values, res.events

    tally = _sweep(lambda: Bfp2FpConverter(4, overflow="inf"), run, BFP2FP_CYCLES)
    assert tally["detected"] > 0


def test_shared_input_latch_is_a_blind_spot():
    """Both replicas read the same latch, so a latch fault corrupts them identically."""
    vals = [decompose(v) for v in (3.5, 1.0)]
    conv = Fp2BfpConverter(2)
    conv.inject([FaultSpec(FaultSite("latch", "fp2bfp.e0", "fp2bfp.man", 6),
                           FaultKind.STUCK_AT_0)])
    blk = conv.convert(vals)
    assert blk != quantize_values([3.5, 1.0]) and conv.dmr.events == []


def test_lzc_transient_detected():
    blk = quantize_values([3.0, 0.25])
    conv = Bfp2FpConverter(2)
    conv.inject([FaultSpec(FaultSite("converter", "bfp2fp.a.e1", "lzc", 0), FaultKind.TRANSIENT, 2)])
    res = conv.convert_block(blk)
    assert [e.hint for e in res.events] == ["bfp2fp.lzc"]


def test_fuzzy_mode_catches_leading_bits_only():
    blk = quantize_values([3.0, 0.75])
    low = FaultSpec(FaultSite("converter", "bfp2fp.a.e0", "norm_man", 0), FaultKind.TRANSIENT, 3)
    top = FaultSpec(FaultSite("converter", "bfp2fp.a.e0", "norm_man", 7), FaultKind.TRANSIENT, 3)
    for spec, caught in ((low, False), (top, True)):
        conv = Bfp2FpConverter(2, check="fuzzy")
        conv.inject([spec])
        res = conv.convert_block(blk)
        assert res.values[0] != 3.0
        assert bool(res.events) is caught


def test_unprotected_converter_has_no_checker():
    conv = Fp2BfpConverter(2, check="off")
    conv.inject([FaultSpec(FaultSite("converter", "fp2bfp.a", "max_exp", 0), FaultKind.STUCK_AT_1)])
    blk = conv.convert([decompose(v) for v in (4.0, 1.0)])
    assert blk.shared_exp != 2 and conv.dmr.events == []


def test_site_enumeration_is_stable():
    a, b = enumerate_converter_sites(4), enumerate_converter_sites(4)
    assert a.sites == b.sites and set(a.by_unit()) == {"latch", "converter"}
    assert enumerate_converter_sites(4, check="off").total_bits < a.total_bits
