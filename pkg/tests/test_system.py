import numpy as np
import pytest

from bfpnpu.bfp_core import bfp_dot_reference, dot_to_float, quantize_values, round_to_format
from bfpnpu.errors import ConfigError, DimMismatch, UnknownSite
from bfpnpu.fault_injection import FaultKind, FaultSite, FaultSpec
from bfpnpu.protection import Checker, classify_events
from bfpnpu.system import NpuConfig, NpuSystem, enumerate_sites, reference_gemm, run_gemm


def _data(rng, m, k, n):
    return rng.standard_normal((m, k)) * 4, rng.standard_normal((k, n)) / 4


def _scalar_oracle(a, b, w=8):
    """Element by element through the reference dot product."""
    a, b = round_to_format(a), round_to_format(b)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        qa = quantize_values(a[i], w)
        for j in range(b.shape[1]):
            e, acc = bfp_dot_reference(qa, quantize_values(b[:, j], w))
            out[i, j] = dot_to_float(e, acc, w)
    return round_to_format(out)


@pytest.mark.parametrize("df,m,k", [("WS", 6, 4), ("OS", 4, 5)])
def test_bit_exact_against_scalar_oracle(df, m, k):
    rng = np.random.default_rng(0)
    cfg = NpuConfig(4, 4, df, depth=m if df == "WS" else k)
    a, b = _data(rng, m, k, 4)
    run = run_gemm(cfg, a, b)
    assert run.events == []
    expect = _scalar_oracle(a, b)
    assert np.array_equal(run.outputs, expect)
    assert np.array_equal(reference_gemm(cfg, a, b), expect)


def test_many_clean_runs_are_silent():
    rng = np.random.default_rng(1)
    for df in ("WS", "OS"):
        cfg = NpuConfig(4, 4, df, depth=4)
        for _ in range(50):
            run = run_gemm(cfg, *_data(rng, 4, 4, 4))
            assert run.events == []


def test_phases_are_contiguous_and_ordered():
    cfg = NpuConfig(4, 4, "WS", depth=3)
    run = run_gemm(cfg, *_data(np.random.default_rng(2), 3, 4, 4))
    ph = run.phases
    assert ph["fp2bfp"][0] == 0
    assert ph["fp2bfp"][1] == ph["compute"][0]
    assert ph["compute"][1] == ph["bfp2fp"][0]
    assert run.cycles == ph["bfp2fp"][1]
    # the redundant exponent pass ends inside the compute phase
    assert run.eu_completion <= run.mantissa_completion < ph["compute"][1]


def test_ws_depth_bound():
    assert NpuConfig(4, 4).max_ws_depth == 10
    NpuConfig(4, 4, depth=10)
    with pytest.raises(ConfigError):
        NpuConfig(4, 4, depth=11)
    # unprotected or OS arrays have no exponent-redundancy deadline
    NpuConfig(4, 4, depth=11, protection="none")
    NpuConfig(4, 4, "OS", depth=64)


def test_depth_bound_is_tight():
    for r, c in ((2, 2), (4, 3), (3, 5)):
        cfg = NpuConfig(r, c, depth=2 * r + c - 2)
        run = run_gemm(cfg, *_data(np.random.default_rng(r), cfg.depth, r, c))
        assert run.eu_completion <= run.mantissa_completion


def test_invalid_protection_and_shapes():
    with pytest.raises(ConfigError):
        NpuConfig(4, 4, protection="tmr")
    with pytest.raises(DimMismatch):
        run_gemm(NpuConfig(4, 4), np.ones((2, 4)), np.ones((3, 4)))


def test_inject_unknown_site():
    with pytest.raises(UnknownSite):
        NpuSystem(NpuConfig(2, 2)).inject([FaultSpec(FaultSite("pe", "r9c9", "acc", 0),
                                                     FaultKind.STUCK_AT_1)])


def test_manifest_covers_every_unit():
    units = set(enumerate_sites(NpuConfig(2, 2)).by_unit())
    assert {"pe", "eu", "converter", "latch"} <= units
    bare = enumerate_sites(NpuConfig(2, 2, protection="none")).total_bits
    assert bare < enumerate_sites(NpuConfig(2, 2)).total_bits


def test_array_fault_is_detected_end_to_end():
    rng = np.random.default_rng(3)
    cfg = NpuConfig(4, 4, depth=4)
    a, b = _data(rng, 4, 4, 4)
    clean = run_gemm(cfg, a, b)
    spec = FaultSpec(FaultSite("pe", "r2c1", "acc", 12), FaultKind.STUCK_AT_1)
    run = run_gemm(cfg, a, b, [spec])
    r = classify_events(clean.outputs, run.outputs, run.events, [spec])
    assert r.effective and r.covered
    assert {e.checker for e in run.events} == {Checker.ABFT_WS}


def test_full_dmr_flags_any_output_change():
    rng = np.random.default_rng(4)
    cfg = NpuConfig(4, 4, depth=4, protection="full_dmr")
    a, b = _data(rng, 4, 4, 4)
    assert run_gemm(cfg, a, b).events == []
    spec = FaultSpec(FaultSite("pe", "r0c0", "weight", 6), FaultKind.STUCK_AT_1)
    run = run_gemm(cfg, a, b, [spec])
    assert [e.checker for e in run.events] == [Checker.FULL_DMR]


def test_unprotected_system_raises_nothing():
    rng = np.random.default_rng(5)
    cfg = NpuConfig(4, 4, depth=4, protection="none")
    a, b = _data(rng, 4, 4, 4)
    spec = FaultSpec(FaultSite("pe", "r2c1", "acc", 12), FaultKind.STUCK_AT_1)
    run = run_gemm(cfg, a, b, [spec])
    assert run.events == [] and not np.array_equal(run.outputs, reference_gemm(cfg, a, b))
