import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bfpnpu.errors import RateTooHigh, UnknownSite
from bfpnpu.fault_injection import (FaultKind, FaultSite, FaultSpec, InjectionPlan, Manifest,
                                    RegisterBank, RegisterFile, interpose_read, sample_plan)
from bfpnpu.systolic_sim import ArrayConfig, SystolicArray

SITE = FaultSite("pe", "r0c0", "acc", 3)


def _toy_manifest(n=100):
    return Manifest(tuple(FaultSite("pe", f"r0c{i}", "acc", b) for i in range(n // 10)
                          for b in range(10)))


def test_interpose_pass_through():
    assert interpose_read(InjectionPlan(), SITE, 1, 5) == 1
    assert interpose_read(InjectionPlan(), SITE, 0, 5) == 0


def test_interpose_stuck():
    plan = InjectionPlan.single(FaultSpec(SITE, FaultKind.STUCK_AT_1))
    assert interpose_read(plan, SITE, 0, 0) == 1
    plan = InjectionPlan.single(FaultSpec(SITE, FaultKind.STUCK_AT_0))
    assert interpose_read(plan, SITE, 1, 99) == 0


def test_interpose_transient_one_cycle():
    plan = InjectionPlan.single(FaultSpec(SITE, FaultKind.TRANSIENT, 7))
    assert [interpose_read(plan, SITE, 1, c) for c in (6, 7, 8)] == [1, 0, 1]


def test_interpose_other_site_untouched():
    plan = InjectionPlan.single(FaultSpec(SITE, FaultKind.STUCK_AT_1))
    assert interpose_read(plan, FaultSite("pe", "r0c0", "acc", 4), 0, 0) == 0


def test_spec_validation():
    with pytest.raises(ValueError):
        FaultSpec(SITE, FaultKind.TRANSIENT)
    with pytest.raises(ValueError):
        FaultSpec(SITE, FaultKind.STUCK_AT_0, 3)


def test_register_file_saboteur_matches_scalar_model():
    rf = RegisterFile("pe", "acc", ["a", "b"], 8)
    rf.write([0b1010_1010, 0])
    rf.inject(0, 0, FaultKind.STUCK_AT_1)
    rf.inject(1, 7, FaultKind.TRANSIENT, 4)
    assert rf.read_raw(3).tolist() == [0b1010_1011, 0]
    assert rf.read_raw(4).tolist() == [0b1010_1011, 0b1000_0000]
    # two's-complement view
    assert rf.read(4).tolist() == [0b1010_1011 - 256, -128]


def test_register_write_masks_to_width():
    rf = RegisterFile("pe", "acc", ["a"], 4)
    rf.write([-1])
    assert rf.read(0).tolist() == [-1] and rf.read_raw(0).tolist() == [15]


def test_stuck_at_1_on_zeroed_array_register_reads_one():
    arr = SystolicArray(ArrayConfig(2, 2, dataflow="WS"))
    site = FaultSite("pe", "r1c0", "acc", 0)
    assert arr.read_register(site) == 0
    arr.inject([FaultSpec(site, FaultKind.STUCK_AT_1)])
    assert arr.read_register(site) == 1


def test_bank_unknown_site():
    bank = RegisterBank([RegisterFile("pe", "acc", ["a"], 4)])
    with pytest.raises(UnknownSite):
        bank.locate(FaultSite("pe", "a", "acc", 4))
    with pytest.raises(UnknownSite):
        bank.apply([FaultSpec(FaultSite("eu", "a", "acc", 0), FaultKind.STUCK_AT_0)])
    bank.apply([FaultSpec(FaultSite("eu", "a", "acc", 0), FaultKind.STUCK_AT_0)], strict=False)


def test_manifest_closed_form_2x2_ws():
    cfg = ArrayConfig(2, 2, 8, 22, "WS")
    m = SystolicArray(cfg).manifest()
    guard = 1                                   # ceil(log2(2)) rows of check-vector growth
    per_pe = (8 + 1) + (8 + 1 + guard) + (22 + guard)
    ingress = 2 * (8 + 1 + guard)
    checker = 2 * 2 * (22 + guard)
    assert m.total_bits == 4 * per_pe + ingress + checker == 280
    assert m.by_unit() == {"pe": 168, "ingress": 20, "checker": 92}


def test_manifest_deterministic_and_unique():
    a = SystolicArray(ArrayConfig(3, 2, dataflow="OS")).manifest()
    b = SystolicArray(ArrayConfig(3, 2, dataflow="OS")).manifest()
    assert a.sites == b.sites
    assert len(set(a.sites)) == len(a)


def test_empty_manifest():
    m = Manifest()
    assert m.total_bits == 0
    assert sample_plan(m, 0.0, 1, 10).specs == ()


def test_manifest_text_roundtrip():
    m = SystolicArray(ArrayConfig(2, 2)).manifest()
    assert Manifest.loads(m.dumps()).sites == m.sites
    assert m.dumps().startswith("# bfpnpu-manifest v1\n")


def test_sample_rate_zero_and_one_site():
    m = _toy_manifest()
    assert len(sample_plan(m, 0.0, 0, 10)) == 0
    assert len(sample_plan(m, 1 / m.total_bits, 0, 10)) == 1


def test_sample_count_and_without_replacement():
    m = _toy_manifest(1000)
    plan = sample_plan(m, 0.3, 5, (10, 20))
    assert len(plan) == 300
    assert len({s.site for s in plan.specs}) == 300
    for s in plan.specs:
        if s.kind is FaultKind.TRANSIENT:
            assert 10 <= s.cycle < 20


def test_sample_rate_too_high():
    with pytest.raises(RateTooHigh):
        sample_plan(_toy_manifest(), 1.5, 0, 10)
    with pytest.raises(ValueError):
        sample_plan(_toy_manifest(), -0.1, 0, 10)


def test_sample_reproducible_and_seed_sensitive():
    m = _toy_manifest(1000)
    plans = [sample_plan(m, 0.01, s, 50) for s in range(100)]
    assert all(p == sample_plan(m, 0.01, s, 50) for s, p in enumerate(plans))
    assert len({p.specs for p in plans}) == 100


def test_sample_kind_restriction_and_uniformity():
    m = _toy_manifest(1000)
    plan = sample_plan(m, 0.5, 1, 10, [FaultKind.STUCK_AT_1])
    assert {s.kind for s in plan.specs} == {FaultKind.STUCK_AT_1}
    kinds = [s.kind for s in sample_plan(m, 0.9, 2, 10).specs]
    counts = np.array([kinds.count(k) for k in FaultKind])
    assert np.all(np.abs(counts / len(kinds) - 1 / 3) < 0.05)


def test_unit_weights():
    sites = tuple(FaultSite(u, "x", "r", b) for u in ("pe", "eu") for b in range(50))
    plan = sample_plan(Manifest(sites), 0.2, 0, 10, unit_weights={"eu": 1.0})
    assert {s.site.unit for s in plan.specs} == {"eu"}


@given(st.integers(0, 2**31), st.floats(0, 0.2))
def test_plan_text_roundtrip(seed, rate):
    plan = sample_plan(_toy_manifest(200), rate, seed, (3, 40))
    back = InjectionPlan.loads(plan.dumps())
    assert back == plan


def test_empty_plan_is_non_interfering():
    rng = np.random.default_rng(0)
    a = rng.integers(-255, 256, (4, 4))
    b = rng.integers(-255, 256, (4, 4))
    runs = []
    for plan in (None, InjectionPlan()):
        arr = SystolicArray(ArrayConfig(4, 4))
        if plan is not None:
            arr.inject(plan.specs)
        arr.load_weights(b)
        runs.append(arr.run_gemm_ws(a, trace=True))
    assert runs[0].trace_lines() == runs[1].trace_lines()
