import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfpnpu.errors import AccOverflow, ConfigError, DimMismatch
from bfpnpu.fault_injection import FaultKind, FaultSite, FaultSpec
from bfpnpu.systolic_sim import ArrayConfig, SystolicArray, register_map


def _rand(rng, shape, w=8):
    lim = (1 << w) - 1
    return rng.integers(-lim, lim + 1, shape)


def _ws(a, b, protected=True, specs=(), trace=False, **kw):
    r, c = b.shape
    arr = SystolicArray(ArrayConfig(r, c, dataflow="WS", protected=protected,
                                    depth=max(a.shape[0], 1), **kw))
    arr.inject(specs)
    arr.load_weights(b)
    return arr.run_gemm_ws(a, trace=trace)


def _os(a, b, protected=True, specs=(), bias=None, trace=False, **kw):
    arr = SystolicArray(ArrayConfig(a.shape[0], b.shape[1], dataflow="OS", protected=protected,
                                    depth=a.shape[1], **kw))
    arr.inject(specs)
    return arr.run_gemm_os(a, b, bias=bias, trace=trace)


def _bigint(a, b):
    return np.array([[sum(int(x) * int(y) for x, y in zip(row, col)) for col in b.T]
                     for row in a], dtype=object)


def test_load_weights_readback():
    rng = np.random.default_rng(0)
    b = _rand(rng, (16, 16))
    arr = SystolicArray(ArrayConfig(16, 16))
    arr.load_weights(b)
    assert np.array_equal(arr.weight.read(arr.cycle), b)
    assert arr.cycle == 16


def test_load_weights_zero_and_identity():
    arr = SystolicArray(ArrayConfig(2, 2)).load_weights(np.zeros((2, 2), int))
    assert not arr.weight.read(0).any()
    arr = SystolicArray(ArrayConfig(2, 2)).load_weights(np.eye(2, dtype=int))
    assert arr.weight.read(0).tolist() == [[1, 0], [0, 1]]


def test_load_weights_dim_mismatch():
    with pytest.raises(DimMismatch):
        SystolicArray(ArrayConfig(2, 3)).load_weights(np.zeros((3, 2), int))


def test_ws_ones_times_identity():
    run = _ws(np.ones((1, 4), int), np.eye(4, dtype=int))
    assert run.result.tolist() == [[1, 1, 1, 1]]
    assert run.events == []


def test_os_identity_with_zero_bias():
    run = _os(np.eye(4, dtype=int), np.eye(4, dtype=int))
    assert np.array_equal(run.result, np.eye(4))


def test_ws_random_matches_bigint():
    rng = np.random.default_rng(1)
    a, b = _rand(rng, (8, 8), 7), _rand(rng, (8, 8), 7)
    assert (_ws(a, b).result == _bigint(a, b)).all()


def test_os_with_bias_matches_bigint():
    rng = np.random.default_rng(2)
    a, b = _rand(rng, (8, 8)), _rand(rng, (8, 8))
    bias = rng.integers(-1000, 1000, (8, 8))
    run = _os(a, b, bias=bias)
    assert (run.result == _bigint(a, b) + bias).all()
    assert run.events == []


@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9),
       st.integers(2, 10))
@settings(max_examples=60, deadline=None)
def test_dataflow_equivalence(seed, m, k, c, w):
    rng = np.random.default_rng(seed)
    a, b = _rand(rng, (m, k), w), _rand(rng, (k, c), w)
    ws = _ws(a, b, man_width=w)
    os_ = _os(a, b, man_width=w)
    assert np.array_equal(ws.result, a @ b)
    assert np.array_equal(os_.result, a @ b)
    assert ws.events == [] and os_.events == []


@pytest.mark.parametrize("r,c,m", [(1, 1, 1), (4, 4, 4), (3, 7, 5), (8, 2, 11)])
def test_cycle_model(r, c, m):
    rng = np.random.default_rng(r * c)
    a, b = _rand(rng, (m, r)), _rand(rng, (r, c))
    off, on = _ws(a, b, protected=False), _ws(a, b, protected=True)
    assert off.cycles == r + m + r + c - 1
    assert on.cycles == off.cycles + 2
    a2 = _rand(rng, (r, m))
    b2 = _rand(rng, (m, c))
    off, on = _os(a2, b2, protected=False), _os(a2, b2, protected=True)
    assert off.cycles == r + (m + r + c - 2) + r
    assert on.cycles == off.cycles + 2


def test_config_validation():
    with pytest.raises(ConfigError):
        ArrayConfig(0, 4)
    with pytest.raises(ConfigError):
        ArrayConfig(4, 4, dataflow="XS")
    with pytest.raises(ConfigError):
        ArrayConfig(64, 64, acc_width=16)
    assert ArrayConfig(4, 4).acc_width == 22
    assert ArrayConfig(256, 4, man_width=12).acc_width == 2 * 12 + 8 + 1


def test_overflow_policies():
    a = np.full((1, 4), 255)
    b = np.full((4, 1), 255)
    with pytest.raises(AccOverflow):
        _ws(a, b, protected=False, acc_width=12, overflow="detect")
    with pytest.raises(ConfigError):
        _ws(a, b, protected=False, acc_width=12, overflow="saturate")
    assert (_ws(a, b, protected=False).result == 4 * 255 * 255).all()


def test_operand_range_checked():
    with pytest.raises(ValueError):
        _ws(np.full((1, 2), 256), np.ones((2, 2), int))


def test_stream_depth_enforced():
    arr = SystolicArray(ArrayConfig(2, 2)).load_weights(np.ones((2, 2), int))
    with pytest.raises(DimMismatch):
        arr.run_gemm_ws(np.ones((3, 2), int))


def test_protection_requires_checker_hardware():
    arr = SystolicArray(ArrayConfig(2, 2, protected=False)).load_weights(np.ones((2, 2), int))
    with pytest.raises(ConfigError):
        arr.run_gemm_ws(np.ones((1, 2), int), protection=True)


def test_step_advances_one_cycle():
    arr = SystolicArray(ArrayConfig(2, 2)).load_weights(np.ones((2, 2), int))
    arr.start_ws(np.ones((2, 2), int))
    c0 = arr.cycle
    arr.step()
    assert arr.cycle == c0 + 1 and arr.busy


def test_transient_differs_only_at_its_cycle():
    """A flip on a register read only at cycle t leaves other cycles' reads unchanged."""
    rng = np.random.default_rng(5)
    b = _rand(rng, (4, 4))
    site = FaultSite("pe", "r2c1", "weight", 3)
    clean = SystolicArray(ArrayConfig(4, 4)).load_weights(b)
    faulty = SystolicArray(ArrayConfig(4, 4)).load_weights(b)
    faulty.inject([FaultSpec(site, FaultKind.TRANSIENT, 7)])
    for t in range(4, 12):
        clean.cycle = faulty.cycle = t
        differs = clean.read_register(site) != faulty.read_register(site)
        assert differs == (t == 7)


def test_single_acc_transient_flagged_in_its_column():
    rng = np.random.default_rng(6)
    a, b = _rand(rng, (4, 4)), _rand(rng, (4, 4))
    clean = _ws(a, b).result
    hits = 0
    for r in range(4):
        for c in range(4):
            for cyc in range(4, 14):
                spec = FaultSpec(FaultSite("pe", f"r{r}c{c}", "acc", 10), FaultKind.TRANSIENT, cyc)
                run = _ws(a, b, specs=[spec])
                if not np.array_equal(run.result, clean):
                    hits += 1
                    assert {e.hint for e in run.events} == {f"col{c}"}
    assert hits > 0


def test_os_single_acc_transient_flagged_in_its_column():
    rng = np.random.default_rng(7)
    a, b = _rand(rng, (4, 4)), _rand(rng, (4, 4))
    clean = _os(a, b).result
    for r in range(4):
        for c in range(4):
            spec = FaultSpec(FaultSite("pe", f"r{r}c{c}", "acc", 12), FaultKind.TRANSIENT, 8)
            run = _os(a, b, specs=[spec])
            if not np.array_equal(run.result, clean):
                assert {e.hint for e in run.events} == {f"col{c}"}


def test_deterministic_traces():
    rng = np.random.default_rng(8)
    a, b = _rand(rng, (4, 4)), _rand(rng, (4, 4))
    spec = [FaultSpec(FaultSite("pe", "r1c1", "h_pass", 2), FaultKind.TRANSIENT, 9)]
    t1 = _ws(a, b, specs=spec, trace=True).trace_lines()
    t2 = _ws(a, b, specs=spec, trace=True).trace_lines()
    assert t1 == t2 and any("\tdetect\t" in line for line in t1)


def test_each_output_drained_once():
    rng = np.random.default_rng(9)
    run = _ws(_rand(rng, (3, 4)), _rand(rng, (4, 5)), trace=True)
    drained = [(r, c) for tr in run.traces for r, c, _ in tr.drained]
    assert sorted(drained) == [(r, c) for r in range(3) for c in range(5)]


def test_register_map_totals():
    text = register_map(ArrayConfig(2, 2))
    assert text.splitlines()[-1] == "total\t280"
