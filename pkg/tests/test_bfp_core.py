import math
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfpnpu.bfp_core import (FP16, FP32, MATRIX_WISE, ROW_COLUMN_WISE, ZERO_BLOCK_EXP,
                             BfpBlock, BlockingStrategy, FpFormat, FpScalar, bfp_dot_reference,
                             decompose, dequantize_block, dot_to_float, fp32_bits,
                             leading_zero_count, quantize_block, quantize_matrix,
                             quantize_values, round_mantissa, round_to_format)
from bfpnpu.errors import ExponentOverflow, LengthMismatch, NonFiniteInput

fp32_floats = st.floats(allow_nan=False, allow_infinity=False, width=32)


def test_format_defaults():
    assert FP32.bias == 127 and FP32.emin == -126 and FP32.emax == 127
    assert FpFormat(5, 10).bias == 15
    with pytest.raises(ValueError):
        FpFormat(1, 4)


def test_decompose_powers_of_two():
    s = decompose(2.0)
    assert (s.sign, s.exponent, s.mantissa) == (0, 1, 1 << 23)
    s = decompose(-0.5)
    assert (s.sign, s.exponent, s.mantissa) == (1, -1, 1 << 23)


def test_decompose_matches_host_single_precision():
    assert decompose(3.1415926).pack() == fp32_bits(3.1415926)


@given(fp32_floats)
def test_pack_roundtrip_against_host(x):
    s = decompose(x)
    assert s.pack() == fp32_bits(x)
    assert FpScalar.unpack(s.pack()).value == x


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_decompose_rejects_non_finite(bad):
    with pytest.raises(NonFiniteInput):
        decompose(bad)


@given(st.floats(-1e30, 1e30, allow_nan=False))
def test_round_to_format_agrees_with_decompose(x):
    assert round_to_format(np.array([x]))[0] == decompose(x).value


def test_round_to_format_overflow():
    with pytest.raises(ExponentOverflow):
        round_to_format(np.array([1e300]))
    with pytest.raises(ExponentOverflow):
        round_to_format(np.array([70000.0]), FP16)


def test_round_mantissa_ties_to_even():
    # 1.0101 1000 -> tie, keep even
    assert round_mantissa(0, 0b101011000, 9, 5) == (0, 0b10110)
    assert round_mantissa(0, 0b101001000, 9, 5) == (0, 0b10100)
    # all ones carries into a new exponent
    assert round_mantissa(3, 0b111111111, 9, 5) == (4, 0b10000)


def test_quantize_powers_of_two():
    blk = quantize_values([2.0, 1.0, 0.5], 4)
    assert blk.shared_exp == 1
    assert blk.mantissas == (0b1000, 0b0100, 0b0010)
    assert blk.signs == (0, 0, 0)
    assert [s.value for s in dequantize_block(blk)] == [2.0, 1.0, 0.5]


def test_zero_block_convention():
    blk = quantize_values([0.0, 0.0], 6)
    assert blk.shared_exp == ZERO_BLOCK_EXP and blk.mantissas == (0, 0)


def test_zero_mantissa_dequantizes_to_signed_zero():
    out = dequantize_block(BfpBlock(40, (1, 0), (0, 0x80)))
    assert out[0].value == 0.0 and math.copysign(1, out[0].value) == -1
    assert out[1].value == 2.0 ** 40


def test_truncating_alignment():
    # 1.75 -> rounds to 1.75 at W=4 (1110), shifted right by 2 -> 0011
    blk = quantize_values([4.0, 1.75], 4)
    assert blk.shared_exp == 2 and blk.mantissas == (0b1000, 0b0011)


def test_dequantize_overflow_raises():
    with pytest.raises(ExponentOverflow):
        dequantize_block(BfpBlock(200, (0,), (0x80,)))


@given(st.lists(fp32_floats.filter(lambda v: abs(v) < 1e37), min_size=1, max_size=64),
       st.integers(2, 12))
@settings(max_examples=200)
def test_roundtrip_bound(values, w):
    blk = quantize_values(values, w)
    bound = Fraction(2) ** (blk.shared_exp - w + 1)
    for x, y in zip(values, dequantize_block(blk)):
        assert abs(Fraction(y.value) - Fraction(x)) <= bound


@given(st.lists(fp32_floats.filter(lambda v: abs(v) < 1e37), min_size=1, max_size=32))
def test_block_invariants(values):
    blk = quantize_values(values, 8)
    live = [decompose(v) for v in values if v != 0]
    if live:
        # the rounded maximum may carry one exponent above the raw maximum
        assert blk.shared_exp in {max(s.normalized()[0] for s in live),
                                  max(s.normalized()[0] for s in live) + 1}
    assert all(0 <= m < 256 for m in blk.mantissas)


def test_leading_zero_count_examples():
    assert leading_zero_count(1, 22) == 21
    assert leading_zero_count(0, 22) == 22
    assert leading_zero_count(1 << 21, 22) == 0
    assert leading_zero_count(-5, 8) == 5


@given(st.integers(1, (1 << 22) - 1))
def test_lzc_shift_sets_top_bit(v):
    lz = leading_zero_count(v, 22)
    assert (v << lz) >> 21 == 1


def test_dot_reference_small():
    a = quantize_values([1.0, 2.0], 8)
    b = quantize_values([1.0, 1.0], 8)
    e, acc = bfp_dot_reference(a, b)
    assert dot_to_float(e, acc, 8) == 3.0


def test_dot_reference_zero_block():
    a = quantize_values([0.0, 0.0, 0.0])
    b = quantize_values([1.0, -3.0, 0.25])
    e, acc = bfp_dot_reference(a, b)
    assert acc == 0 and e == a.shared_exp + b.shared_exp


def test_dot_reference_length_mismatch():
    with pytest.raises(LengthMismatch):
        bfp_dot_reference(quantize_values([1.0]), quantize_values([1.0, 2.0]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 128), st.integers(2, 12))
@settings(max_examples=100)
def test_dot_reference_is_exact_rational(seed, n, w):
    rng = np.random.default_rng(seed)
    a = quantize_values(rng.standard_normal(n) * 8, w)
    b = quantize_values(rng.standard_normal(n) / 8, w)
    e, acc = bfp_dot_reference(a, b)
    exact = sum(Fraction(x) * Fraction(y) for x, y in zip(a.values(), b.values()))
    assert Fraction(acc) * Fraction(2) ** (e - 2 * (w - 1)) == exact


def test_dot_reference_vs_double_precision():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = quantize_values(rng.standard_normal(64))
        b = quantize_values(rng.standard_normal(64))
        e, acc = bfp_dot_reference(a, b)
        ref = float(np.dot(a.values(), b.values()))
        # products and their sum are exact in a double at this width
        assert dot_to_float(e, acc, 8) == ref


def test_render():
    assert quantize_values([2.0, -1.0], 8).render() == "e=+1 w=8 [+80 -40]"


# -- matrices -----------------------------------------------------------------------------


def test_identity_row_column():
    q = quantize_matrix(np.eye(2), ROW_COLUMN_WISE, "row")
    assert q.num_blocks == 2 and list(q.shared_exps) == [0, 0]
    assert np.array_equal(q.dequantize(), np.eye(2))


def test_matrix_wise_single_block():
    x = np.arange(16, dtype=float).reshape(4, 4) - 3
    q = quantize_matrix(x, MATRIX_WISE)
    assert q.num_blocks == 1 and q.shared_exps[0] == 3          # 12 = 1.5 * 2**3


def test_segment_layout():
    q = quantize_matrix(np.ones((3, 10)), BlockingStrategy.parse("segment:4"), "row")
    assert q.num_blocks == 3 * 3
    assert [b.block_len for b in q.blocks[:3]] == [4, 4, 2]


def test_column_orientation_blocks_run_down_columns():
    x = np.array([[1.0, 100.0], [0.5, 1.0]])
    q = quantize_matrix(x, ROW_COLUMN_WISE, "column")
    assert list(q.shared_exps) == [0, 6]
    assert q.blocks[1].block_len == 2


def test_blocking_parse_and_validation():
    assert str(BlockingStrategy.parse("segment:8")) == "segment:8"
    with pytest.raises(ValueError):
        BlockingStrategy.parse("segment:1")
    with pytest.raises(ValueError):
        BlockingStrategy.parse("diagonal")


def test_quantize_matrix_rejects_nan():
    with pytest.raises(NonFiniteInput):
        quantize_matrix(np.array([[1.0, np.nan]]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9), st.integers(2, 12))
@settings(max_examples=60)
def test_vectorized_matrix_matches_scalar_blocks(seed, r, c, w):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((r, c)) * np.exp2(rng.integers(-30, 30, (r, c)))
    x[rng.random((r, c)) < 0.1] = 0.0
    for orient, vecs in (("row", x), ("column", x.T)):
        q = quantize_matrix(x, ROW_COLUMN_WISE, orient, w)
        for blk, v in zip(q.blocks, vecs):
            assert blk == quantize_values(v, w)


def test_constant_and_identity_have_zero_error():
    for x in (np.eye(16), np.full((16, 16), 3.25)):
        for s in (MATRIX_WISE, ROW_COLUMN_WISE, BlockingStrategy.parse("segment:4")):
            assert np.array_equal(quantize_matrix(x, s).dequantize(), x)


def test_segment_not_worse_than_rows_on_random():
    rng = np.random.default_rng(3)
    seg = BlockingStrategy.parse("segment:4")
    wins = 0
    for _ in range(20):
        x = round_to_format(rng.standard_normal((8, 8)))
        e_seg = np.mean((quantize_matrix(x, seg).dequantize() - x) ** 2)
        e_row = np.mean((quantize_matrix(x, ROW_COLUMN_WISE).dequantize() - x) ** 2)
        wins += e_seg <= e_row
    assert wins == 20
