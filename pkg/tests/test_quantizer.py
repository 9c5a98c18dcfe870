import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fxgesture import quantizer as q
from fxgesture.quantizer import QuantSpec

from _util import grid_oracle

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
kinds = st.sampled_from(q.KINDS)
bits_st = st.integers(2, 6)
deltas = st.floats(1e-4, 1e3, allow_nan=False)


def test_levels_are_odd_and_symmetric():
    s = QuantSpec("w", 2, 0.5)
    assert s.levels == 3
    assert list(s.grid()) == [-0.5, 0.0, 0.5]
    assert QuantSpec("w", 4, 1.0).levels == 15


def test_quantize_value_examples():
    s = QuantSpec("w", 2, 0.5)
    assert q.quantize_value(0.0, s) == 0.0
    assert q.quantize_value(0.7, s) == 0.5
    assert q.quantize_value(-3.0, s) == -0.5


def test_rounding_is_half_away_from_zero():
    s = QuantSpec("w", 4, 1.0)
    assert q.quantize_value(0.5, s) == 1.0
    assert q.quantize_value(-0.5, s) == -1.0
    assert q.quantize_value(2.5, s) == 3.0


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        q.quantize_value(float("nan"), QuantSpec("w", 2, 1.0))
    with pytest.raises(ValueError):
        q.quantize(np.array([1.0, np.inf]), QuantSpec("w", 2, 1.0))


@pytest.mark.parametrize("bits,delta", [(1, 1.0), (2, 0.0), (2, -1.0), (2, math.inf)])
def test_bad_spec(bits, delta):
    with pytest.raises(ValueError):
        QuantSpec("w", bits, delta)


def test_single_weight_lands_on_level():
    for w in (0.37, -2.5, 1e-3):
        spec = q.optimize_step_size([w], 2)
        assert spec.delta == pytest.approx(abs(w), rel=1e-6)
        assert q.l2_error([w], spec) < 1e-12


def test_symmetric_set():
    spec = q.optimize_step_size([1.0, -1.0, 1.0, -1.0], 2)
    assert spec.delta == 1.0
    assert q.l2_error([1.0, -1.0, 1.0, -1.0], spec) == 0.0


def test_three_value_example_against_grid():
    v = np.array([0.3, 0.9, -0.9])
    spec = q.optimize_step_size(v, 2)
    deltas = np.arange(1, 9001) * 1e-4
    brute = min(q.l2_error(v, QuantSpec("w", 2, d)) for d in deltas)
    assert q.l2_error(v, spec) <= brute + 1e-9


@pytest.mark.parametrize("search", ["exact", "coarse_to_fine"])
def test_search_methods_agree_with_oracle(search, rng):
    for _ in range(20):
        v = rng.normal(size=int(rng.integers(1, 65)))
        bits = int(rng.integers(2, 5))
        spec = q.optimize_step_size(v, bits, search=search)
        assert q.l2_error(v, spec) <= grid_oracle(v, bits) + 1e-9


def test_exact_search_on_large_group(rng):
    v = rng.laplace(size=300_000)
    fast = q.optimize_step_size(v, 3, search="exact")
    grid = q.optimize_step_size(v, 3, search="coarse_to_fine")
    assert q.l2_error(v, fast) <= q.l2_error(v, grid) * (1 + 1e-9)


def test_step_outside_float32_range_rejected():
    with pytest.raises(ValueError, match="float32"):
        q.optimize_step_size([1e-60, -1e-60], 2)


def test_degenerate_groups_rejected():
    with pytest.raises(ValueError):
        q.optimize_step_size(np.zeros(5), 2)
    with pytest.raises(ValueError):
        q.optimize_step_size([], 2)
    with pytest.raises(ValueError):
        q.optimize_step_size([1.0], 2, kind=q.SIGNAL_UNBOUNDED)


@pytest.mark.parametrize("kind,bits,delta,grid", [
    (q.SIGNAL_BOUNDED_UNIT, 2, 0.5, [0.0, 0.5, 1.0]),
    (q.SIGNAL_BOUNDED_SYM, 2, 1.0, [-1.0, 0.0, 1.0]),
])
def test_fixed_step_examples(kind, bits, delta, grid):
    spec = q.fixed_step_size(kind, bits)
    assert spec.delta == delta
    assert list(spec.grid()) == grid


def test_fixed_sym_three_bits():
    spec = q.fixed_step_size(q.SIGNAL_BOUNDED_SYM, 3)
    g = spec.grid()
    assert len(g) == 7
    assert spec.delta == pytest.approx(1 / 3, rel=1e-7)
    assert g[0] == pytest.approx(-1.0, rel=1e-7) and g[-1] == pytest.approx(1.0, rel=1e-7)


def test_fixed_step_rejects_unbounded():
    with pytest.raises(ValueError):
        q.fixed_step_size(q.SIGNAL_UNBOUNDED, 2)


@given(st.sampled_from([q.SIGNAL_BOUNDED_UNIT, q.SIGNAL_BOUNDED_SYM]), st.integers(2, 8))
def test_fixed_grid_covers_range_endpoints(kind, bits):
    g = q.fixed_step_size(kind, bits).grid()
    lo = 0.0 if kind == q.SIGNAL_BOUNDED_UNIT else -1.0
    assert g[0] == pytest.approx(lo, abs=1e-6)
    assert g[-1] == pytest.approx(1.0, abs=1e-6)
    assert len(g) == 2 ** bits - 1


def test_relu_examples():
    spec = q.optimize_relu_step_size([0.0, 0.0, 5.0], 2)
    assert spec.delta == 2.5
    assert list(q.quantize_codes([0.0, 0.0, 5.0], spec)) == [0, 0, 2]
    assert q.l2_error([0.0, 0.0, 5.0], spec) == 0.0


def test_relu_constant_input():
    c = 1.7
    spec = q.optimize_relu_step_size([c, c, c], 2)
    deltas = c * np.arange(1, 100_001) / 100_000
    brute = min(((c - np.minimum(np.floor(c / d + 0.5), 2) * d) ** 2) * 3 for d in deltas[::97])
    assert q.l2_error([c, c, c], spec) <= brute + 1e-12


def test_relu_dead_layer():
    with pytest.raises(ValueError, match="never activates"):
        q.optimize_relu_step_size(np.zeros(10), 2)
    with pytest.raises(ValueError):
        q.optimize_relu_step_size(q.ActivationStats("C1"), 2)


def test_activation_stats_reservoir():
    s = q.ActivationStats("x", cap=100, seed=3)
    s.update(np.arange(50.0))
    assert len(s) == 50
    s.update(np.arange(1000.0))
    assert len(s) == 100 and s.seen == 1050
    with pytest.raises(ValueError):
        s.update([-1.0])
    assert q.ActivationStats("x", signed=True).update([-1.0]) is None


@settings(max_examples=300)
@given(finite, bits_st, deltas, kinds)
def test_idempotent(v, bits, delta, kind):
    s = QuantSpec("g", bits, delta, kind)
    once = q.quantize_value(v, s)
    assert q.quantize_value(once, s) == once


@settings(max_examples=300)
@given(finite, finite, bits_st, deltas, kinds)
def test_monotone(a, b, bits, delta, kind):
    s = QuantSpec("g", bits, delta, kind)
    lo, hi = min(a, b), max(a, b)
    assert q.quantize_value(lo, s) <= q.quantize_value(hi, s)


@given(st.lists(finite, min_size=1, max_size=30), bits_st, deltas, kinds)
def test_output_on_grid(vals, bits, delta, kind):
    s = QuantSpec("g", bits, delta, kind)
    out = q.quantize(np.array(vals), s)
    assert np.all(np.isin(out, s.grid()))


def test_pack_example():
    assert q.pack_codes([0, 1, 2, 0], 2) == bytes([0x24])
    assert q.pack_codes([], 2) == b""
    assert q.unpack_codes(b"", 2, 0).size == 0


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError):
        q.pack_codes([4], 2)
    with pytest.raises(ValueError):
        q.pack_codes([-1], 3)


def test_packed_size_arithmetic():
    assert q.packed_size(178656, 2) == 44664
    assert q.packed_size(69000, 2) == 17250
    assert q.packed_size(3, 3) == 2


@settings(max_examples=200)
@given(st.integers(0, 1000), st.sampled_from([2, 3, 4]), st.integers(0, 2 ** 32 - 1))
def test_pack_roundtrip(n, bits, seed):
    codes = np.random.default_rng(seed).integers(0, 2 ** bits - 1, size=n)
    data = q.pack_codes(codes, bits)
    assert len(data) == q.packed_size(n, bits)
    assert np.array_equal(q.unpack_codes(data, bits, n), codes)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=64).filter(
    lambda v: max(abs(x) for x in v) > 1e-30), st.sampled_from([2, 3, 4]))
@settings(max_examples=50, deadline=None)
def test_fitted_spec_beats_grid_oracle(vals, bits):
    spec = q.optimize_step_size(vals, bits)
    assert q.l2_error(vals, spec) <= grid_oracle(vals, bits) + 1e-9
