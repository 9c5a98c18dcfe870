"""Uniform fixed-point quantizers with L2-optimal step sizes.

A quantization group (one layer's weights, or one layer's output signal)
shares a single step size ``delta``.  With ``b`` bits the symmetric grid
has ``2**b - 1`` levels, so two bits give the ternary grid
``{-delta, 0, +delta}``.  One-sided kinds (sigmoid and ReLU outputs) use
levels ``{0, delta, ..., (levels - 1) * delta}`` instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WEIGHT = "weight"
SIGNAL_SYM = "signal_sym"
SIGNAL_BOUNDED_SYM = "signal_bounded_sym"
SIGNAL_BOUNDED_UNIT = "signal_bounded_unit"
SIGNAL_UNBOUNDED = "signal_unbounded"

KINDS = (WEIGHT, SIGNAL_SYM, SIGNAL_BOUNDED_SYM, SIGNAL_BOUNDED_UNIT,
         SIGNAL_UNBOUNDED)
ONE_SIDED_KINDS = (SIGNAL_BOUNDED_UNIT, SIGNAL_UNBOUNDED)

RESERVOIR_CAP = 2 ** 20


def as_float32(x):
    """Round a step size to float32 precision, the precision it is stored at."""
    return float(np.float32(x))


def _stored_delta(delta, group_name):
    d = as_float32(delta)
    if not (d > 0 and math.isfinite(d)):
        raise ValueError(f"group {group_name!r}: step size {delta:g} is outside float32 range")
    return d


@dataclass(frozen=True)
class QuantSpec:
    group_name: str
    bits: int
    delta: float
    kind: str = WEIGHT

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if int(self.bits) != self.bits or self.bits < 2:
            raise ValueError(f"bits must be an integer >= 2, got {self.bits}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError(f"delta must be positive and finite, got {self.delta}")

    @property
    def levels(self):
        return 2 ** self.bits - 1

    @property
    def one_sided(self):
        return self.kind in ONE_SIDED_KINDS

    @property
    def code_range(self):
        """Inclusive (lowest, highest) signed level index."""
        if self.one_sided:
            return 0, self.levels - 1
        half = (self.levels - 1) // 2
        return -half, half

    @property
    def offset(self):
        """Added to a signed level index to get the unsigned stored code."""
        return -self.code_range[0]

    def grid(self):
        lo, hi = self.code_range
        return np.arange(lo, hi + 1, dtype=np.float64) * self.delta

    def with_delta(self, delta):
        return QuantSpec(self.group_name, self.bits, as_float32(delta), self.kind)


def round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_codes(values, spec):
    """Signed level indices for ``values`` (same shape, int64)."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = spec.code_range
    return np.clip(round_half_away(v / spec.delta), lo, hi).astype(np.int64)


def dequantize_codes(codes, spec):
    return np.asarray(codes).astype(np.float64) * spec.delta


def quantize(values, spec):
    """Vectorized quantizer; the output always lies on ``spec.grid()``."""
    return dequantize_codes(quantize_codes(values, spec), spec)


def quantize_value(v, spec):
    if not math.isfinite(v):
        raise ValueError(f"cannot quantize non-finite value {v}")
    return float(quantize(np.float64(v), spec))


def l2_error(values, spec):
    v = np.asarray(values, dtype=np.float64).ravel()
    return float(np.sum((v - quantize(v, spec)) ** 2))


def _exact_l2_search(mags, max_code):
    """Global minimizer of sum (m - delta * clip(round(m / delta), 0, max_code))**2
    over delta in (0, max(mags)], for nonnegative magnitudes ``mags``.

    For a fixed code assignment the error is a quadratic in delta; codes only
    change at the rounding boundaries m / (k + 0.5).  Sweeping those
    boundaries in ascending order and taking each interval's stationary
    point (clipped to the interval) visits every local minimum.
    """
    mags = mags[mags > 0]
    top = float(mags.max())
    half_steps = np.arange(max_code, dtype=np.float64) + 0.5
    bps = (mags[:, None] / half_steps[None, :]).ravel()
    d_s1 = np.repeat(mags, max_code)
    d_s2 = np.tile(2.0 * np.arange(max_code) + 1.0, mags.size)
    keep = bps < top
    bps, d_s1, d_s2 = bps[keep], d_s1[keep], d_s2[keep]
    order = np.argsort(bps, kind="stable")
    bps, d_s1, d_s2 = bps[order], d_s1[order], d_s2[order]

    # as delta -> 0+ every nonzero magnitude saturates at max_code
    s1 = max_code * mags.sum() - np.concatenate(([0.0], np.cumsum(d_s1)))
    s2 = max_code ** 2 * mags.size - np.concatenate(([0.0], np.cumsum(d_s2)))
    lo = np.concatenate(([0.0], bps))
    hi = np.concatenate((bps, [top]))
    with np.errstate(divide="ignore", invalid="ignore"):
        stationary = np.where(s2 > 0, s1 / s2, hi)
    cand = np.clip(stationary, lo, hi)
    ok = cand > 0
    cand, s1, s2 = cand[ok], s1[ok], s2[ok]
    approx = np.sum(mags ** 2) - 2.0 * cand * s1 + cand ** 2 * s2
    # the running sums only rank candidates; re-score the leaders directly
    top_k = np.argsort(approx, kind="stable")[:16]
    cand = cand[top_k]
    err = np.array([np.sum((mags - d * np.clip(np.floor(mags / d + 0.5), 0, max_code)) ** 2)
                    for d in cand])
    best = err.min()
    tied = np.flatnonzero(err <= best + 1e-15 * max(best, 1e-300))
    # ties: prefer the finest step, which keeps the top code in use
    return float(cand[tied].min())


def _grid_errors(mags, deltas, max_code, chunk=1 << 22):
    rows = max(1, chunk // max(mags.size, 1))
    out = []
    for i in range(0, deltas.size, rows):
        d = deltas[i:i + rows, None]
        codes = np.clip(np.floor(mags[None, :] / d + 0.5), 0, max_code)
        out.append(np.sum((mags[None, :] - d * codes) ** 2, axis=1))
    return np.concatenate(out)


def _coarse_to_fine_search(mags, max_code, coarse=1000, passes=2, keep=(32, 8)):
    """Grid search over (0, max]: ``coarse`` points, then ``passes`` rounds of
    10x refinement (+-1 previous step) around the best few incumbents."""
    top = float(mags.max())
    step = top / coarse
    grid = step * np.arange(1, coarse + 1)
    err = _grid_errors(mags, grid, max_code)
    for p in range(passes):
        lead = grid[np.argsort(err, kind="stable")[:keep[min(p, len(keep) - 1)]]]
        fine = step / 10.0
        grid = np.unique((lead[:, None] + fine * np.arange(-10, 11)[None, :]).ravel())
        grid = grid[(grid > 0) & (grid <= top)]
        err = _grid_errors(mags, grid, max_code)
        step = fine
    best = err.min()
    # ties: prefer the finest step, which keeps the top code in use
    return float(grid[err <= best].min())


AUTO_EXACT_ABOVE = 1 << 17


def _fit(mags, bits, one_sided, search):
    levels = 2 ** bits - 1
    max_code = levels - 1 if one_sided else (levels - 1) // 2
    if search == "auto":
        search = "exact" if mags.size > AUTO_EXACT_ABOVE else "coarse_to_fine"
    if search == "exact":
        return _exact_l2_search(mags, max_code)
    if search == "coarse_to_fine":
        return _coarse_to_fine_search(mags, max_code)
    raise ValueError(f"unknown search {search!r}")


def optimize_step_size(values, bits, group_name="", kind=WEIGHT, search="auto"):
    """L2-optimal symmetric quantizer for a weight (or symmetric signal) group.

    ``search="coarse_to_fine"`` runs a 1000-point grid over (0, max|v|]
    plus two 10x refinement passes around the leading incumbents, ending at
    resolution max|v| / 1e5.  ``search="exact"`` returns the global
    minimizer over the same interval by sweeping the rounding breakpoints.
    ``"auto"`` uses the grid for groups up to 2**17 values and the exact
    sweep beyond that.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot fit a step size to an empty group")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite values in group")
    if not np.any(v != 0):
        raise ValueError(f"group {group_name!r} is all zeros; step size undefined")
    if kind in ONE_SIDED_KINDS:
        raise ValueError("use optimize_relu_step_size for one-sided groups")
    delta = _fit(np.abs(v), bits, False, search)
    return QuantSpec(group_name, bits, _stored_delta(delta, group_name), kind)


def fixed_step_size(kind, bits, group_name=""):
    """Analytic step size whose grid ends exactly on the activation's range."""
    levels = 2 ** bits - 1
    if kind == SIGNAL_BOUNDED_UNIT:
        delta = 1.0 / (levels - 1)
    elif kind == SIGNAL_BOUNDED_SYM:
        delta = 2.0 / (levels - 1)
    else:
        raise ValueError(f"fixed step sizes exist only for bounded kinds, not {kind!r}")
    return QuantSpec(group_name, bits, as_float32(delta), kind)


class ActivationStats:
    """Running sample of a nonnegative activation, for fitting ReLU step sizes.

    Keeps every value up to ``cap``; past that, a seeded reservoir sample.
    ``signed=True`` lifts the nonnegativity check (raw sensor inputs).
    """

    def __init__(self, group_name="", cap=RESERVOIR_CAP, seed=0, signed=False):
        self.group_name = group_name
        self.signed = signed
        self.cap = cap
        self.seen = 0
        self._buf = np.empty(0, dtype=np.float64)
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return self._buf.size

    def update(self, values):
        v = np.asarray(values, dtype=np.float64).ravel()
        if not self.signed and v.size and v.min() < 0:
            raise ValueError(f"negative activation recorded for {self.group_name!r}")
        room = self.cap - self._buf.size
        if room > 0:
            take = v[:room]
            self._buf = np.concatenate((self._buf, take))
            self.seen += take.size
            v = v[room:]
        if v.size:
            idx = self.seen + np.arange(v.size)
            slots = self._rng.integers(0, idx + 1)
            hit = slots < self.cap
            self._buf[slots[hit]] = v[hit]
            self.seen += v.size

    @property
    def values(self):
        return self._buf


def optimize_relu_step_size(stats, bits, group_name=None, search="auto"):
    """L2-optimal one-sided grid {0, delta, ...} for a ReLU output group."""
    if isinstance(stats, ActivationStats):
        name = stats.group_name if group_name is None else group_name
        v = stats.values
    else:
        name = group_name or ""
        v = np.asarray(stats, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError(f"no activations recorded for {name!r}")
    if v.min() < 0:
        raise ValueError("ReLU activations must be nonnegative")
    if not np.any(v > 0):
        raise ValueError(f"group {name!r} never activates (dead layer)")
    delta = _fit(v, bits, True, search)
    return QuantSpec(name, bits, _stored_delta(delta, name), SIGNAL_UNBOUNDED)


def pack_codes(codes, bits):
    """Pack unsigned codes LSB-first, little-endian within each byte."""
    c = np.asarray(codes, dtype=np.int64).ravel()
    if c.size and (c.min() < 0 or c.max() >= 1 << bits):
        raise ValueError(f"code out of range for {bits} bits")
    if c.size == 0:
        return b""
    bitplane = ((c[:, None] >> np.arange(bits)) & 1).astype(np.uint8).ravel()
    return np.packbits(bitplane, bitorder="little").tobytes()


def unpack_codes(data, bits, count):
    nbytes = packed_size(count, bits)
    if len(data) < nbytes:
        raise ValueError(f"need {nbytes} bytes for {count} codes, got {len(data)}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.frombuffer(bytes(data[:nbytes]), dtype=np.uint8)
    bitplane = np.unpackbits(raw, bitorder="little")[: count * bits]
    weights = 1 << np.arange(bits, dtype=np.int64)
    return bitplane.reshape(count, bits).astype(np.int64) @ weights


def packed_size(count, bits):
    return (count * bits + 7) // 8
