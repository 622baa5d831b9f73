"""Effective-bit extraction: lowering 8-bit codes to 4-bit codes.

A channel group whose codes never use the high bits of the 8-bit field can
drop those sign-replica bits and keep the four most significant *used*
bits.  The number of discarded low-order bits is the extraction shift;
dequantization multiplies the 4-bit code by 2^shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Q4_MIN, Q4_MAX = -8, 7
MAX_SHIFT = 4


def signed_bitwidth(value: int) -> int:
    """Minimal signed bitwidth containing a single integer value."""
    if value >= 0:
        return int(value).bit_length() + 1
    return int(-value - 1).bit_length() + 1


def effective_bitwidth(values) -> int:
    """Minimal b in [1, 8] such that all values fit the signed b-bit range."""
    arr = np.asarray(values)
    if arr.size == 0:
        raise ValueError("effective_bitwidth of an empty group")
    if arr.min() < -128 or arr.max() > 127:
        raise ValueError("codes outside the 8-bit range")
    lo, hi = int(arr.min()), int(arr.max())
    return max(signed_bitwidth(lo), signed_bitwidth(hi), 1)


def bitwidth_from_bounds(lo: int, hi: int) -> int:
    """Effective bitwidth of an integer range [lo, hi]."""
    return max(signed_bitwidth(int(lo)), signed_bitwidth(int(hi)), 1)


def static_shift(b: int) -> int:
    """Extraction shift for a group whose codes need b bits: max(0, b - 4)."""
    if not 1 <= b <= 8:
        raise ValueError(f"effective bitwidth {b} out of range")
    return max(0, b - 4)


def extract4(q8, shift: int):
    """Lower 8-bit codes to 4-bit: clip(q8 >> shift, -8, 7).

    The shift is arithmetic (truncating toward -inf); saturation is a
    counted event, not an error.  Works on scalars and arrays.
    """
    if not 0 <= shift <= MAX_SHIFT:
        raise ValueError(f"shift {shift} out of range [0, {MAX_SHIFT}]")
    arr = np.asarray(q8)
    shifted = arr >> shift
    clipped = np.clip(shifted, Q4_MIN, Q4_MAX)
    if np.isscalar(q8) or arr.ndim == 0:
        return int(clipped)
    return clipped


def dynamic_shift(group_values) -> int:
    """Runtime extraction shift from the actual codes of a group.

    OR-accumulates the codes' magnitudes (negatives contribute their one's
    complement) and looks up the highest set bit; equals
    static_shift(effective_bitwidth(group_values)).
    """
    arr = np.asarray(group_values)
    if arr.size == 0:
        raise ValueError("dynamic_shift of an empty group")
    arr = arr.astype(np.int64)
    mags = np.where(arr >= 0, arr, ~arr)
    acc = int(np.bitwise_or.reduce(mags.ravel()))
    b = acc.bit_length() + 1
    return max(0, b - 4)


@dataclass(frozen=True)
class ExtractionPlan:
    """Static extraction shifts for one matmul layer.

    ``act_shifts`` has one entry per feature group; ``weight_shifts`` is
    [n_groups, n_out] with independent positions across output channels.
    ``mode`` is "static", "dynamic" (static shifts kept as fallback) or
    "naive" (every activation shift forced to 4, the plain high-nibble
    baseline).
    """

    act_shifts: np.ndarray
    weight_shifts: np.ndarray
    mode: str = "static"

    def __post_init__(self):
        act = np.asarray(self.act_shifts, dtype=np.int64)
        wgt = np.asarray(self.weight_shifts, dtype=np.int64)
        if act.min(initial=0) < 0 or act.max(initial=0) > MAX_SHIFT:
            raise ValueError("activation shift out of [0, 4]")
        if wgt.min(initial=0) < 0 or wgt.max(initial=0) > MAX_SHIFT:
            raise ValueError("weight shift out of [0, 4]")
        if self.mode not in ("static", "dynamic", "naive"):
            raise ValueError(f"unknown extraction mode {self.mode!r}")
        object.__setattr__(self, "act_shifts", act)
        object.__setattr__(self, "weight_shifts", wgt)

    @property
    def n_groups(self) -> int:
        return self.act_shifts.size


def group_slices(n_channels: int, group_size: int) -> list[slice]:
    """Partition channels into contiguous feature groups.

    A layer with fewer channels than one group contributes a single group;
    a trailing remainder forms a final short group.
    """
    if group_size <= 0:
        raise ValueError("group size must be positive")
    return [slice(i, min(i + group_size, n_channels)) for i in range(0, n_channels, group_size)]


def plan_extraction(
    act_q8_bounds: np.ndarray,
    weight_codes: np.ndarray,
    group_size: int,
    mode: str = "static",
) -> ExtractionPlan:
    """Build the complete extraction plan for one layer.

    ``act_q8_bounds`` is [n_channels, 2] integer (lo, hi) bounds of the
    calibrated activation codes.  ``weight_codes`` is [n_out, n_in] int8
    (convolution kernels flattened over the spatial dims per input
    channel are accepted as [n_out, n_in, ...]).
    """
    act_q8_bounds = np.asarray(act_q8_bounds)
    n_in = act_q8_bounds.shape[0]
    if weight_codes.shape[1] != n_in:
        raise ValueError(
            f"weight input channels {weight_codes.shape[1]} do not match "
            f"activation channels {n_in}"
        )
    slices = group_slices(n_in, group_size)
    n_out = weight_codes.shape[0]
    act_shifts = np.zeros(len(slices), dtype=np.int64)
    weight_shifts = np.zeros((len(slices), n_out), dtype=np.int64)
    w = weight_codes.reshape(n_out, n_in, -1)
    for g, sl in enumerate(slices):
        lo = int(act_q8_bounds[sl, 0].min())
        hi = int(act_q8_bounds[sl, 1].max())
        act_shifts[g] = static_shift(bitwidth_from_bounds(lo, hi))
        if mode == "naive":
            act_shifts[g] = MAX_SHIFT
        sliced = w[:, sl, :]
        for o in range(n_out):
            weight_shifts[g, o] = (
                MAX_SHIFT if mode == "naive" else static_shift(effective_bitwidth(sliced[o]))
            )
    return ExtractionPlan(act_shifts, weight_shifts, mode=mode)
