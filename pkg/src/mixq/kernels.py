"""Bit-exact reference kernels for mixed 4/8-bit integer GEMM and conv2d.

These kernels prioritize exactness over speed: all accumulation is
integer (int64 internally, asserted to fit 32-bit) and the per-output
scale multiply is the only float operation.  4-bit channel groups are
lowered on the fly from the stored 8-bit codes, mirroring runtime bit
extraction; with contiguous layout the active groups are simply the
first ``max_4bit_ch / group_size``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitlower import MAX_SHIFT, Q4_MAX, Q4_MIN, ExtractionPlan, dynamic_shift, group_slices

INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1


@dataclass
class KernelStats:
    """Per-call extraction statistics.

    ``saturated_channels`` marks input channels whose activation codes
    clipped during 4-bit extraction; ``act_shifts_used`` records the
    shift in force per group (differs from the plan in dynamic mode).
    """

    saturated_channels: np.ndarray
    act_shifts_used: np.ndarray


def _check_acc(acc: np.ndarray):
    if acc.min(initial=0) < INT32_MIN or acc.max(initial=0) > INT32_MAX:
        raise OverflowError("32-bit accumulator would wrap for this shape")


def _extract_group(codes: np.ndarray, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Shift-and-clip codes to the 4-bit field; returns (q4, clipped mask)."""
    shifted = codes >> shift
    clipped = np.clip(shifted, Q4_MIN, Q4_MAX)
    return clipped, shifted != clipped


def _resolve_flags(n_groups: int, group_flags, max_4bit_ch, slices, n_in) -> np.ndarray:
    if group_flags is not None:
        flags = np.asarray(group_flags, dtype=bool)
        if flags.size != n_groups:
            raise ValueError(f"expected {n_groups} group flags, got {flags.size}")
        return flags
    if max_4bit_ch is None:
        raise ValueError("either group_flags or max_4bit_ch is required")
    if not 0 <= max_4bit_ch <= n_in:
        raise ValueError(f"max_4bit_ch {max_4bit_ch} outside [0, {n_in}]")
    flags = np.zeros(n_groups, dtype=bool)
    covered = 0
    for g, sl in enumerate(slices):
        if covered >= max_4bit_ch:
            break
        if sl.stop > max_4bit_ch:
            raise ValueError(f"max_4bit_ch {max_4bit_ch} is not group-aligned")
        flags[g] = True
        covered = sl.stop
    return flags


def mixed_gemm(
    x_q: np.ndarray,
    w_q: np.ndarray,
    act_scale: float,
    w_scales: np.ndarray,
    plan: ExtractionPlan,
    group_size: int,
    max_4bit_ch: int | None = None,
    group_flags=None,
    extraction: str | None = None,
) -> tuple[np.ndarray, KernelStats]:
    """Mixed-precision integer GEMM.

    x_q: [B, K] int8 activation codes; w_q: [K, N] int8 weight codes with
    per-output-channel scales ``w_scales`` [N].  Groups flagged 4-bit are
    lowered per the plan (or per runtime OR-scan when extraction is
    "dynamic"); the rest are multiplied as plain 8-bit.  Returns the
    float32 output [B, N] and extraction stats.
    """
    x_q = np.asarray(x_q, dtype=np.int64)
    w_q = np.asarray(w_q, dtype=np.int64)
    B, K = x_q.shape
    if w_q.shape[0] != K:
        raise ValueError(f"shape mismatch: x has {K} channels, w has {w_q.shape[0]}")
    N = w_q.shape[1]
    slices = group_slices(K, group_size)
    flags = _resolve_flags(len(slices), group_flags, max_4bit_ch, slices, K)
    mode = extraction or plan.mode

    acc = np.zeros((B, N), dtype=np.int64)
    sat = np.zeros(K, dtype=bool)
    shifts_used = plan.act_shifts.copy()
    for g, sl in enumerate(slices):
        xg = x_q[:, sl]
        wg = w_q[sl, :]
        if not flags[g]:
            acc += xg @ wg
            continue
        px = int(plan.act_shifts[g])
        pw = plan.weight_shifts[g]  # [N]
        if mode == "dynamic":
            px = dynamic_shift(xg)
        elif mode == "naive":
            px = MAX_SHIFT
            pw = np.full_like(pw, MAX_SHIFT)
        shifts_used[g] = px
        x4, x_clip = _extract_group(xg, px)
        sat[sl] |= x_clip.any(axis=0)
        w4 = np.clip(wg >> pw[np.newaxis, :], Q4_MIN, Q4_MAX)
        acc += (x4 @ w4) << (px + pw)[np.newaxis, :]
    _check_acc(acc)
    out = acc.astype(np.float64) * (float(act_scale) * np.asarray(w_scales, dtype=np.float64))
    return out.astype(np.float32), KernelStats(sat, shifts_used)


def mixed_conv2d(
    x_q: np.ndarray,
    w_q: np.ndarray,
    act_scale: float,
    w_scales: np.ndarray,
    plan: ExtractionPlan,
    group_size: int,
    max_4bit_ch: int | None = None,
    group_flags=None,
    extraction: str | None = None,
) -> tuple[np.ndarray, KernelStats]:
    """Mixed-precision 2-D convolution (stride 1, same padding).

    x_q: [B, C, H, W] int8 codes; w_q: [O, C, kh, kw] int8 codes.
    Feature channels are input channels; semantics match an im2col GEMM
    where every spatial tap of a channel shares that channel's group
    shift.
    """
    x_q = np.asarray(x_q, dtype=np.int64)
    w_q = np.asarray(w_q, dtype=np.int64)
    B, C, H, W = x_q.shape
    O, Cw, kh, kw = w_q.shape
    if Cw != C:
        raise ValueError(f"shape mismatch: x has {C} channels, w has {Cw}")
    slices = group_slices(C, group_size)
    flags = _resolve_flags(len(slices), group_flags, max_4bit_ch, slices, C)
    mode = extraction or plan.mode

    ph, pw_pad = kh // 2, kw // 2
    xp = np.pad(x_q, ((0, 0), (0, 0), (ph, ph), (pw_pad, pw_pad)))
    acc = np.zeros((B, O, H, W), dtype=np.int64)
    sat = np.zeros(C, dtype=bool)
    shifts_used = plan.act_shifts.copy()
    for g, sl in enumerate(slices):
        xg = xp[:, sl]
        wg = w_q[:, sl]
        pg = plan.weight_shifts[g]  # [O]
        if flags[g]:
            px = int(plan.act_shifts[g])
            if mode == "dynamic":
                px = dynamic_shift(x_q[:, sl])
            elif mode == "naive":
                px = MAX_SHIFT
                pg = np.full_like(pg, MAX_SHIFT)
            shifts_used[g] = px
            _, x_clip = _extract_group(x_q[:, sl], px)
            sat[sl] |= x_clip.any(axis=(0, 2, 3))
            xg, _ = _extract_group(xg, px)
            wg = np.clip(wg >> pg[:, np.newaxis, np.newaxis, np.newaxis], Q4_MIN, Q4_MAX)
        contrib = np.zeros((B, O, H, W), dtype=np.int64)
        for dy in range(kh):
            for dx in range(kw):
                patch = xg[:, :, dy : dy + H, dx : dx + W]
                contrib += np.einsum("bchw,oc->bohw", patch, wg[:, :, dy, dx])
        if flags[g]:
            contrib <<= (int(shifts_used[g]) + pg)[np.newaxis, :, np.newaxis, np.newaxis]
        acc += contrib
    _check_acc(acc)
    scales = float(act_scale) * np.asarray(w_scales, dtype=np.float64)
    out = acc.astype(np.float64) * scales[np.newaxis, :, np.newaxis, np.newaxis]
    return out.astype(np.float32), KernelStats(sat, shifts_used)


def int_gemm(x_q: np.ndarray, w_q: np.ndarray, act_scale: float, w_scales: np.ndarray) -> np.ndarray:
    """Plain uniform integer GEMM (8-bit or 4-bit codes)."""
    acc = np.asarray(x_q, dtype=np.int64) @ np.asarray(w_q, dtype=np.int64)
    _check_acc(acc)
    out = acc.astype(np.float64) * (float(act_scale) * np.asarray(w_scales, dtype=np.float64))
    return out.astype(np.float32)


def int_conv2d(x_q: np.ndarray, w_q: np.ndarray, act_scale: float, w_scales: np.ndarray) -> np.ndarray:
    """Plain uniform integer conv2d (stride 1, same padding)."""
    x_q = np.asarray(x_q, dtype=np.int64)
    w_q = np.asarray(w_q, dtype=np.int64)
    B, C, H, W = x_q.shape
    O, _, kh, kw = w_q.shape
    xp = np.pad(x_q, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    acc = np.zeros((B, O, H, W), dtype=np.int64)
    for dy in range(kh):
        for dx in range(kw):
            acc += np.einsum("bchw,oc->bohw", xp[:, :, dy : dy + H, dx : dx + W], w_q[:, :, dy, dx])
    _check_acc(acc)
    scales = float(act_scale) * np.asarray(w_scales, dtype=np.float64)
    return (acc.astype(np.float64) * scales[np.newaxis, :, np.newaxis, np.newaxis]).astype(np.float32)


def accumulator_error_bound(
    x_q: np.ndarray, w_q: np.ndarray, plan: ExtractionPlan, group_size: int, group_flags
) -> np.ndarray:
    """Per-output-channel bound on |mixed - full8| integer accumulators.

    Valid for non-saturating extraction: per 4-bit channel the truncation
    residuals rx <= 2^px - 1 and rw <= 2^pw - 1 give
    |x*w - (x-rx)(w-rw)| <= |x|*rw + |w|*rx + rx*rw.
    """
    x_q = np.asarray(x_q, dtype=np.int64)
    w_q = np.asarray(w_q, dtype=np.int64)
    K, N = w_q.shape
    bound = np.zeros(N, dtype=np.int64)
    for g, sl in enumerate(group_slices(K, group_size)):
        if not group_flags[g]:
            continue
        rx = (1 << int(plan.act_shifts[g])) - 1
        rw = (1 << plan.weight_shifts[g]) - 1  # [N]
        x_max = np.abs(x_q[:, sl]).max(axis=0)  # [k]
        w_max = np.abs(w_q[sl, :])  # [k, N]
        bound += (x_max[:, None] * rw[None, :] + w_max * rx + rx * rw[None, :]).sum(axis=0)
    return bound
