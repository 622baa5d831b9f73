"""Scalar reference implementations for kernel verification.

Pure-Python integer loops, deliberately independent of the vectorized
kernels: dequantization-with-shift is applied per element and accumulated
one product at a time.  Used by the gemm-check sweeps and the test suite.
"""

from __future__ import annotations

import numpy as np

from .bitlower import ExtractionPlan, group_slices


def _q4(code: int, shift: int) -> int:
    v = code >> shift
    return max(-8, min(7, v))


def scalar_mixed_gemm_acc(
    x_q, w_q, plan: ExtractionPlan, group_size: int, group_flags, act_shifts=None
) -> np.ndarray:
    """Integer accumulators [B, N] of the mixed GEMM, one product at a time."""
    x_q = np.asarray(x_q)
    w_q = np.asarray(w_q)
    B, K = x_q.shape
    N = w_q.shape[1]
    slices = group_slices(K, group_size)
    acc = np.zeros((B, N), dtype=object)
    for b in range(B):
        for o in range(N):
            total = 0
            for g, sl in enumerate(slices):
                if group_flags[g]:
                    px = int(plan.act_shifts[g] if act_shifts is None else act_shifts[g])
                    pw = int(plan.weight_shifts[g][o])
                    for i in range(sl.start, sl.stop):
                        total += (_q4(int(x_q[b, i]), px) * _q4(int(w_q[i, o]), pw)) << (px + pw)
                else:
                    for i in range(sl.start, sl.stop):
                        total += int(x_q[b, i]) * int(w_q[i, o])
            acc[b, o] = total
    return acc.astype(np.int64)


def scalar_mixed_gemm(
    x_q, w_q, act_scale, w_scales, plan, group_size, group_flags, act_shifts=None
) -> np.ndarray:
    acc = scalar_mixed_gemm_acc(x_q, w_q, plan, group_size, group_flags, act_shifts)
    out = np.empty(acc.shape, dtype=np.float32)
    for b in range(acc.shape[0]):
        for o in range(acc.shape[1]):
            out[b, o] = np.float32(float(acc[b, o]) * (float(act_scale) * float(w_scales[o])))
    return out


def scalar_mixed_conv2d_acc(
    x_q, w_q, plan: ExtractionPlan, group_size: int, group_flags, act_shifts=None
) -> np.ndarray:
    """Integer accumulators [B, O, H, W], stride 1, same padding."""
    x_q = np.asarray(x_q)
    w_q = np.asarray(w_q)
    B, C, H, W = x_q.shape
    O, _, kh, kw = w_q.shape
    slices = group_slices(C, group_size)
    group_of = np.empty(C, dtype=np.int64)
    for g, sl in enumerate(slices):
        group_of[sl] = g
    acc = np.zeros((B, O, H, W), dtype=object)
    for b in range(B):
        for o in range(O):
            for y in range(H):
                for x in range(W):
                    total = 0
                    for c in range(C):
                        g = group_of[c]
                        for dy in range(kh):
                            for dx in range(kw):
                                yy, xx = y + dy - kh // 2, x + dx - kw // 2
                                if not (0 <= yy < H and 0 <= xx < W):
                                    continue
                                xv = int(x_q[b, c, yy, xx])
                                wv = int(w_q[o, c, dy, dx])
                                if group_flags[g]:
                                    px = int(plan.act_shifts[g] if act_shifts is None else act_shifts[g])
                                    pw = int(plan.weight_shifts[g][o])
                                    total += (_q4(xv, px) * _q4(wv, pw)) << (px + pw)
                                else:
                                    total += xv * wv
                    acc[b, o, y, x] = total
    return acc.astype(np.int64)


def scalar_mixed_conv2d(
    x_q, w_q, act_scale, w_scales, plan, group_size, group_flags, act_shifts=None
) -> np.ndarray:
    acc = scalar_mixed_conv2d_acc(x_q, w_q, plan, group_size, group_flags, act_shifts)
    B, O, H, W = acc.shape
    out = np.empty(acc.shape, dtype=np.float32)
    for b in range(B):
        for o in range(O):
            scale = float(act_scale) * float(w_scales[o])
            for y in range(H):
                for x in range(W):
                    out[b, o, y, x] = np.float32(float(acc[b, o, y, x]) * scale)
    return out
