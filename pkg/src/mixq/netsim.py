"""Minimal network graph and execution engine.

Supported operators: linear, conv2d (stride 1, same padding), relu, gelu,
residual_add, and reorder.  Matmul operators run in fp32, uniform int8,
uniform int4, or mixed 4/8-bit precision; everything else runs in 32-bit
float.  The engine is pure: a prepared model is immutable during a call
and outputs are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bitlower import ExtractionPlan, bitwidth_from_bounds, effective_bitwidth, group_slices, plan_extraction
from .qtensor import ChannelRange, QuantParams, calibrate_ranges, derive_scales, qrange, quantize

MATMUL_KINDS = ("linear", "conv2d")


@dataclass
class Layer:
    kind: str
    name: str = ""
    weight: np.ndarray | None = None  # [out, in] or [out, in, kh, kw], float32
    source: int | None = None  # residual_add / reorder: producer layer index, -1 = input
    perm: np.ndarray | None = None  # reorder: channel permutation

    def __post_init__(self):
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=np.float32)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class NetworkGraph:
    layers: list[Layer]
    input_shape: tuple[int, ...]  # (features,) or (channels, height, width)
    group_size: int = 32

    def matmul_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in MATMUL_KINDS]

    def residual_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "residual_add"]


@dataclass
class QuantState:
    """Calibrated quantization data for one matmul layer."""

    act_range: ChannelRange  # per input channel, float units
    act_scale: float  # per-tensor, 8-bit
    act_scale4: float  # per-tensor, 4-bit (uniform-int4 baseline)
    w_params8: QuantParams
    w_q8: np.ndarray
    w_params4: QuantParams
    w_q4: np.ndarray
    plan: ExtractionPlan

    def act_q8_bounds(self) -> np.ndarray:
        lo = np.clip(np.rint(self.act_range.min / self.act_scale), -128, 127)
        hi = np.clip(np.rint(self.act_range.max / self.act_scale), -128, 127)
        return np.stack([lo, hi], axis=1).astype(np.int64)


@dataclass
class PreparedModel:
    graph: NetworkGraph
    states: dict[int, QuantState]
    selections: dict[float, dict[int, np.ndarray]] = field(default_factory=dict)
    boundaries: dict[float, dict[int, int]] = field(default_factory=dict)
    input_perm: np.ndarray | None = None
    perms: dict[int, np.ndarray] = field(default_factory=dict)  # matmul idx -> channel perm
    laid_out: bool = False
    active_ratio: float | None = None

    @property
    def group_size(self) -> int:
        return self.graph.group_size

    def n_groups(self, idx: int) -> int:
        return len(group_slices(self.graph.layers[idx].n_in, self.group_size))

    def flags_for(self, idx: int, ratio: float) -> np.ndarray:
        key = ratio_key(ratio)
        if key not in self.selections:
            avail = sorted(self.selections)
            raise ValueError(f"ratio {ratio} not prepared; available: {avail}")
        return self.selections[key].get(idx, np.zeros(self.n_groups(idx), dtype=bool))


def ratio_key(ratio: float) -> float:
    return round(float(ratio), 6)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation, adequate for synthetic evaluation tasks
    c = math.sqrt(2.0 / math.pi)
    return (0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))).astype(np.float32)


def _act_codes(x: np.ndarray, scale: float, bitwidth: int) -> np.ndarray:
    q_min, q_max = qrange(bitwidth)
    return np.clip(np.rint(x.astype(np.float64) / scale), q_min, q_max).astype(np.int64)


def _matmul_fp32(layer: Layer, h: np.ndarray) -> np.ndarray:
    w = layer.weight.astype(np.float64)
    if layer.kind == "linear":
        return (h.astype(np.float64) @ w.T).astype(np.float32)
    B, C, H, W = h.shape
    O, _, kh, kw = w.shape
    hp = np.pad(h.astype(np.float64), ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros((B, O, H, W), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            out += np.einsum("bchw,oc->bohw", hp[:, :, dy : dy + H, dx : dx + W], w[:, :, dy, dx])
    return out.astype(np.float32)


def _matmul_quant(
    layer: Layer,
    state: QuantState,
    h: np.ndarray,
    mode: str,
    group_size: int,
    flags: np.ndarray | None,
    extraction: str | None,
) -> tuple[np.ndarray, kernels.KernelStats | None]:
    if mode == "int4":
        codes = _act_codes(h, state.act_scale4, 4)
        w_q, scales = state.w_q4, state.w_params4.scale
        act_scale = state.act_scale4
    else:
        codes = _act_codes(h, state.act_scale, 8)
        w_q, scales = state.w_q8, state.w_params8.scale
        act_scale = state.act_scale
    if mode in ("int8", "int4"):
        if layer.kind == "linear":
            return kernels.int_gemm(codes, w_q.T, act_scale, scales), None
        return kernels.int_conv2d(codes, w_q, act_scale, scales), None
    # mixed
    if layer.kind == "linear":
        return kernels.mixed_gemm(
            codes, w_q.T, act_scale, scales, state.plan, group_size,
            group_flags=flags, extraction=extraction,
        )
    return kernels.mixed_conv2d(
        codes, w_q, act_scale, scales, state.plan, group_size,
        group_flags=flags, extraction=extraction,
    )


def run(
    model: PreparedModel,
    x: np.ndarray,
    mode: str = "fp32",
    ratio: float | None = None,
    extraction: str | None = None,
    flags_override: dict[int, np.ndarray] | None = None,
    capture: bool = False,
    stats_out: dict | None = None,
):
    """Execute the network on a batch.

    mode: fp32 | int8 | int4 | mixed.  In mixed mode the 4-bit group flags
    come from ``flags_override`` if given, else from the selection
    prepared for ``ratio`` (defaulting to the model's active ratio).
    With ``capture=True`` returns (output, {matmul layer idx: output}).
    """
    if mode not in ("fp32", "int8", "int4", "mixed"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "fp32" and not model.states:
        raise ValueError("model is not calibrated; run prepare() first")
    if mode == "mixed" and flags_override is None:
        if ratio is None:
            ratio = model.active_ratio
        if ratio is None:
            raise ValueError("mixed mode needs a ratio (or set_ratio() first)")

    h = np.asarray(x, dtype=np.float32)
    if model.input_perm is not None:
        h = h[:, model.input_perm]
    x0 = h
    outputs: list[np.ndarray] = []
    captured: dict[int, np.ndarray] = {}
    for idx, layer in enumerate(model.graph.layers):
        if layer.kind in MATMUL_KINDS:
            if mode == "fp32":
                h = _matmul_fp32(layer, h)
            else:
                flags = None
                if mode == "mixed":
                    if flags_override is not None:
                        flags = flags_override.get(idx)
                        if flags is None:
                            flags = np.zeros(model.n_groups(idx), dtype=bool)
                    else:
                        flags = model.flags_for(idx, ratio)
                h, kstats = _matmul_quant(
                    layer, model.states[idx], h, mode, model.group_size, flags, extraction
                )
                if stats_out is not None and kstats is not None:
                    stats_out[idx] = (kstats, flags)
            if capture:
                captured[idx] = h
            outputs.append(h)
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
            outputs.append(h)
        elif layer.kind == "gelu":
            h = gelu(h)
            outputs.append(h)
        elif layer.kind == "residual_add":
            src = x0 if layer.source == -1 else outputs[layer.source]
            h = h + src
            outputs.append(h)
        elif layer.kind == "reorder":
            if layer.source is None:
                h = h[:, layer.perm]
                outputs.append(h)
            else:
                # side operator: reorders a recorded output (residual path),
                # main stream passes through untouched
                src = x0 if layer.source == -1 else outputs[layer.source]
                outputs.append(src[:, layer.perm])
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    if capture:
        return h, captured
    return h


def set_ratio(model: PreparedModel, ratio: float) -> dict[int, int]:
    """Switch the active 4-bit ratio; returns per-layer max_4bit_ch markers.

    No weight data moves; only the boundary markers change.
    """
    key = ratio_key(ratio)
    if key not in model.selections:
        avail = sorted(model.selections)
        raise ValueError(f"ratio {ratio} not prepared; available: {avail}")
    model.active_ratio = key
    if model.boundaries:
        return dict(model.boundaries[key])
    sizes = {}
    for idx, flags in model.selections[key].items():
        slices = group_slices(model.graph.layers[idx].n_in, model.group_size)
        sizes[idx] = sum(sl.stop - sl.start for sl, f in zip(slices, flags) if f)
    return sizes


def _build_state(
    layer: Layer, act_range: ChannelRange, group_size: int, extraction_mode: str
) -> QuantState:
    w = layer.weight
    flat = w.reshape(w.shape[0], -1)
    w_ranges = ChannelRange(flat.min(axis=1), flat.max(axis=1))
    p8 = derive_scales(w_ranges, 8, per_channel=True, channel_axis=0)
    p4 = derive_scales(w_ranges, 4, per_channel=True, channel_axis=0)
    q8 = quantize(w, p8)
    q4 = quantize(w, p4)
    abs_max = float(act_range.abs_max().max())
    act_scale = abs_max / 127.0 if abs_max > 0 else 1e-8
    act_scale4 = abs_max / 7.0 if abs_max > 0 else 1e-8
    lo = np.clip(np.rint(act_range.min / act_scale), -128, 127)
    hi = np.clip(np.rint(act_range.max / act_scale), -128, 127)
    plan = plan_extraction(
        np.stack([lo, hi], axis=1).astype(np.int64), q8.data, group_size, mode=extraction_mode
    )
    return QuantState(act_range, act_scale, act_scale4, p8, q8.data, p4, q4.data, plan)


def prepare(
    graph: NetworkGraph,
    calib_batches,
    momentum: float = 0.99,
    coverage_quantile: float | None = None,
    extraction_mode: str = "static",
) -> PreparedModel:
    """Calibrate activation ranges on a batch stream and quantize weights."""
    batches = list(calib_batches)
    if not batches:
        raise ValueError("calibration stream is empty")
    matmuls = graph.matmul_indices()
    streams: dict[int, list[np.ndarray]] = {i: [] for i in matmuls}
    for batch in batches:
        streams_batch = _matmul_inputs(graph, np.asarray(batch, dtype=np.float32))
        for i in matmuls:
            streams[i].append(streams_batch[i])
    states = {}
    for i in matmuls:
        cr = calibrate_ranges(streams[i], momentum, channel_axis=1, coverage_quantile=coverage_quantile)
        states[i] = _build_state(graph.layers[i], cr, graph.group_size, extraction_mode)
    return PreparedModel(graph, states)


def _matmul_inputs(graph: NetworkGraph, x: np.ndarray) -> dict[int, np.ndarray]:
    """fp32 forward pass capturing the input of every matmul layer."""
    h = np.asarray(x, dtype=np.float32)
    x0 = h
    outputs = []
    inputs = {}
    for idx, layer in enumerate(graph.layers):
        if layer.kind in MATMUL_KINDS:
            inputs[idx] = h
            h = _matmul_fp32(layer, h)
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        elif layer.kind == "gelu":
            h = gelu(h)
        elif layer.kind == "residual_add":
            h = h + (x0 if layer.source == -1 else outputs[layer.source])
        elif layer.kind == "reorder":
            if layer.source is None:
                h = h[:, layer.perm]
            else:
                outputs.append((x0 if layer.source == -1 else outputs[layer.source])[:, layer.perm])
                continue
        outputs.append(h)
    return inputs


# ---------------------------------------------------------------------------
# metrics


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm((a - b).ravel()))


def relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    """L2 distance normalized by the norm of the reference b."""
    norm = float(np.linalg.norm(np.asarray(b, dtype=np.float64).ravel()))
    if norm == 0.0:
        raise ValueError("reference tensor has zero norm")
    return l2_distance(a, b) / norm


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=1) == labels).mean())


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LossInputs:
    logits_low: np.ndarray
    logits_high: np.ndarray
    logits_fp32: np.ndarray
    hard_labels: np.ndarray
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda {self.lam} outside [0, 1]")
        if not (self.logits_low.shape == self.logits_high.shape == self.logits_fp32.shape):
            raise ValueError("logit tensors must share a shape")


def _branch_loss(logits: np.ndarray, hard_labels: np.ndarray, soft_targets: np.ndarray) -> float:
    p = softmax(logits)
    n = p.shape[0]
    ce_hard = -np.log(p[np.arange(n), hard_labels]).mean()
    ce_soft = -(soft_targets * np.log(p)).sum(axis=1).mean()
    return float(ce_hard + ce_soft)


def total_loss(inputs: LossInputs) -> float:
    """Combined hard-label + distillation loss, blended across bitwidths."""
    soft = softmax(inputs.logits_fp32)
    l_low = _branch_loss(inputs.logits_low, inputs.hard_labels, soft)
    l_high = _branch_loss(inputs.logits_high, inputs.hard_labels, soft)
    return inputs.lam * l_low + (1.0 - inputs.lam) * l_high


# ---------------------------------------------------------------------------
# analyses


def unused_bit_report(model: PreparedModel) -> dict[int, dict[str, list[float]]]:
    """Per matmul layer, fraction of channels with 0..4+ unused high bits.

    Channels are feature (input) channels; weight bitwidth is taken over
    all output channels' codes for that input channel, activation
    bitwidth from the calibrated code bounds.
    """
    if not model.states:
        raise ValueError("model is not calibrated")
    report = {}
    for idx, state in model.states.items():
        layer = model.graph.layers[idx]
        n_in = layer.n_in
        w = state.w_q8.reshape(layer.n_out, n_in, -1)
        w_hist = np.zeros(5)
        a_hist = np.zeros(5)
        bounds = state.act_q8_bounds()
        for c in range(n_in):
            wb = effective_bitwidth(w[:, c, :])
            w_hist[min(8 - wb, 4)] += 1
            ab = bitwidth_from_bounds(bounds[c, 0], bounds[c, 1])
            a_hist[min(8 - ab, 4)] += 1
        report[idx] = {
            "weight": (w_hist / n_in).tolist(),
            "activation": (a_hist / n_in).tolist(),
        }
    return report


def saturation_report(
    model: PreparedModel,
    eval_inputs: np.ndarray,
    ratio: float,
    extraction: str | None = None,
) -> dict[int, float]:
    """Per-layer percentage of 4-bit channels whose codes clipped."""
    stats: dict = {}
    run(model, eval_inputs, mode="mixed", ratio=ratio, extraction=extraction, stats_out=stats)
    report = {}
    for idx, (kstats, flags) in stats.items():
        slices = group_slices(model.graph.layers[idx].n_in, model.group_size)
        covered = sum(sl.stop - sl.start for sl, f in zip(slices, flags) if f)
        if covered == 0:
            report[idx] = 0.0
        else:
            report[idx] = 100.0 * float(kstats.saturated_channels.sum()) / covered
    return report
