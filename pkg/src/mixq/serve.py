"""Discrete-event inference-serving simulator.

Single-server FIFO queue fed by Poisson or trace-driven arrivals.
Service time comes from a parametric cost model tied to the 4-bit ratio;
the adaptive controller steps the ratio by 25% at monitoring-window
boundaries whenever the profiled latency for the observed request rate
crosses a threshold.  Simulated time only; fully deterministic per seed.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SPEEDUP = 1.43  # 100% 4-bit vs 8-bit matmul time
RATIO_STEP = 0.25
DECREASE_MARGIN = 0.7  # step down when profiled latency < margin * threshold


@dataclass
class CostModel:
    """Abstract per-inference latency as a function of the 4-bit ratio."""

    matmul_costs: np.ndarray  # per-layer base cost at 8-bit, time units
    speedup: float = DEFAULT_SPEEDUP
    float_cost: float = 0.0
    reorder_costs: np.ndarray | float = 0.0
    dynamic_overhead: float = 0.0  # fraction of matmul cost, dynamic extraction
    switch_cost: float = 0.0  # cost of a ratio switch (negligible by default)

    def __post_init__(self):
        self.matmul_costs = np.atleast_1d(np.asarray(self.matmul_costs, dtype=np.float64))
        self.reorder_costs = np.atleast_1d(np.asarray(self.reorder_costs, dtype=np.float64))

    def service_time(self, ratio: float) -> float:
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"ratio {ratio} outside [0, 1]")
        per_layer = self.matmul_costs * (1.0 - ratio * (1.0 - 1.0 / self.speedup))
        matmul = float(per_layer.sum()) * (1.0 + self.dynamic_overhead)
        return matmul + self.float_cost + float(np.sum(self.reorder_costs))


def cost_model_from_model(model, unit: float = 1.0, **kwargs) -> CostModel:
    """Derive matmul costs (MACs) and reorder costs (3% of producer) from a net."""
    from .netsim import MATMUL_KINDS

    graph = model.graph
    costs = []
    per_layer = {}
    for idx, layer in enumerate(graph.layers):
        if layer.kind in MATMUL_KINDS:
            macs = float(np.prod(layer.weight.shape))
            per_layer[idx] = macs * unit
            costs.append(macs * unit)
    reorder = [0.03 * per_layer[max(i for i in per_layer if i < idx)]
               for idx, l in enumerate(graph.layers)
               if l.kind == "reorder" and any(i < idx for i in per_layer)]
    return CostModel(np.array(costs), reorder_costs=np.array(reorder or [0.0]), **kwargs)


@dataclass
class ServingTrace:
    """Request arrival times (seconds, non-decreasing) plus rate metadata."""

    arrivals: np.ndarray
    duration: float
    intervals: list[tuple[float, float]] = field(default_factory=list)  # (t_start, rate)

    def __post_init__(self):
        self.arrivals = np.asarray(self.arrivals, dtype=np.float64)
        if self.arrivals.size and np.any(np.diff(self.arrivals) < 0):
            raise ValueError("arrival times must be non-decreasing")


def gen_poisson(rate: float, duration: float, seed: int) -> ServingTrace:
    """Homogeneous Poisson arrivals at the given requests/second."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    rng = np.random.default_rng(seed)
    if rate == 0:
        return ServingTrace(np.empty(0), duration, [(0.0, 0.0)])
    n = int(rng.poisson(rate * duration))
    arrivals = np.sort(rng.uniform(0.0, duration, size=n))
    return ServingTrace(arrivals, duration, [(0.0, rate)])


def gen_fluctuating(
    min_rate: float,
    duration: float,
    seed: int,
    peak_factor: float = 3.0,
    period: float | None = None,
    interval: float = 1.0,
) -> ServingTrace:
    """Trace-style fluctuating workload: peak rate = peak_factor x minimum.

    The rate profile is a raised cosine between min_rate and
    peak_factor * min_rate, sampled per interval; arrivals within an
    interval are Poisson at the interval's rate.
    """
    rng = np.random.default_rng(seed)
    period = period or duration
    times = np.arange(0.0, duration, interval)
    rates = min_rate + (peak_factor - 1.0) * min_rate * 0.5 * (
        1.0 - np.cos(2.0 * np.pi * times / period)
    )
    arrivals = []
    intervals = []
    for t, r in zip(times, rates):
        intervals.append((float(t), float(r)))
        n = int(rng.poisson(r * interval))
        arrivals.append(np.sort(rng.uniform(t, t + interval, size=n)))
    return ServingTrace(np.concatenate(arrivals) if arrivals else np.empty(0), duration, intervals)


@dataclass
class LatencyProfile:
    """Profiled latency table mapping (rate, ratio) -> expected latency."""

    rates: np.ndarray
    ratios: tuple[float, ...]
    latency: np.ndarray  # [n_rates, n_ratios]

    def lookup(self, rate: float, ratio: float) -> float:
        j = self.ratios.index(ratio)
        col = self.latency[:, j]
        return float(np.interp(rate, self.rates, col))


@dataclass
class ControllerPolicy:
    window: float  # monitoring window, seconds
    threshold: float  # latency threshold, seconds
    profile: LatencyProfile
    step: float = RATIO_STEP
    ratios: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    initial_ratio: float = 0.0


@dataclass
class SimResult:
    windows: list[dict]  # per window: t, rate, ratio, median, p90, n
    ratio_timeline: list[tuple[float, float]]  # (t_start, ratio)
    latencies: np.ndarray
    requests: list[tuple[float, float, float, float]]  # arrival, start, finish, ratio
    saturated: bool

    def completed(self) -> int:
        return len(self.requests)


def _ratio_timeline(trace: ServingTrace, policy: ControllerPolicy) -> list[tuple[float, float]]:
    """Controller decisions from observed per-window arrival rates.

    The controller consults the profiled latency for the current rate at
    each window boundary and steps the ratio by at most one step.
    """
    timeline = [(0.0, policy.initial_ratio)]
    ratio = policy.initial_ratio
    order = sorted(policy.ratios)
    t = policy.window
    while t <= trace.duration + 1e-12:
        lo, hi = np.searchsorted(trace.arrivals, [t - policy.window, t])
        rate = (hi - lo) / policy.window
        profiled = policy.profile.lookup(rate, ratio)
        i = order.index(ratio)
        if profiled > policy.threshold and i + 1 < len(order):
            ratio = order[i + 1]
            timeline.append((t, ratio))
        elif profiled < DECREASE_MARGIN * policy.threshold and i > 0:
            down = order[i - 1]
            if policy.profile.lookup(rate, down) < DECREASE_MARGIN * policy.threshold:
                ratio = down
                timeline.append((t, ratio))
        t += policy.window
    return timeline


def simulate(
    trace: ServingTrace,
    cost_model: CostModel,
    policy: ControllerPolicy | float,
    window: float | None = None,
) -> SimResult:
    """Run the FIFO queue over the trace.

    ``policy`` is either a fixed ratio (float) or a ControllerPolicy.
    Response time includes queueing delay; the service time is set by the
    ratio in force when service starts.
    """
    if isinstance(policy, ControllerPolicy):
        timeline = _ratio_timeline(trace, policy)
        window = window or policy.window
    else:
        timeline = [(0.0, float(policy))]
        window = window or max(trace.duration / 20.0, 1e-9)
    switch_times = [t for t, _ in timeline]

    def ratio_at(t: float) -> float:
        return timeline[bisect.bisect_right(switch_times, t) - 1][1]

    free = 0.0
    requests = []
    last_ratio = timeline[0][1]
    for a in trace.arrivals:
        start = max(float(a), free)
        ratio = ratio_at(start)
        service = cost_model.service_time(ratio)
        if ratio != last_ratio:
            service += cost_model.switch_cost
            last_ratio = ratio
        finish = start + service
        free = finish
        requests.append((float(a), start, finish, ratio))

    latencies = np.array([f - a for a, _, f, _ in requests])
    windows = []
    n_windows = max(1, int(np.ceil(trace.duration / window)))
    for wi in range(n_windows):
        t0, t1 = wi * window, (wi + 1) * window
        sel = [lat for (a, _, f, _), lat in zip(requests, latencies) if t0 <= a < t1]
        row = {
            "t": t0,
            "rate": len(sel) / window,
            "ratio": ratio_at(t0),
            "median": float(np.median(sel)) if sel else 0.0,
            "p90": float(np.percentile(sel, 90)) if sel else 0.0,
            "n": len(sel),
        }
        windows.append(row)
    service_min = cost_model.service_time(1.0)
    saturated = bool(
        trace.arrivals.size
        and trace.arrivals.size / max(trace.duration, 1e-12) * service_min > 1.0
    )
    return SimResult(windows, timeline, latencies, requests, saturated)


def build_profile(
    cost_model: CostModel,
    rates,
    ratios=(0.0, 0.25, 0.5, 0.75, 1.0),
    duration: float = 20.0,
    seed: int = 1234,
) -> LatencyProfile:
    """Profiled (rate, ratio) -> median latency table via pre-simulation sweeps."""
    rates = np.asarray(sorted(rates), dtype=np.float64)
    table = np.zeros((rates.size, len(ratios)))
    for i, rate in enumerate(rates):
        trace = gen_poisson(float(rate), duration, seed + i)
        for j, ratio in enumerate(ratios):
            res = simulate(trace, cost_model, float(ratio))
            table[i, j] = float(np.median(res.latencies)) if res.latencies.size else 0.0
    return LatencyProfile(rates, tuple(ratios), table)


def shipped_scenario(seed: int = 7):
    """Reference fluctuating-workload scenario used by the demo and tests.

    A 3x-peak trace (500 -> 1500 req/s) against a server whose 8-bit
    capacity is 1200 req/s: fixed 8-bit overloads around the peak while
    the adaptive controller rides it out by raising the 4-bit ratio.
    Returns (trace, cost_model, policy).
    """
    cost = CostModel(matmul_costs=np.array([1.0 / 1200.0]))
    trace = gen_fluctuating(min_rate=500.0, duration=120.0, seed=seed, peak_factor=3.0, period=120.0)
    profile = build_profile(cost, rates=np.arange(0.0, 1701.0, 200.0), duration=8.0, seed=seed + 1)
    policy = ControllerPolicy(window=2.0, threshold=0.005, profile=profile)
    return trace, cost, policy


def effective_accuracy(
    ratio_timeline: list[tuple[float, float]],
    duration: float,
    quality: dict[float, float],
) -> float:
    """Time-weighted mean quality over the ratio timeline."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    total = 0.0
    for i, (t0, ratio) in enumerate(ratio_timeline):
        t1 = ratio_timeline[i + 1][0] if i + 1 < len(ratio_timeline) else duration
        t0, t1 = max(t0, 0.0), min(t1, duration)
        if t1 > t0:
            total += (t1 - t0) * quality[ratio]
    return total / duration
