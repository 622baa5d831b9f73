"""Evolutionary selection of feature groups for 4-bit computation.

A chromosome is one bit flag per feature group, ordered by layer; fitness
is the mean L2 distance between mixed-precision output logits and the
full 8-bit logits (lower is better).  Greedy and random baseline
selectors share the same chromosome shape.  Inclusivity across ratios is
enforced with a baseline chromosome whose flags are never unset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netsim import PreparedModel, run
from .scoring import ErrorScore

SCORE_EPS = 1e-12


@dataclass(frozen=True)
class Chromosome:
    layers: tuple[int, ...]  # graph indices of the selectable matmul layers
    flags: tuple[np.ndarray, ...]  # bool per feature group, aligned with layers
    target_ratio: float

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(np.asarray(f, dtype=bool) for f in self.flags))

    def key(self) -> bytes:
        return b"".join(np.packbits(f).tobytes() for f in self.flags)

    def set_count(self) -> int:
        return int(sum(f.sum() for f in self.flags))

    def total_groups(self) -> int:
        return int(sum(f.size for f in self.flags))

    def as_override(self) -> dict[int, np.ndarray]:
        return {idx: f for idx, f in zip(self.layers, self.flags)}

    def includes(self, other: "Chromosome") -> bool:
        return all(bool(np.all(f | ~g)) for f, g in zip(self.flags, other.flags))


@dataclass
class EvoConfig:
    population: int = 50
    generations: int = 50
    elite: int = 2
    parents: int = 10
    mutation_prob: float = 0.01
    fitness_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.elite < self.parents <= self.population:
            raise ValueError("need elite < parents <= population")
        if not 0.0 < self.mutation_prob < 1.0:
            raise ValueError("mutation probability must be in (0, 1)")


def target_count(ratio: float, total_groups: int) -> int:
    """Whole-group target for a ratio; rejects unrepresentable ratios."""
    exact = ratio * total_groups
    count = int(round(exact))
    if abs(exact - count) > 1e-9:
        lo, hi = math.floor(exact) / total_groups, math.ceil(exact) / total_groups
        raise ValueError(
            f"ratio {ratio} is not representable in whole groups; nearest: {lo}, {hi}"
        )
    if not 0 <= count <= total_groups:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    return count


def _scores_map(scores: list[ErrorScore], layers: tuple[int, ...], sizes: list[int]) -> dict[int, np.ndarray]:
    by_layer = {idx: np.full(n, np.nan) for idx, n in zip(layers, sizes)}
    for s in scores:
        if s.layer in by_layer:
            by_layer[s.layer][s.group] = s.score
    for idx, arr in by_layer.items():
        if np.any(np.isnan(arr)):
            raise ValueError(f"scores missing for some groups of layer {idx}")
    return by_layer


def fitness(
    model: PreparedModel,
    chrom: Chromosome,
    sample_inputs: np.ndarray,
    ref_logits: np.ndarray | None = None,
    extraction: str | None = None,
) -> float:
    """Mean per-sample L2 distance of mixed logits to the 8-bit logits."""
    if ref_logits is None:
        ref_logits = run(model, sample_inputs, mode="int8")
    out = run(model, sample_inputs, mode="mixed", flags_override=chrom.as_override(), extraction=extraction)
    diff = (out.astype(np.float64) - ref_logits.astype(np.float64)).reshape(out.shape[0], -1)
    return float(np.linalg.norm(diff, axis=1).mean())


def crossover(a: Chromosome, b: Chromosome, rng: np.random.Generator) -> tuple[Chromosome, Chromosome]:
    """Swap the suffix layers right of a random layer boundary."""
    if a.layers != b.layers:
        raise ValueError("chromosomes must cover the same layers")
    n = len(a.layers)
    if n < 2:
        return a, b
    point = int(rng.integers(1, n))
    fa = a.flags[:point] + b.flags[point:]
    fb = b.flags[:point] + a.flags[point:]
    return (
        Chromosome(a.layers, fa, a.target_ratio),
        Chromosome(b.layers, fb, b.target_ratio),
    )


def mutate(
    chrom: Chromosome,
    scores: dict[int, np.ndarray],
    p: float,
    rng: np.random.Generator,
    target: int,
    baseline: Chromosome | None = None,
) -> Chromosome:
    """Flip set flags with probability p, swapping in a low-score flag of the
    same layer, then repair the total count to the target.

    Repair unsets highest-score flags first / sets lowest-score flags
    first.  Baseline flags are never unset.
    """
    flags = [f.copy() for f in chrom.flags]
    base = [b for b in baseline.flags] if baseline else [np.zeros_like(f) for f in flags]
    for li, idx in enumerate(chrom.layers):
        f = flags[li]
        s = scores[idx]
        for g in np.flatnonzero(f & ~base[li]):
            if rng.random() >= p:
                continue
            unset = np.flatnonzero(~f)
            if unset.size == 0:
                continue  # layer fully set, nothing to swap in
            w = 1.0 / (s[unset] + SCORE_EPS)
            pick = unset[rng.choice(unset.size, p=w / w.sum())]
            f[g] = False
            f[pick] = True
    # repair pass: meet the target count exactly
    total = int(sum(f.sum() for f in flags))
    if total != target:
        flat_scores = []
        for li, idx in enumerate(chrom.layers):
            for g in range(flags[li].size):
                flat_scores.append((scores[idx][g], li, g))
        if total > target:
            removable = sorted(
                (t for t in flat_scores if flags[t[1]][t[2]] and not base[t[1]][t[2]]),
                key=lambda t: (-t[0], t[1], t[2]),
            )
            for _, li, g in removable[: total - target]:
                flags[li][g] = False
        else:
            addable = sorted(
                (t for t in flat_scores if not flags[t[1]][t[2]]),
                key=lambda t: (t[0], t[1], t[2]),
            )
            for _, li, g in addable[: target - total]:
                flags[li][g] = True
    return Chromosome(chrom.layers, tuple(flags), chrom.target_ratio)


def _selectable_layers(model: PreparedModel, protect_edges: bool) -> tuple[int, ...]:
    matmuls = model.graph.matmul_indices()
    if protect_edges and len(matmuls) > 2:
        return tuple(matmuls[1:-1])
    return tuple(matmuls)


def _empty(model: PreparedModel, layers: tuple[int, ...], ratio: float) -> Chromosome:
    return Chromosome(layers, tuple(np.zeros(model.n_groups(i), dtype=bool) for i in layers), ratio)


def select_greedy(
    model: PreparedModel,
    scores: list[ErrorScore],
    ratio: float,
    baseline: Chromosome | None = None,
    protect_edges: bool = False,
) -> Chromosome:
    """Pick ascending-score groups model-wide until the target is met."""
    layers = baseline.layers if baseline else _selectable_layers(model, protect_edges)
    chrom = baseline or _empty(model, layers, ratio)
    flags = [f.copy() for f in chrom.flags]
    target = target_count(ratio, chrom.total_groups())
    pos = {idx: li for li, idx in enumerate(layers)}
    ranked = [s for s in scores if s.layer in pos and not flags[pos[s.layer]][s.group]]
    ranked.sort(key=lambda s: (s.score, s.layer, s.group))
    need = target - int(sum(f.sum() for f in flags))
    if need < 0:
        raise ValueError("baseline exceeds the target ratio")
    for s in ranked[:need]:
        flags[pos[s.layer]][s.group] = True
    return Chromosome(layers, tuple(flags), ratio)


def select_random(
    model: PreparedModel,
    ratio: float,
    rng: np.random.Generator,
    baseline: Chromosome | None = None,
    protect_edges: bool = False,
) -> Chromosome:
    """Uniformly random selection at the target ratio."""
    layers = baseline.layers if baseline else _selectable_layers(model, protect_edges)
    chrom = baseline or _empty(model, layers, ratio)
    flags = [f.copy() for f in chrom.flags]
    target = target_count(ratio, chrom.total_groups())
    unset = [(li, g) for li, f in enumerate(flags) for g in np.flatnonzero(~f)]
    need = target - int(sum(f.sum() for f in flags))
    picks = rng.choice(len(unset), size=need, replace=False)
    for i in picks:
        li, g = unset[i]
        flags[li][g] = True
    return Chromosome(layers, tuple(flags), ratio)


def _seed_population(
    model: PreparedModel,
    layers: tuple[int, ...],
    scores_map: dict[int, np.ndarray],
    greedy: Chromosome,
    ratio: float,
    target: int,
    cfg: EvoConfig,
    rng: np.random.Generator,
    baseline: Chromosome | None,
) -> list[Chromosome]:
    base = baseline or _empty(model, layers, ratio)
    unset = [(li, g) for li, f in enumerate(base.flags) for g in np.flatnonzero(~f)]
    weights = np.array([1.0 / (scores_map[layers[li]][g] + SCORE_EPS) for li, g in unset])
    weights /= weights.sum()
    need = target - base.set_count()
    pop = [greedy]
    while len(pop) < cfg.population:
        flags = [f.copy() for f in base.flags]
        for i in rng.choice(len(unset), size=need, replace=False, p=weights):
            li, g = unset[i]
            flags[li][g] = True
        pop.append(Chromosome(layers, tuple(flags), ratio))
    return pop


def select_channels(
    model: PreparedModel,
    scores: list[ErrorScore],
    ratio: float,
    cfg: EvoConfig,
    sample_inputs: np.ndarray,
    baseline: Chromosome | None = None,
    protect_edges: bool = False,
    extraction: str | None = None,
    history: list | None = None,
) -> Chromosome:
    """Evolutionary search for the 4-bit group selection at one ratio.

    Deterministic given cfg.seed.  ``history``, if provided, collects the
    best fitness per generation.
    """
    layers = baseline.layers if baseline else _selectable_layers(model, protect_edges)
    sizes = [model.n_groups(i) for i in layers]
    total = sum(sizes)
    target = target_count(ratio, total)
    if target == 0:
        return _empty(model, layers, ratio)
    if target == total:
        return Chromosome(layers, tuple(np.ones(n, dtype=bool) for n in sizes), ratio)
    if baseline is not None and baseline.set_count() > target:
        raise ValueError("baseline ratio exceeds the requested ratio")

    rng = np.random.default_rng(cfg.seed)
    smap = _scores_map(scores, layers, sizes)
    ref_logits = run(model, sample_inputs, mode="int8")
    cache: dict[bytes, float] = {}

    def fit(c: Chromosome) -> float:
        k = c.key()
        if k not in cache:
            cache[k] = fitness(model, c, sample_inputs, ref_logits, extraction=extraction)
        return cache[k]

    greedy = select_greedy(model, scores, ratio, baseline=baseline, protect_edges=protect_edges)
    pop = _seed_population(model, layers, smap, greedy, ratio, target, cfg, rng, baseline)
    for _ in range(cfg.generations):
        ranked = sorted(pop, key=lambda c: (fit(c), c.key()))
        if history is not None:
            history.append(fit(ranked[0]))
        elites = ranked[: cfg.elite]
        parents = ranked[: cfg.parents]
        offspring: list[Chromosome] = []
        while len(offspring) < cfg.population - cfg.elite:
            i, j = rng.choice(len(parents), size=2, replace=False)
            c1, c2 = crossover(parents[i], parents[j], rng)
            offspring.append(mutate(c1, smap, cfg.mutation_prob, rng, target, baseline))
            if len(offspring) < cfg.population - cfg.elite:
                offspring.append(mutate(c2, smap, cfg.mutation_prob, rng, target, baseline))
        pop = elites + offspring
    best = min(pop, key=lambda c: (fit(c), c.key()))
    if history is not None:
        history.append(fit(best))
    return best


def chained_selection(
    model: PreparedModel,
    scores: list[ErrorScore],
    ratios: list[float],
    cfg: EvoConfig,
    sample_inputs: np.ndarray,
    algo: str = "evo",
    protect_edges: bool = False,
    extraction: str | None = None,
    histories: dict[float, list[float]] | None = None,
) -> dict[float, Chromosome]:
    """Selections for ascending ratios with inclusivity enforced by chaining.

    ``histories``, if given, collects best fitness per generation per ratio
    (a single final-fitness entry for the non-evolutionary algorithms).
    """
    result: dict[float, Chromosome] = {}
    baseline = None
    rng = np.random.default_rng(cfg.seed)
    for i, ratio in enumerate(sorted(ratios)):
        history: list[float] | None = None if histories is None else []
        if algo == "evo":
            sub = EvoConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
            c = select_channels(
                model, scores, ratio, sub, sample_inputs,
                baseline=baseline, protect_edges=protect_edges, extraction=extraction,
                history=history,
            )
        elif algo == "greedy":
            c = select_greedy(model, scores, ratio, baseline=baseline, protect_edges=protect_edges)
        elif algo == "random":
            c = select_random(model, ratio, rng, baseline=baseline, protect_edges=protect_edges)
        else:
            raise ValueError(f"unknown selection algorithm {algo!r}")
        if histories is not None:
            if not history:
                history = [fitness(model, c, sample_inputs, extraction=extraction)]
            histories[ratio] = history
        result[ratio] = c
        baseline = c
    return result


def install_selections(model: PreparedModel, selections: dict[float, Chromosome]):
    """Attach chromosome selections to the model's ratio table."""
    from .netsim import ratio_key

    for ratio, chrom in selections.items():
        model.selections[ratio_key(ratio)] = chrom.as_override()
