"""Per-feature-group error-estimation scores.

A group's score is the calibrated activation value range times the
largest weight value range among the output channels touching that
group.  Low score means low expected quantization error, so low-score
groups are the first candidates for 4-bit computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitlower import group_slices
from .netsim import PreparedModel


@dataclass(frozen=True)
class ErrorScore:
    layer: int  # graph layer index
    group: int
    activation_range: float
    max_weight_range: float

    @property
    def score(self) -> float:
        return self.activation_range * self.max_weight_range


def score_groups(model: PreparedModel, eligible: list[int] | None = None) -> list[ErrorScore]:
    """Score every feature group of the eligible matmul layers.

    Ranges are the post-calibration float ranges.  Returned sorted
    ascending by (score, layer, group) so ties break deterministically.
    """
    if not model.states:
        raise ValueError("model is not calibrated")
    if eligible is None:
        eligible = model.graph.matmul_indices()
    scores = []
    for idx in eligible:
        layer = model.graph.layers[idx]
        state = model.states[idx]
        w = layer.weight.reshape(layer.n_out, layer.n_in, -1).astype(np.float64)
        for g, sl in enumerate(group_slices(layer.n_in, model.group_size)):
            act_range = float(state.act_range.max[sl].max() - state.act_range.min[sl].min())
            slab = w[:, sl, :].reshape(layer.n_out, -1)
            w_range = float((slab.max(axis=1) - slab.min(axis=1)).max())
            scores.append(ErrorScore(idx, g, act_range, w_range))
    scores.sort(key=lambda s: (s.score, s.layer, s.group))
    return scores


def scores_to_csv(scores: list[ErrorScore]) -> str:
    lines = ["layer,group,activation_range,max_weight_range,score"]
    for s in scores:
        lines.append(f"{s.layer},{s.group},{s.activation_range!r},{s.max_weight_range!r},{s.score!r}")
    return "\n".join(lines) + "\n"
