import math

import numpy as np
import pytest

from mixq import evoselect, netsim, scoring, synth
from mixq.kernels import int_gemm
from mixq.netsim import (
    Layer,
    LossInputs,
    NetworkGraph,
    l2_distance,
    relative_l2,
    run,
    softmax,
    top1_accuracy,
    total_loss,
)
from mixq.qtensor import quantize
from conftest import small_model


def one_layer_model(seed=41, features=8, group_size=4):
    graph = synth.make_linear_net(seed, 1, features, 4, group_size)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((64, features)).astype(np.float32)
    model = netsim.prepare(graph, [x])
    return model, x


def test_fp32_run_matches_manual_composition():
    graph = NetworkGraph(
        [
            Layer("linear", weight=np.array([[1.0, -1.0], [0.5, 2.0]], dtype=np.float32)),
            Layer("relu"),
            Layer("linear", weight=np.array([[1.0, 1.0]], dtype=np.float32)),
        ],
        (2,),
        group_size=2,
    )
    x = np.array([[1.0, 2.0], [-3.0, 0.5]], dtype=np.float32)
    model = netsim.prepare(graph, [x])
    got = run(model, x, mode="fp32")
    h = np.maximum(x @ graph.layers[0].weight.T, 0.0)
    want = h @ graph.layers[2].weight.T
    np.testing.assert_allclose(got, want, rtol=1e-6)


def test_residual_add_from_source_layer():
    w = np.eye(2, dtype=np.float32)
    graph = NetworkGraph(
        [
            Layer("linear", weight=w),
            Layer("relu"),
            Layer("residual_add", source=0),  # adds the linear output back in
            Layer("linear", weight=w),
        ],
        (2,),
        group_size=2,
    )
    x = np.array([[1.0, -2.0]], dtype=np.float32)
    model = netsim.prepare(graph, [x])
    got = run(model, x, mode="fp32")
    lin = x @ w.T
    want = (np.maximum(lin, 0.0) + lin) @ w.T
    np.testing.assert_allclose(got, want, rtol=1e-6)


def test_int8_run_matches_manual_kernel_chain():
    model, x = one_layer_model()
    idx = model.graph.matmul_indices()[0]
    state = model.states[idx]
    got = run(model, x, mode="int8")
    x_q = np.clip(np.rint(x.astype(np.float64) / state.act_scale), -128, 127).astype(np.int64)
    want = int_gemm(x_q, state.w_q8.T.astype(np.int64), state.act_scale,
                    state.w_params8.scale)
    assert np.array_equal(got, want)


def test_mixed_ratio_zero_equals_int8():
    model, (x_cal, _), (x_ev, _) = small_model(seed=42)
    scores = scoring.score_groups(model)
    chrom = evoselect.select_greedy(model, scores, 0.0)
    out = run(model, x_ev, mode="mixed", flags_override=chrom.as_override())
    assert np.array_equal(out, run(model, x_ev, mode="int8"))


def test_int4_uniform_uses_4bit_scale():
    model, x = one_layer_model()
    idx = model.graph.matmul_indices()[0]
    state = model.states[idx]
    got = run(model, x, mode="int4")
    x_q = np.clip(np.rint(x.astype(np.float64) / state.act_scale4), -8, 7).astype(np.int64)
    want = int_gemm(x_q, state.w_q4.T.astype(np.int64), state.act_scale4,
                    state.w_params4.scale)
    assert np.array_equal(got, want)


def test_run_validation_errors():
    model, x = one_layer_model()
    with pytest.raises(ValueError, match="mode"):
        run(model, x, mode="int2")
    with pytest.raises(ValueError, match="ratio"):
        run(model, x, mode="mixed")
    bare = netsim.PreparedModel(model.graph, {})
    with pytest.raises(ValueError, match="calibrated"):
        run(bare, x, mode="int8")


def test_prepare_rejects_empty_stream():
    graph = synth.make_linear_net(1, 2, 8, 4, 4)
    with pytest.raises(ValueError, match="empty"):
        netsim.prepare(graph, [])


def test_metrics_helpers():
    a = np.array([[3.0, 4.0]])
    b = np.zeros((1, 2))
    assert l2_distance(a, b) == 5.0
    assert relative_l2(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]])) == 1.0
    with pytest.raises(ValueError):
        relative_l2(a, b)
    logits = np.array([[0.1, 0.9], [0.8, 0.2]])
    assert top1_accuracy(logits, np.array([1, 0])) == 1.0
    assert top1_accuracy(logits, np.array([0, 0])) == 0.5


def test_softmax_matches_direct_formula():
    z = np.array([[1.0, 2.0, 3.0]])
    want = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(softmax(z), want, rtol=1e-12)
    big = softmax(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(big, [[0.5, 0.5]])


def loss_inputs(lam):
    low = np.array([[2.0, 0.0], [0.5, 1.5]])
    high = np.array([[1.0, 1.0], [0.0, 2.0]])
    fp = np.array([[3.0, -1.0], [1.0, 1.0]])
    hard = np.array([0, 1])
    return LossInputs(low, high, fp, hard, lam)


def branch_loss_by_hand(logits, hard, fp):
    total = 0.0
    for i in range(len(hard)):
        exp = [math.exp(v) for v in logits[i]]
        p = [e / sum(exp) for e in exp]
        expf = [math.exp(v) for v in fp[i]]
        q = [e / sum(expf) for e in expf]
        total += -math.log(p[hard[i]])
        total += -sum(qj * math.log(pj) for qj, pj in zip(q, p))
    return total / len(hard)


def test_loss_lambda_identities():
    inp0, inp1, inp_half = loss_inputs(0.0), loss_inputs(1.0), loss_inputs(0.5)
    low = branch_loss_by_hand(inp0.logits_low, inp0.hard_labels, inp0.logits_fp32)
    high = branch_loss_by_hand(inp0.logits_high, inp0.hard_labels, inp0.logits_fp32)
    assert total_loss(inp1) == pytest.approx(low, abs=1e-9)
    assert total_loss(inp0) == pytest.approx(high, abs=1e-9)
    assert total_loss(inp_half) == pytest.approx(0.5 * (low + high), abs=1e-9)


def test_loss_closed_form_case():
    # symmetric two-class case: p = softmax([a, 0]) known in closed form
    a = 1.0
    low = np.array([[a, 0.0]])
    inp = LossInputs(low, low, np.array([[0.0, 0.0]]), np.array([0]), 0.5)
    p0 = 1.0 / (1.0 + math.exp(-a))
    p1 = 1.0 - p0
    want = -math.log(p0) + -(0.5 * math.log(p0) + 0.5 * math.log(p1))
    assert total_loss(inp) == pytest.approx(want, abs=1e-9)


def test_loss_validation():
    with pytest.raises(ValueError):
        loss_inputs(1.5)
    with pytest.raises(ValueError):
        LossInputs(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2)), np.array([0]))


def test_unused_bit_report_hand_case():
    # weights quantize to +/-127 on channel 0 (0 unused bits) and
    # +/-1 -> code 4 on channel 1/2/3 given channel-0 dominated scale
    w = np.array([[16.0, 1.0, 1.0, 1.0], [-16.0, -1.0, -1.0, -1.0]], dtype=np.float32)
    graph = NetworkGraph([Layer("linear", weight=w)], (4,), group_size=4)
    x = np.array([[10.0, 0.07, 0.07, 0.07]], dtype=np.float32) * np.ones((8, 1), np.float32)
    model = netsim.prepare(graph, [x])
    report = netsim.unused_bit_report(model)[0]
    # weight codes: ch0 -> 127 (8 bits, 0 unused); ch1..3 -> 8 (5 bits, 3 unused)
    assert report["weight"][0] == pytest.approx(0.25)
    assert report["weight"][3] == pytest.approx(0.75)
    # activation codes: ch0 -> 127; ch1..3 -> 1 (2 bits -> >=4 unused)
    assert report["activation"][0] == pytest.approx(0.25)
    assert report["activation"][4] == pytest.approx(0.75)


def test_saturation_report_static_vs_dynamic():
    model, (x_cal, _), (x_ev, _) = small_model(seed=43)
    scores = scoring.score_groups(model)
    sel = evoselect.chained_selection(
        model, scores, [1.0], evoselect.EvoConfig(population=8, generations=2, elite=2,
                                                  parents=4, fitness_samples=16, seed=0),
        x_cal[:16], algo="greedy",
    )
    evoselect.install_selections(model, sel)
    hot = x_ev * 3.0  # far outside the calibrated ranges
    static = netsim.saturation_report(model, hot, 1.0, extraction="static")
    dynamic = netsim.saturation_report(model, hot, 1.0, extraction="dynamic")
    assert any(v > 0.0 for v in static.values())
    assert all(v == 0.0 for v in dynamic.values())
    calm = netsim.saturation_report(model, x_cal[:16], 1.0, extraction="static")
    assert all(v == 0.0 for v in calm.values())
