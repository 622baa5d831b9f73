import json

import numpy as np
import pytest

from mixq import evoselect, layout, modelio, netsim, scoring
from mixq.evoselect import EvoConfig
from mixq.modelio import MissingArtifactError
from conftest import small_model


def full_pipeline_model(seed=51):
    model, (x_cal, _), (x_ev, _) = small_model(seed=seed)
    scores = scoring.score_groups(model)
    cfg = EvoConfig(population=8, generations=2, elite=2, parents=4,
                    fitness_samples=16, seed=0)
    sel = evoselect.chained_selection(model, scores, [0.25, 0.5, 0.75, 1.0],
                                      cfg, x_cal[:16], algo="greedy")
    evoselect.install_selections(model, sel)
    model = layout.apply_layout(model, layout.plan_layout(model))
    return model, x_ev


def test_round_trip_preserves_outputs_bit_exactly(tmp_path):
    model, x_ev = full_pipeline_model()
    modelio.save_model(tmp_path, model)
    loaded = modelio.load_model(tmp_path)
    for mode, ratio in [("int8", None), ("int4", None), ("mixed", 0.25), ("mixed", 1.0)]:
        a = netsim.run(model, x_ev, mode=mode, ratio=ratio)
        b = netsim.run(loaded, x_ev, mode=mode, ratio=ratio)
        assert np.array_equal(a, b), (mode, ratio)


def test_round_trip_preserves_metadata(tmp_path):
    model, _ = full_pipeline_model()
    modelio.save_model(tmp_path, model)
    loaded = modelio.load_model(tmp_path)
    assert loaded.laid_out == model.laid_out
    assert sorted(loaded.selections) == sorted(model.selections)
    for r in model.selections:
        for idx, flags in model.selections[r].items():
            assert np.array_equal(loaded.selections[r][idx], flags)
        assert loaded.boundaries[r] == model.boundaries[r]
    for idx, state in model.states.items():
        got = loaded.states[idx]
        assert got.act_scale == state.act_scale
        assert np.array_equal(got.w_q8, state.w_q8)
        assert np.array_equal(got.plan.act_shifts, state.plan.act_shifts)
        assert np.array_equal(got.plan.weight_shifts, state.plan.weight_shifts)


def test_manifest_bytes_deterministic(tmp_path):
    model, _ = full_pipeline_model()
    modelio.save_model(tmp_path / "a", model)
    modelio.save_model(tmp_path / "b", model)
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    b = (tmp_path / "b" / "manifest.json").read_bytes()
    assert a == b
    meta = json.loads(a)
    assert meta["format"] == "mixq-model-v1"


def test_weight_binaries_raw_little_endian(tmp_path):
    model, _ = full_pipeline_model()
    modelio.save_model(tmp_path, model)
    meta = json.loads((tmp_path / "manifest.json").read_text())
    rec = next(l for l in meta["layers"] if "weight_file" in l)
    raw = (tmp_path / rec["weight_file"]).read_bytes()
    arr = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"])
    idx = meta["layers"].index(rec)
    assert np.array_equal(arr, model.graph.layers[idx].weight)


def test_dataset_round_trip(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    y = np.array([0, 1, 2], dtype=np.int64)
    modelio.save_dataset(tmp_path, "calib", x, y)
    gx, gy = modelio.load_dataset(tmp_path, "calib")
    assert np.array_equal(gx, x) and np.array_equal(gy, y)
    modelio.save_dataset(tmp_path, "unlabeled", x)
    gx, gy = modelio.load_dataset(tmp_path, "unlabeled")
    assert gy is None


def test_missing_artifacts_raise(tmp_path):
    with pytest.raises(MissingArtifactError):
        modelio.load_model(tmp_path / "nope")
    with pytest.raises(MissingArtifactError):
        modelio.load_dataset(tmp_path, "calib")
    model, _ = full_pipeline_model()
    modelio.save_model(tmp_path, model)
    next(tmp_path.glob("*.f32bin")).unlink()
    with pytest.raises(MissingArtifactError):
        modelio.load_model(tmp_path)
