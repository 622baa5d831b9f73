import numpy as np
import pytest

from mixq import netsim, synth


def small_model(seed=0, n_layers=4, features=16, group_size=4, residual=False,
                n_samples=128, **net_kwargs):
    """Prepared linear model plus (calib, eval) data for tests."""
    graph = synth.make_linear_net(seed, n_layers, features, 8, group_size,
                                  residual=residual, **net_kwargs)
    x_cal, y_cal = synth.make_dataset(seed + 1, features, 8, n_samples)
    x_ev, y_ev = synth.make_dataset(seed + 2, features, 8, 64)
    batches = [x_cal[i : i + 32] for i in range(0, len(x_cal), 32)]
    model = netsim.prepare(graph, batches)
    return model, (x_cal, y_cal), (x_ev, y_ev)


def small_conv_model(seed=0, channels=8, hw=5, group_size=2, residual=False):
    graph = synth.make_conv_net(seed, 3, channels, hw, 8, 3, group_size, residual=residual)
    x_cal, y_cal = synth.make_image_dataset(seed + 1, channels, hw, 8, 48)
    x_ev, y_ev = synth.make_image_dataset(seed + 2, channels, hw, 8, 16)
    batches = [x_cal[i : i + 16] for i in range(0, len(x_cal), 16)]
    model = netsim.prepare(graph, batches)
    return model, (x_cal, y_cal), (x_ev, y_ev)


@pytest.fixture(scope="session")
def prepared_model():
    return small_model(seed=7)
