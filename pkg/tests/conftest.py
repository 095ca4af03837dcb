"""Shared fixtures: tiny synthetic datasets and models that train in well under a second."""

import os
import sys

import numpy as np
import pytest

# Make the package importable the same way run_server.py / run_cli.py do
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from wmunlearn.data import SynthSpec, synth_dataset
from wmunlearn.models import build_model, mlp, mlp_bn, small_convnet

SHAPE = (1, 6, 6)
NUM_CLASSES = 4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def synth_spec():
    return SynthSpec(num_classes=NUM_CLASSES, shape=SHAPE, stds=0.2, separation=0.8, template_resolution=3)


@pytest.fixture
def tiny_data(synth_spec):
    return synth_dataset(synth_spec, 160, seed=0)


@pytest.fixture
def tiny_test(synth_spec):
    return synth_dataset(synth_spec, 80, seed=1)


@pytest.fixture
def mlp_model():
    return build_model(mlp(SHAPE, NUM_CLASSES, hidden=(16,)), seed=0)


@pytest.fixture
def bn_model():
    return build_model(mlp_bn(SHAPE, NUM_CLASSES, hidden=(12,)), seed=0)


@pytest.fixture
def conv_model():
    return build_model(small_convnet(SHAPE, NUM_CLASSES, width=2, hidden=8), seed=0)
