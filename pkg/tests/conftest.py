"""Shared fixtures: small synthetic corpora and pre-built open-set splits."""

import numpy as np
import pytest

from osrkit.dataio import RawDataset, make_open_set_split
from osrkit.synthetic import render_digits


@pytest.fixture(scope="session")
def tiny_datasets():
    """120 train / 60 test images, 10 classes; enough to drive the full
    pipeline in a couple of seconds."""
    images, labels = render_digits(12, seed=501)
    test_images, test_labels = render_digits(6, seed=502)
    return (RawDataset(images, labels, "synth"),
            RawDataset(test_images, test_labels, "synth-test"))


@pytest.fixture(scope="session")
def tiny_split(tiny_datasets):
    ds_train, ds_test = tiny_datasets
    return make_open_set_split(ds_train, ds_test, num_known=6, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
