from __future__ import annotations

import copy

import numpy as np
import pytest
from hypothesis import settings

from hycam.backbone import Backbone, BackboneConfig
from hycam.config import RunConfig
from hycam.runs import dataset, pretrain

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")

_CRITERIA: dict[str, str] = {}


@pytest.fixture(scope="session")
def criteria():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(_CRITERIA[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> BackboneConfig:
    base = dict(vocab_size=45, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=24)
    base.update(kw)
    return BackboneConfig(**base)


def clone(model: Backbone) -> Backbone:
    return copy.deepcopy(model)


@pytest.fixture(scope="session")
def desk():
    """The default run config with its dataset and a backbone pretrained once per session."""
    config = RunConfig()
    data = dataset(config)
    model, _ = pretrain(config, data)
    return config, data, model
