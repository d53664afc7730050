"""End-to-end routines shared by the CLI and the experiment tests."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

from .adapters import HyCamAdapters
from .backbone import Backbone, freeze
from .config import RunConfig
from .taskgen import VOCAB, Sample, SplitDataset, build_dataset
from .training import FitResult, fit

log = logging.getLogger(__name__)


def dataset(config: RunConfig) -> SplitDataset:
    d = config.data
    return build_dataset(d.count_per_task, d.seed, d.length_range, config.backbone.max_seq_len)


def untagged(samples: list[Sample]) -> list[Sample]:
    """Replace each task tag with ``<bos>`` so the task is not named in the prompt."""
    bos = VOCAB.ids["<bos>"]
    return [dataclasses.replace(s, prompt=(bos,) + s.prompt[1:]) for s in samples]


def pretrain(config: RunConfig, data: SplitDataset | None = None, log_path: str | Path | None = None
             ) -> tuple[Backbone, FitResult]:
    """Train a fresh backbone with the causal-LM objective on the pooled corpus."""
    data = data or dataset(config)
    pc = config.pretrain
    train, val = data.train, data.validation
    if not pc.task_tags:
        train, val = untagged(train), untagged(val)
    model = Backbone(config.backbone, seed=pc.seed, precision=pc.precision)
    result = fit(model, None, train, val, pc.train_config(), objective="lm", log_path=log_path, restore_best=False)
    return model, result


def adapt(config: RunConfig, model: Backbone, data: SplitDataset | None = None,
          log_path: str | Path | None = None) -> tuple[HyCamAdapters, FitResult]:
    """Freeze ``model``, attach fresh adapters and train them with early stopping."""
    data = data or dataset(config)
    freeze(model)
    tc = config.adapt_train
    adapters = HyCamAdapters(config.backbone.n_layers, config.backbone.d_model, config.adapter,
                             seed=tc.seed, precision=model.precision)
    result = fit(model, adapters, data.train, data.validation, tc, objective="task", log_path=log_path)
    log.info("adapted %s: best step %d, val %.5f", config.adapter.variant, result.best_step, result.best_val)
    return adapters, result
