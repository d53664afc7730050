"""Composite objective, AdamW over trainable parameters, cosine schedule, early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import HyCamAdapters, load_balance_loss
from .autodiff import Parameter, Tensor
from .backbone import Backbone, ConfigError, forward
from .taskgen import Batch, Sample, batchify

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    lambda_balance: float = 0.1
    max_steps: int = 400
    batch_size: int = 32
    warmup_steps: int | None = None
    early_stop_patience: int = 5
    eval_interval: int = 50
    seed: int = 0
    precision: str = "fp32"
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if not self.lambda_balance >= 0:
            raise ConfigError("train.lambda_balance must be >= 0")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("train.eval_interval must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("train.early_stop_patience must be >= 1")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("train.warmup_steps must be >= 0")
        ad.dtype_for(self.precision)

    @property
    def warmup(self) -> int:
        return self.warmup_steps if self.warmup_steps is not None else int(round(0.05 * self.max_steps))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    task_loss: float
    balance_loss: float
    total: float
    step: int
    lr: float = 0.0


class AdamW:
    """Decoupled-weight-decay Adam; holds state only for trainable parameters."""

    def __init__(self, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params if p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    @property
    def state_names(self) -> set[str]:
        return set(self.m)

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None or not p.trainable:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w = p.tensor.data
            w *= w.dtype.type(1.0 - lr * self.weight_decay)
            w -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(w.dtype)

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)


def cosine_lr(step: int, warmup_steps: int, max_steps: int, base_lr: float) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if max_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (max_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_index: int
    best_value: float


def early_stop(history: Sequence[float], patience: int, min_delta: float = 1e-6) -> StopDecision:
    """Stop once the best value has not improved by more than ``min_delta`` for ``patience`` evaluations."""
    if not history:
        raise ValueError("early_stop needs a nonempty history")
    best, best_i, since = history[0], 0, 0
    for i, v in enumerate(history[1:], start=1):
        if v < best - min_delta:
            best, best_i, since = v, i, 0
        else:
            since += 1
    return StopDecision(since >= patience, best_i, best)


# --------------------------------------------------------------------------- #
# losses


def next_token_loss(logits: Tensor, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """Cross-entropy where logits at position t score token t+1, counted where ``mask[t+1]``."""
    return ad.cross_entropy(logits[:, :-1], tokens[:, 1:], mask[:, 1:])


def task_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Mean per-token NLL over target positions only."""
    if not batch.loss_mask[:, 1:].any():
        raise ad.EmptyLossError("batch has no target tokens")
    return next_token_loss(logits, batch.tokens, batch.loss_mask)


def lm_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Causal-LM loss on every real token after the first (backbone pretraining)."""
    return next_token_loss(logits, batch.tokens, batch.token_mask)


def total_loss(task: Tensor, balance: Tensor | None, lambda_balance: float) -> Tensor:
    if balance is None:
        return task
    return task + ad.scale(balance, lambda_balance)


def mean_balance_loss(routing, token_mask) -> Tensor | None:
    terms = [load_balance_loss(r, token_mask) for r in routing if r is not None]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return ad.scale(out, 1.0 / len(terms))


def compute_losses(model: Backbone, adapters: HyCamAdapters | None, batch: Batch, lambda_balance: float,
                   seed=None, objective: str = "task"):
    """Forward pass and ``(task, balance, total)`` tensors."""
    out = forward(batch.tokens, model, adapters, seed=seed)
    task = task_loss(out.logits, batch) if objective == "task" else lm_loss(out.logits, batch)
    balance = mean_balance_loss(out.routing, batch.token_mask) if adapters is not None else None
    return task, balance, total_loss(task, balance, lambda_balance)


def trainable_parameters(model: Backbone, adapters: HyCamAdapters | None) -> list[Parameter]:
    params = [p for p in model.parameters() if p.trainable]
    if adapters is not None:
        params += [p for p in adapters.parameters() if p.trainable]
    return params


def train_step(model: Backbone, adapters: HyCamAdapters | None, batch: Batch, optimizer: AdamW,
               config: TrainConfig, step: int, objective: str = "task", stochastic: bool = True) -> LossBreakdown:
    lr = cosine_lr(step, config.warmup, config.max_steps, config.learning_rate)
    seed = (config.seed, 1, step) if stochastic else None
    task, balance, total = compute_losses(model, adapters, batch, config.lambda_balance, seed, objective)
    tv = task.item()
    bv = balance.item() if balance is not None else 0.0
    totv = total.item()
    if not all(np.isfinite([tv, bv, totv])):
        raise NumericalError(f"non-finite loss at step {step}: task={tv} balance={bv}")
    ad.backward(total)
    optimizer.step(lr)
    optimizer.zero_grad()
    return LossBreakdown(tv, bv, totv, step, lr)


# --------------------------------------------------------------------------- #
# loops


class BatchSampler:
    """Each batch entry picks a task uniformly, then a sample of that task."""

    def __init__(self, samples: Sequence[Sample], batch_size: int, seed: int, max_seq_len: int | None = None):
        self.by_task: dict[str, list[Sample]] = {}
        for s in samples:
            self.by_task.setdefault(s.task, []).append(s)
        self.tasks = sorted(self.by_task)
        self.batch_size = batch_size
        self.max_seq_len = max_seq_len
        self.rng = np.random.default_rng([seed, 2])

    def __call__(self) -> Batch:
        picks = []
        task_idx = self.rng.integers(0, len(self.tasks), size=self.batch_size)
        for ti in task_idx:
            pool = self.by_task[self.tasks[ti]]
            picks.append(pool[int(self.rng.integers(0, len(pool)))])
        return batchify(picks, max_seq_len=self.max_seq_len)[0]


class LossLog:
    """Append-only CSV of per-step losses."""

    COLUMNS = ("step", "lr", "task_loss", "balance_loss", "total_loss", "val_loss")

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, row: LossBreakdown, val_loss: float | None = None) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row.step, repr(row.lr), repr(row.task_loss), repr(row.balance_loss),
                                     repr(row.total), "" if val_loss is None else repr(val_loss)])


def evaluate_loss(model: Backbone, adapters: HyCamAdapters | None, samples: Sequence[Sample],
                  lambda_balance: float, batch_size: int = 256, objective: str = "task") -> float:
    """Token-weighted deterministic total loss over ``samples``."""
    num = den = 0.0
    with ad.no_grad():
        for batch in batchify(list(samples), batch_size):
            task, balance, _ = compute_losses(model, adapters, batch, lambda_balance, None, objective)
            mask = batch.loss_mask if objective == "task" else batch.token_mask
            n = float(mask[:, 1:].sum())
            b = balance.item() if balance is not None else 0.0
            num += (task.item() + lambda_balance * b) * n
            den += n
    if den == 0:
        raise ad.EmptyLossError("evaluation split has no scored tokens")
    return num / den


@dataclass
class FitResult:
    history: list[LossBreakdown]
    val_history: list[tuple[int, float]]
    best_step: int
    best_val: float
    stopped_early: bool


def fit(model: Backbone, adapters: HyCamAdapters | None, train: Sequence[Sample], validation: Sequence[Sample],
        config: TrainConfig, objective: str = "task", log_path: str | Path | None = None,
        on_step: Callable[[LossBreakdown], None] | None = None, restore_best: bool = True) -> FitResult:
    """Train the trainable parameters of ``model``/``adapters`` with early stopping.

    Validation loss is measured at step 0 and every ``eval_interval`` steps;
    the parameters with the best validation loss are restored at the end.
    """
    params = trainable_parameters(model, adapters)
    if not params:
        raise ValueError("nothing to train: no trainable parameters")
    optimizer = AdamW(params, weight_decay=config.weight_decay)
    sampler = BatchSampler(train, config.batch_size, config.seed, model.config.max_seq_len)
    loss_log = LossLog(log_path)
    history: list[LossBreakdown] = []
    val_history: list[tuple[int, float]] = []
    best_state = {p.name: p.data.copy() for p in params}

    def validate(step: int) -> bool:
        nonlocal best_state
        val = evaluate_loss(model, adapters, validation, config.lambda_balance, objective=objective)
        val_history.append((step, val))
        decision = early_stop([v for _, v in val_history], config.early_stop_patience)
        if decision.best_index == len(val_history) - 1:
            best_state = {p.name: p.data.copy() for p in params}
        log.info("step %d val_loss %.5f", step, val)
        return decision.stop

    stopped = validate(0) if validation else False
    for step in range(config.max_steps):
        row = train_step(model, adapters, sampler(), optimizer, config, step, objective)
        history.append(row)
        val = None
        done = step + 1
        if validation and (done % config.eval_interval == 0 or done == config.max_steps):
            stopped = validate(done)
            val = val_history[-1][1]
        loss_log.append(row, val)
        if on_step is not None:
            on_step(row)
        if stopped:
            break
    if val_history:
        decision = early_stop([v for _, v in val_history], config.early_stop_patience)
        best_step, best_val = val_history[decision.best_index]
    else:
        best_step, best_val = len(history), float("nan")
    if restore_best and val_history:
        for p in params:
            p.tensor.data[...] = best_state[p.name]
    return FitResult(history, val_history, best_step, best_val, stopped)
