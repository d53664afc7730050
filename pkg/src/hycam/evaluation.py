"""Perplexity/accuracy reports, routing utilisation statistics and heatmap CSV exports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import HyCamAdapters
from .backbone import Backbone, forward
from .taskgen import TASKS, Sample, batchify


@dataclass
class EvalReport:
    ppl: float
    accuracy: float
    n_samples: int
    n_tokens: int
    per_task_ppl: dict[str, float] = field(default_factory=dict)
    per_task_accuracy: dict[str, float] = field(default_factory=dict)
    step: int | None = None

    def to_text(self) -> str:
        """Flat ``key=value`` lines, one per metric."""
        lines = [f"ppl={self.ppl!r}", f"accuracy={self.accuracy!r}", f"n_samples={self.n_samples}",
                 f"n_tokens={self.n_tokens}", f"step={'' if self.step is None else self.step}"]
        for t in self.per_task_ppl:
            lines.append(f"ppl.{t}={self.per_task_ppl[t]!r}")
            lines.append(f"accuracy.{t}={self.per_task_accuracy[t]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> EvalReport:
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        rep = cls(float(kv["ppl"]), float(kv["accuracy"]), int(kv["n_samples"]), int(kv["n_tokens"]),
                  step=int(kv["step"]) if kv.get("step") else None)
        for k, v in kv.items():
            if k.startswith("ppl."):
                rep.per_task_ppl[k[4:]] = float(v)
            elif k.startswith("accuracy."):
                rep.per_task_accuracy[k[9:]] = float(v)
        return rep


def _target_scores(logits: np.ndarray, tokens: np.ndarray, mask: np.ndarray):
    """Per-position NLL and argmax hits where ``mask[:, 1:]`` is set."""
    z = logits[:, :-1]
    tgt = tokens[:, 1:]
    m = mask[:, 1:]
    zmax = z.max(axis=-1, keepdims=True)
    lse = (zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)))[..., 0]
    nll = lse - np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    hit = z.argmax(axis=-1) == tgt
    return nll, hit, m


def perplexity(model: Backbone, adapters: HyCamAdapters | None, samples: Sequence[Sample],
               batch_size: int = 256, step: int | None = None) -> EvalReport:
    """exp(mean target-token NLL) with deterministic routing, overall and per task."""
    if not samples:
        raise ValueError("perplexity: empty split")
    nll_sum: dict[str, float] = {}
    hits: dict[str, int] = {}
    count: dict[str, int] = {}
    with ad.no_grad():
        for batch in batchify(list(samples), batch_size):
            logits = forward(batch.tokens, model, adapters).logits.data.astype(np.float64)
            nll, hit, m = _target_scores(logits, batch.tokens, batch.loss_mask)
            for i, task in enumerate(batch.tasks):
                sel = m[i]
                nll_sum[task] = nll_sum.get(task, 0.0) + float(nll[i][sel].sum())
                hits[task] = hits.get(task, 0) + int(hit[i][sel].sum())
                count[task] = count.get(task, 0) + int(sel.sum())
    tasks = [t for t in TASKS if t in count] + sorted(t for t in count if t not in TASKS)
    total = sum(count.values())
    return EvalReport(
        ppl=math.exp(sum(nll_sum.values()) / total),
        accuracy=sum(hits.values()) / total,
        n_samples=len(samples),
        n_tokens=total,
        per_task_ppl={t: math.exp(nll_sum[t] / count[t]) for t in tasks},
        per_task_accuracy={t: hits[t] / count[t] for t in tasks},
        step=step,
    )


@dataclass
class RoutingStats:
    # per_task[task][layer] -> N_s mean routing weights
    per_task: dict[str, np.ndarray]
    overall: np.ndarray          # (n_layers, N_s) mean over all tokens
    entropy: np.ndarray          # (n_layers,) mean per-token routing entropy
    n_tokens: int

    @property
    def collapse(self) -> float:
        """Largest mean weight any expert receives in any layer."""
        return float(self.overall.max())

    @property
    def n_layers(self) -> int:
        return self.overall.shape[0]


def routing_stats(model: Backbone, adapters: HyCamAdapters, samples: Sequence[Sample],
                  batch_size: int = 256) -> RoutingStats:
    """Mean noise-free router softmax per layer, per task and overall, over real tokens."""
    if not samples:
        raise ValueError("routing_stats: empty split")
    if not adapters.config.routed:
        raise ValueError(f"variant {adapters.config.variant!r} has no router")
    L = len(adapters.layers)
    ns = adapters.config.n_specialists
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    ent = np.zeros(L)
    n_tok = 0
    with ad.no_grad():
        for batch in batchify(list(samples), batch_size):
            out = forward(batch.tokens, model, adapters)
            probs = np.stack([r.softmax_plain.data.astype(np.float64) for r in out.routing])  # (L, B, T, N)
            m = batch.token_mask
            h = -(probs * np.log(np.clip(probs, 1e-300, None))).sum(axis=-1)
            ent += (h * m).sum(axis=(1, 2))
            n_tok += int(m.sum())
            for i, task in enumerate(batch.tasks):
                sel = m[i]
                sums[task] = sums.get(task, np.zeros((L, ns))) + probs[:, i][:, sel].sum(axis=1)
                counts[task] = counts.get(task, 0) + int(sel.sum())
    tasks = [t for t in TASKS if t in counts] + sorted(t for t in counts if t not in TASKS)
    per_task = {t: sums[t] / counts[t] for t in tasks}
    overall = sum(sums.values()) / n_tok
    return RoutingStats(per_task, overall, ent / n_tok, n_tok)


@dataclass
class ModulationSnapshot:
    sample_id: int
    layer: int
    position: int
    token: int
    vector: np.ndarray


def modulation_snapshots(model: Backbone, adapters: HyCamAdapters, sample: Sample, sample_id: int = 0
                         ) -> list[ModulationSnapshot]:
    """Fused modulation vector for every (layer, token) of one sample."""
    tokens = np.asarray(sample.tokens)
    with ad.no_grad():
        out = forward(tokens, model, adapters)
    snaps = []
    for layer, mod in enumerate(out.modulation):
        vectors = mod.data.reshape(len(tokens), -1)
        for pos in range(len(tokens)):
            snaps.append(ModulationSnapshot(sample_id, layer, pos, int(tokens[pos]),
                                            vectors[pos].astype(np.float64).copy()))
    return snaps


def export_heatmap(data: Sequence[ModulationSnapshot] | RoutingStats, path: str | Path) -> Path:
    """CSV with a header row; floats written with shortest round-trip repr."""
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"cannot write {path}: directory does not exist")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(data, RoutingStats):
            ns = data.overall.shape[1]
            w.writerow(["layer", "task"] + [f"w{k}" for k in range(ns)] + ["entropy"])
            for layer in range(data.n_layers):
                for task, arr in data.per_task.items():
                    w.writerow([layer, task] + [repr(float(x)) for x in arr[layer]] + [repr(float(data.entropy[layer]))])
                w.writerow([layer, "all"] + [repr(float(x)) for x in data.overall[layer]]
                           + [repr(float(data.entropy[layer]))])
        else:
            snaps = list(data)
            d = len(snaps[0].vector) if snaps else 0
            w.writerow(["sample_id", "layer", "position", "token"] + [f"m{j}" for j in range(d)])
            for s in snaps:
                w.writerow([s.sample_id, s.layer, s.position, s.token] + [repr(float(x)) for x in s.vector])
    return path


def read_heatmap(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
