"""Deterministic synthetic multi-task corpus.

Five tasks over one small vocabulary, each sample a prompt
``<tag> payload... <sep>`` followed by a target ``answer... <eos>``:

* ``copy``: answer is the payload
* ``rev``:  answer is the payload reversed
* ``sum``:  payload is two 2-digit numbers, answer is their sum mod 100 (two digits)
* ``sort``: answer is the payload letters in ascending order
* ``par``:  answer is ``e``/``o`` for an even/odd count of ``a`` in the payload
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TASKS = ("copy", "rev", "sum", "sort", "par")
TAGS = {t: f"<{t}>" for t in TASKS}
STRUCTURAL = ("<bos>", "<sep>", "<eos>", "<pad>")

PAR_ALPHABET = "abcd"


class GenerationError(ValueError):
    pass


class Vocabulary:
    def __init__(self):
        self.symbols: list[str] = (
            list(string.digits) + list(string.ascii_lowercase) + [TAGS[t] for t in TASKS] + list(STRUCTURAL)
        )
        self.ids = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id = self.ids["<pad>"]
        self.sep_id = self.ids["<sep>"]
        self.eos_id = self.ids["<eos>"]

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, symbols: Iterable[str]) -> list[int]:
        return [self.ids[s] for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[int(i)] for i in ids]

    def tokenize(self, text: str) -> list[int]:
        return self.encode(text.split())

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Sample:
    task: str
    payload: str
    prompt: tuple[int, ...]
    target: tuple[int, ...]

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.target

    def __len__(self) -> int:
        return len(self.prompt) + len(self.target)


def answer(task: str, payload: str) -> str:
    if task == "copy":
        return payload
    if task == "rev":
        return payload[::-1]
    if task == "sum":
        return f"{(int(payload[:2]) + int(payload[2:])) % 100:02d}"
    if task == "sort":
        return "".join(sorted(payload))
    if task == "par":
        return "e" if payload.count("a") % 2 == 0 else "o"
    raise ValueError(f"unknown task {task!r}")


def make_sample(task: str, payload: str) -> Sample:
    prompt = [TAGS[task], *payload, "<sep>"]
    target = [*answer(task, payload), "<eos>"]
    return Sample(task, payload, tuple(VOCAB.encode(prompt)), tuple(VOCAB.encode(target)))


def _draw_payload(task: str, rng: np.random.Generator, lo: int, hi: int) -> str:
    if task == "sum":
        return "".join(str(d) for d in rng.integers(0, 10, size=4))
    n = int(rng.integers(lo, hi + 1))
    alphabet = PAR_ALPHABET if task == "par" else string.ascii_lowercase
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=n))


def payload_space(task: str, lo: int, hi: int) -> int:
    if task == "sum":
        return 10 ** 4
    k = len(PAR_ALPHABET) if task == "par" else 26
    return sum(k ** n for n in range(lo, hi + 1))


def generate(task: str, count: int, seed: int, length_range: tuple[int, int] = (2, 8),
             max_seq_len: int | None = None, unique: bool = True) -> list[Sample]:
    """``count`` samples of ``task`` with distinct payloads, reproducible from ``seed``.

    ``length_range`` bounds the payload length (ignored by ``sum``, whose
    payload is always four digits).
    """
    if task not in TASKS:
        raise GenerationError(f"unknown task {task!r}")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise GenerationError(f"invalid length range {length_range}")
    if max_seq_len is not None:
        longest = (4 if task == "sum" else hi) * 2 + 3
        if longest > max_seq_len:
            raise GenerationError(f"{task}: payloads up to {hi} need {longest} positions > max_seq_len {max_seq_len}")
    if unique and count > payload_space(task, lo, hi):
        raise GenerationError(f"{task}: {count} distinct payloads requested, only {payload_space(task, lo, hi)} exist")
    rng = np.random.default_rng([seed, TASKS.index(task)])
    out: list[Sample] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 50 * count + 1000:
            raise GenerationError(f"{task}: could not draw {count} distinct payloads")
        payload = _draw_payload(task, rng, lo, hi)
        if unique and payload in seen:
            continue
        seen.add(payload)
        out.append(make_sample(task, payload))
    return out


@dataclass
class SplitDataset:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    seed: int
    counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return {"train": self.train, "validation": self.validation, "val": self.validation, "test": self.test}[name]


def split(samples: Sequence[Sample], seed: int, ratios=(7, 2, 1)) -> SplitDataset:
    """Per-task shuffle then 70/20/10 partition; a payload never lands in two splits.

    Samples sharing a payload within a task move together; if that makes the
    partition impossible a :class:`GenerationError` asks for regeneration.
    """
    total = sum(ratios)
    parts: tuple[list[Sample], list[Sample], list[Sample]] = ([], [], [])
    counts = {}
    for t_index, task in enumerate(TASKS):
        items = [s for s in samples if s.task == task]
        if not items:
            continue
        if len(items) < 10:
            raise GenerationError(f"{task}: split needs >= 10 samples, got {len(items)}")
        groups: dict[str, list[Sample]] = {}
        for s in items:
            groups.setdefault(s.payload, []).append(s)
        keys = list(groups)
        order = np.random.default_rng([seed, t_index]).permutation(len(keys))
        n = len(items)
        n_train = round(n * ratios[0] / total)
        n_val = round(n * ratios[1] / total)
        targets = (n_train, n_val, n - n_train - n_val)
        filled = [0, 0, 0]
        which = 0
        for i in order:
            group = groups[keys[i]]
            while which < 2 and filled[which] >= targets[which]:
                which += 1
            parts[which].extend(group)
            filled[which] += len(group)
        if any(abs(f - t) > 1 for f, t in zip(filled, targets)):
            raise GenerationError(f"{task}: duplicate payloads prevent a disjoint {ratios} split; regenerate")
        counts[task] = tuple(filled)
    return SplitDataset(list(parts[0]), list(parts[1]), list(parts[2]), seed, counts)


def build_dataset(count_per_task: int, seed: int, length_range=(2, 8), max_seq_len: int | None = None) -> SplitDataset:
    samples = [s for task in TASKS for s in generate(task, count_per_task, seed, length_range, max_seq_len)]
    return split(samples, seed)


@dataclass
class Batch:
    tokens: np.ndarray      # (B, T) int64, right-padded
    loss_mask: np.ndarray   # (B, T) bool, True on target positions
    token_mask: np.ndarray  # (B, T) bool, True on real tokens
    tasks: list[str]

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask.sum())


def batchify(samples: Sequence[Sample], batch_size: int | None = None, pad_id: int = VOCAB.pad_id,
             max_seq_len: int | None = None) -> list[Batch]:
    size = batch_size or max(len(samples), 1)
    batches = []
    for start in range(0, len(samples), size):
        chunk = samples[start:start + size]
        width = max(len(s) for s in chunk)
        if max_seq_len is not None and width > max_seq_len:
            raise GenerationError(f"sample of length {width} exceeds max_seq_len {max_seq_len}")
        tokens = np.full((len(chunk), width), pad_id, dtype=np.int64)
        loss_mask = np.zeros((len(chunk), width), dtype=bool)
        token_mask = np.zeros((len(chunk), width), dtype=bool)
        for i, s in enumerate(chunk):
            m, n = len(s.prompt), len(s.target)
            tokens[i, :m + n] = s.tokens
            loss_mask[i, m:m + n] = True
            token_mask[i, :m + n] = True
        batches.append(Batch(tokens, loss_mask, token_mask, [s.task for s in chunk]))
    return batches


def dump(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"task": s.task, "prompt": VOCAB.detokenize(s.prompt), "target": VOCAB.detokenize(s.target)}
            fh.write(json.dumps(rec) + "\n")


def load(path: str | Path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            prompt = tuple(VOCAB.tokenize(rec["prompt"]))
            payload = "".join(VOCAB.decode(prompt[1:-1]))
            out.append(Sample(rec["task"], payload, prompt, tuple(VOCAB.tokenize(rec["target"]))))
    return out
