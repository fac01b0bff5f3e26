"""Single-dataset minibatch scheduling for co-finetuning.

Every batch comes from exactly one dataset. ``alternating`` cycles through
datasets round-robin; ``weighted`` draws the dataset i.i.d. per step with
probability proportional to its size.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError

ALTERNATING = "alternating"
WEIGHTED = "weighted"
STRATEGIES = (ALTERNATING, WEIGHTED)

# stream tags for seed derivation; changing them changes every schedule
_SELECT_STREAM = 0
_INDEX_STREAM = 1


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str
    batch_size: int
    dataset_sizes: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dataset_sizes", tuple(int(s) for s in self.dataset_sizes))
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}", "sampler.strategy")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "sampler.batch_size")
        if len(self.dataset_sizes) < 1:
            raise ConfigError("need at least one dataset", "sampler.dataset_sizes")
        if any(s < 1 for s in self.dataset_sizes):
            raise ConfigError("dataset sizes must be positive", "sampler.dataset_sizes")

    @property
    def num_datasets(self):
        return len(self.dataset_sizes)

    def probabilities(self) -> np.ndarray:
        if self.strategy == ALTERNATING:
            return np.full(self.num_datasets, 1.0 / self.num_datasets)
        sizes = np.asarray(self.dataset_sizes, dtype=np.float64)
        return sizes / sizes.sum()


@dataclass(frozen=True)
class BatchTicket:
    step: int
    dataset_index: int
    example_indices: tuple[int, ...]


class IndexStream:
    """Without-replacement shuffles of ``range(size)``, reshuffled on exhaustion.

    A batch that straddles the end of a shuffle is completed from the next
    one, so every batch has the same length.
    """

    def __init__(self, size: int, seed: int, dataset_index: int):
        self.size = size
        self._rng = np.random.default_rng([seed, _INDEX_STREAM, dataset_index])
        self._perm = self._rng.permutation(size)
        self._pos = 0

    def take(self, n: int) -> tuple[int, ...]:
        out = []
        while len(out) < n:
            if self._pos == self.size:
                self._perm = self._rng.permutation(self.size)
                self._pos = 0
            k = min(n - len(out), self.size - self._pos)
            out.extend(int(i) for i in self._perm[self._pos:self._pos + k])
            self._pos += k
        return tuple(out)


class MinibatchSampler:
    """Stateful schedule; iterate it or call :meth:`next_batch`."""

    def __init__(self, config: SamplerConfig):
        self.config = config
        self.step = 0
        self._select_rng = np.random.default_rng([config.seed, _SELECT_STREAM])
        self._cdf = np.cumsum(config.probabilities())
        self._streams = [IndexStream(n, config.seed, i) for i, n in enumerate(config.dataset_sizes)]

    def _select(self) -> int:
        cfg = self.config
        if cfg.num_datasets == 1:
            return 0
        if cfg.strategy == ALTERNATING:
            return self.step % cfg.num_datasets
        u = self._select_rng.random()
        return min(int(np.searchsorted(self._cdf, u, side="right")), cfg.num_datasets - 1)

    def next_batch(self) -> BatchTicket:
        i = self._select()
        ticket = BatchTicket(self.step, i, self._streams[i].take(self.config.batch_size))
        self.step += 1
        return ticket

    def __iter__(self):
        return self

    def __next__(self) -> BatchTicket:
        return self.next_batch()

    def take(self, n: int) -> list[BatchTicket]:
        return [self.next_batch() for _ in range(n)]


def steps_per_epoch(config: SamplerConfig) -> int:
    """One epoch covers the summed size of every dataset."""
    return math.ceil(sum(config.dataset_sizes) / config.batch_size)


def visit_counts(sampler: MinibatchSampler | SamplerConfig, num_steps: int) -> dict[int, int]:
    """Replay ``num_steps`` further steps on a copy; the argument is not advanced."""
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    if isinstance(sampler, SamplerConfig):
        replay = MinibatchSampler(sampler)
    else:
        replay = copy.deepcopy(sampler)
    counts = {i: 0 for i in range(replay.config.num_datasets)}
    for _ in range(num_steps):
        counts[replay.next_batch().dataset_index] += 1
    return counts


def dump_schedule(config: SamplerConfig, num_tickets: int, path, dataset_names: Sequence[str] | None = None) -> None:
    """Write the first ``num_tickets`` tickets as ``step,dataset_index,dataset,example_indices``."""
    names = list(dataset_names) if dataset_names else [str(i) for i in range(config.num_datasets)]
    sampler = MinibatchSampler(config)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "dataset_index", "dataset", "example_indices"])
        for t in sampler.take(num_tickets):
            writer.writerow([t.step, t.dataset_index, names[t.dataset_index], " ".join(map(str, t.example_indices))])
