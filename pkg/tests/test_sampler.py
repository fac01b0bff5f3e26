import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cofinetune.errors import ConfigError
from cofinetune.sampler import (IndexStream, MinibatchSampler, SamplerConfig, dump_schedule, steps_per_epoch,
                                visit_counts)


def test_alternating_cycles():
    s = MinibatchSampler(SamplerConfig("alternating", 4, (10, 20, 30), seed=3))
    assert [t.dataset_index for t in s.take(6)] == [0, 1, 2, 0, 1, 2]


def test_weighted_probabilities():
    assert np.allclose(SamplerConfig("weighted", 8, (100, 300)).probabilities(), [0.25, 0.75])


def test_weighted_frequencies_monte_carlo():
    counts = visit_counts(SamplerConfig("weighted", 1, (100, 300), seed=0), 100_000)
    assert abs(counts[0] / 1e5 - 0.25) < 0.01 and abs(counts[1] / 1e5 - 0.75) < 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_weighted_counts_within_three_sigma(seed):
    n = 10_000
    counts = visit_counts(SamplerConfig("weighted", 2, (240_000, 800_000), seed=seed), n)
    p = 240_000 / 1_040_000
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(counts[0] - n * p) < 3 * sigma
    assert counts[0] + counts[1] == n


@pytest.mark.parametrize("sizes, batch, expected", [((100, 300), 32, 13), ((128,), 128, 1), ((1,), 32, 1)])
def test_steps_per_epoch(sizes, batch, expected):
    assert steps_per_epoch(SamplerConfig("weighted", batch, sizes)) == expected


def test_visit_counts_trivial_cases():
    assert visit_counts(SamplerConfig("alternating", 3, (5, 7)), 10) == {0: 5, 1: 5}
    assert visit_counts(SamplerConfig("weighted", 3, (5,)), 17) == {0: 17}
    with pytest.raises(ValueError):
        visit_counts(SamplerConfig("weighted", 3, (5,)), -1)


def test_visit_counts_does_not_advance_sampler():
    s = MinibatchSampler(SamplerConfig("weighted", 3, (5, 9), seed=4))
    s.take(3)
    before = s.step
    visit_counts(s, 50)
    assert s.step == before
    fresh = MinibatchSampler(SamplerConfig("weighted", 3, (5, 9), seed=4))
    fresh.take(3)
    assert s.next_batch() == fresh.next_batch()


@pytest.mark.parametrize("bad", [dict(strategy="random"), dict(batch_size=0), dict(dataset_sizes=()),
                                 dict(dataset_sizes=(3, 0))])
def test_config_validation(bad):
    kw = dict(strategy="weighted", batch_size=2, dataset_sizes=(3, 4))
    kw.update(bad)
    with pytest.raises(ConfigError):
        SamplerConfig(**kw)


configs = st.builds(SamplerConfig,
                    strategy=st.sampled_from(["alternating", "weighted"]),
                    batch_size=st.integers(1, 9),
                    dataset_sizes=st.lists(st.integers(1, 25), min_size=1, max_size=4).map(tuple),
                    seed=st.integers(0, 2**31))


@given(configs, st.integers(0, 60))
@settings(max_examples=80, deadline=None)
def test_determinism_and_ticket_shape(cfg, n):
    a = MinibatchSampler(cfg).take(n)
    b = MinibatchSampler(cfg).take(n)
    assert a == b
    for i, t in enumerate(a):
        assert t.step == i
        assert 0 <= t.dataset_index < cfg.num_datasets
        assert len(t.example_indices) == cfg.batch_size
        assert all(0 <= j < cfg.dataset_sizes[t.dataset_index] for j in t.example_indices)


@given(st.lists(st.integers(1, 20), min_size=1, max_size=5), st.integers(1, 6), st.integers(1, 8),
       st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_alternating_windows_are_balanced(sizes, batch, k, seed):
    cfg = SamplerConfig("alternating", batch, tuple(sizes), seed)
    s = MinibatchSampler(cfg)
    s.take(seed % 7)  # arbitrary offset
    counts = visit_counts(s, k * cfg.num_datasets)
    assert set(counts.values()) == {k}


@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 10_000), st.integers(1, 5))
@settings(max_examples=100, deadline=None)
def test_index_stream_coverage(size, batch, seed, epochs):
    stream = IndexStream(size, seed, 0)
    first = [i for _ in range(math.ceil(size / batch)) for i in stream.take(batch)]
    assert set(first) == set(range(size))
    # the concatenated stream is a sequence of permutations
    stream = IndexStream(size, seed, 0)
    flat = [i for _ in range(math.ceil(epochs * size / batch)) for i in stream.take(batch)]
    for e in range(len(flat) // size):
        assert sorted(flat[e * size:(e + 1) * size]) == list(range(size))


def test_single_dataset_selection_consumes_no_rng():
    a = MinibatchSampler(SamplerConfig("weighted", 4, (10,), seed=9)).take(5)
    b = MinibatchSampler(SamplerConfig("alternating", 4, (10,), seed=9)).take(5)
    assert a == b


def test_dump_schedule(tmp_path):
    cfg = SamplerConfig("weighted", 3, (5, 9), seed=1)
    path = tmp_path / "sched.csv"
    dump_schedule(cfg, 7, path, ["det", "cls"])
    rows = list(csv.DictReader(path.open()))
    tickets = MinibatchSampler(cfg).take(7)
    assert len(rows) == 7
    for r, t in zip(rows, tickets):
        assert int(r["step"]) == t.step and int(r["dataset_index"]) == t.dataset_index
        assert r["dataset"] == ["det", "cls"][t.dataset_index]
        assert tuple(int(x) for x in r["example_indices"].split()) == t.example_indices
