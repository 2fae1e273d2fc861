"""Held-out metrics and the single/multi-thread decoding benchmark."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .network import (
    ARCH_ENCDEC,
    EOS,
    Dataset,
    Network,
    ensemble_decode,
    forward,
    greedy_decode,
)
from .shrink import divergence


def _grouped(items, key):
    groups: dict = {}
    for item in items:
        groups.setdefault(key(item), []).append(item)
    return [groups[k] for k in sorted(groups)]


def evaluate_sequences(nets: list[Network], data: Dataset, max_len: int | None = None) -> dict:
    """Exact-sequence accuracy and teacher-forced mean NLL.

    With several networks the ensemble (arithmetic probability average)
    is evaluated; with one, the single model.
    """
    if max_len is None:
        max_len = max(len(t) for _, t in data.items) + 2
    correct = 0
    for src, tgt in data.items:
        if len(nets) == 1:
            pred, _ = greedy_decode(nets[0], src, max_len)
        else:
            pred, _ = ensemble_decode(nets, src, max_len)
        correct += int(pred == list(tgt))

    nll_total = 0.0
    tokens = 0
    for group in _grouped(data.items, key=lambda it: (len(it[0]), len(it[1]))):
        src = np.array([it[0] for it in group], dtype=np.int64)
        tgt = np.array([list(it[1]) + [EOS] for it in group], dtype=np.int64)
        probs = np.mean([forward(net, src, targets=tgt)[0] for net in nets], axis=0)
        picked = np.take_along_axis(probs, tgt.T[..., None], axis=-1)
        nll_total += float(-np.sum(np.log(picked)))
        tokens += tgt.size
    return {
        "sequence_accuracy": correct / len(data.items),
        "mean_nll": nll_total / tokens,
    }


def evaluate_classifier(nets: list[Network], data: Dataset) -> dict:
    correct = 0
    nll_total = 0.0
    n = 0
    for group in _grouped(data.items, key=lambda it: np.shape(it[0])):
        x = np.array([it[0] for it in group])
        y = np.array([it[1] for it in group], dtype=np.int64)
        probs = np.mean([forward(net, x)[0] for net in nets], axis=0)
        correct += int(np.sum(np.argmax(probs, axis=-1) == y))
        nll_total += float(-np.sum(np.log(np.take_along_axis(probs, y[:, None], axis=-1))))
        n += len(y)
    return {"accuracy": correct / n, "mean_nll": nll_total / n}


def evaluate(nets: list[Network], data: Dataset, max_len: int | None = None) -> dict:
    if nets[0].arch == ARCH_ENCDEC:
        return evaluate_sequences(nets, data, max_len)
    return evaluate_classifier(nets, data)


def agreement_rate(reference: list[Network], candidate: Network, sources, max_len: int = 32) -> float:
    """Per-step argmax agreement along the reference's decoded paths."""
    return divergence(reference, candidate, sources, max_len=max_len).argmax_agreement


@dataclass
class BenchResult:
    tokens_per_second: float
    wall_time: float
    repetitions: int
    size_factor: float = 1.0
    threads: int = 1
    tokens: int = 0
    per_rep_seconds: list[float] = field(default_factory=list)


def benchmark(
    net: Network,
    sources: list,
    reps: int = 5,
    threads: int = 1,
    max_len: int = 20,
    size_factor: float = 1.0,
) -> BenchResult:
    """Median decoding throughput in emitted tokens per second.

    Every repetition decodes all sources to exactly max_len steps
    (early-stop disabled) so runs are comparable across models; one
    unmeasured warm-up repetition precedes the timed ones.  With
    threads > 1, worker threads decode disjoint source shards against
    the shared immutable network.
    """
    if reps < 3:
        raise ValueError("benchmark needs at least 3 repetitions")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    shards = [list(sources[i::threads]) for i in range(threads)]

    def run_shard(shard):
        for src in shard:
            greedy_decode(net, src, max_len, stop_on_eos=False)

    def run_once() -> float:
        start = time.perf_counter()
        if threads == 1:
            run_shard(shards[0])
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run_shard, shards))
        return time.perf_counter() - start

    run_once()  # warm-up
    times = [run_once() for _ in range(reps)]
    tokens = len(sources) * max_len
    median = float(np.median(times))
    return BenchResult(
        tokens_per_second=tokens / median,
        wall_time=median,
        repetitions=reps,
        size_factor=size_factor,
        threads=threads,
        tokens=tokens,
        per_rep_seconds=times,
    )
