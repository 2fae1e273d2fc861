"""Toy-task generation, AdaGrad training and the data-bound shrink loop.

Training uses AdaGrad with per-component step clipping: every applied
step is lr * g / sqrt(G + eps) clipped into [-step_clip, +step_clip],
with G the running sum of squared gradients.  The defaults mirror the
fine-tuning configuration used while pruning (lr 1e-4, clip 0.05);
training fresh models from scratch wants a larger learning rate.

The data-bound loop alternates training intervals (during which neuron
activities of the target layers are recorded) with pruning events that
remove a fixed number of neurons per layer, compensating each removal
with a least-squares mix of the remaining activity columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grad import Grads, loss_and_grads, loss_only
from .network import (
    ARCH_ENCDEC,
    ARCH_FEEDFORWARD,
    ARCH_SEQ_CLASSIFIER,
    EOS,
    Dataset,
    Network,
)
from .shrink import (
    METHOD_DATABOUND,
    ActivityMatrix,
    RemovalRecord,
    ShrinkReport,
    databound_lambda,
    databound_select,
    remove_neuron,
)
from .unfold import LayerRole, layer_role, size_factor

TASK_REVERSE = "reverse"
TASK_COPY = "copy"
TASK_PARITY = "parity"
TASKS = (TASK_REVERSE, TASK_COPY, TASK_PARITY)

MODE_BOTH = "both"
MODE_LINEAR = "linear"
MODE_SGD = "sgd"
MODE_NONE = "none"
COMPENSATION_MODES = (MODE_BOTH, MODE_LINEAR, MODE_SGD, MODE_NONE)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.0001
    step_clip: float = 0.05
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0
    adagrad_epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.step_clip <= 0:
            raise ValueError("step_clip must be > 0")


@dataclass
class PruneSchedule:
    target_sizes: dict[int, int]
    remove_per_event: int = 40
    interval_iterations: int = 450
    activity_sample_cap: int = 50_000
    tail_iterations: int | None = None  # None: 2x interval_iterations

    def __post_init__(self):
        if self.remove_per_event < 1:
            raise ValueError("remove_per_event must be >= 1")
        if self.interval_iterations < 1:
            raise ValueError("interval_iterations must be >= 1")


class AdaGradState:
    """Per-parameter accumulated squared gradients (never decreasing)."""

    def __init__(self):
        self.accum: dict = {}

    def apply(self, net: Network, grads: Grads, cfg: TrainConfig) -> float:
        """Update net in place; returns the largest applied step magnitude."""
        max_step = 0.0
        for c in net.connections:
            g = grads.get(c.key())
            if g is None:
                continue
            acc = self.accum.get(c.key())
            acc = g * g if acc is None else acc + g * g
            self.accum[c.key()] = acc
            step = cfg.learning_rate * g / np.sqrt(acc + cfg.adagrad_epsilon)
            np.clip(step, -cfg.step_clip, cfg.step_clip, out=step)
            c.weights -= step
            if step.size:
                max_step = max(max_step, float(np.max(np.abs(step))))
        return max_step

    def drop_neuron(self, net: Network, d: int, j: int) -> None:
        """Mirror a neuron removal so accumulators keep matching shapes."""
        for key, acc in list(self.accum.items()):
            src, dst, _ = key
            if dst == d:
                acc = np.delete(acc, j, axis=1)
            if src == d:
                acc = np.delete(acc, j, axis=0)
            self.accum[key] = acc


# -- toy tasks ---------------------------------------------------------------


def make_task(task: str, vocab_size: int, length_range: tuple[int, int], n: int, seed: int) -> Dataset:
    """Deterministic toy dataset.

    reverse/copy items are (source tokens, target tokens) over symbols
    1..vocab_size-1 (token 0 is the end-of-sequence marker, appended by
    the training loop rather than stored).  parity items are (bit
    vector, class) with the vector length fixed at the range maximum.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = length_range
    if lo > hi or lo < 1:
        raise ValueError(f"empty length range {length_range}")
    rng = np.random.default_rng(seed)
    items = []
    if task == TASK_PARITY:
        for _ in range(n):
            bits = rng.integers(0, 2, size=hi)
            items.append((bits.astype(np.float64), int(bits.sum() % 2)))
        return Dataset(items, task, vocab_size=2)
    if vocab_size < 2:
        raise ValueError("sequence tasks need vocab_size >= 2")
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        seq = rng.integers(1, vocab_size, size=length).tolist()
        target = seq[::-1] if task == TASK_REVERSE else list(seq)
        items.append((seq, target))
    return Dataset(items, task, vocab_size)


def _bucket_key(net_arch: str, item) -> tuple:
    if net_arch == ARCH_ENCDEC:
        return (len(item[0]), len(item[1]))
    if net_arch == ARCH_SEQ_CLASSIFIER:
        return (len(item[0]),)
    return ()


def _make_batch(net: Network, items: list) -> tuple:
    if net.arch == ARCH_ENCDEC:
        src = np.array([it[0] for it in items], dtype=np.int64)
        tgt = np.array([list(it[1]) + [EOS] for it in items], dtype=np.int64)
        return src, tgt
    if net.arch == ARCH_SEQ_CLASSIFIER:
        toks = np.array([it[0] for it in items], dtype=np.int64)
        y = np.array([it[1] for it in items], dtype=np.int64)
        return toks, y
    x = np.array([it[0] for it in items], dtype=np.float64)
    y = np.array([it[1] for it in items], dtype=np.int64)
    return x, y


class _BatchSampler:
    """Groups same-shape items so batches need no padding; deterministic."""

    def __init__(self, net: Network, data: Dataset, batch_size: int, rng: np.random.Generator):
        buckets: dict[tuple, list[int]] = {}
        for idx, item in enumerate(data.items):
            buckets.setdefault(_bucket_key(net.arch, item), []).append(idx)
        self.keys = sorted(buckets)
        self.buckets = [np.array(buckets[k]) for k in self.keys]
        self.weights = np.array([len(b) for b in self.buckets], dtype=np.float64)
        self.weights /= self.weights.sum()
        self.items = data.items
        self.batch_size = batch_size
        self.net = net
        self.rng = rng

    def next_batch(self) -> tuple:
        b = self.rng.choice(len(self.buckets), p=self.weights) if len(self.buckets) > 1 else 0
        idx = self.rng.choice(self.buckets[b], size=self.batch_size, replace=True)
        return _make_batch(self.net, [self.items[i] for i in idx])


def _run_iterations(
    net: Network,
    sampler: _BatchSampler,
    cfg: TrainConfig,
    iterations: int,
    update: bool,
    state: AdaGradState,
    recorder=None,
    curve: list | None = None,
    start_iteration: int = 0,
) -> int:
    it = start_iteration
    for _ in range(iterations):
        batch = sampler.next_batch()
        if update:
            loss, grads = loss_and_grads(net, batch, recorder=recorder)
        else:
            loss = loss_only(net, batch) if recorder is None else _recorded_loss(net, batch, recorder)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {it + 1}")
        if update:
            state.apply(net, grads, cfg)
        it += 1
        if curve is not None and (it % 10 == 0 or it == 1):
            curve.append((it, float(loss)))
    return it


def _recorded_loss(net: Network, batch, recorder) -> float:
    from .network import forward

    if net.arch == ARCH_ENCDEC:
        probs, _ = forward(net, batch[0], targets=batch[1], recorder=recorder)
        picked = np.take_along_axis(probs, np.asarray(batch[1]).T[..., None], axis=-1)
    else:
        probs, _ = forward(net, batch[0], recorder=recorder)
        picked = np.take_along_axis(probs, np.asarray(batch[1])[..., None], axis=-1)
    return float(-np.mean(np.log(picked)))


def train_adagrad(net: Network, data: Dataset, cfg: TrainConfig, recorder=None):
    """Train a private copy of net; returns (trained net, loss curve).

    The loss curve holds (iteration, batch loss) pairs sampled every 10
    iterations.  Training is single-threaded and bit-reproducible for a
    fixed (seed, config).
    """
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    sampler = _BatchSampler(net, data, cfg.batch_size, rng)
    state = AdaGradState()
    curve: list = []
    _run_iterations(net, sampler, cfg, cfg.iterations, True, state, recorder, curve)
    return net, curve


# -- activity recording -------------------------------------------------------


class Reservoir:
    """Uniform row sample of a stream (algorithm R), deterministic per rng."""

    def __init__(self, cap: int, rng: np.random.Generator):
        if cap < 1:
            raise ValueError("cap must be >= 1")
        self.cap = cap
        self.rng = rng
        self.rows: np.ndarray | None = None
        self.fill = 0
        self.seen = 0

    def add(self, chunk: np.ndarray) -> None:
        chunk = np.atleast_2d(np.asarray(chunk, dtype=np.float64))
        if self.rows is None:
            self.rows = np.empty((self.cap, chunk.shape[1]))
        take = min(self.cap - self.fill, len(chunk))
        if take:
            self.rows[self.fill : self.fill + take] = chunk[:take]
            self.fill += take
            self.seen += take
        rest = chunk[take:]
        if len(rest):
            counts = self.seen + 1 + np.arange(len(rest))
            slots = self.rng.integers(0, counts)
            for idx in np.nonzero(slots < self.cap)[0]:
                self.rows[slots[idx]] = rest[idx]
            self.seen += len(rest)

    def drop_column(self, j: int) -> None:
        if self.rows is not None:
            self.rows = np.delete(self.rows, j, axis=1)

    def matrix(self) -> np.ndarray:
        if self.fill == 0:
            raise ValueError("no activity rows recorded")
        return self.rows[: self.fill].copy()


def record_activities(
    net: Network,
    data: Dataset,
    layer: int,
    iterations: int,
    batch_size: int = 16,
    seed: int = 0,
    sample_cap: int = 50_000,
) -> ActivityMatrix:
    """Forward-only pass over ``iterations`` batches recording layer activities.

    Recurrent layers contribute one row per timestep x batch element x
    iteration (the state vector after each step); feedforward layers
    one row per example.  Rows beyond sample_cap are reservoir-sampled.
    """
    if layer_role(layer, net.output_id) is not LayerRole.INNER:
        raise ValueError(f"layer {layer} is not an inner layer")
    seq = np.random.SeedSequence(seed)
    batch_rng, res_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    sampler = _BatchSampler(net, data, batch_size, batch_rng)
    reservoir = Reservoir(sample_cap, res_rng)

    def recorder(d, rows):
        if d == layer:
            reservoir.add(rows)

    for _ in range(iterations):
        _recorded_loss(net, sampler.next_batch(), recorder)
    return ActivityMatrix(reservoir.matrix(), layer, collected_over=(0, iterations))


# -- interleaved data-bound shrinking ------------------------------------------


def shrink_databound(
    net: Network,
    data: Dataset,
    schedule: PruneSchedule,
    cfg: TrainConfig,
    mode: str = MODE_BOTH,
    reference: Network | None = None,
):
    """Prune target layers to size while (optionally) fine-tuning.

    Per event: train ``interval_iterations`` recording activities of
    every target layer, then remove up to ``remove_per_event`` neurons
    per layer, each selected on the current activity matrix and
    compensated by a least-squares linear combination.  ``mode``
    controls the two compensation mechanisms: "both", "linear" (no SGD
    updates), "sgd" (deletion without mixing) or "none".

    Returns (shrunk net, one ShrinkReport per target layer, loss curve).
    """
    if mode not in COMPENSATION_MODES:
        raise ValueError(f"unknown compensation mode {mode!r}")
    use_sgd = mode in (MODE_BOTH, MODE_SGD)
    use_linear = mode in (MODE_BOTH, MODE_LINEAR)
    for d, target in schedule.target_sizes.items():
        if layer_role(d, net.output_id) is not LayerRole.INNER:
            raise ValueError(f"layer {d} is not an inner layer")
        if target > net.layer(d).size:
            raise ValueError(f"layer {d}: target {target} exceeds current size {net.layer(d).size}")
        if target < 1:
            raise ValueError(f"layer {d}: target must be >= 1")
    reference = reference if reference is not None else net
    factor_before = size_factor(net, reference)
    sizes_before = {d: net.layer(d).size for d in schedule.target_sizes}

    net = net.copy()
    seq = np.random.SeedSequence(cfg.seed)
    batch_rng, res_rng, lam_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    sampler = _BatchSampler(net, data, cfg.batch_size, batch_rng)
    state = AdaGradState()
    curve: list = []
    removals: dict[int, list[RemovalRecord]] = {d: [] for d in schedule.target_sizes}
    targets = sorted(schedule.target_sizes)
    iteration = 0

    def pending():
        return [d for d in targets if net.layer(d).size > schedule.target_sizes[d]]

    while pending():
        reservoirs = {d: Reservoir(schedule.activity_sample_cap, res_rng) for d in pending()}

        def recorder(d, rows, _res=reservoirs):
            if d in _res:
                _res[d].add(rows)

        iteration = _run_iterations(
            net, sampler, cfg, schedule.interval_iterations, use_sgd, state, recorder, curve, iteration
        )
        for d in pending():
            activity = ActivityMatrix(reservoirs[d].matrix(), d)
            todo = min(schedule.remove_per_event, net.layer(d).size - schedule.target_sizes[d])
            for _ in range(todo):
                A = activity.a
                i, j, crit = databound_select(A)
                if use_linear:
                    lam, residual = databound_lambda(A, j, schedule.activity_sample_cap, lam_rng)
                else:
                    lam = np.zeros(A.shape[1] - 1)
                    residual = float(np.linalg.norm(A[:, j]))
                remove_neuron(net, d, j, lam)
                state.drop_neuron(net, d, j)
                activity.drop_column(j)
                reservoirs[d].drop_column(j)
                removals[d].append(RemovalRecord(METHOD_DATABOUND, d, j, i, crit, residual))

    if use_sgd:
        # fine-tune tail after all targets are reached
        tail = schedule.tail_iterations
        if tail is None:
            tail = 2 * schedule.interval_iterations
        _run_iterations(net, sampler, cfg, tail, True, state, None, curve, iteration)

    net.validate()
    factor_after = size_factor(net, reference)
    reports = [
        ShrinkReport(
            method=METHOD_DATABOUND,
            layer=d,
            removals=removals[d],
            size_before=sizes_before[d],
            size_after=net.layer(d).size,
            size_factor_before=factor_before,
            size_factor_after=factor_after,
        )
        for d in targets
    ]
    return net, reports, curve
