"""Exact simulation of the particle system as a statistical oracle.

Replicas in a batch evolve in lock step: every iteration advances each
live replica by one event of its own Gillespie clock.  The total rate of a
configuration is ``sum_x counts[x] * (|Q_xx| + gamma_x)``; the firing state
is drawn in proportion to its share and the event (a motion jump or one
offspring atom) from that state's outcome table.

Each batch draws from its own Philox stream keyed by ``(seed, batch)``, so
results depend only on the seed and the batch size, not on thread count
or completion order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PopulationExplosion
from .model import BmpModel, _require_valid

MAX_PARTICLES = 10**7
MIN_REPLICAS = 100
DEFAULT_BATCH = 10_000


@dataclass(frozen=True)
class ParticleSystem:
    """Configuration of one replica: particle counts per state."""

    counts: np.ndarray
    time: float
    stream: tuple[int, int]

    @property
    def size(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class McEstimate:
    estimate: complex
    se: float
    replicas: int
    seed: int

    def agrees(self, value: complex, k_se: float = 4.0) -> bool:
        return abs(self.estimate - value) <= k_se * self.se


class _OutcomeTable:
    """Per-state event tables: cumulative probabilities and count deltas."""

    def __init__(self, model: BmpModel):
        n = model.n
        rows = []
        for x in range(n):
            events = []
            for y in range(n):
                if y != x and model.Q[x, y] > 0:
                    d = np.zeros(n, dtype=np.int64)
                    d[x] -= 1
                    d[y] += 1
                    events.append((model.Q[x, y], d))
            for atom in model.offspring[x]:
                if atom.p > 0 and model.gamma[x] > 0:
                    d = np.zeros(n, dtype=np.int64)
                    d[x] -= 1
                    np.add.at(d, list(atom.children), 1)
                    events.append((model.gamma[x] * atom.p, d))
            rows.append(events)
        kmax = max(1, max(len(r) for r in rows))
        self.rate = np.zeros(n)
        self.cdf = np.ones((n, kmax))
        self.delta = np.zeros((n, kmax, n), dtype=np.int64)
        for x, events in enumerate(rows):
            if not events:
                continue
            w = np.array([e[0] for e in events])
            self.rate[x] = w.sum()
            c = np.cumsum(w) / w.sum()
            c[-1] = 1.0
            self.cdf[x, : len(events)] = c
            self.delta[x, : len(events)] = [e[1] for e in events]


def _stream(seed: int, batch: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(batch),))
    return np.random.Generator(np.random.Philox(ss))


def _run_batch(table: _OutcomeTable, n: int, x0: int, t_end: float, size: int, rng) -> np.ndarray:
    counts = np.zeros((size, n), dtype=np.int64)
    counts[:, x0] = 1
    clock = np.zeros(size)
    live = np.arange(size)
    while live.size:
        c = counts[live]
        per_state = c * table.rate
        total = per_state.sum(axis=1)
        waits = rng.standard_exponential(live.size)
        with np.errstate(divide="ignore"):
            step = np.where(total > 0, waits / np.where(total > 0, total, 1.0), np.inf)
        t_new = clock[live] + step
        fire = t_new <= t_end
        live, c, per_state, total = live[fire], c[fire], per_state[fire], total[fire]
        if not live.size:
            break
        clock[live] = t_new[fire]
        u = rng.random(live.size) * total
        x = np.minimum((np.cumsum(per_state, axis=1) < u[:, None]).sum(axis=1), n - 1)
        v = rng.random(live.size)
        o = (table.cdf[x] < v[:, None]).sum(axis=1)
        o = np.minimum(o, table.cdf.shape[1] - 1)
        c = c + table.delta[x, o]
        counts[live] = c
        if c.sum(axis=1).max() > MAX_PARTICLES:
            raise PopulationExplosion(f"population exceeded {MAX_PARTICLES} particles")
    return counts


def simulate(model: BmpModel, x0: int, t_end: float, seed: int) -> ParticleSystem:
    """One exact trajectory from a single particle at ``x0`` up to ``t_end``."""
    _require_valid(model)
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if not 0 <= x0 < model.n:
        raise ValueError(f"start state {x0} outside 0..{model.n - 1}")
    counts = _run_batch(_OutcomeTable(model), model.n, x0, float(t_end), 1, _stream(seed, 0))
    return ParticleSystem(counts[0], float(t_end), (int(seed), 0))


def simulate_counts(
    model: BmpModel,
    x0: int,
    t_end: float,
    replicas: int,
    seed: int,
    batch_size: int = DEFAULT_BATCH,
    threads: int = 1,
) -> np.ndarray:
    """Final counts of ``replicas`` independent trajectories, shape ``(R, n)``."""
    _require_valid(model)
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if not 0 <= x0 < model.n:
        raise ValueError(f"start state {x0} outside 0..{model.n - 1}")
    table = _OutcomeTable(model)
    sizes = [min(batch_size, replicas - s) for s in range(0, replicas, batch_size)]

    def job(b):
        return _run_batch(table, model.n, x0, float(t_end), sizes[b], _stream(seed, b))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(b) for b in range(len(sizes))]
    return np.concatenate(parts, axis=0)


def estimate_moment(
    model: BmpModel,
    fs: Sequence,
    t: float,
    x0: int = 0,
    replicas: int = 100_000,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    threads: int = 1,
) -> McEstimate:
    """Sample mean of ``prod_i X_t[f_i]`` started from one particle at ``x0``.

    The standard error is ``sqrt(mean |Z - Zbar|^2 / (R - 1)) / sqrt(R)``
    over the replica values ``Z``.
    """
    if replicas < MIN_REPLICAS:
        raise ValueError(f"need at least {MIN_REPLICAS} replicas, got {replicas}")
    fs = np.atleast_2d(np.asarray(fs, dtype=complex))
    if fs.shape[1] != model.n:
        raise ValueError(f"test functions have length {fs.shape[1]}, model has {model.n} states")
    counts = simulate_counts(model, x0, t, replicas, seed, batch_size, threads)
    z = np.prod(counts @ fs.T, axis=1)
    mean = z.mean()
    var = np.sum(np.abs(z - mean) ** 2) / (replicas - 1)
    return McEstimate(complex(mean), float(np.sqrt(var / replicas)), replicas, int(seed))
