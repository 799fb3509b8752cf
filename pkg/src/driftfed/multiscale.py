"""Multi-scale instance scheduling and per-round execution.

A block of 2^m rounds is covered by randomly scheduled training instances
with power-of-two lengths. An instance of order k spans 2^k rounds, trains
with learning rate 1 / sqrt(2^k), and is included independently with
probability rho(2^m) / rho(2^k); the single order-m instance has inclusion
probability 1 and is always scheduled, so every round is covered.

Each round, all DPUs run the instance with the shortest remaining run
length among those whose span covers the round. A longer instance that
loses this race is paused and later resumes from its own retained model.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CoverageError
from .fedcore import DpuConfig, FedRoundOutput, OptimisticTracker, run_fed_round

_STREAM_SCHEDULER = 31

SCHEDULED = "scheduled"
ACTIVE = "active"
PAUSED = "paused"
FINISHED = "finished"


@dataclass
class Instance:
    """One scheduled base-FL run over [start, end] with 2^order rounds."""

    start: int
    end: int
    order: int
    eta: float
    model: np.ndarray = None
    tracker: OptimisticTracker = None
    status: str = SCHEDULED

    def covers(self, t):
        return self.start <= t <= self.end

    def remaining(self, t):
        return self.end - t


@dataclass
class InstancePool:
    """All instances of the current block."""

    block_start: int
    order: int
    instances: list = field(default_factory=list)

    def covering(self, t):
        return [a for a in self.instances if a.covers(t) and a.status != FINISHED]

    def __len__(self):
        return len(self.instances)


def max_scheduling_order(interval_length):
    """Largest admissible order for an interval: ceil(log2(length))."""
    if interval_length < 1:
        raise ConfigError("interval length must be >= 1")
    return max(0, math.ceil(math.log2(interval_length)))


def schedule_block(block_start, m, rho, rng):
    """Randomized scheduling of instances for the block [t, t + 2^m - 1].

    For every offset divisible by 2^k an order-k instance is drawn with
    probability rho(2^m) / rho(2^k), independently per slot; the order-m
    slot is included deterministically so coverage never depends on
    rounding.
    """
    if m < 0:
        raise ConfigError("order must be >= 0")
    pool = InstancePool(block_start=block_start, order=m)
    p_m = rho(2 ** m)
    for offset in range(2 ** m):
        tau = block_start + offset
        for k in range(m, -1, -1):
            if offset % (2 ** k) != 0:
                continue
            if k == m:
                include = True  # probability rho(2^m)/rho(2^m) = 1
            else:
                include = rng.random() < p_m / rho(2 ** k)
            if include:
                pool.instances.append(
                    Instance(
                        start=tau,
                        end=tau + 2 ** k - 1,
                        order=k,
                        eta=1.0 / math.sqrt(2 ** k),
                    )
                )
    return pool


def pick_active(pool, t):
    """Select the covering instance with the shortest remaining run length.

    Ties break toward the smaller order, then the later start, so the
    choice is deterministic. The previously active instance, if different,
    is paused with its model retained.
    """
    candidates = pool.covering(t)
    if not candidates:
        raise CoverageError(f"no instance covers round {t}")
    best = min(candidates, key=lambda a: (a.remaining(t), a.order, -a.start))
    for a in candidates:
        if a is not best and a.status == ACTIVE:
            a.status = PAUSED
    return best


class FedEngine:
    """Bundles everything needed to run one federated round for an instance:
    the loss model, update rule, Bregman divergence, client configs, data
    source, and estimator settings."""

    def __init__(self, loss_model, source, schedule, n_dpus, size_law,
                 algo="fedavg", bregman=None, gamma=1.0, horizon=1,
                 delta=0.1, c_tilde=1.0, window=None, init="fresh", seed=0):
        if init not in ("fresh", "warm"):
            raise ConfigError(f"unknown init mode {init!r}")
        self.loss_model = loss_model
        self.source = source
        self.schedule = schedule
        self.n_dpus = n_dpus
        self.size_law = size_law
        self.algo = algo
        self.bregman = bregman
        self.dpu_configs = [DpuConfig(id=i, gamma=gamma) for i in range(n_dpus)]
        self.horizon = horizon
        self.delta = delta
        self.c_tilde = c_tilde
        self.window = window
        self.init = init
        self.seed = seed

    def new_tracker(self):
        return OptimisticTracker(self.horizon, self.delta, self.c_tilde, self.window)

    def initial_model(self, previous_model=None):
        if self.init == "warm" and previous_model is not None:
            return np.array(previous_model, dtype=float)
        return np.zeros(self.loss_model.dimension)

    def round_data(self, t):
        return self.source.sample_round(self.schedule, t, self.n_dpus, self.size_law)

    def evaluator(self, round_data):
        pool = getattr(self.source, "pool", None)
        return round_data.evaluator(self.loss_model, pool=pool)


def run_round(pool, t, engine, previous_model=None, round_data=None):
    """Execute round t: select the active instance, update it on this
    round's data, and emit the global loss plus the optimistic estimate.

    Returns (FedRoundOutput, active instance, pre-update model).
    """
    active = pick_active(pool, t)
    if active.model is None:
        active.model = engine.initial_model(previous_model)
        active.tracker = engine.new_tracker()
    active.status = ACTIVE
    pre_model = active.model.copy()
    if round_data is None:
        round_data = engine.round_data(t)
    x_new, f_global, f_dpus = run_fed_round(
        engine.loss_model, active.model, active.eta, engine.algo, engine.bregman,
        round_data, engine.dpu_configs, engine.seed, t,
    )
    active.model = x_new
    active.tracker.observe(engine.evaluator(round_data))
    f_tilde = active.tracker.estimate(x_new)
    if t == active.end:
        active.status = FINISHED
    out = FedRoundOutput(
        model=x_new,
        global_loss=f_global,
        dpu_losses=f_dpus,
        optimistic=f_tilde,
        degraded_estimate=active.tracker.degraded,
    )
    return out, active, pre_model
