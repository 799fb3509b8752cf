"""Block/epoch orchestration with drift tests.

Training proceeds in blocks of doubling order: block i runs at most 2^i
rounds on a freshly scheduled instance pool. Two tests can end a block (and
the current epoch) early:

- Test 1, checked when the active instance finishes: the optimism envelope
  U (running max of the optimistic estimates within the block) exceeds the
  instance's average emitted loss by more than 9 * rho_hat(2^k). A newer
  instance undercutting the envelope indicates that better loss became
  achievable, i.e. a sudden drift.
- Test 2, checked every round: the block-average gap between emitted loss
  and optimistic estimate exceeds 3 * rho_hat(block length so far),
  indicating gradually accumulated drift.

The thresholds use rho_hat(t) = 6 (log2 T + 1) log(T / delta) rho(t) with
rho(t) = C(t) / t and C(t) = min{c1 sqrt(t) + c2, t}. These constants are
sized for the worst case; ``test_scale`` multiplies both thresholds so that
desk-scale runs can detect drifts within useful latency. The default scale
of 1.0 keeps the literal thresholds.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .multiscale import max_scheduling_order, run_round, schedule_block

_STREAM_SCHEDULER = 31


@dataclass(frozen=True)
class RateSchedule:
    """The rate functions rho, C and the inflated test rate rho_hat."""

    horizon: int
    c1: float = 1.0
    c2: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.c1 < 1.0:
            raise ConfigError("c1 must be >= 1 so that rho(t) >= 1/sqrt(t)")
        if self.c2 < 0.0:
            raise ConfigError("c2 must be >= 0")
        if not (0.0 < self.delta < 1.0) and self.delta != 1.0:
            raise ConfigError("delta must be in (0, 1]")

    def C(self, t):
        if t < 1:
            raise ConfigError("t must be >= 1")
        return min(self.c1 * math.sqrt(t) + self.c2, float(t))

    def rho(self, t):
        return self.C(t) / t

    def rho_hat(self, t):
        if t < 1:
            raise ConfigError("rho_hat needs t >= 1")
        inflation = 6.0 * (math.log2(self.horizon) + 1.0) * math.log(
            self.horizon / self.delta
        )
        return inflation * self.rho(t)


def test1_trigger(u_value, span_losses, order, rates, scale=1.0):
    """Sudden-drift test at an instance's final round.

    Fires when the optimism envelope dominates the instance's average
    emitted loss by at least 9 * scale * rho_hat(2^k).
    """
    span_losses = np.asarray(span_losses, dtype=float)
    avg = float(span_losses.mean())
    return u_value >= avg + 9.0 * scale * rates.rho_hat(2 ** order)


def test2_trigger(gap_sum, length, rates, scale=1.0):
    """Gradual-drift test over the block so far.

    ``gap_sum`` is the accumulated sum of (emitted loss - optimistic
    estimate) since the block started; fires when its average reaches
    3 * scale * rho_hat(length).
    """
    if length < 1:
        raise ConfigError("length must be >= 1")
    return gap_sum / length >= 3.0 * scale * rates.rho_hat(length)


@dataclass
class RoundRecord:
    t: int
    block_order: int
    epoch_id: int
    instance_start: int
    instance_end: int
    instance_order: int
    global_loss: float
    optimistic: float
    envelope: float
    test1_fired: bool
    test2_fired: bool
    accuracy: float
    degraded_estimate: bool
    pre_model: np.ndarray
    post_model: np.ndarray


@dataclass
class MasterRun:
    """Everything a run emits: per-round records plus block/epoch ledgers."""

    records: list = field(default_factory=list)
    block_ledger: list = field(default_factory=list)  # (start, end, order, ended_by)
    epoch_ledger: list = field(default_factory=list)  # (start, end, trigger)
    restart_rounds: list = field(default_factory=list)
    replacement_warnings: int = 0

    @property
    def horizon(self):
        return len(self.records)

    def losses(self):
        return np.array([r.global_loss for r in self.records])

    def optimistic_series(self):
        return np.array([r.optimistic for r in self.records])

    def post_models(self):
        return [r.post_model for r in self.records]

    def pre_models(self):
        return [r.pre_model for r in self.records]


def _round_accuracy(loss_model, pre_model, round_data):
    if loss_model.kind == "quadratic-synthetic":
        return math.nan
    accs = [
        loss_model.accuracy(pre_model, d.features, d.labels)
        for d in round_data.dpu_data
    ]
    return float(round_data.weights @ np.asarray(accs))


def run_master(engine, rates, horizon, test_scale=1.0,
               reset_order_on_restart=False):
    """Run the full block/epoch loop over ``horizon`` rounds.

    Block orders advance by one after every block; a test trigger ends both
    the block and the epoch (and resets the order when
    ``reset_order_on_restart`` is set). The final epoch closes at the
    horizon.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    rng = np.random.default_rng((int(engine.seed), _STREAM_SCHEDULER))
    run = MasterRun()
    t = 1
    m = 0
    epoch_id = 1
    epoch_start = 1
    prev_model = None
    while t <= horizon:
        m_eff = min(m, max_scheduling_order(horizon - t + 1))
        pool = schedule_block(t, m_eff, rates.rho, rng)
        t_new = t
        block_losses = []
        gap_sum = 0.0
        envelope = -math.inf
        trigger = None
        while t < t_new + 2 ** m_eff and t <= horizon:
            round_data = engine.round_data(t)
            out, active, pre_model = run_round(
                pool, t, engine, previous_model=prev_model, round_data=round_data
            )
            if round_data.replacement_used:
                run.replacement_warnings += 1
            envelope = max(envelope, out.optimistic)
            block_losses.append(out.global_loss)
            gap_sum += out.global_loss - out.optimistic
            fired1 = False
            if t == active.end:
                offset = active.start - t_new
                span = block_losses[offset:]
                fired1 = test1_trigger(
                    envelope, span, active.order, rates, test_scale
                )
            fired2 = test2_trigger(gap_sum, t - t_new + 1, rates, test_scale)
            run.records.append(
                RoundRecord(
                    t=t,
                    block_order=m_eff,
                    epoch_id=epoch_id,
                    instance_start=active.start,
                    instance_end=active.end,
                    instance_order=active.order,
                    global_loss=out.global_loss,
                    optimistic=out.optimistic,
                    envelope=envelope,
                    test1_fired=fired1,
                    test2_fired=fired2,
                    accuracy=_round_accuracy(engine.loss_model, pre_model, round_data),
                    degraded_estimate=out.degraded_estimate,
                    pre_model=pre_model,
                    post_model=out.model,
                )
            )
            prev_model = out.model
            if fired1 or fired2:
                trigger = "test1" if fired1 else "test2"
                t += 1
                break
            t += 1
        block_end = t - 1
        if trigger is not None:
            ended_by = trigger
        elif block_end == t_new + 2 ** m_eff - 1:
            ended_by = "natural"
        else:
            ended_by = "horizon"
        run.block_ledger.append((t_new, block_end, m_eff, ended_by))
        if trigger is not None:
            run.epoch_ledger.append((epoch_start, block_end, trigger))
            run.restart_rounds.append(block_end)
            epoch_id += 1
            epoch_start = t
            m = 0 if reset_order_on_restart else m + 1
        else:
            m += 1
    if epoch_start <= horizon:
        run.epoch_ledger.append((epoch_start, horizon, "horizon"))
    return run


def run_single_instance(engine, horizon):
    """Baseline: one instance over [1, T] with eta = 1/sqrt(T); no tests.

    Emits the same record schema as run_master with block_order = -1 and
    instance_order = -1 (the span is generally not a power of two).
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    from .multiscale import Instance, InstancePool

    inst = Instance(start=1, end=horizon, order=0, eta=1.0 / math.sqrt(horizon))
    pool = InstancePool(block_start=1, order=0, instances=[inst])
    run = MasterRun()
    envelope = -math.inf
    prev_model = None
    for t in range(1, horizon + 1):
        round_data = engine.round_data(t)
        out, active, pre_model = run_round(
            pool, t, engine, previous_model=prev_model, round_data=round_data
        )
        if round_data.replacement_used:
            run.replacement_warnings += 1
        envelope = max(envelope, out.optimistic)
        run.records.append(
            RoundRecord(
                t=t,
                block_order=-1,
                epoch_id=1,
                instance_start=1,
                instance_end=horizon,
                instance_order=-1,
                global_loss=out.global_loss,
                optimistic=out.optimistic,
                envelope=envelope,
                test1_fired=False,
                test2_fired=False,
                accuracy=_round_accuracy(engine.loss_model, pre_model, round_data),
                degraded_estimate=out.degraded_estimate,
                pre_model=pre_model,
                post_model=out.model,
            )
        )
        prev_model = out.model
    run.block_ledger.append((1, horizon, -1, "horizon"))
    run.epoch_ledger.append((1, horizon, "horizon"))
    return run
