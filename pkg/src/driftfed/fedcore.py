"""One round of federated training: local updates at the DPUs (gradient step
or mirror-descent step), weighted aggregation at the server, global loss, and
the optimistic loss estimate.

The optimistic estimate is the mechanism everything else leans on: after
round t, the instance's current model is re-scored on every round this
instance trained on so far, and a concentration margin shrinking with the
cumulative sample count is subtracted:

    f_tilde = mean_{retained rounds tau} F_tau(x_t)
              - c_tilde * sqrt(log(T / delta) / d_bar)

On near-stationary data this sits below the best achievable average loss
with high probability, which is what the restart tests compare against.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .losses import BregmanDivergence

_STREAM_MINIBATCH = 21


@dataclass(frozen=True)
class DpuConfig:
    """Client configuration: minibatch fraction gamma in (0, 1]."""

    id: int
    gamma: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("gamma must be in (0, 1]")

    @property
    def full_batch(self):
        return self.gamma >= 1.0


def local_update_fedavg(x_prev, grad, eta):
    """Plain local gradient step x - eta * g."""
    if eta <= 0:
        raise ConfigError("eta must be > 0")
    return np.asarray(x_prev, dtype=float) - eta * np.asarray(grad, dtype=float)


def local_update_fedomd(x_prev, grad, eta, bd):
    """Mirror-descent step: argmin <g, x> + B(x; x_prev) / eta.

    With the squared-euclidean divergence this coincides with
    local_update_fedavg exactly.
    """
    return bd.mirror_step(x_prev, grad, eta)


def aggregate(models, weights):
    """Weighted model average, summed in fixed DPU order for reproducibility."""
    weights = np.asarray(weights, dtype=float)
    if abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ConfigError(f"aggregation weights sum to {weights.sum()}, not 1")
    if len(models) != weights.shape[0]:
        raise ConfigError("one weight per model required")
    dim = np.asarray(models[0]).shape
    out = np.zeros(dim)
    for w, x in zip(weights, models):
        x = np.asarray(x, dtype=float)
        if x.shape != dim:
            raise ConfigError("aggregation dimension mismatch")
        out += w * x
    return out


def minibatch_gradient(loss_model, features, labels, x, gamma, rng):
    """Mean gradient over a without-replacement subsample of one DPU's data.

    gamma == 1 takes the full-batch path, so full-batch and "minibatch with
    gamma 1" are bit-identical.
    """
    n = features.shape[0]
    if n == 0:
        raise ConfigError("empty local dataset")
    if not (0.0 < gamma <= 1.0):
        raise ConfigError("gamma must be in (0, 1]")
    if gamma >= 1.0:
        return loss_model.mean_gradient(x, features, labels)
    k = max(1, math.ceil(gamma * n))
    idx = rng.choice(n, size=k, replace=False)
    return loss_model.mean_gradient(x, features[idx], np.asarray(labels)[idx])


class OptimisticTracker:
    """Per-instance history of round evaluators and the optimistic estimate.

    Retains up to ``window`` rounds (None = unlimited); when the window is
    exceeded the mean uses only the most recent rounds and ``degraded`` is
    set. The cumulative sample count keeps growing regardless, matching its
    definition as "all datapoints seen by this instance".
    """

    def __init__(self, horizon, delta, c_tilde=1.0, window=None):
        if not (0 < delta <= 1):
            raise ConfigError("delta must be in (0, 1]")
        if horizon < 1:
            raise ConfigError("horizon must be >= 1")
        self.horizon = horizon
        self.delta = delta
        self.c_tilde = c_tilde
        self.window = window
        self.evals = []
        self.d_bar = 0
        self.degraded = False

    def observe(self, round_eval):
        self.evals.append(round_eval)
        self.d_bar += int(round_eval.total)
        if self.window is not None and len(self.evals) > self.window:
            self.evals = self.evals[-self.window:]
            self.degraded = True

    @property
    def rounds_retained(self):
        return len(self.evals)

    def concentration(self):
        return self.c_tilde * math.sqrt(
            math.log(self.horizon / self.delta) / self.d_bar
        )

    def estimate(self, x):
        """Optimistic global-loss estimate for the current model x."""
        if not self.evals:
            raise ConfigError("estimate needs at least one completed round")
        x = np.asarray(x, dtype=float)
        vals = [ev.global_loss(x) for ev in self.evals]
        return float(np.mean(vals)) - self.concentration()


@dataclass
class FedRoundOutput:
    """What one federated round hands back to the orchestrator."""

    model: np.ndarray
    global_loss: float
    dpu_losses: np.ndarray
    optimistic: float = math.nan
    accuracy: float = math.nan
    degraded_estimate: bool = False


def run_fed_round(loss_model, x_prev, eta, algo, bregman, round_data, dpu_configs,
                  seed, t):
    """Local updates at every DPU, aggregation, and global loss on the result.

    Returns (new model, global loss, per-DPU losses). The caller layers the
    optimistic estimate on top because the estimate belongs to the instance,
    not to the round.
    """
    if len(dpu_configs) != len(round_data):
        raise ConfigError("one DpuConfig per DPU required")
    if algo == "fedomd" and bregman is None:
        bregman = BregmanDivergence()
    x_prev = np.asarray(x_prev, dtype=float)
    locals_ = []
    for cfg, dpu in zip(dpu_configs, round_data.dpu_data):
        if cfg.full_batch:
            g = loss_model.mean_gradient(x_prev, dpu.features, dpu.labels)
        else:
            rng = np.random.default_rng((int(seed), _STREAM_MINIBATCH, int(t), cfg.id))
            g = minibatch_gradient(
                loss_model, dpu.features, dpu.labels, x_prev, cfg.gamma, rng
            )
        if algo == "fedavg":
            locals_.append(local_update_fedavg(x_prev, g, eta))
        elif algo == "fedomd":
            locals_.append(local_update_fedomd(x_prev, g, eta, bregman))
        else:
            raise ConfigError(f"unknown algo {algo!r}")
    x_new = aggregate(locals_, round_data.weights)
    if not np.all(np.isfinite(x_new)):
        raise NumericalError(f"non-finite model after aggregation at round {t}")
    dpu_losses = np.array([
        loss_model.mean_loss(x_new, dpu.features, dpu.labels)
        for dpu in round_data.dpu_data
    ])
    global_loss = float(round_data.weights @ dpu_losses)
    return x_new, global_loss, dpu_losses
