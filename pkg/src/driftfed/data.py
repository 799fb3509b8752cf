"""Dataset ingestion, synthetic task generation, per-round per-client
sampling, and drift-schedule injection.

A run draws one ``RoundDataset`` per round: each data processing unit (DPU)
receives a private batch whose size follows a configurable law (default
Normal(1000, 200), truncated at 1). Sampling is a pure function of
(seed, round, dpu), so whole data streams replay deterministically; the
regret oracle relies on that to re-materialize past rounds instead of
retaining them.

Drift events modify what subsequent rounds look like:

- ``class-introduce``: new classes become visible in the pool,
- ``class-swap``: pairs of labels are exchanged from the event round on,
- ``comparator-shift``: the synthetic quadratic optimum jumps to a new point.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LibsvmParseError
from .losses import Datapoint

# kinds of drift events
CLASS_INTRODUCE = "class-introduce"
CLASS_SWAP = "class-swap"
COMPARATOR_SHIFT = "comparator-shift"

_STREAM_DATA = 11  # rng stream tags; keep distinct across the package
_STREAM_CENTERS = 12


# ---------------------------------------------------------------------------
# LIBSVM text format
# ---------------------------------------------------------------------------

def parse_libsvm(source):
    """Parse LIBSVM text (``<label> <idx>:<val> ...``, 1-based indices).

    ``source`` may be a string, an open text file, or an iterable of lines.
    Returns ``(datapoints, dimension, classes)`` where dimension is the
    largest feature index seen and classes is the set of labels.
    """
    if isinstance(source, str):
        lines = io.StringIO(source)
    else:
        lines = source
    points = []
    dimension = 0
    classes = set()
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label_f = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(line_no, f"bad label {tokens[0]!r}")
        if label_f != int(label_f):
            raise LibsvmParseError(line_no, f"non-integer label {tokens[0]!r}")
        label = int(label_f)
        idx = []
        vals = []
        prev = 0
        for tok in tokens[1:]:
            try:
                j_str, v_str = tok.split(":", 1)
                j = int(j_str)
                v = float(v_str)
            except ValueError:
                raise LibsvmParseError(line_no, f"bad feature token {tok!r}")
            if j < 1:
                raise LibsvmParseError(line_no, f"index {j} is not positive")
            if j <= prev:
                raise LibsvmParseError(line_no, f"indices not increasing at {tok!r}")
            prev = j
            idx.append(j)
            vals.append(v)
        dimension = max(dimension, prev)
        classes.add(label)
        points.append(Datapoint(tuple(idx), tuple(vals), label))
    return points, dimension, classes


def write_libsvm(points, stream=None):
    """Serialize datapoints back to LIBSVM text; inverse of parse_libsvm."""
    out = stream or io.StringIO()
    for p in points:
        feats = " ".join(f"{j}:{v:g}" for j, v in zip(p.indices, p.values))
        out.write(f"{p.label} {feats}".rstrip() + "\n")
    if stream is None:
        return out.getvalue()
    return None


def load_libsvm_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_libsvm(fh)


# ---------------------------------------------------------------------------
# Drift schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftEvent:
    round: int
    kind: str
    payload: tuple

    def __post_init__(self):
        if self.kind not in (CLASS_INTRODUCE, CLASS_SWAP, COMPARATOR_SHIFT):
            raise ConfigError(f"unknown drift event kind {self.kind!r}")
        if self.round < 1:
            raise ConfigError("event rounds must be >= 1")


class DriftSchedule:
    """An ordered list of drift events; rounds strictly increasing."""

    def __init__(self, events=()):
        events = list(events)
        for a, b in zip(events, events[1:]):
            if b.round <= a.round:
                raise ConfigError("drift event rounds must be strictly increasing")
        self.events = events

    def validate_horizon(self, horizon):
        for e in self.events:
            if e.round > horizon:
                raise ConfigError(
                    f"drift event at round {e.round} is beyond horizon {horizon}"
                )

    def events_upto(self, t):
        return [e for e in self.events if e.round <= t]

    def drift_rounds(self, horizon):
        """Rounds with injected drift; its size is the exact drift count L."""
        return [e.round for e in self.events if e.round <= horizon]

    def label_state(self, t, initial_classes):
        """(active classes, label mapping) after applying events up to t."""
        active = set(initial_classes)
        mapping = {}

        def out(c):
            return mapping.get(c, c)

        for e in self.events_upto(t):
            if e.kind == CLASS_INTRODUCE:
                active.update(e.payload)
            elif e.kind == CLASS_SWAP:
                for a, b in e.payload:
                    va, vb = out(a), out(b)
                    mapping[a], mapping[b] = vb, va
        return active, mapping

    def target_at(self, t, base_target):
        """Current quadratic optimum after comparator-shift events up to t."""
        target = np.asarray(base_target, dtype=float)
        for e in self.events_upto(t):
            if e.kind == COMPARATOR_SHIFT:
                target = np.asarray(e.payload, dtype=float)
        return target


# ---------------------------------------------------------------------------
# Size law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SizeLaw:
    """Per-DPU dataset size: floor(max(1, Normal(mean, std))), or a constant."""

    mean: float = 1000.0
    std: float = 200.0
    fixed: int = 0  # > 0 disables the normal law

    def draw(self, rng):
        if self.fixed > 0:
            return int(self.fixed)
        return int(max(1.0, np.floor(rng.normal(self.mean, self.std))))


# ---------------------------------------------------------------------------
# Round data containers and re-evaluation handles
# ---------------------------------------------------------------------------

@dataclass
class DpuData:
    """One DPU's batch for one round (dense features)."""

    features: np.ndarray
    labels: np.ndarray
    pool_idx: np.ndarray = None  # set when drawn from a shared pool

    @property
    def size(self):
        return self.features.shape[0]


class RoundDataset:
    """Per-DPU batches for one round, with sizes and weights p_n."""

    def __init__(self, t, dpu_data, replacement_used=False):
        self.t = t
        self.dpu_data = list(dpu_data)
        self.sizes = np.array([d.size for d in self.dpu_data], dtype=int)
        if np.any(self.sizes < 1):
            raise ConfigError("every DPU needs at least one datapoint")
        self.total = int(self.sizes.sum())
        self.weights = self.sizes / self.total
        self.replacement_used = replacement_used

    def __len__(self):
        return len(self.dpu_data)

    def evaluator(self, loss_model, pool=None):
        if pool is not None and all(d.pool_idx is not None for d in self.dpu_data):
            return PooledRoundEval(pool, self, loss_model)
        return DenseRoundEval(self, loss_model)


class DenseRoundEval:
    """Re-evaluation handle that owns the round's arrays (synthetic sources)."""

    def __init__(self, round_data, loss_model):
        self.weights = round_data.weights
        self.total = round_data.total
        self._batches = [(d.features, d.labels) for d in round_data.dpu_data]
        self._lm = loss_model
        self.pool = None

    def dpu_losses(self, x, _cache=None):
        return np.array([self._lm.mean_loss(x, X, y) for X, y in self._batches])

    def global_loss(self, x, cache=None):
        return float(self.weights @ self.dpu_losses(x))

    def global_loss_raw(self, x):
        vals = [self._lm.mean_loss_raw(x, X, y) for X, y in self._batches]
        return float(self.weights @ np.asarray(vals))

    def global_gradient(self, x):
        grads = [self._lm.mean_gradient(x, X, y) for X, y in self._batches]
        return np.einsum("n,nd->d", self.weights, np.asarray(grads))


class SharedPool:
    """Dense feature pool shared by every pooled round evaluator.

    Per-point losses for a fixed model are computed once per model and
    re-used across all retained rounds, which keeps the optimistic
    estimator's history re-evaluation affordable on real datasets.
    """

    def __init__(self, features, labels):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self._cache_key = None
        self._cache_vals = None

    def point_losses_for(self, x, loss_model):
        key = (x.tobytes(), id(loss_model))
        if self._cache_key != key:
            # losses of the whole pool under original labels; label swaps are
            # applied by re-scoring the affected rows below
            self._cache_vals = loss_model.point_losses(x, self.features, self.labels)
            self._cache_key = key
        return self._cache_vals


class PooledRoundEval:
    """Re-evaluation handle that stores only pool indices plus labels."""

    def __init__(self, pool, round_data, loss_model):
        self.pool = pool
        self.weights = round_data.weights
        self.total = round_data.total
        self._lm = loss_model
        self._idx = [d.pool_idx.copy() for d in round_data.dpu_data]
        self._labels = [d.labels.copy() for d in round_data.dpu_data]
        # rows whose effective label differs from the pool label (swaps)
        self._swapped = [
            np.nonzero(lab != pool.labels[idx])[0]
            for idx, lab in zip(self._idx, self._labels)
        ]

    def dpu_losses(self, x, _cache=None):
        base = self.pool.point_losses_for(np.asarray(x, dtype=float), self._lm)
        out = np.empty(len(self._idx))
        for n, (idx, lab, sw) in enumerate(zip(self._idx, self._labels, self._swapped)):
            vals = base[idx]
            if sw.size:
                rows = idx[sw]
                vals = vals.copy()
                vals[sw] = self._lm.point_losses(
                    x, self.pool.features[rows], lab[sw]
                )
            out[n] = float(vals.mean())
        return out

    def global_loss(self, x, cache=None):
        return float(self.weights @ self.dpu_losses(x))

    def global_loss_raw(self, x):
        vals = []
        for idx, lab in zip(self._idx, self._labels):
            vals.append(self._lm.mean_loss_raw(x, self.pool.features[idx], lab))
        return float(self.weights @ np.asarray(vals))

    def global_gradient(self, x):
        grads = []
        for idx, lab in zip(self._idx, self._labels):
            grads.append(self._lm.mean_gradient(x, self.pool.features[idx], lab))
        return np.einsum("n,nd->d", self.weights, np.asarray(grads))


# ---------------------------------------------------------------------------
# Data sources
# ---------------------------------------------------------------------------

def _round_rng(seed, t, dpu):
    return np.random.default_rng((int(seed), _STREAM_DATA, int(t), int(dpu)))


@dataclass
class LibsvmSource:
    """Immutable pool of parsed LIBSVM points sampled without replacement."""

    kind = "libsvm-file"

    pool: SharedPool
    dimension: int
    classes: tuple
    initial_classes: tuple = ()
    seed: int = 0

    @staticmethod
    def from_points(points, dimension, classes, initial_classes=None, seed=0):
        n = len(points)
        X = np.zeros((n, dimension))
        y = np.empty(n, dtype=int)
        for i, p in enumerate(points):
            X[i] = p.to_dense(dimension)
            y[i] = p.label
        init = tuple(sorted(initial_classes)) if initial_classes else tuple(sorted(classes))
        return LibsvmSource(SharedPool(X, y), dimension, tuple(sorted(classes)), init, seed)

    def sample_round(self, schedule, t, n_dpus, size_law):
        active, mapping = schedule.label_state(t, self.initial_classes)
        mask = np.isin(self.pool.labels, sorted(active))
        pool_idx = np.nonzero(mask)[0]
        if pool_idx.size == 0:
            raise ConfigError(f"no datapoints with active classes at round {t}")
        replacement = False
        batches = []
        for n in range(n_dpus):
            rng = _round_rng(self.seed, t, n)
            size = size_law.draw(rng)
            if size > pool_idx.size:
                idx = rng.choice(pool_idx, size=size, replace=True)
                replacement = True
            else:
                idx = rng.choice(pool_idx, size=size, replace=False)
            labels = self.pool.labels[idx]
            if mapping:
                labels = np.array([mapping.get(int(c), int(c)) for c in labels])
            batches.append(DpuData(self.pool.features[idx], labels, pool_idx=idx))
        return RoundDataset(t, batches, replacement_used=replacement)


@dataclass
class QuadraticSource:
    """Synthetic quadratic task: points are noisy copies of a target a_t.

    The global loss is 0.5 * ||x - mean target||^2 / B plus a variance
    floor, so comparators have a closed form; the target moves only through
    comparator-shift events, which makes drift ground truth exact.
    """

    kind = "synthetic-quadratic"

    dimension: int
    base_target: np.ndarray
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.base_target = np.asarray(self.base_target, dtype=float)
        if self.base_target.shape != (self.dimension,):
            raise ConfigError("base_target must match the dimension")

    def sample_round(self, schedule, t, n_dpus, size_law):
        target = schedule.target_at(t, self.base_target)
        batches = []
        for n in range(n_dpus):
            rng = _round_rng(self.seed, t, n)
            size = size_law.draw(rng)
            pts = target + self.noise_sigma * rng.standard_normal((size, self.dimension))
            batches.append(DpuData(pts, np.zeros(size, dtype=int)))
        return RoundDataset(t, batches)


@dataclass
class LogisticBlobSource:
    """Synthetic classification task: Gaussian blobs, one center per class."""

    kind = "synthetic-logistic"

    dimension: int
    classes: tuple
    centers: np.ndarray = None
    noise_sigma: float = 1.0
    initial_classes: tuple = ()
    center_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(sorted(self.classes))
        if self.centers is None:
            rng = np.random.default_rng((int(self.seed), _STREAM_CENTERS))
            self.centers = self.center_scale * rng.standard_normal(
                (len(self.classes), self.dimension)
            )
        self.centers = np.asarray(self.centers, dtype=float)
        if self.centers.shape != (len(self.classes), self.dimension):
            raise ConfigError("centers must have shape (n_classes, dimension)")
        if not self.initial_classes:
            self.initial_classes = self.classes
        self._row = {c: i for i, c in enumerate(self.classes)}

    def sample_round(self, schedule, t, n_dpus, size_law):
        active, mapping = schedule.label_state(t, self.initial_classes)
        active = sorted(active)
        batches = []
        for n in range(n_dpus):
            rng = _round_rng(self.seed, t, n)
            size = size_law.draw(rng)
            picked = rng.choice(len(active), size=size)
            originals = np.array([active[i] for i in picked])
            rows = np.array([self._row[c] for c in originals])
            pts = self.centers[rows] + self.noise_sigma * rng.standard_normal(
                (size, self.dimension)
            )
            labels = np.array([mapping.get(int(c), int(c)) for c in originals])
            batches.append(DpuData(pts, labels))
        return RoundDataset(t, batches)


def sample_round(source, schedule, t, n_dpus, size_law):
    """Draw the round-t dataset; deterministic in (source.seed, t, dpu)."""
    if t < 1:
        raise ConfigError("rounds are 1-based")
    return source.sample_round(schedule, t, n_dpus, size_law)
