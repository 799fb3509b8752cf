"""Convex loss models: regularized logistic regression (binary and softmax
multi-class), a synthetic quadratic task, and Bregman divergences.

All losses are kept convex and reported on a [0, 1] scale: the raw loss is
divided by a configurable scale ``loss_scale`` and then clipped into [0, 1].
Gradients are taken of the *unclipped* scaled loss, so the optimization
geometry stays smooth; clip events are counted and exposed for diagnostics.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import ConfigError, NumericalError

BINARY_LOGISTIC = "binary-logistic"
SOFTMAX_MULTICLASS = "softmax-multiclass"
QUADRATIC_SYNTHETIC = "quadratic-synthetic"

L2_SQUARED = "l2-squared"
L1 = "l1"


@dataclass(frozen=True)
class Datapoint:
    """A sparse labeled example: 1-based feature indices and their values.

    Binary labels are stored as +/-1; multi-class labels are integer class
    ids. Indices must be strictly increasing and positive.
    """

    indices: tuple
    values: tuple
    label: int

    def __post_init__(self):
        idx = self.indices
        if len(idx) != len(self.values):
            raise ConfigError("indices and values length mismatch")
        for i, j in enumerate(idx):
            if j < 1:
                raise ConfigError(f"feature index {j} is not positive")
            if i > 0 and j <= idx[i - 1]:
                raise ConfigError("feature indices must be strictly increasing")

    def to_dense(self, dimension):
        x = np.zeros(dimension)
        for j, v in zip(self.indices, self.values):
            if j > dimension:
                raise ConfigError(f"feature index {j} exceeds dimension {dimension}")
            x[j - 1] = v
        return x

    @staticmethod
    def from_dense(row, label, tol=0.0):
        nz = [(j + 1, float(v)) for j, v in enumerate(row) if abs(v) > tol]
        return Datapoint(tuple(j for j, _ in nz), tuple(v for _, v in nz), int(label))


def _as_matrix(features, dimension):
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != dimension:
        raise ConfigError(
            f"feature dimension {X.shape[1]} does not match model dimension {dimension}"
        )
    return X


@dataclass
class LossModel:
    """A convex per-example loss plus regularizer, scaled into [0, 1].

    ``dimension`` is the length of the model vector. For the softmax kind the
    model is a stacked class-weight matrix of shape (n_classes, n_features)
    flattened into R^d, so ``dimension = n_classes * n_features``.

    ``mu`` is the declared Lipschitz bound on the scaled gradient; gradient
    calls count (but do not reject) norm violations in
    ``lipschitz_violations``. ``clip_events`` counts per-example losses that
    exceeded the scale and were clipped.
    """

    kind: str
    dimension: int
    lam: float = 0.0
    regularizer: str = L2_SQUARED
    loss_scale: float = 10.0
    mu: float = 1.0
    classes: tuple = ()
    n_features: int = 0
    clip_events: int = 0
    lipschitz_violations: int = 0
    _class_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in (BINARY_LOGISTIC, SOFTMAX_MULTICLASS, QUADRATIC_SYNTHETIC):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.regularizer not in (L2_SQUARED, L1):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.loss_scale <= 0:
            raise ConfigError("loss_scale must be > 0")
        if self.mu <= 0:
            raise ConfigError("mu must be > 0")
        if self.kind == SOFTMAX_MULTICLASS:
            if len(self.classes) < 2:
                raise ConfigError("softmax loss needs at least two classes")
            self.classes = tuple(sorted(self.classes))
            if self.n_features <= 0:
                if self.dimension % len(self.classes):
                    raise ConfigError("dimension must be n_classes * n_features")
                self.n_features = self.dimension // len(self.classes)
            if self.n_features * len(self.classes) != self.dimension:
                raise ConfigError("dimension must equal n_classes * n_features")
            self._class_index.update({c: i for i, c in enumerate(self.classes)})
        else:
            self.n_features = self.dimension

    # -- regularizer ---------------------------------------------------

    def _reg_value(self, x):
        if self.lam == 0.0:
            return 0.0
        if self.regularizer == L2_SQUARED:
            return 0.5 * self.lam * float(x @ x)
        return self.lam * float(np.abs(x).sum())

    def _reg_gradient(self, x):
        if self.lam == 0.0:
            return 0.0
        if self.regularizer == L2_SQUARED:
            return self.lam * x
        return self.lam * np.sign(x)

    # -- raw per-example losses ----------------------------------------

    def point_losses_raw(self, x, features, labels):
        """Unclipped, unscaled per-example losses (regularizer included)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise ConfigError(
                f"model has shape {x.shape}, expected ({self.dimension},)"
            )
        X = _as_matrix(features, self.n_features)
        reg = self._reg_value(x)
        if self.kind == BINARY_LOGISTIC:
            y = np.asarray(labels, dtype=float)
            margins = y * (X @ x)
            return np.logaddexp(0.0, -margins) + reg
        if self.kind == SOFTMAX_MULTICLASS:
            W = x.reshape(len(self.classes), self.n_features)
            logp = log_softmax(X @ W.T, axis=1)
            rows = self._label_rows(labels, X.shape[0])
            return -logp[np.arange(X.shape[0]), rows] + reg
        diffs = X - x
        return 0.5 * np.einsum("ij,ij->i", diffs, diffs) + reg

    def point_losses(self, x, features, labels):
        """Scaled per-example losses clipped into [0, 1]; clips are counted."""
        raw = self.point_losses_raw(x, features, labels)
        scaled = raw / self.loss_scale
        over = int(np.count_nonzero(scaled > 1.0))
        if over:
            self.clip_events += over
            scaled = np.minimum(scaled, 1.0)
        return scaled

    def mean_loss(self, x, features, labels):
        """Mean scaled clipped loss over a batch (the local loss F_n)."""
        return float(np.mean(self.point_losses(x, features, labels)))

    def mean_loss_raw(self, x, features, labels):
        """Mean unclipped scaled loss; the smooth objective the updates follow."""
        return float(np.mean(self.point_losses_raw(x, features, labels))) / self.loss_scale

    # -- gradients ------------------------------------------------------

    def mean_gradient(self, x, features, labels):
        """Gradient of the mean scaled (unclipped) loss over a batch."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise ConfigError(
                f"model has shape {x.shape}, expected ({self.dimension},)"
            )
        X = _as_matrix(features, self.n_features)
        n = X.shape[0]
        if self.kind == BINARY_LOGISTIC:
            y = np.asarray(labels, dtype=float)
            s = expit(-y * (X @ x))  # sigmoid of negative margin
            g = -(X.T @ (s * y)) / n + self._reg_gradient(x)
        elif self.kind == SOFTMAX_MULTICLASS:
            W = x.reshape(len(self.classes), self.n_features)
            P = softmax(X @ W.T, axis=1)
            rows = self._label_rows(labels, n)
            P[np.arange(n), rows] -= 1.0
            g = (P.T @ X).reshape(-1) / n + self._reg_gradient(x)
        else:
            g = (x - X.mean(axis=0)) + self._reg_gradient(x)
        g = g / self.loss_scale
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
        if float(np.linalg.norm(g)) > self.mu:
            self.lipschitz_violations += 1
        return g

    # -- single-point contract ------------------------------------------

    def _point_arrays(self, point):
        x_feat = point.to_dense(self.n_features)
        return x_feat.reshape(1, -1), np.array([point.label])

    def loss(self, x, point):
        """Scaled clipped loss of one Datapoint."""
        X, y = self._point_arrays(point)
        return float(self.point_losses(x, X, y)[0])

    def loss_raw(self, x, point):
        """Raw (unscaled, unclipped) loss of one Datapoint."""
        X, y = self._point_arrays(point)
        return float(self.point_losses_raw(x, X, y)[0])

    def gradient(self, x, point):
        """Gradient of the scaled loss at one Datapoint."""
        X, y = self._point_arrays(point)
        return self.mean_gradient(x, X, y)

    # -- prediction -------------------------------------------------------

    def predict(self, x, features):
        """Predicted labels; used for prequential accuracy."""
        X = _as_matrix(features, self.n_features)
        if self.kind == BINARY_LOGISTIC:
            return np.where(X @ x >= 0.0, 1, -1)
        if self.kind == SOFTMAX_MULTICLASS:
            W = np.asarray(x).reshape(len(self.classes), self.n_features)
            rows = np.argmax(X @ W.T, axis=1)
            lookup = np.asarray(self.classes)
            return lookup[rows]
        raise ConfigError("prediction is undefined for the quadratic task")

    def accuracy(self, x, features, labels):
        pred = self.predict(x, features)
        return float(np.mean(pred == np.asarray(labels)))

    def _label_rows(self, labels, n):
        rows = np.empty(n, dtype=int)
        for i, c in enumerate(np.asarray(labels).reshape(-1)):
            try:
                rows[i] = self._class_index[int(c)]
            except KeyError:
                raise ConfigError(f"label {c} outside declared classes {self.classes}")
        return rows


def default_mu(max_feature_norm, lam, model_norm_cap, loss_scale=1.0):
    """Heuristic Lipschitz bound: worst-case data term plus the regularizer
    contribution over models with norm at most ``model_norm_cap``."""
    return (float(max_feature_norm) * 1.0 + lam * model_norm_cap) / loss_scale


@dataclass(frozen=True)
class BregmanDivergence:
    """Bregman divergence of a 1-strongly-convex potential.

    ``squared-euclidean`` uses phi(x) = ||x||^2 / 2, so B(y; x) = ||y-x||^2 / 2
    and the mirror step reduces to plain gradient descent.
    ``diagonal-mahalanobis`` uses phi(x) = sum_i w_i x_i^2 / 2 with all
    w_i >= 1 (required for 1-strong convexity w.r.t. the Euclidean norm).
    """

    kind: str = "squared-euclidean"
    weights: tuple = ()

    def __post_init__(self):
        if self.kind not in ("squared-euclidean", "diagonal-mahalanobis"):
            raise ConfigError(f"unknown Bregman kind {self.kind!r}")
        if self.kind == "diagonal-mahalanobis":
            if len(self.weights) == 0:
                raise ConfigError("diagonal-mahalanobis needs weights")
            if min(self.weights) < 1.0:
                raise ConfigError("weights must be >= 1 for 1-strong convexity")

    def _w(self, d):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (d,):
            raise ConfigError(f"weights have shape {w.shape}, expected ({d},)")
        return w

    def divergence(self, y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        if y.shape != x.shape:
            raise ConfigError("dimension mismatch in Bregman divergence")
        diff = y - x
        if self.kind == "squared-euclidean":
            return 0.5 * float(diff @ diff)
        w = self._w(y.shape[0])
        return 0.5 * float((w * diff) @ diff)

    def mirror_step(self, x, grad, eta):
        """argmin_z <grad, z> + B(z; x) / eta, in closed form."""
        if eta <= 0:
            raise ConfigError("eta must be > 0")
        x = np.asarray(x, dtype=float)
        grad = np.asarray(grad, dtype=float)
        if self.kind == "squared-euclidean":
            out = x - eta * grad
        else:
            out = x - eta * grad / self._w(x.shape[0])
        if not np.all(np.isfinite(out)):
            raise NumericalError("mirror step produced non-finite values")
        return out
