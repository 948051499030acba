"""Iterative computations driven through a common atomic-operation interface.

A computation advances a state vector in R^d one step at a time. Every
builtin operation is deterministic given its inputs; stochastic operations
take their randomness as an explicit draw so that any peer holding the same
draw reproduces the step bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "RandomDraw",
    "AffineContraction",
    "QuadraticGradientDescent",
    "GaussianNoise",
    "MiniBatchSGDClassifier",
    "derive_draw",
    "step",
    "iterate_k",
    "estimate_lipschitz",
    "as_state",
]


def as_state(values, dimension: Optional[int] = None) -> np.ndarray:
    """Coerce to a float64 state vector, enforcing shape and finiteness."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"state must be 1-D, got shape {x.shape}")
    if dimension is not None and x.shape[0] != dimension:
        raise ValueError(f"state has length {x.shape[0]}, expected {dimension}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains NaN or inf")
    return x


@dataclass(frozen=True)
class RandomDraw:
    """External randomness for one step, reproducible from its seed path."""

    values: np.ndarray
    seed_path: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


def derive_draw(op, run_seed: int, agent_id: int, t: int, attempt: int = 0) -> RandomDraw:
    """Derive the draw an agent uses at iteration ``t``.

    The path (run_seed, agent_id, t, attempt) keys a counter-style seed
    sequence, so independent agents get independent draws while identical
    paths always reproduce the same values.
    """
    path = (int(run_seed), int(agent_id), int(t), int(attempt))
    rng = np.random.default_rng(path)
    return RandomDraw(values=op.draw_theta(rng), seed_path=path)


@dataclass(eq=False)
class AffineContraction:
    """x -> A x + b with Lipschitz constant equal to the operator norm of A."""

    matrix: np.ndarray
    offset: np.ndarray
    lipschitz: Optional[float] = None
    stochastic = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("matrix must be square")
        if self.offset.shape != (self.matrix.shape[0],):
            raise ValueError("offset length must match matrix dimension")
        if self.lipschitz is None:
            self.lipschitz = float(np.linalg.norm(self.matrix, 2))

    @classmethod
    def from_spectrum(cls, spectrum, offset=None) -> "AffineContraction":
        spectrum = np.asarray(spectrum, dtype=np.float64)
        if offset is None:
            offset = np.zeros(spectrum.shape[0])
        return cls(matrix=np.diag(spectrum), offset=offset,
                   lipschitz=float(np.max(np.abs(spectrum))) if spectrum.size else 0.0)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray, theta=None) -> np.ndarray:
        return self.matrix @ x + self.offset


@dataclass(eq=False)
class QuadraticGradientDescent:
    """Gradient descent on a separable quadratic bowl.

    The objective is 0.5 * sum_i q_i * (x_i - c_i)^2, so one step maps x to
    x - rate * q (x - c). With diagonal curvature q the exact Lipschitz
    constant of the step map is max_i |1 - rate * q_i|.
    """

    curvature: np.ndarray
    rate: float
    center: Optional[np.ndarray] = None
    lipschitz: Optional[float] = None
    stochastic = False

    def __post_init__(self):
        self.curvature = np.asarray(self.curvature, dtype=np.float64)
        if self.curvature.ndim != 1:
            raise ValueError("curvature must be a 1-D spectrum")
        if self.center is None:
            self.center = np.zeros_like(self.curvature)
        else:
            self.center = np.asarray(self.center, dtype=np.float64)
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.lipschitz is None:
            self.lipschitz = float(np.max(np.abs(1.0 - self.rate * self.curvature)))

    @property
    def dimension(self) -> int:
        return self.curvature.shape[0]

    def apply(self, x: np.ndarray, theta=None) -> np.ndarray:
        return x - self.rate * self.curvature * (x - self.center)


@dataclass(eq=False)
class GaussianNoise:
    """x -> x + theta with theta drawn i.i.d. N(0, sigma^2 I).

    The step map is an isometry in the state (L = 1), and the covariance of
    a single recomputation is sigma^2 I, which makes this the reference
    operation for analyzing validation of randomized computations.
    """

    dimension: int
    sigma: float
    lipschitz: float = 1.0
    stochastic = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def recompute_covariance_max_eig(self) -> float:
        return self.sigma ** 2

    def draw_theta(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.sigma, self.dimension)

    def apply(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return x + theta


def _two_gaussian_blobs(n_train, n_test, separation, noise, seed):
    rng = np.random.default_rng((int(seed), 0xB10B5))
    n = n_train + n_test
    labels = rng.integers(0, 2, size=n)
    signs = 2.0 * labels - 1.0
    points = signs[:, None] * separation + rng.normal(0.0, noise, size=(n, 2))
    features = np.column_stack([np.ones(n), points])
    return (features[:n_train], labels[:n_train].astype(np.float64),
            features[n_train:], labels[n_train:].astype(np.float64))


@dataclass(eq=False)
class MiniBatchSGDClassifier:
    """Classifier trained by mini-batch SGD, the stochastic reference task.

    With ``hidden_units == 0`` this is logistic regression; otherwise one
    tanh hidden layer feeds a softmax output, both with hand-coded
    gradients. The default dataset is two Gaussian clouds regenerated from
    ``data_seed`` (never shipped); ``dataset_path`` may point to an .npz
    with train_x/train_y/test_x/test_y for larger presets. The state is the
    flattened parameter vector. A draw supplies ``batch_size`` uniform
    numbers selecting the mini-batch, so a step is deterministic given
    (state, draw). No analytic Lipschitz constant is stored; estimate one
    when needed.
    """

    learning_rate: float = 0.1
    batch_size: int = 10
    n_train: int = 2000
    n_test: int = 500
    separation: float = 1.2
    noise: float = 1.0
    data_seed: int = 0
    hidden_units: int = 0
    dataset_path: Optional[str] = None
    lipschitz: Optional[float] = None
    stochastic = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be positive and batch_size >= 1")
        if self.dataset_path is not None:
            data = np.load(self.dataset_path)
            raw_train = np.asarray(data["train_x"], dtype=np.float64)
            self.train_labels = np.asarray(data["train_y"], dtype=np.int64)
            raw_test = np.asarray(data["test_x"], dtype=np.float64)
            self.test_labels = np.asarray(data["test_y"], dtype=np.int64)
            self.n_train = raw_train.shape[0]
            self.n_test = raw_test.shape[0]
        else:
            (raw_train, labels, raw_test, test_labels) = _two_gaussian_blobs(
                self.n_train, self.n_test, self.separation, self.noise, self.data_seed)
            raw_train, raw_test = raw_train[:, 1:], raw_test[:, 1:]
            self.train_labels = labels.astype(np.int64)
            self.test_labels = test_labels.astype(np.int64)
        self.n_classes = int(max(self.train_labels.max(), self.test_labels.max())) + 1
        if self.hidden_units == 0:
            if self.n_classes != 2:
                raise ValueError("logistic regression handles two classes; "
                                 "set hidden_units for more")
            ones = np.ones((raw_train.shape[0], 1))
            self.train_features = np.column_stack([ones, raw_train])
            self.test_features = np.column_stack([np.ones((raw_test.shape[0], 1)),
                                                  raw_test])
        else:
            self.train_features = raw_train
            self.test_features = raw_test
        self.n_features = raw_train.shape[1]

    @property
    def dimension(self) -> int:
        if self.hidden_units == 0:
            return self.n_features + 1
        h, f, c = self.hidden_units, self.n_features, self.n_classes
        return h * f + h + c * h + c

    def _unpack(self, x: np.ndarray):
        h, f, c = self.hidden_units, self.n_features, self.n_classes
        w1 = x[:h * f].reshape(h, f)
        b1 = x[h * f:h * f + h]
        w2 = x[h * f + h:h * f + h + c * h].reshape(c, h)
        b2 = x[h * f + h + c * h:]
        return w1, b1, w2, b2

    def draw_theta(self, rng: np.random.Generator) -> np.ndarray:
        return rng.random(self.batch_size)

    def batch_indices(self, theta: np.ndarray) -> np.ndarray:
        return (theta * self.n_train).astype(np.int64)

    def apply(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        idx = self.batch_indices(theta)
        xb = self.train_features[idx]
        yb = self.train_labels[idx]
        if self.hidden_units == 0:
            p = 1.0 / (1.0 + np.exp(-(xb @ x)))
            grad = xb.T @ (p - yb) / len(idx)
            return x - self.learning_rate * grad
        w1, b1, w2, b2 = self._unpack(x)
        a1 = np.tanh(xb @ w1.T + b1)
        logits = a1 @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(idx)), yb] -= 1.0
        p /= len(idx)
        g_w2 = p.T @ a1
        g_b2 = p.sum(axis=0)
        dz1 = (p @ w2) * (1.0 - a1 ** 2)
        g_w1 = dz1.T @ xb
        g_b1 = dz1.sum(axis=0)
        grad = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
        return x - self.learning_rate * grad

    def batch_loss(self, x: np.ndarray, theta: np.ndarray) -> float:
        """Mean loss on the batch a draw selects; oracle for gradient checks."""
        idx = self.batch_indices(theta)
        xb = self.train_features[idx]
        yb = self.train_labels[idx]
        if self.hidden_units == 0:
            z = xb @ x
            return float(np.mean(np.logaddexp(0.0, z) - yb * z))
        w1, b1, w2, b2 = self._unpack(x)
        a1 = np.tanh(xb @ w1.T + b1)
        logits = a1 @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return float(-np.mean(log_p[np.arange(len(idx)), yb]))

    def accuracy(self, x: np.ndarray, split: str = "test") -> float:
        feats, labels = ((self.test_features, self.test_labels) if split == "test"
                         else (self.train_features, self.train_labels))
        if self.hidden_units == 0:
            return float(np.mean((feats @ x > 0) == labels.astype(bool)))
        w1, b1, w2, b2 = self._unpack(x)
        logits = np.tanh(feats @ w1.T + b1) @ w2.T + b2
        return float(np.mean(np.argmax(logits, axis=1) == labels))

    def default_initial_state(self) -> np.ndarray:
        # a zero start would freeze the tanh layer in its symmetric point
        if self.hidden_units == 0:
            return np.zeros(self.dimension)
        rng = np.random.default_rng((self.data_seed, 0x1817))
        return rng.normal(0.0, 0.1, self.dimension)


def step(op, x: np.ndarray, theta: Optional[RandomDraw] = None) -> np.ndarray:
    """Apply the atomic operation once: the next state f(x, theta)."""
    x = as_state(x, op.dimension)
    if op.stochastic:
        if theta is None:
            raise ValueError("stochastic operation requires a draw")
        values = theta.values
    else:
        if theta is not None:
            raise ValueError("deterministic operation takes no draw")
        values = None
    return op.apply(x, values)


def iterate_k(op, x: np.ndarray, k: int,
              thetas: Optional[Sequence[RandomDraw]] = None) -> np.ndarray:
    """Apply the operation k times; equals step composed k times."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if op.stochastic:
        if thetas is None or len(thetas) != k:
            raise ValueError(f"stochastic operation requires exactly {k} draws")
    out = x
    for i in range(k):
        out = step(op, out, thetas[i] if op.stochastic else None)
    return out


def estimate_lipschitz(op, sample_count: int, radius: float, rng_seed) -> float:
    """Estimate the Lipschitz constant from sampled pairs in a ball.

    Draws pairs uniformly in the ball of the given radius, shares one draw
    across both evaluations for stochastic operations, and returns the
    largest observed ratio ||f(x1) - f(x2)|| / ||x1 - x2||. Coincident pairs
    are skipped. The estimate never exceeds an analytic constant when one
    exists.
    """
    if sample_count < 1 or radius <= 0:
        raise ValueError("sample_count and radius must be positive")
    rng = np.random.default_rng(rng_seed)
    d = op.dimension
    best = 0.0
    for i in range(sample_count):
        pair = rng.normal(size=(2, d))
        norms = np.linalg.norm(pair, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        pair = pair / norms * (radius * rng.random((2, 1)) ** (1.0 / d))
        gap = np.linalg.norm(pair[0] - pair[1])
        if gap < 1e-12:
            continue
        theta = derive_draw(op, 0, 0, i) if op.stochastic else None
        ratio = np.linalg.norm(step(op, pair[0], theta) - step(op, pair[1], theta)) / gap
        if ratio > best:
            best = float(ratio)
    return best
