"""Synthetic two-class classification with a small tanh MLP.

Data are Gaussian clusters in the plane; with the default XOR layout each
class owns two opposite corners, so a hidden layer is required.  The weight
vector is the flattened ``(W1, b1, W2, b2, ..., WL, bL)`` sequence and the
loss is mean softmax cross-entropy over a mini-batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, NonFiniteError
from .objectives import Objective, gradient_check

__all__ = ["MLPTaskConfig", "MLPTask", "make_mlp_task", "make_clusters"]


@dataclass(frozen=True)
class MLPTaskConfig:
    layers: tuple[int, ...] = (2, 16, 16, 2)
    n_train: int = 256
    n_test: int = 1024
    batch_size: int = 32
    spread: float = 0.5
    layout: str = "xor"
    data_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        if len(self.layers) < 2 or min(self.layers) < 1:
            raise DimensionError(f"invalid layer widths {self.layers}")
        if self.layers[-1] != 2:
            raise DimensionError("the synthetic task has exactly 2 classes")
        if self.layers[0] != 2:
            raise DimensionError("the synthetic inputs are 2-dimensional")
        if self.layout not in ("xor", "blobs"):
            raise ValueError("layout must be 'xor' or 'blobs'")
        if self.batch_size < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("sample and batch sizes must be positive")


def make_clusters(n: int, spread: float, layout: str, rng: np.random.Generator):
    """Balanced labels with Gaussian clusters around class-specific means."""
    y = np.arange(n) % 2
    rng.shuffle(y)
    if layout == "xor":
        corner = rng.integers(0, 2, size=n)
        sx = np.where(corner == 0, 1.0, -1.0)
        sy = np.where(y == 0, sx, -sx)
        means = np.stack([sx, sy], axis=1)
    else:
        means = np.where(y[:, None] == 0, [-1.0, 0.0], [1.0, 0.0])
    X = means + spread * rng.standard_normal((n, 2))
    return X, y


class MLPTask(Objective):
    """Cross-entropy objective over the flattened parameters of an MLP."""

    def __init__(self, config: MLPTaskConfig):
        self.config = config
        rng = np.random.default_rng(config.data_seed)
        self.X_train, self.y_train = make_clusters(config.n_train, config.spread, config.layout, rng)
        self.X_test, self.y_test = make_clusters(config.n_test, config.spread, config.layout, rng)
        self.shapes = [(a, b) for a, b in zip(config.layers[:-1], config.layers[1:])]
        dim = sum(a * b + b for a, b in self.shapes)
        super().__init__(
            name="mlp",
            dim=dim,
            value=self._full_value,
            grad=self._full_grad,
            center=np.zeros(dim),
            radius=float("inf"),
            params=asdict(config),
        )

    # parameter packing
    def unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} weights, got shape {w.shape}")
        out, i = [], 0
        for a, b in self.shapes:
            W = w[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((W, w[i:i + b]))
            i += b
        return out

    def _forward(self, params, X):
        acts = [X]
        h = X
        for li, (W, b) in enumerate(params):
            z = h @ W + b
            h = z if li == len(params) - 1 else np.tanh(z)
            acts.append(h)
        return acts

    def loss_and_grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray):
        params = self.unpack(w)
        acts = self._forward(params, X)
        logits = acts[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        m = X.shape[0]
        loss = -float(logp[np.arange(m), y].mean())
        if not math.isfinite(loss):
            raise NonFiniteError(
                f"loss is {loss}; max |w| = {float(np.max(np.abs(w))):.3g}"
            )
        delta = np.exp(logp)
        delta[np.arange(m), y] -= 1.0
        delta /= m
        grads = []
        for li in range(len(params) - 1, -1, -1):
            W, _ = params[li]
            a_prev = acts[li]
            grads.append((a_prev.T @ delta, delta.sum(axis=0)))
            if li:
                delta = (delta @ W.T) * (1.0 - a_prev**2)
        grads.reverse()
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
        return loss, flat

    def _full_value(self, w):
        return self.loss_and_grad(w, self.X_train, self.y_train)[0]

    def _full_grad(self, w):
        return self.loss_and_grad(w, self.X_train, self.y_train)[1]

    def epoch_batches(self, rng: np.random.Generator, steps: int) -> list:
        perm = rng.permutation(self.config.n_train)
        bs = self.config.batch_size
        return [perm[i:i + bs] for i in range(0, len(perm), bs)]

    def batch_value_and_grad(self, w, batch):
        if batch is None:
            return self.loss_and_grad(w, self.X_train, self.y_train)
        return self.loss_and_grad(w, self.X_train[batch], self.y_train[batch])

    def sample_start(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for a, b in self.shapes:
            lim = math.sqrt(6.0 / (a + b))
            parts.append(rng.uniform(-lim, lim, size=a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def predict(self, w, X) -> np.ndarray:
        return self._forward(self.unpack(w), X)[-1].argmax(axis=1)

    def accuracy(self, w, split: str = "test") -> float:
        if split == "train":
            X, y = self.X_train, self.y_train
        elif split == "test":
            X, y = self.X_test, self.y_test
        else:
            raise ValueError(f"unknown split {split!r}")
        return 100.0 * float(np.mean(self.predict(w, X) == y))

    def metrics(self, w) -> dict:
        return {
            "final_f": float(self._full_value(w)),
            "train": self.accuracy(w, "train"),
            "test": self.accuracy(w, "test"),
        }

    def contains(self, w) -> bool:
        return True

    def export_csv(self, path, split: str = "train") -> None:
        X, y = (self.X_train, self.y_train) if split == "train" else (self.X_test, self.y_test)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x0", "x1", "label"])
            for (a, b), lab in zip(X, y):
                wr.writerow([repr(float(a)), repr(float(b)), int(lab)])


def make_mlp_task(self_test: bool = True, **kw) -> MLPTask:
    if "seed" in kw:
        kw["data_seed"] = kw.pop("seed")
    task = MLPTask(MLPTaskConfig(**kw))
    if self_test:
        _self_test(task)
    return task


def _self_test(task: MLPTask) -> None:
    # biases start at zero; jitter them so every coordinate is exercised
    def start(rng):
        return task.sample_start(rng) + 0.1 * rng.standard_normal(task.dim)

    gradient_check(task, points=1, coords=min(20, task.dim), rtol=1e-4, sampler=start)
