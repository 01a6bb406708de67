"""Lattice quantizer on the grid (1/q_p)·Z.

Rounding is round-half-up, ``floor(q_p * x + 0.5)``, so ties go toward +inf.
The rounding is exact: it agrees with the rational computation even where
the float product ``q_p * x`` would land on a false tie.
The quantization error is reported in lattice units::

    eps = q_p * (xq - x)    with    xq = x + eps / q_p,  eps in [-0.5, 0.5]

Quantized vectors are carried as integer numerators over a common integer
denominator (:class:`LatticeVector`); the integers are authoritative and the
float view is derived from them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DimensionError, NonFiniteError

__all__ = [
    "LatticeVector",
    "quantize_scalar",
    "quantize_vector",
    "quantize_array",
    "quantize_integer_grid",
    "error_covariance_trace",
    "is_on_lattice",
    "as_int_array",
]

# numerators whose magnitude stays below this are kept as int64
_INT64_SAFE = 2**62


def _check_level(q_p) -> int:
    if isinstance(q_p, (bool, np.bool_)) or int(q_p) != q_p or q_p < 1:
        raise ValueError(f"quantization level must be a positive integer, got {q_p!r}")
    return int(q_p)


def as_int_array(values) -> np.ndarray:
    """Integer-valued array as int64, or as Python ints when int64 could overflow."""
    arr = np.asarray(values)
    if arr.dtype == object:
        if arr.size and max(abs(int(v)) for v in arr.ravel()) < _INT64_SAFE:
            return arr.astype(np.int64)
        return arr
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64, copy=False)
    if arr.size == 0 or float(np.max(np.abs(arr))) < _INT64_SAFE:
        return arr.astype(np.int64)
    return np.array([int(v) for v in arr.ravel()], dtype=object).reshape(arr.shape)


def _max_abs(arr: np.ndarray) -> int:
    if arr.size == 0:
        return 0
    if arr.dtype == object:
        return max(abs(int(v)) for v in arr.ravel())
    return int(np.max(np.abs(arr)))


def scale_int_array(arr: np.ndarray, factor: int) -> np.ndarray:
    """Multiply an integer array by ``factor``, promoting to Python ints on overflow."""
    factor = int(factor)
    if factor == 1:
        return arr
    if arr.dtype != object and _max_abs(arr) * abs(factor) < _INT64_SAFE:
        return arr * np.int64(factor)
    return arr.astype(object) * factor


_SPLIT = 134217729.0  # 2**27 + 1, Dekker split constant
_EXACT_Q = 2**53


def _split(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = _SPLIT * v
    hi = c - (c - v)
    return hi, v - hi


def _round_half_up(q: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``floor(q*x + 1/2)`` and ``k - q*x`` for float ``x`` and integer ``q``.

    The float product ``q*x`` can land on a ``.5`` tie that the exact product
    misses by less than an ulp, so the rounding error of the product is
    recovered (error-free transformation) and used to break such ties.
    Elements whose level is not exactly representable, or whose split would
    overflow, go through :class:`~fractions.Fraction`.
    """
    qf = q.astype(np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        p = qf * x
        qh, ql = _split(qf)
        xh, xl = _split(x)
        e = ((qh * xh - p) + qh * xl + ql * xh) + ql * xl
        k0 = np.floor(p)
        r = p - k0
        up = (r > 0.5) | ((r == 0.5) & (e >= 0))
        k = k0 + up
        eps = (k - p) - e
    slow = (q > _EXACT_Q) | ~np.isfinite(e) | ~np.isfinite(p)
    if np.any(slow):
        shape = k.shape
        k, eps = k.astype(object).ravel(), eps.ravel()
        qr, xr = q.ravel(), x.ravel()
        for i in np.flatnonzero(slow):
            exact = Fraction(int(qr[i])) * Fraction(float(xr[i]))
            ki = math.floor(exact + Fraction(1, 2))
            k[i] = ki
            eps[i] = float(ki - exact)
        k, eps = k.reshape(shape), eps.reshape(shape)
    return k, eps


def _finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("quantizer input contains NaN or inf")
    return x


@dataclass(frozen=True)
class LatticeVector:
    """A vector of exact rationals ``numerators / denominator``."""

    numerators: np.ndarray
    denominator: int

    def __post_init__(self):
        if self.denominator < 1:
            raise ValueError("denominator must be a positive integer")
        object.__setattr__(self, "numerators", as_int_array(self.numerators))

    @property
    def values(self) -> np.ndarray:
        num = self.numerators
        if num.dtype == object:
            return np.array(
                [float(Fraction(int(k), self.denominator)) for k in num.ravel()]
            ).reshape(num.shape)
        if self.denominator < 2**53 and (num.size == 0 or _max_abs(num) < 2**53):
            return num.astype(np.float64) / float(self.denominator)
        return np.array(
            [float(Fraction(int(k), self.denominator)) for k in num.ravel()]
        ).reshape(num.shape)

    def __len__(self) -> int:
        return len(self.numerators)

    def is_zero(self) -> bool:
        return _max_abs(self.numerators) == 0

    def on_lattice(self, q: int) -> bool:
        """True when every component is an integer multiple of ``1/q``."""
        q = int(q)
        scaled = scale_int_array(self.numerators, q)
        if scaled.dtype == object:
            return all(int(v) % self.denominator == 0 for v in scaled.ravel())
        return bool(np.all(scaled % self.denominator == 0))

    def with_denominator(self, denominator: int) -> LatticeVector:
        """Re-express on a finer common denominator (must be a multiple)."""
        denominator = int(denominator)
        if denominator % self.denominator:
            raise ValueError(
                f"{denominator} is not a multiple of the current denominator {self.denominator}"
            )
        return LatticeVector(
            scale_int_array(self.numerators, denominator // self.denominator), denominator
        )

    @classmethod
    def zeros(cls, n: int, denominator: int = 1) -> LatticeVector:
        return cls(np.zeros(n, dtype=np.int64), denominator)


def quantize_scalar(x: float, q_p: int) -> tuple[float, float]:
    """Quantize a real onto the ``1/q_p`` lattice.

    Returns ``(xq, eps)`` where ``xq = floor(q_p*x + 0.5) / q_p`` and
    ``eps = q_p * (xq - x)``.

    >>> quantize_scalar(0.3, 4)
    (0.25, -0.2...)
    """
    q_p = _check_level(q_p)
    x = float(x)
    if not math.isfinite(x):
        raise NonFiniteError(f"cannot quantize non-finite value {x!r}")
    exact = Fraction(q_p) * Fraction(x)
    k = math.floor(exact + Fraction(1, 2))
    return k / q_p, float(k - exact)


def quantize_vector(x, q_p: int) -> tuple[LatticeVector, np.ndarray]:
    """Componentwise :func:`quantize_scalar`; returns the lattice vector and errors."""
    q_p = _check_level(q_p)
    x = _finite(x)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {x.shape}")
    k, eps = _round_half_up(np.full(x.shape, q_p, dtype=np.int64), x)
    return LatticeVector(as_int_array(k), q_p), eps


def quantize_array(x, q_p) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise quantization with a per-element level ``q_p`` (broadcast).

    Returns integer numerators ``k`` (so ``xq = k / q_p``) and ``eps = k - q_p*x``.
    """
    x = _finite(x)
    q = np.asarray(q_p)
    if not np.issubdtype(q.dtype, np.integer) or np.any(q < 1):
        raise ValueError("q_p must be integers >= 1")
    q, x = np.broadcast_arrays(q.astype(np.int64), x)
    k, eps = _round_half_up(q, x)
    return as_int_array(k), eps


def quantize_integer_grid(x) -> tuple[np.ndarray, np.ndarray]:
    """Round to the nearest integer (half-up); the ``q_p = 1`` special case.

    This is the ``(Q_p h)^Q`` operation of the quantized update.
    """
    lattice, eps = quantize_vector(x, 1)
    return lattice.numerators, eps


def is_on_lattice(values, q_p: int) -> bool:
    """Float round-trip membership test: ``q_p * v`` must be an exact integer."""
    scaled = np.asarray(values, dtype=np.float64) * _check_level(q_p)
    return bool(np.all(np.floor(scaled) == scaled))


def error_covariance_trace(n: int, q_p: int) -> float:
    """Trace of the white-noise error covariance in weight units, ``n / (12 q_p^2)``."""
    if n < 1:
        raise ValueError("dimension must be >= 1")
    q_p = _check_level(q_p)
    return n / (12 * q_p * q_p)
