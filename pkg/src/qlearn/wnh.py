"""Statistical checks that quantization errors behave like white noise.

Four tests are run on a stream of error vectors (rows are time, columns are
components):

* variance: z-test of the sample variance against 1/12,
* uniformity: chi-square goodness of fit over [-0.5, 0.5],
* serial correlation: Ljung-Box over lags 1..K, per component,
* cross-correlation: max pairwise component correlation against 0.

Per-component and per-pair tests are Bonferroni corrected.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import stats

from .errors import InsufficientDataError
from .quantizer import quantize_vector

__all__ = [
    "WnhConfig",
    "WnhReport",
    "wnh_test",
    "quantization_errors",
    "load_vectors",
]

UNIFORM_VARIANCE = 1.0 / 12.0
# variance of the sample variance of U(-1/2, 1/2) is (mu4 - sigma^4) / N
_UNIFORM_VAR_OF_VAR = 1.0 / 80.0 - 1.0 / 144.0


@dataclass(frozen=True)
class WnhConfig:
    bins: int = 20
    lags: int = 10
    significance: float = 0.01
    min_samples: int = 10_000

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("chi-square needs at least 2 bins")
        if self.lags < 1:
            raise ValueError("lags must be >= 1")
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must be in (0, 1)")


@dataclass
class WnhReport:
    sample_count: int
    dimension: int
    empirical_mean: float
    empirical_variance: float
    variance_rel_error: float
    variance_z: float
    chi_square_stat: float
    chi_square_bins: int
    chi_square_p: float
    lag_autocorr: list[float]
    ljung_box_p: float
    max_cross_corr: float
    cross_corr_p: float
    significance: float
    verdict: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdict.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["thresholds"] = {
            "significance": self.significance,
            "target_variance": UNIFORM_VARIANCE,
            "support": [-0.5, 0.5],
        }
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(_jsonable(self.to_dict()), **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _jsonable(obj.item())
    return obj


def _as_matrix(errors) -> np.ndarray:
    if isinstance(errors, np.ndarray):
        arr = errors
    else:
        chunks = [np.atleast_1d(np.asarray(e, dtype=np.float64)) for e in errors]
        if not chunks:
            arr = np.empty((0, 1))
        elif all(c.ndim == 1 for c in chunks) and len({c.size for c in chunks}) == 1:
            arr = np.vstack(chunks)
        else:
            arr = np.concatenate([c.reshape(len(c), -1) for c in chunks])
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def _autocorr(x: np.ndarray, lags: int) -> np.ndarray:
    x = x - x.mean()
    denom = float(np.dot(x, x))
    if denom == 0.0:
        return np.full(lags, np.nan)
    return np.array([np.dot(x[:-k], x[k:]) / denom for k in range(1, lags + 1)])


def wnh_test(errors, config: WnhConfig | None = None) -> WnhReport:
    """Run the white-noise battery on a stream of quantization errors.

    ``errors`` may be a 1-D array, an ``(N, n)`` array, or an iterable of
    error vectors.  Raises :class:`InsufficientDataError` below
    ``config.min_samples`` rows.
    """
    cfg = config or WnhConfig()
    x = _as_matrix(errors)
    n_rows, dim = x.shape
    if n_rows < cfg.min_samples or n_rows < cfg.lags + 2:
        raise InsufficientDataError(
            f"insufficient data: {n_rows} samples, need at least {cfg.min_samples}"
        )
    alpha = cfg.significance
    flat = x.ravel()
    mean = float(flat.mean())
    var = float(flat.var())
    n_total = flat.size

    # variance
    se = math.sqrt(_UNIFORM_VAR_OF_VAR / n_total)
    z = (var - UNIFORM_VARIANCE) / se
    var_ok = abs(z) <= stats.norm.isf(alpha / 2)

    # uniformity
    counts, _ = np.histogram(flat, bins=cfg.bins, range=(-0.5, 0.5))
    outside = n_total - counts.sum()
    expected = np.full(cfg.bins, n_total / cfg.bins)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    if outside:
        chi2 = math.inf
    chi_p = float(stats.chi2.sf(chi2, cfg.bins - 1))
    chi_ok = chi_p >= alpha

    # serial correlation
    acs = np.array([_autocorr(x[:, j], cfg.lags) for j in range(dim)])
    lb_p = 1.0
    for j in range(dim):
        r = acs[j]
        if np.any(np.isnan(r)):
            lb_p = 0.0
            break
        k = np.arange(1, cfg.lags + 1)
        q = n_rows * (n_rows + 2) * float(np.sum(r**2 / (n_rows - k)))
        lb_p = min(lb_p, float(stats.chi2.sf(q, cfg.lags)) * dim)
    lb_p = min(lb_p, 1.0)
    lag_ok = lb_p >= alpha
    with np.errstate(invalid="ignore"):
        lag_mean = np.nanmean(acs, axis=0) if not np.all(np.isnan(acs)) else acs[0]

    # cross-component correlation
    if dim == 1:
        max_cc, cc_p = 0.0, 1.0
    else:
        sd = x.std(axis=0)
        if np.any(sd == 0):
            max_cc, cc_p = math.nan, 0.0
        else:
            c = np.corrcoef(x, rowvar=False)
            off = np.abs(c[~np.eye(dim, dtype=bool)])
            max_cc = float(off.max())
            pairs = dim * (dim - 1) // 2
            cc_p = min(1.0, float(2 * stats.norm.sf(max_cc * math.sqrt(n_rows))) * pairs)
    cc_ok = cc_p >= alpha

    return WnhReport(
        sample_count=int(n_rows),
        dimension=int(dim),
        empirical_mean=mean,
        empirical_variance=var,
        variance_rel_error=(var - UNIFORM_VARIANCE) / UNIFORM_VARIANCE,
        variance_z=float(z),
        chi_square_stat=chi2,
        chi_square_bins=cfg.bins,
        chi_square_p=chi_p,
        lag_autocorr=[float(v) for v in lag_mean],
        ljung_box_p=float(lb_p),
        max_cross_corr=max_cc,
        cross_corr_p=float(cc_p),
        significance=alpha,
        verdict={
            "variance": bool(var_ok),
            "uniformity": bool(chi_ok),
            "autocorrelation": bool(lag_ok),
            "cross_correlation": bool(cc_ok),
        },
    )


def quantization_errors(inputs, q_p: int) -> np.ndarray:
    """Quantization errors of each row of ``inputs`` at level ``q_p``."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    _, eps = quantize_vector(x.ravel(), q_p)
    return eps.reshape(x.shape)


def load_vectors(path, strict: bool = False) -> tuple[np.ndarray, int]:
    """Read real vectors, one per row, from ``.npy`` or CSV/whitespace text.

    Returns ``(array, skipped)``.  Malformed rows (unparseable, non-finite,
    or of the wrong width) are skipped and counted; with ``strict`` the first
    one raises ``ValueError``.
    """
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        arr = arr[:, None] if arr.ndim == 1 else arr
        return arr.astype(np.float64), 0
    rows: list[list[float]] = []
    skipped = 0
    width = None
    with open(path, newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        delim = "," if "," in sample else None
        lines: Iterable = csv.reader(fh) if delim else (ln.split() for ln in fh)
        for lineno, fields in enumerate(lines, start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            try:
                row = [float(f) for f in fields]
                if not all(math.isfinite(v) for v in row):
                    raise ValueError("non-finite value")
                if width is not None and len(row) != width:
                    raise ValueError(f"expected {width} columns, got {len(row)}")
            except ValueError as exc:
                if strict:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                skipped += 1
                continue
            width = len(row)
            rows.append(row)
    if not rows:
        return np.empty((0, width or 1)), skipped
    return np.asarray(rows, dtype=np.float64), skipped
