"""Distortion, divergence and Bjontegaard-delta measurements."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .gmm import GmmModel, log_density

KL_EPS = 1e-12
REF_LEAK_TOL = 1e-6
OUT_OF_GRID_WARN = 0.01
FRECHET_REG = 1e-10


# ---------------------------------------------------------------- distortion


def mse(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(mse_value: float, peak: float) -> float:
    """``10 log10(peak^2 / mse)``; ``inf`` for a perfect reconstruction."""
    if mse_value < 0:
        raise ValueError("mse must be nonnegative")
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse_value)


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned histogram grid in one or two dimensions."""

    lo: tuple
    hi: tuple
    bins: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        bins = tuple(int(v) for v in np.atleast_1d(self.bins))
        if not (len(lo) == len(hi) == len(bins)) or len(lo) not in (1, 2):
            raise ValueError("grid must have 1 or 2 dimensions with matching lo/hi/bins")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("grid needs lo < hi")
        if any(b < 64 for b in bins):
            raise ValueError("grid needs at least 64 bins per dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "bins", bins)

    @classmethod
    def uniform(cls, d: int, lo: float = -8.0, hi: float = 8.0, bins: int = 512) -> "GridSpec":
        return cls((lo,) * d, (hi,) * d, (bins,) * d)

    @property
    def d(self) -> int:
        return len(self.bins)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([(b - a) / n for a, b, n in zip(self.lo, self.hi, self.bins)]))

    def midpoints(self) -> np.ndarray:
        """Bin centres, shape ``(prod(bins), d)``, C order over the bin axes."""
        axes = [a + (np.arange(n) + 0.5) * (b - a) / n for a, b, n in zip(self.lo, self.hi, self.bins)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def counts(self, samples: np.ndarray) -> tuple[np.ndarray, int]:
        """Flat histogram counts and the number of samples that fell outside."""
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != self.d:
            raise ValueError(f"samples must have shape (n, {self.d})")
        inside = np.ones(samples.shape[0], dtype=bool)
        flat = np.zeros(samples.shape[0], dtype=np.int64)
        for c, (a, b, n) in enumerate(zip(self.lo, self.hi, self.bins)):
            idx = np.floor((samples[:, c] - a) / (b - a) * n).astype(np.int64)
            inside &= (idx >= 0) & (idx < n)
            flat = flat * n + np.clip(idx, 0, n - 1)
        total = int(np.prod(self.bins))
        return np.bincount(flat[inside], minlength=total).astype(float), int((~inside).sum())


def _log_density_fn(q):
    if isinstance(q, GmmModel):
        return lambda x: log_density(q, 0.0, x)
    return q


def reference_masses(q_log_density, grid: GridSpec) -> np.ndarray:
    """Midpoint-rule bin masses of a density; raises if it leaks outside the grid."""
    logq = np.asarray(_log_density_fn(q_log_density)(grid.midpoints()), dtype=float)
    qbar = np.exp(logq) * grid.cell_volume
    leak = 1.0 - qbar.sum()
    if abs(leak) > REF_LEAK_TOL:
        raise ValueError(f"reference density mass outside grid is {leak:.3g} (> {REF_LEAK_TOL})")
    return qbar / qbar.sum()


# ---------------------------------------------------------------- divergences


@dataclass(frozen=True)
class KLEstimate:
    value: float
    outside_mass: float
    warning: bool

    def __float__(self):
        return self.value


def kl_grid(samples_p, q_log_density, grid: GridSpec, eps: float = KL_EPS) -> KLEstimate:
    """Histogram estimate of ``KL(p || q)`` against an analytic ``q``.

    ``p`` is the in-grid histogram with ``eps`` added per bin and renormalised;
    ``q`` is integrated per bin by the midpoint rule. The result carries a
    warning flag when more than 1% of the samples fall outside the grid.
    """
    counts, outside = grid.counts(samples_p)
    n = counts.sum() + outside
    if counts.sum() == 0:
        raise ValueError("no samples inside the grid")
    p = counts / counts.sum() + eps
    p /= p.sum()
    q = np.maximum(reference_masses(q_log_density, grid), 1e-300)
    value = float(np.sum(p * np.log(p / q)))
    frac = outside / n
    if frac > OUT_OF_GRID_WARN:
        warnings.warn(f"{frac:.2%} of samples fall outside the KL grid", RuntimeWarning, stacklevel=2)
    return KLEstimate(value, float(frac), bool(frac > OUT_OF_GRID_WARN))


def kl_monte_carlo(p_log_density, q_log_density, samples_from_p) -> tuple[float, float]:
    """``KL(p || q)`` as the sample mean of ``log p - log q``, with its standard error."""
    lp = np.asarray(_log_density_fn(p_log_density)(samples_from_p), dtype=float)
    lq = np.asarray(_log_density_fn(q_log_density)(samples_from_p), dtype=float)
    diff = lp - lq
    if not np.all(np.isfinite(diff)):
        raise ValueError("densities are not finite on the samples")
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(len(diff)))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``||mu_a - mu_b||^2 + tr(A + B - 2 (A^1/2 B A^1/2)^1/2)``, clamped at zero."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(float), np.atleast_1d(mu_b).astype(float)
    a, b = np.atleast_2d(cov_a).astype(float), np.atleast_2d(cov_b).astype(float)
    ra = _sqrt_psd(a)
    w = np.linalg.eigvalsh(0.5 * ((ra @ b @ ra) + (ra @ b @ ra).T))
    cross = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(a) + np.trace(b) - 2.0 * cross)
    return max(value, 0.0)


def _moments(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if np.linalg.matrix_rank(cov) < cov.shape[0]:
        warnings.warn("singular sample covariance; regularising", RuntimeWarning, stacklevel=3)
        cov = cov + FRECHET_REG * np.eye(cov.shape[0])
    return x.mean(axis=0), cov


def frechet_gaussian(samples_a, samples_b) -> float:
    """Frechet distance between Gaussians fitted to two sample sets (identity features)."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    return frechet_from_moments(*_moments(a), *_moments(b))


def fisher_divergence_grid(p_score, q_score, p_density, grid: GridSpec) -> float:
    """``sum_bins p * ||score_p - score_q||^2 * volume`` at bin midpoints."""
    x = grid.midpoints()
    sp = np.asarray(p_score(x), dtype=float)
    sq = np.asarray(q_score(x), dtype=float)
    if sp.shape == sq.shape and np.array_equal(sp, sq):
        return 0.0
    pd = np.asarray(p_density(x), dtype=float)
    return float(np.sum(pd * np.sum((sp - sq) ** 2, axis=1)) * grid.cell_volume)


# ---------------------------------------------------------------- BD metrics


@dataclass(frozen=True)
class RateCurve:
    rate: np.ndarray
    metric: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rate, dtype=float)
        m = np.asarray(self.metric, dtype=float)
        if r.ndim != 1 or r.shape != m.shape:
            raise ValueError("rate and metric must be 1-D arrays of equal length")
        if len(r) < 4:
            raise ValueError("a rate curve needs at least 4 points")
        if np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise ValueError("rates must be positive and strictly increasing")
        if not np.all(np.isfinite(m)):
            raise ValueError("metrics must be finite")
        object.__setattr__(self, "rate", r)
        object.__setattr__(self, "metric", m)


def bd_interval(anchor: RateCurve, test: RateCurve) -> tuple[float, float]:
    lo = max(np.log(anchor.rate).min(), np.log(test.rate).min())
    hi = min(np.log(anchor.rate).max(), np.log(test.rate).max())
    if not hi > lo:
        raise ValueError("rate curves do not overlap")
    return float(lo), float(hi)


def bd_delta(anchor: RateCurve, test: RateCurve) -> float:
    """Average metric gap of ``test`` over ``anchor`` on the shared log-rate range (cubic fits)."""
    lo, hi = bd_interval(anchor, test)
    pa = np.polyint(np.polyfit(np.log(anchor.rate), anchor.metric, 3))
    pt = np.polyint(np.polyfit(np.log(test.rate), test.metric, 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    it = np.polyval(pt, hi) - np.polyval(pt, lo)
    return float((it - ia) / (hi - lo))


def read_rate_curve(path) -> RateCurve:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["rate_bits", "metric"]:
            raise ValueError(f"{path}: expected header 'rate_bits,metric', got {header}")
        rows = [(float(a), float(b)) for a, b in reader]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    r, m = zip(*rows)
    return RateCurve(np.array(r), np.array(m))


def write_rate_curve(curve: RateCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("rate_bits,metric\n")
        for r, m in zip(curve.rate, curve.metric):
            fh.write(f"{float(r)!r},{float(m)!r}\n")


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    mse: float
    psnr_db: float
    kl_grid: float
    frechet: float
    nfe: int
    rate_bits: float
    fisher: float | None = None
    extra: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, allow_nan=True)
