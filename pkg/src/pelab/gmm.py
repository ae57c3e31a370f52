"""Diagonal Gaussian mixtures with closed-form noisy marginals.

Under variance-exploding noise of level ``sigma`` the marginal of a mixture
is the same mixture with every component variance increased by ``sigma**2``,
so densities, scores and Tweedie means at any noise level are exact. These
models stand in for a pre-trained score network.

Sample batches are plain ``(n, d)`` float arrays throughout the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import rng

SIGMA_FLOOR = 1e-4
RESP_FLOOR = 1e-300
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Mixture of diagonal Gaussians.

    Attributes:
        weights: ``(K,)`` mixing weights, strictly positive, summing to one.
        means: ``(K, d)`` component means.
        variances: ``(K, d)`` per-coordinate component variances.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        if var.ndim == 1:
            var = var[:, None]
        if w.ndim != 1 or mu.shape[0] != w.shape[0] or var.shape != mu.shape:
            raise ValueError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}"
            )
        if not 1 <= mu.shape[1] <= 16:
            raise ValueError(f"dimension must be in 1..16, got {mu.shape[1]}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be strictly positive and sum to 1")
        if not np.all(np.isfinite(mu)):
            raise ValueError("component means must be finite")
        if np.any(~np.isfinite(var)) or np.any(var <= 0):
            raise ValueError("variances must be finite and strictly positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def noised(self, sigma: float) -> "GmmModel":
        """Marginal after adding ``N(0, sigma^2 I)`` noise."""
        return GmmModel(self.weights, self.means, self.variances + float(sigma) ** 2)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        second = np.einsum("k,ki,kj->ij", self.weights, self.means, self.means)
        second += np.diag(self.weights @ self.variances)
        return second - np.outer(m, m)

    def default_peak(self) -> float:
        """Span used as PSNR peak: component extent padded by 4 standard deviations."""
        std = float(np.sqrt(self.variances.max()))
        return float(self.means.max() + 4 * std - (self.means.min() - 4 * std))

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "components": [
                {"weight": float(w), "mean": [float(v) for v in m], "variance": [float(v) for v in s]}
                for w, m, s in zip(self.weights, self.means, self.variances)
            ],
        }


def model_from_dict(spec: dict) -> GmmModel:
    """Strictly parse ``{d, components: [{weight, mean, variance}]}``."""
    if not isinstance(spec, dict):
        raise ValueError("model spec must be a mapping")
    extra = set(spec) - {"d", "components"}
    if extra:
        raise ValueError(f"unknown model keys: {sorted(extra)}")
    if "d" not in spec or "components" not in spec:
        raise ValueError("model spec needs 'd' and 'components'")
    d = spec["d"]
    if not isinstance(d, int) or isinstance(d, bool):
        raise ValueError("'d' must be an integer")
    comps = spec["components"]
    if not isinstance(comps, list) or not comps:
        raise ValueError("'components' must be a non-empty list")
    w, mu, var = [], [], []
    for c in comps:
        if not isinstance(c, dict) or set(c) != {"weight", "mean", "variance"}:
            raise ValueError("each component needs exactly weight, mean, variance")
        if len(c["mean"]) != d or len(c["variance"]) != d:
            raise ValueError(f"component mean/variance must have length d={d}")
        w.append(float(c["weight"]))
        mu.append([float(v) for v in c["mean"]])
        var.append([float(v) for v in c["variance"]])
    return GmmModel(np.array(w), np.array(mu), np.array(var))


def _builtin(name: str) -> GmmModel:
    if name == "std-normal-1d":
        return GmmModel(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))
    if name == "bimodal-1d":
        return GmmModel(np.array([0.5, 0.5]), np.array([[-2.0], [2.0]]), np.array([[0.25], [0.25]]))
    if name == "grid-gmm-2d":
        pts = np.array([(a, b) for a in (-4.0, 0.0, 4.0) for b in (-4.0, 0.0, 4.0)])
        return GmmModel(np.full(9, 1.0 / 9.0), pts, np.full((9, 2), 0.25))
    raise KeyError(name)


BUILTIN_MODELS = ("std-normal-1d", "bimodal-1d", "grid-gmm-2d")


def load_model(ref) -> GmmModel:
    """Resolve a built-in name, a path to a JSON/YAML model file, or an inline mapping."""
    if isinstance(ref, GmmModel):
        return ref
    if isinstance(ref, dict):
        return model_from_dict(ref)
    if ref in BUILTIN_MODELS:
        return _builtin(ref)
    path = Path(ref)
    if not path.exists():
        raise ValueError(f"unknown model {ref!r}: not a built-in name or a file")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        return model_from_dict(yaml.safe_load(text))
    return model_from_dict(json.loads(text))


def _as_batch(model: GmmModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != model.d:
        raise ValueError(f"expected points of dimension {model.d}, got shape {x.shape}")
    return x2, single


def _log_joint(model: GmmModel, sigma_t: float, x: np.ndarray):
    """``log w_k + log N(x_n; mu_k, v_k + sigma_t^2)`` as a ``(K, n)`` array, plus ``1/var``."""
    var = model.variances + float(sigma_t) ** 2  # (K, d)
    iv = 1.0 / var
    logc = np.log(model.weights) - 0.5 * (np.log(var).sum(axis=1) + model.d * LOG_2PI)
    lj = np.empty((model.k, x.shape[0]))
    for k in range(model.k):
        q = np.zeros(x.shape[0])
        for c in range(model.d):
            t = x[:, c] - model.means[k, c]
            q += t * t * iv[k, c]
        lj[k] = logc[k] - 0.5 * q
    return lj, iv


def _normalised(lj: np.ndarray):
    """Responsibilities (clipped at ``RESP_FLOOR``) and the row maxima, in place."""
    mx = lj.max(axis=0)
    lj -= mx
    np.exp(lj, out=lj)
    np.maximum(lj, RESP_FLOOR, out=lj)
    lj /= lj.sum(axis=0)
    return lj, mx


def log_density(model: GmmModel, sigma_t: float, x) -> np.ndarray | float:
    """``log p_t(x)`` of the mixture convolved with ``N(0, sigma_t^2 I)``."""
    x2, single = _as_batch(model, x)
    lj, _ = _log_joint(model, sigma_t, x2)
    out = logsumexp(lj, axis=0)
    return float(out[0]) if single else out


def _score_parts(model, sigma_t, x2):
    lj, iv = _log_joint(model, sigma_t, x2)
    r, _ = _normalised(lj)
    # per-component scores -(x - mu_k) / var_k, shape (K, n, d)
    sk = np.empty((model.k,) + x2.shape)
    for k in range(model.k):
        sk[k] = (model.means[k] - x2) * iv[k]
    s = np.zeros_like(x2)
    for k in range(model.k):
        s += r[k][:, None] * sk[k]
    return r, sk, s, iv


def score(model: GmmModel, sigma_t: float, x) -> np.ndarray:
    """Gradient of ``log p_t`` at ``x``; same shape as ``x``."""
    x2, single = _as_batch(model, x)
    lj, iv = _log_joint(model, sigma_t, x2)
    r, _ = _normalised(lj)
    s = np.zeros_like(x2)
    for k in range(model.k):
        s -= r[k][:, None] * (x2 - model.means[k]) * iv[k]
    return s[0] if single else s


def score_hvp(model: GmmModel, sigma_t: float, x, v) -> np.ndarray:
    """Row-wise product of the score Jacobian (Hessian of ``log p_t``) with ``v``.

    ``H = sum_k r_k (s_k s_k^T - diag(1/var_k)) - s s^T``.
    """
    x2, single = _as_batch(model, x)
    v2 = np.asarray(v, dtype=float).reshape(x2.shape)
    r, sk, s, iv = _score_parts(model, sigma_t, x2)
    out = -np.sum(s * v2, axis=1, keepdims=True) * s
    for k in range(model.k):
        skv = np.sum(sk[k] * v2, axis=1, keepdims=True)
        out += r[k][:, None] * (sk[k] * skv - v2 * iv[k])
    return out[0] if single else out


def posterior_mean(model: GmmModel, sigma_t: float, x_t) -> np.ndarray:
    """Tweedie estimate ``E[X_0 | X_t = x_t] = x_t + sigma_t^2 * score``."""
    x_t = np.asarray(x_t, dtype=float)
    return x_t + float(sigma_t) ** 2 * score(model, sigma_t, x_t)


def consistency_map(model: GmmModel, sigma_t: float, x_t, oracle_steps: int = 512) -> np.ndarray:
    """PF-ODE solution map from ``sigma_t`` down to (near) zero noise.

    Single-component models use the exact linear flow
    ``mu + (x - mu) * sqrt(v / (v + sigma_t^2))``; mixtures are integrated with
    ``oracle_steps`` Heun steps to ``SIGMA_FLOOR``.
    """
    x_t = np.asarray(x_t, dtype=float)
    _as_batch(model, x_t)
    if sigma_t <= 0:
        return x_t.copy()
    if model.k == 1:
        mu, var = model.means[0], model.variances[0]
        return mu + (x_t - mu) * np.sqrt(var / (var + float(sigma_t) ** 2))
    if oracle_steps < 64:
        raise ValueError("oracle_steps must be at least 64 for mixtures")
    from .solvers import ode_heun

    single = x_t.ndim <= 1
    out, _ = ode_heun(ExactScore(model), x_t.reshape(-1, model.d), sigma_t, oracle_steps)
    return out[0] if single else out


def sample_data(model: GmmModel, n: int, seed, offset: int = 0) -> np.ndarray:
    """Draw ``n`` i.i.d. samples; row ``i`` depends only on ``(seed, offset + i)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    stream = rng.stream(seed, "data", n, offset)
    u = stream.uniform(0, 1)[:, 0]
    comp = np.searchsorted(np.cumsum(model.weights), u * model.weights.sum(), side="left")
    comp = np.minimum(comp, model.k - 1)
    z = stream.normal(1, model.d)
    return model.means[comp] + np.sqrt(model.variances[comp]) * z


class ExactScore:
    """Score oracle for a mixture; call signature ``score_fn(sigma, x)``."""

    def __init__(self, model: GmmModel):
        self.model = model

    def __call__(self, sigma: float, x: np.ndarray) -> np.ndarray:
        return score(self.model, sigma, x)

    def hvp(self, sigma: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return score_hvp(self.model, sigma, x, v)


@dataclass(frozen=True)
class PerturbedScore:
    """Exact score plus the bias ``amplitude * sin(frequency * x)`` per coordinate.

    Amplitude zero reproduces the exact score bit for bit.
    """

    base: GmmModel
    amplitude: float = 0.0
    frequency: float = 1.0

    def __post_init__(self):
        if self.amplitude < 0 or self.frequency <= 0:
            raise ValueError("need amplitude >= 0 and frequency > 0")

    def __call__(self, sigma: float, x: np.ndarray) -> np.ndarray:
        return perturbed_score(self, sigma, x)

    def hvp(self, sigma: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = score_hvp(self.base, sigma, x, v)
        if self.amplitude == 0:
            return out
        x = np.asarray(x, dtype=float)
        return out + self.amplitude * self.frequency * np.cos(self.frequency * x) * v


def perturbed_score(ps: PerturbedScore, sigma_t: float, x) -> np.ndarray:
    s = score(ps.base, sigma_t, x)
    if ps.amplitude == 0:
        return s
    return s + ps.amplitude * np.sin(ps.frequency * np.asarray(x, dtype=float))
