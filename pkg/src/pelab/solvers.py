"""Noise schedules, forward noising and reverse-time samplers.

All samplers integrate from ``start_sigma`` down to ``SIGMA_FLOOR`` on a
schedule built fresh for that start level. A score source is any callable
``score_fn(sigma, x) -> array``; one call on the whole batch counts as one
function evaluation (NFE).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .gmm import SIGMA_FLOOR, ExactScore, GmmModel, PerturbedScore, consistency_map

SOLVERS = ("sde-euler", "ode-euler", "ode-heun", "consistency", "dps-sde")
GRADIENT_MODES = ("recon-consistency", "bitstream-consistency", "finite-difference")
DEFAULT_ZETA = 0.3
GRAD_CLIP = 10.0
FD_STEP = 1e-4


class ConfigurationError(ValueError):
    """A solver was asked for a combination it cannot honour."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float
    sigma_max: float
    n_steps: int
    spacing: str = "geometric"

    @property
    def grid(self) -> np.ndarray:
        """Strictly increasing ``sigma_0 < ... < sigma_n``."""
        i = np.arange(self.n_steps + 1) / self.n_steps
        if self.spacing == "geometric":
            g = self.sigma_min * (self.sigma_max / self.sigma_min) ** i
        else:
            g = self.sigma_min + (self.sigma_max - self.sigma_min) * i
        g[0], g[-1] = self.sigma_min, self.sigma_max
        return g


def build_schedule(sigma_min: float, sigma_max: float, n_steps: int, spacing: str = "geometric") -> NoiseSchedule:
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    if spacing not in ("geometric", "linear"):
        raise ValueError(f"unknown spacing {spacing!r}")
    return NoiseSchedule(float(sigma_min), float(sigma_max), int(n_steps), spacing)


@dataclass
class SolverRun:
    solver: str
    start_sigma: float
    nfe: int = 0
    steps: int = 0
    score_source: str = "exact"
    inner_steps: int = 0


def _source_kind(score_fn) -> str:
    if isinstance(score_fn, PerturbedScore) and score_fn.amplitude > 0:
        return "perturbed"
    return "exact"


def _grid(schedule, start_sigma: float) -> np.ndarray:
    if isinstance(schedule, NoiseSchedule):
        if not np.isclose(schedule.sigma_max, start_sigma, rtol=1e-12, atol=0):
            raise ValueError("schedule must end at start_sigma")
        return schedule.grid
    return build_schedule(SIGMA_FLOOR, start_sigma, int(schedule)).grid


def add_noise(x: np.ndarray, sigma_t: float, seed, offset: int = 0) -> np.ndarray:
    """``x + N(0, sigma_t^2 I)``; row ``i`` noise depends only on ``(seed, offset + i)``."""
    x = np.asarray(x, dtype=float)
    if sigma_t == 0:
        return x.copy()
    z = rng.stream(seed, "add_noise", x.shape[0], offset).normal(0, x.shape[1])
    return x + float(sigma_t) * z


def _readout(score_fn, x, run, readout):
    if readout == "tweedie":
        run.nfe += 1
        return x + SIGMA_FLOOR**2 * score_fn(SIGMA_FLOOR, x)
    if readout != "raw":
        raise ValueError(f"unknown readout {readout!r}")
    return x


def sde_euler(score_fn, x_start, start_sigma, schedule, seed, offset=0, readout="raw"):
    """Euler-Maruyama on the reverse VE SDE, one NFE per step.

    ``x <- x + (s_i^2 - s_{i-1}^2) * score(s_i, x) + sqrt(s_i^2 - s_{i-1}^2) * z``
    """
    x = np.array(x_start, dtype=float)
    run = SolverRun("sde-euler", float(start_sigma), score_source=_source_kind(score_fn))
    if start_sigma <= SIGMA_FLOOR:
        return x, run
    g = _grid(schedule, start_sigma)
    stream = rng.stream(seed, "solver", x.shape[0], offset)
    for i in range(len(g) - 1, 0, -1):
        dv = g[i] ** 2 - g[i - 1] ** 2
        x = x + dv * score_fn(g[i], x) + np.sqrt(dv) * stream.normal(i, x.shape[1])
        run.nfe += 1
        run.steps += 1
    return _readout(score_fn, x, run, readout), run


def ode_euler(score_fn, x_start, start_sigma, schedule, readout="raw"):
    """Euler steps in ``sigma^2`` on the probability-flow ODE, slope ``-score/2``."""
    x = np.array(x_start, dtype=float)
    run = SolverRun("ode-euler", float(start_sigma), score_source=_source_kind(score_fn))
    if start_sigma <= SIGMA_FLOOR:
        return x, run
    g = _grid(schedule, start_sigma)
    for i in range(len(g) - 1, 0, -1):
        x = x + 0.5 * (g[i] ** 2 - g[i - 1] ** 2) * score_fn(g[i], x)
        run.nfe += 1
        run.steps += 1
    return _readout(score_fn, x, run, readout), run


def ode_heun(score_fn, x_start, start_sigma, schedule, readout="raw"):
    """Heun predictor-corrector on the PF-ODE; the last interval is a plain Euler step.

    Uses ``2 * steps - 1`` evaluations.
    """
    x = np.array(x_start, dtype=float)
    run = SolverRun("ode-heun", float(start_sigma), score_source=_source_kind(score_fn))
    if start_sigma <= SIGMA_FLOOR:
        return x, run
    g = _grid(schedule, start_sigma)
    for i in range(len(g) - 1, 0, -1):
        h = 0.5 * (g[i] ** 2 - g[i - 1] ** 2)
        s = score_fn(g[i], x)
        run.nfe += 1
        if i > 1:
            s2 = score_fn(g[i - 1], x + h * s)
            run.nfe += 1
            s = 0.5 * (s + s2)
        x = x + h * s
        run.steps += 1
    return _readout(score_fn, x, run, readout), run


def consistency_step(model, sigma_t, x_t, oracle_steps=512):
    """One-call stand-in for a distilled consistency model (reported as 1 NFE).

    ``model`` may be a :class:`GmmModel` or a score source; a perturbed source
    is distilled with its bias, i.e. the ODE is integrated with the biased score.
    """
    x_t = np.asarray(x_t, dtype=float)
    kind = _source_kind(model)
    if isinstance(model, ExactScore):
        model = model.model
    if isinstance(model, PerturbedScore) and model.amplitude == 0:
        model = model.base
    run = SolverRun("consistency", float(sigma_t), nfe=1, steps=1, score_source=kind)
    if isinstance(model, GmmModel):
        run.inner_steps = 0 if model.k == 1 else oracle_steps
        return consistency_map(model, sigma_t, x_t, oracle_steps), run
    run.inner_steps = oracle_steps
    if sigma_t <= SIGMA_FLOOR:
        return x_t.copy(), run
    out, _ = ode_heun(model, x_t, sigma_t, oracle_steps)
    return out, run


def _clip_rows(g: np.ndarray, limit: float) -> np.ndarray:
    norm = np.sqrt(np.sum(g**2, axis=1, keepdims=True))
    scale = np.minimum(1.0, limit / np.maximum(norm, 1e-300))
    return g * scale


def constraint_gradient(score_fn, sigma, x, s, x_hat=None, codec=None, y=None, mode="recon-consistency"):
    """Gradient of the data-consistency loss at ``x`` plus the NFE it cost.

    ``recon-consistency``: ``||E[X0|x] - x_hat||^2`` differentiated through Tweedie.
    ``bitstream-consistency``: ``||soft_index(E[X0|x]) - y||^2`` through the codec's
    soft quantiser. ``finite-difference``: central differences of the
    recon-consistency loss, needing only score calls.
    """
    s2 = sigma**2
    if mode == "recon-consistency":
        if not hasattr(score_fn, "hvp"):
            raise ConfigurationError("analytic gradient needs a score source with hvp()")
        r = x + s2 * s - x_hat
        return 2.0 * (r + s2 * score_fn.hvp(sigma, x, r)), 1
    if mode == "bitstream-consistency":
        if codec is None or not getattr(codec, "differentiable", False) or not hasattr(codec, "soft_index"):
            raise ConfigurationError("bitstream-consistency needs a differentiable codec with a soft quantiser")
        if not hasattr(score_fn, "hvp"):
            raise ConfigurationError("analytic gradient needs a score source with hvp()")
        m = x + s2 * s
        soft, dsoft = codec.soft_index(m, derivative=True)
        u = dsoft * (soft - np.asarray(y.symbols, dtype=float))
        return 2.0 * (u + s2 * score_fn.hvp(sigma, x, u)), 1
    if mode == "finite-difference":
        d = x.shape[1]
        g = np.empty_like(x)
        for c in range(d):
            e = np.zeros(d)
            e[c] = FD_STEP
            lp = np.sum((x + e + s2 * score_fn(sigma, x + e) - x_hat) ** 2, axis=1)
            lm = np.sum((x - e + s2 * score_fn(sigma, x - e) - x_hat) ** 2, axis=1)
            g[:, c] = (lp - lm) / (2 * FD_STEP)
        return g, 2 * d
    raise ConfigurationError(f"unknown gradient mode {mode!r}")


def dps_sde(
    score_fn,
    x_start,
    start_sigma,
    schedule,
    seed,
    x_hat=None,
    codec=None,
    y=None,
    zeta=DEFAULT_ZETA,
    gradient_mode="recon-consistency",
    offset=0,
    readout="raw",
):
    """Reverse SDE with a posterior-sampling correction after every step.

    The correction is ``x_{i-1} -= zeta * (s_i^2 - s_{i-1}^2) * clip(grad L(x_i))``,
    i.e. a likelihood term with precision ``zeta`` added to the drift. With
    ``zeta == 0`` the output equals :func:`sde_euler` bit for bit.
    """
    if gradient_mode not in GRADIENT_MODES:
        raise ConfigurationError(f"unknown gradient mode {gradient_mode!r}")
    if gradient_mode == "bitstream-consistency" and not getattr(codec, "differentiable", False):
        raise ConfigurationError("bitstream-consistency requested on a non-differentiable codec")
    if gradient_mode != "bitstream-consistency" and x_hat is None and codec is not None and y is not None:
        x_hat = codec.decode(y)
    if gradient_mode != "bitstream-consistency" and x_hat is None and zeta > 0:
        raise ConfigurationError("recon-consistency needs the decoded reconstruction")
    if not np.isfinite(zeta) or zeta < 0:
        raise ValueError("zeta must be finite and nonnegative")

    x = np.array(x_start, dtype=float)
    run = SolverRun("dps-sde", float(start_sigma), score_source=_source_kind(score_fn))
    if start_sigma <= SIGMA_FLOOR:
        return x, run
    g = _grid(schedule, start_sigma)
    stream = rng.stream(seed, "solver", x.shape[0], offset)
    for i in range(len(g) - 1, 0, -1):
        dv = g[i] ** 2 - g[i - 1] ** 2
        s = score_fn(g[i], x)
        run.nfe += 1
        x_next = x + dv * s + np.sqrt(dv) * stream.normal(i, x.shape[1])
        if zeta > 0:
            grad, cost = constraint_gradient(score_fn, g[i], x, s, x_hat, codec, y, gradient_mode)
            run.nfe += cost
            x_next = x_next - zeta * dv * _clip_rows(grad, GRAD_CLIP)
        x = x_next
        run.steps += 1
    return _readout(score_fn, x, run, readout), run


def steps_for_budget(solver: str, nfe: int) -> int:
    """Largest step count whose NFE fits in ``nfe`` (0 if none fits)."""
    if solver in ("sde-euler", "ode-euler"):
        return nfe
    if solver == "ode-heun":
        return (nfe + 1) // 2
    if solver == "dps-sde":
        return nfe // 2
    if solver == "consistency":
        return 1 if nfe >= 1 else 0
    raise ValueError(f"unknown solver {solver!r}")


def run_solver(
    solver: str,
    score_fn,
    x_t,
    sigma_t,
    steps,
    seed,
    *,
    model=None,
    x_hat=None,
    codec=None,
    y=None,
    zeta=DEFAULT_ZETA,
    gradient_mode="recon-consistency",
    offset=0,
    readout="raw",
):
    """Dispatch by config name (``sde-euler``, ``ode-euler``, ``ode-heun``, ``consistency``, ``dps-sde``)."""
    if solver == "sde-euler":
        return sde_euler(score_fn, x_t, sigma_t, steps, seed, offset, readout)
    if solver == "ode-euler":
        return ode_euler(score_fn, x_t, sigma_t, steps, readout)
    if solver == "ode-heun":
        return ode_heun(score_fn, x_t, sigma_t, steps, readout)
    if solver == "consistency":
        src = model if isinstance(score_fn, ExactScore) and model is not None else score_fn
        return consistency_step(src, sigma_t, x_t)
    if solver == "dps-sde":
        return dps_sde(score_fn, x_t, sigma_t, steps, seed, x_hat, codec, y, zeta, gradient_mode, offset, readout)
    raise ConfigurationError(f"unknown solver {solver!r}")
