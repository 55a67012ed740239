"""Gumbel-Softmax sampling, temperature annealing, and sweep generation.

The sampler draws standard Gumbel noise g = -log(-log(u)) from uniform u
clamped away from {0, 1}, then relaxes a categorical draw as
softmax((logits + omega * g) / tau). omega = 1.0 is the training mode,
omega = 0.0 disables the noise for deterministic generation. Samples stay
soft in both modes; there is no straight-through rounding anywhere.

The annealing schedule multiplies the temperature by ``factor`` once every
``interval`` optimizer steps (default: every step) and never drops below
``cutoff``.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

UNIFORM_EPS = 1e-12


def _stable_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sample_gumbel(k, rng, draws=None):
    """Draw standard Gumbel noise, shape (k,) or (draws, k).

    Uniform draws are clamped to [1e-12, 1 - 1e-12] before the double log so
    the result is always finite.
    """
    if k < 1:
        raise ContractError("sample_gumbel: k must be >= 1")
    size = (k,) if draws is None else (int(draws), k)
    u = rng.random(size)
    u = np.clip(u, UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


@dataclass(frozen=True)
class GumbelConfig:
    """Sampler settings: component count k, temperature tau, noise scale omega."""

    k: int
    tau: float
    omega: float = 1.0

    def __post_init__(self):
        if self.k < 2:
            raise ContractError("GumbelConfig: k must be >= 2")
        if not (self.tau > 0.0):
            raise ContractError("GumbelConfig: tau must be > 0")
        if self.omega not in (0.0, 1.0):
            raise ContractError("GumbelConfig: omega must be 0.0 or 1.0")


def gumbel_softmax(logits, cfg, rng):
    """Relaxed categorical sample(s) from logits.

    logits: (k,) vector or (draws, k) matrix. Returns probabilities of the
    same shape; each row sums to 1 and stays strictly inside the simplex.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != cfg.k:
        raise ContractError("gumbel_softmax: logits last axis %d != k %d"
                            % (logits.shape[-1], cfg.k))
    if not np.all(np.isfinite(logits)):
        raise ContractError("gumbel_softmax: logits must be finite")
    z = logits
    if cfg.omega != 0.0:
        if logits.ndim == 1:
            g = sample_gumbel(cfg.k, rng)
        else:
            g = sample_gumbel(cfg.k, rng, draws=logits.shape[0])
        z = logits + cfg.omega * g
    return _stable_softmax(z / cfg.tau)


@dataclass(frozen=True)
class AnnealingSchedule:
    """Stepwise exponential temperature decay with a floor."""

    tau_start: float = 2.0
    factor: float = 0.9999
    cutoff: float = 0.1
    interval: int = 1

    def __post_init__(self):
        if not (self.tau_start > 0.0):
            raise ContractError("AnnealingSchedule: tau_start must be > 0")
        if not (0.0 < self.factor <= 1.0):
            raise ContractError("AnnealingSchedule: factor must be in (0, 1]")
        if not (0.0 < self.cutoff <= self.tau_start):
            raise ContractError("AnnealingSchedule: cutoff must be in (0, tau_start]")
        if self.interval < 1:
            raise ContractError("AnnealingSchedule: interval must be >= 1")


def tau_at(schedule, step):
    """Temperature after ``step`` optimizer steps (step 0 = tau_start)."""
    if step < 0:
        raise ContractError("tau_at: step must be >= 0")
    decays = step // schedule.interval
    return max(schedule.cutoff, schedule.tau_start * schedule.factor ** decays)


def sample_sweep(logits, taus, draws_per_tau, rng):
    """Draw relaxed samples over a temperature grid.

    Returns a list of (tau, draw_index, sample_vector) with samples drawn
    noise-first per tau so the grid is covered deterministically for a given
    rng state.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ContractError("sample_sweep: logits must be a vector")
    if draws_per_tau < 0:
        raise ContractError("sample_sweep: draws_per_tau must be >= 0")
    rows = []
    for tau in taus:
        cfg = GumbelConfig(k=logits.shape[0], tau=float(tau), omega=1.0)
        if draws_per_tau == 0:
            continue
        samples = gumbel_softmax(np.tile(logits, (draws_per_tau, 1)), cfg, rng)
        for d in range(draws_per_tau):
            rows.append((float(tau), d, samples[d]))
    return rows


def write_sweep_csv(rows, fh):
    """Serialize sweep rows as tau,draw,component,value (one line per component)."""
    w = csv.writer(fh)
    w.writerow(["tau", "draw", "component", "value"])
    for tau, draw, sample in rows:
        for comp, val in enumerate(sample):
            w.writerow([repr(tau), draw, comp, repr(float(val))])
