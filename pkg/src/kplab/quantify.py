"""Entropy-based information discarding at a feature tap.

For an input ``x`` and a frozen feature map ``f`` we look for the largest
Gaussian perturbation ``x' = x + sigma * delta`` (``delta ~ N(0, I)`` per
pixel) that keeps ``f(x')`` close to ``f(x)``, by minimising

    Loss(sigma) = E ||f(x') - f(x)||^2 / delta_f2  -  alpha * sum_i H_i,
    H_i = log sigma_i + 0.5 * log(2 pi e)

over one ``sigma`` per grid cell.  ``delta_f2`` is the feature response to
isotropic noise of a small fixed scale and makes the loss invariant to
rescaling of the feature.  Optimisation runs on ``psi = log sigma`` with
clipped gradient steps, projected onto ``[psi_min, psi_max]``; the returned
field is the average of the iterates over the final part of the run.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateFeatureError, DimensionError, NonFiniteError, OptimizationError
from .tensor import Tensor

HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)

FeatureFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class QuantifierConfig:
    """Knobs of the sigma fit.

    ``tau`` fixes the probe scale for ``delta_f2``; when ``None`` it is
    ``tau_rel * std(x)`` for each sample.  Each step draws
    ``max(n_mc_loss, ceil(min_cell_dof / pixels_per_cell))`` noise samples so
    that every cell sees at least ``min_cell_dof`` Gaussian degrees of freedom
    per step.  ``tail_fraction`` is the share of final iterates averaged into
    the result.  ``grid_mode`` is
    ``"shared_sigma"`` (one sigma per cell, independent pixel noise) or
    ``"shared_noise"`` (one noise draw per cell).
    """

    alpha: float = 1.0
    tau: Optional[float] = None
    tau_rel: float = 0.01
    n_mc_delta: int = 256
    n_steps: int = 200
    n_mc_loss: int = 8
    min_cell_dof: int = 128
    lr_sigma: float = 0.05
    sigma_init: float = 0.1
    psi_min: float = math.log(1e-4)
    psi_max: float = math.log(1e2)
    grid: tuple = (4, 4)
    clip_norm: float = 10.0
    tail_fraction: float = 0.5
    n_validation: int = 64
    grid_mode: str = "shared_sigma"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.tau_rel <= 0:
            raise ConfigError("tau_rel must be positive")
        if not self.psi_min < math.log(self.sigma_init) < self.psi_max:
            raise ConfigError("log(sigma_init) must lie strictly inside [psi_min, psi_max]")
        if min(self.n_mc_delta - 1, self.n_mc_loss, self.n_steps, self.n_validation) < 1 or self.min_cell_dof < 0:
            raise ConfigError("sample and step counts too small")
        if self.lr_sigma <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr_sigma and clip_norm must be positive")
        if not 0 < self.tail_fraction <= 1:
            raise ConfigError("tail_fraction must lie in (0, 1]")
        if self.grid_mode not in ("shared_sigma", "shared_noise"):
            raise ConfigError(f"unknown grid_mode {self.grid_mode!r}")
        if min(self.grid) < 1:
            raise ConfigError("grid cells must be at least 1x1")

    def cells(self, spatial: tuple) -> tuple:
        h, w = spatial
        gh, gw = self.grid
        if h % gh or w % gw:
            raise ConfigError(f"grid {self.grid} does not divide input {h}x{w}")
        return h // gh, w // gw

    def draws_per_step(self, channels: int = 1) -> int:
        per_cell = self.grid[0] * self.grid[1] * channels
        return max(self.n_mc_loss, -(-self.min_cell_dof // per_cell))

    def tau_for(self, x: np.ndarray) -> float:
        if self.tau is not None:
            return float(self.tau)
        s = float(np.std(x))
        if s <= 0:
            raise DegenerateFeatureError("constant input has no scale for tau")
        return self.tau_rel * s


@dataclass
class SigmaField:
    sigma: np.ndarray
    grid: tuple
    sample_id: int = 0
    tap: Optional[str] = None
    delta_f2: float = float("nan")
    tau: float = float("nan")
    loss_initial: float = float("nan")
    loss_final: float = float("nan")
    degenerate: bool = False
    notes: list = field(default_factory=list)

    @property
    def psi(self) -> np.ndarray:
        return np.log(self.sigma)


@dataclass
class EntropyMap:
    H: np.ndarray
    foreground: np.ndarray
    sample_id: int = 0
    tap: Optional[str] = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.foreground = np.asarray(self.foreground, dtype=bool)
        if self.H.shape != self.foreground.shape:
            raise DimensionError(f"entropy grid {self.H.shape} vs mask {self.foreground.shape}")

    @property
    def background(self) -> np.ndarray:
        return ~self.foreground


def entropy_map(sigma: SigmaField, mask) -> EntropyMap:
    """Per-cell ``H = log sigma + 0.5 log(2 pi e)`` with the cell-level foreground mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != sigma.sigma.shape:
        raise DimensionError(f"mask {mask.shape} does not match sigma grid {sigma.sigma.shape}")
    return EntropyMap(np.log(sigma.sigma) + HALF_LOG_2PIE, mask, sigma.sample_id, sigma.tap)


def _rng(seed: int, sample_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(sample_id), stream])


def _features(feature_fn: FeatureFn, xs: np.ndarray, chunk: int = 256) -> np.ndarray:
    with T.no_grad():
        out = [feature_fn(Tensor(xs[s:s + chunk])).data for s in range(0, len(xs), chunk)]
    return np.concatenate(out).reshape(len(xs), -1)


def estimate_delta_f2(feature_fn: FeatureFn, x, tau: float, n: int = 256, seed: int = 0,
                      sample_id: int = 0) -> float:
    """Monte-Carlo ``E ||f(x + tau*delta) - f(x)||^2`` over ``n`` standard normal draws."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    if n < 2:
        raise ConfigError("need at least two draws")
    x = np.asarray(x, dtype=np.float64)
    fstar = _features(feature_fn, x[None])[0]
    delta = _rng(seed, sample_id, 0xD5).standard_normal((n,) + x.shape)
    f = _features(feature_fn, x[None] + tau * delta)
    value = float(np.mean(np.sum((f - fstar) ** 2, axis=1)))
    if not np.isfinite(value):
        raise DegenerateFeatureError("delta_f2 is not finite")
    if value <= 0.0:
        raise DegenerateFeatureError("feature is locally constant (delta_f2 == 0)")
    return value


def _noise(rng, n, channels, shape, cells, cfg):
    if cfg.grid_mode == "shared_noise":
        z = rng.standard_normal((n, channels) + cells)
        return np.repeat(np.repeat(z, cfg.grid[0], axis=-2), cfg.grid[1], axis=-1)
    return rng.standard_normal((n, channels) + shape)


def _mean_sq_dist(feature_fn, xs, fstar, psi, noise, grid):
    """Per-sample mean of ||f(x') - f*||^2 over the draws in ``noise`` (``[p, n, c, h, w]``)."""
    p, n = noise.shape[:2]
    sig = T.upsample_blocks(T.exp(psi), grid[0], grid[1])           # p, h, w
    sig = sig.reshape(p, 1, 1, sig.shape[1], sig.shape[2])
    xp = Tensor(xs[:, None]) + sig * Tensor(noise)                   # p, n, c, h, w
    f = feature_fn(xp.reshape((p * n,) + xs.shape[1:])).reshape(p, n, -1)
    return T.square(f - Tensor(fstar[:, None, :])).sum(axis=2).mean(axis=1)


def _entropy_sum(psi):
    return (psi + HALF_LOG_2PIE).sum(axis=(1, 2))


def _validation_losses(feature_fn, xs, fstar, psi, noise, delta_f2, alpha, grid, chunk):
    n = noise.shape[1]
    total = np.zeros(len(xs))
    with T.no_grad():
        for s in range(0, n, chunk):
            part = noise[:, s:s + chunk]
            total += _mean_sq_dist(feature_fn, xs, fstar, Tensor(psi), part, grid).data * part.shape[1]
    return total / n / delta_f2 - alpha * _entropy_sum(psi)


def optimize_sigma_batch(feature_fn: FeatureFn, xs, cfg: QuantifierConfig,
                         sample_ids: Optional[Sequence[int]] = None, tap: Optional[str] = None,
                         delta_f2: Optional[Sequence[float]] = None) -> list:
    """Fit one :class:`SigmaField` per sample; samples are optimised jointly but independently.

    Every sample draws its noise from its own stream keyed by
    ``(cfg.seed, sample_id)``, so results do not depend on batch composition
    beyond floating-point summation order.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 3:
        xs = xs[:, None]
    if xs.ndim != 4:
        raise DimensionError(f"expected [p, c, h, w] inputs, got {xs.shape}")
    p, c, h, w = xs.shape
    ids = list(range(p)) if sample_ids is None else [int(s) for s in sample_ids]
    cells = cfg.cells((h, w))
    if delta_f2 is None:
        taus = [cfg.tau_for(x) for x in xs]
        delta_f2 = [estimate_delta_f2(feature_fn, x, t, cfg.n_mc_delta, cfg.seed, i)
                    for x, t, i in zip(xs, taus, ids)]
    else:
        taus = [float("nan") if cfg.tau is None else cfg.tau] * p
    d2 = np.asarray(delta_f2, dtype=np.float64)
    if d2.shape != (p,):
        raise DimensionError(f"need one delta_f2 per sample, got {d2.shape}")
    if np.any(d2 <= 0):
        raise DegenerateFeatureError("delta_f2 must be positive")
    fstar = _features(feature_fn, xs)
    loss_rngs = [_rng(cfg.seed, i, 0x10) for i in ids]
    val_noise = np.stack([_noise(_rng(cfg.seed, i, 0x7A), cfg.n_validation, c, (h, w), cells, cfg)
                          for i in ids])

    n_draws = cfg.draws_per_step(c)

    def validation_loss(psi_arr):
        return _validation_losses(feature_fn, xs, fstar, psi_arr, val_noise, d2, cfg.alpha, cfg.grid,
                                  n_draws)

    psi = np.full((p,) + cells, math.log(cfg.sigma_init))
    loss0 = validation_loss(psi)
    n_tail = max(1, int(round(cfg.n_steps * cfg.tail_fraction)))
    tail_sum = np.zeros_like(psi)
    for step in range(cfg.n_steps):
        noise = np.stack([_noise(r, n_draws, c, (h, w), cells, cfg) for r in loss_rngs])
        psi_t = Tensor(psi, requires_grad=True)
        try:
            dist = _mean_sq_dist(feature_fn, xs, fstar, psi_t, noise, cfg.grid)
            loss = dist * Tensor(1.0 / d2) - _entropy_sum(psi_t) * cfg.alpha
            loss.sum().backward()
        except NonFiniteError as exc:
            raise OptimizationError(f"non-finite loss ({exc})", step) from exc
        g = psi_t.grad
        if not np.all(np.isfinite(loss.data)) or not np.all(np.isfinite(g)):
            raise OptimizationError("non-finite loss", step)
        norms = np.sqrt(np.sum(g * g, axis=(1, 2)))
        scale = np.minimum(1.0, cfg.clip_norm / np.maximum(norms, 1e-300))
        psi = np.clip(psi - cfg.lr_sigma * g * scale[:, None, None], cfg.psi_min, cfg.psi_max)
        if step >= cfg.n_steps - n_tail:
            tail_sum += psi
    last = psi
    psi = np.clip(tail_sum / n_tail, cfg.psi_min, cfg.psi_max)
    loss1 = validation_loss(psi)

    out = []
    for k in range(p):
        clamped = bool(np.all(last[k] >= cfg.psi_max))
        notes = []
        if clamped:
            notes.append("all cells at the upper sigma bound")
            warnings.warn(f"sample {ids[k]}: every cell clamped at sigma_max", RuntimeWarning, stacklevel=2)
        if loss1[k] > loss0[k]:
            notes.append("validation loss increased")
        out.append(SigmaField(np.exp(psi[k]), cfg.grid, ids[k], tap, float(d2[k]), float(taus[k]),
                              float(loss0[k]), float(loss1[k]), clamped, notes))
    return out


def optimize_sigma(feature_fn: FeatureFn, x, cfg: QuantifierConfig, sample_id: int = 0,
                   tap: Optional[str] = None, delta_f2: Optional[float] = None) -> SigmaField:
    """Fit the per-cell perturbation scales for a single input ``x`` (``[c, h, w]`` or ``[h, w]``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    d2 = None if delta_f2 is None else [delta_f2]
    return optimize_sigma_batch(feature_fn, x[None], cfg, [sample_id], tap, d2)[0]


def validation_loss(feature_fn: FeatureFn, x, sigma, cfg: QuantifierConfig, delta_f2: float,
                    sample_id: int = 0) -> float:
    """Loss of a given per-cell ``sigma`` under the fixed validation noise set of ``sample_id``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    cells = cfg.cells((h, w))
    noise = _noise(_rng(cfg.seed, sample_id, 0x7A), cfg.n_validation, c, (h, w), cells, cfg)[None]
    fstar = _features(feature_fn, x[None])
    psi = np.log(np.asarray(sigma, dtype=np.float64))[None]
    v = _validation_losses(feature_fn, x[None], fstar, psi, noise, np.array([delta_f2]), cfg.alpha,
                           cfg.grid, cfg.draws_per_step(c))
    return float(v[0])
