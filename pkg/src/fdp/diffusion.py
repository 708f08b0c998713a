"""Single-component denoising diffusion: noise schedule, forward corruption,
the per-component noise-prediction loss, and the reverse update.

Conventions (variance-preserving, K discrete steps, step index k in 1..K):

    forward:   a^k = sqrt(abar_k) a^0 + sqrt(1 - abar_k) eps,  eps ~ N(0, I)
    reverse:   a^{k-1} = (a^k - gamma_k * eps_hat) / sqrt(1 - beta_k) + sigma_k z
    gamma_k  = beta_k / sqrt(1 - abar_k)
    sigma_k  = sqrt(beta_k) for k > 1, and sigma_1 = 0 (final step noise-free)

The reverse mean is the standard posterior mean; sigma_k = sqrt(beta_k) is the
variance-preserving noise choice (it keeps a unit-Gaussian target's variance
fixed under the exact score, which the analytic-score tests rely on).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, as_f64


class ScheduleError(ValueError):
    """Invalid schedule request or broken schedule invariant."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion step count and per-step coefficients.

    betas[k-1] is beta_k for k in 1..K; alpha_bar[k] is the cumulative signal
    level abar_k for k in 0..K with abar_0 = 1 exactly. step_ids[k-1] is the
    step index fed to the denoiser at position k: 1..K for a native schedule,
    the original indices for a stride-subsampled one, so a trained model can
    be re-sampled with a coarser loop without retraining.
    """

    K: int
    kind: str
    betas: np.ndarray
    alpha_bar: np.ndarray
    gamma: np.ndarray  # gamma[k-1] = beta_k / sqrt(1 - abar_k)
    sigma: np.ndarray  # sigma[k-1]; sigma[0] = 0 by convention
    recip_sqrt_alpha: np.ndarray  # 1 / sqrt(1 - beta_k)
    step_ids: np.ndarray = None

    def __post_init__(self):
        if self.K < 2:
            raise ScheduleError(f"need at least 2 diffusion steps, got K={self.K}")
        if self.step_ids is None:
            object.__setattr__(self, "step_ids", np.arange(1, self.K + 1))
        if self.step_ids.shape != (self.K,):
            raise ScheduleError("step_ids must have length K")
        b = self.betas
        if b.shape != (self.K,):
            raise ScheduleError("betas must have length K")
        if not (np.all(b > 0.0) and np.all(b < 1.0)):
            raise ScheduleError("betas must lie strictly in (0, 1)")
        if np.any(np.diff(b) < -1e-12):
            raise ScheduleError("betas must be monotone non-decreasing")
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise ScheduleError("abar_0 must equal 1 exactly")
        if np.any(np.diff(ab) >= 0.0):
            raise ScheduleError("abar must be strictly decreasing")
        for name, arr in (("gamma", self.gamma), ("sigma", self.sigma)):
            if not np.all(np.isfinite(arr)):
                raise ScheduleError(f"{name} contains non-finite entries")
        if np.any(self.sigma < 0.0):
            raise ScheduleError("sigma must be non-negative")
        if self.sigma[0] != 0.0:
            raise ScheduleError("sigma_1 must be 0")

    def to_json(self) -> dict:
        return {"K": self.K, "kind": self.kind, "betas": self.betas.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSchedule":
        return _from_betas(int(obj["K"]), str(obj["kind"]), np.asarray(obj["betas"]))


def _from_betas(K: int, kind: str, betas: np.ndarray, step_ids=None) -> NoiseSchedule:
    betas = as_f64(betas, "betas")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    gamma = betas / np.sqrt(1.0 - alpha_bar[1:])
    sigma = np.sqrt(betas)
    sigma[0] = 0.0
    recip_sqrt_alpha = 1.0 / np.sqrt(1.0 - betas)
    return NoiseSchedule(
        K, kind, betas, alpha_bar, gamma, sigma, recip_sqrt_alpha, step_ids
    )


def subsample_schedule(schedule: NoiseSchedule, stride: int) -> NoiseSchedule:
    """Coarser sampling loop over the same trained model: keep every stride-th
    signal level (counting back from K) and recompute the per-step
    coefficients from the alpha-bar ratios. step_ids keeps the original step
    indices so denoisers are conditioned exactly as during training."""
    if stride < 1:
        raise ScheduleError("stride must be >= 1")
    kept = np.array(sorted(range(schedule.K, 0, -stride)))
    if len(kept) < 2:
        raise ScheduleError(f"stride {stride} leaves fewer than 2 steps")
    ab = schedule.alpha_bar[kept]
    prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / prev
    return _from_betas(len(kept), f"{schedule.kind}/stride{stride}", betas, kept)


def make_schedule(K: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a schedule of K steps. kind is 'cosine' (default) or 'linear'.

    cosine: abar follows the squared-cosine profile with offset 0.008, betas
    clipped to 0.999. linear: betas linearly spaced over [1e-4, 0.02].
    """
    if K < 2:
        raise ScheduleError(f"need at least 2 diffusion steps, got K={K}")
    if kind == "cosine":
        ks = np.arange(K + 1, dtype=np.float64)
        s = 0.008
        f = np.cos((ks / K + s) / (1 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, K)
    else:
        raise ScheduleError(f"unknown schedule kind '{kind}' (cosine or linear)")
    return _from_betas(K, kind, betas)


@dataclass
class NoisyAction:
    """Flattened action window at diffusion step k (k = 0 means clean)."""

    k: int
    values: np.ndarray

    def __post_init__(self):
        self.values = as_f64(self.values, "noisy action values")


def forward_noise(
    schedule: NoiseSchedule, a0: np.ndarray, k: int, eps: np.ndarray
) -> NoisyAction:
    """Corrupt a clean window to step k: sqrt(abar_k) a0 + sqrt(1-abar_k) eps."""
    a0 = as_f64(a0, "a0")
    eps = as_f64(eps, "eps")
    if not 0 <= k <= schedule.K:
        raise ScheduleError(f"step k={k} outside [0, {schedule.K}]")
    if eps.shape != a0.shape:
        raise ValueError(f"eps shape {eps.shape} != a0 shape {a0.shape}")
    if k == 0:
        return NoisyAction(0, a0.copy())
    ab = schedule.alpha_bar[k]
    return NoisyAction(k, math.sqrt(ab) * a0 + math.sqrt(1.0 - ab) * eps)


@dataclass
class ComponentLossGrads:
    denoiser: dict[str, np.ndarray]
    obs_embedding: np.ndarray


def component_loss(denoiser, schedule: NoiseSchedule, a0, obs_embedding, rng: Rng):
    """Noise-prediction MSE for one component on one clean window.

    Draws k uniform on [1, K] and eps ~ N(0, I), corrupts a0, and scores the
    denoiser's prediction: loss = mean((eps - pred)^2). Returns the loss and
    gradients for the denoiser parameters and the observation embedding.
    """
    a0 = as_f64(a0, "a0")
    dim = a0.size
    k = int(rng.integers(1, schedule.K + 1, 1)[0])
    eps = rng.gaussian(dim)
    noisy = forward_noise(schedule, a0, k, eps)
    pred, cache = denoiser.predict(noisy.values, obs_embedding, k)
    resid = pred - eps
    loss = float(np.mean(resid * resid))
    if not math.isfinite(loss):
        raise ValueError("component loss is non-finite")
    dpred = 2.0 * resid / dim
    param_grads, _, demb = denoiser.backward(cache, dpred)
    return loss, ComponentLossGrads(param_grads, demb)


def reverse_mean(
    schedule: NoiseSchedule, values: np.ndarray, eps_hat: np.ndarray, k: int
) -> np.ndarray:
    """Posterior mean of the reverse update at step k."""
    return schedule.recip_sqrt_alpha[k - 1] * (values - schedule.gamma[k - 1] * eps_hat)


def reverse_step(
    schedule: NoiseSchedule,
    denoiser,
    ak: NoisyAction,
    obs_embedding,
    k: int,
    rng: Rng,
) -> NoisyAction:
    """One reverse (denoising) update from step k to k-1.

    Injects sigma_k-scaled Gaussian noise except at k = 1, which is noise-free.
    """
    if k != ak.k:
        raise ScheduleError(f"step argument k={k} disagrees with ak.k={ak.k}")
    if not 1 <= k <= schedule.K:
        raise ScheduleError(f"reverse step k={k} outside [1, {schedule.K}]")
    eps_hat, _ = denoiser.predict(ak.values, obs_embedding, k)
    mean = reverse_mean(schedule, ak.values, eps_hat, k)
    if k > 1:
        mean = mean + schedule.sigma[k - 1] * rng.gaussian(ak.values.size)
    return NoisyAction(k - 1, mean)
