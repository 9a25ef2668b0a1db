"""Deterministic DDIM stepping math.

Provides the noise schedule (linear beta, cumulative alpha products), the
forward denoising step, its algebraic inverse used for latent inversion,
and the classifier-free guidance combination. All stepping functions are
pure and work elementwise on anything with numpy-style arithmetic
(numpy arrays and torch tensors alike), so the same code path serves the
toy backbone and a full-scale adapter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_noise_schedule",
    "ddim_step",
    "ddim_inverse_step",
    "cfg_epsilon",
]

# Virtual timestep for the fully clean state; alpha_bar is defined as 1 there
# so the last denoising step lands exactly on the predicted x0.
CLEAN_TIMESTEP = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients and the inference timestep grid.

    ``alpha_bar[t]`` is the product of ``(1 - beta_i)`` for ``i <= t`` and is
    strictly decreasing in t. ``sample_timesteps`` is the descending list of
    training timesteps visited at inference.
    """

    num_train_steps: int
    alpha_bar: np.ndarray = field(repr=False)
    sample_timesteps: tuple[int, ...]

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.shape[0] != self.num_train_steps:
            raise ValueError("alpha_bar must be 1-D with one entry per training step")
        if not np.all(ab > 0) or not np.all(ab <= 1):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ts = self.sample_timesteps
        if not all(ts[i] > ts[i + 1] for i in range(len(ts) - 1)):
            raise ValueError("sample_timesteps must be strictly descending")
        if ts and (ts[0] >= self.num_train_steps or ts[-1] < 0):
            raise ValueError("sample_timesteps out of the training range")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def num_inference_steps(self) -> int:
        return len(self.sample_timesteps)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for timestep ``t``; the virtual clean step maps to 1."""
        if t == CLEAN_TIMESTEP:
            return 1.0
        if not 0 <= t < self.num_train_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_train_steps})")
        return float(self.alpha_bar[t])

    def step_pairs(self) -> list[tuple[int, int]]:
        """Descending (t, t_prev) pairs for a full sampling pass, ending at the
        virtual clean step."""
        ts = list(self.sample_timesteps)
        return list(zip(ts, ts[1:] + [CLEAN_TIMESTEP]))


def make_noise_schedule(
    num_train_steps: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    num_inference_steps: int = 50,
) -> NoiseSchedule:
    """Build a linear-beta schedule with uniformly strided inference timesteps.

    The default beta range matches the Stable Diffusion v1 convention. The
    timestep grid uses a uniform stride with the leading-edge convention
    (0, stride, 2*stride, ...), reported in descending order.
    """
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    if num_train_steps < 1:
        raise ValueError("num_train_steps must be positive")
    if not 1 <= num_inference_steps <= num_train_steps:
        raise ValueError(
            f"num_inference_steps {num_inference_steps} must be in [1, {num_train_steps}]"
        )
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    stride = num_train_steps // num_inference_steps
    timesteps = tuple(int(i * stride) for i in reversed(range(num_inference_steps)))
    return NoiseSchedule(num_train_steps, alpha_bar, timesteps)


def _shift_latent(z_t, epsilon, ab_from: float, ab_to: float):
    # Shared closed form: recover x0 at ab_from, re-noise to ab_to with the
    # same epsilon. Forward and inverse steps differ only in direction.
    x0 = (z_t - math.sqrt(1.0 - ab_from) * epsilon) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0 + math.sqrt(1.0 - ab_to) * epsilon


def ddim_step(z_t, epsilon, t: int, t_prev: int, schedule: NoiseSchedule):
    """One deterministic denoising step from timestep ``t`` to ``t_prev``.

    ``t_prev`` may be the virtual clean step (-1), in which case the output is
    exactly the predicted x0.
    """
    if t <= t_prev:
        raise ValueError(f"denoising requires t > t_prev, got t={t}, t_prev={t_prev}")
    if epsilon.shape != z_t.shape:
        raise ValueError(f"epsilon shape {epsilon.shape} != latent shape {z_t.shape}")
    return _shift_latent(z_t, epsilon, schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev))


def ddim_inverse_step(z_t, epsilon, t: int, t_next: int, schedule: NoiseSchedule):
    """One inversion step from timestep ``t`` to the noisier ``t_next``.

    Exact algebraic inverse of :func:`ddim_step` for a fixed epsilon.
    """
    if t_next <= t:
        raise ValueError(f"inversion requires t_next > t, got t={t}, t_next={t_next}")
    if epsilon.shape != z_t.shape:
        raise ValueError(f"epsilon shape {epsilon.shape} != latent shape {z_t.shape}")
    return _shift_latent(z_t, epsilon, schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_next))


def cfg_epsilon(eps_uncond, eps_cond, scale: float):
    """Classifier-free guidance combination of two noise predictions."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"shape mismatch: uncond {eps_uncond.shape} vs cond {eps_cond.shape}"
        )
    return eps_uncond + scale * (eps_cond - eps_uncond)
