"""Attention-alignment guidance: symmetric-KL loss and latent optimization.

Each guided denoising step records the live class-token maps with gradients
enabled, measures their symmetric KL divergence against the target maps for
that timestep, and moves the latent along the normalized negative gradient
before taking the usual classifier-free-guided DDIM step.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .attention import extract_token_maps, normalize_map
from .backbone import DenoiserBackbone, TextEmbedding
from .inversion import NumericsError, conditioned_epsilon
from .scheduler import NoiseSchedule, ddim_step

_ZERO_GRAD_NORM = 1e-12
_SUM_TOL = 1e-6


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs for attention-alignment guidance.

    beta scales the update; guided_steps bounds how many initial denoising
    steps optimize the latent; layers=None means every instrumented
    cross-attention layer of the backbone.
    """

    beta: float = 1.0
    guided_steps: int = 25
    layers: tuple[str, ...] | None = None
    iterations_per_step: int = 1
    eps_floor: float = 1e-8
    grad_clip: float | None = None
    cfg_scale: float = 7.5
    step_scale_mode: str = "provisional"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.guided_steps < 0:
            raise ValueError("guided_steps must be >= 0")
        if self.iterations_per_step < 1:
            raise ValueError("iterations_per_step must be >= 1")
        if self.eps_floor <= 0:
            raise ValueError("eps_floor must be > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.step_scale_mode not in ("provisional", "previous"):
            raise ValueError(
                f"step_scale_mode must be 'provisional' or 'previous', got {self.step_scale_mode!r}"
            )


def symmetric_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p, q) + KL(q, p) for strictly positive distributions."""
    if tuple(p.shape) != tuple(q.shape):
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    for name, dist in (("p", p), ("q", q)):
        if not (dist > 0).all():
            raise ValueError(f"{name} must be strictly positive")
        total = float(dist.detach().sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"{name} sums to {total}, not a distribution")
    return ((p - q) * (torch.log(p) - torch.log(q))).sum()


def alignment_loss(
    target: dict[str, torch.Tensor], current: dict[str, torch.Tensor]
) -> torch.Tensor:
    """Sum of per-layer symmetric KL between target and current maps."""
    if set(target) != set(current):
        raise ValueError(
            f"layer sets differ: target {sorted(target)} vs current {sorted(current)}"
        )
    total = None
    for layer in sorted(target):
        term = symmetric_kl(target[layer], current[layer])
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no layers to compare")
    return total


def optimize_latent(
    z_t: torch.Tensor, grad: torch.Tensor, step_scale: float, beta: float
) -> torch.Tensor:
    """Move z_t along -grad, rescaled so the move has norm beta * step_scale.

    Zero beta or numerically zero gradient returns z_t unchanged (the same
    tensor, no arithmetic), keeping unguided runs bit-identical.
    """
    if not torch.isfinite(grad).all():
        raise NumericsError("non-finite gradient in latent update")
    if tuple(grad.shape) != tuple(z_t.shape):
        raise ValueError(f"grad shape {tuple(grad.shape)} != latent {tuple(z_t.shape)}")
    if step_scale < 0:
        raise ValueError("step_scale must be >= 0")
    if beta == 0:
        return z_t
    grad_norm = grad.norm()
    if grad_norm < _ZERO_GRAD_NORM:
        return z_t
    return z_t - beta * (step_scale / grad_norm) * grad


def _current_maps(
    backbone: DenoiserBackbone,
    z: torch.Tensor,
    t: int,
    cond: TextEmbedding,
    class_word: str,
    layers: tuple[str, ...],
    eps_floor: float,
    kv_override: dict | None = None,
) -> dict[str, torch.Tensor]:
    out = backbone.denoise(z, t, cond, record_attention=True, kv_override=kv_override)
    raw = extract_token_maps(out.cross_records, cond, class_word, layers)
    return {layer: normalize_map(m, eps_floor) for layer, m in raw.items()}


def guided_denoise_step(
    z_t: torch.Tensor,
    t: int,
    t_prev: int,
    target_maps_at_t: dict[str, torch.Tensor],
    prompt_embed: TextEmbedding,
    backbone: DenoiserBackbone,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
    *,
    class_word: str,
    uncond_embed: TextEmbedding | None = None,
    prev_delta: float | None = None,
    step_index: int | None = None,
    trace: list | None = None,
    kv_override: dict | None = None,
) -> torch.Tensor:
    """One denoising step with attention-alignment latent optimization.

    Records live maps at z_t with gradients enabled, updates the latent
    (iterations_per_step times), then takes the ordinary CFG DDIM step from
    the optimized latent. Appends one trace row per iteration when a trace
    list is supplied.
    """
    layers = tuple(config.layers) if config.layers is not None else tuple(backbone.cross_layer_ids)
    missing = [l for l in layers if l not in target_maps_at_t]
    if missing:
        raise KeyError(f"target maps missing layers {missing} at timestep {t}")
    targets = {l: target_maps_at_t[l].detach() for l in layers}

    if uncond_embed is None and config.cfg_scale != 1.0:
        uncond_embed = backbone.null_embedding()

    z = z_t.detach().to(torch.float64)
    for iteration in range(config.iterations_per_step):
        if config.beta == 0:
            with torch.no_grad():
                current = _current_maps(
                    backbone, z, t, prompt_embed, class_word, layers, config.eps_floor,
                    kv_override,
                )
                loss = alignment_loss(targets, current)
            if trace is not None:
                trace.append(
                    {
                        "step": step_index,
                        "t": int(t),
                        "iteration": iteration,
                        "loss_before": float(loss),
                        "loss_after": float(loss),
                        "grad_norm": 0.0,
                        "step_scale": 0.0,
                        "beta": 0.0,
                    }
                )
            continue

        z_var = z.clone().requires_grad_(True)
        current = _current_maps(
            backbone, z_var, t, prompt_embed, class_word, layers, config.eps_floor, kv_override
        )
        loss = alignment_loss(targets, current)
        loss_before = float(loss.detach())
        (grad,) = torch.autograd.grad(loss, z_var)
        if not torch.isfinite(grad).all():
            raise NumericsError(f"non-finite loss gradient at timestep {t}")
        if config.grad_clip is not None:
            norm = grad.norm()
            if norm > config.grad_clip:
                grad = grad * (config.grad_clip / norm)

        with torch.no_grad():
            if config.step_scale_mode == "previous" and prev_delta is not None:
                step_scale = float(prev_delta)
            else:
                eps = conditioned_epsilon(
                    backbone, z, t, prompt_embed, uncond_embed, config.cfg_scale, kv_override
                )
                provisional = ddim_step(z, eps, t, t_prev, schedule)
                step_scale = float((z - provisional).norm())
            z_new = optimize_latent(z, grad.detach(), step_scale, config.beta)
            if z_new is z:
                loss_after = loss_before
            else:
                after = _current_maps(
                    backbone, z_new, t, prompt_embed, class_word, layers, config.eps_floor,
                    kv_override,
                )
                loss_after = float(alignment_loss(targets, after))
        if trace is not None:
            trace.append(
                {
                    "step": step_index,
                    "t": int(t),
                    "iteration": iteration,
                    "loss_before": loss_before,
                    "loss_after": loss_after,
                    "grad_norm": float(grad.norm()),
                    "step_scale": step_scale,
                    "beta": config.beta,
                }
            )
        z = z_new.detach()

    with torch.no_grad():
        eps = conditioned_epsilon(
            backbone, z, t, prompt_embed, uncond_embed, config.cfg_scale, kv_override
        )
        z_prev = ddim_step(z, eps, t, t_prev, schedule)
    if not torch.isfinite(z_prev).all():
        raise NumericsError(f"non-finite latent after guided step {t} -> {t_prev}")
    return z_prev
