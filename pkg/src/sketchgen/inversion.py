"""DDIM inversion of a clean latent and reconstruction back from noise.

Inversion walks the sampling schedule in reverse, producing the full
intermediate trajectory Z = {z_0, ..., z_T}; reconstruction replays the
schedule forward from the noisiest latent. Both default to guidance scale
1.0, which keeps the two passes exact algebraic mirrors for a fixed epsilon.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import DenoiserBackbone, TextEmbedding
from .containers import ContainerError, read_container, write_container
from .scheduler import CLEAN_TIMESTEP, NoiseSchedule, cfg_epsilon, ddim_inverse_step, ddim_step


class NumericsError(RuntimeError):
    """Non-finite values appeared during a schedule walk; names the step."""


@dataclass
class LatentTrajectory:
    """Ordered (timestep, latent) pairs from z_0 (clean, t = -1) to z_T."""

    entries: list[tuple[int, torch.Tensor]]
    prompt_used: str
    guidance_scale_used: float

    def __post_init__(self):
        if not self.entries:
            raise ValueError("trajectory must be nonempty")
        ts = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"trajectory timesteps must strictly increase, got {ts}")
        shapes = {tuple(z.shape) for _, z in self.entries}
        if len(shapes) != 1:
            raise ValueError(f"trajectory latents must share one shape, got {sorted(shapes)}")
        for t, z in self.entries:
            if not torch.isfinite(z).all():
                raise ValueError(f"non-finite latent at timestep {t}")

    @property
    def timesteps(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.entries)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return tuple(self.entries[0][1].shape)

    def latent_at(self, t: int) -> torch.Tensor:
        for ts, z in self.entries:
            if ts == t:
                return z
        raise KeyError(f"no latent stored for timestep {t}")

    @property
    def clean_latent(self) -> torch.Tensor:
        return self.entries[0][1]

    @property
    def noisiest_latent(self) -> torch.Tensor:
        return self.entries[-1][1]


def conditioned_epsilon(
    backbone: DenoiserBackbone,
    z: torch.Tensor,
    t: int,
    cond: TextEmbedding,
    uncond: TextEmbedding | None,
    guidance_scale: float,
    kv_override: dict | None = None,
) -> torch.Tensor:
    """Noise prediction under classifier-free guidance.

    At scale exactly 1.0 only the conditional branch runs, so results do not
    depend on the unconditional pass at all (bit-exact invertibility). A
    kv_override applies to both branches.
    """
    eps_c = backbone.denoise(z, t, cond, kv_override=kv_override).epsilon
    if guidance_scale == 1.0:
        return eps_c
    if uncond is None:
        raise ValueError("guidance_scale != 1.0 requires an unconditional embedding")
    eps_u = backbone.denoise(z, t, uncond, kv_override=kv_override).epsilon
    return cfg_epsilon(eps_u, eps_c, guidance_scale)


def invert(
    z_0: torch.Tensor,
    prompt: str,
    schedule: NoiseSchedule,
    backbone: DenoiserBackbone,
    guidance_scale: float = 1.0,
) -> LatentTrajectory:
    """Walk the schedule backward from a clean latent, keeping every latent.

    Each inverse step evaluates the noise prediction at the destination
    timestep with the current latent, the convention whose forward replay
    has the smallest round-trip error.
    """
    if tuple(z_0.shape) != tuple(backbone.latent_shape):
        raise ValueError(
            f"latent shape {tuple(z_0.shape)} does not match backbone {backbone.latent_shape}"
        )
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    cond = backbone.embed_prompt(prompt)
    uncond = None if guidance_scale == 1.0 else backbone.null_embedding()

    z = z_0.detach().to(torch.float64)
    entries = [(CLEAN_TIMESTEP, z)]
    seq = [CLEAN_TIMESTEP, *reversed(schedule.sample_timesteps)]
    for t_cur, t_next in zip(seq[:-1], seq[1:]):
        eps = conditioned_epsilon(backbone, z, t_next, cond, uncond, guidance_scale)
        z = ddim_inverse_step(z, eps, t_cur, t_next, schedule)
        if not torch.isfinite(z).all():
            raise NumericsError(f"non-finite latent after inverse step {t_cur} -> {t_next}")
        entries.append((t_next, z))
    return LatentTrajectory(entries, prompt, float(guidance_scale))


def reconstruct(
    traj: LatentTrajectory,
    prompt: str,
    schedule: NoiseSchedule,
    backbone: DenoiserBackbone,
    guidance_scale: float = 1.0,
) -> torch.Tensor:
    """Replay the schedule forward from the trajectory's noisiest latent."""
    t_top = traj.entries[-1][0]
    if t_top != schedule.sample_timesteps[0]:
        raise ValueError(
            f"trajectory tops out at t={t_top}, schedule starts at {schedule.sample_timesteps[0]}"
        )
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    cond = backbone.embed_prompt(prompt)
    uncond = None if guidance_scale == 1.0 else backbone.null_embedding()

    z = traj.noisiest_latent.detach().to(torch.float64)
    for t_cur, t_prev in schedule.step_pairs():
        eps = conditioned_epsilon(backbone, z, t_cur, cond, uncond, guidance_scale)
        z = ddim_step(z, eps, t_cur, t_prev, schedule)
        if not torch.isfinite(z).all():
            raise NumericsError(f"non-finite latent after step {t_cur} -> {t_prev}")
    return z


def export_trajectory(traj: LatentTrajectory, path: str | Path, dtype: str = "<f4") -> None:
    """Write a trajectory container: JSON manifest plus raw latent blocks."""
    stacked = np.stack([z.detach().cpu().numpy() for _, z in traj.entries])
    meta = {
        "timesteps": list(traj.timesteps),
        "prompt": traj.prompt_used,
        "guidance_scale": traj.guidance_scale_used,
        "shape": list(traj.latent_shape),
    }
    write_container(path, "latent-trajectory", [("latents", stacked)], meta, dtype=dtype)


def load_trajectory(path: str | Path) -> LatentTrajectory:
    box = read_container(path)
    if box.kind != "latent-trajectory":
        raise ContainerError(f"{path}: kind {box.kind!r} is not a latent trajectory")
    if "latents" not in box.blocks:
        raise ContainerError(f"{path}: missing 'latents' block")
    lat = box.blocks["latents"]
    ts = [int(t) for t in box.meta.get("timesteps", [])]
    if len(ts) != lat.shape[0]:
        raise ContainerError(f"{path}: {len(ts)} timesteps for {lat.shape[0]} latents")
    entries = [(t, torch.tensor(lat[i], dtype=torch.float64)) for i, t in enumerate(ts)]
    return LatentTrajectory(
        entries,
        str(box.meta.get("prompt", "")),
        float(box.meta.get("guidance_scale", 1.0)),
    )
