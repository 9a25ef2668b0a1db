from __future__ import annotations

import pytest
import torch

from sketchgen.backbone import DenoiserBackbone, DenoiserOutput, TextEmbedding
from sketchgen.containers import ContainerError, write_container
from sketchgen.inversion import (
    LatentTrajectory,
    NumericsError,
    conditioned_epsilon,
    export_trajectory,
    invert,
    load_trajectory,
    reconstruct,
)
from sketchgen.scheduler import CLEAN_TIMESTEP, make_noise_schedule

import numpy as np


class _FixedEpsilonBackbone(DenoiserBackbone):
    """Returns one fixed noise prediction regardless of input or timestep.

    With epsilon independent of the latent, every inverse step is the exact
    algebraic mirror of the forward step, so invert + reconstruct must round
    trip to machine precision.
    """

    latent_shape = (2, 4, 4)
    num_train_steps = 1000
    cross_layer_ids = ()
    self_layer_ids = ()

    def __init__(self, epsilon: torch.Tensor | None = None):
        if epsilon is None:
            gen = torch.Generator().manual_seed(99)
            epsilon = torch.randn(self.latent_shape, generator=gen, dtype=torch.float64)
        self._eps = epsilon
        self.fingerprint = "stub:fixed-eps"
        self.calls = 0

    def denoise(self, z_t, t, cond, record_attention=False, kv_override=None):
        self.calls += 1
        return DenoiserOutput(epsilon=self._eps)

    def embed_prompt(self, text):
        return TextEmbedding([0], torch.zeros(1, 16, dtype=torch.float64), {})

    def null_embedding(self):
        return self.embed_prompt("")


def test_fixed_epsilon_roundtrip_is_exact():
    stub = _FixedEpsilonBackbone()
    sched = make_noise_schedule(num_inference_steps=10)
    gen = torch.Generator().manual_seed(5)
    z0 = torch.randn(stub.latent_shape, generator=gen, dtype=torch.float64)
    traj = invert(z0, "anything", sched, stub)
    back = reconstruct(traj, "anything", sched, stub)
    assert float((back - z0).norm() / z0.norm()) < 1e-12


def test_trajectory_layout(toy):
    sched = make_noise_schedule(num_inference_steps=10)
    gen = torch.Generator().manual_seed(6)
    z0 = torch.randn(toy.latent_shape, generator=gen, dtype=torch.float64)
    traj = invert(z0, "a sketch of a cat", sched, toy)
    assert len(traj.entries) == 11
    assert traj.timesteps == (CLEAN_TIMESTEP,) + tuple(reversed(sched.sample_timesteps))
    assert traj.latent_shape == toy.latent_shape
    assert torch.equal(traj.clean_latent, z0)
    assert torch.equal(traj.noisiest_latent, traj.latent_at(900))
    assert traj.prompt_used == "a sketch of a cat"
    assert traj.guidance_scale_used == 1.0
    with pytest.raises(KeyError):
        traj.latent_at(55)


def test_scale_one_never_runs_unconditional_branch():
    stub = _FixedEpsilonBackbone()
    sched = make_noise_schedule(num_inference_steps=10)
    z0 = torch.zeros(stub.latent_shape, dtype=torch.float64)
    invert(z0, "x", sched, stub, guidance_scale=1.0)
    assert stub.calls == 10
    stub.calls = 0
    invert(z0, "x", sched, stub, guidance_scale=2.0)
    assert stub.calls == 20


def test_conditioned_epsilon_requires_uncond_beyond_scale_one(toy):
    cond = toy.embed_prompt("a photo of a cat")
    z = torch.zeros(toy.latent_shape, dtype=torch.float64)
    with pytest.raises(ValueError):
        conditioned_epsilon(toy, z, 100, cond, None, 7.5)
    eps = conditioned_epsilon(toy, z, 100, cond, None, 1.0)
    assert torch.equal(eps, toy.denoise(z, 100, cond).epsilon)


def test_invert_validates_inputs(toy):
    sched = make_noise_schedule(num_inference_steps=10)
    with pytest.raises(ValueError):
        invert(torch.zeros(1, 2, 2, dtype=torch.float64), "x a", sched, toy)
    z0 = torch.zeros(toy.latent_shape, dtype=torch.float64)
    with pytest.raises(ValueError):
        invert(z0, "x a", sched, toy, guidance_scale=-0.5)


def test_reconstruct_requires_matching_top_timestep():
    stub = _FixedEpsilonBackbone()
    traj = invert(
        torch.zeros(stub.latent_shape, dtype=torch.float64),
        "x",
        make_noise_schedule(num_inference_steps=10),
        stub,
    )
    with pytest.raises(ValueError, match="tops out"):
        reconstruct(traj, "x", make_noise_schedule(num_inference_steps=25), stub)


def test_non_finite_epsilon_raises_numerics_error():
    bad = torch.full((2, 4, 4), float("nan"), dtype=torch.float64)
    stub = _FixedEpsilonBackbone(epsilon=bad)
    sched = make_noise_schedule(num_inference_steps=5)
    with pytest.raises(NumericsError, match="step"):
        invert(torch.zeros(stub.latent_shape, dtype=torch.float64), "x", sched, stub)


def test_trajectory_validation():
    z = torch.zeros(2, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        LatentTrajectory([], "p", 1.0)
    with pytest.raises(ValueError):
        LatentTrajectory([(0, z), (0, z)], "p", 1.0)
    with pytest.raises(ValueError):
        LatentTrajectory([(5, z), (0, z)], "p", 1.0)
    with pytest.raises(ValueError):
        LatentTrajectory([(0, z), (1, torch.zeros(3, 3, dtype=torch.float64))], "p", 1.0)
    with pytest.raises(ValueError):
        LatentTrajectory([(0, torch.full((2, 2), float("inf"), dtype=torch.float64))], "p", 1.0)


def test_export_load_roundtrip_float64_bitexact(toy, tmp_path):
    sched = make_noise_schedule(num_inference_steps=5)
    gen = torch.Generator().manual_seed(8)
    z0 = torch.randn(toy.latent_shape, generator=gen, dtype=torch.float64)
    traj = invert(z0, "a sketch of a cat", sched, toy)
    path = tmp_path / "traj.sgc"
    export_trajectory(traj, path, dtype="<f8")
    loaded = load_trajectory(path)
    assert loaded.timesteps == traj.timesteps
    assert loaded.prompt_used == traj.prompt_used
    assert loaded.guidance_scale_used == traj.guidance_scale_used
    for (ta, za), (tb, zb) in zip(traj.entries, loaded.entries):
        assert ta == tb
        assert za.numpy().tobytes() == zb.numpy().tobytes()


def test_export_load_roundtrip_float32_approximate(toy, tmp_path):
    sched = make_noise_schedule(num_inference_steps=5)
    gen = torch.Generator().manual_seed(9)
    z0 = torch.randn(toy.latent_shape, generator=gen, dtype=torch.float64)
    traj = invert(z0, "a sketch of a cat", sched, toy)
    path = tmp_path / "traj.sgc"
    export_trajectory(traj, path)
    loaded = load_trajectory(path)
    for (_, za), (_, zb) in zip(traj.entries, loaded.entries):
        assert torch.allclose(za, zb, rtol=1e-6, atol=1e-6)


def test_load_rejects_foreign_containers(tmp_path):
    path = tmp_path / "box.sgc"
    write_container(path, "something-else", [("latents", np.zeros((1, 2, 4, 4)))], {})
    with pytest.raises(ContainerError, match="kind"):
        load_trajectory(path)

    write_container(path, "latent-trajectory", [("other", np.zeros((1, 2, 4, 4)))], {})
    with pytest.raises(ContainerError):
        load_trajectory(path)

    write_container(
        path,
        "latent-trajectory",
        [("latents", np.zeros((2, 2, 4, 4)))],
        {"timesteps": [0]},
    )
    with pytest.raises(ContainerError, match="timesteps"):
        load_trajectory(path)
