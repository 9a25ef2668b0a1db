"""Exemplar-based editing: self-attention key/value injection.

An exemplar image is inverted and replayed; the keys and values of its
self-attention layers are recorded at every step. During generation those
recorded keys/values replace the live ones (queries stay native) over a
configurable step window, while cross-attention latent optimization keeps
controlling layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import DenoiserBackbone
from .containers import ContainerError, read_container, write_container
from .inversion import NumericsError, invert
from .pipeline import GenerationResult, RunConfig, build_prompts, encode_image, generate
from .scheduler import CLEAN_TIMESTEP, cfg_epsilon, ddim_step


@dataclass(frozen=True)
class EditingConfig:
    """Injection window and layer choice for exemplar substitution.

    Steps are 1-based over the denoising schedule; the default window skips
    the first few steps, which otherwise destabilize the optimized layout.
    start_step=1 substitutes at every step.
    """

    enabled: bool = True
    start_step: int = 5
    end_step: int | None = None
    layers: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.start_step < 1:
            raise ValueError("start_step is 1-based and must be >= 1")
        if self.end_step is not None and self.end_step < self.start_step:
            raise ValueError("end_step must be >= start_step")


@dataclass
class ExemplarFeatures:
    """Recorded self-attention keys/values per timestep and layer."""

    features: dict[int, dict[str, tuple[torch.Tensor, torch.Tensor]]]
    source_hash: str
    prompt_used: str

    def __post_init__(self):
        shapes: dict[str, tuple] = {}
        for t, per_layer in self.features.items():
            for layer, (k, v) in per_layer.items():
                pair = (tuple(k.shape), tuple(v.shape))
                if shapes.setdefault(layer, pair) != pair:
                    raise ValueError(
                        f"inconsistent key/value shapes for layer {layer} at timestep {t}"
                    )

    @property
    def timesteps(self) -> tuple[int, ...]:
        return tuple(sorted(self.features))


def record_exemplar(
    image,
    class_label: str,
    config: RunConfig,
    backbone: DenoiserBackbone | None = None,
    layers: tuple[str, ...] | None = None,
) -> ExemplarFeatures:
    """Invert the exemplar with the photo prompt and record K/V on replay.

    The replay covers every schedule step plus one extra pass at the final
    clean latent (keyed at the virtual clean timestep), so coverage matches
    the trajectory length. layers=None records all instrumented
    self-attention layers; an empty tuple records none (inert features).
    """
    if backbone is None:
        backbone = config.make_backbone()
    if layers is None:
        layers = tuple(backbone.self_layer_ids)
    schedule = config.make_schedule()
    prompts = build_prompts(class_label, config.style_source, config.style_target)
    latent, image_hash = encode_image(image, config, backbone)
    traj = invert(latent, prompts.target, schedule, backbone, config.inversion_scale)

    cond = backbone.embed_prompt(prompts.target)
    uncond = None if config.inversion_scale == 1.0 else backbone.null_embedding()
    features: dict[int, dict[str, tuple[torch.Tensor, torch.Tensor]]] = {}

    def grab(out) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        return {
            rec.layer: (rec.keys.detach(), rec.values.detach())
            for rec in out.self_records
            if rec.layer in layers
        }

    with torch.no_grad():
        z = traj.noisiest_latent
        for t_cur, t_prev in schedule.step_pairs():
            out = backbone.denoise(z, t_cur, cond, record_attention=True)
            features[t_cur] = grab(out)
            eps = out.epsilon
            if config.inversion_scale != 1.0:
                eps_u = backbone.denoise(z, t_cur, uncond).epsilon
                eps = cfg_epsilon(eps_u, eps, config.inversion_scale)
            z = ddim_step(z, eps, t_cur, t_prev, schedule)
            if not torch.isfinite(z).all():
                raise NumericsError(f"non-finite latent after step {t_cur} -> {t_prev}")
        out = backbone.denoise(z, 0, cond, record_attention=True)
        features[CLEAN_TIMESTEP] = grab(out)
    return ExemplarFeatures(features, image_hash, prompts.target)


def generate_with_exemplar(
    features,
    exemplar: ExemplarFeatures,
    class_label: str,
    seed: int,
    config: RunConfig,
    editing: EditingConfig | None = None,
    backbone: DenoiserBackbone | None = None,
    on_step=None,
) -> GenerationResult:
    """Guided generation with exemplar K/V substituted over the step window.

    With substitution disabled this is exactly pipeline.generate (same code
    path, no override ever constructed).
    """
    if editing is None:
        editing = EditingConfig()
    if backbone is None:
        backbone = config.make_backbone()
    if not editing.enabled:
        return generate(features, class_label, seed, config, backbone, on_step)

    layers = editing.layers if editing.layers is not None else tuple(backbone.self_layer_ids)
    pairs = config.make_schedule().step_pairs()
    last = editing.end_step if editing.end_step is not None else len(pairs)

    def active(i: int) -> bool:
        return editing.start_step <= i + 1 <= last

    missing = [t for i, (t, _) in enumerate(pairs) if active(i) and t not in exemplar.features]
    if missing:
        raise ValueError(f"exemplar features missing substituted timesteps {missing}")

    def kv_provider(i: int, t: int):
        if not active(i):
            return None
        per_layer = exemplar.features[t]
        kv = {layer: per_layer[layer] for layer in layers if layer in per_layer}
        return kv or None

    return generate(
        features, class_label, seed, config, backbone, on_step, kv_provider=kv_provider
    )


def export_exemplar(exemplar: ExemplarFeatures, path: str | Path, dtype: str = "<f4") -> None:
    blocks = []
    for t in exemplar.timesteps:
        for layer, (k, v) in sorted(exemplar.features[t].items()):
            blocks.append((f"{t}/{layer}/k", k.detach().cpu().numpy()))
            blocks.append((f"{t}/{layer}/v", v.detach().cpu().numpy()))
    meta = {
        "source_hash": exemplar.source_hash,
        "prompt": exemplar.prompt_used,
        "timesteps": list(exemplar.timesteps),
        "layers": sorted({l for per in exemplar.features.values() for l in per}),
    }
    write_container(path, "exemplar-features", blocks, meta, dtype=dtype)


def load_exemplar(path: str | Path) -> ExemplarFeatures:
    box = read_container(path)
    if box.kind != "exemplar-features":
        raise ContainerError(f"{path}: kind {box.kind!r} is not exemplar features")
    features: dict[int, dict[str, tuple[torch.Tensor, torch.Tensor]]] = {}
    for t in box.meta.get("timesteps", []):
        per: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        for layer in box.meta.get("layers", []):
            k_name, v_name = f"{int(t)}/{layer}/k", f"{int(t)}/{layer}/v"
            if k_name in box.blocks and v_name in box.blocks:
                per[layer] = (
                    torch.tensor(np.array(box.blocks[k_name]), dtype=torch.float64),
                    torch.tensor(np.array(box.blocks[v_name]), dtype=torch.float64),
                )
        features[int(t)] = per
    return ExemplarFeatures(
        features, str(box.meta.get("source_hash", "")), str(box.meta.get("prompt", ""))
    )
