"""Class-token cross-attention maps: extraction, normalization, target stacks.

A target stack holds, for every trajectory timestep and every instrumented
cross-attention layer, the spatial attention map of the class word as a
strictly positive probability distribution, ready for KL comparison.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import AttentionRecord, DenoiserBackbone, TextEmbedding
from .containers import ContainerError, read_container, write_container
from .inversion import LatentTrajectory

EPS_FLOOR = 1e-8


@dataclass
class TokenAttentionStack:
    """Per-timestep, per-layer class-token maps plus extraction metadata."""

    maps: dict[int, dict[str, torch.Tensor]]
    class_word: str
    token_span: tuple[int, int]
    layers: tuple[str, ...]

    def __post_init__(self):
        for t, per_layer in self.maps.items():
            if tuple(sorted(per_layer)) != tuple(sorted(self.layers)):
                raise ValueError(
                    f"timestep {t} has layers {sorted(per_layer)}, want {sorted(self.layers)}"
                )
            for layer, m in per_layer.items():
                if (m < 0).any():
                    raise ValueError(f"negative attention map entry at t={t}, layer {layer}")

    @property
    def timesteps(self) -> tuple[int, ...]:
        return tuple(sorted(self.maps))

    def at(self, t: int) -> dict[str, torch.Tensor]:
        if t not in self.maps:
            raise KeyError(f"no target maps stored for timestep {t}")
        return self.maps[t]


def extract_token_maps(
    records: list[AttentionRecord],
    embedding: TextEmbedding,
    class_word: str,
    layers: tuple[str, ...],
) -> dict[str, torch.Tensor]:
    """Slice the class word's token columns, average heads and tokens.

    Returns one [H, W] map per requested layer. Raw softmax rows are left
    untouched; normalization across pixels is a separate step.
    """
    start, end = embedding.span_for(class_word)
    by_layer = {rec.layer: rec for rec in records}
    out: dict[str, torch.Tensor] = {}
    for layer in layers:
        if layer not in by_layer:
            raise KeyError(f"layer {layer!r} not among recorded layers {sorted(by_layer)}")
        rec = by_layer[layer]
        m = rec.probs.mean(dim=0)[:, start:end].mean(dim=1)
        out[layer] = m.reshape(rec.height, rec.width)
    return out


def normalize_map(m: torch.Tensor, eps_floor: float = EPS_FLOOR) -> torch.Tensor:
    """Floor then renormalize a nonnegative map into a strict distribution.

    p = (m + eps_floor) / sum(m + eps_floor), elementwise positive, sums to 1.
    """
    if (m < 0).any():
        raise ValueError("attention map has negative entries")
    floored = m + eps_floor
    total = floored.sum()
    if not total > 0:
        raise ValueError("map is all zero after flooring; need a positive eps_floor")
    return floored / total


def build_target_stack(
    traj: LatentTrajectory,
    prompt: str,
    class_word: str,
    backbone: DenoiserBackbone,
    layers: tuple[str, ...] | None = None,
    eps_floor: float = EPS_FLOOR,
) -> TokenAttentionStack:
    """One conditioned pass per stored latent, collecting normalized maps.

    The clean latent (virtual timestep -1) is evaluated at timestep 0, the
    closest the backbone accepts.
    """
    if layers is None:
        layers = tuple(backbone.cross_layer_ids)
    cond = backbone.embed_prompt(prompt)
    span = cond.span_for(class_word)
    maps: dict[int, dict[str, torch.Tensor]] = {}
    for t, z in traj.entries:
        out = backbone.denoise(z, max(t, 0), cond, record_attention=True)
        raw = extract_token_maps(out.cross_records, cond, class_word, layers)
        maps[t] = {layer: normalize_map(m, eps_floor) for layer, m in raw.items()}
    return TokenAttentionStack(maps, class_word, span, tuple(layers))


def export_stack(stack: TokenAttentionStack, path: str | Path, dtype: str = "<f4") -> None:
    """Write a stack container; block names encode timestep and layer."""
    blocks = [
        (f"{t}/{layer}", stack.maps[t][layer].detach().cpu().numpy())
        for t in stack.timesteps
        for layer in stack.layers
    ]
    meta = {
        "class_word": stack.class_word,
        "token_span": list(stack.token_span),
        "layers": list(stack.layers),
        "timesteps": list(stack.timesteps),
    }
    write_container(path, "attention-stack", blocks, meta, dtype=dtype)


def load_stack(path: str | Path) -> TokenAttentionStack:
    box = read_container(path)
    if box.kind != "attention-stack":
        raise ContainerError(f"{path}: kind {box.kind!r} is not an attention stack")
    layers = tuple(str(l) for l in box.meta.get("layers", []))
    maps: dict[int, dict[str, torch.Tensor]] = {}
    for t in box.meta.get("timesteps", []):
        per_layer = {}
        for layer in layers:
            name = f"{int(t)}/{layer}"
            if name not in box.blocks:
                raise ContainerError(f"{path}: missing block {name!r}")
            per_layer[layer] = torch.tensor(np.array(box.blocks[name]), dtype=torch.float64)
        maps[int(t)] = per_layer
    span = box.meta.get("token_span", [0, 0])
    return TokenAttentionStack(
        maps, str(box.meta.get("class_word", "")), (int(span[0]), int(span[1])), layers
    )
