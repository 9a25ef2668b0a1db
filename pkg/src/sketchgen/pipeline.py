"""End-to-end orchestration: reference feature extraction and guided generation.

Two-phase structure: extract_reference_features inverts an encoded sketch and
builds the target attention stack (cached by content hash); generate samples
fresh noise and denoises it, optimizing the latent against the target maps
for the first guided steps. Generation never touches the sketch image, only
the extracted features.
"""
from __future__ import annotations

import hashlib
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attention import TokenAttentionStack, build_target_stack, export_stack, load_stack
from .backbone import DenoiserBackbone, load_backbone
from .guidance import GuidanceConfig, guided_denoise_step
from .inversion import (
    LatentTrajectory,
    NumericsError,
    conditioned_epsilon,
    export_trajectory,
    invert,
    load_trajectory,
)
from .scheduler import NoiseSchedule, ddim_step, make_noise_schedule


@dataclass(frozen=True)
class PromptPair:
    """Source/target prompt templates sharing one class word."""

    source: str
    target: str
    class_word: str

    def __post_init__(self):
        for name, text in (("source", self.source), ("target", self.target)):
            if self.class_word not in text.split():
                raise ValueError(f"class word {self.class_word!r} missing from {name} prompt")


def build_prompts(
    class_label: str, style_source: str = "sketch", style_target: str = "photo"
) -> PromptPair:
    label = class_label.strip()
    if not label:
        raise ValueError("class label must be non-empty")
    return PromptPair(
        source=f"a {style_source} of a {label}",
        target=f"a {style_target} of a {label}",
        class_word=label,
    )


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs beyond its inputs and seed."""

    backbone_kind: str = "toy"
    num_train_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    num_inference_steps: int = 50
    inversion_scale: float = 1.0
    latent_gain: float = 2.0
    output_size: int = 256
    cache_dir: str | None = None
    target_source: str = "inverted"
    style_source: str = "sketch"
    style_target: str = "photo"
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def __post_init__(self):
        if self.target_source not in ("inverted", "reconstruction"):
            raise ValueError(
                f"target_source must be 'inverted' or 'reconstruction', got {self.target_source!r}"
            )
        if self.guidance.guided_steps > self.num_inference_steps:
            raise ValueError(
                f"guided_steps {self.guidance.guided_steps} exceeds "
                f"num_inference_steps {self.num_inference_steps}"
            )
        if self.inversion_scale < 0:
            raise ValueError("inversion_scale must be >= 0")
        if self.latent_gain <= 0:
            raise ValueError("latent_gain must be > 0")
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")

    def make_schedule(self) -> NoiseSchedule:
        return make_noise_schedule(
            self.num_train_steps, self.beta_start, self.beta_end, self.num_inference_steps
        )

    def make_backbone(self) -> DenoiserBackbone:
        return load_backbone(self.backbone_kind)

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "backbone_kind",
                "num_train_steps",
                "beta_start",
                "beta_end",
                "num_inference_steps",
                "inversion_scale",
                "latent_gain",
                "output_size",
                "cache_dir",
                "target_source",
                "style_source",
                "style_target",
            )
        }
        d["guidance"] = {
            k: getattr(self.guidance, k)
            for k in (
                "beta",
                "guided_steps",
                "layers",
                "iterations_per_step",
                "eps_floor",
                "grad_clip",
                "cfg_scale",
                "step_scale_mode",
            )
        }
        if d["guidance"]["layers"] is not None:
            d["guidance"]["layers"] = list(d["guidance"]["layers"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        gdata = dict(data.pop("guidance", {}))
        known_g = {f for f in GuidanceConfig.__dataclass_fields__}
        unknown = set(gdata) - known_g
        if unknown:
            raise ValueError(f"unknown guidance config keys: {sorted(unknown)}")
        if gdata.get("layers") is not None:
            gdata["layers"] = tuple(gdata["layers"])
        known = {f for f in cls.__dataclass_fields__ if f != "guidance"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(guidance=GuidanceConfig(**gdata), **data)

    def with_guidance(self, **kwargs) -> "RunConfig":
        return replace(self, guidance=replace(self.guidance, **kwargs))


@dataclass
class RunManifest:
    """Reproducibility record emitted next to every generated image."""

    seed: int
    config: dict
    input_hashes: dict
    steps_executed: int
    guided_steps_executed: int
    timings: dict
    output_path: str | None = None
    trace_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "input_hashes": self.input_hashes,
            "steps_executed": self.steps_executed,
            "guided_steps_executed": self.guided_steps_executed,
            "timings": self.timings,
            "output_path": self.output_path,
            "trace_path": self.trace_path,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)


@dataclass
class GenerationResult:
    image: np.ndarray
    latent: torch.Tensor
    manifest: RunManifest
    trace: list[dict]


# ---- toy image codec ----


def encode_image(
    source, config: RunConfig, backbone: DenoiserBackbone
) -> tuple[torch.Tensor, str]:
    """Encode an input into a latent; returns (latent, content hash).

    Accepts a latent-shaped array/tensor (identity), a .npy file, or raw
    image bytes/path. Images are converted to grayscale, box-downsampled to
    the latent's spatial size, and mapped to channels: ink density, row
    difference, column difference, zero, all scaled by latent_gain.
    """
    shape = tuple(backbone.latent_shape)
    if isinstance(source, torch.Tensor):
        arr = source.detach().cpu().to(torch.float64).numpy()
        return _identity_latent(arr, shape)
    if isinstance(source, np.ndarray):
        return _identity_latent(source.astype(np.float64), shape)
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
        if str(source).endswith(".npy"):
            arr = np.load(io.BytesIO(raw)).astype(np.float64)
            return _identity_latent(arr, shape)
        return _image_bytes_to_latent(raw, config, shape)
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
        if raw[:6] == b"\x93NUMPY":
            arr = np.load(io.BytesIO(raw)).astype(np.float64)
            return _identity_latent(arr, shape)
        return _image_bytes_to_latent(raw, config, shape)
    raise TypeError(f"unsupported sketch input type {type(source).__name__}")


def _identity_latent(arr: np.ndarray, shape: tuple[int, ...]) -> tuple[torch.Tensor, str]:
    if tuple(arr.shape) != shape:
        raise ValueError(f"latent input shape {arr.shape} does not match backbone {shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return torch.tensor(arr), hashlib.sha256(arr.tobytes()).hexdigest()


def _image_bytes_to_latent(
    raw: bytes, config: RunConfig, shape: tuple[int, ...]
) -> tuple[torch.Tensor, str]:
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:
        raise ValueError(f"could not decode input image: {exc}") from exc
    channels, height, width = shape
    gray = img.convert("L").resize((width, height), Image.Resampling.BOX)
    g = np.asarray(gray, dtype=np.float64) / 255.0
    ink = 1.0 - 2.0 * g
    row_diff = np.diff(g, axis=0, append=g[:1, :])
    col_diff = np.diff(g, axis=1, append=g[:, :1])
    planes = [ink, row_diff, col_diff]
    while len(planes) < channels:
        planes.append(np.zeros_like(ink))
    latent = np.stack(planes[:channels]) * config.latent_gain
    return torch.tensor(latent, dtype=torch.float64), hashlib.sha256(raw).hexdigest()


def decode_latent(z: torch.Tensor, config: RunConfig) -> np.ndarray:
    """Map a latent back to a grayscale image (uint8, output_size square)."""
    ink = z.detach().cpu().numpy()[0] / config.latent_gain
    g = np.clip((1.0 - ink) / 2.0, 0.0, 1.0)
    small = Image.fromarray(np.round(g * 255.0).astype(np.uint8), mode="L")
    big = small.resize((config.output_size, config.output_size), Image.Resampling.NEAREST)
    return np.asarray(big)


# ---- reference feature extraction ----


def _feature_cache_key(
    image_hash: str, prompt: str, config: RunConfig, backbone: DenoiserBackbone
) -> str:
    payload = json.dumps(
        {
            "image": image_hash,
            "prompt": prompt,
            "backbone": backbone.fingerprint,
            "schedule": [
                config.num_train_steps,
                config.beta_start,
                config.beta_end,
                config.num_inference_steps,
            ],
            "inversion_scale": config.inversion_scale,
            "target_source": config.target_source,
            "eps_floor": config.guidance.eps_floor,
            "layers": list(config.guidance.layers or backbone.cross_layer_ids),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:32]


def _reconstruction_trajectory(
    traj: LatentTrajectory,
    prompt: str,
    schedule: NoiseSchedule,
    backbone: DenoiserBackbone,
    guidance_scale: float,
) -> LatentTrajectory:
    """Replay the schedule forward, keeping the latents actually denoised."""
    cond = backbone.embed_prompt(prompt)
    uncond = None if guidance_scale == 1.0 else backbone.null_embedding()
    z = traj.noisiest_latent.detach().to(torch.float64)
    entries = [(traj.entries[-1][0], z)]
    for t_cur, t_prev in schedule.step_pairs():
        eps = conditioned_epsilon(backbone, z, t_cur, cond, uncond, guidance_scale)
        z = ddim_step(z, eps, t_cur, t_prev, schedule)
        if not torch.isfinite(z).all():
            raise NumericsError(f"non-finite latent after step {t_cur} -> {t_prev}")
        entries.append((t_prev, z))
    entries.reverse()
    return LatentTrajectory(entries, prompt, float(guidance_scale))


def extract_reference_features(
    sketch_image,
    class_label: str,
    config: RunConfig,
    backbone: DenoiserBackbone | None = None,
) -> tuple[LatentTrajectory, TokenAttentionStack]:
    """Invert the encoded sketch and build its class-token target stack.

    Results are cached on disk (keyed by content hash and run parameters)
    when config.cache_dir is set; a cache hit reloads bit-identical features.
    """
    if backbone is None:
        backbone = config.make_backbone()
    schedule = config.make_schedule()
    prompts = build_prompts(class_label, config.style_source, config.style_target)
    latent, image_hash = encode_image(sketch_image, config, backbone)

    cache_base = None
    if config.cache_dir:
        key = _feature_cache_key(image_hash, prompts.source, config, backbone)
        cache_base = Path(config.cache_dir) / key
        traj_path = Path(f"{cache_base}.traj.sgc")
        stack_path = Path(f"{cache_base}.stack.sgc")
        if traj_path.exists() and stack_path.exists():
            return load_trajectory(traj_path), load_stack(stack_path)

    traj = invert(latent, prompts.source, schedule, backbone, config.inversion_scale)
    stack_traj = traj
    if config.target_source == "reconstruction":
        stack_traj = _reconstruction_trajectory(
            traj, prompts.source, schedule, backbone, config.inversion_scale
        )
    stack = build_target_stack(
        stack_traj,
        prompts.source,
        prompts.class_word,
        backbone,
        config.guidance.layers,
        config.guidance.eps_floor,
    )
    if cache_base is not None:
        cache_base.parent.mkdir(parents=True, exist_ok=True)
        export_trajectory(traj, f"{cache_base}.traj.sgc", dtype="<f8")
        export_stack(stack, f"{cache_base}.stack.sgc", dtype="<f8")
    return traj, stack


def _feature_hashes(traj: LatentTrajectory, stack: TokenAttentionStack) -> dict:
    h = hashlib.sha256()
    for _, z in traj.entries:
        h.update(z.detach().cpu().numpy().astype("<f8").tobytes())
    traj_hash = h.hexdigest()
    h = hashlib.sha256()
    for t in stack.timesteps:
        for layer in stack.layers:
            h.update(stack.maps[t][layer].detach().cpu().numpy().astype("<f8").tobytes())
    return {"trajectory": traj_hash, "stack": h.hexdigest()}


# ---- guided generation ----


def generate(
    features: tuple[LatentTrajectory, TokenAttentionStack],
    class_label: str,
    seed: int,
    config: RunConfig,
    backbone: DenoiserBackbone | None = None,
    on_step=None,
    kv_provider=None,
) -> GenerationResult:
    """Sample seeded noise and denoise it under attention-alignment guidance.

    The first guided_steps steps optimize the latent against the target
    stack; the rest are plain classifier-free-guided DDIM. kv_provider, when
    given, maps (step index, timestep) to a self-attention override for
    exemplar injection.
    """
    traj, stack = features
    if backbone is None:
        backbone = config.make_backbone()
    schedule = config.make_schedule()
    prompts = build_prompts(class_label, config.style_source, config.style_target)
    gcfg = config.guidance

    pairs = schedule.step_pairs()
    for t_cur, _ in pairs[: gcfg.guided_steps]:
        stack.at(t_cur)  # raises KeyError when coverage is missing

    cond = backbone.embed_prompt(prompts.target)
    uncond = None if gcfg.cfg_scale == 1.0 else backbone.null_embedding()

    timings: dict[str, float] = {}
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(backbone.latent_shape, generator=gen, dtype=torch.float64)
    timings["sample"] = time.perf_counter() - start

    trace: list[dict] = []
    guided_done = 0
    prev_delta: float | None = None
    phase_start = time.perf_counter()
    for i, (t_cur, t_prev) in enumerate(pairs):
        kv = kv_provider(i, t_cur) if kv_provider is not None else None
        z_before = z
        if i < gcfg.guided_steps:
            z = guided_denoise_step(
                z,
                t_cur,
                t_prev,
                stack.at(t_cur),
                cond,
                backbone,
                schedule,
                gcfg,
                class_word=prompts.class_word,
                uncond_embed=uncond,
                prev_delta=prev_delta,
                step_index=i,
                trace=trace,
                kv_override=kv,
            )
            guided_done += 1
            if i + 1 == gcfg.guided_steps:
                timings["guided"] = time.perf_counter() - phase_start
                phase_start = time.perf_counter()
        else:
            with torch.no_grad():
                eps = conditioned_epsilon(backbone, z, t_cur, cond, uncond, gcfg.cfg_scale, kv)
                z = ddim_step(z, eps, t_cur, t_prev, schedule)
            if not torch.isfinite(z).all():
                raise NumericsError(f"non-finite latent at step {i} ({t_cur} -> {t_prev})")
        prev_delta = float((z_before - z).norm())
        if on_step is not None:
            on_step(i + 1, len(pairs))
    timings["unguided" if gcfg.guided_steps < len(pairs) else "guided"] = (
        time.perf_counter() - phase_start
    )

    start = time.perf_counter()
    image = decode_latent(z, config)
    timings["decode"] = time.perf_counter() - start

    manifest = RunManifest(
        seed=int(seed),
        config=config.to_dict(),
        input_hashes={"backbone": backbone.fingerprint, **_feature_hashes(traj, stack)},
        steps_executed=len(pairs),
        guided_steps_executed=guided_done,
        timings=timings,
    )
    return GenerationResult(image=image, latent=z, manifest=manifest, trace=trace)


def save_result(result: GenerationResult, out_dir: str | Path, stem: str) -> dict[str, str]:
    """Write PNG + manifest JSON + trace JSONL; returns the paths used."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png_path = out / f"{stem}.png"
    manifest_path = out / f"{stem}.manifest.json"
    trace_path = out / f"{stem}.trace.jsonl"
    Image.fromarray(result.image, mode="L").save(png_path, format="PNG")
    result.manifest.output_path = str(png_path)
    result.manifest.trace_path = str(trace_path)
    with open(trace_path, "w") as fh:
        for row in result.trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(manifest_path, "w") as fh:
        json.dump(result.manifest.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"image": str(png_path), "manifest": str(manifest_path), "trace": str(trace_path)}
