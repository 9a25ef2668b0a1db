"""Denoiser backbones with instrumented attention.

The abstraction is a callable mapping (latent, timestep, text embedding) to a
predicted noise tensor plus, on request, the raw per-head cross-attention
probability maps and the self-attention keys/values of every instrumented
layer. Two implementations live here:

* :class:`TinyDenoiser` - a small deterministic, fully differentiable network
  with one cross-attention layer at 8x8, one at 4x4 and one self-attention
  layer at 4x4, used for all desk-scale verification. It runs in float64 so
  finite-difference gradient checks are clean.
* :class:`DenoiserBackbone` - the contract a full-scale checkpoint adapter has
  to satisfy (same ``denoise`` signature, 16x16 + mid-block instrumentation).
"""
from __future__ import annotations

import abc
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "TextEmbedding",
    "AttentionRecord",
    "SelfAttentionRecord",
    "DenoiserOutput",
    "DenoiserBackbone",
    "TinyDenoiser",
    "load_backbone",
    "TOY_SEED",
]

# Weight seed for the toy backbone; fixed so trajectories reproduce across
# machines up to floating-point platform variance.
TOY_SEED = 0xC0FFEE

_TOKEN_CHARS = 4  # subword chunk length of the toy tokenizer
_EMBED_DIM = 16


@dataclass
class TextEmbedding:
    """Tokenized prompt with per-token embedding rows.

    ``token_spans`` maps each distinct whitespace-delimited source word to the
    half-open token index range of its first occurrence.
    """

    tokens: list[int]
    embedding: torch.Tensor  # [num_tokens, embed_dim]
    token_spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.embedding.shape[0] != len(self.tokens):
            raise ValueError("embedding row count must equal token count")
        n = len(self.tokens)
        for word, (lo, hi) in self.token_spans.items():
            if not (0 <= lo < hi <= n):
                raise ValueError(f"span for {word!r} out of range: ({lo}, {hi})")

    def span_for(self, phrase: str) -> tuple[int, int]:
        """Token range covering ``phrase`` (possibly multi-word, contiguous)."""
        words = phrase.split()
        if not words:
            raise KeyError("empty phrase")
        spans = []
        for w in words:
            if w not in self.token_spans:
                raise KeyError(f"word {w!r} not present in the prompt")
            spans.append(self.token_spans[w])
        for (_, hi), (lo, _) in zip(spans, spans[1:]):
            if lo != hi:
                raise KeyError(f"words of {phrase!r} are not contiguous in the prompt")
        return spans[0][0], spans[-1][1]


@dataclass
class AttentionRecord:
    """Raw cross-attention probabilities of one layer: [heads, pixels, tokens]."""

    layer: str
    probs: torch.Tensor
    height: int
    width: int


@dataclass
class SelfAttentionRecord:
    """Self-attention keys/values of one layer: each [heads, pixels, head_dim]."""

    layer: str
    keys: torch.Tensor
    values: torch.Tensor


@dataclass
class DenoiserOutput:
    epsilon: torch.Tensor
    cross_records: list[AttentionRecord] = field(default_factory=list)
    self_records: list[SelfAttentionRecord] = field(default_factory=list)


def _token_pieces(word: str) -> list[str]:
    return [word[i : i + _TOKEN_CHARS] for i in range(0, len(word), _TOKEN_CHARS)]


def _token_id(token: str) -> int:
    return int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:4], "little")


def _token_row(token: str, dim: int) -> torch.Tensor:
    # Stable per-token vector: hash -> PCG64 -> normal row. Replaces a
    # pretrained text encoder; tests exercise mechanism, not semantics.
    seed = int.from_bytes(
        hashlib.sha256(b"tok-emb:" + token.encode("utf-8")).digest()[:8], "little"
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    return torch.from_numpy(rng.standard_normal(dim)).to(torch.float64)


class DenoiserBackbone(abc.ABC):
    """Contract every backbone (toy or checkpoint adapter) satisfies.

    Required attributes:
        latent_shape: (C, H, W) of the latent space.
        num_train_steps: timestep domain size.
        cross_layer_ids / self_layer_ids: instrumented layer names. For a
            checkpoint adapter the convention is all cross-attention layers at
            16x16 spatial resolution plus the mid block (overridable through
            the guidance layer set).
        fingerprint: stable identifier entering cache keys and run manifests.

    A backbone instance is not safe for concurrent ``denoise`` calls.
    """

    latent_shape: tuple[int, int, int]
    num_train_steps: int
    cross_layer_ids: tuple[str, ...]
    self_layer_ids: tuple[str, ...]
    fingerprint: str

    @abc.abstractmethod
    def denoise(
        self,
        z_t: torch.Tensor,
        t: int,
        cond: TextEmbedding,
        record_attention: bool = False,
        kv_override: dict[str, tuple[torch.Tensor, torch.Tensor]] | None = None,
    ) -> DenoiserOutput:
        """Predict noise at ``(z_t, t)`` under ``cond``; optionally record
        attention and/or substitute self-attention keys/values per layer."""

    @abc.abstractmethod
    def embed_prompt(self, text: str) -> TextEmbedding:
        ...

    @abc.abstractmethod
    def null_embedding(self) -> TextEmbedding:
        """Embedding of the unconditional (empty) prompt."""


class TinyDenoiser(DenoiserBackbone):
    """Deterministic differentiable toy denoiser on 4x8x8 latents.

    Structure: conv-in with timestep bias, cross-attention at 8x8, strided
    downsample to 4x4, cross-attention and self-attention at 4x4, upsample
    back and conv-out. All convolutions use circular padding so constant
    inputs stay constant and attention maps over a blank input are exactly
    uniform. Attention temperature scales with the noise level, so maps are
    near-uniform at high timesteps and sharpen toward the clean end. The
    predicted noise is the network output plus a noise-level proportional
    component of the input, which keeps sampling trajectories bounded
    without any training.
    """

    latent_shape = (4, 8, 8)
    cross_layer_ids = ("cross_8x8", "cross_4x4")
    self_layer_ids = ("self_4x4",)

    def __init__(
        self,
        seed: int = TOY_SEED,
        num_train_steps: int = 1000,
        channels: int = 16,
        heads: int = 2,
        head_dim: int = 8,
        logit_gain: float = 3.0,
        out_gain: float = 0.12,
        time_gain: float = 0.1,
        input_tracking: float = 0.95,
        attn_cooling: float = 4.0,
    ):
        self.seed = seed
        self.num_train_steps = num_train_steps
        self.channels = channels
        self.heads = heads
        self.head_dim = head_dim
        self.logit_gain = logit_gain
        self.out_gain = out_gain
        self.time_gain = time_gain
        self.input_tracking = input_tracking
        self.attn_cooling = attn_cooling
        self.fingerprint = (
            f"toy:{seed:#x}:c{channels}h{heads}d{head_dim}"
            f":lg{logit_gain}:og{out_gain}:tg{time_gain}:it{input_tracking}"
            f":ac{attn_cooling}"
        )

        g = torch.Generator().manual_seed(seed)
        d = channels
        a = heads * head_dim

        def mat(rows, cols, fan):
            return torch.randn(rows, cols, generator=g, dtype=torch.float64) / math.sqrt(fan)

        def conv(out_c, in_c):
            return torch.randn(out_c, in_c, 3, 3, generator=g, dtype=torch.float64) / math.sqrt(
                in_c * 9
            )

        self.w_conv_in = conv(d, self.latent_shape[0])
        self.w_time1 = mat(d, d, d)
        self.w_time2 = mat(d, d, d)
        self.attn = {}
        for name, kv_dim in [
            ("cross_8x8", _EMBED_DIM),
            ("cross_4x4", _EMBED_DIM),
            ("self_4x4", d),
        ]:
            self.attn[name] = {
                "q": mat(d, a, d),
                "k": mat(kv_dim, a, kv_dim),
                "v": mat(kv_dim, a, kv_dim),
                "o": mat(a, d, a),
            }
        self.w_conv_down = conv(d, d)
        self.w_conv_up = conv(d, d)
        self.w_conv_out = conv(self.latent_shape[0], d)

    # ---- text ----

    def embed_prompt(self, text: str) -> TextEmbedding:
        if not text or not text.strip():
            raise ValueError("prompt text must be non-empty")
        tokens: list[str] = []
        spans: dict[str, tuple[int, int]] = {}
        for word in text.split():
            pieces = _token_pieces(word)
            spans.setdefault(word, (len(tokens), len(tokens) + len(pieces)))
            tokens.extend(pieces)
        rows = torch.stack([_token_row(tok, _EMBED_DIM) for tok in tokens])
        return TextEmbedding([_token_id(t) for t in tokens], rows, spans)

    def null_embedding(self) -> TextEmbedding:
        tok = "<null>"
        return TextEmbedding([_token_id(tok)], _token_row(tok, _EMBED_DIM).unsqueeze(0), {})

    # ---- forward ----

    def _circ_conv(self, x: torch.Tensor, w: torch.Tensor, stride: int = 1) -> torch.Tensor:
        x = F.pad(x.unsqueeze(0), (1, 1, 1, 1), mode="circular")
        return F.conv2d(x, w, stride=stride).squeeze(0)

    def _time_bias(self, t: int) -> torch.Tensor:
        half = self.channels // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
        )
        ang = t * freqs
        emb = torch.cat([torch.sin(ang), torch.cos(ang)])
        emb = F.silu(emb @ self.w_time1) @ self.w_time2
        return self.time_gain * emb.view(-1, 1, 1)

    def _heads_split(self, x: torch.Tensor) -> torch.Tensor:
        # [n, heads*head_dim] -> [heads, n, head_dim]
        return x.view(x.shape[0], self.heads, self.head_dim).permute(1, 0, 2)

    def _attention(
        self,
        name: str,
        x: torch.Tensor,
        context: torch.Tensor,
        side: int,
        sharpness: float,
        out: DenoiserOutput | None,
        kv_override,
    ) -> torch.Tensor:
        """One residual attention block on flattened features ``x`` [P, C]."""
        w = self.attn[name]
        # Queries see spatially centered features: a constant input yields
        # exactly uniform attention, and map sharpness tracks spatial contrast.
        q = self._heads_split((x - x.mean(dim=0, keepdim=True)) @ w["q"])
        k = self._heads_split(context @ w["k"])
        v = self._heads_split(context @ w["v"])
        if kv_override is not None and name in kv_override:
            k_sub, v_sub = kv_override[name]
            if k_sub.shape != k.shape or v_sub.shape != v.shape:
                raise ValueError(
                    f"kv_override shape mismatch at {name}: "
                    f"got {tuple(k_sub.shape)}/{tuple(v_sub.shape)}, want {tuple(k.shape)}"
                )
            k, v = k_sub, v_sub
        logits = (q @ k.transpose(-1, -2)) * (
            sharpness * self.logit_gain / math.sqrt(self.head_dim)
        )
        probs = torch.softmax(logits, dim=-1)
        if out is not None:
            if name.startswith("cross"):
                out.cross_records.append(AttentionRecord(name, probs, side, side))
            else:
                out.self_records.append(SelfAttentionRecord(name, k, v))
        attended = (probs @ v).permute(1, 0, 2).reshape(x.shape[0], -1)
        return x + attended @ w["o"]

    def denoise(
        self,
        z_t: torch.Tensor,
        t: int,
        cond: TextEmbedding,
        record_attention: bool = False,
        kv_override: dict[str, tuple[torch.Tensor, torch.Tensor]] | None = None,
    ) -> DenoiserOutput:
        if tuple(z_t.shape) != self.latent_shape:
            raise ValueError(f"latent shape {tuple(z_t.shape)} != {self.latent_shape}")
        if not 0 <= int(t) < self.num_train_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_train_steps})")
        if kv_override:
            unknown = set(kv_override) - set(self.self_layer_ids)
            if unknown:
                raise ValueError(f"kv_override names unknown layers: {sorted(unknown)}")
        z_t = z_t.to(torch.float64)
        out = DenoiserOutput(epsilon=z_t)  # epsilon replaced below
        sink = out if record_attention else None

        # Attention temperature tracks the noise level: diffuse, near-uniform
        # maps at high t sharpening toward the clean end, as in a trained model.
        level = int(t) / max(self.num_train_steps - 1, 1)
        sharp = 1.0 / (1.0 + self.attn_cooling * level)

        h = F.silu(self._circ_conv(z_t, self.w_conv_in) + self._time_bias(int(t)))
        c, side = h.shape[0], h.shape[1]
        flat = h.permute(1, 2, 0).reshape(side * side, c)
        flat = self._attention("cross_8x8", flat, cond.embedding, side, sharp, sink, None)
        h = flat.reshape(side, side, c).permute(2, 0, 1)

        h = F.silu(self._circ_conv(h, self.w_conv_down, stride=2))
        side = h.shape[1]
        flat = h.permute(1, 2, 0).reshape(side * side, c)
        flat = self._attention("cross_4x4", flat, cond.embedding, side, sharp, sink, None)
        flat = self._attention("self_4x4", flat, flat, side, sharp, sink, kv_override)
        h = flat.reshape(side, side, c).permute(2, 0, 1)

        h = F.interpolate(h.unsqueeze(0), scale_factor=2, mode="nearest").squeeze(0)
        h = F.silu(self._circ_conv(h, self.w_conv_up))
        residual = self._circ_conv(h, self.w_conv_out) * self.out_gain

        # Noise-level proportional component: at high t the prediction tracks
        # the input (as a denoiser's would), keeping DDIM trajectories bounded.
        out.epsilon = self.input_tracking * math.sqrt(level) * z_t + residual
        return out


def load_backbone(kind: str, **kwargs) -> DenoiserBackbone:
    """Factory used by the CLI/config layer: ``toy`` or ``checkpoint``.

    A checkpoint adapter needs the pretrained-diffusion runtime and a local
    checkpoint; constructing one is delegated to an installed integration and
    fails with a clear message when none is available.
    """
    if kind == "toy":
        return TinyDenoiser(**kwargs)
    if kind == "checkpoint":
        checkpoint_id = kwargs.get("checkpoint_id")
        raise RuntimeError(
            "checkpoint backbone requested"
            + (f" ({checkpoint_id})" if checkpoint_id else "")
            + ", but no latent-diffusion runtime is installed; provide an adapter "
            "implementing DenoiserBackbone (instrument all 16x16 cross-attention "
            "layers plus the mid block) and register it here"
        )
    raise ValueError(f"unknown backbone kind {kind!r}")
