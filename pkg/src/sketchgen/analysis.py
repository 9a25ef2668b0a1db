"""Distribution statistics of inverted latents and guidance-trace reports.

Supports the domain-gap study (invert two sets of inputs, compare the
distributions of their noise-end latents) and post-run inspection of the
guidance trace.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .inversion import invert
from .pipeline import RunConfig, build_prompts, encode_image

HIST_BINS = 200
HIST_RANGE = (-5.0, 5.0)


@dataclass
class LatentStats:
    """Pooled elementwise statistics over a set of same-shaped latents."""

    count: int
    mean: float
    variance: float
    bin_edges: np.ndarray
    counts: np.ndarray
    elements_per_latent: int
    source_label: str = ""

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        expected = self.count * self.elements_per_latent
        if int(self.counts.sum()) != expected:
            raise ValueError(
                f"histogram counts sum to {int(self.counts.sum())}, want {expected}"
            )

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "variance": self.variance,
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "elements_per_latent": self.elements_per_latent,
            "source_label": self.source_label,
        }


def latent_statistics(
    latents: list,
    bins: int = HIST_BINS,
    value_range: tuple[float, float] = HIST_RANGE,
    source_label: str = "",
) -> LatentStats:
    """Pooled mean/variance and histogram over every element of every latent.

    Out-of-range values are clamped into the edge bins so the histogram
    always accounts for all elements.
    """
    if not latents:
        raise ValueError("need at least one latent")
    arrays = []
    for z in latents:
        arr = z.detach().cpu().numpy() if isinstance(z, torch.Tensor) else np.asarray(z)
        arrays.append(arr.astype(np.float64).ravel())
    sizes = {a.size for a in arrays}
    if len(sizes) != 1:
        raise ValueError(f"latents must share one shape, got element counts {sorted(sizes)}")
    pool = np.concatenate(arrays)
    lo, hi = value_range
    if not lo < hi:
        raise ValueError("invalid histogram range")
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(np.clip(pool, lo, hi), bins=edges)
    return LatentStats(
        count=len(arrays),
        mean=float(pool.mean()),
        variance=float(pool.var()),
        bin_edges=edges,
        counts=counts.astype(np.int64),
        elements_per_latent=int(arrays[0].size),
        source_label=source_label,
    )


def compare_distributions(a: LatentStats, b: LatentStats) -> dict:
    """Variance ratio, mean difference, and histogram distance of two sets.

    Includes a plot-ready CSV (columns bin_lo, bin_hi, count_a, count_b).
    """
    if len(a.bin_edges) != len(b.bin_edges) or not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("histograms use different bin edges; rebuild with shared binning")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = float(np.float64(a.variance) / np.float64(b.variance))
    pa = a.counts / max(int(a.counts.sum()), 1)
    pb = b.counts / max(int(b.counts.sum()), 1)
    tv = float(0.5 * np.abs(pa - pb).sum())

    buf = io.StringIO()
    buf.write("bin_lo,bin_hi,count_a,count_b\n")
    for i in range(len(a.counts)):
        buf.write(
            f"{a.bin_edges[i]:.6g},{a.bin_edges[i + 1]:.6g},{int(a.counts[i])},{int(b.counts[i])}\n"
        )
    return {
        "labels": [a.source_label, b.source_label],
        "variance_ratio": ratio,
        "mean_difference": float(a.mean - b.mean),
        "tv_distance": tv,
        "count_a": a.count,
        "count_b": b.count,
        "csv": buf.getvalue(),
    }


_TRACE_KEYS = ("loss_before", "loss_after", "grad_norm", "step_scale", "beta")


def trace_report(trace) -> dict:
    """Per-row loss/grad table plus a summary of the guidance trace.

    Accepts a list of trace rows or a path to a JSON-lines trace file.
    """
    rows = _load_trace(trace)
    for i, row in enumerate(rows):
        missing = [k for k in _TRACE_KEYS if k not in row]
        if missing:
            raise ValueError(f"trace row {i} missing keys {missing}")
    if rows:
        descents = sum(1 for r in rows if r["loss_after"] < r["loss_before"])
        summary = {
            "rows": len(rows),
            "initial_loss": float(rows[0]["loss_before"]),
            "final_loss": float(rows[-1]["loss_after"]),
            "descent_fraction": descents / len(rows),
        }
    else:
        summary = {"rows": 0, "initial_loss": None, "final_loss": None, "descent_fraction": None}
    return {"rows": rows, "summary": summary}


def _load_trace(trace) -> list[dict]:
    if isinstance(trace, (str, Path)):
        rows = []
        for i, line in enumerate(Path(trace).read_text().splitlines()):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed trace line {i + 1}: {exc}") from exc
            if not isinstance(row, dict):
                raise ValueError(f"malformed trace line {i + 1}: not an object")
            rows.append(row)
        return rows
    if isinstance(trace, list):
        return [dict(r) for r in trace]
    raise ValueError(f"unsupported trace input type {type(trace).__name__}")


def domain_gap_study(
    inputs_a: list,
    inputs_b: list,
    class_label: str,
    config: RunConfig,
    style_a: str = "photo",
    style_b: str = "sketch",
    bins: int = HIST_BINS,
) -> dict:
    """Invert two input sets and compare their noise-end latent distributions.

    Each set is inverted under its own style prompt ("a {style} of a CLS");
    the noisiest latent of every trajectory is pooled into the statistics.
    """
    backbone = config.make_backbone()
    schedule = config.make_schedule()

    def invert_set(inputs, style):
        prompt = build_prompts(class_label, style_source=style).source
        out = []
        for item in inputs:
            latent, _ = encode_image(item, config, backbone)
            traj = invert(latent, prompt, schedule, backbone, config.inversion_scale)
            out.append(traj.noisiest_latent)
        return out

    stats_a = latent_statistics(
        invert_set(inputs_a, style_a), bins=bins, source_label=f"inverted-{style_a}"
    )
    stats_b = latent_statistics(
        invert_set(inputs_b, style_b), bins=bins, source_label=f"inverted-{style_b}"
    )
    return {
        "a": stats_a.to_dict(),
        "b": stats_b.to_dict(),
        "comparison": compare_distributions(stats_a, stats_b),
    }
