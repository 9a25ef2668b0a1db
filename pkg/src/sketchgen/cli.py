"""Command-line interface: generation, editing, inversion, extraction, analysis.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Settings come from
an optional TOML config file with individual flags taking precedence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .analysis import domain_gap_study, trace_report
from .editing import EditingConfig, generate_with_exemplar, record_exemplar
from .inversion import export_trajectory, invert
from .pipeline import (
    RunConfig,
    build_prompts,
    encode_image,
    extract_reference_features,
    generate,
    save_result,
)
from .attention import export_stack


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--backbone", choices=["toy", "checkpoint"], help="denoiser backbone")
    p.add_argument("--steps", type=int, help="number of inference steps")
    p.add_argument("--cache-dir", help="feature cache directory")
    p.add_argument("--latent-gain", type=float, help="image-to-latent amplitude")
    p.add_argument("--output-size", type=int, help="output PNG side length")
    p.add_argument("--beta", type=float, help="guidance strength")
    p.add_argument("--guided-steps", type=int, help="denoising steps with latent optimization")
    p.add_argument("--iterations", type=int, help="optimization iterations per guided step")
    p.add_argument("--eps-floor", type=float, help="attention-map normalization floor")
    p.add_argument("--grad-clip", type=float, help="gradient norm clip")
    p.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale")
    p.add_argument(
        "--step-scale-mode", choices=["provisional", "previous"], help="update step sizing"
    )
    p.add_argument("--layers", help="comma-separated cross-attention layer ids")


_TOP_FLAGS = {
    "backbone": "backbone_kind",
    "steps": "num_inference_steps",
    "cache_dir": "cache_dir",
    "latent_gain": "latent_gain",
    "output_size": "output_size",
}
_GUIDANCE_FLAGS = {
    "beta": "beta",
    "guided_steps": "guided_steps",
    "iterations": "iterations_per_step",
    "eps_floor": "eps_floor",
    "grad_clip": "grad_clip",
    "cfg_scale": "cfg_scale",
    "step_scale_mode": "step_scale_mode",
}


def _run_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            data = tomllib.load(fh)
    guidance = dict(data.pop("guidance", {}))
    for flag, key in _TOP_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    for flag, key in _GUIDANCE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            guidance[key] = value
    layers = getattr(args, "layers", None)
    if layers is not None:
        guidance["layers"] = [l.strip() for l in layers.split(",") if l.strip()]
    if guidance:
        data["guidance"] = guidance
    return RunConfig.from_dict(data)


def _cmd_generate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    features = extract_reference_features(args.sketch, args.class_label, config)
    result = generate(features, args.class_label, args.seed, config)
    out = Path(args.out)
    paths = save_result(result, out.parent if out.parent != Path("") else ".", out.stem)
    print(json.dumps(paths, sort_keys=True))
    return 0


def _cmd_edit(args: argparse.Namespace) -> int:
    config = _run_config(args)
    features = extract_reference_features(args.sketch, args.class_label, config)
    exemplar = record_exemplar(args.exemplar, args.class_label, config)
    editing = EditingConfig(
        enabled=not args.no_substitution,
        start_step=args.sub_start,
        end_step=args.sub_end,
    )
    result = generate_with_exemplar(
        features, exemplar, args.class_label, args.seed, config, editing
    )
    out = Path(args.out)
    paths = save_result(result, out.parent if out.parent != Path("") else ".", out.stem)
    print(json.dumps(paths, sort_keys=True))
    return 0


def _cmd_invert(args: argparse.Namespace) -> int:
    config = _run_config(args)
    backbone = config.make_backbone()
    schedule = config.make_schedule()
    prompt = build_prompts(args.class_label, style_source=args.style).source
    latent, _ = encode_image(args.input, config, backbone)
    traj = invert(latent, prompt, schedule, backbone, config.inversion_scale)
    export_trajectory(traj, args.out)
    print(json.dumps({"trajectory": args.out, "entries": len(traj.entries)}, sort_keys=True))
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    config = _run_config(args)
    traj, stack = extract_reference_features(args.sketch, args.class_label, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.sketch).stem
    traj_path = out_dir / f"{stem}.traj.sgc"
    stack_path = out_dir / f"{stem}.stack.sgc"
    export_trajectory(traj, traj_path)
    export_stack(stack, stack_path)
    print(json.dumps({"trajectory": str(traj_path), "stack": str(stack_path)}, sort_keys=True))
    return 0


def _gather_inputs(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise ValueError(f"{directory} is not a directory")
    files = sorted(
        p for p in root.iterdir() if p.suffix.lower() in (".npy", ".png", ".jpg", ".jpeg")
    )
    if not files:
        raise ValueError(f"{directory} contains no .npy or image files")
    return files


def _cmd_analyze(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if args.trace:
        report = trace_report(args.trace)
        out_json = args.out_json or "trace_report.json"
        Path(out_json).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        print(json.dumps({"report": out_json}, sort_keys=True))
        return 0
    if not args.set_a or not args.set_b:
        raise _UsageError("analyze needs --set-a and --set-b directories (or --trace FILE)")
    study = domain_gap_study(
        _gather_inputs(args.set_a),
        _gather_inputs(args.set_b),
        args.class_label,
        config,
        style_a=args.style_a,
        style_b=args.style_b,
    )
    out_csv = args.out_csv or "analysis.csv"
    out_json = args.out_json or "analysis.json"
    Path(out_csv).write_text(study["comparison"]["csv"])
    slim = {k: (v if k != "comparison" else {kk: vv for kk, vv in v.items() if kk != "csv"})
            for k, v in study.items()}
    Path(out_json).write_text(json.dumps(slim, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"csv": out_csv, "json": out_json}, sort_keys=True))
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import create_app

    config = _run_config(args)
    app = create_app(config, queue_cap=args.queue_cap, workdir=args.workdir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="sketchgen", description="Sketch-guided image generation")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("generate", help="generate an image guided by a sketch")
    p.add_argument("--sketch", required=True, help="sketch PNG or latent .npy")
    p.add_argument("--class", dest="class_label", required=True, help="class word")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out.png")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("edit", help="generate with exemplar appearance injection")
    p.add_argument("--sketch", required=True)
    p.add_argument("--class", dest="class_label", required=True)
    p.add_argument("--exemplar", required=True, help="exemplar image or latent .npy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out.png")
    p.add_argument("--sub-start", type=int, default=5, help="first substituted step (1-based)")
    p.add_argument("--sub-end", type=int, default=None, help="last substituted step")
    p.add_argument("--no-substitution", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("invert", help="invert an input and export its trajectory")
    p.add_argument("--input", required=True)
    p.add_argument("--class", dest="class_label", required=True)
    p.add_argument("--style", default="sketch", help="style word for the inversion prompt")
    p.add_argument("--out", default="trajectory.sgc")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("extract", help="extract reference features from a sketch")
    p.add_argument("--sketch", required=True)
    p.add_argument("--class", dest="class_label", required=True)
    p.add_argument("--out-dir", default=".")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("analyze", help="domain-gap study or trace report")
    p.add_argument("--set-a", help="directory of inputs for set A")
    p.add_argument("--set-b", help="directory of inputs for set B")
    p.add_argument("--class", dest="class_label", default="object")
    p.add_argument("--style-a", default="photo")
    p.add_argument("--style-b", default="sketch")
    p.add_argument("--trace", help="guidance trace JSONL to summarize instead")
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--queue-cap", type=int, default=16)
    p.add_argument("--workdir", default=None, help="job output directory")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_serve)

    return parser


def cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
