"""Command line: dataset generation, training, resume, rendering,
evaluation and the ablation suite.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command
writes a manifest (arguments, seed, git describe, dataset hash) next to
its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

log = logging.getLogger("neumat")


class _UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def _write_manifest(directory, command, args_dict, dataset_path=None,
                    extra=None):
    from .dataset import file_sha256

    os.makedirs(directory or ".", exist_ok=True)
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(args_dict.items())
                      if k not in ("func",)},
        "git_describe": _git_describe(),
        "dataset_sha256": file_sha256(dataset_path) if dataset_path else None,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory or ".", "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2, default=str)
    return path


def _parse_vec3(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    from .dataset import GenConfig, generate_dataset, save_dataset
    from .heightfield import make_material, material_from_image

    cfg = GenConfig(resolution=args.resolution, levels=args.levels,
                    samples_level0=args.samples_level0, seed=args.seed,
                    material=args.material, material_seed=args.material_seed,
                    group_extent=args.view_tile,
                    roughness=args.roughness,
                    specular_weight=args.specular_weight,
                    height_scale=args.height_scale,
                    radiance_clamp=args.radiance_clamp, image=args.image)
    if args.material == "image":
        if not args.image:
            raise ValueError("--image is required with --material image")
        mat = material_from_image(args.image, **{
            k: v for k, v in cfg.material_overrides().items()
            if k != "radiance_clamp" or np.isfinite(v)})
        if mat.resolution != cfg.resolution:
            cfg = dataclasses.replace(cfg, resolution=mat.resolution)
    else:
        mat = make_material(args.material, resolution=args.resolution,
                            seed=args.material_seed, **cfg.material_overrides())
    ds = generate_dataset(mat, cfg)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {sum(ds.counts)} queries over "
          f"{ds.level_count} levels")
    _write_manifest(os.path.dirname(args.out), "gen-data", vars(args),
                    dataset_path=args.out)
    return EXIT_OK


def _train_flags(sub):
    sub.add_argument("--dataset", required=True)
    sub.add_argument("--out", dest="out_dir", required=True)
    sub.add_argument("--config", help="key=value config file (flags win)")
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--tiles-per-batch", type=int, dest="tiles_per_batch")
    sub.add_argument("--tile-h", type=int, dest="tile_h")
    sub.add_argument("--tile-w", type=int, dest="tile_w")
    sub.add_argument("--lr", type=float)
    sub.add_argument("--beta1", type=float)
    sub.add_argument("--beta2", type=float)
    sub.add_argument("--eps", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--encoding-on", action=argparse.BooleanOptionalAction,
                     dest="encoding_on", default=None)
    sub.add_argument("--gradient-loss-on", action=argparse.BooleanOptionalAction,
                     dest="gradient_loss_on", default=None)
    sub.add_argument("--remap-on", action=argparse.BooleanOptionalAction,
                     dest="remap_on", default=None)
    sub.add_argument("--decoder-kind", choices=("mlp", "inception"),
                     dest="decoder_kind")
    sub.add_argument("--gradient-loss-weight", type=float,
                     dest="gradient_loss_weight")
    sub.add_argument("--checkpoint-period", type=int, dest="checkpoint_period")
    sub.add_argument("--workers", type=int)
    sub.add_argument("--pyramid-channels", type=int, dest="pyramid_channels")
    sub.add_argument("--hidden-width", type=int, dest="hidden_width")


def _build_train_config(args):
    from .training import build_config, parse_config_file

    file_values = parse_config_file(args.config) if args.config else {}
    cli_keys = ("iterations", "tiles_per_batch", "tile_h", "tile_w", "lr",
                "beta1", "beta2", "eps", "seed", "encoding_on",
                "gradient_loss_on", "remap_on", "decoder_kind",
                "gradient_loss_weight", "checkpoint_period", "workers",
                "pyramid_channels", "hidden_width")
    cli_values = {k: getattr(args, k) for k in cli_keys}
    cli_values["dataset"] = args.dataset
    cli_values["out_dir"] = args.out_dir
    return build_config(file_values, cli_values)


def _cmd_train(args) -> int:
    from .training import train

    cfg = _build_train_config(args)
    result = train(cfg)
    print(f"finished: checkpoint {result.checkpoint_path}")
    _write_manifest(cfg.out_dir, "train", dataclasses.asdict(cfg),
                    dataset_path=cfg.dataset,
                    extra={"checkpoint": result.checkpoint_path,
                           "final_val_mse": result.validation[-1][1]
                           if result.validation else None})
    return EXIT_OK


def _cmd_resume(args) -> int:
    from .training import resume

    cfg = _build_train_config(args)
    result = resume(args.checkpoint, cfg)
    print(f"finished: checkpoint {result.checkpoint_path}")
    _write_manifest(cfg.out_dir, "resume", dataclasses.asdict(cfg),
                    dataset_path=cfg.dataset,
                    extra={"checkpoint": result.checkpoint_path})
    return EXIT_OK


def _load_material(checkpoint_path):
    from .checkpoint_io import load_checkpoint
    from .model import ModelConfig, NeuralMaterial

    ck = load_checkpoint(checkpoint_path)
    mat = NeuralMaterial(ModelConfig.from_dict(ck.arch), seed=0)
    mat.load_state_entries({k: v for k, v in ck.entries.items()
                            if not k.startswith("adam.")})
    return mat, ck


def _cmd_render(args) -> int:
    from .imgio import tonemap, write_pfm, write_png
    from .render import SceneConfig, render

    mat, _ = _load_material(args.checkpoint)
    scene = SceneConfig(geometry=args.geometry, cam_pos=args.cam,
                        look_at=args.look_at, fov_deg=args.fov,
                        light_dir=args.light, light_intensity=args.intensity,
                        width=args.width, height=args.height, spp=args.spp,
                        uv_tiling=args.tiling, background=args.background)
    result = render(mat, scene)
    write_pfm(args.out_prefix + ".pfm", result.hdr)
    write_png(args.out_prefix + ".png", tonemap(result.hdr))
    print(f"wrote {args.out_prefix}.pfm / .png "
          f"({result.queries_evaluated} queries, lod "
          f"[{result.lod.min():.2f}, {result.lod.max():.2f}])")
    _write_manifest(os.path.dirname(args.out_prefix), "render", vars(args),
                    extra={"lod_range": [float(result.lod.min()),
                                         float(result.lod.max())]})
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .evaluation import compute_error_report

    mat, _ = _load_material(args.checkpoint)
    ds = load_dataset(args.dataset)
    report = compute_error_report(mat, ds, out_dir=args.out)
    print(report.to_json())
    _write_manifest(args.out, "eval", vars(args), dataset_path=args.dataset)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .dataset import load_dataset
    from .evaluation import ablation_suite

    cfg = _build_train_config(args)
    ds = load_dataset(cfg.dataset)
    report = ablation_suite(ds, cfg, out_dir=cfg.out_dir,
                            iterations=args.iterations)
    print(report.to_json())
    _write_manifest(cfg.out_dir, "ablate", dataclasses.asdict(cfg),
                    dataset_path=cfg.dataset,
                    extra={"partial": report.partial})
    return EXIT_RUNTIME if report.partial else EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="neumat",
                     description="Neural reflectance material pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a reference dataset",
                       parents=[], description="Synthesize a 7D-query "
                       "dataset from a procedural heightfield material.")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--levels", type=int, default=6)
    g.add_argument("--samples-level0", type=int, default=1 << 20,
                   dest="samples_level0")
    g.add_argument("--material", choices=("bumps", "woven", "image"),
                   default="bumps")
    g.add_argument("--material-seed", type=int, default=0, dest="material_seed")
    g.add_argument("--view-tile", type=int, default=None, dest="view_tile",
                   help="texels per side of one light/view group "
                        "(default: full level coverage)")
    g.add_argument("--image", help="grayscale heightfield image")
    g.add_argument("--roughness", type=float)
    g.add_argument("--specular-weight", type=float, dest="specular_weight")
    g.add_argument("--height-scale", type=float, dest="height_scale")
    g.add_argument("--radiance-clamp", type=float, dest="radiance_clamp")
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a material")
    _train_flags(t)
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("resume", help="continue training from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    _train_flags(r)
    r.set_defaults(func=_cmd_resume)

    rd = sub.add_parser("render", help="render a trained material")
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--out-prefix", required=True, dest="out_prefix")
    rd.add_argument("--geometry", choices=("quad", "sphere"), default="quad")
    rd.add_argument("--width", type=int, default=128)
    rd.add_argument("--height", type=int, default=128)
    rd.add_argument("--cam", type=_parse_vec3, default=(0.5, -0.7, 1.0))
    rd.add_argument("--look-at", type=_parse_vec3, default=(0.5, 0.5, 0.0),
                    dest="look_at")
    rd.add_argument("--fov", type=float, default=40.0)
    rd.add_argument("--light", type=_parse_vec3, default=(-0.4, 0.25, 0.85))
    rd.add_argument("--intensity", type=float, default=1.0)
    rd.add_argument("--spp", type=int, default=1, choices=(1, 4))
    rd.add_argument("--tiling", type=float, default=1.0)
    rd.add_argument("--background", type=float, default=0.0)
    rd.set_defaults(func=_cmd_render)

    e = sub.add_parser("eval", help="error report against a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="cumulative ablation suite")
    _train_flags(a)
    a.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
