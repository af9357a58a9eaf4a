"""Entry point: python -m tetdiff <command>."""

from __future__ import annotations

import argparse
import logging
from collections.abc import Sequence
from pathlib import Path

from tetdiff import pipeline
from tetdiff.errors import ParameterError, TetDiffError
from tetdiff.models import CameraSpec, Config
from tetdiff.settings import Settings, parse_config

logger = logging.getLogger("tetdiff")


def _vector(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return parts[0], parts[1], parts[2]


def _timesteps(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="line-based 'section.key = value' file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--resolution", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--checkpoint", type=Path)

    parser = argparse.ArgumentParser(
        prog="tetdiff", description="Diffusion-based mesh generation on tetrahedral grids."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit OBJ meshes to grid states")
    p.add_argument("input_dir", type=Path, nargs="?")

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("sample", parents=[common], help="generate meshes")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--sampler", choices=["ddpm", "ddim"])
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--refine", action="store_true", help="regenerate deformations for the signs")
    p.add_argument("--raw", action="store_true", help="skip post-processing")
    p.add_argument("--trajectory", type=_timesteps, default=[], metavar="T1,T2,...",
                   help="save the predicted x0 at these timesteps")

    p = sub.add_parser("complete", parents=[common], help="complete a shape from one depth view")
    p.add_argument("mesh", type=Path)
    p.add_argument("--camera-position", type=_vector, default=(0.0, 0.0, 3.0))
    p.add_argument("--look-at", type=_vector, default=(0.0, 0.0, 0.0))
    p.add_argument("--up", type=_vector, default=(0.0, 1.0, 0.0))
    p.add_argument("--focal", type=float, default=64.0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--raw", action="store_true")

    p = sub.add_parser("interpolate", parents=[common], help="DDIM latent interpolation")
    p.add_argument("seed_a", type=int)
    p.add_argument("seed_b", type=int)
    p.add_argument("--steps", type=int, default=5, help="number of frames, endpoints included")
    p.add_argument("--raw", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="set metrics between two OBJ directories")
    p.add_argument("gen_dir", type=Path)
    p.add_argument("ref_dir", type=Path)
    p.add_argument("--retrieve", action="store_true", help="nearest reference per sample")
    p.add_argument("--dump-clouds", action="store_true")

    p = sub.add_parser("export", parents=[common], help="extract the mesh of a .tetg state")
    p.add_argument("state", type=Path)
    p.add_argument("--output", type=Path)
    p.add_argument("--raw", action="store_true")
    return parser


def overrides_from_args(args: argparse.Namespace) -> list[str]:
    """Flags become config overrides; explicit --set values win."""
    out = []
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if args.resolution is not None:
        out.append(f"grid.resolution={args.resolution}")
    if args.out is not None:
        out.append(f"paths.out_dir={args.out}")
    if args.checkpoint is not None:
        out.append(f"paths.checkpoint={args.checkpoint}")
    if args.command == "sample":
        if args.sampler:
            out.append(f"diffusion.sampler={args.sampler}")
        if args.steps is not None:
            out.append(f"diffusion.steps={args.steps}")
        if args.refine:
            out.append("diffusion.refine=true")
    return out + list(args.set)


def dispatch(
    command: str, args: argparse.Namespace, config: Config, settings: Settings
) -> None:
    if command == "fit":
        pipeline.run_fit(config, settings, args.input_dir)
    elif command == "train":
        pipeline.run_train(config, settings, args.dataset, resume=args.resume)
    elif command == "sample":
        pipeline.run_sample(config, settings, args.count, args.raw, args.trajectory)
    elif command == "complete":
        camera = CameraSpec(
            position=args.camera_position, look_at=args.look_at, up=args.up,
            focal=args.focal, width=args.width, height=args.height,
        )
        pipeline.run_complete(config, settings, args.mesh, camera, args.raw)
    elif command == "interpolate":
        pipeline.run_interpolate(config, settings, args.seed_a, args.seed_b, args.steps, args.raw)
    elif command == "eval":
        pipeline.run_eval(
            config, settings, args.gen_dir, args.ref_dir, args.retrieve, args.dump_clouds
        )
    elif command == "export":
        pipeline.run_export(config, args.state, args.output, args.raw)
    else:
        raise ParameterError(f"unknown command {command!r}")


def main(argv: Sequence[str] | None = None) -> int:
    settings = Settings()
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)-8s %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config or settings.config, overrides_from_args(args))
        logger.info("Running %s (seed %d, R=%d)", args.command, config.seed,
                    config.grid.resolution)
        dispatch(args.command, args, config, settings)
    except TetDiffError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
