#!/usr/bin/env python3
"""
Command-line interface for voxfuse.

Subcommands:
    run        fuse one scene end to end and write tensors, BEV maps and metrics
    eval-mdu   hold-out evaluation of multi-depth unprojection over a K sweep
    bench-gma  time reference retrieval across problem sizes
    gen-scene  write a generated scene and its fixtures to a directory
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from src import __version__
from src.config import RunConfig, load_config, parse_scene_arg, with_overrides
from src.fusion import FusionPipeline, PipelineFixtures, PipelineResult, build_scales, make_fixtures
from src.gma import trace_assignments
from src.harness import (
    BENCH_HEADER,
    REPORT_HEADER,
    bench_retrieval,
    generate_scene,
    sweep_k,
    synthesize_feature_maps,
)
from src.mdu import FeatureMap
from src.scene_io import (
    Scene,
    read_feature_maps,
    read_fixtures,
    read_scene,
    write_assignments,
    write_bev,
    write_fixtures,
    write_json,
    write_rows_csv,
    write_scene,
    write_tensor_csv,
)
from src.validation import (
    ConfigError,
    ParameterValidator,
    SceneGenerationError,
    ValidationError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Invalid command-line arguments detected after parsing."""


def load_scene(config: RunConfig) -> Tuple[Scene, List[Tuple[FeatureMap, ...]]]:
    """The configured scene and its per-camera, per-scale feature maps."""
    spec = config.scene
    if spec.path is not None:
        scene = read_scene(spec.path)
        maps = [
            read_feature_maps(spec.path, camera_id, config.voxel.scales)
            for camera_id in scene.camera_ids
        ]
        return scene, maps
    scene = generate_scene(
        instances=spec.instances,
        points_per_instance=spec.points_per_instance,
        spread=spec.spread,
        rng_seed=config.seed,
        layout=spec.layout,
        n_cameras=spec.cameras,
        layers=spec.layers,
        max_retries=spec.max_retries,
        bounds=config.voxel.bounds,
    )
    maps = synthesize_feature_maps(scene, config.voxel.channels, config.voxel.scales, config.seed)
    return scene, maps


def load_fixtures(config: RunConfig) -> PipelineFixtures:
    if config.fixtures is not None:
        return read_fixtures(config.fixtures, config.voxel.scales)
    return make_fixtures(config.voxel.channels, config.voxel.scales, config.seed)


def build_pipeline(config: RunConfig, fixtures: PipelineFixtures) -> FusionPipeline:
    n_scales = config.voxel.scales
    scales = build_scales(
        config.voxel.base_size,
        n_scales,
        fixtures.channels,
        fixtures,
        [config.gma.l_for(i) for i in range(n_scales)],
        [config.gma.radius_for(i) for i in range(n_scales)],
        depth_aware_features=config.mdu.depth_aware_features,
    )
    return FusionPipeline(
        scales,
        fixtures,
        seeds_per_instance=config.mdu.seeds_per_instance,
        k=config.mdu.k,
        rng_seed=config.seed,
        origin=config.voxel.grid_origin,
        bounds=config.voxel.bounds,
    )


def run_pipeline(config: RunConfig) -> PipelineResult:
    """Load the scene and fixtures of a config and run the fusion pipeline."""
    scene, maps = load_scene(config)
    pipeline = build_pipeline(config, load_fixtures(config))
    return pipeline.run(scene.points, scene.cameras, scene.masks, maps)


def write_run_outputs(result: PipelineResult, out_dir, dump_assignments: bool = False) -> List[Path]:
    """Write per-scale tensors, both BEV maps, metrics.json and timings.json."""
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, scale in enumerate(result.scales):
        for name, tensor in (
            ("lidar", scale.lidar),
            ("camera", scale.camera),
            ("fused", scale.fused),
            ("cascaded", result.cascaded[i]),
        ):
            path = tensor_dir / f"{name}_s{i}.csv"
            write_tensor_csv(tensor, path)
            written.append(path)
        if dump_assignments and scale.trace is not None:
            path = out_dir / f"assignments_s{i}.csv"
            write_assignments(trace_assignments(scale.trace, scale.lidar), path)
            written.append(path)

    for name, bev in (("lidar", result.lidar_bev), ("fused", result.fused_bev)):
        path = out_dir / f"bev_{name}.bin"
        write_bev(bev, path)
        written.append(path)

    metrics = dict(result.metrics)
    metrics["bev"] = {
        "ix0": result.fused_bev.ix0,
        "iy0": result.fused_bev.iy0,
        "width": result.fused_bev.width,
        "height": result.fused_bev.height,
        "channels": result.fused_bev.channels,
    }
    write_json(metrics, out_dir / "metrics.json")
    write_json(result.timings, out_dir / "timings.json")
    written.extend([out_dir / "metrics.json", out_dir / "timings.json"])
    return written


class VoxFuseCLI:
    """Command-line interface for fusion, evaluation and benchmark runs."""

    def __init__(self):
        self.validator = ParameterValidator()

    def create_parser(self) -> argparse.ArgumentParser:
        """Create and configure the argument parser."""
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--config", metavar="FILE", help="TOML or JSON run configuration")
        common.add_argument("--seed", type=int, metavar="N", help="Override the config seed")
        common.add_argument(
            "--scene",
            metavar="DIR|generate:...",
            help="Scene directory, or generate:instances=4,points=200,spread=1.0,layout=planar",
        )
        common.add_argument("--out", metavar="PATH", help="Output directory or file")
        common.add_argument("-v", "--verbose", action="store_true", help="Log progress (INFO)")
        common.add_argument("-q", "--quiet", action="store_true", help="Only log errors")

        parser = argparse.ArgumentParser(
            prog="voxfuse",
            description="Multi-depth unprojection and gated modality-aware voxel fusion",
            epilog="Examples:\n"
            "  voxfuse run --config configs/desk.toml --out out/\n"
            "  voxfuse eval-mdu --scene generate:layout=planar --k 1,3,6,10 --out report.csv\n"
            "  voxfuse bench-gma --sizes 50000:50000,100000:100000 --out bench.csv\n"
            "  voxfuse gen-scene --scene generate:instances=4 --out scene/",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        sub = parser.add_subparsers(dest="command", metavar="COMMAND")
        sub.required = True

        run = sub.add_parser("run", parents=[common], help="Fuse one scene end to end")
        run.add_argument("--k", type=int, metavar="K", help="Depths per seed (overrides mdu.k)")
        run.add_argument("--fixtures", metavar="DIR", help="Fixture parameter directory")
        run.add_argument(
            "--dump-assignments",
            action="store_true",
            help="Also write the camera-to-LiDAR reference assignments per scale",
        )

        evaluate = sub.add_parser("eval-mdu", parents=[common], help="Hold-out MDU evaluation")
        evaluate.add_argument("--k", metavar="K,K,...", help="K values, e.g. 1,3,6,10")
        evaluate.add_argument("--holdout", type=float, metavar="F", help="Hold-out fraction")
        evaluate.add_argument(
            "--pairing", choices=["own", "global"], help="Mean error pairing (default: own)"
        )

        bench = sub.add_parser("bench-gma", parents=[common], help="Retrieval benchmark")
        bench.add_argument("--sizes", metavar="M:N,...", help="Camera:LiDAR voxel counts")
        bench.add_argument("--l", type=int, metavar="L", help="FPS samples")
        bench.add_argument("--radius", type=float, metavar="R", help="Distribution radius (voxels)")
        bench.add_argument("--repeats", type=int, metavar="N", help="Timed repeats per size")

        sub.add_parser("gen-scene", parents=[common], help="Write a generated scene and fixtures")
        return parser

    def configure_logging(self, args: argparse.Namespace) -> None:
        level = logging.WARNING
        if getattr(args, "verbose", False):
            level = logging.INFO
        if getattr(args, "quiet", False):
            level = logging.ERROR
        logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        logging.getLogger().setLevel(level)

    def resolve_config(self, args: argparse.Namespace) -> RunConfig:
        config = load_config(args.config) if args.config else RunConfig()
        overrides = {"seed": args.seed, "out": args.out}
        if args.scene is not None:
            overrides["scene"] = parse_scene_arg(args.scene, config.scene)
        if args.command == "run":
            overrides["k"] = args.k
            overrides["fixtures"] = args.fixtures
        if args.command == "eval-mdu" and args.k is not None:
            try:
                overrides["ks"] = self.validator.validate_k_list(args.k)
            except ValidationError as e:
                raise UsageError(str(e))
        if args.command == "bench-gma" and args.sizes is not None:
            try:
                overrides["sizes"] = self.validator.validate_sizes(args.sizes)
            except ValidationError as e:
                raise UsageError(str(e))
        try:
            return with_overrides(config, **overrides)
        except ValidationError as e:
            raise UsageError(str(e))

    def cmd_run(self, config: RunConfig, args: argparse.Namespace) -> int:
        result = run_pipeline(config)
        written = write_run_outputs(result, config.out, args.dump_assignments)
        if not args.quiet:
            print(f"nvpf={result.metrics['nvpf']} wrote {len(written)} files to {config.out}")
        return EXIT_OK

    def cmd_eval_mdu(self, config: RunConfig, args: argparse.Namespace) -> int:
        scene, _ = load_scene(config)
        reports = sweep_k(
            scene,
            config.eval.ks,
            holdout_fraction=args.holdout if args.holdout is not None else config.eval.holdout_fraction,
            pairing=args.pairing or config.eval.pairing,
            rng_seed=config.seed,
            recall_radius=config.eval.recall_radius,
        )
        out = self._file_output(config.out, "report.csv")
        write_rows_csv(REPORT_HEADER, [r.as_row() for r in reports], out)
        if not args.quiet:
            for r in reports:
                print(f"K={r.k}: mean_error={r.mean_error:.4f} recall={r.recall:.4f} nvpf={r.nvpf}")
        return EXIT_OK

    def cmd_bench_gma(self, config: RunConfig, args: argparse.Namespace) -> int:
        rows = bench_retrieval(
            config.bench.sizes,
            l=args.l if args.l is not None else config.bench.l,
            radius=args.radius if args.radius is not None else config.bench.radius_voxels,
            repeats=args.repeats if args.repeats is not None else config.bench.repeats,
            rng_seed=config.seed,
        )
        out = self._file_output(config.out, "bench.csv")
        write_rows_csv(BENCH_HEADER, [r.as_row() for r in rows], out)
        if not args.quiet:
            for r in rows:
                print(f"M={r.m} N={r.n}: {r.median_seconds:.4f}s")
        return EXIT_OK

    def cmd_gen_scene(self, config: RunConfig, args: argparse.Namespace) -> int:
        if config.scene.path is not None:
            raise UsageError("gen-scene needs a generate:... scene, not a directory")
        scene, maps = load_scene(config)
        write_scene(scene, config.out, maps)
        write_fixtures(load_fixtures(config), Path(config.out) / "fixtures")
        if not args.quiet:
            print(f"Wrote scene with {len(scene.points)} points to {config.out}")
        return EXIT_OK

    @staticmethod
    def _file_output(out: str, default_name: str) -> Path:
        path = Path(out)
        if path.suffix != ".csv":
            path = path / default_name
        return path

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """Main entry point for the CLI; returns the process exit code."""
        parser = self.create_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE
        self.configure_logging(args)

        commands = {
            "run": self.cmd_run,
            "eval-mdu": self.cmd_eval_mdu,
            "bench-gma": self.cmd_bench_gma,
            "gen-scene": self.cmd_gen_scene,
        }
        try:
            config = self.resolve_config(args)
            return commands[args.command](config, args)
        except (UsageError, ConfigError) as e:
            print(self.validator.format_error_message(e), file=sys.stderr)
            return EXIT_USAGE
        except (ValidationError, SceneGenerationError) as e:
            print(self.validator.format_error_message(e), file=sys.stderr)
            return EXIT_FAILURE
        except Exception as e:
            if args.verbose:
                import traceback

                traceback.print_exc()
            else:
                print(self.validator.format_error_message(e, args.command), file=sys.stderr)
            return EXIT_FAILURE


def main():
    """Entry point for the voxfuse command."""
    cli = VoxFuseCLI()
    exit_code = cli.run()
    sys.exit(exit_code)


if __name__ == "__main__":
    main()
