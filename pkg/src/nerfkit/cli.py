"""Command-line entry points: train, render, bench, slice, serve.

Exit codes: 0 on success, 1 on usage errors (bad flags, missing arguments),
2 on runtime failures (unreadable files, invalid data, diverged training).
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .bench import (
    DEFAULT_RESOLUTIONS,
    BenchConfig,
    format_table,
    report_to_csv,
    report_to_json,
    run_benchmark,
)
from .field import preset_scene
from .geometry import Camera, orbit_pose
from .images import save_png, save_raw
from .renderer import RenderSettings, StereoRig, render_frame, render_stereo
from .service import ENCODING_PNG, ENCODING_RAW, RenderSession, serve
from .snapshot import load_snapshot, save_snapshot
from .trainer import (
    TrainConfig,
    evaluate_psnr,
    load_dataset,
    psnr,
    synthetic_sphere_dataset,
    train,
)
from .volume import export_volume, raycast_grid, read_slices, write_slices


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for runtime
    failures, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_scene_source(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--snapshot", metavar="FILE", help="trained field snapshot")
    g.add_argument(
        "--preset",
        metavar="NAME",
        help="built-in analytic scene: small, medium, or large",
    )


def _resolve_field(args):
    if args.preset:
        return preset_scene(args.preset)
    snap = load_snapshot(args.snapshot)
    return snap.field, snap.aabb


def _parse_wh(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return w, h


def _parse_wh_list(text: str) -> tuple:
    return tuple(_parse_wh(part) for part in text.split(","))


def _parse_int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _parse_volume_resolution(text: str):
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            return int(parts[0])
        if len(parts) == 3:
            return tuple(int(v) for v in parts)
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected N or NXxNYxNZ, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="nerfkit",
        description="Train, render, benchmark, export, and stream radiance fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="optimize a field and write a snapshot")
    p.add_argument("--data", metavar="DIR", help="dataset directory or manifest JSON")
    p.add_argument(
        "--out", metavar="FILE", required=True, help="snapshot file to write"
    )
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-rays", type=int, default=4096)
    p.add_argument("--samples", type=int, default=64, help="samples per ray")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-tables", type=float, default=1e-2)
    p.add_argument("--lr-mlp", type=float, default=1e-3)
    p.add_argument(
        "--eval", action="store_true", help="report PSNR against the dataset after training"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one frame (or a stereo pair)")
    _add_scene_source(p)
    p.add_argument("--out", metavar="FILE", required=True, help=".png or .raw output")
    p.add_argument("--size", type=_parse_wh, default=(640, 480), metavar="WxH")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--upscale", type=int, default=1, choices=(1, 2, 4))
    p.add_argument("--azimuth", type=float, default=0.0, help="orbit angle, degrees")
    p.add_argument("--elevation", type=float, default=15.0, help="degrees")
    p.add_argument("--radius", type=float, default=None, help="orbit radius, meters")
    p.add_argument("--fov", type=float, default=60.0, help="vertical field of view, degrees")
    p.add_argument("--stereo", action="store_true", help="write _left/_right pair")
    p.add_argument("--ipd", type=float, default=0.063, help="eye separation, meters")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="frame-timing sweep over resolutions")
    p.add_argument(
        "--scene",
        action="append",
        metavar="NAME|FILE",
        help="preset name or snapshot path; repeatable (default: medium)",
    )
    p.add_argument(
        "--resolutions",
        type=_parse_wh_list,
        default=DEFAULT_RESOLUTIONS,
        help="comma-separated WxH list",
    )
    p.add_argument(
        "--upscale-factors", type=_parse_int_list, default=(1, 2), help="comma-separated"
    )
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--min-duration", type=float, default=10.0, help="seconds per cell")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--warmup", type=float, default=2.0, help="seconds")
    p.add_argument("--timeout-ms", type=float, default=2000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", metavar="FILE", help="write the full report as JSON")
    p.add_argument("--csv", metavar="FILE", help="write per-cell rows as CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("slice", help="bake a field into a volume and write slices")
    _add_scene_source(p)
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument(
        "--resolution", type=_parse_volume_resolution, default=64, metavar="N|NXxNYxNZ"
    )
    p.add_argument("--format", choices=("raw", "png"), default="raw")
    p.add_argument("--cell-budget", type=int, default=512**3)
    p.add_argument(
        "--raycast",
        metavar="FILE",
        help="read the written slices back and render them to this image",
    )
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("serve", help="stream stereo frames over WebSocket")
    _add_scene_source(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--size", type=_parse_wh, default=(320, 240), metavar="WxH")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--upscale", type=int, default=1, choices=(1, 2, 4))
    p.add_argument("--tick-rate", type=float, default=30.0)
    p.add_argument("--encoding", choices=("raw", "png"), default="png")
    p.add_argument("--ipd", type=float, default=0.063)
    p.set_defaults(func=cmd_serve)

    return parser


def cmd_train(args) -> int:
    if args.data:
        path = Path(args.data)
        if path.is_dir():
            path = path / "transforms.json"
        dataset = load_dataset(path)
    else:
        print("no --data given; training against the built-in synthetic sphere")
        dataset = synthetic_sphere_dataset(seed=args.seed)
    cfg = TrainConfig(
        seed=args.seed,
        batch_rays=args.batch_rays,
        steps=args.steps,
        samples_per_ray=args.samples,
        lr_tables=args.lr_tables,
        lr_mlp=args.lr_mlp,
    )
    every = max(1, args.steps // 10)

    def progress(step, mse):
        if step % every == 0 or step == args.steps - 1:
            print(f"step {step:6d}  mse {mse:.6f}  psnr {psnr(mse):6.2f} dB")

    result = train(dataset, cfg, progress=progress)
    save_snapshot(
        args.out,
        result.params,
        result.grid_cfg,
        result.mlp_cfg,
        result.aabb,
        meta={"final_mse": result.history[-1], "steps": cfg.steps, "seed": cfg.seed},
    )
    print(f"snapshot written to {args.out}")
    if args.eval:
        value = evaluate_psnr(result.field, dataset)
        print(f"dataset PSNR {value:.2f} dB")
    return 0


def _save_image(image, path: Path) -> None:
    if path.suffix.lower() == ".raw":
        save_raw(image, path)
    else:
        save_png(image, path)


def cmd_render(args) -> int:
    field, aabb = _resolve_field(args)
    width, height = args.size
    settings = RenderSettings(
        width=width,
        height=height,
        samples_per_ray=args.samples,
        upscale=args.upscale,
        aabb=aabb,
    )
    radius = args.radius if args.radius is not None else 1.2 * float(aabb.scale)
    pose = orbit_pose(
        aabb.center, radius, math.radians(args.azimuth), math.radians(args.elevation)
    )
    out = Path(args.out)
    if args.stereo:
        rig = StereoRig(head_pose=pose, ipd=args.ipd, fov_y=math.radians(args.fov))
        left, right = render_stereo(field, rig, settings)
        for eye, image in (("left", left), ("right", right)):
            path = out.with_name(f"{out.stem}_{eye}{out.suffix}")
            _save_image(image, path)
            print(f"wrote {path}")
    else:
        camera = Camera(pose, math.radians(args.fov), width, height)
        _save_image(render_frame(field, camera, settings), out)
        print(f"wrote {out}")
    return 0


def cmd_bench(args) -> int:
    config = BenchConfig(
        scenes=tuple(args.scene) if args.scene else ("medium",),
        resolutions=args.resolutions,
        upscale_factors=args.upscale_factors,
        samples_per_ray=args.samples,
        min_duration_s=args.min_duration,
        repetitions=args.repetitions,
        warmup_s=args.warmup,
        frame_timeout_ms=args.timeout_ms,
        seed=args.seed,
    )

    def progress(cell):
        state = "DNF" if cell.dnf else f"median {cell.median_ms():8.2f} ms"
        print(
            f"{cell.scene} {cell.width}x{cell.height} upscale {cell.upscale}x"
            f" rep {cell.repetition}: {state}",
            file=sys.stderr,
        )

    report = run_benchmark(config, progress=progress)
    print(format_table(report))
    if args.json:
        Path(args.json).write_text(report_to_json(report))
        print(f"report written to {args.json}", file=sys.stderr)
    if args.csv:
        Path(args.csv).write_text(report_to_csv(report))
        print(f"rows written to {args.csv}", file=sys.stderr)
    return 0


def cmd_slice(args) -> int:
    field, aabb = _resolve_field(args)
    grid = export_volume(field, aabb, args.resolution, cell_budget=args.cell_budget)
    meta_path = write_slices(grid, args.out, fmt=args.format)
    nx, ny, nz = grid.resolution
    print(f"wrote {nx}x{ny}x{nz} volume to {meta_path.parent} ({args.format})")
    if args.raycast:
        back = read_slices(args.out)
        pose = orbit_pose(aabb.center, 1.2 * float(aabb.scale), 0.0, math.radians(15.0))
        camera = Camera(pose, math.radians(60.0), 640, 480)
        settings = RenderSettings(width=640, height=480, samples_per_ray=128, aabb=aabb)
        image = raycast_grid(back, camera, settings)
        _save_image(image, Path(args.raycast))
        print(f"wrote {args.raycast}")
    return 0


def cmd_serve(args) -> int:
    field, aabb = _resolve_field(args)
    width, height = args.size
    settings = RenderSettings(
        width=width,
        height=height,
        samples_per_ray=args.samples,
        upscale=args.upscale,
        aabb=aabb,
    )
    session = RenderSession(
        field,
        aabb,
        settings=settings,
        ipd=args.ipd,
        encoding=ENCODING_PNG if args.encoding == "png" else ENCODING_RAW,
    )
    print(f"streaming ws://{args.host}:{args.port} ({width}x{height}, {args.encoding})")
    serve(session, host=args.host, port=args.port, tick_rate=args.tick_rate)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
