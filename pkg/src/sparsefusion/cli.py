"""Command-line driver: ``sparsefusion {synth,recon,eval3d,eval2d,stats,selftest}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import fileio
from .config import ConfigError, RunConfig, load_config
from .meshing import MeshFormatError, export_mesh, import_mesh
from .metrics import evaluate_meshes, mean_metrics_2d, metrics_2d, metrics_csv, metrics_to_text, render_depth
from .nn import WeightFileError
from .pipeline import (
    check_run_config,
    evaluate_3d,
    feature_provider,
    fragment_box,
    reconstruct,
    synthetic_inputs,
)
from .sparse_volume import default_levels, stats
from .synthetic import default_scene, load_scene, save_scene

logger = logging.getLogger("sparsefusion")

_TYPES = {"int": int, "float": float, "str": str}


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration file (key = value lines)")
    group = p.add_argument_group("configuration overrides (take precedence over --config)")
    defaults = RunConfig()
    for f in fields(RunConfig):
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            type=_TYPES[f.type],
            default=None,
            metavar=f.type.upper(),
            help=f"default: {getattr(defaults, f.name)}",
        )


def _run_config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    rc = load_config(args.config, **overrides)
    check_run_config(rc)
    return rc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsefusion", description="Sparse feature-volume fusion: synthesize, reconstruct, evaluate."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset with depth priors")
    p.add_argument("out", type=Path, help="output dataset directory")
    p.add_argument("--scene", type=Path, help="scene description file (default: sphere on a ground plane)")
    _add_config_flags(p)

    p = sub.add_parser("recon", help="reconstruct a dataset; writes volumes, mesh and reports")
    p.add_argument("dataset", type=Path)
    p.add_argument("out", type=Path, help="output directory")
    p.add_argument(
        "--features",
        choices=("prior", "oracle"),
        default="prior",
        help="feature source: prior depth maps, or exact depth from the dataset's scene.txt",
    )
    _add_config_flags(p)

    p = sub.add_parser("eval3d", help="compare two meshes (PLY); prints a metrics CSV")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--out", type=Path, help="write the CSV here instead of stdout")
    _add_config_flags(p)

    p = sub.add_parser("eval2d", help="compare depth maps (files or directories of .bin maps); prints a CSV")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--out", type=Path)
    _add_config_flags(p)

    p = sub.add_parser("stats", help="sparsity report for volume dumps")
    p.add_argument("volumes", type=Path, nargs="+")

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--full", action="store_true", help="include the end-to-end reconstruction check")
    return parser


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, rc: RunConfig) -> int:
    scene = load_scene(args.scene) if args.scene else default_scene()
    kfs, priors, gts = synthetic_inputs(scene, rc)
    args.out.mkdir(parents=True, exist_ok=True)
    for kf, prior, gt in zip(kfs, priors, gts):
        fileio.write_frame(args.out, kf, gt, prior)
    save_scene(scene, args.out / "scene.txt")
    (args.out / "config.txt").write_text(rc.to_text())
    print(f"wrote {len(kfs)} frames to {args.out}")
    return 0


def _stats_text(rec, rc: RunConfig) -> str:
    lines = [f"levels = {len(rec.volumes)}", f"fragments = {len(rec.fragments)}"]
    red = rec.reductions()
    for li, vol in enumerate(rec.volumes):
        st = stats(vol)
        alloc = sum(f.allocated[li] for f in rec.fragments)
        dense = sum(f.dense[li] for f in rec.fragments)
        lines += [
            f"level{li}.voxel_size = {vol.voxel_size!r}",
            f"level{li}.fragment_allocated = {alloc}",
            f"level{li}.frustum_dense = {dense}",
            f"level{li}.reduction_percent = {red[li]:.2f}",
            f"level{li}.global_count = {st['allocated_count']}",
            f"level{li}.bytes_estimate = {st['bytes_estimate']}",
        ]
    lines.append("reduction_percent = " + ", ".join(f"{r:.2f}" for r in red))
    lines.append(f"mesh_vertices = {len(rec.mesh.vertices)}")
    lines.append(f"mesh_faces = {len(rec.mesh.faces)}")
    return "\n".join(lines) + "\n"


def cmd_recon(args, rc: RunConfig) -> int:
    frames = fileio.load_dataset(args.dataset)
    kfs = [kf for kf, _ in frames]
    gts = [gt for _, gt in frames]
    priors = fileio.load_priors(args.dataset, kfs)
    scene_path = args.dataset / "scene.txt"
    scene = load_scene(scene_path) if scene_path.exists() else None
    if args.features == "oracle" and scene is None:
        raise UsageError("--features oracle needs scene.txt in the dataset")
    levels = default_levels(rc.finest_voxel_size)
    feats = feature_provider(
        rc, levels, {kf.index: p for kf, p in zip(kfs, priors)}, scene if args.features == "oracle" else None
    )
    rec = reconstruct(kfs, priors, rc, features=feats)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    names = fileio.ReconOutputs()
    for li, vol in enumerate(rec.volumes):
        fileio.write_volume(out / names.volume(li), vol)
    export_mesh(rec.mesh, out / names.mesh)
    (out / names.config).write_text(rc.to_text())
    (out / names.stats).write_text(_stats_text(rec, rc))
    depth_dir = out / "depth"
    depth_dir.mkdir(exist_ok=True)
    rows = []
    for kf, gt in zip(kfs, gts):
        rendered = render_depth(rec.mesh, kf, rc.max_depth)
        fileio.write_depth_map(depth_dir / f"{kf.index:06d}.depth.bin", rendered)
        try:
            rows.append((f"{kf.index:06d}", metrics_2d(rendered, gt.depth, rc.depth_truncation)))
        except ValueError:
            logger.warning("frame %d: no jointly valid pixels", kf.index)
    if rows:
        rows.append(("mean", mean_metrics_2d(m for _, m in rows)))
        (out / "metrics2d.csv").write_text(metrics_csv(rows))
    if scene is not None:
        m3 = evaluate_3d(rec.mesh, scene, kfs, gts, fragment_box(rec), rc)
        (out / names.metrics).write_text(metrics_csv([("recon", m3)]))
        (out / "metrics.txt").write_text(metrics_to_text(m3))
        print(f"F-score {m3.fscore:.4f} (precision {m3.precision:.4f}, recall {m3.recall:.4f})")
    print(f"mesh: {len(rec.mesh.faces)} faces -> {out / names.mesh}")
    print("reduction vs frustum-dense (coarse..fine): " + ", ".join(f"{r:.2f}%" for r in rec.reductions()))
    return 0


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def cmd_eval3d(args, rc: RunConfig) -> int:
    m = evaluate_meshes(
        import_mesh(args.pred), import_mesh(args.gt), rc.sample_resolution, rc.distance_threshold, rc.seed
    )
    _emit(metrics_csv([(args.pred.name, m)]), args.out)
    return 0


def _depth_pairs(pred: Path, gt: Path) -> list:
    if pred.is_dir() != gt.is_dir():
        raise UsageError("pred and gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred, gt)]
    pairs = [(p, gt / p.name) for p in sorted(pred.glob("*.bin"))]
    missing = [str(g) for _, g in pairs if not g.exists()]
    if missing:
        raise UsageError(f"no ground truth for {missing[0]}")
    if not pairs:
        raise UsageError(f"no .bin depth maps in {pred}")
    return pairs


def cmd_eval2d(args, rc: RunConfig) -> int:
    rows = []
    for p, g in _depth_pairs(args.pred, args.gt):
        rows.append((p.name, metrics_2d(fileio.read_depth_map(p), fileio.read_depth_map(g), rc.depth_truncation)))
    if len(rows) > 1:
        rows.append(("mean", mean_metrics_2d(m for _, m in rows)))
    _emit(metrics_csv(rows), args.out)
    return 0


def cmd_stats(args) -> int:
    print("file,level,voxel_size,allocated_count,bytes_estimate")
    for path in args.volumes:
        vol = fileio.read_volume(path)
        st = stats(vol)
        print(f"{path.name},{vol.config.level},{vol.voxel_size!r},{st['allocated_count']},{st['bytes_estimate']}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(full=args.full) else 1


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "selftest":
            return cmd_selftest(args)
        rc = _run_config(args)
        handler = {"synth": cmd_synth, "recon": cmd_recon, "eval3d": cmd_eval3d, "eval2d": cmd_eval2d}[args.command]
        with threadpool_limits(limits=rc.threads):
            return handler(args, rc)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sparsefusion: usage error: {exc}", file=sys.stderr)
        return 2
    except (fileio.DatasetError, MeshFormatError, WeightFileError, OSError, ValueError) as exc:
        print(f"sparsefusion: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
