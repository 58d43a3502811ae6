"""Command-line harness.

Commands: `icosap-gen` (subdivided point sets from an ERP image), `project`
(cubemap / tangent / icosap exports), `synth` (box-scene ground truth),
`train-overfit` (full pipeline against one synthetic scene), `eval` (depth
metrics from PFM files), `audit` (gradient and oracle self-checks).

Every command runs deterministically (BLAS limited to one thread; the
ELITE360_THREADS override is parsed but ignored in deterministic mode) and
writes a run manifest next to its outputs: the command line, the config
snapshot, the seed, content hashes of every input file, and the output
names.  Identical config and seed therefore reproduce identical bytes.

Exit codes: 0 success, 2 usage error, 3 audit failure, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import __version__
from .icosap import build_mesh, face_center_point_set, write_obj, \
    write_point_binary, write_point_csv
from .imgio import read_pfm, read_png, write_pfm, write_png
from .model import DepthModel, ModelConfig, TrainAbort, TrainConfig, \
    train_overfit, write_train_log
from .pipeline import compute_metrics
from .scenes import BoxScene, synth_box_scene
from .sphere import FACE_NAMES, erp_to_cubemap, erp_to_tangent_patches, \
    tangent_patch_centers, write_tangent_patches
from .tensor import NumericError, UsageError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_AUDIT = 3
EXIT_NUMERIC = 4


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, command: str, config: dict, seed,
                   inputs: list, outputs: list) -> str:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "version": __version__,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed JSON in {path}: {e}")


# ---------------------------------------------------------------------------
# Commands


def cmd_icosap_gen(args) -> int:
    if args.level < 0:
        raise UsageError("--level must be >= 0")
    img = read_png(args.erp)
    mesh = build_mesh(args.level)
    points = face_center_point_set(mesh, img)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "points.csv")
    bin_path = os.path.join(args.out, "points.icop")
    obj_path = os.path.join(args.out, "mesh.obj")
    write_point_csv(points, csv_path)
    write_point_binary(points, bin_path)
    write_obj(mesh, obj_path)
    write_manifest(args.out, "icosap-gen", {"level": args.level}, None,
                   [args.erp], [csv_path, bin_path, obj_path])
    print(f"level {args.level}: {mesh.face_count} faces, "
          f"{mesh.vertex_count} vertices, {len(points)} point records")
    return EXIT_OK


def cmd_project(args) -> int:
    img = read_png(args.erp)
    h = img.shape[0]
    os.makedirs(args.out, exist_ok=True)
    if args.mode == "cubemap":
        size = args.faces if args.faces else max(2, h // 2)
        cube = erp_to_cubemap(img, size)
        outputs = []
        for i, name in enumerate(FACE_NAMES):
            p = os.path.join(args.out, f"cube_{name}.png")
            write_png(p, cube.faces[i])
            outputs.append(p)
        write_manifest(args.out, "project", {"mode": "cubemap",
                                             "face_size": size},
                       None, [args.erp], outputs)
        print(f"cubemap: 6 faces of {size}x{size}")
    elif args.mode == "tangent":
        count = args.patches if args.patches else 18
        fov = np.deg2rad(args.fov if args.fov else 80.0)
        centers = tangent_patch_centers(count)
        patch_set = erp_to_tangent_patches(img, centers, fov,
                                           args.patch_size)
        outputs = write_tangent_patches(patch_set, args.out)
        write_manifest(args.out, "project",
                       {"mode": "tangent", "patches": count,
                        "fov_deg": float(np.rad2deg(fov)),
                        "patch_size": args.patch_size},
                       None, [args.erp], outputs)
        print(f"tangent: {count} patches of {args.patch_size}x{args.patch_size}, "
              f"fov {np.rad2deg(fov):.1f} deg")
    elif args.mode == "icosap":
        level = args.level if args.level is not None else 4
        mesh = build_mesh(level)
        points = face_center_point_set(mesh, img)
        csv_path = os.path.join(args.out, "points.csv")
        bin_path = os.path.join(args.out, "points.icop")
        write_point_csv(points, csv_path)
        write_point_binary(points, bin_path)
        write_manifest(args.out, "project", {"mode": "icosap", "level": level},
                       None, [args.erp], [csv_path, bin_path])
        print(f"icosap: level {level}, {len(points)} point records")
    else:
        raise UsageError(f"unknown projection mode {args.mode!r}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_json(args.config)
    scene = BoxScene.from_dict(cfg.get("scene", {}))
    height, width = cfg.get("resolution", [64, 128])
    img, depth, mask = synth_box_scene(scene, height, width)
    os.makedirs(args.out, exist_ok=True)
    img_path = os.path.join(args.out, "erp.png")
    depth_path = os.path.join(args.out, "depth.pfm")
    mask_path = os.path.join(args.out, "mask.pfm")
    write_png(img_path, img)
    write_pfm(depth_path, depth)
    write_pfm(mask_path, mask.astype(np.float32))
    write_manifest(args.out, "synth", cfg, None, [args.config],
                   [img_path, depth_path, mask_path])
    print(f"scene {height}x{width}: depth in [{depth.min():.4f}, "
          f"{depth.max():.4f}] m")
    return EXIT_OK


def cmd_train_overfit(args) -> int:
    cfg = _load_json(args.config)
    out_dir = args.out or cfg.get("out")
    if not out_dir:
        raise UsageError("no output directory: pass --out or set \"out\" "
                         "in the config")
    model_cfg = ModelConfig.from_dict(cfg.get("model", {}))
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    scene = BoxScene.from_dict(cfg.get("scene", {}))

    img, depth, mask = synth_box_scene(scene, model_cfg.height, model_cfg.width)
    model = DepthModel(model_cfg)
    points = model.prepare_points(img)
    print(f"model: {model.param_count()} parameters, fusion={model_cfg.fusion}, "
          f"N={model_cfg.point_count} points")

    def log(row):
        print(f"step {row[0]:5d}  total {row[1]:.6f}  depth {row[2]:.6f}  "
              f"grad {row[3]:.6f}")

    history, metrics, pred = train_overfit(model, train_cfg, img, depth, mask,
                                           points, log=log)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "weights.e36w")
    log_path = os.path.join(out_dir, "train_log.csv")
    metrics_path = os.path.join(out_dir, "metrics.json")
    pred_path = os.path.join(out_dir, "pred.pfm")
    model.save_checkpoint(ckpt_path)
    write_train_log(log_path, history)
    with open(metrics_path, "w") as f:
        f.write(metrics.to_json())
        f.write("\n")
    write_pfm(pred_path, pred)
    write_manifest(out_dir, "train-overfit", cfg, model_cfg.seed,
                   [args.config], [ckpt_path, log_path, metrics_path, pred_path])
    print(metrics.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_pfm(args.pred)
    gt = read_pfm(args.gt)
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if args.mask:
        mask = read_pfm(args.mask) != 0
    else:
        mask = np.ones(gt.shape, dtype=bool)
    metrics = compute_metrics(pred, gt, mask)
    print(metrics.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        metrics_path = os.path.join(args.out, "metrics.json")
        with open(metrics_path, "w") as f:
            f.write(metrics.to_json())
            f.write("\n")
        inputs = [args.pred, args.gt] + ([args.mask] if args.mask else [])
        write_manifest(args.out, "eval", {}, None, inputs, [metrics_path])
    return EXIT_OK


def cmd_audit(args) -> int:
    from .audit import audit_b2f, audit_model, audit_tensor

    scopes = {"tensor": [audit_tensor], "b2f": [audit_b2f],
              "model": [audit_model],
              "all": [audit_tensor, audit_b2f, audit_model]}
    if args.scope not in scopes:
        raise UsageError(f"unknown audit scope {args.scope!r}")
    results = []
    for fn in scopes[args.scope]:
        results.extend(fn())
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_AUDIT if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panodepth",
        description="Desk-scale 360-degree depth estimation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("icosap-gen",
                       help="subdivided icosahedron point set from an ERP image")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--erp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_icosap_gen)

    p = sub.add_parser("project", help="export a projection of an ERP image")
    p.add_argument("--mode", required=True,
                   choices=["cubemap", "tangent", "icosap"])
    p.add_argument("--erp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--faces", type=int, default=None,
                   help="cubemap face size in pixels (default H/2)")
    p.add_argument("--patches", type=int, default=None,
                   help="tangent patch count (default 18)")
    p.add_argument("--fov", type=float, default=None,
                   help="tangent patch field of view in degrees (default 80)")
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--level", type=int, default=None,
                   help="icosap subdivision level (default 4)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("synth", help="render a synthetic box scene")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-overfit",
                       help="overfit the full pipeline on one synthetic scene")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_overfit)

    p = sub.add_parser("eval", help="depth metrics between two PFM maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="run gradient/oracle self-checks")
    p.add_argument("--scope", default="all",
                   choices=["tensor", "b2f", "model", "all"])
    p.set_defaults(func=cmd_audit)

    return parser


def _thread_limits():
    env = os.environ.get("ELITE360_THREADS")
    if env is not None:
        try:
            threads = int(env)
        except ValueError:
            raise UsageError(f"ELITE360_THREADS must be an integer, got {env!r}")
        if threads != 1:
            print("deterministic mode: ELITE360_THREADS override ignored",
                  file=sys.stderr)
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover - threadpoolctl is a hard dep
        return nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limits():
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
