"""Command line interface: ``shapeicp {asm build|asm inspect|synth|estimate|eval|render}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 estimation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..asm import build_asm, build_asm_from_meshes, load_asm, mean_code, save_asm
from ..errors import AllHypothesesDead, DataError, FormatError
from ..geometry import Sim3Pose, normalize_mesh
from ..scoring import BACKGROUND, DepthImage, render_depth
from . import io as sio
from .pipeline import (GT_MESH_FILE, PipelineConfig, estimate_scene_dir, evaluate_estimate, ground_truth_mesh,
                       read_results, summarize, summary_csv, validate_record, write_results)
from .synth import default_camera, random_scene, scene_seeds

log = logging.getLogger("shapeicp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.solver.seed = args.seed
        cfg.deformation.seed = args.seed
    return cfg


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# asm


def cmd_asm_build(args) -> int:
    cfg = _load_config(args)
    paths = sorted(Path(args.meshes).glob("*.obj"))
    if len(paths) < 2:
        raise DataError(f"need at least two .obj meshes in {args.meshes}")
    meshes = [sio.read_obj(p) for p in paths]
    if args.no_deform:
        asm = build_asm([normalize_mesh(m) for m in meshes], args.k, args.category)
    else:
        asm, chamfers = build_asm_from_meshes(meshes, args.k, args.category, cfg=cfg.deformation)
        for p, c in zip(paths, chamfers):
            log.info("%s: template chamfer %.3e", p.name, c)
    save_asm(asm, args.out)
    print(f"wrote {args.out}: U={asm.n_models} V={asm.n_vertices} F={len(asm.faces)} K={asm.k}")
    return EXIT_OK


def cmd_asm_inspect(args) -> int:
    asm = load_asm(args.path)
    print(f"category={asm.category!r} U={asm.n_models} V={asm.n_vertices} F={len(asm.faces)} K={asm.k}")
    print("singular_values=" + " ".join(f"{s:.6g}" for s in asm.singular_values))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / estimate / eval / render


def cmd_synth(args) -> int:
    asm = load_asm(args.asm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    width = max(4, len(str(args.n - 1)))
    for i, s in enumerate(scene_seeds(seed, args.n)):
        obs, gt = random_scene(asm, s, args.noise, args.occlusion_max, category=args.category)
        d = sio.write_observation(obs, out / f"scene_{i:0{width}d}")
        sio.write_ground_truth(gt, d)
        sio.write_obj(asm.mesh(gt.code), d / GT_MESH_FILE)
    print(f"wrote {args.n} scenes to {out}")
    return EXIT_OK


def _estimate_one(job):
    scene, asm_path, cfg_dict = job
    return estimate_scene_dir(scene, load_asm(asm_path), PipelineConfig.from_dict(cfg_dict))


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    load_asm(args.asm)  # fail early on a bad model file
    scenes = sio.list_scenes(args.scenes)
    if not scenes:
        raise DataError(f"no scenes under {args.scenes}")
    jobs = [(str(s), args.asm, cfg.to_dict()) for s in scenes]
    results = _map(_estimate_one, jobs, args.jobs)
    write_results(results, args.out)
    skipped = [r["scene"] for r in results if r["status"] == "skipped"]
    failed = [r["scene"] for r in results if r["status"] == "failed"]
    print(f"estimated {len(results) - len(skipped) - len(failed)} of {len(results)} scenes -> {args.out}")
    if skipped:
        print(f"skipped {len(skipped)} (too few points): {', '.join(skipped)}")
    if failed:
        print(f"failed {len(failed)} (no surviving hypothesis): {', '.join(failed)}", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


def cmd_eval(args) -> int:
    asm = load_asm(args.asm) if args.asm else None
    results = read_results(args.results)
    root = Path(args.scenes)
    records = []
    for r in results:
        scene = root / r["scene"]
        gt = sio.read_ground_truth(scene)
        if gt is None:
            raise DataError(f"{scene} has no ground truth")
        if r["status"] == "ok" and asm is None:
            raise DataError("--asm is required to evaluate shape estimates")
        rec = evaluate_estimate(r, gt, ground_truth_mesh(scene, gt, asm), asm)
        validate_record(rec)
        records.append(rec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(records, out / "records.jsonl")
    text = summary_csv(summarize(records))
    (out / "summary.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args) -> int:
    asm = load_asm(args.asm)
    cam = sio.CameraIntrinsics.from_dict(json.loads(Path(args.camera).read_text())) if args.camera \
        else default_camera()
    out = Path(args.out)
    if args.results:
        results = read_results(args.results)
        items = [(r["scene"], Sim3Pose.from_dict(r["pose"]), r["code"]) for r in results if r["status"] == "ok"]
    else:
        if not args.pose:
            raise UsageError("render needs --pose or --results")
        pose = Sim3Pose.from_dict(json.loads(Path(args.pose).read_text()))
        code = [float(c) for c in args.code.split(",")] if args.code else mean_code(asm)
        items = [("", pose, code)]
    for name, pose, code in items:
        depth = render_depth(pose, asm.mesh(np.asarray(code, dtype=np.float64)), cam).depth
        obs = sio.DepthObservation(DepthImage(depth, BACKGROUND), depth != BACKGROUND, cam, asm.category)
        sio.write_observation(obs, out / name if name else out)
    print(f"rendered {len(items)} image(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with solver/deformation/preprocess sections")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (scenes run independently)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="shapeicp", description="Category-level pose and shape from a single depth image.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    asm = sub.add_parser("asm", help="build or inspect an active shape model")
    asm_sub = asm.add_subparsers(dest="asm_command", required=True, parser_class=_Parser)
    b = asm_sub.add_parser("build", parents=[common])
    b.add_argument("--meshes", required=True, help="directory of .obj meshes")
    b.add_argument("--k", type=int, default=5)
    b.add_argument("--category", default="")
    b.add_argument("--no-deform", action="store_true",
                   help="meshes already share one topology; skip template fitting")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_asm_build)
    i = asm_sub.add_parser("inspect", parents=[common])
    i.add_argument("path")
    i.set_defaults(func=cmd_asm_inspect)

    s = sub.add_parser("synth", parents=[common], help="render synthetic scenes with ground truth")
    s.add_argument("--asm", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.002, help="depth noise std in meters")
    s.add_argument("--occlusion-max", type=float, default=0.2)
    s.add_argument("--category", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("estimate", parents=[common], help="estimate pose and shape for every scene")
    e.add_argument("--asm", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True, help="results file (JSON lines)")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    v.add_argument("--scenes", required=True)
    v.add_argument("--results", required=True)
    v.add_argument("--asm", default=None)
    v.add_argument("--out", required=True, help="directory for records.jsonl and summary.csv")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", parents=[common], help="render model depth images")
    r.add_argument("--asm", required=True)
    r.add_argument("--pose", help="pose JSON {rotation, translation, scale}")
    r.add_argument("--code", help="comma-separated shape code (default: mean code)")
    r.add_argument("--results", help="render every successful estimate instead")
    r.add_argument("--camera", help="intrinsics JSON (default: built-in 640x480 camera)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AllHypothesesDead as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (DataError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
