"""Per-scene estimation and evaluation shared by the CLI and the benchmark scripts."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ..asm import ActiveShapeModel
from ..errors import AllHypothesesDead, DataError, TooFewPoints
from ..geometry import Mesh, Sim3Pose
from ..meshfit import DeformationConfig
from ..scoring import SymmetrySpec, symmetry_for
from ..solver import SolverConfig, run
from . import io as sio
from .metrics import chamfer_metric, iou3d, pose_errors, threshold_accuracy
from .preprocess import DEFAULT_MIN_POINTS, DEFAULT_OUTLIER_ALPHA, DEFAULT_OUTLIER_K, back_project, gate_detection, \
    remove_outliers

log = logging.getLogger(__name__)

GT_MESH_FILE = "gt.obj"
CHAMFER_SAMPLES = 10000


@dataclass
class PreprocessConfig:
    outlier_k: int = DEFAULT_OUTLIER_K
    outlier_alpha: float = DEFAULT_OUTLIER_ALPHA
    min_points: int = DEFAULT_MIN_POINTS


@dataclass
class PipelineConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    deformation: DeformationConfig = field(default_factory=DeformationConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - {"solver", "deformation", "preprocess"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        out = cls(SolverConfig.from_dict(d.get("solver", {})))
        for name, klass in (("deformation", DeformationConfig), ("preprocess", PreprocessConfig)):
            sec = d.get(name, {})
            names = set(klass.__dataclass_fields__)
            if set(sec) - names:
                raise ValueError(f"unknown {name} options: {sorted(set(sec) - names)}")
            setattr(out, name, klass(**sec))
        return out

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc}") from exc

    def to_dict(self):
        return {"solver": asdict(self.solver), "deformation": asdict(self.deformation),
                "preprocess": asdict(self.preprocess)}


# ---------------------------------------------------------------------------
# estimation


def estimate_observation(obs, asm: ActiveShapeModel, cfg: PipelineConfig | None = None,
                         symmetry: SymmetrySpec | None = None) -> dict:
    """Preprocess, gate and run the solver on one observation.

    Returns a result dict with ``status`` "ok", "skipped" (gating) or
    "failed" (every hypothesis died).  Data errors propagate.
    """
    cfg = cfg or PipelineConfig()
    symmetry = symmetry if symmetry is not None else symmetry_for(obs.category or asm.category)
    out = {"status": "ok", "category": obs.category, "pose": None, "code": None, "runtime_s": 0.0,
           "scores": None, "n_points": 0, "reason": ""}
    t0 = time.perf_counter()
    cloud = back_project(obs)
    try:
        cloud = remove_outliers(cloud, cfg.preprocess.outlier_k, cfg.preprocess.outlier_alpha)
    except TooFewPoints:
        pass  # the gate below rejects it
    out["n_points"] = len(cloud)
    if not gate_detection(cloud, cfg.preprocess.min_points):
        out.update(status="skipped", reason=f"{len(cloud)} points < min_points {cfg.preprocess.min_points}")
        return out
    try:
        res = run(cloud, obs, asm, cfg.solver, symmetry=symmetry)
    except AllHypothesesDead as exc:
        out.update(status="failed", reason=str(exc), runtime_s=time.perf_counter() - t0)
        return out
    best = res.best
    out.update(pose=best.pose.to_dict(), code=np.asarray(best.code).tolist(), scores=dict(best.scores),
               runtime_s=time.perf_counter() - t0)
    return out


def estimate_scene_dir(scene_dir, asm: ActiveShapeModel, cfg: PipelineConfig | None = None) -> dict:
    obs = sio.read_observation(scene_dir)
    res = estimate_observation(obs, asm, cfg)
    return {"scene": Path(scene_dir).name, **res}


def write_results(results, path) -> None:
    """One JSON object per line, in the given order."""
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in results))


def read_results(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# evaluation

_POSE_SCHEMA = {
    "type": "object",
    "required": ["rotation", "translation", "scale"],
    "properties": {
        "rotation": {"type": "array", "minItems": 3, "maxItems": 3,
                     "items": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}}},
        "translation": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}},
        "scale": {"type": "number", "exclusiveMinimum": 0},
    },
}
_NONNEG_OR_NULL = {"type": ["number", "null"], "minimum": 0}

EVALUATION_RECORD_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvaluationRecord",
    "type": "object",
    "required": ["scene", "category", "status", "gt_pose", "gt_code", "est_pose", "est_code",
                 "rotation_error_deg", "translation_error_m", "scale_error", "iou3d", "chamfer", "runtime_s"],
    "additionalProperties": False,
    "properties": {
        "scene": {"type": "string"},
        "category": {"type": "string"},
        "status": {"enum": ["ok", "skipped", "failed"]},
        "gt_pose": _POSE_SCHEMA,
        "gt_code": {"type": "array", "items": {"type": "number"}},
        "est_pose": {"oneOf": [_POSE_SCHEMA, {"type": "null"}]},
        "est_code": {"oneOf": [{"type": "array", "items": {"type": "number"}}, {"type": "null"}]},
        "rotation_error_deg": {"type": ["number", "null"], "minimum": 0, "maximum": 180},
        "translation_error_m": _NONNEG_OR_NULL,
        "scale_error": _NONNEG_OR_NULL,
        "iou3d": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "chamfer": _NONNEG_OR_NULL,
        "runtime_s": {"type": "number", "minimum": 0},
    },
}


def validate_record(record: dict) -> None:
    jsonschema.validate(record, EVALUATION_RECORD_SCHEMA)


def evaluate_estimate(result: dict, gt: sio.GroundTruth, gt_mesh: Mesh, asm: ActiveShapeModel,
                      symmetry: SymmetrySpec | None = None, chamfer_samples: int = CHAMFER_SAMPLES) -> dict:
    """EvaluationRecord for one estimate against ground truth (metrics null unless status is ok)."""
    rec = {
        "scene": result.get("scene", ""), "category": gt.category, "status": result["status"],
        "gt_pose": gt.pose.to_dict(), "gt_code": np.asarray(gt.code).tolist(),
        "est_pose": result.get("pose"), "est_code": result.get("code"),
        "rotation_error_deg": None, "translation_error_m": None, "scale_error": None, "iou3d": None,
        "chamfer": None, "runtime_s": float(result.get("runtime_s", 0.0)),
    }
    if result["status"] != "ok":
        return rec
    symmetry = symmetry if symmetry is not None else symmetry_for(gt.category)
    est_pose = Sim3Pose.from_dict(result["pose"])
    est_mesh = asm.mesh(np.asarray(result["code"], dtype=np.float64))
    rot, trans, scale = pose_errors(est_pose, gt.pose, symmetry)
    rec.update(rotation_error_deg=rot, translation_error_m=trans, scale_error=scale,
               iou3d=iou3d(est_pose, est_mesh, gt.pose, gt_mesh),
               chamfer=chamfer_metric(est_mesh, gt_mesh, chamfer_samples))
    return rec


def ground_truth_mesh(scene_dir, gt: sio.GroundTruth, asm: ActiveShapeModel | None) -> Mesh:
    """The scene's gt.obj if present, else the model reconstruction of the true code."""
    p = Path(scene_dir) / GT_MESH_FILE
    if p.exists():
        return sio.read_obj(p)
    if asm is None or len(gt.code) != asm.k:
        raise DataError(f"{scene_dir}: no {GT_MESH_FILE} and the true code does not fit the model")
    return asm.mesh(gt.code)


SUMMARY_ROWS = (("5deg5cm", 5.0, 0.05), ("10deg5cm", 10.0, 0.05))


def summarize(records) -> list:
    """``(metric, value)`` rows; unsuccessful scenes count as misses."""
    n = len(records)
    ok = [r for r in records if r["status"] == "ok"]
    rot = np.array([r["rotation_error_deg"] for r in ok], dtype=np.float64)
    trans = np.array([r["translation_error_m"] for r in ok], dtype=np.float64)
    iou = np.array([r["iou3d"] for r in ok], dtype=np.float64)
    frac = len(ok) / n if n else 0.0
    rows = [("n_scenes", n), ("n_ok", len(ok)),
            ("n_skipped", sum(r["status"] == "skipped" for r in records)),
            ("n_failed", sum(r["status"] == "failed" for r in records))]
    for name, deg, m in SUMMARY_ROWS:
        rows.append((name, threshold_accuracy(rot, trans, deg, m) * frac))
    for name, thr in (("IoU50", 0.5), ("IoU75", 0.75)):
        rows.append((name, float((iou >= thr).mean()) * frac if len(iou) else 0.0))
    for name, key in (("median_chamfer", "chamfer"), ("median_scale_error", "scale_error"),
                      ("median_runtime_s", "runtime_s")):
        vals = [r[key] for r in ok]
        rows.append((name, float(np.median(vals)) if vals else float("nan")))
    return rows


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for name, value in rows:
        w.writerow([name, value if isinstance(value, int) else f"{value:.6f}"])
    return buf.getvalue()
