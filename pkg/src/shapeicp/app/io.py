"""Scene, mesh and result I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import EmptyMask, FormatError
from ..geometry import Mesh, PointCloud, Sim3Pose
from ..scoring import BACKGROUND, CameraIntrinsics, DepthImage

DEPTH_FILE = "depth.png"
MASK_FILE = "mask.png"
META_FILE = "meta.json"
GT_FILE = "gt.json"


@dataclass(frozen=True, eq=False)
class DepthObservation:
    """Masked depth image with intrinsics and category label.

    ``depth`` holds meters with 0 as background; ``mask`` is boolean.
    """

    depth: DepthImage
    mask: np.ndarray
    camera: CameraIntrinsics
    category: str = ""

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != self.depth.shape:
            raise ValueError(f"mask shape {m.shape} does not match depth shape {self.depth.shape}")
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise ValueError("depth image size does not match the intrinsics")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @cached_property
    def points(self) -> PointCloud:
        from .preprocess import back_project

        return back_project(self)


@dataclass
class GroundTruth:
    pose: Sim3Pose
    code: np.ndarray
    category: str = ""
    noise_std: float = 0.0
    occlusion_fraction: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "pose": self.pose.to_dict(), "code": np.asarray(self.code).tolist(), "category": self.category,
            "noise_std": self.noise_std, "occlusion_fraction": self.occlusion_fraction, **self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        pose = Sim3Pose.from_dict(d.pop("pose"))
        code = np.asarray(d.pop("code"), dtype=np.float64)
        return cls(pose, code, d.pop("category", ""), float(d.pop("noise_std", 0.0)),
                   float(d.pop("occlusion_fraction", 0.0)), d)


# ---------------------------------------------------------------------------
# depth / mask / meta


def depth_to_raw(depth: np.ndarray, depth_scale: float) -> np.ndarray:
    raw = np.round(np.asarray(depth) / depth_scale)
    if raw.max(initial=0) > 65535:
        raise FormatError("depth exceeds the 16-bit range at this depth_scale")
    return raw.astype(np.uint16)


def raw_to_depth(raw: np.ndarray, depth_scale: float) -> np.ndarray:
    return raw.astype(np.float64) * depth_scale


def write_observation(obs: DepthObservation, directory) -> Path:
    """Write depth (16-bit PNG), mask (8-bit PNG) and meta.json into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    raw = depth_to_raw(np.where(obs.depth.valid, obs.depth.depth, 0.0), obs.camera.depth_scale)
    Image.fromarray(raw).save(d / DEPTH_FILE)
    Image.fromarray(obs.mask.astype(np.uint8) * 255).save(d / MASK_FILE)
    meta = {**obs.camera.to_dict(), "category": obs.category}
    (d / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    return d


def read_observation(directory) -> DepthObservation:
    d = Path(directory)
    try:
        meta = json.loads((d / META_FILE).read_text())
        cam = CameraIntrinsics.from_dict(meta)
        raw = np.asarray(Image.open(d / DEPTH_FILE))
        mask = np.asarray(Image.open(d / MASK_FILE)) != 0
    except FileNotFoundError as exc:
        raise FormatError(f"incomplete scene directory {d}: {exc.filename}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad {META_FILE} in {d}: {exc}") from exc
    if raw.dtype != np.uint16:
        raise FormatError(f"{DEPTH_FILE} must be a 16-bit image, got {raw.dtype}")
    if mask.ndim == 3:
        mask = mask.any(axis=2)
    depth = raw_to_depth(raw, cam.depth_scale)
    return DepthObservation(DepthImage(depth, BACKGROUND), mask, cam, meta.get("category", ""))


def write_ground_truth(gt: GroundTruth, directory) -> None:
    (Path(directory) / GT_FILE).write_text(json.dumps(gt.to_dict(), indent=2) + "\n")


def read_ground_truth(directory) -> GroundTruth | None:
    p = Path(directory) / GT_FILE
    if not p.exists():
        return None
    return GroundTruth.from_dict(json.loads(p.read_text()))


def list_scenes(root) -> list:
    """Scene directories under ``root`` (those holding a meta.json), sorted by name."""
    root = Path(root)
    if (root / META_FILE).exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / META_FILE).exists())


def require_mask(obs: DepthObservation):
    if not np.any(obs.mask):
        raise EmptyMask("observation mask is empty")


# ---------------------------------------------------------------------------
# OBJ meshes


def read_obj(path) -> Mesh:
    """Vertices and faces of an OBJ file; polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    if not verts or not faces:
        raise FormatError(f"{path}: no vertices or faces")
    faces = np.asarray(faces, dtype=np.int64)
    if faces.min() < 0 or faces.max() >= len(verts):
        raise FormatError(f"{path}: face index out of range")
    return Mesh(np.asarray(verts), faces)


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
