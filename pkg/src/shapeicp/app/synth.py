"""Synthetic shape corpus and depth scenes with known ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import AllBehindCamera, ObjectOutOfFrame
from ..geometry import Mesh, Sim3Pose, icosphere, normalize_mesh, random_rotations
from ..scoring import BACKGROUND, CameraIntrinsics, DepthImage, render_depth
from .io import DepthObservation, GroundTruth

SYNTHETIC_CATEGORY = "synthetic"
BUMPS = 0
BUMP_AMPLITUDE = 0.06
BUMP_WIDTH = 0.5
OCCLUDER_GAP = 0.05  # m between the occluder and the nearest object point


def default_camera() -> CameraIntrinsics:
    """640x480 pinhole camera with a ~58 degree horizontal field of view."""
    return CameraIntrinsics(577.5, 577.5, 319.5, 239.5, 640, 480, 1e-4)


@dataclass
class ShapeParams:
    """Rounded box with two tapers and a bend; mirror-symmetric across z = 0.

    ``radii`` are semi-axes, ``exponent`` the superellipsoid power (2 is an
    ellipsoid, larger is boxier), ``taper_x`` shrinks the y/z section towards
    +x, ``taper_y`` shrinks the x extent towards +y, ``bend`` curves the x
    axis in y.  ``bumps`` holds ``(direction, amplitude, width)`` radial
    Gaussian bumps (width in radians); each is mirrored across z = 0.
    """

    radii: tuple = (0.5, 0.3, 0.2)
    exponent: float = 3.0
    taper_x: float = 0.3
    taper_y: float = 0.2
    bend: float = 0.1
    bumps: tuple = ()

    @classmethod
    def random(cls, rng: np.random.Generator, n_bumps: int = BUMPS):
        # fixed semi-axes keep the family low-dimensional so that a few PCA
        # modes carry the gross shape; bumps add detail a truncated model
        # cannot represent
        radii = (0.5, 0.3, 0.18)
        params = [rng.uniform(4.0, 8.0), rng.uniform(0.3, 0.6), rng.uniform(0.2, 0.5), rng.uniform(0.0, 0.2)]
        bumps = []
        for _ in range(n_bumps):
            d = rng.normal(size=3)
            bumps.append((tuple(d / np.linalg.norm(d)), rng.uniform(-BUMP_AMPLITUDE, BUMP_AMPLITUDE), BUMP_WIDTH))
        return cls(radii, *params, tuple(bumps))


def synthetic_shape(params: ShapeParams, template: Mesh | None = None) -> Mesh:
    """Map the template's vertex directions onto the parametric surface and normalize."""
    template = template if template is not None else icosphere(3)
    d = template.vertices / np.linalg.norm(template.vertices, axis=1, keepdims=True)
    a = np.asarray(params.radii)
    p = params.exponent
    r = np.sum(np.abs(d / a) ** p, axis=1) ** (-1.0 / p)
    for direction, amp, width in params.bumps:
        c = np.asarray(direction, dtype=np.float64)
        for cz in (c, c * np.array([1.0, 1.0, -1.0])):
            ang = np.arccos(np.clip(d @ cz, -1.0, 1.0))
            r = r * (1.0 + amp * np.exp(-0.5 * (ang / width) ** 2))
    x, y, z = (r[:, None] * d).T
    u = x / a[0]
    w = y / a[1]
    y = y * (1.0 - params.taper_x * 0.5 * (u + 1.0))
    z = z * (1.0 - params.taper_x * 0.5 * (u + 1.0))
    x = x * (1.0 - params.taper_y * 0.5 * (w + 1.0))
    y = y + params.bend * a[1] * (u ** 2 - 0.5)
    return normalize_mesh(template.with_vertices(np.column_stack([x, y, z])))


def synthetic_corpus(n: int, seed: int = 0, template: Mesh | None = None, n_bumps: int = BUMPS) -> list:
    """``n`` normalized meshes in template topology (no template fitting needed)."""
    rng = np.random.default_rng(seed)
    template = template if template is not None else icosphere(3)
    return [synthetic_shape(ShapeParams.random(rng, n_bumps), template) for _ in range(n)]


def random_scene_pose(rng: np.random.Generator, distance=(0.8, 1.2), scale=(0.2, 0.35), lateral: float = 0.1):
    """Random rotation, object ~``distance`` m in front of the camera, diagonal ``scale`` m."""
    r = random_rotations(1, rng)[0]
    z = rng.uniform(*distance)
    t = np.array([rng.uniform(-lateral, lateral) * z, rng.uniform(-lateral, lateral) * z, z])
    return Sim3Pose(r, t, rng.uniform(*scale))


def occlude(mask: np.ndarray, fraction: float, rng: np.random.Generator, return_region: bool = False):
    """Remove a contiguous half-plane slab holding ``round(fraction * count)`` mask pixels.

    With ``return_region`` also returns the image-wide pixels behind the
    occluder edge that are not visible object pixels (the occluder's footprint).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("occlusion fraction must be in [0, 1)")
    v, u = np.nonzero(mask)
    n_drop = int(round(fraction * len(v)))
    out = mask.copy()
    region = np.zeros_like(mask, dtype=bool)
    if n_drop > 0:
        ang = rng.uniform(0, 2 * np.pi)
        proj = u * np.cos(ang) + v * np.sin(ang)
        order = np.lexsort((u, v, proj))
        out[v[order[:n_drop]], u[order[:n_drop]]] = False
        vv, uu = np.indices(mask.shape)
        region = (uu * np.cos(ang) + vv * np.sin(ang) <= proj[order[n_drop - 1]]) & ~out
    return (out, region) if return_region else out


def synth_scene(asm, pose: Sim3Pose, code, cam: CameraIntrinsics | None = None, noise_std: float = 0.0,
                occlusion_fraction: float = 0.0, seed: int = 0, category: str | None = None, quantize: bool = True):
    """Render ``asm`` at ``(pose, code)`` and return ``(DepthObservation, GroundTruth)``.

    Occluded object pixels are covered by a flat occluder whose depth (but not
    mask) appears in the image.  Depth noise is Gaussian per pixel.  With ``quantize`` depths are rounded
    to the camera's depth_scale so the observation survives a 16-bit PNG
    round trip exactly.
    """
    cam = cam or default_camera()
    category = asm.category if category is None else category
    rng = np.random.default_rng(seed)
    code = np.asarray(code, dtype=np.float64)
    try:
        rendered = render_depth(pose, asm.mesh(code), cam).depth
    except AllBehindCamera as exc:
        raise ObjectOutOfFrame("object is behind the camera") from exc
    mask = rendered != BACKGROUND
    if not np.any(mask):
        raise ObjectOutOfFrame("object does not cover any pixel")
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise ObjectOutOfFrame("object touches the image border")
    mask, region = occlude(mask, occlusion_fraction, rng, return_region=True)
    # the occluder is a flat surface in front of the object
    occluder_depth = rendered[rendered != BACKGROUND].min() - OCCLUDER_GAP
    depth = np.where(region, occluder_depth, rendered)
    if noise_std > 0:
        depth = depth + rng.normal(0.0, noise_std, depth.shape)
    if quantize:
        depth = np.round(depth / cam.depth_scale) * cam.depth_scale
    mask &= depth > 0
    depth = np.where(mask | (region & (depth > 0)), depth, BACKGROUND)
    obs = DepthObservation(DepthImage(depth, BACKGROUND), mask, cam, category)
    gt = GroundTruth(pose, code.copy(), category, float(noise_std), float(occlusion_fraction))
    return obs, gt


def random_scene(asm, seed: int, noise_std: float = 0.002, occlusion_max: float = 0.2, cam=None,
                 max_tries: int = 100, category: str | None = None):
    """A scene with random pose, a random training code and occlusion in ``[0, occlusion_max]``.

    Poses that leave the frame are redrawn.  Returns ``(obs, gt)``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        pose = random_scene_pose(rng)
        code = asm.codes[rng.integers(asm.n_models)] if asm.n_models else np.zeros(asm.k)
        occ = rng.uniform(0.0, occlusion_max) if occlusion_max > 0 else 0.0
        try:
            return synth_scene(asm, pose, code, cam, noise_std, occ, int(rng.integers(2 ** 31)), category)
        except ObjectOutOfFrame:
            continue
    raise ObjectOutOfFrame(f"no in-frame pose after {max_tries} draws")


def scene_seeds(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
