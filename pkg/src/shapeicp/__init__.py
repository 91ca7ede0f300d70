"""Category-level pose and shape estimation from a single depth image.

Meshes are wrapped by a spherical template, a PCA shape model is built over
the wrapped templates, and a SIM(3) pose plus a shape code are fitted to a
back-projected depth cloud by alternating EM-weighted alignment and shape
updates over many rotation hypotheses.
"""
from .asm import (ActiveShapeModel, build_asm, build_asm_from_meshes, load_asm, mean_code, nearest_corpus_code,
                  reconstruct, sample_points_with_jacobian, save_asm)
from .errors import AllHypothesesDead, DataError, ShapeICPError
from .geometry import Mesh, PointCloud, RotationGrid, Sim3Pose, geodesic_angle, nearest_neighbors, so3_grid, umeyama
from .scoring import CameraIntrinsics, DepthImage, SymmetrySpec, render_depth
from .solver import Hypothesis, SolverConfig, run

__version__ = "0.1.0"
