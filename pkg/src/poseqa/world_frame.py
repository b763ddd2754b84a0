"""Camera-to-world recovery from the dominant support plane.

The table is found by RANSAC on the back-projected depth cloud, its normal
is flipped (if needed) to point at the objects, rotated onto world +Z with
Rodrigues' formula, the in-plane yaw is fixed by PCA of the table inliers,
and the world origin is dropped onto the table using the median inlier
height.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bop_ingest import ModelInfo, ObjectInstance, Pose, SceneFrame
from .errors import WorldFrameError
from .geometry import cuboid_from_instance

V_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) metres, camera frame
    pixel_index: np.ndarray  # (N, 2) (u, v) source pixel

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Plane:
    normal: np.ndarray
    offset: float  # n . x = offset, metres
    inlier_indices: np.ndarray

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset, self.inlier_indices)


@dataclass(frozen=True)
class WorldFrameParams:
    iterations: int = 1000
    inlier_tol: float = 0.008  # metres
    max_points: int = 50_000
    max_normal_angle_deg: float | None = 60.0
    isotropy_ratio: float = 1.05
    refine_yaw: bool = True
    seed: int = 0


@dataclass(frozen=True, eq=False)
class WorldTransform:
    cam_to_world: Pose  # translation in metres
    inlier_ratio: float
    rms_residual: float  # metres
    plane: Plane | None = field(default=None, repr=False)

    @property
    def cam_to_world_mm(self) -> Pose:
        return self.cam_to_world.scaled(1000.0)

    @property
    def world_to_cam_mm(self) -> Pose:
        return self.cam_to_world_mm.inverse()

    def to_world_mm(self, points_cam_mm) -> np.ndarray:
        return self.cam_to_world_mm.apply(points_cam_mm)

    def to_camera_mm(self, points_world_mm) -> np.ndarray:
        return self.world_to_cam_mm.apply(points_world_mm)

    def up_axis_camera(self) -> np.ndarray:
        """World +Z expressed in camera coordinates."""
        return self.cam_to_world.rotation[2].copy()

    def row_major(self) -> list[float]:
        R, t = self.cam_to_world.rotation, self.cam_to_world.translation
        return np.hstack([R, t[:, None]]).ravel().tolist()

    def diagnostics(self) -> dict:
        return {
            "plane_normal": None if self.plane is None else self.plane.normal.tolist(),
            "inlier_ratio": self.inlier_ratio,
            "rms_residual": self.rms_residual,
            "transform": self.row_major(),
        }

    @classmethod
    def from_world_to_cam(cls, world_to_cam_mm: Pose) -> "WorldTransform":
        """Bypass using dataset-provided extrinsics (validation only)."""
        return cls(world_to_cam_mm.inverse().scaled(1e-3), 1.0, 0.0)


def backproject_depth(frame: SceneFrame, stride: int = 1) -> PointCloud:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    K = frame.intrinsics
    z = frame.depth_mm()[::stride, ::stride] / 1000.0
    vs, us = np.mgrid[0 : K.height : stride, 0 : K.width : stride]
    valid = np.isfinite(z) & (z > 0)
    if not valid.any():
        raise WorldFrameError("no_depth", f"frame {frame.frame_id} has no valid depth")
    z, u, v = z[valid], us[valid].astype(np.float64), vs[valid].astype(np.float64)
    pts = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)
    return PointCloud(pts, np.stack([u, v], axis=1).astype(np.int64))


def stride_for(frame: SceneFrame, max_points: int) -> int:
    h, w = frame.intrinsics.height, frame.intrinsics.width
    s = 1
    while math.ceil(h / s) * math.ceil(w / s) > max_points:
        s += 1
    return s


def _support_angle(normals: np.ndarray) -> np.ndarray:
    """Angle (deg) between each line direction and the camera -Y/-Z quarter arc."""
    n = normals * np.where((normals[:, 1] + normals[:, 2]) > 0, -1.0, 1.0)[:, None]
    m = np.hypot(n[:, 1], n[:, 2])
    on_arc = (n[:, 1] <= 0) & (n[:, 2] <= 0)
    to_arc = np.degrees(np.arctan2(np.abs(n[:, 0]), m))
    to_ends = np.degrees(np.arccos(np.clip(np.maximum(-n[:, 1], -n[:, 2]), -1.0, 1.0)))
    return np.where(on_arc, to_arc, to_ends)


def ransac_plane(
    cloud: PointCloud,
    iterations: int = 1000,
    inlier_tol: float = 0.008,
    seed: int = 0,
    *,
    max_normal_angle_deg: float | None = None,
    chunk: int = 64,
) -> Plane:
    """Plane with the most inliers over random triplets, then least-squares refit.

    ``max_normal_angle_deg`` discards hypotheses whose normal is further than
    that from the camera's -Y/-Z directions (walls, ceilings).
    """
    P = cloud.points
    if len(P) < 3:
        raise WorldFrameError("degenerate", "need at least 3 points")
    if iterations < 1 or inlier_tol <= 0:
        raise ValueError("iterations >= 1 and inlier_tol > 0 required")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(P), size=(iterations, 3))
    a, b, c = P[idx[:, 0]], P[idx[:, 1]], P[idx[:, 2]]
    e1, e2 = b - a, c - a
    cr = np.cross(e1, e2)
    norm = np.linalg.norm(cr, axis=1)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    ok = norm > 1e-9 * np.maximum(scale, 1e-300)
    normals = np.zeros_like(cr)
    normals[ok] = cr[ok] / norm[ok, None]
    if max_normal_angle_deg is not None:
        ok &= _support_angle(normals) <= max_normal_angle_deg
    if not ok.any():
        raise WorldFrameError("degenerate", "every sampled triplet was collinear or off-axis")
    hyp = np.flatnonzero(ok)
    offsets = np.einsum("ij,ij->i", normals, a)

    counts = np.zeros(len(hyp), dtype=np.int64)
    for s in range(0, len(hyp), chunk):
        h = hyp[s : s + chunk]
        dist = np.abs(P @ normals[h].T - offsets[h])
        counts[s : s + chunk] = (dist <= inlier_tol).sum(axis=0)
    best = hyp[int(np.argmax(counts))]
    n0, d0 = normals[best], offsets[best]
    inliers = np.flatnonzero(np.abs(P @ n0 - d0) <= inlier_tol)

    n, d = n0, d0
    if len(inliers) >= 3:
        Q = P[inliers]
        centroid = Q.mean(axis=0)
        _, _, Vt = np.linalg.svd(Q - centroid, full_matrices=False)
        n_ls = Vt[-1] * (1.0 if np.dot(Vt[-1], n0) >= 0 else -1.0)
        d_ls = float(np.dot(n_ls, centroid))
        refit = np.flatnonzero(np.abs(P @ n_ls - d_ls) <= inlier_tol)
        if len(refit) >= 3:
            n, d, inliers = n_ls, d_ls, refit
    n = n / np.linalg.norm(n)
    return Plane(n, float(d), inliers)


def object_centroids_cam_m(instances, model_table: dict[int, ModelInfo]) -> np.ndarray:
    return np.array(
        [cuboid_from_instance(i, model_table[i.obj_id]).center / 1000.0 for i in instances]
    ).reshape(-1, 3)


def resolve_plane_ambiguity(
    plane: Plane, instances: list[ObjectInstance], model_table: dict[int, ModelInfo]
) -> Plane:
    """Orient the normal so that most object centroids lie on its positive side."""
    if not instances:
        raise ValueError("need at least one object instance")
    sd = plane.signed_distance(object_centroids_cam_m(instances, model_table))
    above, below = int((sd > 0).sum()), int((sd < 0).sum())
    return plane.flipped() if below > above else plane


def rodrigues_align(n_p) -> np.ndarray:
    """Rotation taking world up (0, 0, 1) onto the unit vector ``n_p``."""
    n = np.asarray(n_p, dtype=np.float64)
    n = n / np.linalg.norm(n)
    k = np.cross(V_Z, n)
    s, c = np.linalg.norm(k), float(np.dot(V_Z, n))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])  # 180 deg about x
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + K + K @ K * ((1.0 - c) / s**2)


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def refine_yaw(plane: Plane, cloud: PointCloud, R_partial, isotropy_ratio: float = 1.05) -> np.ndarray:
    """Rotate about world Z so the inliers' first principal axis lies on +X.

    Sign: the side with the larger extent from the centroid goes to +X; near
    ties fall back to the axis with non-negative x.
    """
    R_partial = np.asarray(R_partial, dtype=np.float64)
    if len(plane.inlier_indices) < 2:
        raise WorldFrameError("degenerate", "yaw refinement needs >= 2 inliers")
    xy = (cloud.points[plane.inlier_indices] @ R_partial.T)[:, :2]
    xy = xy - xy.mean(axis=0)
    evals, evecs = np.linalg.eigh(np.cov(xy.T, bias=True))
    lo, hi = evals
    if hi <= 0 or (lo > 0 and hi / lo < isotropy_ratio):
        return R_partial
    pc = evecs[:, 1]
    proj = xy @ pc
    pmax, pmin = proj.max(), proj.min()
    if abs(pmax + pmin) <= 0.01 * (pmax - pmin):
        if pc[0] < 0 or (pc[0] == 0 and pc[1] < 0):
            pc = -pc
    elif pmax < -pmin:
        pc = -pc
    theta = math.atan2(pc[1], pc[0])
    return _rot_z(-theta) @ R_partial


def build_world_transform(
    frame: SceneFrame,
    model_table: dict[int, ModelInfo],
    params: WorldFrameParams = WorldFrameParams(),
) -> WorldTransform:
    cloud = backproject_depth(frame, stride_for(frame, params.max_points))
    plane = ransac_plane(
        cloud,
        params.iterations,
        params.inlier_tol,
        params.seed,
        max_normal_angle_deg=params.max_normal_angle_deg,
    )
    plane = resolve_plane_ambiguity(plane, list(frame.instances), model_table)
    R = rodrigues_align(plane.normal).T
    if params.refine_yaw:
        R = refine_yaw(plane, cloud, R, params.isotropy_ratio)
    inl = cloud.points[plane.inlier_indices]
    z = inl @ R[2]
    t = np.array([0.0, 0.0, -float(np.median(z))])
    resid = plane.signed_distance(inl)
    return WorldTransform(
        cam_to_world=Pose(R, t, check=False),
        inlier_ratio=len(inl) / len(cloud),
        rms_residual=float(np.sqrt(np.mean(resid**2))),
        plane=plane,
    )


def up_axis_error_deg(recovered: WorldTransform, true_cam_to_world: Pose) -> float:
    a, b = recovered.up_axis_camera(), true_cam_to_world.rotation[2]
    return math.degrees(math.acos(float(np.clip(np.dot(a, b), -1.0, 1.0))))
