"""Oriented cuboids, pinhole projection and convex overlap measures.

Volumes of cuboid intersections are computed exactly: one polytope is clipped
against the other's bounding half-spaces and the clipped volume is summed
face by face with the divergence theorem. The 2D counterparts (convex hull,
polygon clipping, hull IoU) work on pixel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bop_ingest import CameraIntrinsics, ModelInfo, ObjectInstance, Pose
from .errors import GeometryError

# corner index bits (b2 b1 b0): b0 -> x sign, b1 -> y sign, b2 -> z sign (1 = +)
CORNER_SIGNS = np.array(
    [[1 if i & 1 else -1, 1 if i & 2 else -1, 1 if i & 4 else -1] for i in range(8)],
    dtype=np.float64,
)
# quads listed by corner index; orientation is fixed up numerically
_CUBOID_FACES = [(0, 2, 6, 4), (1, 3, 7, 5), (0, 1, 5, 4), (2, 3, 7, 6), (0, 1, 3, 2), (4, 5, 7, 6)]


@dataclass(frozen=True, eq=False)
class Cuboid3D:
    pose: Pose  # cuboid frame -> reference frame
    half_extents: np.ndarray  # (3,) same units as pose translation

    def __post_init__(self):
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise GeometryError("extents", f"half extents must be positive: {h}")
        object.__setattr__(self, "half_extents", h)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.pose.translation)

    def corners(self) -> np.ndarray:
        return self.pose.apply(CORNER_SIGNS * self.half_extents)

    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def transformed(self, T: Pose) -> "Cuboid3D":
        """The same box expressed in another frame (``T`` maps old -> new)."""
        return Cuboid3D(T @ self.pose, self.half_extents)

    def inflated(self, margin: float) -> "Cuboid3D":
        return Cuboid3D(self.pose, self.half_extents + margin)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)

    def halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Outward normals ``N`` (6, 3) and offsets ``d`` with ``N @ x <= d`` inside."""
        R = self.pose.rotation
        normals = np.concatenate([R.T, -R.T])
        offsets = normals @ self.center + np.concatenate([self.half_extents, self.half_extents])
        return normals, offsets

    def faces(self) -> list[np.ndarray]:
        c = self.corners()
        faces = [c[list(q)] for q in _CUBOID_FACES]
        return _orient_faces(faces, self.center)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        local = (np.atleast_2d(points) - self.center) @ self.pose.rotation
        return np.all(np.abs(local) <= self.half_extents + tol, axis=1)


def cuboid_from_instance(instance: ObjectInstance, model: ModelInfo) -> Cuboid3D:
    """Camera-frame cuboid (mm) of a posed model instance."""
    offset = Pose(np.eye(3), model.offset, check=False)
    return Cuboid3D(instance.pose_cam @ offset, np.asarray(model.size, dtype=np.float64) / 2.0)


# -------------------------------------------------------------- projection


def project_points(points, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to (N, 2) float pixels."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if np.any(p[:, 2] <= 0):
        raise GeometryError("behind_camera", "point with z <= 0")
    u = K.fx * p[:, 0] / p[:, 2] + K.cx
    v = K.fy * p[:, 1] / p[:, 2] + K.cy
    return np.stack([u, v], axis=1)


def backproject_pixels(uv, z, K: CameraIntrinsics) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    z = np.broadcast_to(np.asarray(z, dtype=np.float64), (len(uv),))
    x = (uv[:, 0] - K.cx) * z / K.fx
    y = (uv[:, 1] - K.cy) * z / K.fy
    return np.stack([x, y, z], axis=1)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_pixels(uv, K: CameraIntrinsics) -> np.ndarray:
    """Round and clamp float pixels into the image; returns int (N, 2)."""
    r = round_half_away(uv)
    r[:, 0] = np.clip(r[:, 0], 0, K.width - 1)
    r[:, 1] = np.clip(r[:, 1], 0, K.height - 1)
    return r.astype(np.int64)


# ------------------------------------------------------- 3D convex clipping


def _vector_area(poly: np.ndarray) -> np.ndarray:
    return 0.5 * np.cross(poly, np.roll(poly, -1, axis=0)).sum(axis=0)


def _orient_faces(faces, interior_point) -> list[np.ndarray]:
    out = []
    for f in faces:
        if np.dot(_vector_area(f - interior_point), f.mean(axis=0) - interior_point) < 0:
            f = f[::-1]
        out.append(f)
    return out


def polytope_volume(faces: list[np.ndarray]) -> float:
    """Volume enclosed by outward-oriented planar faces (divergence theorem)."""
    if not faces:
        return 0.0
    ref = faces[0][0]
    vol = 0.0
    for f in faces:
        g = f - ref
        vol += np.dot(g[0], _vector_area(g))
    return max(vol / 3.0, 0.0)


def _clip_polygon_3d(poly: np.ndarray, n: np.ndarray, d: float, tol: float):
    s = poly @ n - d
    out, on_plane = [], []
    k = len(poly)
    for i in range(k):
        a, b = poly[i], poly[(i + 1) % k]
        sa, sb = s[i], s[(i + 1) % k]
        if sa <= tol:
            out.append(a)
            if sa >= -tol:
                on_plane.append(a)
        if (sa < -tol and sb > tol) or (sa > tol and sb < -tol):
            p = a + (b - a) * (sa / (sa - sb))
            out.append(p)
            on_plane.append(p)
    return out, on_plane


def _cap_face(points: list[np.ndarray], n: np.ndarray, tol: float) -> np.ndarray | None:
    if len(points) < 3:
        return None
    pts = np.array(points)
    uniq = [pts[0]]
    for p in pts[1:]:
        if min(np.linalg.norm(p - q) for q in uniq) > tol:
            uniq.append(p)
    if len(uniq) < 3:
        return None
    pts = np.array(uniq)
    c = pts.mean(axis=0)
    u = pts[0] - c
    u -= n * np.dot(u, n)
    if np.linalg.norm(u) < tol:
        u = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(u) < 0.5:
            u = np.cross(n, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    ang = np.arctan2((pts - c) @ v, (pts - c) @ u)
    return pts[np.argsort(ang)]


def clip_polytope(faces: list[np.ndarray], normal, offset: float, tol: float = 1e-9) -> list[np.ndarray]:
    """Keep the part of a convex polytope with ``normal . x <= offset``."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    offset = offset / np.linalg.norm(normal)
    s = np.concatenate(faces) @ n - offset
    if s.max() <= tol:
        return faces
    if s.min() >= -tol:
        return []
    new_faces, cap = [], []
    for f in faces:
        kept, on = _clip_polygon_3d(f, n, offset, tol)
        cap.extend(on)
        if len(kept) >= 3:
            new_faces.append(np.array(kept))
    if not new_faces:
        return []
    capf = _cap_face(cap, n, max(tol, 1e-9) * 10)
    if capf is not None:
        new_faces.append(capf)
    return new_faces


def intersection_volume(faces_a: list[np.ndarray], normals_b, offsets_b) -> float:
    faces = faces_a
    scale = max(np.abs(np.concatenate(faces_a)).max(), 1.0)
    for n, d in zip(normals_b, offsets_b):
        faces = clip_polytope(faces, n, d, tol=1e-12 * scale)
        if not faces:
            return 0.0
    return polytope_volume(faces)


def iou3d(a: Cuboid3D, b: Cuboid3D) -> float:
    """Exact volumetric IoU of two oriented cuboids in the same frame."""
    nb, db = b.halfspaces()
    inter = intersection_volume(a.faces(), nb, db)
    union = a.volume() + b.volume() - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def hull_polytope(points) -> tuple[list[np.ndarray], np.ndarray, np.ndarray, float] | None:
    """Faces, half-spaces and volume of the 3D convex hull of ``points``.

    Returns None when the points are (numerically) coplanar.
    """
    from scipy.spatial import ConvexHull, QhullError

    pts = np.asarray(points, dtype=np.float64)
    try:
        hull = ConvexHull(pts)
    except (QhullError, ValueError):
        return None
    if hull.volume <= 0:
        return None
    interior = pts[hull.vertices].mean(axis=0)
    faces = _orient_faces([pts[s] for s in hull.simplices], interior)
    normals = hull.equations[:, :3]
    offsets = -hull.equations[:, 3]
    return faces, normals, offsets, float(hull.volume)


def convex_iou3d(points_a, points_b) -> float:
    """IoU of the convex hulls of two 3D point sets (0 for flat hulls)."""
    ha, hb = hull_polytope(points_a), hull_polytope(points_b)
    if ha is None or hb is None:
        return 0.0
    inter = intersection_volume(ha[0], hb[1], hb[2])
    union = ha[3] + hb[3] - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


# ------------------------------------------------------------------ 2D hulls


def _cross2(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise in (u, v) axes; collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross2(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross2(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def clip_convex_polygons(subject, clip) -> np.ndarray:
    """Intersection of two counter-clockwise convex polygons."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    c = np.asarray(clip, dtype=np.float64)
    if len(c) < 3:
        return np.zeros((0, 2))
    for i in range(len(c)):
        a, b = c[i], c[(i + 1) % len(c)]
        inp, out = out, []
        if not inp:
            break
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = _cross2(a, b, p), _cross2(a, b, q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def hull_iou(points_a, points_b) -> float:
    """Area IoU of the convex hulls of two 2D point sets."""
    ha, hb = convex_hull_2d(points_a), convex_hull_2d(points_b)
    area_a, area_b = polygon_area(ha), polygon_area(hb)
    if area_a <= 0 or area_b <= 0:
        same = ha.shape == hb.shape and np.allclose(ha, hb)
        return 1.0 if same and area_a == area_b else 0.0
    inter = polygon_area(clip_convex_polygons(ha, hb))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def point_in_convex_polygon(point, poly, tol: float = 1e-9) -> bool:
    """Inside-or-on test against a counter-clockwise convex polygon."""
    p = np.asarray(point, dtype=np.float64)
    P = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(P) == 0:
        return False
    if len(P) == 1:
        return bool(np.linalg.norm(p - P[0]) <= tol)
    if len(P) == 2:
        return _dist_point_segment_2d(p, P[0], P[1]) <= tol
    for i in range(len(P)):
        a, b = P[i], P[(i + 1) % len(P)]
        edge = np.linalg.norm(b - a)
        if _cross2(a, b, p) < -tol * max(edge, 1.0):
            return False
    return True


def _dist_point_segment_2d(p, a, b) -> float:
    ab = b - a
    denom = float(np.dot(ab, ab))
    t = 0.0 if denom == 0 else float(np.clip(np.dot(p - a, ab) / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def projected_hull(cuboid: Cuboid3D, K: CameraIntrinsics) -> np.ndarray:
    """Convex hull of the cuboid's eight projected corners (float pixels)."""
    return convex_hull_2d(project_points(cuboid.corners(), K))


def aabb_gap(lo_a, hi_a, lo_b, hi_b) -> float:
    """Separation between two axis-aligned boxes (negative when they overlap)."""
    sep = np.maximum(np.asarray(lo_b) - hi_a, np.asarray(lo_a) - hi_b)
    return float(sep.max())
