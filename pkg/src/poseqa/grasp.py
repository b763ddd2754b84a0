"""Antipodal parallel-jaw grasps, clutter labels and the 5-point encoding.

Candidates come from ray casting: a surface sample is pushed through the
object along its inward normal, and the exit point becomes the second
contact. Pairs with opposing normals inside the friction cone and a width
the gripper can span are expanded into several approach directions around
the closing axis. The gripper is modelled as two finger boxes and a palm
box; candidates whose boxes hit neighbouring objects are discarded, and an
object with no collision-free candidate is labelled fully cluttered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bop_ingest import CameraIntrinsics, Mesh, ModelInfo, Pose, SceneFrame
from .errors import GraspError
from .geometry import Cuboid3D, project_points, to_pixels
from .world_frame import WorldTransform

POINT_LABELS = ("Grasp center", "Left finger base", "Right finger base", "Left finger tip", "Right finger tip")


@dataclass(frozen=True)
class GraspParams:
    n_samples: int = 2000
    friction_deg: float = 15.0
    max_width: float = 85.0
    min_width: float = 1.0
    finger_len: float = 45.0
    finger_thickness: float = 10.0
    finger_depth: float = 20.0
    palm_len: float = 20.0
    approach_step_deg: float = 30.0
    max_approach_elevation_deg: float = 30.0  # approach may point upward by at most this
    dedup_trans: float = 10.0
    dedup_rot_deg: float = 15.0
    inflation: float = 5.0
    k: int = 5


@dataclass(frozen=True, eq=False)
class Contact:
    p1: np.ndarray
    p2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray


@dataclass(frozen=True, eq=False)
class Grasp:
    pose: Pose  # gripper -> world (mm); +Z approach, +X closing axis
    width: float
    quality: float
    contact: Contact
    colliders: frozenset = frozenset()
    points_2d: np.ndarray | None = None  # (5, 2) int

    def with_points(self, pts) -> "Grasp":
        return Grasp(self.pose, self.width, self.quality, self.contact, self.colliders, np.asarray(pts))

    def with_colliders(self, ids) -> "Grasp":
        return Grasp(self.pose, self.width, self.quality, self.contact, frozenset(ids), self.points_2d)

    def to_dict(self) -> dict:
        return {
            "rotation": self.pose.rotation.tolist(),
            "translation": self.pose.translation.tolist(),
            "width": self.width,
            "quality": self.quality,
            "contact": [self.contact.p1.tolist(), self.contact.p2.tolist(),
                        self.contact.n1.tolist(), self.contact.n2.tolist()],
            "colliders": sorted(self.colliders),
            "points_2d": None if self.points_2d is None else np.asarray(self.points_2d).tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Grasp":
        c = [np.asarray(v, dtype=np.float64) for v in d["contact"]]
        pts = d.get("points_2d")
        return cls(Pose(d["rotation"], d["translation"], check=False), float(d["width"]), float(d["quality"]),
                   Contact(*c), frozenset(d.get("colliders", ())),
                   None if pts is None else np.asarray(pts, dtype=np.int64))


@dataclass(frozen=True)
class ClutterLabel:
    target_id: int
    fully_cluttered: bool
    blockers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.fully_cluttered and not self.blockers:
            raise ValueError("a fully cluttered target needs blockers")
        if self.target_id in self.blockers:
            raise ValueError("target cannot block itself")


# ----------------------------------------------------------------- sampling


def _triangles(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tri = mesh.vertices[mesh.faces]
    cr = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cr, axis=1)
    keep = area > 1e-12
    tri, cr, area = tri[keep], cr[keep], area[keep]
    normals = cr / (2 * area[:, None])
    # orient outward: signed volume of a closed outward mesh is positive
    if np.einsum("ij,ij->", tri[:, 0], cr) < 0:
        normals = -normals
    return tri, normals, area


def _sample_triangles(tri, area, n: int, rng: np.random.Generator):
    which = rng.choice(len(tri), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1
    r1, r2 = np.where(flip, 1 - r1, r1), np.where(flip, 1 - r2, r2)
    t = tri[which]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0]), which


def surface_points(geometry, pose_world: Pose, n: int = 6000, seed=0) -> np.ndarray:
    """Vertices plus area-weighted surface samples, in the world frame."""
    if isinstance(geometry, Cuboid3D):
        from .synth import box_mesh

        mesh, pose_world = box_mesh(2 * geometry.half_extents), geometry.pose
    else:
        mesh = geometry
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tri, _, area = _triangles(mesh)
    pts, _ = _sample_triangles(tri, area, n, rng)
    return pose_world.apply(np.vstack([mesh.vertices, pts]))


def _first_hits(origins, dirs, tri, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive ray/triangle hit per ray (Moller-Trumbore)."""
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    t_best = np.full(len(origins), np.inf)
    f_best = np.full(len(origins), -1, dtype=np.int64)
    for s in range(0, len(origins), chunk):
        o, d = origins[s : s + chunk, None, :], dirs[s : s + chunk, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rtk,tk->rt", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = o - v0[None]
            u = np.einsum("rtk,rtk->rt", tv, p) * inv
            q = np.cross(tv, e1[None])
            v = np.einsum("rtk,rtk->rt", d, q) * inv
            t = np.einsum("tk,rtk->rt", e2, q) * inv
            ok = (np.abs(det) > 1e-12) & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9) & (t > 1e-6)
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        t_best[s : s + chunk] = t[np.arange(len(j)), j]
        f_best[s : s + chunk] = np.where(np.isfinite(t_best[s : s + chunk]), j, -1)
    return t_best, f_best


def _rot_about(axis, angle) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def _greedy_dedup(pos, order, tol: float, similar) -> list[int]:
    """Keep items in ``order``, dropping any within ``tol`` of a kept item that ``similar`` accepts."""
    grid: dict[tuple, list[int]] = {}
    cells = np.floor(np.asarray(pos) / tol).astype(np.int64)
    tol2 = tol * tol
    kept = []
    offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]
    for idx in order:
        cx, cy, cz = cells[idx]
        p = pos[idx]
        dup = False
        for ox, oy, oz in offsets:
            for j in grid.get((cx + ox, cy + oy, cz + oz), ()):
                d = p - pos[j]
                if d @ d < tol2 and similar(idx, j):
                    dup = True
                    break
            if dup:
                break
        if not dup:
            grid.setdefault((cx, cy, cz), []).append(idx)
            kept.append(idx)
    return kept


def sample_antipodal_grasps(geometry, pose_world: Pose, params: GraspParams = GraspParams(), seed=0) -> list[Grasp]:
    """Antipodal candidates for a mesh (model frame) or a Cuboid3D, posed in the world."""
    if isinstance(geometry, Cuboid3D):
        from .synth import box_mesh

        mesh = box_mesh(2 * geometry.half_extents)
        pose_world = geometry.pose
    else:
        mesh = geometry
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tri, normals, area = _triangles(mesh)
    p1, which = _sample_triangles(tri, area, params.n_samples, rng)
    n1 = normals[which]
    dist, hit = _first_hits(p1, -n1, tri)
    ok = np.isfinite(dist) & (dist <= params.max_width) & (dist >= params.min_width)
    n2 = np.where(ok[:, None], normals[np.maximum(hit, 0)], 0.0)
    cos_opp = np.einsum("ij,ij->i", -n1, n2)
    ok &= cos_opp >= math.cos(math.radians(params.friction_deg))
    if not ok.any():
        raise GraspError("no_candidates", "no antipodal pair fits the gripper")

    # into the world frame
    R, tw = pose_world.rotation, pose_world.translation
    p1w = p1[ok] @ R.T + tw
    n1w = n1[ok] @ R.T
    n2w = n2[ok] @ R.T
    width = dist[ok]
    p2w = p1w - n1w * width[:, None]
    quality = cos_opp[ok]
    axis = -n1w

    # collapse near-identical contact pairs (axis sign matters not)
    mid = (p1w + p2w) / 2
    order = np.lexsort((np.arange(len(quality)), -quality))
    cos_axis = math.cos(math.radians(params.dedup_rot_deg))
    kept_pairs = _greedy_dedup(mid, order, params.dedup_trans,
                               lambda i, j: abs(axis[i] @ axis[j]) > cos_axis)

    down = np.array([0.0, 0.0, -1.0])
    max_up = math.sin(math.radians(params.max_approach_elevation_deg))
    n_rot = max(1, int(round(360.0 / params.approach_step_deg)))
    poses_R, poses_t, meta = [], [], []
    for i in kept_pairs:
        x = axis[i]
        a0 = down - np.dot(down, x) * x
        if np.linalg.norm(a0) < 1e-6:
            a0 = np.array([1.0, 0.0, 0.0]) - x[0] * x
        a0 /= np.linalg.norm(a0)
        for k in range(n_rot):
            z = _rot_about(x, math.radians(k * params.approach_step_deg)) @ a0
            if z[2] > max_up + 1e-12:
                continue
            y = np.cross(z, x)
            Rg = np.stack([x, y, z], axis=1)
            poses_R.append(Rg)
            poses_t.append(mid[i] - 0.5 * params.finger_len * z)
            meta.append(i)
    if not meta:
        raise GraspError("no_candidates", "no admissible approach direction")
    poses_R, poses_t, meta = np.array(poses_R), np.array(poses_t), np.array(meta)
    q = quality[meta]
    order = np.lexsort((np.arange(len(q)), -q))
    trace_tol = 2 * math.cos(math.radians(params.dedup_rot_deg)) + 1
    keep = _greedy_dedup(poses_t, order, params.dedup_trans,
                         lambda i, j: float(np.einsum("ij,ij->", poses_R[i], poses_R[j])) > trace_tol)
    out = []
    for c in keep:
        i = meta[c]
        out.append(Grasp(
            Pose(poses_R[c], poses_t[c], check=False), float(width[i]), float(quality[i]),
            Contact(p1w[i], p2w[i], n1w[i], n2w[i]),
        ))
    return out


# ---------------------------------------------------------------- collision


def gripper_boxes(grasp: Grasp, params: GraspParams = GraspParams()) -> list[Cuboid3D]:
    """Left finger, right finger and palm as world-frame cuboids."""
    w, th, dp, L, palm = grasp.width, params.finger_thickness, params.finger_depth, params.finger_len, params.palm_len
    local = [
        ((-(w / 2 + th / 2), 0.0, L / 2), (th / 2, dp / 2, L / 2)),
        ((w / 2 + th / 2, 0.0, L / 2), (th / 2, dp / 2, L / 2)),
        ((0.0, 0.0, -palm / 2), (w / 2 + th, dp / 2, palm / 2)),
    ]
    return [Cuboid3D(grasp.pose @ Pose(np.eye(3), c, check=False), h) for c, h in local]


def obb_overlap(ca, Ra, ha, cb, Rb, hb) -> np.ndarray:
    """Vectorised separating-axis test; touching boxes count as overlapping."""
    R = np.einsum("nji,njk->nik", Ra, Rb)
    T = np.einsum("nji,nj->ni", Ra, cb - ca)
    AbsR = np.abs(R) + 1e-9
    sep = np.zeros(len(R), dtype=bool)
    for i in range(3):
        sep |= np.abs(T[:, i]) > ha[:, i] + np.einsum("nj,nj->n", hb, AbsR[:, i, :])
    for j in range(3):
        sep |= np.abs(np.einsum("ni,ni->n", T, R[:, :, j])) > np.einsum("ni,ni->n", ha, AbsR[:, :, j]) + hb[:, j]
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for j in range(3):
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            ra = ha[:, i1] * AbsR[:, i2, j] + ha[:, i2] * AbsR[:, i1, j]
            rb = hb[:, j1] * AbsR[:, i, j2] + hb[:, j2] * AbsR[:, i, j1]
            t = np.abs(T[:, i2] * R[:, i1, j] - T[:, i1] * R[:, i2, j])
            sep |= t > ra + rb
    return ~sep


def _box_arrays(grasps: list[Grasp], params: GraspParams):
    """Centres, rotations and half extents of the 3 gripper boxes per grasp, flattened."""
    w = np.array([g.width for g in grasps])
    R = np.array([g.pose.rotation for g in grasps])
    t = np.array([g.pose.translation for g in grasps])
    th, dp, L, palm = params.finger_thickness, params.finger_depth, params.finger_len, params.palm_len
    m = len(grasps)
    local = np.zeros((m, 3, 3))
    local[:, 0] = np.stack([-(w / 2 + th / 2), np.zeros(m), np.full(m, L / 2)], axis=1)
    local[:, 1] = np.stack([w / 2 + th / 2, np.zeros(m), np.full(m, L / 2)], axis=1)
    local[:, 2, 2] = -palm / 2
    half = np.zeros((m, 3, 3))
    half[:, :2] = (th / 2, dp / 2, L / 2)
    half[:, 2] = np.stack([w / 2 + th, np.full(m, dp / 2), np.full(m, palm / 2)], axis=1)
    centers = t[:, None, :] + np.einsum("mij,mbj->mbi", R, local)
    return centers.reshape(-1, 3), np.repeat(R, 3, axis=0), half.reshape(-1, 3)


def _penetrates(c, R, h, tree, points, depth: float = 1.0) -> np.ndarray:
    """True where some surface point lies more than ``depth`` inside a box."""
    out = np.zeros(len(c), dtype=bool)
    inner = np.maximum(h - depth, 0.0)
    for b, near in enumerate(tree.query_ball_point(c, np.linalg.norm(h, axis=1))):
        if near:
            local = (points[near] - c[b]) @ R[b]
            out[b] = bool(np.any(np.all(np.abs(local) < inner[b], axis=1)))
    return out


def filter_and_rank(
    candidates: list[Grasp],
    target_id: int,
    target_cuboid: Cuboid3D,
    others: dict[int, Cuboid3D],
    params: GraspParams = GraspParams(),
    k: int | None = None,
    table_z: float | None = 0.0,
    target_surface: np.ndarray | None = None,
    batch: int = 128,
) -> tuple[list[Grasp], ClutterLabel]:
    """Top-k collision-free grasps and the clutter label for one target.

    Candidates are checked in quality order and the search stops once k
    free grasps are found. A candidate is admissible when no gripper box
    dips below the table or penetrates the target: with ``target_surface``
    (world points on the object) no point may lie more than 1 mm inside a
    box, otherwise the target cuboid shrunk by 1 mm must not be touched.
    Admissible candidates touching another object's inflated cuboid record
    it as a collider.
    """
    k = params.k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        raise GraspError("no_candidates")
    tree = None
    if target_surface is not None:
        from scipy.spatial import cKDTree

        target_surface = np.asarray(target_surface, dtype=np.float64)
        tree = cKDTree(target_surface)
    shrunk = target_cuboid.inflated(-min(1.0, 0.5 * target_cuboid.half_extents.min() - 1e-6))
    ids = sorted(i for i in others if i != target_id)
    obstacles = [others[i].inflated(params.inflation) for i in ids]

    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].quality, i))
    free: list[Grasp] = []
    blocked: list[tuple] = []
    for s in range(0, len(order), batch):
        chunk = order[s : s + batch]
        m = len(chunk)
        c, R, h = _box_arrays([candidates[i] for i in chunk], params)
        valid = np.ones(m, dtype=bool)
        if table_z is not None:
            low = c[:, 2] - np.einsum("bj,bj->b", np.abs(R[:, 2, :]), h)
            valid &= (low >= table_z - 1e-9).reshape(m, 3).all(axis=1)
        rows = np.repeat(valid, 3)
        self_hit = np.zeros(3 * m, dtype=bool)
        if tree is not None:
            self_hit[rows] = _penetrates(c[rows], R[rows], h[rows], tree, target_surface)
        elif rows.any():
            n_rows = int(rows.sum())
            self_hit[rows] = obb_overlap(c[rows], R[rows], h[rows], np.tile(shrunk.center, (n_rows, 1)),
                                         np.broadcast_to(shrunk.pose.rotation, (n_rows, 3, 3)),
                                         np.tile(shrunk.half_extents, (n_rows, 1)))
        valid &= ~self_hit.reshape(m, 3).any(axis=1)
        hits = np.zeros((m, len(ids)), dtype=bool)
        for col, ob in enumerate(obstacles):
            hit = obb_overlap(c, R, h, np.tile(ob.center, (3 * m, 1)),
                              np.broadcast_to(ob.pose.rotation, (3 * m, 3, 3)),
                              np.tile(ob.half_extents, (3 * m, 1)))
            hits[:, col] = hit.reshape(m, 3).any(axis=1)
        for r, i in enumerate(chunk):
            if not valid[r]:
                continue
            g = candidates[i].with_colliders(ids[j] for j in np.flatnonzero(hits[r]))
            if g.colliders:
                blocked.append((len(g.colliders), -g.quality, tuple(sorted(g.colliders)), i, g))
            else:
                free.append(g)
                if len(free) == k:
                    return free, ClutterLabel(target_id, False, ())
    if free:
        return free, ClutterLabel(target_id, False, ())
    if not blocked:
        return [], ClutterLabel(target_id, False, ())
    best = min(blocked, key=lambda b: b[:4])[4]
    return [], ClutterLabel(target_id, True, tuple(sorted(best.colliders)))


# ---------------------------------------------------------------- 2D encoding


def grasp_points_3d(grasp: Grasp, finger_len: float) -> np.ndarray:
    R, o = grasp.pose.rotation, grasp.pose.translation
    x, z = R[:, 0], R[:, 2]
    b1 = o - 0.5 * grasp.width * x
    b2 = o + 0.5 * grasp.width * x
    return np.array([o, b1, b2, b1 + finger_len * z, b2 + finger_len * z])


def grasp_to_points2d(grasp: Grasp, world: WorldTransform, K: CameraIntrinsics, finger_len: float = 45.0) -> np.ndarray:
    """Five pixel points: centre, left/right finger base, left/right finger tip.

    "Left" is whichever finger lands at the smaller image u.
    """
    pts = grasp_points_3d(grasp, finger_len)
    uv = project_points(world.to_camera_mm(pts), K)
    px = to_pixels(uv, K)
    if (px[1, 0], uv[1, 0]) > (px[2, 0], uv[2, 0]):
        px = px[[0, 2, 1, 4, 3]]
    return px


def base_distance_px(points_2d) -> float:
    p = np.asarray(points_2d, dtype=np.float64)
    return float(np.linalg.norm(p[1] - p[2]))


# ------------------------------------------------------------------- frames


@dataclass
class ObjectGrasps:
    instance_id: int
    grasps: list[Grasp] = field(default_factory=list)
    label: ClutterLabel | None = None
    error: str | None = None


def instance_rng(seed: int, scene_id: int, frame_id: int, instance_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scene_id, frame_id, instance_id, 0x6A]))


def synthesize_frame_grasps(
    frame: SceneFrame,
    world: WorldTransform,
    model_table: dict[int, ModelInfo],
    cuboids_world: dict[int, Cuboid3D],
    params: GraspParams = GraspParams(),
    seed: int = 0,
) -> dict[int, ObjectGrasps]:
    out = {}
    T = world.cam_to_world_mm
    for inst in frame.instances:
        res = ObjectGrasps(inst.instance_id)
        model = model_table[inst.obj_id]
        rng = instance_rng(seed, frame.scene_id, frame.frame_id, inst.instance_id)
        geom = model.mesh if model.mesh is not None else cuboids_world[inst.instance_id]
        try:
            cands = sample_antipodal_grasps(geom, T @ inst.pose_cam, params, rng)
        except GraspError as e:
            res.error = e.kind
            out[inst.instance_id] = res
            continue
        surface = surface_points(geom, T @ inst.pose_cam, seed=rng)
        top, label = filter_and_rank(cands, inst.instance_id, cuboids_world[inst.instance_id],
                                     cuboids_world, params, target_surface=surface)
        pts = []
        for g in top:
            try:
                pts.append(g.with_points(grasp_to_points2d(g, world, frame.intrinsics, params.finger_len)))
            except Exception:  # behind the camera: drop the grasp, keep the rest
                continue
        res.grasps, res.label = pts, label
        out[inst.instance_id] = res
    return out
