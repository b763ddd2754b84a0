"""Deterministic synthetic tabletop scenes with exact ground truth.

Scenes are boxes and cylinders resting on a rectangular table at world
z = 0 (millimetres). Depth is ray cast per pixel, optionally perturbed with
seeded Gaussian noise, and quantised the way BOP stores it. Every scene can
be exported to the BOP directory layout and fed through the pipeline
unchanged.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bop_ingest import (
    CameraIntrinsics,
    Mesh,
    ModelInfo,
    ObjectInstance,
    Pose,
    SceneFrame,
    scene_dir_name,
    write_model_table,
    write_scene_dir,
)
from .errors import SynthError
from .geometry import Cuboid3D, aabb_gap, intersection_volume, project_points

DEFAULT_INTRINSICS = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480, 0.1)


@dataclass(frozen=True)
class SynthObject:
    obj_id: int
    kind: str  # "box" | "cylinder"
    size: tuple[float, float, float]  # full extents; cylinders use (2r, 2r, h)
    pose_world: Pose  # model centre -> world (mm)
    description: str = ""

    @classmethod
    def resting(cls, obj_id, kind, size, x, y, yaw_deg=0.0, z0=0.0, description="") -> "SynthObject":
        """Object standing upright on a surface at height ``z0``."""
        c, s = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(obj_id, kind, tuple(float(v) for v in size), Pose(R, [x, y, z0 + size[2] / 2.0]), description)

    @property
    def cuboid(self) -> Cuboid3D:
        return Cuboid3D(self.pose_world, np.asarray(self.size) / 2.0)


@dataclass(frozen=True)
class SynthSpec:
    name: str
    seed: int
    world_to_cam: Pose  # mm
    objects: tuple[SynthObject, ...]
    table_size: tuple[float, float] = (1200.0, 900.0)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    depth_noise_sigma: float = 0.0  # mm
    penetration_tol: float = 1.0  # mm
    notes: dict = field(default_factory=dict, compare=False)

    def with_noise(self, sigma: float, seed: int | None = None) -> "SynthSpec":
        return SynthSpec(
            self.name, self.seed if seed is None else seed, self.world_to_cam, self.objects,
            self.table_size, self.intrinsics, sigma, self.penetration_tol, self.notes,
        )

    def without(self, index: int) -> "SynthSpec":
        objs = tuple(o for i, o in enumerate(self.objects) if i != index)
        return SynthSpec(
            self.name, self.seed, self.world_to_cam, objs, self.table_size,
            self.intrinsics, self.depth_noise_sigma, self.penetration_tol, self.notes,
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    cam_to_world: Pose  # mm
    cuboids_world: dict[int, Cuboid3D]
    cuboids_cam: dict[int, Cuboid3D]
    spatial: dict[tuple[int, int], str | None]
    depth: dict[tuple[int, int], str | None]
    adjacency: frozenset[tuple[int, int]]

    @property
    def up_axis_camera(self) -> np.ndarray:
        return self.cam_to_world.rotation[2].copy()


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target`` (x right, y down)."""
    eye, target = np.asarray(eye, float), np.asarray(target, float)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_c2w = np.stack([x, y, z], axis=1)
    R = R_c2w.T
    return Pose(R, -R @ eye)


def orbit_camera(distance: float, tilt_deg: float, azimuth_deg: float = 0.0, target=(0.0, 0.0, 0.0)) -> Pose:
    """Camera on a sphere around ``target``; tilt is the angle of the optical axis from straight down."""
    t, a = math.radians(tilt_deg), math.radians(azimuth_deg)
    offset = np.array([-math.sin(t) * math.sin(a), -math.sin(t) * math.cos(a), math.cos(t)]) * distance
    return look_at(np.asarray(target) + offset, target)


# ------------------------------------------------------------------ meshes


def box_mesh(size) -> Mesh:
    h = np.asarray(size, float) / 2.0
    signs = np.array([[1 if i & 1 else -1, 1 if i & 2 else -1, 1 if i & 4 else -1] for i in range(8)], float)
    quads = [(0, 4, 6, 2), (1, 3, 7, 5), (0, 1, 5, 4), (2, 6, 7, 3), (0, 2, 3, 1), (4, 5, 7, 6)]
    faces = [tri for a, b, c, d in quads for tri in ((a, b, c), (a, c, d))]
    return Mesh(signs * h, np.array(faces, dtype=np.int64))


def cylinder_mesh(size, segments: int = 32) -> Mesh:
    r, hh = size[0] / 2.0, size[2] / 2.0
    ang = np.linspace(0.0, 2 * math.pi, segments, endpoint=False)
    ring = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    bottom = np.hstack([ring, np.full((segments, 1), -hh)])
    top = np.hstack([ring, np.full((segments, 1), hh)])
    verts = np.vstack([bottom, top, [[0, 0, -hh], [0, 0, hh]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i)]
        faces += [(cb, j, i), (ct, segments + i, segments + j)]
    return Mesh(verts, np.array(faces, dtype=np.int64))


def model_for(obj: SynthObject) -> ModelInfo:
    mesh = box_mesh(obj.size) if obj.kind == "box" else cylinder_mesh(obj.size)
    category = obj.description or f"{obj.kind} {obj.obj_id}"
    return ModelInfo(
        obj_id=obj.obj_id,
        size=tuple(obj.size),
        diameter=float(np.linalg.norm(obj.size) if obj.kind == "box" else math.hypot(obj.size[0], obj.size[2])),
        description=obj.description or category,
        category_name=category,
        min_corner=tuple(-np.asarray(obj.size) / 2.0),
        mesh=mesh,
    )


def model_table_for(specs) -> dict[int, ModelInfo]:
    table: dict[int, ModelInfo] = {}
    for spec in specs:
        for o in spec.objects:
            m = model_for(o)
            if o.obj_id in table and table[o.obj_id].size != m.size:
                raise SynthError("model", f"obj_id {o.obj_id} reused with a different size")
            table[o.obj_id] = m
    return table


# --------------------------------------------------------------- rendering


def _validate(spec: SynthSpec) -> None:
    cam_to_world = spec.world_to_cam.inverse()
    if cam_to_world.translation[2] <= 0:
        raise SynthError("camera_pose", "camera is on or below the table plane")
    tol = spec.penetration_tol
    for o in spec.objects:
        if o.cuboid.corners()[:, 2].min() < -tol:
            raise SynthError("spec", f"object {o.obj_id} sinks into the table")
    for a, b in itertools.combinations(spec.objects, 2):
        ha, hb = a.cuboid.half_extents - tol, b.cuboid.half_extents - tol
        if np.any(ha <= 0) or np.any(hb <= 0):
            continue
        ca, cb = Cuboid3D(a.pose_world, ha), Cuboid3D(b.pose_world, hb)
        if intersection_volume(ca.faces(), *cb.halfspaces()) > 0:
            raise SynthError("spec", f"objects {a.obj_id} and {b.obj_id} interpenetrate")


def _ray_box(o, d, obj: SynthObject) -> np.ndarray:
    R, c = obj.pose_world.rotation, obj.pose_world.translation
    ol = (o - c) @ R
    dl = d @ R
    h = np.asarray(obj.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - ol) / dl
        t2 = (h - ol) / dl
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    parallel = dl == 0
    outside = parallel & (np.abs(ol) > h)
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.inf, tmax)
    tn, tf = tmin.max(axis=1), tmax.min(axis=1)
    hit = (tn <= tf) & (tf > 0) & ~outside.any(axis=1)
    return np.where(hit & (tn > 0), tn, np.inf)


def _ray_cylinder(o, d, obj: SynthObject) -> np.ndarray:
    R, c = obj.pose_world.rotation, obj.pose_world.translation
    ol = (o - c) @ R
    dl = d @ R
    r, hh = obj.size[0] / 2.0, obj.size[2] / 2.0
    best = np.full(len(dl), np.inf)
    a = dl[:, 0] ** 2 + dl[:, 1] ** 2
    b = 2 * (ol[..., 0] * dl[:, 0] + ol[..., 1] * dl[:, 1])
    cc = ol[..., 0] ** 2 + ol[..., 1] ** 2 - r * r
    disc = b * b - 4 * a * cc
    ok = (disc >= 0) & (a > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
    z = ol[..., 2] + t * dl[:, 2]
    side = ok & (t > 0) & (np.abs(z) <= hh)
    best = np.where(side, t, best)
    for zc in (-hh, hh):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - ol[..., 2]) / dl[:, 2]
        x = ol[..., 0] + tc * dl[:, 0]
        y = ol[..., 1] + tc * dl[:, 1]
        cap = (dl[:, 2] != 0) & (tc > 0) & (x * x + y * y <= r * r)
        best = np.where(cap & (tc < best), tc, best)
    return best


def _raycast_z(spec: SynthSpec) -> np.ndarray:
    K = spec.intrinsics
    vs, us = np.mgrid[0 : K.height, 0 : K.width].astype(np.float64)
    d_cam = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1).reshape(-1, 3)
    c2w = spec.world_to_cam.inverse()
    o = c2w.translation
    d = d_cam @ c2w.rotation.T  # ray parameter t equals camera-frame depth

    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = -o[2] / d[:, 2]
    hx = o[0] + t_table * d[:, 0]
    hy = o[1] + t_table * d[:, 1]
    tx, ty = spec.table_size
    on_table = (t_table > 0) & (np.abs(hx) <= tx / 2) & (np.abs(hy) <= ty / 2)
    best = np.where(on_table, t_table, np.inf)
    for obj in spec.objects:
        t = _ray_box(o, d, obj) if obj.kind == "box" else _ray_cylinder(o, d, obj)
        best = np.minimum(best, t)
    return best.reshape(K.height, K.width)


def _relations(cams: dict[int, Cuboid3D], K: CameraIntrinsics, margin_frac=0.02, depth_frac=0.05):
    spatial, depth = {}, {}
    centers = {i: c.center for i, c in cams.items()}
    uv = {i: project_points(c[None], K)[0] for i, c in centers.items()}
    for a, b in itertools.permutations(sorted(cams), 2):
        du, dv = uv[b] - uv[a]
        m = margin_frac * K.width
        rel = None
        if abs(du) >= m and abs(du) >= abs(dv):
            rel = "left_of" if du > 0 else "right_of"
        elif abs(dv) > abs(du) and abs(dv) >= margin_frac * K.height:
            rel = "above" if dv > 0 else "below"
        spatial[(a, b)] = rel
        za, zb = centers[a][2], centers[b][2]
        depth[(a, b)] = None
        if abs(za - zb) >= depth_frac * (za + zb) / 2:
            depth[(a, b)] = "closer" if za < zb else "farther"
    return spatial, depth


def render_depth(spec: SynthSpec, *, scene_id: int = 1, frame_id: int = 0, inflation: float = 5.0):
    """Render a spec into a SceneFrame plus its exact ground-truth bundle."""
    _validate(spec)
    K = spec.intrinsics
    z = _raycast_z(spec)
    valid = np.isfinite(z)
    if spec.depth_noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        z = z + rng.normal(0.0, spec.depth_noise_sigma, z.shape)
    raw = np.zeros(z.shape, dtype=np.uint16)
    raw[valid] = np.clip(np.rint(z[valid] / K.depth_scale), 1, 65535).astype(np.uint16)

    instances = []
    cub_w, cub_c = {}, {}
    for i, o in enumerate(spec.objects):
        pose_cam = spec.world_to_cam @ o.pose_world
        instances.append(ObjectInstance(i, o.obj_id, Pose(pose_cam.rotation, pose_cam.translation, check=False)))
        cub_w[i] = o.cuboid
        cub_c[i] = o.cuboid.transformed(spec.world_to_cam)
    frame = SceneFrame(scene_id, frame_id, K, raw, tuple(instances), "", spec.world_to_cam)

    adjacency = set()
    for a, b in itertools.combinations(sorted(cub_w), 2):
        if aabb_gap(*cub_w[a].aabb(), *cub_w[b].aabb()) <= inflation:
            adjacency.add((a, b))
    spatial, depth = _relations(cub_c, K)
    gt = GroundTruth(spec.world_to_cam.inverse(), cub_w, cub_c, spatial, depth, frozenset(adjacency))
    return frame, gt


# ---------------------------------------------------------------- fixtures

BOX_S = (60.0, 60.0, 80.0)
BOX_M = (80.0, 50.0, 120.0)


def _fixture_tilted30() -> SynthSpec:
    objs = (
        SynthObject.resting(1, "box", BOX_S, -150.0, 40.0, 10.0, description="small red box"),
        SynthObject.resting(2, "box", BOX_M, 60.0, -60.0, -25.0, description="tall cereal box"),
        SynthObject.resting(3, "cylinder", (70.0, 70.0, 110.0), 180.0, 90.0, description="blue soup can"),
    )
    return SynthSpec("tilted30", 30, orbit_camera(850.0, 30.0, 15.0), objs)


def _fixture_topdown() -> SynthSpec:
    objs = (
        SynthObject.resting(1, "box", BOX_S, -140.0, -60.0, 0.0, description="small red box"),
        SynthObject.resting(2, "box", BOX_M, 50.0, 80.0, 30.0, description="tall cereal box"),
        SynthObject.resting(1, "box", BOX_S, 170.0, -90.0, 60.0, description="small red box"),
    )
    return SynthSpec("topdown", 31, orbit_camera(800.0, 0.0), objs)


def _fixture_sealed_box() -> SynthSpec:
    # the wall is taller and wider than the planner's sampling bounds
    objs = (
        SynthObject.resting(1, "box", BOX_S, -300.0, 0.0, description="small red box"),
        SynthObject.resting(10, "box", BOX_S, 300.0, 0.0, description="small green box"),
        SynthObject.resting(4, "box", (20.0, 900.0, 640.0), 0.0, 0.0, description="partition wall"),
    )
    return SynthSpec("sealed_box", 32, orbit_camera(1500.0, 35.0, 0.0, (0.0, 0.0, 100.0)), objs,
                     table_size=(1400.0, 1000.0), notes={"sealed_pair": (0, 1)})


def _fixture_ring_clutter() -> SynthSpec:
    t = (40.0, 40.0, 120.0)
    objs = (
        SynthObject.resting(5, "box", t, 0.0, 0.0, description="tall mustard bottle"),
        SynthObject.resting(6, "box", (50.0, 120.0, 130.0), 55.0, 0.0, description="juice carton"),
        SynthObject.resting(6, "box", (50.0, 120.0, 130.0), -55.0, 0.0, description="juice carton"),
        SynthObject.resting(7, "box", (40.0, 50.0, 130.0), 0.0, 45.5, description="milk box"),
        SynthObject.resting(8, "box", (40.0, 50.0, 30.0), 0.0, -45.5, description="flat tin"),
    )
    # x-neighbours leave a 10 mm gap, inside the 5 mm inflation plus finger
    # thickness, so every x-closing grasp hits both. y-closing grasps from
    # above clear the flat tin and hit only the tall milk box (index 3).
    return SynthSpec("ring_clutter", 33, orbit_camera(700.0, 25.0, 20.0), objs,
                     notes={"target": 0, "blockers": (3,)})


def _fixture_two_plane() -> SynthSpec:
    objs = (
        SynthObject.resting(9, "box", (420.0, 700.0, 60.0), 330.0, 0.0, description="wooden tray"),
        SynthObject.resting(1, "box", BOX_S, -200.0, 100.0, description="small red box"),
        SynthObject.resting(3, "cylinder", (70.0, 70.0, 110.0), -120.0, -150.0, description="blue soup can"),
    )
    return SynthSpec("two_plane", 34, orbit_camera(1000.0, 10.0, 0.0), objs, table_size=(1300.0, 1000.0))


def _fixture_line3() -> SynthSpec:
    objs = (
        SynthObject.resting(1, "box", BOX_S, -220.0, 0.0, description="small red box"),
        SynthObject.resting(2, "box", BOX_M, 0.0, 0.0, description="tall cereal box"),
        SynthObject.resting(3, "cylinder", (70.0, 70.0, 110.0), 220.0, 0.0, description="blue soup can"),
    )
    return SynthSpec("line3", 35, orbit_camera(850.0, 35.0, 0.0), objs)


_FIXTURES = {
    "tilted30": _fixture_tilted30,
    "topdown": _fixture_topdown,
    "sealed_box": _fixture_sealed_box,
    "ring_clutter": _fixture_ring_clutter,
    "two_plane": _fixture_two_plane,
    "line3": _fixture_line3,
}


def standard_fixtures() -> dict[str, SynthSpec]:
    return {name: make() for name, make in _FIXTURES.items()}


def fixture(name: str) -> SynthSpec:
    try:
        return _FIXTURES[name]()
    except KeyError:
        raise SynthError("unknown_fixture", name) from None


# ------------------------------------------------------- random scenes

LIBRARY = (
    (11, "box", (60.0, 60.0, 80.0), "small red box"),
    (12, "box", (80.0, 50.0, 120.0), "tall cereal box"),
    (13, "cylinder", (70.0, 70.0, 110.0), "blue soup can"),
    (14, "box", (140.0, 90.0, 40.0), "flat cracker box"),
    (15, "cylinder", (50.0, 50.0, 150.0), "slim mustard bottle"),
    (16, "box", (45.0, 45.0, 60.0), "yellow sponge"),
    (17, "cylinder", (90.0, 90.0, 60.0), "tuna tin"),
)


def random_spec(seed: int, n_objects: int | None = None, *, noise: float = 1.0) -> SynthSpec:
    """A random non-overlapping tabletop arrangement seen from a random viewpoint."""
    rng = np.random.default_rng(seed)
    n = int(n_objects if n_objects is not None else rng.integers(3, 7))
    placed: list[SynthObject] = []
    attempts = 0
    while len(placed) < n and attempts < 500:
        attempts += 1
        obj_id, kind, size, desc = LIBRARY[int(rng.integers(len(LIBRARY)))]
        cand = SynthObject.resting(
            obj_id, kind, size, float(rng.uniform(-300, 300)), float(rng.uniform(-200, 200)),
            float(rng.uniform(0, 180)), description=desc,
        )
        lo, hi = cand.cuboid.aabb()
        if all(aabb_gap(lo, hi, *p.cuboid.aabb()) > 40.0 for p in placed):
            placed.append(cand)
    cam = orbit_camera(float(rng.uniform(800, 1000)), float(rng.uniform(15, 40)), float(rng.uniform(-40, 40)))
    return SynthSpec(f"random_{seed}", seed, cam, tuple(placed), depth_noise_sigma=noise)


# ------------------------------------------------------------------ export


def export_bop(specs, out_dir, *, frames_per_scene: int = 10) -> Path:
    """Write specs as a BOP dataset: ``models/`` plus ``test/<scene>/`` directories."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = list(specs)
    write_model_table(out / "models", model_table_for(specs))
    for start in range(0, len(specs), frames_per_scene):
        scene_id = start // frames_per_scene + 1
        frames = [
            render_depth(s, scene_id=scene_id, frame_id=k)[0]
            for k, s in enumerate(specs[start : start + frames_per_scene])
        ]
        write_scene_dir(out / "test" / scene_dir_name(scene_id), frames)
    return out
