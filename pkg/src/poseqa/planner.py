"""Pick-and-place paths between object pairs.

A goal-biased RRT plans the carried object's centroid (a point) through the
world frame, with every other object represented by its inflated
axis-aligned box and the table as the half-space z < 0. Raw paths are
shortened with Ramer-Douglas-Peucker; any simplified segment that cuts
through an obstacle is re-split using the original waypoints.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .bop_ingest import CameraIntrinsics, ModelInfo, SceneFrame
from .errors import GeometryError, PlanError
from .geometry import Cuboid3D, cuboid_from_instance, project_points, to_pixels
from .world_frame import WorldTransform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlannerParams:
    margin: float = 200.0  # mm beyond the object centroids
    goal_bias: float = 0.10
    vertical_bias: float = 0.70  # share of free samples drawn above the tallest obstacle
    max_iters: int = 5000
    step: float = 50.0
    goal_tol: float = 20.0
    edge_step: float = 10.0
    inflation: float = 5.0
    lift_clearance: float = 10.0
    rdp_tol: float = 30.0
    use_cloud: bool = False
    cloud_radius: float = 10.0
    max_pairs: int | None = None


@dataclass(frozen=True, eq=False)
class ObstacleSet:
    lo: np.ndarray  # (M, 3) un-inflated AABB minima, world mm
    hi: np.ndarray  # (M, 3)
    ids: tuple = ()
    inflation: float = 5.0
    cloud: np.ndarray | None = None
    cloud_radius: float = 10.0
    table_z: float | None = 0.0  # None disables the table half-space

    def __post_init__(self):
        if self.inflation < 0:
            raise ValueError("inflation must be >= 0")

    @classmethod
    def from_cuboids(cls, cuboids, ids=(), **kw) -> "ObstacleSet":
        boxes = [c.aabb() for c in cuboids]
        lo = np.array([b[0] for b in boxes]).reshape(-1, 3)
        hi = np.array([b[1] for b in boxes]).reshape(-1, 3)
        return cls(lo, hi, tuple(ids), **kw)

    @property
    def inflated(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo - self.inflation, self.hi + self.inflation

    def top(self) -> float | None:
        return float(self.hi[:, 2].max()) if len(self.hi) else None

    def point_free(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        if self.table_z is not None and p[2] < self.table_z:
            return False
        lo, hi = self.inflated
        if len(lo) and np.any(np.all((p >= lo) & (p <= hi), axis=1)):
            return False
        if self.cloud is not None and len(self.cloud):
            if np.min(np.sum((self.cloud - p) ** 2, axis=1)) <= self.cloud_radius**2:
                return False
        return True

    def segment_free(self, a, b) -> bool:
        """Exact closed-box test of segment ``a -> b``."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if self.table_z is not None and (a[2] < self.table_z or b[2] < self.table_z):
            return False
        lo, hi = self.inflated
        if len(lo):
            d = b - a
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - a) / d
                t2 = (hi - a) / d
            par = d == 0
            inside_par = (a >= lo) & (a <= hi)
            tmin = np.where(par, np.where(inside_par, -np.inf, np.inf), np.minimum(t1, t2))
            tmax = np.where(par, np.where(inside_par, np.inf, -np.inf), np.maximum(t1, t2))
            enter, leave = tmin.max(axis=1), tmax.min(axis=1)
            if np.any((enter <= leave) & (leave >= 0.0) & (enter <= 1.0)):
                return False
        if self.cloud is not None and len(self.cloud):
            return _segment_clear_of_cloud(a, b, self.cloud, self.cloud_radius)
        return True


def _segment_clear_of_cloud(a, b, cloud, radius) -> bool:
    lo = np.minimum(a, b) - radius
    hi = np.maximum(a, b) + radius
    near = cloud[np.all((cloud >= lo) & (cloud <= hi), axis=1)]
    if not len(near):
        return True
    d = b - a
    L2 = float(d @ d)
    t = np.zeros(len(near)) if L2 == 0 else np.clip((near - a) @ d / L2, 0.0, 1.0)
    closest = a + t[:, None] * d
    return bool(np.min(np.sum((near - closest) ** 2, axis=1)) > radius**2)


@dataclass(frozen=True, eq=False)
class SamplingBounds:
    lo: np.ndarray
    hi: np.ndarray
    band_lo: float | None = None  # lower z of the "above the workspace" band

    def contains(self, p, tol: float = 1e-9) -> bool:
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))


def sampling_bounds(centroids, margin: float = 200.0, obstacle_top: float | None = None,
                    table_z: float = 0.0) -> SamplingBounds:
    """Box around the object centroids, ``margin`` wider in x/y and above."""
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    lo = c.min(axis=0)
    hi = c.max(axis=0)
    lo = np.array([lo[0] - margin, lo[1] - margin, table_z])
    hi = np.array([hi[0] + margin, hi[1] + margin, hi[2] + margin])
    band = None
    if obstacle_top is not None and table_z <= obstacle_top < hi[2]:
        band = float(obstacle_top)
    return SamplingBounds(lo, hi, band)


def sample_config(rng: np.random.Generator, bounds: SamplingBounds, goal, goal_bias: float,
                  vertical_bias: float) -> tuple[np.ndarray, bool]:
    """One RRT sample; returns ``(point, drawn_at_goal)``."""
    if rng.random() < goal_bias:
        return np.asarray(goal, dtype=np.float64), True
    x = rng.uniform(bounds.lo[0], bounds.hi[0])
    y = rng.uniform(bounds.lo[1], bounds.hi[1])
    if bounds.band_lo is not None and rng.random() < vertical_bias:
        z = rng.uniform(bounds.band_lo, bounds.hi[2])
    else:
        z = rng.uniform(bounds.lo[2], bounds.hi[2])
    return np.array([x, y, z]), False


@dataclass
class PlanStats:
    iterations: int = 0
    samples: int = 0
    goal_samples: int = 0


def rrt_plan(start, goal, obstacles: ObstacleSet, params: PlannerParams = PlannerParams(),
             seed=0, bounds: SamplingBounds | None = None, stats: PlanStats | None = None) -> list[np.ndarray]:
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if not obstacles.point_free(start):
        raise PlanError("start_in_collision")
    if not obstacles.point_free(goal):
        raise PlanError("goal_in_collision")
    if bounds is None:
        bounds = sampling_bounds(np.stack([start, goal]), params.margin, obstacles.top())
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stats = stats if stats is not None else PlanStats()

    nodes = np.empty((params.max_iters + 2, 3))
    parent = np.full(params.max_iters + 2, -1, dtype=np.int64)
    nodes[0] = start
    n = 1
    end = -1
    if np.linalg.norm(goal - start) <= params.goal_tol and obstacles.segment_free(start, goal):
        end = 0
    for _ in range(params.max_iters if end < 0 else 0):
        stats.iterations += 1
        sample, at_goal = sample_config(rng, bounds, goal, params.goal_bias, params.vertical_bias)
        stats.samples += 1
        stats.goal_samples += at_goal
        d2 = np.sum((nodes[:n] - sample) ** 2, axis=1)
        near = int(np.argmin(d2))
        delta = sample - nodes[near]
        dist = float(np.sqrt(d2[near]))
        if dist == 0.0:
            continue
        new = sample if dist <= params.step else nodes[near] + delta * (params.step / dist)
        if not obstacles.segment_free(nodes[near], new):
            continue
        nodes[n] = new
        parent[n] = near
        n += 1
        if np.linalg.norm(goal - new) <= params.goal_tol:
            end = n - 1
            break
    if end < 0:
        raise PlanError("no_path", f"no connection after {params.max_iters} iterations")

    path = []
    k = end
    while k >= 0:
        path.append(nodes[k].copy())
        k = parent[k]
    path.reverse()
    if not np.array_equal(path[-1], goal) and obstacles.segment_free(path[-1], goal):
        path.append(goal.copy())
    return path


# -------------------------------------------------------------------- RDP


def _point_segment_distance(p, a, b) -> np.ndarray:
    p = np.atleast_2d(p)
    d = b - a
    L2 = float(d @ d)
    if L2 == 0.0:
        return np.linalg.norm(p - a, axis=1)
    t = np.clip((p - a) @ d / L2, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * d), axis=1)


def rdp_indices(path, tol: float) -> list[int]:
    P = np.asarray(path, dtype=np.float64)
    if len(P) < 2:
        raise ValueError("path needs at least two points")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    keep = np.zeros(len(P), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(P) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        dist = _point_segment_distance(P[i + 1 : j], P[i], P[j])
        k = int(np.argmax(dist))
        if dist[k] > tol:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return np.flatnonzero(keep).tolist()


def rdp_simplify(path, tol: float) -> list[np.ndarray]:
    """Ramer-Douglas-Peucker on a 3D polyline (keeps both endpoints)."""
    P = np.asarray(path, dtype=np.float64)
    return [P[i].copy() for i in rdp_indices(P, tol)]


def simplify_safely(path, tol: float, obstacles: ObstacleSet) -> list[np.ndarray]:
    """RDP, then re-split any simplified segment that collides."""
    P = np.asarray(path, dtype=np.float64)
    keep = rdp_indices(P, tol)
    out = [keep[0]]
    stack = list(zip(keep[:-1], keep[1:]))[::-1]
    while stack:
        i, j = stack.pop()
        if j - i < 2 or obstacles.segment_free(P[i], P[j]):
            out.append(j)
            continue
        dist = _point_segment_distance(P[i + 1 : j], P[i], P[j])
        m = i + 1 + int(np.argmax(dist))
        stack.append((m, j))
        stack.append((i, m))
    return [P[k].copy() for k in out]


# ---------------------------------------------------------------- pairs


@dataclass(frozen=True, eq=False)
class Trajectory:
    source_id: int
    target_id: int
    waypoints_3d: np.ndarray  # (n, 3) world mm
    waypoints_2d: np.ndarray  # (n, 2) int pixels

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "target_id": self.target_id,
            "waypoints_3d": self.waypoints_3d.tolist(),
            "waypoints_2d": self.waypoints_2d.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Trajectory":
        return cls(int(d["source_id"]), int(d["target_id"]),
                   np.asarray(d["waypoints_3d"], dtype=np.float64).reshape(-1, 3),
                   np.asarray(d["waypoints_2d"], dtype=np.int64).reshape(-1, 2))


@dataclass
class PairReport:
    attempted: int = 0
    failures: list = field(default_factory=list)  # dicts: source, target, reason


def pair_seed(seed: int, scene_id: int, frame_id: int, source: int, target: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scene_id, frame_id, source, target]))


def lifted(centroid, box_lo_z: float, clearance: float) -> np.ndarray:
    """Raise a centroid so its object's box bottom clears the table by ``clearance``."""
    p = np.array(centroid, dtype=np.float64)
    p[2] += max(0.0, clearance - box_lo_z)
    return p


def world_cuboids(frame: SceneFrame, world: WorldTransform, model_table: dict[int, ModelInfo]) -> dict[int, Cuboid3D]:
    T = world.cam_to_world_mm
    return {
        i.instance_id: cuboid_from_instance(i, model_table[i.obj_id]).transformed(T)
        for i in frame.instances
    }


def project_world_path(points_world, world: WorldTransform, K: CameraIntrinsics) -> np.ndarray:
    return to_pixels(project_points(world.to_camera_mm(points_world), K), K)


def plan_pair_trajectories(
    frame: SceneFrame,
    world: WorldTransform,
    model_table: dict[int, ModelInfo],
    params: PlannerParams = PlannerParams(),
    seed: int = 0,
    *,
    cuboids: dict[int, Cuboid3D] | None = None,
    static_obstacles: tuple[Cuboid3D, ...] = (),
    obstacle_cloud: np.ndarray | None = None,
) -> tuple[list[Trajectory], PairReport]:
    """Plan every unordered instance pair (lower id carried to higher id)."""
    cubs = cuboids if cuboids is not None else world_cuboids(frame, world, model_table)
    ids = sorted(cubs)
    centroids = np.array([cubs[i].center for i in ids])
    tops = [cubs[i].aabb()[1][2] for i in ids] + [c.aabb()[1][2] for c in static_obstacles]
    bounds = sampling_bounds(centroids, params.margin, max(tops) if tops else None)
    report = PairReport()
    out: list[Trajectory] = []

    pairs = list(itertools.combinations(ids, 2))
    if params.max_pairs is not None:
        pairs = pairs[: params.max_pairs]
    for src, tgt in pairs:
        report.attempted += 1
        others = [cubs[i] for i in ids if i not in (src, tgt)] + list(static_obstacles)
        cloud = None
        if params.use_cloud and obstacle_cloud is not None:
            cloud = obstacle_cloud[~(cubs[src].inflated(params.inflation).contains(obstacle_cloud)
                                     | cubs[tgt].inflated(params.inflation).contains(obstacle_cloud))]
        obs = ObstacleSet.from_cuboids(others, inflation=params.inflation, cloud=cloud,
                                       cloud_radius=params.cloud_radius)
        start = lifted(cubs[src].center, cubs[src].aabb()[0][2], params.lift_clearance)
        goal = lifted(cubs[tgt].center, cubs[tgt].aabb()[0][2], params.lift_clearance)
        rng = pair_seed(seed, frame.scene_id, frame.frame_id, src, tgt)
        try:
            raw = rrt_plan(start, goal, obs, params, rng, bounds)
        except PlanError as e:
            report.failures.append({"source": src, "target": tgt, "reason": e.kind})
            continue
        path = simplify_safely(raw, params.rdp_tol, obs)
        if not all(obs.segment_free(a, b) for a, b in zip(path[:-1], path[1:])):
            report.failures.append({"source": src, "target": tgt, "reason": "recollide"})
            continue
        try:
            px = project_world_path(np.array(path), world, frame.intrinsics)
        except GeometryError as e:
            report.failures.append({"source": src, "target": tgt, "reason": e.kind})
            continue
        out.append(Trajectory(src, tgt, np.array(path), px))
    return out, report
