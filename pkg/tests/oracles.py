"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
from scipy.spatial import Delaunay

from poseqa.bop_ingest import Pose
from poseqa.geometry import Cuboid3D


def cube(center=(0, 0, 0), half=(0.5, 0.5, 0.5), R=None):
    return Cuboid3D(Pose(np.eye(3) if R is None else R, center), np.array(half, dtype=float))


def mc_iou(a: Cuboid3D, b: Cuboid3D, n: int, rng) -> float:
    """Monte-Carlo IoU: sample the union of both AABBs and count memberships."""
    lo = np.minimum(a.aabb()[0], b.aabb()[0])
    hi = np.maximum(a.aabb()[1], b.aabb()[1])
    p = rng.uniform(lo, hi, size=(n, 3))
    ia, ib = a.contains(p), b.contains(p)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def mc_convex_iou(a, b, n, rng):
    """Monte-Carlo IoU of two convex point sets via Delaunay membership."""
    da, db = Delaunay(a), Delaunay(b)
    lo = np.minimum(a.min(0), b.min(0))
    hi = np.maximum(a.max(0), b.max(0))
    p = rng.uniform(lo, hi, size=(n, 3))
    ia, ib = da.find_simplex(p) >= 0, db.find_simplex(p) >= 0
    return np.count_nonzero(ia & ib) / np.count_nonzero(ia | ib)


def seg_dist(p, a, b):
    d = b - a
    L2 = d @ d
    t = 0.0 if L2 == 0 else min(max((p - a) @ d / L2, 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * d)))


def removed_point_deviation(P, keep) -> float:
    """Largest distance of a dropped vertex from the chord that replaced it."""
    worst = 0.0
    for i, j in zip(keep[:-1], keep[1:]):
        for r in range(i + 1, j):
            worst = max(worst, seg_dist(P[r], P[i], P[j]))
    return worst


def random_path(rng, n):
    steps = rng.normal(0, rng.uniform(5, 60), size=(n - 1, 3))
    return np.vstack([np.zeros(3), np.cumsum(steps, axis=0)])


def revalidate(path, others, inflation, step=1.0, table_z=0.0):
    """Walk every segment in <= 1 mm steps against inflated AABBs and the table."""
    boxes = [(c.aabb()[0] - inflation, c.aabb()[1] + inflation) for c in others]
    for a, b in zip(path[:-1], path[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        for t in np.linspace(0.0, 1.0, n + 1):
            p = a + t * (b - a)
            if p[2] < table_z:
                return False
            if any(np.all(p >= lo) and np.all(p <= hi) for lo, hi in boxes):
                return False
    return True
