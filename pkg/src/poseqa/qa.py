"""Question-answer generation from frame annotations.

Six task types are produced per frame. Objects are named by their model
description; when a description occurs more than once in a frame, a
positional attribute (leftmost, rightmost, topmost, bottommost) picks out
the instance, and instances that no attribute isolates are left out.
Question wording is drawn from a small template bank with a seeded RNG,
so output is reproducible byte for byte.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .bop_ingest import CameraIntrinsics
from .errors import GeometryError
from .geometry import Cuboid3D, convex_hull_2d, project_points, to_pixels
from .grasp import POINT_LABELS, base_distance_px


class TaskType(str, Enum):
    OBJECT_POSE = "object_pose"
    GRASP = "grasp"
    TRAJECTORY = "trajectory"
    REARRANGEMENT = "rearrangement"
    SPATIAL = "spatial_reasoning"
    DEPTH = "relative_depth"


ALL_TASKS = tuple(t.value for t in TaskType)
BINARY_TASKS = (TaskType.SPATIAL.value, TaskType.DEPTH.value)

RELATION_PHRASES = {
    "left_of": "to the left of",
    "right_of": "to the right of",
    "above": "above",
    "below": "below",
    "closer": "closer to the camera than",
    "farther": "farther from the camera than",
}
OPPOSITE = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above",
            "closer": "farther", "farther": "closer"}
ATTRIBUTES = ("leftmost", "rightmost", "topmost", "bottommost")


@dataclass(frozen=True)
class QAParams:
    spatial_margin_frac: float = 0.02  # of image width (height for vertical)
    depth_margin_frac: float = 0.05  # of the mean camera z of the pair
    attribute_margin_px: float = 5.0
    max_trajectory_qas: int | None = 30
    max_relation_qas: int | None = 40
    min_grasp_base_px: float = 3.0
    min_visib_fract: float = 0.0


@dataclass(frozen=True)
class ReferringExpression:
    instance_id: int
    base_description: str
    positional_attribute: str | None = None

    def text(self) -> str:
        if self.positional_attribute:
            return f"the {self.positional_attribute} instance of the {self.base_description}"
        return f"the {self.base_description}"


@dataclass(frozen=True, eq=False)
class QAPair:
    image: str
    scene_id: int
    frame_id: int
    task: str
    question: str
    answer: str
    payload: object
    meta: dict = field(default_factory=dict)

    def record(self, qa_id: str) -> dict:
        return {"qa_id": qa_id, "image": self.image, "scene_id": self.scene_id, "frame_id": self.frame_id,
                "task": self.task, "question": self.question, "answer": self.answer, "meta": self.meta}


@dataclass(frozen=True, eq=False)
class ObjectView:
    """Image-space facts about one instance."""

    instance_id: int
    description: str
    cuboid_cam: Cuboid3D
    center_uv: np.ndarray  # float pixels
    center_z: float  # mm
    corners_uv: np.ndarray  # (8, 2) float
    corners_px: np.ndarray  # (8, 2) int, clamped
    corner_depths: np.ndarray  # (8,) mm
    marker_px: np.ndarray  # (2,) int, projected cuboid centre

    @property
    def hull(self) -> np.ndarray:
        return convex_hull_2d(self.corners_uv)


# -------------------------------------------------------------- templates


def load_templates(path=None) -> dict[str, list[str]]:
    if path is None:
        text = resources.files("poseqa").joinpath("resources/templates.txt").read_text()
    else:
        text = Path(path).read_text()
    bank: dict[str, list[str]] = {t: [] for t in ALL_TASKS}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        task, _, template = line.partition("\t")
        if task not in bank:
            raise ValueError(f"unknown task in template bank: {task!r}")
        bank[task].append(template.strip())
    thin = [t for t, v in bank.items() if len(v) < 3]
    if thin:
        raise ValueError(f"need at least 3 templates for: {', '.join(thin)}")
    return bank


def bounds_clause(width: int, height: int) -> str:
    return (f"The coordinates should obey the limits of the image, and thus x coordinate should be "
            f"between (0, {width}) and y coordinate should be between (0, {height}).")


# ----------------------------------------------------------- serializers


def _pairs(points) -> list[list[int]]:
    return [[int(u), int(v)] for u, v in np.asarray(points).reshape(-1, 2)]


def format_bbox(points) -> str:
    return json.dumps({"bbox": _pairs(points)})


def format_points(points, labels) -> str:
    return "".join(f'<points x="{u}" y="{v}">{lab}</points>' for (u, v), lab in zip(_pairs(points), labels))


def format_grasp(points) -> str:
    return format_points(points, POINT_LABELS)


def format_path(points) -> str:
    pts = _pairs(points)
    return format_points(pts, [f"point{k}" for k in range(1, len(pts) + 1)])


def format_markers(points) -> str:
    return "[object markers: " + ", ".join(f"[{u}, {v}]" for u, v in _pairs(points)) + "]"


def format_binary(yes: bool) -> str:
    return "Yes" if yes else "No"


# ------------------------------------------------------------- relations


def relation_from_centers(a_uv, b_uv, width: int, height: int, margin_frac: float = 0.02) -> str | None:
    du, dv = float(b_uv[0] - a_uv[0]), float(b_uv[1] - a_uv[1])
    if abs(du) >= abs(dv) and abs(du) >= margin_frac * width:
        return "left_of" if du > 0 else "right_of"
    if abs(dv) > abs(du) and abs(dv) >= margin_frac * height:
        return "above" if dv > 0 else "below"
    return None


def spatial_relation(a: Cuboid3D, b: Cuboid3D, K: CameraIntrinsics, margin_frac: float = 0.02) -> str | None:
    """Image-space relation of a to b from their projected cuboid centres."""
    uv = project_points(np.array([a.center, b.center]), K)
    return relation_from_centers(uv[0], uv[1], K.width, K.height, margin_frac)


def depth_relation(a: Cuboid3D, b: Cuboid3D, margin_frac: float = 0.05) -> str | None:
    za, zb = float(a.center[2]), float(b.center[2])
    if abs(zb - za) < margin_frac * 0.5 * (za + zb) or za == zb:
        return None
    return "closer" if za < zb else "farther"


def relation_holds(relation: str, a: Cuboid3D, b: Cuboid3D, K: CameraIntrinsics, params: QAParams = QAParams()) -> bool:
    if relation in ("closer", "farther"):
        return depth_relation(a, b, params.depth_margin_frac) == relation
    return spatial_relation(a, b, K, params.spatial_margin_frac) == relation


# -------------------------------------------------------- disambiguation


def object_views(ann, params: QAParams = QAParams()) -> dict[int, ObjectView]:
    K = ann.intrinsics
    out = {}
    for inst in ann.instances:
        if inst.visib_fract is not None and inst.visib_fract < params.min_visib_fract:
            continue
        c = inst.cuboid_cam
        try:
            uv = project_points(c.corners(), K)
            cuv = project_points(c.center[None, :], K)[0]
        except GeometryError:
            continue
        out[inst.instance_id] = ObjectView(
            inst.instance_id, inst.description, c, cuv, float(c.center[2]), uv, to_pixels(uv, K),
            c.corners()[:, 2].copy(), to_pixels(cuv[None, :], K)[0],
        )
    return out


def _unique_extreme(values: dict[int, float], iid: int, sign: float, margin: float) -> bool:
    mine = sign * values[iid]
    return all(mine + margin <= sign * v for j, v in values.items() if j != iid)


def disambiguate(views: dict[int, ObjectView], margin_px: float = 5.0) -> dict[int, ReferringExpression]:
    """Referring expressions for every instance that can be named unambiguously."""
    groups: dict[str, list[int]] = {}
    for iid in sorted(views):
        groups.setdefault(views[iid].description, []).append(iid)
    out = {}
    for desc, ids in groups.items():
        if len(ids) == 1:
            out[ids[0]] = ReferringExpression(ids[0], desc)
            continue
        us = {i: float(views[i].center_uv[0]) for i in ids}
        vs = {i: float(views[i].center_uv[1]) for i in ids}
        tests = (("leftmost", us, 1.0), ("rightmost", us, -1.0), ("topmost", vs, 1.0), ("bottommost", vs, -1.0))
        for iid in ids:
            for name, values, sign in tests:
                if _unique_extreme(values, iid, sign, margin_px):
                    out[iid] = ReferringExpression(iid, desc, name)
                    break
    return out


# ------------------------------------------------------------ generation


def frame_rng(seed: int, scene_id: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scene_id, frame_id, 0x51A]))


def _balanced_yes(rng: np.random.Generator, n: int) -> np.ndarray:
    """Exactly half True (odd counts resolved by a coin), in random positions."""
    n_yes = n // 2 + (int(rng.integers(2)) if n % 2 else 0)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_yes]] = True
    return mask


def _cap(rng: np.random.Generator, items: list, cap: int | None) -> list:
    if cap is None or len(items) <= cap:
        return items
    keep = np.sort(rng.permutation(len(items))[:cap])
    return [items[i] for i in keep]


def _hull_list(hull) -> list[list[float]]:
    return np.asarray(hull, dtype=np.float64).tolist()


def generate_frame_qas(ann, templates: dict[str, list[str]] | None = None, seed: int = 0,
                       params: QAParams = QAParams(), tasks=ALL_TASKS) -> list[QAPair]:
    templates = templates or load_templates()
    tasks = {TaskType(t).value for t in tasks}
    K = ann.intrinsics
    rng = frame_rng(seed, ann.scene_id, ann.frame_id)
    views = object_views(ann, params)
    refs = disambiguate(views, params.attribute_margin_px)
    bounds = bounds_clause(K.width, K.height)
    base_meta = {"image_size": [K.width, K.height]}
    out: list[QAPair] = []

    def ask(task, answer, payload, meta, **slots):
        bank = templates[task]
        q = bank[int(rng.integers(len(bank)))].format(bounds=bounds, **slots)
        out.append(QAPair(ann.image, ann.scene_id, ann.frame_id, task, q, answer, payload, {**base_meta, **meta}))

    ids = sorted(refs)
    if TaskType.OBJECT_POSE.value in tasks:
        for iid in ids:
            v = views[iid]
            ask(TaskType.OBJECT_POSE.value, format_bbox(v.corners_px), _pairs(v.corners_px),
                {"instance_id": iid, "corners": _pairs(v.corners_px), "hull": _hull_list(v.hull),
                 "corner_depths": v.corner_depths.tolist(), "K": [K.fx, K.fy, K.cx, K.cy]},
                a=refs[iid].text())

    if TaskType.GRASP.value in tasks:
        for iid in ids:
            pts = [np.asarray(g.points_2d) for g in ann.grasps.get(iid, [])
                   if g.points_2d is not None and base_distance_px(g.points_2d) >= params.min_grasp_base_px]
            if not pts:
                continue
            ask(TaskType.GRASP.value, format_grasp(pts[0]), _pairs(pts[0]),
                {"instance_id": iid, "gt_grasps": [_pairs(p) for p in pts]}, a=refs[iid].text())

    if TaskType.TRAJECTORY.value in tasks:
        trajs = [t for t in ann.trajectories if t.source_id in refs and t.target_id in refs]
        for t in _cap(rng, trajs, params.max_trajectory_qas):
            ask(TaskType.TRAJECTORY.value, format_path(t.waypoints_2d), _pairs(t.waypoints_2d),
                {"source_id": t.source_id, "target_id": t.target_id, "waypoints": _pairs(t.waypoints_2d),
                 "source_hull": _hull_list(views[t.source_id].hull),
                 "target_hull": _hull_list(views[t.target_id].hull)},
                a=refs[t.source_id].text(), b=refs[t.target_id].text())

    if TaskType.REARRANGEMENT.value in tasks:
        for iid in ids:
            label = ann.clutter.get(iid)
            if label is None or not label.fully_cluttered or not all(b in views for b in label.blockers):
                continue
            markers = [views[b].marker_px for b in label.blockers]
            ask(TaskType.REARRANGEMENT.value, format_markers(markers), _pairs(markers),
                {"target_id": iid, "blockers": list(label.blockers), "markers": _pairs(markers),
                 "blocker_hulls": [_hull_list(views[b].hull) for b in label.blockers]},
                a=refs[iid].text())

    want_s, want_d = TaskType.SPATIAL.value in tasks, TaskType.DEPTH.value in tasks
    if want_s or want_d:
        pairs = []
        for a, b in itertools.combinations(ids, 2):
            s = spatial_relation(views[a].cuboid_cam, views[b].cuboid_cam, K, params.spatial_margin_frac)
            d = depth_relation(views[a].cuboid_cam, views[b].cuboid_cam, params.depth_margin_frac)
            if s is not None and d is not None:
                pairs.append((a, b, s, d))
        cap = None if params.max_relation_qas is None else params.max_relation_qas // 3
        pairs = _cap(rng, pairs, cap)
        if want_s:
            yes = _balanced_yes(rng, len(pairs))
            for (a, b, s, _), y in zip(pairs, yes):
                asked = s if y else OPPOSITE[s]
                ask(TaskType.SPATIAL.value, format_binary(bool(y)), "yes" if y else "no",
                    {"a": a, "b": b, "relation": asked, "true_relation": s},
                    a=refs[a].text(), b=refs[b].text(), relation=RELATION_PHRASES[asked])
        if want_d:
            ordered = [(a, b, d) for a, b, _, d in pairs] + [(b, a, OPPOSITE[d]) for a, b, _, d in pairs]
            yes = _balanced_yes(rng, len(ordered))
            for (a, b, d), y in zip(ordered, yes):
                asked = d if y else OPPOSITE[d]
                ask(TaskType.DEPTH.value, format_binary(bool(y)), "yes" if y else "no",
                    {"a": a, "b": b, "relation": asked, "true_relation": d},
                    a=refs[a].text(), b=refs[b].text(), relation=RELATION_PHRASES[asked])
    return out


# ----------------------------------------------------------------- output


def qa_id(scene_id: int, frame_id: int, k: int) -> str:
    return f"{scene_id:06d}-{frame_id:06d}-{k:03d}"


def dataset_lines(frames_qas) -> list[str]:
    """JSONL lines for per-frame QA lists, in (scene, frame) order."""
    lines = []
    for qas in sorted(frames_qas, key=lambda q: (q[0].scene_id, q[0].frame_id) if q else (-1, -1)):
        for k, qa in enumerate(qas):
            lines.append(json.dumps(qa.record(qa_id(qa.scene_id, qa.frame_id, k))))
    return lines


def corpus_stats(records) -> dict:
    counts = {t: 0 for t in ALL_TASKS}
    yes = {t: 0 for t in BINARY_TASKS}
    for r in records:
        counts[r["task"]] += 1
        if r["task"] in yes and r["answer"] == "Yes":
            yes[r["task"]] += 1
    total = sum(counts.values())
    return {
        "total": total,
        "tasks": {t: {"count": c, "percent": 100.0 * c / total if total else 0.0} for t, c in counts.items()},
        "yes_fraction": {t: (yes[t] / counts[t] if counts[t] else None) for t in BINARY_TASKS},
    }
