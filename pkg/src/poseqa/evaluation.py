"""Parsing model outputs and scoring them against the generated dataset.

Scores per task:

* object pose: area IoU of the 2D convex hulls of predicted and true corners
  (plus a 3D IoU that lifts both corner sets with the true corner depths);
* trajectory: success when the first/last points land on the source/target
  hulls, and the mean distance between the two paths after resampling both
  to 50 points by arc length;
* grasp: normalized coordinate error, the mean keypoint error divided by the
  true finger-base distance, minimised over the stored top-k grasps;
* rearrangement: recall of blockers hit by one-to-one matched markers;
* spatial / depth: yes-no accuracy.

Unparsable outputs count as failures for rates and are reported separately
("inf") for the error metrics.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EvalError
from .geometry import convex_iou3d, hull_iou, point_in_convex_polygon
from .qa import ALL_TASKS, TaskType

PIXEL_TOL = 0.5 * math.sqrt(2.0)  # rounding slack when testing integer points against float hulls
N_RESAMPLE = 50

_NUM = r"-?\d+(?:\.\d+)?"
_POINT_RE = re.compile(
    rf"<points\s+x\s*=\s*[\"']?\s*({_NUM})\s*[\"']?\s+y\s*=\s*[\"']?\s*({_NUM})\s*[\"']?\s*>(.*?)</points\s*>",
    re.IGNORECASE | re.DOTALL,
)
_PAIR_RE = re.compile(rf"\[\s*({_NUM})\s*,\s*({_NUM})\s*\]")
_BINARY_RE = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


def _num(s: str):
    return int(s) if re.fullmatch(r"-?\d+", s) else float(s)


# ------------------------------------------------------------------ parsing


def parse_bbox(raw: str):
    """Eight [u, v] corners from a ``{"bbox": [...]}`` answer."""
    m = re.search(r"\{.*\}", raw, re.DOTALL)
    if m:
        try:
            obj = json.loads(m.group(0))
            pts = obj.get("bbox") if isinstance(obj, dict) else None
            if (isinstance(pts, list) and len(pts) == 8
                    and all(isinstance(p, list) and len(p) == 2
                            and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in p) for p in pts)):
                return [list(p) for p in pts]
        except json.JSONDecodeError:
            pass
    m = re.search(r"bbox[\"']?\s*:\s*(\[.*\])", raw, re.DOTALL | re.IGNORECASE)
    if m:
        pairs = [[_num(a), _num(b)] for a, b in _PAIR_RE.findall(m.group(1))]
        if len(pairs) == 8:
            return pairs
    return None


def parse_points(raw: str):
    """All ``<points x y>label</points>`` elements, in order, as ([u, v], label)."""
    return [([_num(x), _num(y)], label.strip()) for x, y, label in _POINT_RE.findall(raw)]


def parse_grasp(raw: str):
    pts = parse_points(raw)
    return [p for p, _ in pts] if len(pts) == 5 else None


def parse_path(raw: str):
    pts = parse_points(raw)
    return [p for p, _ in pts] if len(pts) >= 2 else None


def parse_markers(raw: str):
    m = re.search(r"object\s+markers\s*:(.*)", raw, re.IGNORECASE | re.DOTALL)
    body = m.group(1) if m else raw
    pairs = [[_num(a), _num(b)] for a, b in _PAIR_RE.findall(body)]
    if not pairs and not m:
        return None
    return pairs


def parse_binary(raw: str):
    m = _BINARY_RE.match(raw or "")
    return m.group(1).lower() if m else None


PARSERS = {
    TaskType.OBJECT_POSE.value: parse_bbox,
    TaskType.GRASP.value: parse_grasp,
    TaskType.TRAJECTORY.value: parse_path,
    TaskType.REARRANGEMENT.value: parse_markers,
    TaskType.SPATIAL.value: parse_binary,
    TaskType.DEPTH.value: parse_binary,
}


@dataclass(frozen=True)
class PredictionRecord:
    qa_id: str
    task: str
    raw_text: str
    parsed: object = None

    @property
    def valid(self) -> bool:
        return self.parsed is not None


def parse_prediction(raw: str, task, qa_id: str = "") -> PredictionRecord:
    task = TaskType(task).value
    parsed = PARSERS[task](raw if isinstance(raw, str) else "")
    return PredictionRecord(qa_id, task, raw, parsed)


# ------------------------------------------------------------------ scoring


def score_pose(pred, gt_corners) -> float:
    return hull_iou(np.asarray(pred, dtype=np.float64), np.asarray(gt_corners, dtype=np.float64))


def lift_corners(corners, depths, K) -> np.ndarray:
    fx, fy, cx, cy = K
    uv = np.asarray(corners, dtype=np.float64)
    z = np.asarray(depths, dtype=np.float64)
    return np.stack([(uv[:, 0] - cx) * z / fx, (uv[:, 1] - cy) * z / fy, z], axis=1)


def score_pose_3d(pred, gt_corners, corner_depths, K) -> float:
    """3D IoU after lifting both corner sets with the true per-corner depths."""
    return convex_iou3d(lift_corners(pred, corner_depths, K), lift_corners(gt_corners, corner_depths, K))


def resample_polyline(points, n: int = N_RESAMPLE) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(p[:1], n, axis=0)
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, p[:, 0]), np.interp(t, s, p[:, 1])], axis=1)


def path_distance(pred, gt, n: int = N_RESAMPLE) -> float:
    return float(np.mean(np.linalg.norm(resample_polyline(pred, n) - resample_polyline(gt, n), axis=1)))


def score_trajectory(pred, gt_waypoints, source_hull, target_hull, tol: float = PIXEL_TOL) -> tuple[int, float]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    if len(p) < 2:
        return 0, math.inf
    sr = int(point_in_convex_polygon(p[0], np.asarray(source_hull, dtype=np.float64), tol)
             and point_in_convex_polygon(p[-1], np.asarray(target_hull, dtype=np.float64), tol))
    return sr, path_distance(p, gt_waypoints)


def nce(pred, gt, image_size=None) -> float:
    """Mean keypoint error over the five points, divided by the true base distance."""
    p = np.asarray(pred, dtype=np.float64).reshape(5, 2)
    g = np.asarray(gt, dtype=np.float64).reshape(5, 2)
    if image_size is not None:
        scale = np.asarray(image_size, dtype=np.float64)
        p, g = p / scale, g / scale
    d = float(np.linalg.norm(g[1] - g[2]))
    if d == 0:
        return math.inf
    return float(np.mean(np.linalg.norm(p - g, axis=1)) / d)


def score_grasp(pred, gt_grasps, image_size=None) -> float:
    return min(nce(pred, g, image_size) for g in gt_grasps)


def score_rearrangement(markers, blocker_hulls, tol: float = PIXEL_TOL) -> float:
    """Fraction of blockers claimed by a marker inside their hull; one marker per blocker."""
    if not blocker_hulls:
        raise ValueError("rearrangement needs at least one blocker")
    if not markers:
        return 0.0
    hulls = [np.asarray(h, dtype=np.float64).reshape(-1, 2) for h in blocker_hulls]
    centers = [h.mean(axis=0) for h in hulls]
    cands = []
    for i, m in enumerate(np.asarray(markers, dtype=np.float64).reshape(-1, 2)):
        for j, h in enumerate(hulls):
            if point_in_convex_polygon(m, h, tol):
                cands.append((float(np.linalg.norm(m - centers[j])), i, j))
    used_m, used_b = set(), set()
    for _, i, j in sorted(cands):
        if i not in used_m and j not in used_b:
            used_m.add(i)
            used_b.add(j)
    return len(used_b) / len(hulls)


def score_binary(pred, gt) -> int:
    p, g = parse_binary(pred), parse_binary(gt)
    return int(p is not None and p == g)


# --------------------------------------------------------------- aggregate


@dataclass
class MetricReport:
    tasks: dict = field(default_factory=dict)
    n_predictions: int = 0
    n_missing: int = 0  # dataset QAs without a prediction

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return v

        return {
            "n_predictions": self.n_predictions,
            "n_missing": self.n_missing,
            "tasks": {t: {k: clean(v) for k, v in m.items()} for t, m in self.tasks.items()},
        }

    def write(self, path, csv_path=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["task", "metric", "value"])
                for t, m in self.to_dict()["tasks"].items():
                    for k, v in m.items():
                        w.writerow([t, k, v])


def _mean(values) -> float:
    return float(np.mean(values)) if values else 0.0


def aggregate(dataset, predictions, *, image_normalized_nce: bool = False) -> MetricReport:
    """Score prediction dicts ``{qa_id, raw_text}`` against dataset records."""
    by_id = {r["qa_id"]: r for r in dataset}
    acc = {t: {"n": 0, "invalid": 0, "scores": [], "extra": []} for t in ALL_TASKS}
    seen = set()
    for p in predictions:
        qid = p.get("qa_id")
        if qid not in by_id:
            raise EvalError("join", f"prediction for unknown qa_id {qid!r}")
        seen.add(qid)
        qa = by_id[qid]
        task, meta = qa["task"], qa["meta"]
        rec = parse_prediction(p.get("raw_text", ""), task, qid)
        a = acc[task]
        a["n"] += 1
        if not rec.valid:
            a["invalid"] += 1
            a["scores"].append(0.0)
            continue
        if task == TaskType.OBJECT_POSE.value:
            a["scores"].append(score_pose(rec.parsed, meta["corners"]))
            a["extra"].append(score_pose_3d(rec.parsed, meta["corners"], meta["corner_depths"], meta["K"]))
        elif task == TaskType.TRAJECTORY.value:
            sr, dist = score_trajectory(rec.parsed, meta["waypoints"], meta["source_hull"], meta["target_hull"])
            a["scores"].append(float(sr))
            a["extra"].append(dist)
        elif task == TaskType.GRASP.value:
            size = meta["image_size"] if image_normalized_nce else None
            a["extra"].append(score_grasp(rec.parsed, meta["gt_grasps"], size))
        elif task == TaskType.REARRANGEMENT.value:
            a["scores"].append(score_rearrangement(rec.parsed, meta["blocker_hulls"]))
        else:
            a["scores"].append(float(rec.parsed == qa["answer"].lower()))

    report = MetricReport(n_predictions=len(seen), n_missing=len(by_id) - len(seen))
    for t, a in acc.items():
        if a["n"] == 0:
            continue
        m = {"n": a["n"], "invalid": a["invalid"]}
        if t == TaskType.OBJECT_POSE.value:
            m["mean_hull_iou"] = _mean(a["scores"])
            m["mean_iou3d"] = float(np.sum(a["extra"]) / a["n"])
        elif t == TaskType.TRAJECTORY.value:
            m["sr"] = 100.0 * _mean(a["scores"])
            m["dist_err"] = _mean(a["extra"]) if a["extra"] else math.inf
        elif t == TaskType.GRASP.value:
            m["nce"] = _mean(a["extra"]) if a["extra"] else math.inf
        elif t == TaskType.REARRANGEMENT.value:
            m["recall"] = 100.0 * _mean(a["scores"])
        else:
            m["sr"] = 100.0 * _mean(a["scores"])
        report.tasks[t] = m
    return report


def load_jsonl(path) -> list[dict]:
    out = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise EvalError("read", f"cannot read {path}: {e}") from None
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise EvalError("parse", f"{path}:{n}: {e}") from None
    return out
